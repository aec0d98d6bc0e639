"""
Tests for multi-view fusion and the binary feature-file codec.
"""

import logging
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))

from mammo_multiview.core.errors import DataIOError, FormatVersionError, IntegrityError
from mammo_multiview.core.extractor import FeatureMatrix, FeatureVector
from mammo_multiview.core.feature_io import (
    LEVEL_IMAGE,
    LEVEL_SIDE,
    decode_features,
    encode_features,
    read_features,
    table_level,
    write_features,
)
from mammo_multiview.core.fusion import build_image_table, build_training_table, fuse_side
from mammo_multiview.core.labels import (
    ALL_VIEWS,
    BIRADS5,
    BiRadsLabel,
    DensityLabel,
    ImageRecord,
    Laterality,
    StudyRecord,
    ViewKind,
)

L, R = Laterality.L, Laterality.R
CC, MLO = ViewKind.CC, ViewKind.MLO


def vector(values, sid="S1", lat=L, view=CC, diag=0, dens=1):
    return FeatureVector(np.asarray(values, dtype=np.float64), sid, lat, view, diag, dens)


def view_matrix(tag, study_ids, width=3, diag=None, dens=None):
    n = len(study_ids)
    rng = np.random.default_rng(ALL_VIEWS.index(tag))
    return FeatureMatrix(
        values=rng.uniform(size=(n, width)).astype(np.float32),
        study_ids=list(study_ids),
        lateralities=[tag.laterality] * n,
        views=[tag.view] * n,
        y_diag=np.asarray(diag if diag is not None else [0] * n, dtype=np.intp),
        y_dens=np.asarray(dens if dens is not None else [1] * n, dtype=np.intp),
        views_present=np.full(n, 1 if tag.view is CC else 2, dtype=np.uint8),
        scheme=BIRADS5,
    )


def studies_for(study_ids):
    studies = []
    for sid in study_ids:
        images = tuple(ImageRecord(sid, tag.laterality, tag.view, f"{sid}.pgm",
                                   BiRadsLabel.BIRADS_1, DensityLabel.B) for tag in ALL_VIEWS)
        studies.append(StudyRecord(sid, images))
    return studies


class TestFuseSide(unittest.TestCase):
    """Test cases for fuse_side."""

    def test_mean_and_labels(self):
        """Values are averaged and labels take the larger view label."""
        side = fuse_side(vector([1.0, 2.0, 3.0], diag=0, dens=2),
                         vector([3.0, 2.0, 1.0], view=MLO, diag=3, dens=1))
        np.testing.assert_allclose(side.values, [2.0, 2.0, 2.0])
        self.assertEqual(side.label_diag, 3)
        self.assertEqual(side.label_dens, 2)
        self.assertEqual(side.views_present, 3)

    def test_identical_vectors(self):
        """Fusing a vector with itself returns it."""
        v = [0.5, 0.25]
        np.testing.assert_allclose(fuse_side(vector(v), vector(v, view=MLO)).values, v)

    def test_commutative_values(self):
        """View order does not change the fused values."""
        rng = np.random.default_rng(0)
        a, b = rng.uniform(size=8), rng.uniform(size=8)
        ab = fuse_side(vector(a), vector(b, view=MLO)).values
        ba = fuse_side(vector(b), vector(a, view=MLO)).values
        np.testing.assert_allclose(ab, ba)

    def test_contraction(self):
        """The fused vector is the midpoint of its inputs."""
        rng = np.random.default_rng(1)
        for _ in range(50):
            a, b = rng.normal(size=6), rng.normal(size=6)
            fused = fuse_side(vector(a), vector(b, view=MLO)).values
            self.assertLessEqual(np.linalg.norm(fused - a), np.linalg.norm(b - a) / 2 + 1e-12)

    def test_single_view_passthrough(self):
        """A lone view passes through with its presence bit."""
        side = fuse_side(None, vector([4.0, 5.0], view=MLO, diag=2))
        np.testing.assert_allclose(side.values, [4.0, 5.0])
        self.assertEqual(side.views_present, 2)
        self.assertTrue(side.has(MLO))
        self.assertFalse(side.has(CC))
        self.assertEqual(side.label_diag, 2)

    def test_errors(self):
        """Invalid view pairs are rejected."""
        with self.assertRaises(ValueError):
            fuse_side(None, None)
        with self.assertRaises(ValueError):
            fuse_side(vector([1.0, 2.0]), vector([1.0], view=MLO))
        with self.assertRaises(IntegrityError):
            fuse_side(vector([1.0]), vector([1.0], sid="S2", view=MLO))
        with self.assertRaises(IntegrityError):
            fuse_side(vector([1.0]), vector([1.0], lat=R, view=MLO))


class TestTrainingTable(unittest.TestCase):
    """Test cases for build_training_table and build_image_table."""

    def setUp(self):
        """Set up test fixtures."""
        self.ids = ["S003", "S001", "S002"]
        self.features = {tag: view_matrix(tag, self.ids) for tag in ALL_VIEWS}

    def test_one_row_per_side_in_order(self):
        """One fused row per breast side, sorted by study then side."""
        table = build_training_table(self.features, studies_for(self.ids))
        self.assertEqual(len(table), 6)
        self.assertEqual(table.study_ids, ["S001", "S001", "S002", "S002", "S003", "S003"])
        self.assertEqual(table.lateralities, [L, R] * 3)
        self.assertEqual(table.views, [None] * 6)
        self.assertTrue(np.all(table.views_present == 3))

    def test_fused_values(self):
        """A fused row is the mean of its CC and MLO rows."""
        table = build_training_table(self.features)
        l_cc, l_mlo = self.features[ALL_VIEWS[0]], self.features[ALL_VIEWS[2]]
        k = l_cc.study_ids.index("S001")
        expected = (l_cc.values[k].astype(np.float64) + l_mlo.values[k]) / 2
        np.testing.assert_allclose(table.values[0], expected, rtol=1e-6)

    def test_label_is_max_over_views(self):
        """The side label is the max of its view labels."""
        features = dict(self.features)
        features[ALL_VIEWS[2]] = view_matrix(ALL_VIEWS[2], self.ids, diag=[4, 0, 2])
        table = build_training_table(features)
        left = {sid: int(d) for sid, lat, d in zip(table.study_ids, table.lateralities, table.y_diag)
                if lat is L}
        self.assertEqual(left, {"S003": 4, "S001": 0, "S002": 2})

    def test_missing_view_passes_through(self):
        """A side missing a view keeps its single vector and logs a warning."""
        features = dict(self.features)
        features[ALL_VIEWS[3]] = view_matrix(ALL_VIEWS[3], ["S001", "S002"])
        with self.assertLogs("mammo_multiview.core.fusion", level=logging.WARNING) as logs:
            table = build_training_table(features)
        self.assertIn("1 breast sides", logs.output[0])
        last = len(table) - 1
        self.assertEqual((table.study_ids[last], table.lateralities[last]), ("S003", R))
        self.assertEqual(int(table.views_present[last]), 1)
        np.testing.assert_allclose(table.values[last], self.features[ALL_VIEWS[1]].values[0])

    def test_orphan_row(self):
        """Rows of unknown studies are rejected."""
        with self.assertRaises(IntegrityError):
            build_training_table(self.features, studies_for(["S001", "S002"]))

    def test_duplicate_row(self):
        """Duplicate rows are rejected."""
        features = dict(self.features)
        features[ALL_VIEWS[0]] = view_matrix(ALL_VIEWS[0], ["S001", "S001"])
        with self.assertRaises(IntegrityError):
            build_training_table(features)

    def test_misrouted_row(self):
        """Rows under the wrong view tag are rejected."""
        features = dict(self.features)
        features[ALL_VIEWS[0]] = self.features[ALL_VIEWS[1]]
        with self.assertRaises(IntegrityError):
            build_training_table(features)

    def test_empty_inputs(self):
        """Empty inputs give an empty table of the right width."""
        empty = {tag: FeatureMatrix.empty(3, BIRADS5) for tag in ALL_VIEWS}
        table = build_training_table(empty)
        self.assertEqual(len(table), 0)
        self.assertEqual(table.n_features, 3)

    def test_image_table(self):
        """The single-view table keeps one row per image."""
        table = build_image_table(self.features)
        self.assertEqual(len(table), 12)
        self.assertEqual(table.study_ids[:4], ["S001"] * 4)
        self.assertEqual(list(zip(table.lateralities[:4], table.views[:4])),
                         [(L, CC), (L, MLO), (R, CC), (R, MLO)])


class TestFeatureFiles(unittest.TestCase):
    """Test cases for feature files."""

    def setUp(self):
        """Set up test fixtures."""
        self.matrix = view_matrix(ALL_VIEWS[2], ["S001", "Sé02", "S003"], width=5,
                                  diag=[0, 4, 2], dens=[3, 0, 1])

    def assert_same(self, a, b):
        np.testing.assert_array_equal(a.values, b.values)
        self.assertEqual(a.study_ids, b.study_ids)
        self.assertEqual(a.lateralities, b.lateralities)
        self.assertEqual(a.views, b.views)
        np.testing.assert_array_equal(a.y_diag, b.y_diag)
        np.testing.assert_array_equal(a.y_dens, b.y_dens)
        np.testing.assert_array_equal(a.views_present, b.views_present)
        self.assertEqual(a.scheme, b.scheme)

    def test_image_level_file(self):
        """Image-level tables are written with magic and read back."""
        self.assertEqual(table_level(self.matrix), LEVEL_IMAGE)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "feat" / "L-MLO.mfv"
            write_features(self.matrix, path)
            self.assertEqual(path.read_bytes()[:4], b"MFV1")
            self.assert_same(read_features(path), self.matrix)

    def test_side_level_table(self):
        """Side-level tables decode to the same table."""
        ids = ["S001", "S002"]
        table = build_training_table({tag: view_matrix(tag, ids) for tag in ALL_VIEWS})
        self.assertEqual(table_level(table), LEVEL_SIDE)
        self.assert_same(decode_features(encode_features(table)), table)

    def test_bad_magic(self):
        """An unknown magic is a format version error."""
        data = bytearray(encode_features(self.matrix))
        data[:4] = b"MFV2"
        with self.assertRaises(FormatVersionError):
            decode_features(bytes(data))

    def test_truncated(self):
        """Truncated or padded files are rejected."""
        data = encode_features(self.matrix)
        with self.assertRaises(DataIOError):
            decode_features(data[:-3])
        with self.assertRaises(DataIOError):
            decode_features(data + b"\x00")
        with self.assertRaises(DataIOError):
            decode_features(data[:5])

    def test_missing_file(self):
        """A missing feature file raises DataIOError."""
        with self.assertRaises(DataIOError):
            read_features("/nonexistent/features.mfv")


if __name__ == "__main__":
    unittest.main()
