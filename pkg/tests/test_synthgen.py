"""
Tests for the synthetic four-view study generator.
"""

import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))

from mammo_multiview.config.settings import SynthConfig
from mammo_multiview.core.errors import ConfigError
from mammo_multiview.core.imaging import BoundingBox
from mammo_multiview.core.ingestion import load_image, load_manifest, validate_dataset
from mammo_multiview.core.labels import (
    ALL_VIEWS,
    BIRADS5,
    BiRadsLabel,
    DensityLabel,
    Laterality,
    PathologyLabel,
    ViewKind,
    ViewTag,
)
from mammo_multiview.core.preprocess import breast_roi
from mammo_multiview.core.synthgen import (
    MARKER_LEVEL,
    apparent_density,
    generate_dataset,
    generate_study,
    load_truth,
    nominal_blob_count,
    study_splits,
)

L, R = Laterality.L, Laterality.R


def small_config(**overrides):
    values = dict(n_train=4, n_val=2, n_test=2, height=64, width=48, seed=7)
    values.update(overrides)
    return SynthConfig(**values)


class TestGenerateStudy(unittest.TestCase):
    """Test cases for generate_study."""

    def test_all_blobs_visible(self):
        """With p_vis 1 every blob is drawn in both views."""
        cfg = small_config(p_vis=1.0)
        study = generate_study(np.random.default_rng(0), "S1", cfg,
                               {L: BiRadsLabel.BIRADS_5, R: BiRadsLabel.BIRADS_3},
                               {L: DensityLabel.C, R: DensityLabel.C})
        for view in ViewKind:
            left = study.truth[ViewTag(L, view)]
            self.assertEqual(left.blob_ids, [0, 1, 2])
            self.assertEqual(len(left.blobs), 3)
            self.assertIs(left.diagnosis, BiRadsLabel.BIRADS_5)
            self.assertEqual(study.truth[ViewTag(R, view)].blob_ids, [0, 1])

    def test_negative_breast_has_no_blobs(self):
        """The lowest class carries no blobs."""
        cfg = small_config(p_vis=1.0)
        study = generate_study(np.random.default_rng(1), "S1", cfg,
                               {L: BiRadsLabel.BIRADS_1, R: BiRadsLabel.BIRADS_1},
                               {L: DensityLabel.A, R: DensityLabel.B})
        for tag in ALL_VIEWS:
            self.assertEqual(study.truth[tag].blobs, [])
            self.assertIs(study.truth[tag].diagnosis, BiRadsLabel.BIRADS_1)

    def test_every_blob_seen_at_least_once(self):
        """With p_vis 0 each blob lands in exactly one view."""
        cfg = small_config(p_vis=0.0, scheme="pathology3")
        for seed in range(10):
            study = generate_study(np.random.default_rng(seed), "S1", cfg,
                                   {L: PathologyLabel.CANCER, R: PathologyLabel.NORMAL},
                                   {L: DensityLabel.B, R: DensityLabel.B})
            cc = set(study.truth[ViewTag(L, ViewKind.CC)].blob_ids)
            mlo = set(study.truth[ViewTag(L, ViewKind.MLO)].blob_ids)
            self.assertEqual(cc | mlo, {0, 1, 2})
            self.assertFalse(cc & mlo)

    def test_single_views_miss_findings(self):
        """At p_vis 0.6 some single views show fewer blobs than the breast has."""
        cfg = small_config(p_vis=0.6)
        partial = 0
        for seed in range(50):
            study = generate_study(np.random.default_rng(seed), "S1", cfg,
                                   {L: BiRadsLabel.BIRADS_4, R: BiRadsLabel.BIRADS_1},
                                   {L: DensityLabel.B, R: DensityLabel.B})
            views = [study.truth[ViewTag(L, view)] for view in ViewKind]
            union = set(views[0].blob_ids) | set(views[1].blob_ids)
            self.assertEqual(union, {0, 1, 2})
            partial += any(len(v.blob_ids) < v.nominal_blobs for v in views)
        self.assertGreaterEqual(partial, 5)

    def test_density_shared_between_views(self):
        """Both views of a breast carry its density label."""
        study = generate_study(np.random.default_rng(2), "S1", small_config(),
                               {L: BiRadsLabel.BIRADS_2, R: BiRadsLabel.BIRADS_4},
                               {L: DensityLabel.D, R: DensityLabel.A})
        for lat, expected in ((L, DensityLabel.D), (R, DensityLabel.A)):
            for view in ViewKind:
                self.assertIs(study.truth[ViewTag(lat, view)].density, expected)

    def test_label_outside_scheme(self):
        """A label from another scheme is a config error."""
        with self.assertRaises(ConfigError):
            generate_study(np.random.default_rng(0), "S1", small_config(),
                           {L: PathologyLabel.BENIGN, R: PathologyLabel.BENIGN},
                           {L: DensityLabel.A, R: DensityLabel.A})

    def test_nominal_counts(self):
        """BI-RADS b carries b-1 blobs, at most three."""
        self.assertEqual([nominal_blob_count(l, BIRADS5) for l in BiRadsLabel], [0, 1, 2, 3, 3])

    def test_marker_is_saturated_and_separate(self):
        """The laterality marker sits in the far top corner and does not change the detected box."""
        study = generate_study(np.random.default_rng(3), "S1", small_config(),
                               {L: BiRadsLabel.BIRADS_1, R: BiRadsLabel.BIRADS_1},
                               {L: DensityLabel.B, R: DensityLabel.B})
        for tag in ALL_VIEWS:
            truth = study.truth[tag]
            pixels = study.images[tag].pixels
            x0, y0, x1, _ = truth.bbox.as_tuple()
            corner = pixels[y0:y0 + 2, x1 - 2:x1] if tag.laterality is R else pixels[y0:y0 + 2, x0:x0 + 2]
            self.assertTrue(np.all(corner == MARKER_LEVEL))
            self.assertEqual(int(pixels.max()), MARKER_LEVEL)
            self.assertEqual(breast_roi(study.images[tag], pad_fraction=0.0), truth.bbox)

    def test_apparent_density_jitter(self):
        """Per-view density scatters around the breast density and is exact without jitter."""
        rng = np.random.default_rng(4)
        shown = [apparent_density(rng, DensityLabel.B, 0.3) for _ in range(2000)]
        self.assertAlmostEqual(float(np.mean(shown)), 1.0, delta=0.03)
        self.assertAlmostEqual(float(np.std(shown)), 0.3, delta=0.03)
        self.assertTrue(all(-0.5 <= s <= 3.5 for s in shown))
        self.assertEqual(apparent_density(rng, DensityLabel.C, 0.0), 2.0)

    def test_denser_views_are_brighter(self):
        """Without jitter, tissue brightness rises with the density class."""
        cfg = small_config(density_jitter=0.0, noise_sigma=0.0)
        levels = []
        for density in DensityLabel:
            study = generate_study(np.random.default_rng(5), "S1", cfg,
                                   {L: BiRadsLabel.BIRADS_1, R: BiRadsLabel.BIRADS_1},
                                   {L: density, R: density})
            truth = study.truth[ViewTag(L, ViewKind.CC)]
            x0, y0, x1, y1 = truth.bbox.as_tuple()
            self.assertEqual(truth.apparent_density, float(density.index))
            levels.append(float(np.median(study.images[ViewTag(L, ViewKind.CC)].pixels[y0:y1, x0:x1])))
        self.assertEqual(levels, sorted(levels))
        self.assertGreater(levels[-1] - levels[0], 60)


class TestGenerateDataset(unittest.TestCase):
    """Test cases for generate_dataset."""

    @classmethod
    def setUpClass(cls):
        """Generate one small dataset shared by the tests."""
        cls.tmp = tempfile.TemporaryDirectory()
        cls.root = Path(cls.tmp.name)
        cls.cfg = small_config()
        cls.dataset = generate_dataset(cls.cfg, cls.root / "a")

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_layout(self):
        """Images, manifest and truth file are written."""
        a = self.root / "a"
        self.assertTrue((a / "manifest.csv").is_file())
        self.assertTrue((a / "synth_truth.json").is_file())
        self.assertEqual(len(list((a / "images").glob("*.pgm"))), 32)
        self.assertEqual(len(self.dataset.truth), 32)

    def test_manifest_is_valid(self):
        """The manifest validates and carries the configured split sizes."""
        manifest = load_manifest(self.dataset.manifest_path, BIRADS5)
        self.assertTrue(validate_dataset(manifest).is_valid)
        self.assertTrue(manifest.split_column_present)
        counts = {split: len({r.study_id for r in manifest.subset(split)}) for split in ("train", "val", "test")}
        self.assertEqual(counts, {"train": 4, "val": 2, "test": 2})

    def test_deterministic(self):
        """The same config writes identical bytes."""
        again = generate_dataset(self.cfg, self.root / "b")
        a, b = self.root / "a", self.root / "b"
        for name in ("manifest.csv", "synth_truth.json"):
            self.assertEqual((a / name).read_bytes(), (b / name).read_bytes())
        for path in sorted((a / "images").glob("*.pgm")):
            self.assertEqual(path.read_bytes(), (b / "images" / path.name).read_bytes(), path.name)
        self.assertEqual(again.truth, self.dataset.truth)

    def test_truth_document(self):
        """The truth file records config and per-image facts."""
        document = load_truth(self.dataset.truth_path)
        self.assertEqual(document["config"]["seed"], 7)
        record = document["images"]["S00000_L_CC"]
        self.assertEqual(set(record), {"bbox", "blobs", "nominal_blobs", "blob_ids", "diagnosis", "density", "apparent_density"})

    def test_breast_box_recovered(self):
        """The detector recovers the drawn breast box."""
        hits = 0
        for record in self.dataset.manifest.rows:
            truth = self.dataset.truth[f"{record.study_id}_{record.laterality.value}_{record.view.value}"]
            image = load_image(self.dataset.manifest.resolve(record))
            found = breast_roi(image)
            hits += found.iou(BoundingBox(*truth["bbox"])) >= 0.85
        self.assertGreaterEqual(hits, 0.9 * len(self.dataset.manifest.rows))

    def test_chest_wall_side(self):
        """Breasts attach to the chest-wall edge of their side."""
        for record in self.dataset.manifest.rows:
            x0, _, x1, _ = self.dataset.truth[f"{record.study_id}_{record.laterality.value}_{record.view.value}"]["bbox"]
            if record.laterality is Laterality.R:
                self.assertEqual(x0, 0)
            else:
                self.assertEqual(x1, self.cfg.width)

    def test_too_small(self):
        """Images too small for lesions are rejected."""
        with self.assertRaises(ConfigError):
            generate_dataset(small_config(height=20, width=20), self.root / "tiny")


class TestStudySplits(unittest.TestCase):
    """Test cases for study_splits."""

    def test_ids_and_order(self):
        """Study ids are zero-padded and ordered train, val, test."""
        plan = study_splits(small_config())
        self.assertEqual(plan[0], ("S00000", "train"))
        self.assertEqual([s for _, s in plan], ["train"] * 4 + ["val"] * 2 + ["test"] * 2)


if __name__ == "__main__":
    unittest.main()
