"""
End-to-end tests of the two-stage pipeline on a tiny synthetic dataset.
"""

import json
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))

from mammo_multiview.config.settings import build_config
from mammo_multiview.core.errors import ConfigError
from mammo_multiview.core.extractor import load_model
from mammo_multiview.core.feature_io import read_features
from mammo_multiview.core.labels import ALL_VIEWS
from mammo_multiview.core.pipeline import MammoPipeline, view_seed
from mammo_multiview.core.synthgen import generate_dataset

TINY = {
    "synth": {"n_train": 30, "n_val": 8, "n_test": 8, "height": 64, "width": 48},
    "preprocess": {"target_height": 32, "target_width": 24},
    "extractor": {"grid_h": 4, "grid_w": 3, "channels": 8, "epochs": 3, "patience": 3, "batch_size": 16},
    "gbdt": {"n_rounds": 5, "max_leaves": 4, "min_samples_leaf": 2, "early_stop_rounds": 3},
}


class TestPipeline(unittest.TestCase):
    """Test cases for MammoPipeline on a tiny synthetic dataset."""

    @classmethod
    def setUpClass(cls):
        """Generate a dataset and run the full pipeline once."""
        cls.tmp = tempfile.TemporaryDirectory()
        cls.root = Path(cls.tmp.name)
        cls.config = build_config(TINY)
        cls.dataset = generate_dataset(cls.config.synth, cls.root / "data")
        cls.pipeline = MammoPipeline(cls.config, cls.root / "out")
        cls.report = cls.pipeline.run(cls.dataset.manifest)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_artifacts_written(self):
        """Models, logs, feature files and tables are written for every view and split."""
        out = self.root / "out"
        for tag in ALL_VIEWS:
            self.assertTrue(self.pipeline.model_path(tag).is_file())
            self.assertTrue((out / f"extractor_{tag.name}.log.json").is_file())
            for split in ("train", "val", "test"):
                self.assertTrue(self.pipeline.features_path(tag, split).is_file())
        for mode in ("single", "multi"):
            for target in ("diagnosis", "density"):
                self.assertTrue(self.pipeline.forest_path(mode, target).is_file())
            self.assertTrue((out / f"report_{mode}.txt").is_file())
        self.assertTrue((out / "comparison.txt").is_file())

    def test_table_sizes(self):
        """The fused table has half the rows of the single-view table."""
        multi = read_features(self.pipeline.table_path("multi", "test"))
        single = read_features(self.pipeline.table_path("single", "test"))
        self.assertEqual(len(multi), 16)
        self.assertEqual(len(single), 32)
        self.assertEqual(multi.n_features, 8)
        self.assertTrue(np.all(multi.views_present == 3))

    def test_comparison_document(self):
        """The comparison document holds both reports and their deltas."""
        document = json.loads((self.root / "out" / "comparison.json").read_text(encoding="utf-8"))
        self.assertEqual(set(document), {"single_view", "multi_view", "delta"})
        deltas = self.report.deltas()
        single, multi = self.report.single.macro(), self.report.multi.macro()
        self.assertAlmostEqual(deltas["diagnosis"]["study"],
                               multi["diagnosis"]["study"] - single["diagnosis"]["study"])
        self.assertEqual(set(deltas["density"]), {"left", "right", "side"})
        self.assertEqual(self.report.multi.diagnosis["study"].excluded, 0)

    def test_comparison_text(self):
        """The comparison text matches the rendered report."""
        text = (self.root / "out" / "comparison.txt").read_text(encoding="utf-8")
        self.assertEqual(text, self.report.render())

    def test_parallel_training_matches_sequential(self):
        """Parallel extractor training gives the sequential weights."""
        views = list(ALL_VIEWS[:2])
        parallel = MammoPipeline(self.config, self.root / "parallel")
        results = parallel.train_extractors(self.dataset.manifest, views, jobs=2)
        for tag in views:
            sequential = load_model(self.pipeline.model_path(tag))
            for name, value in sequential.params.items():
                np.testing.assert_array_equal(results[tag][0].params[name], value)
            np.testing.assert_array_equal(results[tag][0].stat_mean, sequential.stat_mean)

    def test_view_seeds_differ(self):
        """Each view gets its own reproducible seed."""
        seeds = {view_seed(0, tag) for tag in ALL_VIEWS}
        self.assertEqual(len(seeds), 4)
        self.assertEqual(view_seed(3, ALL_VIEWS[1]), view_seed(3, ALL_VIEWS[1]))

    def test_split_requires_force(self):
        """Resplitting needs force and assigns every study."""
        path = self.root / "resplit.csv"
        with self.assertRaises(ConfigError):
            self.pipeline.split(self.dataset.manifest, path)
        resplit = self.pipeline.split(self.dataset.manifest, path, force=True)
        self.assertTrue(path.is_file())
        self.assertEqual(len({r.study_id for r in resplit.rows}), 46)
        self.assertTrue(all(r.split in ("train", "val", "test") for r in resplit.rows))

    def test_unknown_mode(self):
        """An unknown table mode is a config error."""
        with self.assertRaises(ConfigError):
            self.pipeline.fuse("triple", "test")


if __name__ == "__main__":
    unittest.main()
