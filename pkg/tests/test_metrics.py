import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coast.data import BenchmarkConfig, make_benchmark
from coast.metrics import (
    ConfusionMatrix,
    MetricsReport,
    UnlabeledDatasetError,
    evaluate,
    evaluate_all,
    export_uncertainty_map,
    miou,
    read_pgm,
    rectification_map,
)
from coast.segnet import ModelBundle, ModelConfig
from oracles import loop_miou


class TestMiou:
    def test_hand_case(self):
        truth = np.array([[0, 0], [1, 1]])
        pred = np.array([[0, 1], [1, 1]])
        iou, m = miou(ConfusionMatrix(2).accumulate(pred, truth))
        np.testing.assert_allclose(iou, [0.5, 2 / 3], atol=1e-15)
        assert m == pytest.approx(0.5833333333333334, abs=1e-9)

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            k = int(rng.integers(2, 6))
            pred, truth = rng.integers(0, k, (8, 8)), rng.integers(0, k, (8, 8))
            _, m = miou(ConfusionMatrix(k).accumulate(pred, truth))
            assert m == loop_miou(pred, truth, k)

    def test_perfect_prediction(self):
        t = np.random.default_rng(1).integers(0, 3, (5, 5))
        assert miou(ConfusionMatrix(3).accumulate(t, t))[1] == 1.0

    def test_absent_class_is_nan_and_skipped(self):
        iou, m = miou(ConfusionMatrix(3).accumulate(np.zeros((2, 2), int), np.zeros((2, 2), int)))
        assert iou[0] == 1.0 and math.isnan(iou[1]) and math.isnan(iou[2])
        assert m == 1.0

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            miou(ConfusionMatrix(3))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            ConfusionMatrix(2).accumulate(np.array([2]), np.array([0]))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ConfusionMatrix(2).accumulate(np.zeros(3, int), np.zeros(4, int))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 5))
    def test_relabel_invariance(self, seed, k):
        rng = np.random.default_rng(seed)
        pred, truth = rng.integers(0, k, (6, 6)), rng.integers(0, k, (6, 6))
        perm = rng.permutation(k)
        a = miou(ConfusionMatrix(k).accumulate(pred, truth))[1]
        b = miou(ConfusionMatrix(k).accumulate(perm[pred], perm[truth]))[1]
        assert a == pytest.approx(b, abs=1e-12)

    def test_merge_order_independent(self):
        rng = np.random.default_rng(2)
        parts = [ConfusionMatrix(4).accumulate(rng.integers(0, 4, (4, 4)), rng.integers(0, 4, (4, 4))) for _ in range(3)]
        np.testing.assert_array_equal((parts[0] + parts[1] + parts[2]).counts, (parts[2] + parts[0] + parts[1]).counts)
        whole = ConfusionMatrix(4)
        for p in parts:
            whole.counts += p.counts
        np.testing.assert_array_equal(whole.counts, (parts[0] + parts[1] + parts[2]).counts)


@pytest.fixture(scope="module")
def bench():
    return make_benchmark(BenchmarkConfig(seed=5, H=16, W=16, n_source=4, n_target=3, n_unseen=3, n_eval=3))


class TestEvaluate:
    def test_agnostic_head_on_unseen(self, bench):
        rep = evaluate(ModelBundle(ModelConfig(seed=1)), bench.unseen)
        assert rep.head == "A" and math.isfinite(rep.miou)

    def test_unlabeled_rejected(self, bench):
        with pytest.raises(UnlabeledDatasetError):
            evaluate(ModelBundle(ModelConfig(seed=1)), bench.targets[0])

    def test_report_csv(self, bench, tmp_path):
        rep = evaluate_all(ModelBundle(ModelConfig(seed=2)), bench.target_eval)
        rep.to_csv(tmp_path / "m.csv")
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "domain,class,iou"
        assert lines[-1].startswith("ALL,avg_mIoU,")
        assert rep.avg_miou == pytest.approx(np.mean([d.miou for d in rep.domains]))

    def test_empty_report_mean(self):
        with pytest.warns(RuntimeWarning):
            assert math.isnan(MetricsReport().avg_miou)


class TestUncertaintyMap:
    def test_pgm_export(self, bench, tmp_path):
        b = ModelBundle(ModelConfig(seed=3))
        img = bench.targets[0].images[0]
        style = {1: bench.targets[1].images[0]}
        gray = export_uncertainty_map(b, img, 0, style, tmp_path / "u.pgm")
        w = rectification_map(b, img, 0, style)
        assert gray.shape == (16, 16) and gray.dtype == np.uint8
        np.testing.assert_array_equal(read_pgm(tmp_path / "u.pgm"), gray)
        np.testing.assert_array_equal(gray, np.rint(255 * (1 - w)).astype(np.uint8))

    def test_needs_another_domain(self, bench):
        with pytest.raises(ValueError):
            rectification_map(ModelBundle(ModelConfig(seed=3)), bench.targets[0].images[0], 0, {})
