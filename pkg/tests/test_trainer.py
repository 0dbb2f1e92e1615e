import csv
import itertools

import numpy as np
import pytest

from coast.autograd import grad_check, softmax_cross_entropy
from coast.data import BenchmarkConfig, make_benchmark
from coast.experiment import ABLATION_CSV_HEADER, ExperimentConfig, run_ablation_suite
from coast.segnet import ModelConfig
from coast.selftrain import rectified_pl_loss
from coast.trainer import (
    METRICS_CSV_HEADER,
    VARIANTS,
    TrainConfig,
    augment_batch,
    selftrain_run,
    total_objective,
)
from coast.warmup import TrainingDivergedError, WarmupConfig
from oracles import TINY, micro_batch, oracle_total, tiny_bundle


class TestTotalObjective:
    @pytest.mark.parametrize("lam,gamma", [(1.0, 1.0), (0.3, 2.5)])
    def test_matches_hand_summed_oracle(self, lam, gamma):
        b, batch = tiny_bundle(), micro_batch()
        cfg = TrainConfig(lambda_pair=lam, gamma=gamma)
        loss, bd = total_objective(b, batch, cfg, training=False)
        expected, terms = oracle_total(b, batch, cfg)
        assert len(terms) == 9
        assert loss.item() == pytest.approx(expected, abs=1e-9)
        assert bd.seg_source == pytest.approx(terms["seg"], abs=1e-9)
        for (i, j) in [(0, 1), (1, 0)]:
            assert bd.pl_sty_rectified[(i, j)] == pytest.approx(terms[("sty", i, j)], abs=1e-9)
            assert bd.cst[(i, j)] == pytest.approx(terms[("cst", i, j)], abs=1e-9)

    @pytest.mark.parametrize("m", [2, 3])
    def test_coefficients_and_additivity(self, m):
        b, batch = tiny_bundle(m), micro_batch(m)
        cfg = TrainConfig(lambda_pair=0.7)
        loss, bd = total_objective(b, batch, cfg, training=False)
        assert bd.kd_coef == pytest.approx(1 / m)
        assert bd.pair_coef == pytest.approx(0.7 / (m - 1))
        assert len(bd.pl_sty_rectified) == m * (m - 1)
        assert bd.recompose() == pytest.approx(bd.total, abs=1e-9)
        assert loss.item() == pytest.approx(oracle_total(b, batch, cfg)[0], abs=1e-9)

    def test_additivity_in_training_mode(self):
        b, batch = tiny_bundle(3), micro_batch(3)
        _, bd = total_objective(b, batch, TrainConfig(), training=True, rng=np.random.default_rng(0))
        assert bd.recompose() == pytest.approx(bd.total, abs=1e-9)

    def test_lambda_zero_unit_weights_reduce(self):
        b, batch = tiny_bundle(), micro_batch()
        _, bd = total_objective(b, batch, TrainConfig(lambda_pair=0.0, use_rectification=False), training=False)
        reduced = bd.seg_source + sum(bd.kd.values()) / 2 + sum(bd.pl_rectified.values())
        assert bd.total == pytest.approx(reduced, abs=1e-9)
        assert all(v == 1.0 for v in bd.mean_rect_weight.values())

    def test_shared_equals_recomputed(self):
        b, batch = tiny_bundle(3), micro_batch(3)
        a, _ = total_objective(b, batch, TrainConfig(), training=False, share_cross=True)
        c, _ = total_objective(b, batch, TrainConfig(), training=False, share_cross=False)
        assert a.item() == pytest.approx(c.item(), abs=1e-9)

    def test_single_target_has_no_pairs(self):
        b, batch = tiny_bundle(1), micro_batch(1)
        loss, bd = total_objective(b, batch, TrainConfig(), training=False)
        assert bd.pl_sty_rectified == {} and bd.mean_rect_weight[0] == 1.0
        assert np.isfinite(loss.item())

    @pytest.mark.parametrize("name", list(VARIANTS))
    def test_variant_flags(self, name):
        b, batch = tiny_bundle(), micro_batch()
        cfg = TrainConfig.variant(name)
        _, bd = total_objective(b, batch, cfg, training=False)
        assert (len(bd.pl_sty_rectified) > 0) == (name != "i")
        if name in ("i", "ii", "iv"):
            assert all(v == 0.0 for v in bd.cst.values())
        else:
            assert all(v > 0.0 for v in bd.cst.values())
        if name in ("iv", "v"):
            assert all(v < 1.0 for v in bd.mean_rect_weight.values())
        else:
            assert all(v == 1.0 for v in bd.mean_rect_weight.values())

    def test_missing_domain_batch(self):
        b, batch = tiny_bundle(), micro_batch(1)
        with pytest.raises(ValueError):
            total_objective(b, batch, TrainConfig(), training=False)

    def test_grad_check_without_stop_gradients(self):
        # hard KD against banked labels, no rectification or consistency, and a C^A that ignores its
        # (detached) input features: every remaining path is differentiable
        b, batch = tiny_bundle(seed=3), micro_batch(seed=4)
        b.params["cls_A"]["weight"].data[...] = 0.0
        cfg = TrainConfig.variant("ii", kd_mode="hard")
        params = [b.params["encoder"]["conv0.weight"], b.params["encoder"]["conv2.bias"], b.params["cls_1"]["weight"], b.params["cls_A"]["bias"]]
        assert grad_check(lambda *ps: total_objective(b, batch, cfg, training=False)[0], params) <= 1e-4

    def test_grad_check_full_on_agnostic_head(self):
        # the agnostic head never feeds a detached teacher or weight
        b, batch = tiny_bundle(seed=5), micro_batch(seed=6)
        params = [b.params["cls_A"]["weight"], b.params["cls_A"]["bias"]]
        assert grad_check(lambda *ps: total_objective(b, batch, TrainConfig(), training=False)[0], params) <= 1e-4

    def test_kd_teacher_receives_no_gradient(self):
        b, batch = tiny_bundle(seed=7), micro_batch(seed=8)
        cfg = TrainConfig.variant("i", lambda_pair=0.0)
        loss, _ = total_objective(b, batch, cfg, training=False)
        loss.backward()
        g_with = b.params["cls_0"]["weight"].grad.copy()
        b.zero_grad()
        # the same gradient from only the terms that reach C^0 without a stop-gradient
        src = b.forward(batch.source_images, 0, logits=True)
        y = np.eye(3)[batch.source_labels].transpose(0, 3, 1, 2)
        (softmax_cross_entropy(src, y) + rectified_pl_loss(b.forward(batch.target_images[0], 0), batch.target_pseudo[0])).backward()
        np.testing.assert_allclose(b.params["cls_0"]["weight"].grad, g_with, atol=1e-12)


class TestConfig:
    def test_invalid_values(self):
        for bad in (dict(lambda_pair=-1.0), dict(gamma=-0.1), dict(iterations=-1), dict(kd_mode="x")):
            with pytest.raises(ValueError):
                TrainConfig(**bad)

    def test_rectification_needs_crossdonorm(self):
        with pytest.raises(ValueError):
            TrainConfig(use_crossdonorm=False, use_rectification=True, use_consistency=False)

    def test_lambda_alias(self):
        assert TrainConfig.from_dict({"lambda": 0.25, "n_b": 5}).lambda_pair == 0.25

    def test_unknown_variant(self):
        with pytest.raises(KeyError):
            TrainConfig.variant("vi")


class TestAugment:
    def test_image_and_label_move_together(self):
        rng = np.random.default_rng(0)
        lab = rng.integers(0, 4, (3, 16, 16))
        # encode the label in the image so the geometric transform can be checked
        img = np.repeat(lab[:, None].astype(float) / 4, 3, axis=1)
        cfg = TrainConfig(crop_size=10, jitter=0.0)
        out_img, out_lab = augment_batch(np.random.default_rng(1), img, lab, cfg)
        assert out_img.shape == (3, 3, 10, 10)
        np.testing.assert_array_equal(out_img[:, 0] * 4, out_lab)

    def test_jitter_leaves_labels(self):
        rng = np.random.default_rng(2)
        lab = rng.integers(0, 4, (2, 8, 8))
        img = rng.random((2, 3, 8, 8))
        cfg = TrainConfig(crop_size=None, flip=False, jitter=0.2)
        out_img, out_lab = augment_batch(np.random.default_rng(3), img, lab, cfg)
        np.testing.assert_array_equal(out_lab, lab)
        assert not np.array_equal(out_img, img)
        assert out_img.min() >= 0 and out_img.max() <= 1


@pytest.fixture(scope="module")
def bench():
    return make_benchmark(BenchmarkConfig(seed=2, H=16, W=16, K=3, n_source=6, n_target=5, n_unseen=3, n_eval=3))


class TestSelftrainRun:
    def test_zero_iterations_unchanged(self, bench):
        b = tiny_bundle()
        before = b.digest()
        selftrain_run(b, bench.source, bench.targets, None, TrainConfig(iterations=0))
        assert b.digest() == before

    def test_only_segmentation_owners_change(self, bench):
        b = tiny_bundle()
        before = {o: b.digest([o]) for o in b.owners}
        selftrain_run(b, bench.source, bench.targets, None, TrainConfig(iterations=2, crop_size=8, lr=0.01))
        changed = {o for o in b.owners if b.digest([o]) != before[o]}
        assert changed == set(b.segmentation_owners())

    def test_refresh_schedule(self, bench):
        _, _, bank = selftrain_run(tiny_bundle(), bench.source, bench.targets, None, TrainConfig(iterations=5, n_b=2, crop_size=8))
        assert bank.refresh_count == 3 and bank.last_refresh_iteration == 4

    def test_deterministic_outputs(self, bench, tmp_path):
        cfg = TrainConfig(iterations=3, crop_size=8, checkpoint_every=2, seed=4)
        for run in ("a", "b"):
            selftrain_run(tiny_bundle(), bench.source, bench.targets, None, cfg, tmp_path / f"{run}.csv", tmp_path / run)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        for name in ("selftrain_000002.ckpt", "selftrain_final.ckpt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        rows = list(csv.reader(open(tmp_path / "a.csv")))
        assert rows[0] == METRICS_CSV_HEADER
        assert len(rows) == 1 + 3 * 2

    def test_nan_weights_abort(self, bench):
        b = tiny_bundle()
        b.params["cls_A"]["bias"].data[...] = np.nan
        with pytest.raises(TrainingDivergedError):
            selftrain_run(b, bench.source, bench.targets, None, TrainConfig(iterations=2, crop_size=8))

    def test_non_finite_loss_carries_breakdown(self, bench, monkeypatch):
        import coast.trainer as trainer

        real = trainer.total_objective

        def poisoned(*args, **kwargs):
            loss, bd = real(*args, **kwargs)
            bd.total = float("inf")
            return loss, bd

        monkeypatch.setattr(trainer, "total_objective", poisoned)
        with pytest.raises(TrainingDivergedError) as exc:
            selftrain_run(tiny_bundle(), bench.source, bench.targets, None, TrainConfig(iterations=2, crop_size=8))
        assert exc.value.breakdown.total == float("inf")
        assert set(exc.value.breakdown.kd) == {0, 1}


class TestAblationSuite:
    def test_cardinality(self, tmp_path):
        cfg = ExperimentConfig(
            benchmark=BenchmarkConfig(H=16, W=16, K=3, n_source=6, n_target=5, n_unseen=3, n_eval=3),
            model=ModelConfig(num_classes=3, encoder=TINY, disc_widths=(2, 2)),
            warmup=WarmupConfig(iterations=1),
            train=TrainConfig(iterations=1, crop_size=8),
            seeds=(0, 1),
        )
        rows = run_ablation_suite(cfg, tmp_path / "ablation.csv")
        assert len(rows) == len(VARIANTS) * 2
        assert sorted((r["seed"], r["variant"]) for r in rows) == sorted(itertools.product((0, 1), VARIANTS))
        lines = list(csv.reader(open(tmp_path / "ablation.csv")))
        assert lines[0] == ABLATION_CSV_HEADER and len(lines) == 11
