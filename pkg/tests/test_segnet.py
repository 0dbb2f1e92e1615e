import numpy as np
import pytest

from coast.autograd import Tensor, bce_with_logits, grad_check, relu, conv2d, downsample_nearest, softmax
from coast.crossdonorm import cross_stylize
from coast.optim import SGD
from coast.segnet import (
    AGNOSTIC,
    CheckpointError,
    EncoderConfig,
    ModelBundle,
    ModelConfig,
    UnknownHeadError,
    save_checkpoint,
)


@pytest.fixture(scope="module")
def bundle():
    return ModelBundle(ModelConfig(num_targets=2, num_classes=4, seed=3))


@pytest.fixture
def images():
    rng = np.random.default_rng(0)
    return rng.random((2, 3, 16, 16)), rng.random((2, 3, 16, 16))


class TestEncoderConfig:
    def test_invalid_tap(self):
        with pytest.raises(ValueError):
            EncoderConfig(taps=(3,))

    def test_invalid_dropout(self):
        with pytest.raises(ValueError):
            EncoderConfig(dropout=1.0)


class TestForward:
    def test_output_normalized(self, bundle, images):
        for head in bundle.head_names:
            p = bundle.forward(images[0], head)
            assert p.shape == (2, 4, 16, 16)
            np.testing.assert_allclose(p.data.sum(axis=1), 1.0, atol=1e-12)

    def test_self_style_is_identity(self, bundle, images):
        plain = bundle.forward(images[0], 1)
        styled = bundle.forward(images[0], 1, style_source=images[0])
        np.testing.assert_allclose(styled.data, plain.data, atol=1e-9)

    def test_matches_manual_pipeline(self, bundle, images):
        x, s = (Tensor(a) for a in images)
        enc = bundle.params["encoder"]

        def block(h, b):
            return relu(conv2d(h, enc[f"conv{b}.weight"], enc[f"conv{b}.bias"]))

        z_x, z_s = block(x, 0), block(s, 0)
        z_xs, _ = cross_stylize(z_x, z_s)
        h = downsample_nearest(z_xs, 2)
        h = block(block(h, 1), 2)
        head = bundle.params["cls_0"]
        logits = conv2d(h, head["weight"], head["bias"]).data.repeat(2, 2).repeat(2, 3)
        expected = softmax(Tensor(logits)).data
        np.testing.assert_allclose(bundle.forward(x, 0, style_source=s).data, expected, atol=1e-12)

    def test_unknown_head(self, bundle, images):
        with pytest.raises(UnknownHeadError):
            bundle.forward(images[0], 7)

    def test_style_shape_mismatch(self, bundle, images):
        with pytest.raises(ValueError):
            bundle.forward(images[0], 0, style_source=images[0][:1])

    def test_heads_share_shape(self, bundle, images):
        shapes = {bundle.forward(images[0], h).shape for h in bundle.head_names}
        assert len(shapes) == 1

    def test_dropout_reproducible_and_eval_identity(self, bundle, images):
        a = bundle.forward(images[0], 0, training=True, rng=np.random.default_rng(4)).data
        b = bundle.forward(images[0], 0, training=True, rng=np.random.default_rng(4)).data
        np.testing.assert_array_equal(a, b)
        e1 = bundle.forward(images[0], 0).data
        e2 = bundle.forward(images[0], 0).data
        np.testing.assert_array_equal(e1, e2)
        assert not np.array_equal(a, e1)

    def test_float32_option(self, images):
        b = ModelBundle(ModelConfig(dtype="float32"))
        assert b.forward(images[0].astype(np.float32), 0).dtype == np.float32


class TestDiscriminator:
    def test_output_shape(self, bundle):
        p = softmax(Tensor(np.random.default_rng(1).standard_normal((2, 4, 32, 32))))
        assert bundle.discriminate(p, 0).shape == (2, 1, 4, 4)

    def test_invalid_index(self, bundle):
        p = softmax(Tensor(np.zeros((1, 4, 8, 8))))
        with pytest.raises(UnknownHeadError):
            bundle.discriminate(p, 2)

    def test_disjoint_parameters(self):
        b = ModelBundle(ModelConfig(seed=5))
        p = softmax(Tensor(np.random.default_rng(2).standard_normal((1, 4, 16, 16))))
        bce_with_logits(b.discriminate(p, 0), 1.0).backward()
        assert all(t.grad is not None for t in b.parameters("disc_0"))
        assert all(t.grad is None for t in b.parameters("disc_1"))

    def test_grad_check(self):
        b = ModelBundle(ModelConfig(seed=6, disc_widths=(4, 4)))
        logits = Tensor(np.random.default_rng(3).standard_normal((1, 4, 8, 8)))
        w = b.params["disc_0"]["conv0.weight"]
        assert grad_check(lambda z, ww: bce_with_logits(b.discriminate(softmax(z), 0), 0.0), [logits, w]) <= 1e-4


class TestOwnership:
    def test_partition_disjoint(self, bundle):
        ids = [{id(t) for t in bundle.parameters(o)} for o in bundle.owners]
        assert sum(map(len, ids)) == len(set().union(*ids))
        assert set(bundle.owners) == {"encoder", "cls_0", "cls_1", "cls_A", "disc_0", "disc_1"}

    def test_update_touches_only_owner(self, images):
        b = ModelBundle(ModelConfig(seed=8))
        opt = SGD(b.parameters("cls_A"), lr=0.1)
        before = {o: b.digest([o]) for o in b.owners}
        loss = b.forward(images[0], AGNOSTIC).log().mean() * -1.0
        loss.backward()
        opt.step()
        after = {o: b.digest([o]) for o in b.owners}
        assert [o for o in b.owners if before[o] != after[o]] == ["cls_A"]

    def test_init_deterministic(self):
        assert ModelBundle(ModelConfig(seed=9)).digest() == ModelBundle(ModelConfig(seed=9)).digest()
        assert ModelBundle(ModelConfig(seed=9)).digest() != ModelBundle(ModelConfig(seed=10)).digest()


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path, images):
        a = ModelBundle(ModelConfig(seed=11))
        a.save(tmp_path / "a.ckpt")
        b = ModelBundle(ModelConfig(seed=12)).load(tmp_path / "a.ckpt")
        assert a.forward(images[0], 0).data.tobytes() == b.forward(images[0], 0).data.tobytes()
        assert (tmp_path / "a.ckpt").read_bytes()[:5] == b"COAST"

    def test_rejects_unknown_version(self, tmp_path):
        a = ModelBundle(ModelConfig(seed=11))
        save_checkpoint(a, tmp_path / "a.ckpt")
        raw = bytearray((tmp_path / "a.ckpt").read_bytes())
        raw[5] = 99
        (tmp_path / "b.ckpt").write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            a.load(tmp_path / "b.ckpt")

    def test_rejects_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"NOPE")
        with pytest.raises(CheckpointError):
            ModelBundle().load(tmp_path / "x.ckpt")

    def test_rejects_architecture_mismatch(self, tmp_path):
        ModelBundle(ModelConfig(num_targets=3)).save(tmp_path / "m3.ckpt")
        with pytest.raises(CheckpointError):
            ModelBundle(ModelConfig(num_targets=2)).load(tmp_path / "m3.ckpt")
