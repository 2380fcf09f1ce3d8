import math

import numpy as np
import pytest

from oracles import central_diff, rel_err
from siglab.errors import OutOfVocab, ShapeMismatch, StaleCache, ZeroRow
from siglab.harness import RunConfig, loss_step
from siglab.losses import sigmoid_loss, softmax_loss
from siglab.model import (
    BottleneckEmbedding,
    DualEncoder,
    MlpEncoder,
    ModelDims,
    TokenBatch,
    backward,
    embed_tokens,
    forward,
    load_checkpoint,
    normalize_with_grad,
    param_groups,
    save_checkpoint,
)
from siglab.optim import AdamState, OptimConfig, adam_step


def scalar_forward(enc, x):
    out = []
    for row in x:
        h = [float(v) for v in row]
        for li, (w, b) in enumerate(zip(enc.weights, enc.biases)):
            nxt = []
            for j in range(w.shape[1]):
                s = 0.0
                for i in range(w.shape[0]):
                    s += h[i] * float(w[i, j])
                s += float(b[j])
                nxt.append(s if li == enc.n_layers - 1 else math.tanh(s))
            h = nxt
        out.append(h)
    return np.array(out)


class TestMlp:
    def test_zero_weights(self, rng):
        enc = MlpEncoder([3, 4, 2], init="zeros")
        out, _ = forward(enc, rng.standard_normal((5, 3)))
        np.testing.assert_array_equal(out, 0.0)

    def test_identity_layer(self, rng):
        enc = MlpEncoder([4, 4], init="identity")
        x = rng.standard_normal((3, 4))
        out, _ = forward(enc, x)
        np.testing.assert_array_equal(out, x)

    def test_scalar_loop_oracle(self, rng):
        enc = MlpEncoder([3, 5, 2], seed=3)
        enc.biases[0][:] = rng.standard_normal(5)
        x = rng.standard_normal((4, 3))
        out, _ = forward(enc, x)
        np.testing.assert_allclose(out, scalar_forward(enc, x), atol=1e-12, rtol=0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            forward(MlpEncoder([3, 2]), np.ones((2, 4)))

    def test_zero_upstream_gradient(self, rng):
        enc = MlpEncoder([3, 4, 2], seed=1)
        out, cache = forward(enc, rng.standard_normal((5, 3)))
        grads, d_in = backward(enc, cache, np.zeros_like(out))
        assert all(np.all(g == 0) for g in grads.values()) and np.all(d_in == 0)

    def test_identity_sum(self, rng):
        enc = MlpEncoder([4, 4], init="identity")
        out, cache = forward(enc, rng.standard_normal((3, 4)))
        _, d_in = backward(enc, cache, np.ones_like(out))
        np.testing.assert_array_equal(d_in, 1.0)

    @pytest.mark.parametrize("seed", range(3))
    def test_finite_differences_sum_loss(self, seed):
        rng = np.random.default_rng(seed)
        enc = MlpEncoder([3, 4, 3, 2], seed=seed)
        for b in enc.biases:
            b[:] = rng.standard_normal(b.shape) * 0.3
        x = rng.standard_normal((5, 3))
        out, cache = forward(enc, x)
        grads, d_in = backward(enc, cache, np.ones_like(out))
        f = lambda: float(np.sum(forward(enc, x)[0]))  # noqa: E731
        for name, arr in enc.params().items():
            assert rel_err(grads[name], central_diff(f, arr)) <= 1e-6, name
        assert rel_err(d_in, central_diff(f, x)) <= 1e-6

    def test_stale_cache(self, rng):
        enc = MlpEncoder([3, 2], seed=0)
        out, cache = forward(enc, rng.standard_normal((2, 3)))
        enc.weights[0] += 0.1
        with pytest.raises(StaleCache):
            backward(enc, cache, out)


class TestNormalizeGrad:
    def test_radial_direction_annihilated(self, rng):
        raw = rng.standard_normal((3, 4))
        _, d = normalize_with_grad(raw, raw * 2.5)
        np.testing.assert_allclose(d, 0.0, atol=1e-15)

    def test_unit_row_orthogonal_gradient_passes(self):
        raw = np.array([[1.0, 0.0, 0.0]])
        g = np.array([[0.0, 0.3, -2.0]])
        _, d = normalize_with_grad(raw, g)
        np.testing.assert_array_equal(d, g)

    def test_finite_differences(self, rng):
        raw = rng.standard_normal((4, 5))
        w = rng.standard_normal((4, 5))
        unit, d = normalize_with_grad(raw, w)
        f = lambda: float(np.sum(normalize_with_grad(raw)[0] * w))  # noqa: E731
        assert rel_err(d, central_diff(f, raw)) <= 1e-6

    def test_tangent_property(self, rng):
        raw = rng.standard_normal((10, 6)) * 3
        _, d = normalize_with_grad(raw, rng.standard_normal((10, 6)))
        np.testing.assert_allclose(np.sum(d * raw, axis=1), 0.0, atol=1e-10)

    def test_zero_row(self):
        with pytest.raises(ZeroRow):
            normalize_with_grad(np.zeros((1, 3)), np.ones((1, 3)))


class TestBottleneck:
    def test_degenerate_bottleneck_is_plain_lookup(self):
        be = BottleneckEmbedding(10, 4, 4, seed=0, init="identity")
        ids = [3, 1, 9]
        np.testing.assert_array_equal(embed_tokens(be, ids), be.lookup[ids])

    def test_paper_scale_parameter_count(self):
        bottlenecked = BottleneckEmbedding.param_count(250_000, 96, 768)
        full = 250_000 * 768
        assert bottlenecked == 24_073_728
        assert full == 192_000_000
        assert round(full / bottlenecked) == 8

    def test_repeated_token(self):
        be = BottleneckEmbedding(5, 2, 3, seed=1)
        out = embed_tokens(be, [2, 2])
        np.testing.assert_array_equal(out[0], out[1])
        assert out.shape == (2, 3)

    def test_out_of_vocab(self):
        with pytest.raises(OutOfVocab):
            embed_tokens(BottleneckEmbedding(5, 2, 3), [5])

    def test_smaller_below_break_even(self):
        N, W = 1000, 64
        for K in (1, 8, 60):
            assert (K < N * W / (N + W)) == (BottleneckEmbedding.param_count(N, K, W) < N * W)


def tiny_model(seed=0):
    dims = ModelDims(image_dim=4, vocab_size=6, bottleneck=2, width=3, embed_dim=3,
                     image_hidden=(5,), text_hidden=(4,))
    model = DualEncoder(dims, seed=seed, t_prime=0.5, bias=-1.0)
    rng = np.random.default_rng(seed)
    for arr in model.params().values():
        if arr.ndim == 1 and arr.size > 1:
            arr[:] = rng.standard_normal(arr.shape) * 0.2
    return model


def tiny_batch(seed=0, n=5):
    rng = np.random.default_rng(seed + 50)
    from siglab.data import PairDataset

    seqs = [rng.integers(0, 6, size=int(rng.integers(1, 5))) for _ in range(n)]
    return PairDataset(rng.standard_normal((n, 4)), TokenBatch.from_sequences(seqs), np.zeros(n, int))


@pytest.mark.parametrize("loss", ["sigmoid", "softmax"])
@pytest.mark.parametrize("seed", range(3))
def test_end_to_end_gradients(loss, seed):
    model = tiny_model(seed)
    total = sum(a.size for a in model.params().values())
    assert total <= 500
    batch = tiny_batch(seed)
    cfg = RunConfig(loss=loss, batch_size=5, total_examples_seen=5)
    res = loss_step(model, batch, cfg)

    def f():
        zi = model.encode_images(batch.images)
        zt = model.encode_texts(batch.tokens)
        if loss == "sigmoid":
            return sigmoid_loss(zi, zt, model.loss_params()).value
        return softmax_loss(zi, zt, float(model.t_prime[0])).value

    assert res.loss == pytest.approx(f(), abs=1e-12)
    for name, arr in model.params().items():
        if loss == "softmax" and name == "loss.bias":
            assert name not in res.grads or np.all(res.grads[name] == 0)
            continue
        assert rel_err(res.grads[name], central_diff(f, arr)) <= 1e-6, name


class TestGroups:
    def test_frozen_image_tower_is_bit_unchanged(self):
        model = tiny_model(1)
        groups = param_groups(model, "image_frozen")
        params = model.params()
        before = {k: v.copy() for k, v in params.items()}
        state = AdamState()
        rng = np.random.default_rng(0)
        for _ in range(25):
            grads = {k: rng.standard_normal(v.shape) for k, v in params.items()}
            adam_step(state, params, groups, grads, 0.01, OptimConfig())
        for k in params:
            if k.startswith("image."):
                np.testing.assert_array_equal(params[k], before[k])
            elif k.startswith("text."):
                assert not np.array_equal(params[k], before[k])

    def test_unlocked_tower_multipliers(self):
        groups = {g.name: g for g in param_groups(tiny_model(), "image_pretrained_unlocked")}
        assert groups["image"].weight_decay_multiplier == 0.0
        assert groups["image"].lr_multiplier == 0.1
        assert groups["text"].weight_decay_multiplier == 1.0


def test_checkpoint_round_trip(tmp_path):
    model = tiny_model(2)
    path = tmp_path / "ckpt.json"
    save_checkpoint(model, path, param_groups(model))
    again = load_checkpoint(path)
    for k, v in model.params().items():
        np.testing.assert_array_equal(again.params()[k], v)
    path2 = tmp_path / "ckpt2.json"
    save_checkpoint(again, path2, param_groups(again))
    assert path.read_bytes() == path2.read_bytes()
