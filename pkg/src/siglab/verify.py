"""Named oracle checks run by ``siglab verify``.

Each check compares a library routine against an independent reference
(scalar loops, closed forms, finite differences or counting arguments)
and returns ``(ok, detail)``.
"""

from __future__ import annotations

import math

import numpy as np

from .chunked import ShardPlan, allgather_sigmoid_loss, bench_record, chunked_sigmoid_loss
from .core import l2_normalize_rows, log_sigmoid, matmul, row_log_softmax
from .data import CorruptionSpec, SyntheticPairSpec, corrupt, generate
from .losses import (
    LossParams,
    MaskSpec,
    build_mask,
    sigmoid_loss,
    sigmoid_loss_and_grads,
    softmax_loss,
    softmax_loss_and_grads,
)
from .model import MlpEncoder, ParamGroup, backward, forward, normalize_with_grad
from .optim import AdamState, OptimConfig, adam_step, spike_recovery_steps

FD_H = 1e-5
GRAD_TOL = 1e-6


def _unit(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _fd(f, arr, h=FD_H):
    out = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + h
        up = f()
        arr[idx] = old - h
        down = f()
        arr[idx] = old
        out[idx] = (up - down) / (2 * h)
    return out


def _rel(a, b, floor=1e-4):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def _scalar_sigmoid(x, y, t, b):
    n = len(x)
    total = 0.0
    for i in range(n):
        for j in range(n):
            dot = sum(float(x[i][k]) * float(y[j][k]) for k in range(len(x[i])))
            z = 1.0 if i == j else -1.0
            total += math.log1p(math.exp(-z * (t * dot + b)))
    return total / n


def _scalar_softmax(x, y, t):
    n = len(x)
    s = [[t * sum(float(x[i][k]) * float(y[j][k]) for k in range(len(x[i]))) for j in range(n)] for i in range(n)]

    def lse(vals):
        m = max(vals)
        return m + math.log(sum(math.exp(v - m) for v in vals))

    i2t = sum(lse(s[i]) - s[i][i] for i in range(n))
    t2i = sum(lse([s[r][j] for r in range(n)]) - s[j][j] for j in range(n))
    return (i2t + t2i) / (2 * n)


class Checks:
    """The check registry; ``perturb_bias_grad`` is a detector-sanity hook."""

    def __init__(self, perturb_bias_grad: float = 0.0):
        self.perturb_bias_grad = perturb_bias_grad

    def names(self):
        return [n[len("check_"):] for n in dir(self) if n.startswith("check_")]

    def run(self, name):
        try:
            return getattr(self, "check_" + name)()
        except Exception as exc:  # a crash is a failed check, not a crashed report
            return False, f"raised {type(exc).__name__}: {exc}"

    # core ---------------------------------------------------------------

    def check_log_sigmoid_reference(self):
        xs = [-800.0, -40.0, -10.0, -1.0, 0.0, 2.5, 40.0, 800.0]
        ref = [-(math.log1p(math.exp(-x)) if x > -30 else -x + math.log1p(math.exp(x))) for x in xs]
        err = max(abs(log_sigmoid(x) - r) for x, r in zip(xs, ref))
        return err <= 1e-12, f"max abs err {err:.2e}"

    def check_matmul_triple_loop(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((4, 7)), rng.standard_normal((7, 3))
        ref = np.array([[sum(a[i, k] * b[k, j] for k in range(7)) for j in range(3)] for i in range(4)])
        return bool(np.array_equal(matmul(a, b), ref)), "bit-exact left-to-right sums"

    def check_normalize_rows(self):
        out = l2_normalize_rows([[3.0, 4.0], [0.0, 2.0]])
        return bool(np.array_equal(out, [[0.6, 0.8], [0.0, 1.0]])), str(out.tolist())

    def check_log_softmax_extremes(self):
        out = row_log_softmax([[1e4, 0.0], [5.0, 5.0]])
        ok = np.all(np.isfinite(out)) and abs(out[1, 0] + math.log(2)) <= 1e-15 and out[0, 1] == -1e4
        return bool(ok), str(out.tolist())

    # losses -------------------------------------------------------------

    def check_sigmoid_loss_scalar_oracle(self):
        rng = np.random.default_rng(2)
        x, y = _unit(rng, 6, 4), _unit(rng, 6, 4)
        p = LossParams(0.4, -1.5)
        err = abs(sigmoid_loss(x, y, p).value - _scalar_sigmoid(x, y, p.t, p.bias))
        return err <= 1e-12, f"abs err {err:.2e}"

    def check_softmax_loss_scalar_oracle(self):
        rng = np.random.default_rng(3)
        x, y = _unit(rng, 6, 4), _unit(rng, 6, 4)
        err = abs(softmax_loss(x, y, 1.3).value - _scalar_softmax(x, y, math.exp(1.3)))
        return err <= 1e-12, f"abs err {err:.2e}"

    def check_sigmoid_gradients(self):
        rng = np.random.default_rng(4)
        x, y = _unit(rng, 5, 3), _unit(rng, 5, 3)
        tb = np.array([0.6, -2.0])

        def f():
            # the scalar oracle accepts off-sphere rows, so it can be differenced
            return _scalar_sigmoid(x, y, math.exp(tb[0]), tb[1])

        _, g = sigmoid_loss_and_grads(x, y, LossParams(tb[0], tb[1]))
        d_bias = g.d_bias + self.perturb_bias_grad
        num_tb = _fd(f, tb)
        err = max(
            _rel(g.d_zimg, _fd(f, x)),
            _rel(g.d_ztxt, _fd(f, y)),
            _rel([g.d_t_prime, d_bias], num_tb),
        )
        return err <= GRAD_TOL, f"max rel err {err:.2e}"

    def check_softmax_gradients(self):
        rng = np.random.default_rng(5)
        x, y = _unit(rng, 5, 3), _unit(rng, 5, 3)
        tp = np.array([0.8])

        def f():
            return _scalar_softmax(x, y, math.exp(tp[0]))

        _, g = softmax_loss_and_grads(x, y, float(tp[0]))
        err = max(_rel(g.d_zimg, _fd(f, x)), _rel(g.d_ztxt, _fd(f, y)), _rel([g.d_t_prime], _fd(f, tp)))
        return err <= GRAD_TOL, f"max rel err {err:.2e}"

    def check_init_closed_form(self):
        n = 16
        x = np.eye(2 * n)[:n]
        y = np.eye(2 * n)[n:]
        got = sigmoid_loss(x, y, LossParams()).value
        ref = math.log1p(math.exp(10.0)) + (n - 1) * math.log1p(math.exp(-10.0))
        return abs(got - ref) <= 1e-9, f"{got!r} vs {ref!r}"

    def check_bias_gradient_ratio(self):
        n = 16
        x = np.eye(2 * n)[:n]
        y = np.eye(2 * n)[n:]
        at_init = abs(sigmoid_loss_and_grads(x, y, LossParams())[1].d_bias)
        at_zero = abs(sigmoid_loss_and_grads(x, y, LossParams(bias=0.0))[1].d_bias)
        return at_init < at_zero / 5, f"|d_bias| {at_init:.4f} (b=-10) vs {at_zero:.4f} (b=0)"

    def check_mask_counts(self):
        rng = np.random.default_rng(6)
        x, y = _unit(rng, 33, 4), _unit(rng, 33, 4)
        pl = sigmoid_loss(x, y, LossParams()).pair_losses
        ok = True
        for strat in ("random", "hard", "easy"):
            keep = build_mask(pl, MaskSpec(strat, 4))
            ok &= int(keep.sum()) == 33 + 33 * 4 and bool(np.all(np.diag(keep)))
        return ok, "n positives + 4n negatives kept at 1:4"

    # chunked ------------------------------------------------------------

    def check_chunked_equals_monolithic(self):
        rng = np.random.default_rng(7)
        x, y = _unit(rng, 24, 5), _unit(rng, 24, 5)
        p = LossParams(0.9, -4.0)
        out, g = sigmoid_loss_and_grads(x, y, p)
        worst = 0.0
        for fn in (chunked_sigmoid_loss, allgather_sigmoid_loss):
            v, cg, _ = fn(ShardPlan(24, 4), x, y, p)
            worst = max(worst, abs(v - out.value), float(np.max(np.abs(cg.d_zimg - g.d_zimg))),
                        float(np.max(np.abs(cg.d_ztxt - g.d_ztxt))))
        return worst <= 1e-10, f"max abs diff {worst:.2e}"

    def check_chunked_single_device_bitwise(self):
        rng = np.random.default_rng(8)
        x, y = _unit(rng, 10, 4), _unit(rng, 10, 4)
        out, g = sigmoid_loss_and_grads(x, y, LossParams())
        v, cg, _ = chunked_sigmoid_loss(ShardPlan(10, 1), x, y, LossParams())
        ok = v == out.value and np.array_equal(cg.d_zimg, g.d_zimg) and np.array_equal(cg.d_ztxt, g.d_ztxt)
        return bool(ok), "D=1 matches monolithic bit for bit"

    def check_chunk_bench_peaks(self):
        ch = bench_record("chunked", 256, 8, 8)
        ag = bench_record("allgather", 256, 8, 8)
        ok = ch["peak_entries"] == 1024 and ag["peak_entries"] == 8192
        ok = ok and ch["floats_transferred"] < ag["floats_transferred"]
        return ok, f"peak {ch['peak_entries']} vs {ag['peak_entries']}"

    # model --------------------------------------------------------------

    def check_mlp_gradients(self):
        rng = np.random.default_rng(9)
        enc = MlpEncoder([3, 4, 2], seed=9)
        x = rng.standard_normal((4, 3))
        w = rng.standard_normal((4, 2))
        out, cache = forward(enc, x)
        grads, d_in = backward(enc, cache, w)

        def f():
            return float(np.sum(forward(enc, x)[0] * w))

        err = max(_rel(grads[k], _fd(f, v)) for k, v in enc.params().items())
        err = max(err, _rel(d_in, _fd(f, x)))
        return err <= GRAD_TOL, f"max rel err {err:.2e}"

    def check_normalize_gradients(self):
        rng = np.random.default_rng(10)
        raw = rng.standard_normal((3, 4))
        w = rng.standard_normal((3, 4))
        _, d = normalize_with_grad(raw, w)
        err = _rel(d, _fd(lambda: float(np.sum(normalize_with_grad(raw)[0] * w)), raw))
        return err <= GRAD_TOL, f"max rel err {err:.2e}"

    # optim --------------------------------------------------------------

    def check_adam_scalar_recurrence(self):
        cfg = OptimConfig(weight_decay=0.01)
        p = {"w": np.array([1.0])}
        state = AdamState()
        m = v = 0.0
        theta = 1.0
        err = 0.0
        for t, g in enumerate([0.5, -1.0, 2.0, 0.1], start=1):
            adam_step(state, p, [ParamGroup("g", ["w"])], {"w": np.array([g])}, 0.1, cfg)
            m = cfg.beta1 * m + (1 - cfg.beta1) * g
            v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
            upd = (m / (1 - cfg.beta1**t)) / (math.sqrt(v / (1 - cfg.beta2**t)) + cfg.eps)
            theta -= 0.1 * (upd + cfg.weight_decay * theta)
            err = max(err, abs(theta - float(p["w"][0])))
        return err <= 1e-15, f"max abs err {err:.2e}"

    def check_beta2_spike_recovery(self):
        fast, slow = spike_recovery_steps(0.95), spike_recovery_steps(0.999)
        return fast < slow, f"{fast} steps (0.95) vs {slow} steps (0.999)"

    # data ---------------------------------------------------------------

    def check_latent_nearest_neighbour(self):
        z = generate(SyntheticPairSpec(), 64, stream=2).latents
        d2 = np.sum((z[:, None, :] - z[None, :, :]) ** 2, axis=2)
        recall = float(np.mean(np.argmin(d2, axis=1) == np.arange(64)))
        return recall == 1.0, f"recall@1 {recall}"

    def check_corruption_binomial(self):
        spec = SyntheticPairSpec()
        ds = generate(spec, 1000)
        counts = [corrupt(ds, CorruptionSpec(image_noise_p=0.4, seed=s), spec.text_vocab)[1].images_replaced
                  for s in range(100)]
        dev = abs(float(np.mean(counts)) - 400.0)
        return dev <= 3 * math.sqrt(1000 * 0.24), f"mean {np.mean(counts):.1f}"


def run_checks(perturb_bias_grad: float = 0.0, log=print):
    """Runs every check, logging one line each; returns the list of (name, ok, detail)."""
    checks = Checks(perturb_bias_grad)
    results = []
    for name in checks.names():
        ok, detail = checks.run(name)
        log(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        results.append((name, bool(ok), detail))
    return results
