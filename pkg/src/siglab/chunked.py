"""Simulated multi-device evaluation of the sigmoid loss.

Devices run one after another in a fixed round-robin, so a simulation is
deterministic; what is modelled is the dataflow (which shard sits where) and
its cost (floats moved, similarity entries held), not wall-clock time.

Two strategies are provided:

* ``chunked``: each device keeps its images and passes its text shard to a
  neighbour for ``D - 1`` rounds. Device ``k`` receives the shard previously
  held by device ``(k + 1) mod D``. Only one ``b x b`` block exists per
  device at any time. Text gradients ride along with their shard and make
  one final hop back to the owner.
* ``allgather``: every device gathers all image and text shards (two
  all-gathers) and evaluates its ``b x |B|`` row block at once. Text
  gradients are reduce-scattered back.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import IndivisibleBatch, ShapeMismatch
from .losses import LossParams, check_batch, finalize_sigmoid_grads, sigmoid_block


@dataclass(frozen=True)
class ShardPlan:
    n_global: int
    n_devices: int

    def __post_init__(self):
        if self.n_devices < 1:
            raise IndivisibleBatch("need at least one device")
        if self.n_global < 1 or self.n_global % self.n_devices:
            raise IndivisibleBatch(
                f"batch {self.n_global} does not split evenly over {self.n_devices} devices"
            )

    @property
    def per_device(self) -> int:
        return self.n_global // self.n_devices

    def rows(self, device: int) -> slice:
        b = self.per_device
        return slice(device * b, (device + 1) * b)


@dataclass
class CommStats:
    strategy: str
    n: int
    n_devices: int
    per_device: int
    permutes_executed: int = 0
    floats_transferred: int = 0
    grad_floats_transferred: int = 0
    peak_similarity_entries_per_device: int = 0

    def record(self) -> dict:
        """Flat record for the CLI / JSON output."""
        return {
            "n": self.n,
            "D": self.n_devices,
            "b": self.per_device,
            "strategy": self.strategy,
            "peak_entries": self.peak_similarity_entries_per_device,
            "floats_transferred": self.floats_transferred,
            "grad_floats_transferred": self.grad_floats_transferred,
            "permutes": self.permutes_executed,
        }


@dataclass
class TextShard:
    """A text shard in flight, with its gradient buffer attached."""

    owner: int
    texts: np.ndarray
    grad: np.ndarray | None = None


@dataclass
class DeviceState:
    device_id: int
    local_images: np.ndarray
    resident: TextShard
    partial_loss: float | None = None
    partial_gx: np.ndarray | None = None
    partial_bias: float | None = None
    partial_tprime: float | None = None
    live_entries: int = 0
    peak_entries: int = 0

    @property
    def resident_texts(self) -> np.ndarray:
        return self.resident.texts

    def materialize(self, entries: int):
        self.live_entries += entries
        self.peak_entries = max(self.peak_entries, self.live_entries)

    def release(self, entries: int):
        self.live_entries -= entries


def _acc(current, value):
    # first contribution is stored as-is so a single round reproduces the
    # monolithic numbers bit for bit
    return value if current is None else current + value


def shard(zimg, ztxt, n_devices: int) -> list[DeviceState]:
    zimg = np.asarray(zimg, dtype=np.float64)
    ztxt = np.asarray(ztxt, dtype=np.float64)
    if zimg.shape != ztxt.shape or zimg.ndim != 2:
        raise ShapeMismatch(f"image batch {zimg.shape} vs text batch {ztxt.shape}")
    plan = ShardPlan(zimg.shape[0], n_devices)
    return [
        DeviceState(
            device_id=k,
            local_images=zimg[plan.rows(k)].copy(),
            resident=TextShard(owner=k, texts=ztxt[plan.rows(k)].copy()),
        )
        for k in range(n_devices)
    ]


def _check_plan(plan: ShardPlan, zimg, ztxt):
    zimg, ztxt = check_batch(zimg, ztxt)
    if zimg.shape[0] != plan.n_global:
        raise IndivisibleBatch(f"plan is for batch {plan.n_global}, got {zimg.shape[0]}")
    return zimg, ztxt


def chunked_sigmoid_loss(plan: ShardPlan, zimg, ztxt, params: LossParams, mask=None):
    """Sigmoid loss and gradients via neighbour permutes of text shards.

    Returns ``(value, grads, stats)``.
    """
    zimg, ztxt = _check_plan(plan, zimg, ztxt)
    n, d = zimg.shape
    D, b = plan.n_devices, plan.per_device
    t, bias = params.t, params.bias
    devices = shard(zimg, ztxt, D)
    stats = CommStats("chunked", n, D, b)

    for r in range(D):
        if r > 0:
            shards = [dev.resident for dev in devices]
            for k, dev in enumerate(devices):
                dev.resident = shards[(k + 1) % D]
            stats.permutes_executed += D
            stats.floats_transferred += D * b * d
            stats.grad_floats_transferred += D * b * d
        for dev in devices:
            k, shard_ = dev.device_id, dev.resident
            keep = None
            if mask is not None:
                keep = np.asarray(mask)[plan.rows(k), plan.rows(shard_.owner)]
            dev.materialize(b * b)
            terms = sigmoid_block(
                dev.local_images, shard_.texts, t, bias, n, k * b, shard_.owner * b, keep
            )
            dev.partial_loss = _acc(dev.partial_loss, terms.loss_sum)
            dev.partial_gx = _acc(dev.partial_gx, terms.gx)
            dev.partial_bias = _acc(dev.partial_bias, terms.bias_sum)
            dev.partial_tprime = _acc(dev.partial_tprime, terms.tprime_sum)
            shard_.grad = _acc(shard_.grad, terms.gy)
            dev.release(b * b)

    # send every gradient buffer home
    text_grads = [None] * D
    for dev in devices:
        text_grads[dev.resident.owner] = dev.resident.grad
        if dev.resident.owner != dev.device_id:
            stats.grad_floats_transferred += b * d

    stats.peak_similarity_entries_per_device = max(dev.peak_entries for dev in devices)
    loss_sum = bias_sum = tprime_sum = None
    for dev in devices:
        loss_sum = _acc(loss_sum, dev.partial_loss)
        bias_sum = _acc(bias_sum, dev.partial_bias)
        tprime_sum = _acc(tprime_sum, dev.partial_tprime)
    gx = np.concatenate([dev.partial_gx for dev in devices], axis=0)
    gy = np.concatenate(text_grads, axis=0)
    grads = finalize_sigmoid_grads(gx, gy, bias_sum, tprime_sum, t)
    return loss_sum / n, grads, stats


def allgather_sigmoid_loss(plan: ShardPlan, zimg, ztxt, params: LossParams, mask=None):
    """Baseline: gather everything, then one ``b x |B|`` block per device."""
    zimg, ztxt = _check_plan(plan, zimg, ztxt)
    n, d = zimg.shape
    D, b = plan.n_devices, plan.per_device
    t, bias = params.t, params.bias
    devices = shard(zimg, ztxt, D)
    stats = CommStats("allgather", n, D, b)

    # two all-gathers (images and texts): each device receives D - 1 shards of each
    all_texts = np.concatenate([dev.resident.texts for dev in devices], axis=0)
    stats.floats_transferred = 2 * D * (D - 1) * b * d

    text_grad_parts = []
    for dev in devices:
        k = dev.device_id
        keep = None if mask is None else np.asarray(mask)[plan.rows(k), :]
        dev.materialize(b * n)
        terms = sigmoid_block(dev.local_images, all_texts, t, bias, n, k * b, 0, keep)
        dev.partial_loss = terms.loss_sum
        dev.partial_gx = terms.gx
        dev.partial_bias = terms.bias_sum
        dev.partial_tprime = terms.tprime_sum
        text_grad_parts.append(terms.gy)
        dev.release(b * n)

    # reduce-scatter of the text gradients
    stats.grad_floats_transferred = D * (D - 1) * b * d
    gy = None
    for part in text_grad_parts:
        gy = _acc(gy, part)

    stats.peak_similarity_entries_per_device = max(dev.peak_entries for dev in devices)
    loss_sum = bias_sum = tprime_sum = None
    for dev in devices:
        loss_sum = _acc(loss_sum, dev.partial_loss)
        bias_sum = _acc(bias_sum, dev.partial_bias)
        tprime_sum = _acc(tprime_sum, dev.partial_tprime)
    gx = np.concatenate([dev.partial_gx for dev in devices], axis=0)
    grads = finalize_sigmoid_grads(gx, gy, bias_sum, tprime_sum, t)
    return loss_sum / n, grads, stats


STRATEGIES = {
    "chunked": chunked_sigmoid_loss,
    "allgather": allgather_sigmoid_loss,
}


def bench_record(strategy: str, n: int, n_devices: int, d: int) -> dict:
    """Communication and memory counters for one (strategy, n, D) cell.

    The counters depend only on the shapes, so random unit embeddings are
    used as payload.
    """
    plan = ShardPlan(n, n_devices)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((n, d))
    y = rng.standard_normal((n, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    y /= np.linalg.norm(y, axis=1, keepdims=True)
    _, _, stats = STRATEGIES[strategy](plan, x, y, LossParams())
    return stats.record()

