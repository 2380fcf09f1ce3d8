"""Training loop, retrieval / zero-shot evaluation and experiment sweeps."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .chunked import STRATEGIES, ShardPlan
from .core import l2_normalize_rows, matmul, transpose
from .data import CHANNELS, CorruptionSpec, PairDataset, SyntheticPairSpec, corrupt, train_eval
from .errors import ConfigError
from .losses import (
    LossParams,
    MaskSpec,
    build_mask,
    sigmoid_loss,
    sigmoid_loss_and_grads,
    softmax_loss_and_grads,
)
from .model import (
    DualEncoder,
    ModelDims,
    ParamGroup,
    backward,
    forward,
    normalize_with_grad,
    param_groups,
    text_backward,
    text_forward,
)
from .optim import (
    AdamState,
    GradMonitor,
    OptimConfig,
    Schedule,
    adam_step,
    global_grad_norm,
    lr_at,
    monitor_update,
)

TOWER_MODES = ("both_trainable", "image_frozen", "image_pretrained_unlocked")


def _int_tuple(text) -> tuple:
    if isinstance(text, (tuple, list)):
        return tuple(int(v) for v in text)
    text = str(text).strip()
    return tuple(int(v) for v in text.split(",") if v.strip()) if text else ()


@dataclass
class RunConfig:
    """Flat run description; every field is a plain key in config files."""

    loss: str = "sigmoid"
    batch_size: int = 32
    total_examples_seen: int = 32768
    devices: int = 1
    shard_strategy: str = "chunked"
    mask_strategy: str = "none"
    mask_ratio: str = ""
    matched_pairs: bool = False
    image_noise_p: float = 0.0
    text_scramble_p: float = 0.0
    misalign_p: float = 0.0
    latent_dim: int = 8
    image_dim: int = 16
    n_classes: int = 32
    class_tokens: int = 4
    class_positions: int = 2
    levels: int = 8
    class_spread: float = 0.6
    noise_sigma: float = 0.1
    data_seed: int = 0
    n_train: int = 4096
    n_eval: int = 256
    embed_dim: int = 16
    image_hidden: str = "32"
    text_hidden: str = "32"
    bottleneck: int = 8
    width: int = 16
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    lr: float = 0.01
    weight_decay: float = 0.0001
    grad_clip: float = 0.0
    schedule: str = "warmup_cosine"
    warmup_frac: float = 0.1
    seed: int = 0
    tower_mode: str = "both_trainable"
    t_prime_init: float = math.log(10.0)
    bias_init: float = -10.0
    learn_bias: bool = True
    pretrain_steps: int = 300
    precision: str = "f64"
    spike_factor: float = 5.0
    eval_k: str = "1,5,10"

    def __post_init__(self):
        if self.loss not in ("sigmoid", "softmax"):
            raise ConfigError(f"unknown loss {self.loss!r}", "loss")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive", "batch_size")
        if self.total_examples_seen < 0 or self.total_examples_seen % self.batch_size:
            raise ConfigError(
                f"total_examples_seen={self.total_examples_seen} is not a multiple of "
                f"batch_size={self.batch_size}",
                "total_examples_seen",
            )
        if self.tower_mode not in TOWER_MODES:
            raise ConfigError(f"unknown tower mode {self.tower_mode!r}", "tower_mode")
        if self.shard_strategy not in STRATEGIES:
            raise ConfigError(f"unknown shard strategy {self.shard_strategy!r}", "shard_strategy")
        if self.precision not in ("f64", "f32"):
            raise ConfigError("precision must be f64 or f32", "precision")
        if self.batch_size % self.devices:
            raise ConfigError(
                f"batch_size={self.batch_size} does not split over devices={self.devices}", "devices"
            )
        self.mask_spec()
        self.corruption_spec()
        self.optim_config()

    @classmethod
    def keys(cls) -> list:
        return [f.name for f in dataclasses.fields(cls)]

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def data_spec(self) -> SyntheticPairSpec:
        return SyntheticPairSpec(
            latent_dim=self.latent_dim,
            image_dim=self.image_dim,
            n_classes=self.n_classes,
            class_tokens=self.class_tokens,
            class_positions=self.class_positions,
            levels=self.levels,
            noise_sigma=self.noise_sigma,
            class_spread=self.class_spread,
            seed=self.data_seed,
        )

    def model_dims(self) -> ModelDims:
        spec = self.data_spec()
        return ModelDims(
            image_dim=self.image_dim,
            vocab_size=spec.text_vocab,
            bottleneck=self.bottleneck,
            width=self.width,
            embed_dim=self.embed_dim,
            image_hidden=_int_tuple(self.image_hidden),
            text_hidden=_int_tuple(self.text_hidden),
        )

    def optim_config(self) -> OptimConfig:
        return OptimConfig(
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            base_lr=self.lr,
            weight_decay=self.weight_decay,
            grad_clip_norm=self.grad_clip or None,
        )

    def mask_spec(self) -> MaskSpec:
        if self.mask_strategy != "none" and self.loss != "sigmoid":
            raise ConfigError("negative masking applies to the sigmoid loss only", "mask_strategy")
        try:
            return MaskSpec.parse(self.mask_strategy, self.mask_ratio, self.seed)
        except ValueError as exc:
            raise ConfigError(str(exc), "mask_ratio") from exc

    def corruption_spec(self) -> CorruptionSpec:
        return CorruptionSpec(self.image_noise_p, self.text_scramble_p, self.misalign_p, self.seed)

    def masking_factor(self) -> float:
        """Ratio of available to kept negatives (1 without masking)."""
        spec = self.mask_spec()
        if spec.strategy == "none":
            return 1.0
        return (self.batch_size - 1) / spec.negatives_per_positive

    @property
    def base_steps(self) -> int:
        return self.total_examples_seen // self.batch_size

    @property
    def steps(self) -> int:
        if self.matched_pairs:
            return int(round(self.base_steps * self.masking_factor()))
        return self.base_steps

    def schedule_spec(self) -> Schedule:
        steps = self.steps
        warm = int(round(self.warmup_frac * steps)) if self.schedule != "constant" else 0
        return Schedule(self.schedule, warm, max(steps, 1), self.lr)

    def k_values(self) -> tuple:
        return _int_tuple(self.eval_k)


@dataclass
class EvalReport:
    recall_i2t: dict
    recall_t2i: dict
    zero_shot_accuracy: float
    positive_logit_mean: float
    negative_logit_mean: float
    final_loss: float = float("nan")
    final_t: float = float("nan")
    final_b: float = float("nan")
    grad_spikes: int = 0

    @property
    def recall_at_1(self) -> float:
        """Mean of the image->text and text->image recall@1."""
        return 0.5 * (self.recall_i2t[1] + self.recall_t2i[1])

    def row(self) -> dict:
        out = {"recall_at_1": self.recall_at_1}
        for k in sorted(self.recall_i2t):
            out[f"i2t_recall_at_{k}"] = self.recall_i2t[k]
        for k in sorted(self.recall_t2i):
            out[f"t2i_recall_at_{k}"] = self.recall_t2i[k]
        out.update(
            zero_shot_accuracy=self.zero_shot_accuracy,
            final_loss=self.final_loss,
            final_t=self.final_t,
            final_b=self.final_b,
            positive_logit_mean=self.positive_logit_mean,
            negative_logit_mean=self.negative_logit_mean,
            grad_spikes=self.grad_spikes,
        )
        return out


# ---------------------------------------------------------------------------
# evaluation


def recall_at_k(sim, k_values) -> dict:
    """Row i's true partner is column i; ties rank the lower index first."""
    sim = np.asarray(sim, dtype=np.float64)
    n = sim.shape[0]
    true = np.diag(sim)[:, None]
    idx = np.arange(n)
    better = (sim > true) | ((sim == true) & (idx[None, :] < idx[:, None]))
    rank = better.sum(axis=1)
    return {int(k): float(np.mean(rank < k)) for k in k_values}


def zero_shot_accuracy(zimg, ztxt, classes) -> float:
    """Nearest class prototype, a prototype being the renormalized mean text embedding."""
    classes = np.asarray(classes)
    labels = np.unique(classes)
    protos = np.stack([ztxt[classes == c].mean(axis=0) for c in labels])
    protos = l2_normalize_rows(protos)
    pred = labels[np.argmax(matmul(zimg, transpose(protos)), axis=1)]
    return float(np.mean(pred == classes))


def evaluate_embeddings(zimg, ztxt, classes, k_values=(1, 5, 10), params: LossParams | None = None):
    sim = matmul(zimg, transpose(ztxt))
    params = params or LossParams()
    logits = sim * params.t + params.bias
    n = sim.shape[0]
    off = ~np.eye(n, dtype=bool)
    return EvalReport(
        recall_i2t=recall_at_k(sim, k_values),
        recall_t2i=recall_at_k(transpose(sim), k_values),
        zero_shot_accuracy=zero_shot_accuracy(zimg, ztxt, classes),
        positive_logit_mean=float(np.mean(np.diag(logits))),
        negative_logit_mean=float(np.mean(logits[off])) if n > 1 else float("nan"),
    )


def evaluate(model: DualEncoder, eval_set: PairDataset, k_values=(1, 5, 10)) -> EvalReport:
    zimg = model.encode_images(eval_set.images)
    ztxt = model.encode_texts(eval_set.tokens)
    return evaluate_embeddings(zimg, ztxt, eval_set.classes, k_values, model.loss_params())


# ---------------------------------------------------------------------------
# training


def pretrain_image_tower(model: DualEncoder, train_set: PairDataset, steps: int, seed: int):
    """Classification proxy: image MLP + linear head, softmax cross-entropy.

    Stands in for a pre-trained checkpoint; only the tower is kept.
    """
    if steps <= 0:
        return
    rng = np.random.default_rng([seed, 40])
    n_classes = int(train_set.classes.max()) + 1
    head = rng.standard_normal((model.dims.embed_dim, n_classes)) / math.sqrt(model.dims.embed_dim)
    params = {f"image.{k}": v for k, v in model.image.params().items()}
    params["head"] = head
    groups = [ParamGroup("all", list(params))]
    cfg = OptimConfig(weight_decay=0.0)
    state = AdamState()
    for _ in range(steps):
        idx = rng.integers(0, len(train_set), size=64)
        raw, cache = forward(model.image, train_set.images[idx])
        logits = matmul(raw, head)
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(idx.size), train_set.classes[idx]] -= 1.0
        d_logits = p / idx.size
        grads = {"head": matmul(transpose(raw), d_logits)}
        g_img, _ = backward(model.image, cache, matmul(d_logits, transpose(head)), need_input_grad=False)
        grads.update({f"image.{k}": v for k, v in g_img.items()})
        adam_step(state, params, groups, grads, 0.01, cfg)


def init_model(cfg: RunConfig, train_set: PairDataset | None = None) -> DualEncoder:
    bias = cfg.bias_init if cfg.learn_bias else 0.0
    model = DualEncoder(cfg.model_dims(), seed=cfg.seed, t_prime=cfg.t_prime_init, bias=bias)
    if cfg.tower_mode != "both_trainable" and train_set is not None:
        pretrain_image_tower(model, train_set, cfg.pretrain_steps, cfg.seed)
    return model


@dataclass
class StepResult:
    loss: float
    grads: dict
    positive_logit_mean: float
    negative_logit_mean: float


def _as_precision(x, precision):
    if precision == "f32":
        return x.astype(np.float32).astype(np.float64)
    return x


def loss_step(model: DualEncoder, batch: PairDataset, cfg: RunConfig, mask_seed=0, train_image=True):
    """Forward + backward for one batch; gradients keyed like ``model.params()``."""
    raw_img, img_cache = forward(model.image, batch.images)
    raw_txt, txt_cache = text_forward(model.text, batch.tokens)
    zimg, _ = normalize_with_grad(raw_img)
    ztxt, _ = normalize_with_grad(raw_txt)
    zimg = _as_precision(zimg, cfg.precision)
    ztxt = _as_precision(ztxt, cfg.precision)
    params = model.loss_params()
    n = zimg.shape[0]

    if cfg.loss == "softmax":
        out, lg = softmax_loss_and_grads(zimg, ztxt, params.t_prime)
        value, pos, neg = out.value, out.positive_logit_mean, out.negative_logit_mean
    else:
        spec = cfg.mask_spec()
        mask = None
        if spec.strategy != "none":
            pre = sigmoid_loss(zimg, ztxt, params)
            mask = build_mask(pre.pair_losses, dataclasses.replace(spec, seed=mask_seed))
        if cfg.devices == 1:
            out, lg = sigmoid_loss_and_grads(zimg, ztxt, params, mask)
            value, pos, neg = out.value, out.positive_logit_mean, out.negative_logit_mean
        else:
            plan = ShardPlan(n, cfg.devices)
            value, lg, _ = STRATEGIES[cfg.shard_strategy](plan, zimg, ztxt, params, mask)
            pos = neg = float("nan")

    _, d_raw_txt = normalize_with_grad(raw_txt, lg.d_ztxt)
    grads = {f"text.{k}": v for k, v in text_backward(model.text, txt_cache, d_raw_txt).items()}
    if train_image:
        _, d_raw_img = normalize_with_grad(raw_img, lg.d_zimg)
        g_img, _ = backward(model.image, img_cache, d_raw_img, need_input_grad=False)
        grads.update({f"image.{k}": v for k, v in g_img.items()})
    grads["loss.t_prime"] = np.array([lg.d_t_prime])
    if cfg.loss == "sigmoid" and cfg.learn_bias:
        grads["loss.bias"] = np.array([lg.d_bias])
    return StepResult(value, grads, pos, neg)


class BatchSampler:
    """Epoch-wise shuffled index stream, fixed by the seed."""

    def __init__(self, n: int, batch_size: int, seed: int):
        if batch_size > n:
            raise ConfigError(f"batch_size {batch_size} exceeds the {n} training pairs", "batch_size")
        self.n = n
        self.batch_size = batch_size
        self.rng = np.random.default_rng([seed, 10])
        self.order = self.rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos + self.batch_size > self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.order[self.pos : self.pos + self.batch_size]
        self.pos += self.batch_size
        return idx


@dataclass
class TrainResult:
    model: DualEncoder
    trace: list
    groups: list
    corruption_counts: dict = field(default_factory=dict)
    spikes: int = 0


def train(cfg: RunConfig, data=None, model: DualEncoder | None = None) -> TrainResult:
    """Train per ``cfg``; ``data`` is an optional ``(train, eval)`` pair.

    One trace record per step: step, lr, loss, grad_norm, spike, t, b and
    the parameter-update norm.
    """
    if data is None:
        data = make_data(cfg)
    train_set = data[0]
    if model is None:
        model = init_model(cfg, train_set)
    params = model.params()
    groups = param_groups(model, cfg.tower_mode, cfg.learn_bias)
    trainable = {n for g in groups if not g.frozen for n in g.params}
    ocfg = cfg.optim_config()
    schedule = cfg.schedule_spec()
    state = AdamState()
    monitor = GradMonitor(spike_factor=cfg.spike_factor)
    sampler = BatchSampler(len(train_set), cfg.batch_size, cfg.seed)
    corrupt_rng = np.random.default_rng([cfg.seed, 20])
    cspec = cfg.corruption_spec()
    vocab = model.dims.vocab_size
    counts = {"images_replaced": 0, "texts_scrambled": 0, "pairs_shuffled": 0, "items": 0}
    train_image = cfg.tower_mode != "image_frozen"
    trace = []

    for step in range(cfg.steps):
        batch = train_set.take(sampler.next())
        if cspec.active:
            batch, report = corrupt(batch, cspec, vocab, corrupt_rng)
            for key, value in dataclasses.asdict(report).items():
                counts[key] += value
            counts["items"] += len(batch)
        res = loss_step(model, batch, cfg, mask_seed=cfg.seed * 1_000_003 + step, train_image=train_image)
        grads = {k: v for k, v in res.grads.items() if k in trainable}
        norm = global_grad_norm(grads)
        verdict = monitor_update(monitor, norm)
        lr = lr_at(schedule, step)
        before = {k: params[k].copy() for k in grads}
        adam_step(state, params, groups, grads, lr, ocfg)
        if cfg.precision == "f32":
            for k in grads:
                params[k][...] = params[k].astype(np.float32)
        upd = math.sqrt(sum(float(np.sum((params[k] - before[k]) ** 2)) for k in sorted(grads)))
        trace.append(
            {
                "step": step,
                "lr": lr,
                "loss": res.loss,
                "grad_norm": norm,
                "spike": verdict == "spike",
                "t": math.exp(float(model.t_prime[0])),
                "b": float(model.bias[0]),
                "update_norm": upd,
            }
        )
    return TrainResult(model, trace, groups, counts, monitor.spikes)


def make_data(cfg: RunConfig):
    return train_eval(cfg.data_spec(), cfg.n_train, cfg.n_eval)


def run(cfg: RunConfig, data=None):
    """Train then evaluate; returns ``(TrainResult, EvalReport)``."""
    if data is None:
        data = make_data(cfg)
    result = train(cfg, data)
    report = evaluate(result.model, data[1], cfg.k_values())
    if result.trace:
        report.final_loss = result.trace[-1]["loss"]
    params = result.model.loss_params()
    report.final_t = params.t
    report.final_b = params.bias
    report.grad_spikes = result.spikes
    return result, report


# ---------------------------------------------------------------------------
# sweeps

SWEEP_AXES = ("batch_size", "mask", "corruption", "beta2", "bias_init")


def apply_axis(base: RunConfig, axis: str, value) -> RunConfig:
    """Config for one axis value.

    Value formats: batch_size ``64``; mask ``none`` / ``hard:16`` /
    ``hard:16:matched``; corruption ``image:0.5`` (channel:p); beta2
    ``0.999``; bias_init ``-10`` or ``none`` (no bias term).
    """
    if axis == "batch_size":
        return base.replace(batch_size=int(value))
    if axis == "mask":
        parts = str(value).split(":")
        if parts[0] == "none":
            return base.replace(mask_strategy="none", mask_ratio="", matched_pairs=False)
        if len(parts) < 2:
            raise ConfigError(f"mask value {value!r} needs a ratio, e.g. hard:16", "mask")
        matched = len(parts) > 2 and parts[2] == "matched"
        return base.replace(mask_strategy=parts[0], mask_ratio=parts[1], matched_pairs=matched)
    if axis == "corruption":
        channel, _, p = str(value).partition(":")
        if channel not in CHANNELS or not p:
            raise ConfigError(f"corruption value {value!r} must look like image:0.5", "corruption")
        c = CorruptionSpec.channel(channel, float(p))
        return base.replace(
            image_noise_p=c.image_noise_p, text_scramble_p=c.text_scramble_p, misalign_p=c.misalign_p
        )
    if axis == "beta2":
        return base.replace(beta2=float(value))
    if axis == "bias_init":
        if str(value) == "none":
            return base.replace(learn_bias=False, bias_init=0.0)
        return base.replace(learn_bias=True, bias_init=float(value))
    raise ConfigError(f"unknown sweep axis {axis!r}", "axis")


def sweep(base: RunConfig, axis: str, values, losses=None, seeds=(0, 1, 2, 3, 4)) -> list:
    """One run per (value, loss, seed); rows carry the axis value and every report scalar.

    Data depend only on the data settings, so runs that share them reuse
    the same generated splits.
    """
    losses = list(losses) if losses else [base.loss]
    rows = []
    cache = {}
    for value in values:
        for loss in losses:
            for seed in seeds:
                cfg = apply_axis(base.replace(loss=loss, seed=int(seed)), axis, value)
                key = (cfg.data_spec(), cfg.n_train, cfg.n_eval)
                if key not in cache:
                    cache[key] = make_data(cfg)
                result, report = run(cfg, cache[key])
                row = {"axis": axis, "value": str(value), "loss": loss, "seed": int(seed)}
                row["steps"] = cfg.steps
                row["batch_size"] = cfg.batch_size
                row.update(report.row())
                row["step0_loss"] = result.trace[0]["loss"] if result.trace else float("nan")
                for k in ("images_replaced", "texts_scrambled", "pairs_shuffled", "items"):
                    row[f"corrupt_{k}"] = result.corruption_counts[k]
                row["step0_d_bias"] = (
                    step0_bias_grad(cfg, cache[key]) if loss == "sigmoid" else float("nan")
                )
                rows.append(row)
    return rows


def step0_bias_grad(cfg: RunConfig, data=None) -> float:
    """d loss / d b on the first training batch at initialization."""
    if data is None:
        data = make_data(cfg)
    model = init_model(cfg, data[0])
    sampler = BatchSampler(len(data[0]), cfg.batch_size, cfg.seed)
    batch = data[0].take(sampler.next())
    res = loss_step(model, batch, cfg.replace(learn_bias=True))
    return float(res.grads["loss.bias"][0])
