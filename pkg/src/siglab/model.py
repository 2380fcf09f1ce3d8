"""Small dual encoders with hand-written backprop.

Image tower: tanh MLP on a feature vector. Text tower: bottlenecked token
embedding (``N x K`` lookup followed by a ``K x W`` projection), mean pooled
over the sequence, then a tanh MLP. Parameters live in plain dicts of
float64 arrays so the optimizer can update them in place.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import as_matrix, col_sums, l2_normalize_rows, matmul, row_norms, row_sums, transpose
from .errors import ConfigError, OutOfVocab, ShapeMismatch, StaleCache, ZeroRow
from .losses import LossParams

CHECKPOINT_VERSION = 1
PAD = -1


class MlpEncoder:
    """tanh hidden layers, identity output layer."""

    def __init__(self, layer_dims, seed=0, init="normal"):
        layer_dims = [int(v) for v in layer_dims]
        if len(layer_dims) < 2 or min(layer_dims) < 1:
            raise ShapeMismatch(f"bad layer dims {layer_dims}")
        self.layer_dims = layer_dims
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            if init == "zeros":
                w = np.zeros((fan_in, fan_out))
            elif init == "identity":
                w = np.eye(fan_in, fan_out)
            else:
                w = rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = w
            out[f"b{i}"] = b
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.params().values())


@dataclass
class MlpCache:
    encoder_id: int
    weights: list
    inputs: list = field(default_factory=list)  # input to each layer
    outputs: list = field(default_factory=list)  # post-activation output of each layer


def forward(enc: MlpEncoder, x):
    """Raw (unnormalized) embeddings and the cache needed by :func:`backward`."""
    h = as_matrix(x)
    if h.shape[1] != enc.layer_dims[0]:
        raise ShapeMismatch(f"input has {h.shape[1]} columns, encoder expects {enc.layer_dims[0]}")
    cache = MlpCache(id(enc), [w.copy() for w in enc.weights])
    last = enc.n_layers - 1
    for i, (w, b) in enumerate(zip(enc.weights, enc.biases)):
        cache.inputs.append(h)
        a = matmul(h, w) + b
        h = a if i == last else np.tanh(a)
        cache.outputs.append(h)
    return h, cache


def backward(enc: MlpEncoder, cache: MlpCache, d_embeddings, need_input_grad=True):
    """Parameter gradients (dict keyed like ``enc.params()``) and d_input."""
    if cache.encoder_id != id(enc) or len(cache.weights) != enc.n_layers or any(
        not np.array_equal(cw, w) for cw, w in zip(cache.weights, enc.weights)
    ):
        raise StaleCache("encoder parameters changed since the forward pass")
    d = as_matrix(d_embeddings)
    if d.shape != cache.outputs[-1].shape:
        raise ShapeMismatch(f"gradient {d.shape} vs output {cache.outputs[-1].shape}")
    grads = {}
    last = enc.n_layers - 1
    d_input = None
    for i in range(last, -1, -1):
        if i != last:
            out = cache.outputs[i]
            d = d * (1.0 - out * out)
        grads[f"W{i}"] = matmul(transpose(cache.inputs[i]), d)
        grads[f"b{i}"] = col_sums(d)
        if i > 0 or need_input_grad:
            d = matmul(d, transpose(cache.weights[i]))
    if need_input_grad:
        d_input = d
    return grads, d_input


def normalize_with_grad(raw, d_normalized=None):
    """Row-normalize ``raw``; with ``d_normalized`` also pull the gradient back.

    The returned gradient is projected onto the tangent space of each row:
    ``(g - (g . u) u) / |raw|`` with ``u`` the unit row.
    """
    raw = as_matrix(raw)
    norms = row_norms(raw)
    if np.any(norms < 1e-30):
        raise ZeroRow(f"row {int(np.argmax(norms < 1e-30))} has (near) zero norm")
    unit = raw / norms[:, None]
    if d_normalized is None:
        return unit, None
    g = as_matrix(d_normalized)
    if g.shape != raw.shape:
        raise ShapeMismatch(f"gradient {g.shape} vs input {raw.shape}")
    radial = row_sums(g * unit)
    return unit, (g - radial[:, None] * unit) / norms[:, None]


class BottleneckEmbedding:
    def __init__(self, vocab_size, bottleneck, width, seed=0, init="normal"):
        self.vocab_size = int(vocab_size)
        self.bottleneck = int(bottleneck)
        self.width = int(width)
        rng = np.random.default_rng(seed)
        self.lookup = rng.standard_normal((self.vocab_size, self.bottleneck))
        if init == "identity":
            self.projection = np.eye(self.bottleneck, self.width)
        else:
            self.projection = rng.standard_normal((self.bottleneck, self.width)) / math.sqrt(
                self.bottleneck
            )

    def params(self) -> dict:
        return {"lookup": self.lookup, "projection": self.projection}

    def n_params(self) -> int:
        return self.vocab_size * self.bottleneck + self.bottleneck * self.width

    @staticmethod
    def param_count(vocab_size: int, bottleneck: int, width: int) -> int:
        return vocab_size * bottleneck + bottleneck * width


def _check_ids(be: BottleneckEmbedding, ids):
    ids = np.asarray(ids, dtype=np.int64)
    valid = ids[ids != PAD]
    if valid.size and (valid.min() < 0 or valid.max() >= be.vocab_size):
        raise OutOfVocab(f"token ids must lie in [0, {be.vocab_size})")
    return ids


def embed_tokens(be: BottleneckEmbedding, token_ids) -> np.ndarray:
    """Per-token embeddings, shape ``len x W``."""
    ids = _check_ids(be, token_ids).ravel()
    if ids.size and ids.min() < 0:
        raise OutOfVocab("padding id inside a token sequence")
    return matmul(be.lookup[ids], be.projection)


@dataclass
class TokenBatch:
    """Right-padded token ids (``PAD`` = -1) with per-row lengths."""

    ids: np.ndarray
    lengths: np.ndarray

    @classmethod
    def from_sequences(cls, seqs, width=None) -> "TokenBatch":
        seqs = [np.asarray(s, dtype=np.int64) for s in seqs]
        width = width or max(len(s) for s in seqs)
        ids = np.full((len(seqs), width), PAD, dtype=np.int64)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = s
        return cls(ids, np.array([len(s) for s in seqs], dtype=np.int64))

    def __len__(self):
        return self.ids.shape[0]

    def take(self, idx) -> "TokenBatch":
        return TokenBatch(self.ids[idx].copy(), self.lengths[idx].copy())


class TextTower:
    def __init__(self, vocab_size, bottleneck, width, mlp_dims, seed=0):
        if mlp_dims[0] != width:
            raise ShapeMismatch("text MLP input must equal the embedding width")
        self.embedding = BottleneckEmbedding(vocab_size, bottleneck, width, seed=seed)
        self.mlp = MlpEncoder(mlp_dims, seed=seed + 1)

    def params(self) -> dict:
        out = {k: v for k, v in self.embedding.params().items()}
        out.update(self.mlp.params())
        return out


@dataclass
class TextCache:
    ids: np.ndarray
    lengths: np.ndarray
    pooled_lookup: np.ndarray
    projection: np.ndarray
    mlp: MlpCache


def text_forward(tower: TextTower, tokens: TokenBatch):
    be = tower.embedding
    ids = _check_ids(be, tokens.ids)
    if np.any(tokens.lengths < 1):
        raise ShapeMismatch("empty token sequence")
    n, L = ids.shape
    # mean of lookup rows, accumulated position by position
    pooled = np.zeros((n, be.bottleneck))
    for pos in range(L):
        live = ids[:, pos] != PAD
        pooled[live] += be.lookup[ids[live, pos]]
    pooled /= tokens.lengths[:, None]
    width_repr = matmul(pooled, be.projection)
    raw, mlp_cache = forward(tower.mlp, width_repr)
    return raw, TextCache(ids, tokens.lengths.copy(), pooled, be.projection.copy(), mlp_cache)


def text_backward(tower: TextTower, cache: TextCache, d_raw):
    if not np.array_equal(cache.projection, tower.embedding.projection):
        raise StaleCache("embedding projection changed since the forward pass")
    grads, d_width = backward(tower.mlp, cache.mlp, d_raw)
    be = tower.embedding
    grads["projection"] = matmul(transpose(cache.pooled_lookup), d_width)
    d_pooled = matmul(d_width, transpose(cache.projection)) / cache.lengths[:, None]
    d_lookup = np.zeros_like(be.lookup)
    n, L = cache.ids.shape
    for pos in range(L):
        live = cache.ids[:, pos] != PAD
        np.add.at(d_lookup, cache.ids[live, pos], d_pooled[live])
    grads["lookup"] = d_lookup
    return grads


@dataclass
class ModelDims:
    image_dim: int
    vocab_size: int
    bottleneck: int
    width: int
    embed_dim: int
    image_hidden: tuple = (64,)
    text_hidden: tuple = (64,)

    @property
    def image_layers(self) -> list:
        return [self.image_dim, *self.image_hidden, self.embed_dim]

    @property
    def text_layers(self) -> list:
        return [self.width, *self.text_hidden, self.embed_dim]


class DualEncoder:
    """Image tower, text tower and the loss's learnable t' and b."""

    def __init__(self, dims: ModelDims, seed=0, t_prime=math.log(10.0), bias=-10.0):
        self.dims = dims
        self.image = MlpEncoder(dims.image_layers, seed=seed * 7 + 1)
        self.text = TextTower(
            dims.vocab_size, dims.bottleneck, dims.width, dims.text_layers, seed=seed * 7 + 2
        )
        self.t_prime = np.array([float(t_prime)])
        self.bias = np.array([float(bias)])

    def params(self) -> dict:
        """Flat ``group.tensor`` -> live array map."""
        out = {f"image.{k}": v for k, v in self.image.params().items()}
        out.update({f"text.{k}": v for k, v in self.text.params().items()})
        out["loss.t_prime"] = self.t_prime
        out["loss.bias"] = self.bias
        return out

    def loss_params(self) -> LossParams:
        return LossParams(float(self.t_prime[0]), float(self.bias[0]))

    def encode_images(self, images):
        raw, _ = forward(self.image, images)
        return l2_normalize_rows(raw)

    def encode_texts(self, tokens: TokenBatch):
        raw, _ = text_forward(self.text, tokens)
        return l2_normalize_rows(raw)

    def copy(self) -> "DualEncoder":
        return copy.deepcopy(self)


@dataclass
class ParamGroup:
    name: str
    params: list
    weight_decay_multiplier: float = 1.0
    lr_multiplier: float = 1.0
    frozen: bool = False

    def __post_init__(self):
        if not 0.0 <= self.weight_decay_multiplier <= 1.0:
            raise ConfigError("weight decay multiplier must lie in [0, 1]", self.name)
        if self.lr_multiplier <= 0:
            raise ConfigError("lr multiplier must be positive", self.name)


def param_groups(model: DualEncoder, tower_mode="both_trainable", learn_bias=True) -> list:
    """Optimizer groups for a tower mode.

    ``image_frozen`` locks the image tower; ``image_pretrained_unlocked``
    trains it with no weight decay and a 0.1 learning-rate multiplier.
    """
    names = model.params()
    image = [k for k in names if k.startswith("image.")]
    text = [k for k in names if k.startswith("text.")]
    loss = ["loss.t_prime"] + (["loss.bias"] if learn_bias else [])
    if tower_mode == "both_trainable":
        image_group = ParamGroup("image", image)
    elif tower_mode == "image_frozen":
        image_group = ParamGroup("image", image, frozen=True)
    elif tower_mode == "image_pretrained_unlocked":
        image_group = ParamGroup("image", image, weight_decay_multiplier=0.0, lr_multiplier=0.1)
    else:
        raise ConfigError(f"unknown tower mode {tower_mode!r}", "tower_mode")
    groups = [image_group, ParamGroup("text", text), ParamGroup("loss", loss, 0.0)]
    if not learn_bias:
        groups.append(ParamGroup("fixed_bias", ["loss.bias"], 0.0, frozen=True))
    return groups


def save_checkpoint(model: DualEncoder, path, groups=None):
    """JSON checkpoint: header plus ``name -> {group, shape, values}``.

    Values are row-major f64 written with ``repr`` precision, so a reload is
    exact and the file bytes depend only on the parameters.
    """
    group_of = {}
    for g in groups or []:
        for name in g.params:
            group_of[name] = g.name
    d = model.dims
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "header": {
            "image_layer_dims": d.image_layers,
            "text_layer_dims": d.text_layers,
            "N": d.vocab_size,
            "K": d.bottleneck,
            "W": d.width,
        },
        "tensors": {
            name: {
                "group": group_of.get(name, name.split(".", 1)[0]),
                "shape": list(arr.shape),
                "values": [float(v) for v in arr.ravel()],
            }
            for name, arr in sorted(model.params().items())
        },
    }
    with open(path, "w", newline="\n") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path) -> DualEncoder:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {doc.get('format_version')}")
    h = doc["header"]
    dims = ModelDims(
        image_dim=h["image_layer_dims"][0],
        vocab_size=h["N"],
        bottleneck=h["K"],
        width=h["W"],
        embed_dim=h["image_layer_dims"][-1],
        image_hidden=tuple(h["image_layer_dims"][1:-1]),
        text_hidden=tuple(h["text_layer_dims"][1:-1]),
    )
    model = DualEncoder(dims)
    live = model.params()
    for name, spec in doc["tensors"].items():
        if name not in live:
            raise ConfigError(f"unknown tensor {name!r} in checkpoint", name)
        arr = np.asarray(spec["values"], dtype=np.float64).reshape(spec["shape"])
        if arr.shape != live[name].shape:
            raise ShapeMismatch(f"{name}: checkpoint shape {arr.shape} vs model {live[name].shape}")
        live[name][...] = arr
    return model
