"""Synthetic paired data with a shared latent, and label-noise corruptions.

Every item has a latent ``z`` drawn around its class centre. The image is a
fixed linear map of ``z`` plus Gaussian noise. The text is a token sequence:
a few tokens drawn from a class-owned slice of the vocabulary followed by one
token per latent coordinate that encodes the quantized coordinate value.
Matched pairs therefore share class and instance information.

All randomness comes from numpy's PCG64 generator seeded with integer
tuples, so a (spec, seed) pair always produces the same bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeMismatch
from .model import PAD, TokenBatch

MAGIC = b"SGLD"
FORMAT_VERSION = 1

CHANNELS = ("image", "text", "batch", "image_text", "image_text_batch")


@dataclass(frozen=True)
class SyntheticPairSpec:
    latent_dim: int = 8
    image_dim: int = 16
    n_classes: int = 8
    class_tokens: int = 4  # vocabulary slice owned by each class
    class_positions: int = 2  # leading positions filled with class tokens
    levels: int = 8  # quantization levels per latent coordinate
    noise_sigma: float = 0.1
    class_spread: float = 0.6
    seed: int = 0

    @property
    def text_len(self) -> int:
        return self.class_positions + self.latent_dim

    @property
    def text_vocab(self) -> int:
        return self.n_classes * self.class_tokens + self.latent_dim * self.levels


@dataclass
class PairDataset:
    images: np.ndarray
    tokens: TokenBatch
    classes: np.ndarray
    latents: np.ndarray | None = None

    def __len__(self):
        return self.images.shape[0]

    def take(self, idx) -> "PairDataset":
        idx = np.asarray(idx)
        return PairDataset(
            self.images[idx].copy(),
            self.tokens.take(idx),
            self.classes[idx].copy(),
            None if self.latents is None else self.latents[idx].copy(),
        )


@dataclass(frozen=True)
class World:
    centres: np.ndarray
    image_map: np.ndarray
    edges: np.ndarray


def world(spec: SyntheticPairSpec) -> World:
    """Fixed matrices shared by every split of a spec."""
    rng = np.random.default_rng([spec.seed, 0])
    centres = rng.standard_normal((spec.n_classes, spec.latent_dim))
    image_map = rng.standard_normal((spec.latent_dim, spec.image_dim)) / np.sqrt(spec.latent_dim)
    # equal-mass bins for a unit-variance-ish coordinate
    spread = np.sqrt(1.0 + spec.class_spread**2)
    edges = np.linspace(-1.5, 1.5, spec.levels - 1) * spread
    return World(centres, image_map, edges)


def generate(spec: SyntheticPairSpec, n: int, stream: int = 1) -> PairDataset:
    """``n`` (image, tokens, class) triples; distinct streams give disjoint samples."""
    if n < 1:
        raise ConfigError("dataset size must be positive", "n")
    w = world(spec)
    rng = np.random.default_rng([spec.seed, stream])
    classes = rng.integers(0, spec.n_classes, size=n)
    latents = w.centres[classes] + spec.class_spread * rng.standard_normal((n, spec.latent_dim))
    images = latents @ w.image_map
    if spec.noise_sigma > 0:
        images = images + spec.noise_sigma * rng.standard_normal(images.shape)
    class_tok = classes[:, None] * spec.class_tokens + rng.integers(
        0, spec.class_tokens, size=(n, spec.class_positions)
    )
    bins = np.searchsorted(w.edges, latents)
    offset = spec.n_classes * spec.class_tokens
    coord_tok = offset + np.arange(spec.latent_dim)[None, :] * spec.levels + bins
    ids = np.concatenate([class_tok, coord_tok], axis=1).astype(np.int64)
    tokens = TokenBatch(ids, np.full(n, spec.text_len, dtype=np.int64))
    return PairDataset(images, tokens, classes.astype(np.int64), latents)


def train_eval(spec: SyntheticPairSpec, n_train: int, n_eval: int):
    return generate(spec, n_train, stream=1), generate(spec, n_eval, stream=2)


@dataclass(frozen=True)
class CorruptionSpec:
    image_noise_p: float = 0.0
    text_scramble_p: float = 0.0
    misalign_p: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("image_noise_p", "text_scramble_p", "misalign_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {p}", name)

    @classmethod
    def channel(cls, name: str, p: float, seed: int = 0) -> "CorruptionSpec":
        """The five corruption settings, each driven by a single probability."""
        if name not in CHANNELS:
            raise ConfigError(f"unknown corruption channel {name!r}", "corruption")
        return cls(
            image_noise_p=p if "image" in name else 0.0,
            text_scramble_p=p if "text" in name else 0.0,
            misalign_p=p if "batch" in name else 0.0,
            seed=seed,
        )

    @property
    def active(self) -> bool:
        return bool(self.image_noise_p or self.text_scramble_p or self.misalign_p)


@dataclass
class CorruptionReport:
    images_replaced: int = 0
    texts_scrambled: int = 0
    pairs_shuffled: int = 0


def corrupt(batch: PairDataset, cspec: CorruptionSpec, vocab_size: int, rng=None):
    """Apply the corruption channels independently; returns (batch, report).

    Untouched items are copied bit for bit. Image noise is uniform over the
    batch's image value range; a scrambled text gets a length drawn
    uniformly from ``[1, text_len]`` and uniform random tokens. Misalignment
    picks ``round(p * n)`` items and permutes their texts uniformly.
    """
    if rng is None:
        rng = np.random.default_rng([cspec.seed, 3])
    n = len(batch)
    images = batch.images.copy()
    ids = batch.tokens.ids.copy()
    lengths = batch.tokens.lengths.copy()
    report = CorruptionReport()

    if cspec.image_noise_p > 0:
        hit = rng.random(n) < cspec.image_noise_p
        lo, hi = float(batch.images.min()), float(batch.images.max())
        images[hit] = rng.uniform(lo, hi, size=(int(hit.sum()), images.shape[1]))
        report.images_replaced = int(hit.sum())

    if cspec.text_scramble_p > 0:
        hit = np.flatnonzero(rng.random(n) < cspec.text_scramble_p)
        width = ids.shape[1]
        new_len = rng.integers(1, width + 1, size=hit.size)
        new_ids = rng.integers(0, vocab_size, size=(hit.size, width))
        new_ids[np.arange(width)[None, :] >= new_len[:, None]] = PAD
        ids[hit] = new_ids
        lengths[hit] = new_len
        report.texts_scrambled = int(hit.size)

    if cspec.misalign_p > 0:
        k = int(round(cspec.misalign_p * n))
        chosen = np.sort(rng.choice(n, size=k, replace=False))
        perm = chosen[rng.permutation(k)]
        ids[chosen] = ids[perm]
        lengths[chosen] = lengths[perm]
        report.pairs_shuffled = k

    out = PairDataset(images, TokenBatch(ids, lengths), batch.classes.copy(), batch.latents)
    return out, report


def save_dataset(ds: PairDataset, path):
    """Columnar little-endian binary: header, images f64, token ids u32, class ids u32."""
    n, image_dim = ds.images.shape
    text_len = ds.tokens.ids.shape[1]
    if np.any(ds.tokens.lengths != text_len):
        raise ShapeMismatch("only fixed-length token sequences can be exported")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQII", FORMAT_VERSION, n, image_dim, text_len))
        fh.write(ds.images.astype("<f8").tobytes())
        fh.write(ds.tokens.ids.astype("<u4").tobytes())
        fh.write(ds.classes.astype("<u4").tobytes())


def load_dataset(path) -> PairDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ConfigError(f"{path}: not a siglab dataset file")
    version, n, image_dim, text_len = struct.unpack_from("<IQII", blob, 4)
    if version != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported dataset version {version}")
    pos = 4 + struct.calcsize("<IQII")
    images = np.frombuffer(blob, "<f8", n * image_dim, pos).reshape(n, image_dim).astype(np.float64)
    pos += 8 * n * image_dim
    ids = np.frombuffer(blob, "<u4", n * text_len, pos).reshape(n, text_len).astype(np.int64)
    pos += 4 * n * text_len
    classes = np.frombuffer(blob, "<u4", n, pos).astype(np.int64)
    return PairDataset(images, TokenBatch(ids, np.full(n, text_len, dtype=np.int64)), classes)
