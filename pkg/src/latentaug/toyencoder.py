"""Frozen stand-in for a pathology foundation encoder.

Two affine layers with a tanh in between.
64-px patches are 2x2 average-pooled to 32 px first, so both resolutions
share one set of weights.  Weights are float32-representable so the weights
file round-trips exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.ndimage import gaussian_filter

from .patchlab import TransformSequence, apply_sequence, synth_patch

INPUT_SIDE = 32
HIDDEN = 512
EMBED_DIM = 128
DEFAULT_SEED = 42
CALIBRATION_SEED = 7_000_000


class EncoderContractError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class EncoderWeights:
    seed: int
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        for arr in (self.w1, self.b1, self.w2, self.b2):
            arr.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.w2.shape[1]

    def arrays(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]


def _f32(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


def _calibration_patches(n: int = 512) -> np.ndarray:
    # fixed seed block disjoint from experiment seeds
    return np.stack([synth_patch(CALIBRATION_SEED + i, i % 2) for i in range(n)])


@lru_cache(maxsize=8)
def init_encoder(seed: int = DEFAULT_SEED, dim: int = EMBED_DIM, hidden: int = HIDDEN,
                 smoothing: float = 3.0) -> EncoderWeights:
    """Spatially smooth random first layer; both layers centred on a calibration set.

    Centring is folded into the biases, so encoding stays two plain affine maps.
    """
    rng = np.random.default_rng(seed)
    filt = rng.standard_normal((hidden, INPUT_SIDE, INPUT_SIDE, 3))
    if smoothing > 0:
        filt = gaussian_filter(filt, sigma=(0, smoothing, smoothing, 0), mode="wrap")
    w1 = filt.reshape(hidden, -1).T
    w1 = _f32(w1 / np.linalg.norm(w1, axis=0, keepdims=True))
    w2 = _f32(rng.standard_normal((hidden, dim)) / np.sqrt(hidden))
    jitter = rng.standard_normal(hidden) * 0.1

    cal = _calibration_patches()
    mean_rgb = cal.mean(axis=(0, 1, 2))
    b1 = _f32(jitter - np.tile(mean_rgb, INPUT_SIDE * INPUT_SIDE) @ w1)
    h = np.tanh(cal.reshape(len(cal), -1) @ w1 + b1)
    b2 = _f32(-(h @ w2).mean(axis=0))
    return EncoderWeights(seed, w1, b1, w2, b2)


def _as_batch(patches) -> np.ndarray:
    arr = np.asarray(patches, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise EncoderContractError(f"expected (N, H, W, 3) patches, got shape {arr.shape}")
    side = arr.shape[1]
    if arr.shape[2] != side or side not in (32, 64):
        raise EncoderContractError(f"unsupported patch resolution {arr.shape[1:3]}; use 32 or 64")
    if side == 64:
        arr = arr.reshape(arr.shape[0], 32, 2, 32, 2, 3).mean(axis=(2, 4))
    return arr


def encode(weights: EncoderWeights, patches) -> np.ndarray:
    """Embed one patch (H, W, 3) -> (d,) or a batch (N, H, W, 3) -> (N, d)."""
    single = np.ndim(patches) == 3
    x = _as_batch(patches).reshape(-1, INPUT_SIDE * INPUT_SIDE * 3)
    h = np.tanh(x @ weights.w1 + weights.b1)
    z = h @ weights.w2 + weights.b2
    return z[0] if single else z


@dataclass
class ToyEncoder:
    """Callable wrapper; ``encoder(patches)`` is ``encode(weights, patches)``."""
    weights: EncoderWeights = field(default_factory=init_encoder)

    @property
    def dim(self) -> int:
        return self.weights.dim

    def __call__(self, patches) -> np.ndarray:
        return encode(self.weights, patches)

    def encode_transformed(self, patches, seqs) -> np.ndarray:
        """Embeddings of ``tau(x_i; seq_i)``; ``seqs`` is one sequence or one per patch."""
        patches = np.asarray(patches)
        if isinstance(seqs, TransformSequence):
            seqs = [seqs] * len(patches)
        return self(np.stack([apply_sequence(p, s) for p, s in zip(patches, seqs)]))


def cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    num = (a * b).sum(axis=1)
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    return num / np.maximum(den, 1e-300)


def invariance_cosines(encoder: ToyEncoder, patches, sampler) -> np.ndarray:
    """Per-patch cos(z, encode(tau(x))) with a fresh sequence from ``sampler()`` per patch."""
    patches = np.asarray(patches)
    seqs = [sampler() for _ in range(len(patches))]
    return cosine(encoder(patches), encoder.encode_transformed(patches, seqs))


def encoder_invariance(encoder: ToyEncoder, patches, sampler) -> float:
    if len(patches) < 100:
        raise EncoderContractError(f"encoder_invariance needs >= 100 patches, got {len(patches)}")
    return float(invariance_cosines(encoder, patches, sampler).mean())
