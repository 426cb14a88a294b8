"""Synthetic histology-like patches and the image-space transformation catalog.

A patch is a float64 array of shape (H, W, 3) with values in [0, 1].  Every
transform returns a fresh array clamped to that range.  Each transformation
kind carries an identity parameter; applying a kind at its identity point
returns an exact copy of the input.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

RESOLUTIONS = (32, 64)

# blob-count ranges (inclusive) per class; class 1 is denser
BLOB_COUNTS = {0: (5, 11), 1: (12, 20)}
CLASS_MARGIN = 5.0

BACKGROUND_RGB = np.array([0.94, 0.66, 0.80])
NUCLEUS_RGB = np.array([0.36, 0.20, 0.55])


class ParameterError(ValueError):
    pass


@dataclass(frozen=True)
class TransformKind:
    name: str
    discrete: bool
    identity: Any
    low: float = 0.0
    high: float = 0.0
    options: tuple = ()
    n_params: int = 1

    @property
    def param_dim(self) -> int:
        return len(self.options) if self.discrete else self.n_params

    @property
    def center(self) -> float:
        return 0.5 * (self.low + self.high)

    @property
    def half_width(self) -> float:
        return 0.5 * (self.high - self.low)


_ON_OFF = ("on", "off")

KINDS: dict[str, TransformKind] = {k.name: k for k in (
    TransformKind("Crop", True, "none", options=("tl", "tr", "bl", "br", "center", "none")),
    TransformKind("Dilation", True, "off", options=_ON_OFF),
    TransformKind("Erosion", True, "off", options=_ON_OFF),
    TransformKind("Blur", True, "off", options=_ON_OFF),
    TransformKind("Brightness", False, 1.0, 0.5, 1.5),
    TransformKind("Contrast", False, 1.0, 0.5, 1.5),
    TransformKind("Saturation", False, 1.0, 0.5, 1.5),
    TransformKind("Hue", False, 0.0, -0.5, 0.5),
    TransformKind("HED", False, (0.0,) * 6, -0.05, 0.05, n_params=6),
    TransformKind("Flip", True, "none", options=("h", "v", "none")),
    TransformKind("Rotate", True, 0, options=(90, 180, 270, 0)),
    TransformKind("Gamma", False, 1.0, 0.5, 1.5),
)}
KIND_NAMES: tuple[str, ...] = tuple(KINDS)
COLOR_KINDS = ("Brightness", "Contrast", "Saturation", "Hue", "HED", "Gamma")


def _check_param(kind: TransformKind, param) -> Any:
    if kind.discrete:
        if param not in kind.options:
            raise ParameterError(f"{kind.name}: parameter {param!r} not in {kind.options}")
        return param
    vals = np.atleast_1d(np.asarray(param, dtype=float))
    if vals.shape != (kind.n_params,) or not np.all(np.isfinite(vals)):
        raise ParameterError(f"{kind.name}: expected {kind.n_params} finite value(s), got {param!r}")
    if np.any(vals < kind.low) or np.any(vals > kind.high):
        raise ParameterError(f"{kind.name}: parameter {param!r} outside [{kind.low}, {kind.high}]")
    return tuple(float(v) for v in vals) if kind.n_params > 1 else float(vals[0])


@dataclass(frozen=True)
class TransformStep:
    kind: str
    param: Any

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown transformation kind {self.kind!r}")
        object.__setattr__(self, "param", _check_param(KINDS[self.kind], self.param))

    @property
    def spec(self) -> TransformKind:
        return KINDS[self.kind]

    @property
    def is_identity(self) -> bool:
        return self.param == self.spec.identity

    @property
    def encoded(self) -> np.ndarray:
        return encode_param(self.kind, self.param)


def encode_param(kind_name: str, param) -> np.ndarray:
    """Fixed-width real encoding; continuous kinds map their range onto [-1, 1]."""
    kind = KINDS[kind_name]
    if kind.discrete:
        vec = np.zeros(kind.param_dim)
        vec[kind.options.index(param)] = 1.0
        return vec
    vals = np.atleast_1d(np.asarray(param, dtype=float))
    return (vals - kind.center) / kind.half_width


def decode_param(kind_name: str, encoded: np.ndarray):
    kind = KINDS[kind_name]
    encoded = np.asarray(encoded, dtype=float)
    if kind.discrete:
        return kind.options[int(np.argmax(encoded))]
    vals = encoded * kind.half_width + kind.center
    return tuple(float(v) for v in vals) if kind.n_params > 1 else float(vals[0])


def identity_encoding(kind_name: str) -> np.ndarray:
    return encode_param(kind_name, KINDS[kind_name].identity)


@dataclass(frozen=True)
class TransformSequence:
    steps: tuple[TransformStep, ...] = field(default_factory=tuple)

    def __post_init__(self):
        steps = tuple(self.steps)
        object.__setattr__(self, "steps", steps)
        kinds = [s.kind for s in steps]
        if not steps or len(steps) > len(KINDS):
            raise ParameterError(f"sequence length must be in 1..{len(KINDS)}, got {len(steps)}")
        if len(set(kinds)) != len(kinds):
            raise ParameterError(f"repeated kind in sequence {kinds}")

    @classmethod
    def of(cls, *pairs: tuple[str, Any]) -> "TransformSequence":
        return cls(tuple(TransformStep(k, p) for k, p in pairs))

    def __len__(self) -> int:
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)

    @property
    def kinds(self) -> tuple[str, ...]:
        return tuple(s.kind for s in self.steps)

    def key(self) -> tuple:
        return tuple((s.kind, s.param) for s in self.steps)


# scene synthesis

@dataclass(frozen=True)
class Scene:
    """Resolution-free description of a patch, in unit coordinates."""
    class_label: int
    blobs: np.ndarray  # (n, 8): cx, cy, rx, ry, angle, r, g, b
    waves: np.ndarray  # (m, 5): fx, fy, phase, amplitude, channel-mix
    tint: np.ndarray

    @property
    def n_blobs(self) -> int:
        return len(self.blobs)


def make_scene(seed: int, class_label: int) -> Scene:
    if class_label not in BLOB_COUNTS:
        raise ValueError(f"class_label must be 0 or 1, got {class_label}")
    rng = np.random.default_rng([int(seed), 0x5EED])
    lo, hi = BLOB_COUNTS[class_label]
    n = int(rng.integers(lo, hi + 1))
    blobs = np.empty((n, 8))
    blobs[:, 0:2] = rng.uniform(0.05, 0.95, size=(n, 2))
    blobs[:, 2] = rng.uniform(0.075, 0.09, size=n)
    blobs[:, 3] = blobs[:, 2] * rng.uniform(0.7, 1.0, size=n)
    blobs[:, 4] = rng.uniform(0, np.pi, size=n)
    blobs[:, 5:8] = np.clip(NUCLEUS_RGB + rng.normal(0, 0.05, size=(n, 3)), 0, 1)
    m = 4
    waves = np.empty((m, 5))
    waves[:, 0:2] = rng.uniform(-6, 6, size=(m, 2))
    waves[:, 2] = rng.uniform(0, 2 * np.pi, size=m)
    waves[:, 3] = rng.uniform(0.01, 0.05, size=m)
    waves[:, 4] = rng.uniform(0.5, 1.5, size=m)
    tint = rng.normal(0, 0.015, size=3)
    return Scene(class_label, blobs, waves, tint)


def render_scene(scene: Scene, resolution: int = 32) -> np.ndarray:
    if resolution not in RESOLUTIONS:
        raise ValueError(f"resolution must be one of {RESOLUTIONS}, got {resolution}")
    c = (np.arange(resolution) + 0.5) / resolution
    yy, xx = np.meshgrid(c, c, indexing="ij")

    texture = np.zeros_like(xx)
    for fx, fy, ph, amp, _ in scene.waves:
        texture += amp * np.sin(2 * np.pi * (fx * xx + fy * yy) + ph)
    mix = scene.waves[:, 4].mean()
    img = np.clip(BACKGROUND_RGB + scene.tint, 0, 1) + texture[..., None] * np.array([1.0, mix, 0.6])

    if scene.n_blobs:
        b = scene.blobs
        dx = xx[None] - b[:, 0, None, None]
        dy = yy[None] - b[:, 1, None, None]
        cos, sin = np.cos(b[:, 4])[:, None, None], np.sin(b[:, 4])[:, None, None]
        u = (dx * cos + dy * sin) / b[:, 2, None, None]
        v = (-dx * sin + dy * cos) / b[:, 3, None, None]
        r = np.sqrt(u * u + v * v)
        # soft edge with a fixed width in unit coordinates keeps 32/64 renders consistent
        alpha = 1.0 / (1.0 + np.exp((r - 1.0) / 0.12))
        for k in range(scene.n_blobs):
            a = alpha[k][..., None]
            img = img * (1 - a) + b[k, 5:8] * a
    return np.clip(img, 0.0, 1.0)


def synth_patch(seed: int, class_label: int, resolution: int = 32) -> np.ndarray:
    return render_scene(make_scene(seed, class_label), resolution)


# transforms

def _gray(p: np.ndarray) -> np.ndarray:
    return p @ np.array([0.299, 0.587, 0.114])


def _resize_bilinear(img: np.ndarray, h: int, w: int) -> np.ndarray:
    def coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, fy = coords(h, img.shape[0])
    x0, x1, fx = coords(w, img.shape[1])
    top = img[y0][:, x0] * (1 - fx)[None, :, None] + img[y0][:, x1] * fx[None, :, None]
    bot = img[y1][:, x0] * (1 - fx)[None, :, None] + img[y1][:, x1] * fx[None, :, None]
    return top * (1 - fy)[:, None, None] + bot * fy[:, None, None]


def _crop(p, pos):
    h, w = p.shape[:2]
    s = min(h, w) // 2
    y, x = {"tl": (0, 0), "tr": (0, w - s), "bl": (h - s, 0), "br": (h - s, w - s),
            "center": ((h - s) // 2, (w - s) // 2)}[pos]
    return _resize_bilinear(p[y:y + s, x:x + s], h, w)


def _morph(p, reducer):
    # 4x4 window anchored at the top-left pixel, edges replicated
    h, w = p.shape[:2]
    padded = np.pad(p, ((0, 3), (0, 3), (0, 0)), mode="edge")
    rows = reducer.reduce([padded[i:i + h] for i in range(4)])
    return reducer.reduce([rows[:, j:j + w] for j in range(4)])


def blur_kernel(side_px: int) -> np.ndarray:
    """Normalized 1-D Gaussian; 15 taps at 256 px, scaled with patch side."""
    k = 15 * side_px / 256
    n = max(3, 2 * int(np.floor((k - 1) / 2 + 0.5)) + 1)
    sigma = n / 6
    t = np.arange(n) - n // 2
    g = np.exp(-0.5 * (t / sigma) ** 2)
    return g / g.sum()


def _blur(p):
    g = blur_kernel(min(p.shape[:2]))
    r = len(g) // 2
    out = np.pad(p, ((r, r), (0, 0), (0, 0)), mode="edge")
    out = sum(g[i] * out[i:i + p.shape[0]] for i in range(len(g)))
    out = np.pad(out, ((0, 0), (r, r), (0, 0)), mode="edge")
    return sum(g[i] * out[:, i:i + p.shape[1]] for i in range(len(g)))


# Ruifrok & Johnston stain vectors (hematoxylin, eosin, DAB), rows unit-normalized
RGB_FROM_HED = np.array([[0.65, 0.70, 0.29], [0.07, 0.99, 0.11], [0.27, 0.57, 0.78]])
RGB_FROM_HED = RGB_FROM_HED / np.linalg.norm(RGB_FROM_HED, axis=1, keepdims=True)
HED_FROM_RGB = np.linalg.inv(RGB_FROM_HED)


def _hed(p, params):
    sig, beta = np.asarray(params[:3]), np.asarray(params[3:])
    od = -np.log10(p + 1e-6)
    stains = od @ HED_FROM_RGB
    stains = (1.0 + sig) * stains + beta
    return 10.0 ** (-(stains @ RGB_FROM_HED)) - 1e-6


def _hue(p, h):
    hsv = rgb_to_hsv(p)
    hsv[..., 0] = np.mod(hsv[..., 0] + h, 1.0)
    return hsv_to_rgb(hsv)


def _apply(p: np.ndarray, kind: str, a) -> np.ndarray:
    if kind == "Crop":
        return _crop(p, a)
    if kind == "Dilation":
        return _morph(p, np.maximum)
    if kind == "Erosion":
        return _morph(p, np.minimum)
    if kind == "Blur":
        return _blur(p)
    if kind == "Brightness":
        return p * a
    if kind == "Contrast":
        m = _gray(p).mean()
        return m + a * (p - m)
    if kind == "Saturation":
        g = _gray(p)[..., None]
        return g + a * (p - g)
    if kind == "Hue":
        return _hue(p, a)
    if kind == "HED":
        return _hed(p, a)
    if kind == "Flip":
        return p[:, ::-1] if a == "h" else p[::-1, :]
    if kind == "Rotate":
        return np.rot90(p, k=a // 90, axes=(0, 1))
    if kind == "Gamma":
        return p ** a
    raise ParameterError(f"unknown transformation kind {kind!r}")


def apply_transform(p: np.ndarray, step: TransformStep) -> np.ndarray:
    if step.is_identity:
        return np.array(p, dtype=np.float64, copy=True)
    out = _apply(np.asarray(p, dtype=np.float64), step.kind, step.param)
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0))


def apply_sequence(p: np.ndarray, seq: TransformSequence | Sequence[TransformStep]) -> np.ndarray:
    out = np.array(p, dtype=np.float64, copy=True)
    for step in seq:
        out = apply_transform(out, step)
    return out


def identity_sequence(seq: TransformSequence) -> TransformSequence:
    return TransformSequence(tuple(TransformStep(s.kind, KINDS[s.kind].identity) for s in seq))


def sample_param(rng: np.random.Generator, kind_name: str):
    kind = KINDS[kind_name]
    if kind.discrete:
        choices = [o for o in kind.options if o != kind.identity]
        return choices[int(rng.integers(len(choices)))]
    vals = rng.uniform(kind.low, kind.high, size=kind.n_params)
    return tuple(float(v) for v in vals) if kind.n_params > 1 else float(vals[0])


def sample_sequence(rng: np.random.Generator, k_max: int,
                    kinds: Sequence[str] = KIND_NAMES) -> TransformSequence:
    """K ~ U{1..k_max}; K distinct kinds without replacement; parameters from their ranges."""
    kinds = tuple(kinds)
    if not 1 <= k_max <= len(kinds):
        raise ValueError(f"k_max must be in 1..{len(kinds)}, got {k_max}")
    k = int(rng.integers(1, k_max + 1))
    chosen = rng.choice(len(kinds), size=k, replace=False)
    return TransformSequence(tuple(TransformStep(kinds[i], sample_param(rng, kinds[i])) for i in chosen))
