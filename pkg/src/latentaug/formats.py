"""Little-endian binary formats: LAPX patches, LENC encoder weights, HAUG generator weights, LBAG bags.

Every file starts with a 4-byte magic and a u32 version.  Payloads are
32-bit floats, so arrays round-trip exactly when their values are
float32-representable (the trainers guarantee this).
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .generator import PARAM_DIMS, GeneratorConfig, GeneratorModel, parameter_shapes
from .patchlab import KIND_NAMES
from .toyencoder import EncoderWeights

VERSION = 1
F32 = np.dtype("<f4")


class FormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


class UnsupportedVersionError(FormatError):
    pass


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file: need {n} bytes for {what}, {len(self.buf) - self.pos} left", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        vals = struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))
        return vals[0] if len(vals) == 1 else vals

    def floats(self, shape, what: str) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        raw = self.take(n * 4, what)
        return np.frombuffer(raw, dtype=F32).astype(np.float64).reshape(shape)

    def shape(self, ndim: int, what: str) -> tuple[int, ...]:
        return struct.unpack(f"<{ndim}I", self.take(4 * ndim, f"shape of {what}"))

    def text(self, what: str) -> str:
        n = self.unpack("H", what + " length")
        start = self.pos
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{what} is not valid UTF-8", start) from None

    def header(self, magic: bytes) -> int:
        got = self.take(4, "magic")
        if got != magic:
            raise FormatError(f"bad magic {got!r}, expected {magic!r}", 0)
        version = self.unpack("I", "version")
        if version != VERSION:
            raise UnsupportedVersionError(f"unsupported {magic.decode()} version {version}; this build reads {VERSION}", 4)
        return version

    def finish(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes", self.pos)


def _header(magic: bytes) -> bytes:
    return magic + struct.pack("<I", VERSION)


def _f32_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype=F32).tobytes()


def _text(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def _read(path) -> bytes:
    return Path(path).read_bytes()


def _write(path, blob: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    return path


# LAPX

def dumps_patch(patch: np.ndarray) -> bytes:
    patch = np.asarray(patch)
    if patch.ndim != 3 or patch.shape[2] != 3:
        raise tc.DimensionError(f"patch must be (H, W, 3), got {patch.shape}")
    h, w, _ = patch.shape
    return _header(b"LAPX") + struct.pack("<II", h, w) + _f32_bytes(patch)


def loads_patch(buf: bytes) -> np.ndarray:
    r = _Reader(buf)
    r.header(b"LAPX")
    h, w = r.unpack("II", "patch shape")
    out = r.floats((h, w, 3), "pixels")
    r.finish()
    return out


def save_patch(patch, path) -> Path:
    return _write(path, dumps_patch(patch))


def load_patch(path) -> np.ndarray:
    return loads_patch(_read(path))


# LENC

def dumps_encoder(weights: EncoderWeights) -> bytes:
    arrays = weights.arrays()
    parts = [_header(b"LENC"), struct.pack("<qI", weights.seed, len(arrays))]
    for a in arrays:
        parts.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
    parts.extend(_f32_bytes(a) for a in arrays)
    return b"".join(parts)


def loads_encoder(buf: bytes) -> EncoderWeights:
    r = _Reader(buf)
    r.header(b"LENC")
    seed, n = r.unpack("qI", "seed and array count")
    if n != 4:
        raise FormatError(f"expected 4 weight arrays, found {n}", r.pos - 4)
    shapes = []
    for i in range(n):
        ndim = r.unpack("I", f"rank of array {i}")
        shapes.append(r.shape(ndim, f"array {i}"))
    arrays = [r.floats(s, f"array {i}") for i, s in enumerate(shapes)]
    r.finish()
    return EncoderWeights(seed, *arrays)


def save_encoder(weights: EncoderWeights, path) -> Path:
    return _write(path, dumps_encoder(weights))


def load_encoder(path) -> EncoderWeights:
    return loads_encoder(_read(path))


# HAUG

def dumps_generator(model: GeneratorModel) -> bytes:
    c = model.config
    parts = [_header(b"HAUG"),
             struct.pack("<6Id", c.d, c.C, c.L, c.heads, c.k_max, c.ffn_mult, c.lambda_id),
             struct.pack("<I", len(KIND_NAMES))]
    parts.extend(_text(k) + struct.pack("<I", PARAM_DIMS[k]) for k in KIND_NAMES)
    parts.append(struct.pack("<I", len(model.params)))
    for name, p in model.params.items():
        parts.append(_text(name) + struct.pack("<I", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
    parts.extend(_f32_bytes(p.data) for p in model.params.values())
    return b"".join(parts)


def loads_generator(buf: bytes) -> GeneratorModel:
    """Parse a HAUG blob.  Either a complete model is returned or FormatError is raised."""
    r = _Reader(buf)
    r.header(b"HAUG")
    at = r.pos
    d, C, L, heads, k_max, ffn_mult, lam = r.unpack("6Id", "manifest")
    try:
        cfg = GeneratorConfig(d=d, C=C, L=L, heads=heads, k_max=k_max, ffn_mult=ffn_mult, lambda_id=lam)
    except ValueError as e:
        raise FormatError(f"invalid manifest: {e}", at) from None
    at = r.pos
    table = [(r.text("transform name"), r.unpack("I", "param dim")) for _ in range(r.unpack("I", "transform count"))]
    if table != [(k, PARAM_DIMS[k]) for k in KIND_NAMES]:
        raise FormatError("transform table does not match this build's catalog", at)
    expected = parameter_shapes(cfg)
    at = r.pos
    n = r.unpack("I", "tensor count")
    entries = []
    for _ in range(n):
        name = r.text("tensor name")
        ndim = r.unpack("I", f"rank of {name}")
        shape = r.shape(ndim, name)
        entries.append((name, shape))
    if dict(entries) != expected or len(entries) != len(expected):
        raise FormatError("tensor manifest does not match the configured architecture", at)
    params = {name: tc.parameter(r.floats(shape, name), name) for name, shape in entries}
    r.finish()
    return GeneratorModel(cfg, params)


def save_generator(model: GeneratorModel, path) -> Path:
    return _write(path, dumps_generator(model))


def load_generator(path) -> GeneratorModel:
    return loads_generator(_read(path))


# LBAG

def dumps_bag(embeddings: np.ndarray, label: int) -> bytes:
    emb = np.asarray(embeddings)
    if emb.ndim != 2:
        raise tc.DimensionError(f"bag must be (M, d), got {emb.shape}")
    return _header(b"LBAG") + struct.pack("<III", emb.shape[0], emb.shape[1], int(label)) + _f32_bytes(emb)


def loads_bag(buf: bytes) -> tuple[np.ndarray, int]:
    r = _Reader(buf)
    r.header(b"LBAG")
    m, d, label = r.unpack("III", "bag header")
    emb = r.floats((m, d), "embeddings")
    r.finish()
    return emb, label


def save_bag(embeddings, label: int, path) -> Path:
    return _write(path, dumps_bag(embeddings, label))


def load_bag(path) -> tuple[np.ndarray, int]:
    return loads_bag(_read(path))
