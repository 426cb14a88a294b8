"""Transformation-conditioned latent augmentation generator.

The input embedding is split into ``C`` contiguous chunk tokens with
sinusoidal position codes.  Each transformation step becomes one token: a
per-kind linear projection (no bias) of its parameter encoding plus a learned
order embedding.  ``L`` post-norm blocks let chunk tokens cross-attend to the
step tokens; an MLP head maps the concatenated tokens back to ``d``.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from . import tensorcore as tc
from .optim import AdamW, AdamWConfig
from .patchlab import (KIND_NAMES, KINDS, TransformSequence, identity_sequence,
                       sample_sequence)
from .tensorcore import Tensor

MASK_FILL = -1e9


class CapacityError(ValueError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, step: int, msg: str):
        super().__init__(f"step {step}: {msg}")
        self.step = step


@dataclass(frozen=True)
class GeneratorConfig:
    d: int = 128
    C: int = 4
    L: int = 4
    heads: int = 4
    k_max: int = 4
    ffn_mult: int = 4
    lambda_id: float = 1.0

    def __post_init__(self):
        if self.d % self.C:
            raise tc.DimensionError(f"d={self.d} is not divisible by C={self.C}")
        if self.width % self.heads:
            raise tc.DimensionError(f"chunk width {self.width} is not divisible by heads={self.heads}")
        if not 1 <= self.k_max <= len(KINDS):
            raise ValueError(f"k_max must be in 1..{len(KINDS)}")

    @property
    def width(self) -> int:
        return self.d // self.C


PARAM_DIMS = {k: KINDS[k].param_dim for k in KIND_NAMES}
PARAM_OFFSETS = dict(zip(KIND_NAMES, np.cumsum([0] + [PARAM_DIMS[k] for k in KIND_NAMES])[:-1].tolist()))
TOTAL_PARAM_DIM = sum(PARAM_DIMS.values())


def encode_steps(seqs: Sequence[TransformSequence], k_max: int | None = None):
    """Stack sequences into a zero-padded (B, K, P) encoding and a (B, K) validity mask.

    Each step's encoding sits in its kind's slot of the P-wide row, so one
    matmul with the stacked projections applies every per-kind map at once.
    """
    k = max(len(s) for s in seqs)
    if k_max is not None and k > k_max:
        raise CapacityError(f"sequence of length {k} exceeds k_max={k_max}")
    enc = np.zeros((len(seqs), k, TOTAL_PARAM_DIM))
    valid = np.zeros((len(seqs), k), dtype=bool)
    for b, seq in enumerate(seqs):
        for j, step in enumerate(seq):
            off = PARAM_OFFSETS[step.kind]
            enc[b, j, off:off + PARAM_DIMS[step.kind]] = step.encoded
            valid[b, j] = True
    return enc, valid


def sinusoidal_pe(n: int, width: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(width)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / width)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def chunk(z: np.ndarray, C: int, positional: bool = True) -> np.ndarray:
    """(..., d) -> (..., C, d/C) contiguous chunks, plus position codes by default."""
    z = np.asarray(z)
    d = z.shape[-1]
    if d % C:
        raise tc.DimensionError(f"embedding dim {d} is not divisible by C={C}")
    tokens = z.reshape(*z.shape[:-1], C, d // C)
    return tokens + sinusoidal_pe(C, d // C) if positional else tokens.copy()


@dataclass
class GeneratorModel:
    config: GeneratorConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    @property
    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def copy(self) -> "GeneratorModel":
        return GeneratorModel(self.config, {k: tc.parameter(p.data.copy(), k) for k, p in self.params.items()})

    def astype(self, dtype) -> "GeneratorModel":
        """Frozen copy for inference at ``dtype`` (no gradients)."""
        return GeneratorModel(self.config, {k: Tensor(p.data.astype(dtype), name=k) for k, p in self.params.items()})

    def snap_float32(self) -> None:
        """Round every weight to float32 precision so persisted files reproduce it exactly."""
        for p in self.params.values():
            p.data = p.data.astype(np.float32).astype(np.float64)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype


def parameter_shapes(cfg: GeneratorConfig) -> dict[str, tuple[int, ...]]:
    w, hid = cfg.width, cfg.width * cfg.ffn_mult
    shapes: dict[str, tuple[int, ...]] = {f"phi.{k}": (PARAM_DIMS[k], w) for k in KIND_NAMES}
    shapes["order"] = (cfg.k_max, w)
    for j in range(cfg.L):
        b = f"blocks.{j}."
        for name in ("q", "k", "v", "o"):
            shapes[b + f"w{name}"] = (w, w)
            shapes[b + f"b{name}"] = (w,)
        shapes[b + "ln1.g"] = (w,)
        shapes[b + "ln1.b"] = (w,)
        shapes[b + "ffn.w1"] = (w, hid)
        shapes[b + "ffn.b1"] = (hid,)
        shapes[b + "ffn.w2"] = (hid, w)
        shapes[b + "ffn.b2"] = (w,)
        shapes[b + "ln2.g"] = (w,)
        shapes[b + "ln2.b"] = (w,)
    shapes["head.w1"] = (cfg.d, 2 * cfg.d)
    shapes["head.b1"] = (2 * cfg.d,)
    shapes["head.w2"] = (2 * cfg.d, cfg.d)
    shapes["head.b2"] = (cfg.d,)
    return shapes


def init_generator(cfg: GeneratorConfig, rng: np.random.Generator) -> GeneratorModel:
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".g"):
            value = np.ones(shape)
        elif name == "order" or len(shape) == 1:
            value = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = tc.parameter(value.astype(np.float32).astype(np.float64), name)
    return GeneratorModel(cfg, params)


def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    lead = x.shape[:-1]
    y = tc.reshape(x, (-1, x.shape[-1])) @ w
    if b is not None:
        y = y + b
    return tc.reshape(y, (*lead, w.shape[1]))


def embed_steps(model: GeneratorModel, seqs) -> tuple[Tensor, np.ndarray]:
    """Step tokens (B, K, d/C) and the validity mask; ``seqs`` may be a single sequence."""
    if isinstance(seqs, TransformSequence):
        seqs = [seqs]
    cfg = model.config
    enc, valid = encode_steps(seqs, cfg.k_max)
    phi = tc.concat([model[f"phi.{k}"] for k in KIND_NAMES], axis=0)
    tokens = Tensor(enc.astype(model.dtype)) @ phi
    return tokens + model["order"][: enc.shape[1]], valid


def _cross_attention(model: GeneratorModel, j: int, x: Tensor, steps: Tensor, mask_add: np.ndarray) -> Tensor:
    cfg = model.config
    h, dh = cfg.heads, cfg.width // cfg.heads
    p = f"blocks.{j}."
    B, C = x.shape[0], x.shape[1]
    Bs, K = steps.shape[0], steps.shape[1]
    q = tc.transpose(tc.reshape(_linear(x, model[p + "wq"], model[p + "bq"]), (B, C, h, dh)), (0, 2, 1, 3))
    k = tc.transpose(tc.reshape(_linear(steps, model[p + "wk"], model[p + "bk"]), (Bs, K, h, dh)), (0, 2, 3, 1))
    v = tc.transpose(tc.reshape(_linear(steps, model[p + "wv"], model[p + "bv"]), (Bs, K, h, dh)), (0, 2, 1, 3))
    scores = (q @ k) * (1.0 / math.sqrt(dh)) + Tensor(mask_add)
    out = tc.softmax(scores, axis=-1) @ v
    out = tc.reshape(tc.transpose(out, (0, 2, 1, 3)), (B, C, cfg.width))
    return _linear(out, model[p + "wo"], model[p + "bo"])


def forward(model: GeneratorModel, z, seqs) -> Tensor:
    """Generated embeddings (B, d) for embeddings ``z`` (B, d) or (d,).

    ``seqs`` is one sequence per row, or a single TransformSequence shared by
    every row (its step tokens are computed once and broadcast).
    """
    cfg = model.config
    dtype = model.dtype
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=dtype))
    if z.ndim == 1:
        z = tc.reshape(z, (1, -1))
    if z.shape[-1] != cfg.d:
        raise tc.DimensionError(f"embedding dim {z.shape[-1]} does not match model d={cfg.d}")
    if not isinstance(seqs, TransformSequence) and len(seqs) != z.shape[0]:
        raise tc.DimensionError(f"{len(seqs)} sequences for {z.shape[0]} embeddings")
    B = z.shape[0]

    steps, valid = embed_steps(model, seqs)
    mask_add = np.where(valid, 0.0, MASK_FILL).astype(dtype)[:, None, None, :]
    x = tc.reshape(z, (B, cfg.C, cfg.width)) + Tensor(sinusoidal_pe(cfg.C, cfg.width).astype(dtype))
    for j in range(cfg.L):
        p = f"blocks.{j}."
        x = tc.layer_norm(x + _cross_attention(model, j, x, steps, mask_add), model[p + "ln1.g"], model[p + "ln1.b"])
        f = _linear(tc.gelu(_linear(x, model[p + "ffn.w1"], model[p + "ffn.b1"])), model[p + "ffn.w2"], model[p + "ffn.b2"])
        x = tc.layer_norm(x + f, model[p + "ln2.g"], model[p + "ln2.b"])
    flat = tc.reshape(x, (B, cfg.d))
    hidden = tc.gelu(flat @ model["head.w1"] + model["head.b1"])
    return hidden @ model["head.w2"] + model["head.b2"]


@dataclass
class LossParts:
    total: Tensor
    reconstruction: Tensor
    identity: Tensor


def generator_loss(model: GeneratorModel, z: np.ndarray, z_target: np.ndarray,
                   seqs: Sequence[TransformSequence], lambda_id: float | None = None) -> LossParts:
    """Batch-mean of ||rho(z, seq) - z_target|| + lambda_id * ||rho(z, id(seq)) - z||.

    Both passes run as one forward over 2B rows with shared weights.
    """
    lam = model.config.lambda_id if lambda_id is None else lambda_id
    z = np.atleast_2d(z)
    z_target = np.atleast_2d(z_target)
    B = len(z)
    out = forward(model, np.concatenate([z, z]), list(seqs) + [identity_sequence(s) for s in seqs])
    norms = tc.l2_norm(out - Tensor(np.concatenate([z_target, z])), axis=1)
    recon = tc.mean(norms[:B])
    ident = tc.mean(norms[B:])
    return LossParts(recon + ident * lam, recon, ident)


def loss(model: GeneratorModel, x: np.ndarray, seq: TransformSequence, encoder,
         lambda_id: float | None = None) -> LossParts:
    """Two-term objective for a single patch ``x`` under ``seq``."""
    z = encoder(x)
    return generator_loss(model, z, encoder.encode_transformed(x[None], seq), [seq], lambda_id)


@dataclass
class TrainLog:
    loss: list[float] = field(default_factory=list)
    reconstruction: list[float] = field(default_factory=list)
    identity: list[float] = field(default_factory=list)
    seconds: float = 0.0


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-5
    warmup: int = 100
    final_lr_frac: float = 0.05
    kinds: tuple[str, ...] = KIND_NAMES


def lr_at(step: int, tcfg: TrainConfig) -> float:
    """Linear warmup then cosine decay to ``final_lr_frac * lr``."""
    if step < tcfg.warmup:
        return tcfg.lr * (step + 1) / tcfg.warmup
    span = max(1, tcfg.steps - tcfg.warmup)
    t = min(1.0, (step - tcfg.warmup) / span)
    floor = tcfg.final_lr_frac
    return tcfg.lr * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * t)))


def sample_batches(patches: np.ndarray, encoder, tcfg: TrainConfig, k_max: int,
                   rng: np.random.Generator, z_all: np.ndarray | None = None) -> Iterator[tuple]:
    """Endless (z, target, seqs) minibatches: patches drawn with replacement, one fresh sequence each."""
    z_all = encoder(patches) if z_all is None else z_all
    while True:
        idx = rng.integers(0, len(patches), size=tcfg.batch_size)
        seqs = [sample_sequence(rng, k_max, tcfg.kinds) for _ in idx]
        yield z_all[idx], encoder.encode_transformed(patches[idx], seqs), seqs


def train_generator(cfg: GeneratorConfig, patches: np.ndarray, encoder, tcfg: TrainConfig,
                    rng: np.random.Generator, model: GeneratorModel | None = None,
                    callback: Callable[[int, float], None] | None = None,
                    batches: Iterable[tuple] | None = None) -> tuple[GeneratorModel, TrainLog]:
    """Minibatch AdamW on the two-term objective over ``patches``.

    Targets are the encoder's embeddings of the transformed pixels.  Passing
    ``batches`` replays a precomputed stream instead of sampling one.  The
    returned weights are rounded to float32 precision.
    """
    patches = np.asarray(patches)
    if model is None:
        model = init_generator(cfg, rng)
    log = TrainLog()
    if tcfg.steps == 0:
        return model, log
    if batches is None:
        batches = sample_batches(patches, encoder, tcfg, cfg.k_max, rng)
    batches = iter(batches)
    opt = AdamW(model.parameters(), AdamWConfig(lr=tcfg.lr, weight_decay=tcfg.weight_decay))
    t0 = time.perf_counter()
    for step in range(tcfg.steps):
        z, target, seqs = next(batches)
        parts = generator_loss(model, z, target, seqs)
        value = parts.total.item()
        if not math.isfinite(value):
            raise TrainingError(step, f"loss became {value}")
        opt.zero_grad()
        tc.backward(parts.total)
        opt.lr = lr_at(step, tcfg)
        opt.step()
        log.loss.append(value)
        log.reconstruction.append(parts.reconstruction.item())
        log.identity.append(parts.identity.item())
        if callback is not None:
            callback(step, value)
    log.seconds = time.perf_counter() - t0
    model.snap_float32()
    return model, log


@dataclass(frozen=True)
class AblationRun:
    seed: int
    config: GeneratorConfig
    param_count: int
    final_loss: float


def chunking_ablation(patches: np.ndarray, encoder, seeds: Sequence[int], tcfg: TrainConfig,
                      configs: Sequence[GeneratorConfig] | None = None, tail: int = 100) -> list[AblationRun]:
    """Train each config on the identical batch stream per seed; final loss = mean of the last ``tail`` steps.

    The default pair matches parameter budgets (about 168k each): C=4 with
    three narrow blocks and a wide FFN against C=1 with one full-width block.
    """
    configs = list(configs or ABLATION_CONFIGS)
    z_all = encoder(patches)
    k_max = max(c.k_max for c in configs)
    runs = []
    for seed in seeds:
        stream = sample_batches(patches, encoder, tcfg, k_max, np.random.default_rng([seed, 0xAB1]), z_all)
        batches = [next(stream) for _ in range(tcfg.steps)]
        for cfg in configs:
            model = init_generator(cfg, np.random.default_rng([seed, 0x1417]))
            _, log = train_generator(cfg, patches, encoder, tcfg, None, model=model, batches=batches)
            runs.append(AblationRun(seed, cfg, model.param_count, float(np.mean(log.loss[-tail:]))))
    return runs


ABLATION_CONFIGS = (GeneratorConfig(C=4, L=3, ffn_mult=14), GeneratorConfig(C=1, L=1, ffn_mult=1))


def augment_batch(model: GeneratorModel, zs, seqs, dtype=None) -> np.ndarray:
    """Inference-only batched generation; no tape is recorded.

    ``seqs`` is one sequence per row or a single shared TransformSequence.
    ``dtype=np.float32`` runs the 32-bit path.
    """
    zs = np.asarray(zs)
    if zs.ndim != 2:
        raise tc.DimensionError(f"expected a (B, d) batch, got shape {zs.shape}")
    if dtype is not None and np.dtype(dtype) != model.dtype:
        model = model.astype(dtype)
    with tc.no_grad():
        return forward(model, zs.astype(model.dtype, copy=False), seqs).data
