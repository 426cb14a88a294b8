"""Seeded end-to-end pipeline shared by the CLI and the acceptance suite.

Everything derives from one root seed: the cohort, its slide split, the
generator's training pool, held-out evaluation patches and every model
initialisation.  Artifacts live under ``Settings.out``.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import os
from dataclasses import dataclass, fields
from functools import cached_property
from pathlib import Path

import numpy as np

from . import formats
from .evalkit import RESULT_FIELDS, fingerprint, fmt
from .generator import GeneratorConfig, GeneratorModel, TrainConfig, train_generator
from .milbench import (FRACTIONS, STRATEGIES, MilHyper, MilResult, calibrate_noise, make_cohort,
                       make_splits, train_mil)
from .patchlab import KIND_NAMES
from .toyencoder import ToyEncoder, init_encoder

# sub-stream tags under the root seed
_POOL, _GEN, _EVAL, _NOISE = 1, 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Settings:
    seed: int = 0
    out: str = "runs"
    encoder_seed: int = 42
    n_bags: int = 400
    train_share: float = 0.7
    style_strength: float = 0.25
    gen_pool: int = 2000
    gen_steps: int = 3000
    gen_batch: int = 64
    gen_lr: float = 1e-3
    gen_weight_decay: float = 1e-5
    gen_warmup: int = 100
    C: int = 4
    L: int = 4
    heads: int = 4
    k_max: int = 4
    kinds: str = "all"  # comma-separated transform kinds the sampler may draw
    ffn_mult: int = 4
    lambda_id: float = 1.0
    mil_lr: float = 1e-4
    mil_weight_decay: float = 1e-5
    mil_accumulation: int = 4
    mil_patience: int = 30
    mil_max_epochs: int = 200
    p_aug: float = 0.75
    noise_sigma: float = 0.0  # 0 means calibrate against the trained generator
    eval_patches: int = 500
    retrieval_patches: int = 100
    trajectory_patches: int = 10
    trajectory_kinds: str = "Hue,HED"
    batch_sizes: str = "1000,10000,100000"
    mem_budget: int = 2 ** 31

    @property
    def kind_list(self) -> tuple[str, ...]:
        if self.kinds.strip() == "all":
            return KIND_NAMES
        return tuple(k.strip() for k in self.kinds.split(",") if k.strip())

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(d=128, C=self.C, L=self.L, heads=self.heads, k_max=self.k_max,
                               ffn_mult=self.ffn_mult, lambda_id=self.lambda_id)

    def train_config(self) -> TrainConfig:
        return TrainConfig(steps=self.gen_steps, batch_size=self.gen_batch, lr=self.gen_lr,
                           weight_decay=self.gen_weight_decay, warmup=self.gen_warmup, kinds=self.kind_list)

    def mil_hyper(self) -> MilHyper:
        return MilHyper(lr=self.mil_lr, weight_decay=self.mil_weight_decay, accumulation=self.mil_accumulation,
                        patience=self.mil_patience, max_epochs=self.mil_max_epochs, p_aug=self.p_aug,
                        kinds=self.kind_list)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def fingerprint(self) -> str:
        # the output location does not change results
        return fingerprint({k: v for k, v in self.as_dict().items() if k != "out"})


def _coerce(name: str, typ, raw: str):
    try:
        if typ in ("int", int):
            return int(raw)
        if typ in ("float", float):
            return float(raw)
        return str(raw)
    except ValueError:
        raise ConfigError(f"config key {name!r}: cannot parse {raw!r} as {typ}") from None


def parse_config(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment.  Unknown keys are rejected."""
    known = {f.name: f.type for f in fields(Settings)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, known[key], raw)
    return out


def resolve(config_path=None, **overrides) -> Settings:
    values = parse_config(Path(config_path).read_text()) if config_path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        settings = Settings(**values)
        settings.generator_config()
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    kinds = settings.kind_list
    unknown = [k for k in kinds if k not in KIND_NAMES]
    if unknown or not kinds:
        raise ConfigError(f"config key 'kinds': unknown transform kinds {unknown}; choose from {KIND_NAMES}")
    if settings.k_max > len(kinds):
        raise ConfigError(f"k_max={settings.k_max} exceeds the {len(kinds)} enabled kinds")
    if not 0 < settings.train_share < 1 or not 0 <= settings.style_strength <= 1:
        raise ConfigError("train_share must be in (0, 1) and style_strength in [0, 1]")
    return settings


class Workspace:
    """Lazily built, cached pipeline state for one resolved configuration."""

    def __init__(self, settings: Settings):
        self.s = settings
        self.out = Path(settings.out)

    def rng(self, *tags: int) -> np.random.Generator:
        return np.random.default_rng([self.s.seed, *tags])

    # data

    @cached_property
    def encoder(self) -> ToyEncoder:
        return ToyEncoder(init_encoder(self.s.encoder_seed))

    @cached_property
    def cohort(self):
        return make_cohort(self.s.seed, self.s.n_bags, style_strength=self.s.style_strength)

    @cached_property
    def plan(self):
        return make_splits(self.cohort, self.s.seed, self.s.train_share)

    @cached_property
    def pool_ids(self) -> np.ndarray:
        ids = self.plan.generator_patch_ids
        return np.sort(self.rng(_POOL).choice(ids, size=min(self.s.gen_pool, len(ids)), replace=False))

    def heldout_ids(self, n: int) -> np.ndarray:
        """Patch ids from held-out slides only, so they never overlap the generator pool."""
        ids = np.concatenate([self.cohort.slides[int(s)].patch_ids for s in self.plan.heldout_slides])
        return np.sort(self.rng(_EVAL).choice(ids, size=min(n, len(ids)), replace=False))

    def patches(self, ids, resolution: int = 32) -> np.ndarray:
        return self.cohort.render(ids, resolution)

    def bags(self, resolution: int = 32):
        return self.cohort.bags(self.encoder, resolution)

    # artifacts

    @property
    def generator_path(self) -> Path:
        return self.out / "generator.haug"

    @property
    def encoder_path(self) -> Path:
        return self.out / "encoder.lenc"

    @property
    def results_path(self) -> Path:
        return self.out / "results.csv"

    def write_resolved(self, command: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / f"{command}.config.json"
        blob = {"command": command, "fingerprint": self.s.fingerprint, "config": self.s.as_dict()}
        path.write_text(json.dumps(blob, indent=2, sort_keys=True) + "\n")
        return path

    def train_generator(self, callback=None):
        patches = self.patches(self.pool_ids)
        rng = self.rng(_GEN)
        return train_generator(self.s.generator_config(), patches, self.encoder, self.s.train_config(), rng,
                               callback=callback)

    def load_generator(self) -> GeneratorModel:
        return formats.load_generator(self.generator_path)

    def noise_calibration(self, generator: GeneratorModel, n: int = 500):
        zs = self.encoder(self.patches(self.pool_ids[:n]))
        return calibrate_noise(generator, zs, self.rng(_NOISE), kinds=self.s.kind_list)

    def run_mil(self, strategy: str, fraction: float, resolution: int = 32, generator: GeneratorModel | None = None,
                noise_sigma: float | None = None, folds=None) -> list[tuple[int, MilResult]]:
        if strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {strategy!r}")
        if fraction not in FRACTIONS:
            raise ConfigError(f"fraction must be one of {FRACTIONS}")
        bags = self.bags(resolution)
        folds = range(len(self.plan.folds)) if folds is None else folds
        return [(f, train_mil(bags, self.plan.folds[f], strategy, fraction, self.s.mil_hyper(), generator,
                              noise_sigma, seed=self.s.seed, fold_index=f)) for f in folds]

    def append_results(self, strategy: str, fraction: float, resolution: int,
                       results: list[tuple[int, MilResult]]) -> Path:
        path = self.results_path
        path.parent.mkdir(parents=True, exist_ok=True)
        new = not path.exists() or path.stat().st_size == 0
        lines = []
        for f, r in results:
            row = [f, strategy, fraction, resolution, self.s.seed, fmt(r.test_auc), r.epochs_ran,
                   fmt(r.wall_seconds), self.s.fingerprint]
            lines.append(",".join(str(x) for x in row) + "\n")
        # one write per row keeps concurrent appends line-atomic
        with path.open("a") as fh:
            if new:
                fh.write(",".join(RESULT_FIELDS) + "\n")
            for line in lines:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())
        return path


def read_results(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
