"""Synthetic weakly supervised slide classification with ABMIL.

A cohort is a set of synthetic slides.  Each slide owns M patches (rendered
from per-patch seeds) and a slide-level appearance sequence of colour
transforms applied to every one of its patches, standing in for
scanner/staining variation between slides.  A slide is positive when its
fraction of dense (class-1) patches exceeds ``WITNESS_THRESHOLD``.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import tensorcore as tc
from .generator import GeneratorModel, augment_batch
from .optim import AdamW, AdamWConfig
from .patchlab import (COLOR_KINDS, KIND_NAMES, KINDS, TransformSequence, TransformStep, apply_sequence,
                       sample_sequence, synth_patch)
from .tensorcore import Tensor

STRATEGIES = ("base", "noise", "inst", "wsi")
FRACTIONS = (0.1, 1.0)
WITNESS_THRESHOLD = 0.15
POSITIVE_RANGE = (0.2, 0.6)
NEGATIVE_RANGE = (0.0, 0.1)
BAG_SIZE_RANGE = (20, 200)
N_FOLDS = 5
STYLE_STRENGTH = 0.25


class MetricError(ValueError):
    pass


class MilContractError(ValueError):
    pass


@dataclass(frozen=True)
class Slide:
    slide_id: int
    label: int
    class1_fraction: float
    threshold: float
    patch_ids: np.ndarray
    style: TransformSequence | None

    @property
    def size(self) -> int:
        return len(self.patch_ids)


@dataclass
class Cohort:
    """Patch universe plus slide membership.  Patches are rendered lazily from seeds."""
    seed: int
    slides: list[Slide]
    patch_seed: np.ndarray
    patch_class: np.ndarray
    patch_slide: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_patches(self) -> int:
        return len(self.patch_seed)

    def render(self, patch_ids: Sequence[int], resolution: int = 32) -> np.ndarray:
        """Patches as they appear on their slide (slide style applied)."""
        out = []
        for pid in np.asarray(patch_ids):
            img = synth_patch(int(self.patch_seed[pid]), int(self.patch_class[pid]), resolution)
            style = self.slides[int(self.patch_slide[pid])].style
            out.append(apply_sequence(img, style) if style is not None else img)
        return np.stack(out)

    def embeddings(self, encoder, resolution: int = 32, chunk: int = 2048) -> np.ndarray:
        key = (id(encoder.weights), resolution)
        if key not in self._cache:
            ids = np.arange(self.n_patches)
            self._cache[key] = np.concatenate(
                [encoder(self.render(ids[i:i + chunk], resolution)) for i in range(0, len(ids), chunk)])
        return self._cache[key]

    def bags(self, encoder, resolution: int = 32) -> list["Bag"]:
        emb = self.embeddings(encoder, resolution)
        return [Bag(emb[s.patch_ids], s.label, s.slide_id, s.patch_ids) for s in self.slides]


@dataclass
class Bag:
    embeddings: np.ndarray
    label: int
    slide_id: int
    patch_ids: np.ndarray

    @property
    def size(self) -> int:
        return len(self.embeddings)


def slide_style(rng: np.random.Generator, k_max: int, strength: float) -> TransformSequence:
    """A colour sequence whose parameters are pulled toward identity by ``strength`` in [0, 1]."""
    steps = []
    for step in sample_sequence(rng, k_max, COLOR_KINDS):
        ident = np.asarray(KINDS[step.kind].identity, dtype=float)
        param = ident + strength * (np.asarray(step.param, dtype=float) - ident)
        steps.append(TransformStep(step.kind, tuple(map(float, param)) if param.ndim else float(param)))
    return TransformSequence(tuple(steps))


def make_cohort(seed: int, n_bags: int, style_k_max: int = 3, style_strength: float = STYLE_STRENGTH,
                bag_size: tuple[int, int] = BAG_SIZE_RANGE) -> Cohort:
    """Half positive, half negative slides with witness-rate labels and random styles."""
    rng = np.random.default_rng([seed, 0xC0407])
    slides, seeds, classes, owners = [], [], [], []
    next_id = 0
    labels = rng.permutation(np.arange(n_bags) % 2)
    for sid, label in enumerate(labels):
        m = int(rng.integers(bag_size[0], bag_size[1] + 1))
        lo, hi = POSITIVE_RANGE if label else NEGATIVE_RANGE
        frac = rng.uniform(lo, hi)
        n1 = int(round(frac * m))
        cls = np.zeros(m, dtype=int)
        cls[:n1] = 1
        cls = rng.permutation(cls)
        ids = np.arange(next_id, next_id + m)
        next_id += m
        style = slide_style(rng, style_k_max, style_strength) if style_k_max else None
        realized = n1 / m
        slides.append(Slide(sid, int(realized > WITNESS_THRESHOLD), realized, WITNESS_THRESHOLD, ids, style))
        seeds.append(10_000_000 * (seed + 1) + ids)
        classes.append(cls)
        owners.append(np.full(m, sid))
    return Cohort(seed, slides, np.concatenate(seeds), np.concatenate(classes), np.concatenate(owners))


@dataclass(frozen=True)
class Fold:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


@dataclass(frozen=True)
class SplitPlan:
    seed: int
    train_slides: np.ndarray
    heldout_slides: np.ndarray
    generator_patch_ids: np.ndarray
    folds: tuple[Fold, ...]


def make_splits(cohort: Cohort, seed: int, train_share: float = 0.7, n_folds: int = N_FOLDS) -> SplitPlan:
    """70/30 slide split; bootstrap train pools from the 70%; shuffle-split the 30% into val/test."""
    n = len(cohort.slides)
    if n < 50:
        raise MilContractError(f"make_splits needs >= 50 slides, got {n}")
    rng = np.random.default_rng([seed, 0x5D117])
    order = rng.permutation(n)
    cut = int(round(train_share * n))
    train, held = np.sort(order[:cut]), np.sort(order[cut:])
    folds = []
    for _ in range(n_folds):
        boot = rng.choice(train, size=len(train), replace=True)
        shuffled = rng.permutation(held)
        half = len(shuffled) // 2
        folds.append(Fold(boot, np.sort(shuffled[:half]), np.sort(shuffled[half:])))
    gen_ids = np.concatenate([cohort.slides[s].patch_ids for s in train])
    return SplitPlan(seed, train, held, gen_ids, tuple(folds))


def leakage(plan: SplitPlan, cohort: Cohort) -> list[set[int]]:
    """Per fold, patch ids shared between the generator pool and that fold's val/test slides."""
    gen = set(plan.generator_patch_ids.tolist())
    out = []
    for fold in plan.folds:
        ids = set()
        for s in np.concatenate([fold.val, fold.test]):
            ids.update(cohort.slides[int(s)].patch_ids.tolist())
        out.append(gen & ids)
    return out


# ABMIL

@dataclass
class AbmilModel:
    params: dict[str, Tensor]
    gated: bool = True

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data = v.copy()


def init_abmil(d: int, rng: np.random.Generator, hidden: int = 64, gated: bool = True,
               n_classes: int = 2) -> AbmilModel:
    def u(shape, fan_in):
        b = 1.0 / math.sqrt(fan_in)
        return tc.parameter(rng.uniform(-b, b, size=shape))

    params = {"attn.V": u((d, hidden), d), "attn.w": u((hidden, 1), hidden)}
    if gated:
        params.update({"attn.bV": tc.parameter(np.zeros(hidden)), "attn.U": u((d, hidden), d),
                       "attn.bU": tc.parameter(np.zeros(hidden)), "attn.bw": tc.parameter(np.zeros(1))})
    params.update({"cls.W": u((d, n_classes), d), "cls.b": tc.parameter(np.zeros(n_classes))})
    return AbmilModel(params, gated)


def abmil_forward(model: AbmilModel, h) -> tuple[Tensor, Tensor]:
    """Class logits (n_classes,) and attention weights (M,) for one bag (M, d)."""
    h = h if isinstance(h, Tensor) else Tensor(np.asarray(h, dtype=np.float64))
    if h.ndim != 2 or h.shape[0] == 0:
        raise MilContractError(f"bag must be a non-empty (M, d) matrix, got shape {h.shape}")
    p = model.params
    if model.gated:
        gate = tc.tanh(h @ p["attn.V"] + p["attn.bV"]) * tc.sigmoid(h @ p["attn.U"] + p["attn.bU"])
        scores = gate @ p["attn.w"] + p["attn.bw"]
    else:
        scores = (h @ p["attn.V"]) @ p["attn.w"]
    attn = tc.softmax(tc.reshape(scores, (1, -1)), axis=-1)
    pooled = attn @ h
    logits = pooled @ p["cls.W"] + p["cls.b"]
    return tc.reshape(logits, (-1,)), tc.reshape(attn, (-1,))


def bag_loss(model: AbmilModel, h, label: int) -> Tensor:
    logits, _ = abmil_forward(model, h)
    return -tc.log_softmax(logits)[label]


# metrics

def auc(scores, labels) -> float:
    """Mann-Whitney AUC with ties counted half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes present")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def balanced_accuracy(pred, labels) -> float:
    pred, labels = np.asarray(pred), np.asarray(labels)
    recalls = [np.mean(pred[labels == c] == c) for c in np.unique(labels)]
    return float(np.mean(recalls))


# augmentation

def chi_mean(d: int) -> float:
    """E||g|| for g ~ N(0, I_d)."""
    return math.sqrt(2.0) * math.exp(math.lgamma((d + 1) / 2) - math.lgamma(d / 2))


@dataclass(frozen=True)
class NoiseCalibration:
    sigma: float
    target_displacement: float
    noise_displacement: float

    @property
    def relative_error(self) -> float:
        return abs(self.noise_displacement - self.target_displacement) / self.target_displacement


def calibrate_noise(generator: GeneratorModel, zs: np.ndarray, rng: np.random.Generator,
                    k_max: int | None = None, kinds: Sequence[str] = KIND_NAMES) -> NoiseCalibration:
    """Match the per-row noise norm to the generator's mean displacement ||z_hat - z||."""
    k_max = generator.config.k_max if k_max is None else k_max
    seqs = [sample_sequence(rng, k_max, kinds) for _ in range(len(zs))]
    target = float(np.linalg.norm(augment_batch(generator, zs, seqs) - zs, axis=1).mean())
    sigma = target / chi_mean(zs.shape[1])
    measured = float(np.linalg.norm(rng.normal(0.0, sigma, size=zs.shape), axis=1).mean())
    return NoiseCalibration(sigma, target, measured)


@dataclass
class AugmentedBag:
    embeddings: np.ndarray
    applied: bool
    sequences: list | None = None


def augment_bag(h: np.ndarray, strategy: str, generator: GeneratorModel | None,
                rng: np.random.Generator, p_aug: float = 0.75, noise_sigma: float | None = None,
                kinds: Sequence[str] = KIND_NAMES) -> AugmentedBag:
    """Apply one augmentation strategy to a bag's embeddings with probability ``p_aug``."""
    if strategy not in STRATEGIES:
        raise MilContractError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if strategy == "base" or rng.random() >= p_aug:
        return AugmentedBag(h, False)
    if strategy == "noise":
        if noise_sigma is None:
            raise MilContractError("noise strategy needs a calibrated sigma")
        return AugmentedBag(h + rng.normal(0.0, noise_sigma, size=h.shape), True)
    if generator is None:
        raise MilContractError(f"strategy {strategy!r} needs a trained generator")
    k_max = generator.config.k_max
    if strategy == "wsi":
        seq = sample_sequence(rng, k_max, kinds)
        return AugmentedBag(augment_batch(generator, h, seq), True, [seq] * len(h))
    seqs = [sample_sequence(rng, k_max, kinds) for _ in range(len(h))]
    return AugmentedBag(augment_batch(generator, h, seqs), True, seqs)


# training

@dataclass(frozen=True)
class MilHyper:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    accumulation: int = 4
    patience: int = 30
    max_epochs: int = 200
    p_aug: float = 0.75
    hidden: int = 64
    kinds: tuple[str, ...] = KIND_NAMES


@dataclass
class MilResult:
    model: AbmilModel
    test_auc: float
    epochs_ran: int
    best_epoch: int
    best_val_bacc: float
    wall_seconds: float
    test_scores: np.ndarray


def predict(model: AbmilModel, bags: Sequence[Bag]) -> tuple[np.ndarray, np.ndarray]:
    """Positive-class probabilities and mean cross-entropy over ``bags``."""
    probs, losses = [], []
    with tc.no_grad():
        for bag in bags:
            logits, _ = abmil_forward(model, bag.embeddings)
            logp = tc.log_softmax(logits).data
            probs.append(math.exp(logp[1]))
            losses.append(-logp[bag.label])
    return np.array(probs), np.array(losses)


def fraction_subset(pool: np.ndarray, fraction: float) -> np.ndarray:
    if fraction not in FRACTIONS:
        raise MilContractError(f"data fraction must be one of {FRACTIONS}, got {fraction}")
    return pool[: math.ceil(fraction * len(pool))]


def train_mil(bags: Sequence[Bag], fold: Fold, strategy: str, data_fraction: float,
              hyper: MilHyper = MilHyper(), generator: GeneratorModel | None = None,
              noise_sigma: float | None = None, seed: int = 0, fold_index: int = 0) -> MilResult:
    """Train ABMIL on one fold and report test AUC of the best validation checkpoint.

    Model selection uses validation balanced accuracy, ties broken by lower
    validation loss.  Initialization depends only on (seed, fold), so
    strategies are compared from identical starting weights.
    """
    train_ids = fraction_subset(np.asarray(fold.train), data_fraction)
    if len(train_ids) == 0 or len(fold.val) == 0 or len(fold.test) == 0:
        raise MilContractError("fold has an empty train, val or test pool")
    t0 = time.perf_counter()
    d = bags[0].embeddings.shape[1]
    model = init_abmil(d, np.random.default_rng([seed, fold_index, 0xAB]), hidden=hyper.hidden)
    aug_rng = np.random.default_rng([seed, fold_index, STRATEGIES.index(strategy), 0xA6])
    order_rng = np.random.default_rng([seed, fold_index, 0x0D])
    opt = AdamW(model.parameters(), AdamWConfig(lr=hyper.lr, weight_decay=hyper.weight_decay))
    val_bags = [bags[i] for i in fold.val]
    val_labels = np.array([b.label for b in val_bags])

    best = (-1.0, -math.inf)
    best_state, best_epoch, epoch = model.state(), 0, 0
    for epoch in range(1, hyper.max_epochs + 1):
        opt.zero_grad()
        pending = 0
        for i in order_rng.permutation(train_ids):
            bag = bags[int(i)]
            h = augment_bag(bag.embeddings, strategy, generator, aug_rng, hyper.p_aug, noise_sigma,
                            hyper.kinds).embeddings
            tc.backward(bag_loss(model, h, bag.label) * (1.0 / hyper.accumulation))
            pending += 1
            if pending == hyper.accumulation:
                opt.step()
                opt.zero_grad()
                pending = 0
        if pending:
            opt.step()
        probs, losses = predict(model, val_bags)
        score = (balanced_accuracy((probs > 0.5).astype(int), val_labels), -float(losses.mean()))
        if score > best:
            best, best_state, best_epoch = score, model.state(), epoch
        elif epoch - best_epoch >= hyper.patience:
            break
    model.load_state(best_state)
    test_bags = [bags[i] for i in fold.test]
    probs, _ = predict(model, test_bags)
    return MilResult(model, auc(probs, [b.label for b in test_bags]), epoch, best_epoch,
                     best[0], time.perf_counter() - t0, probs)
