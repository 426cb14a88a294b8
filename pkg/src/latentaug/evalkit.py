"""Evaluation protocols: cosine reconstruction, retrieval, trajectories, throughput."""
from __future__ import annotations

import csv
import gc
import hashlib
import json
import math
import time
import tracemalloc
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensorcore as tc
from .generator import CapacityError, GeneratorModel, augment_batch
from .patchlab import KIND_NAMES, TransformSequence, TransformStep, apply_transform, sample_sequence
from .toyencoder import ToyEncoder, cosine

N_BOOTSTRAP = 1000

# hue and contrast at +-0.5, +-0.25 (contrast offset onto its [0.5, 1.5] range), plus blur and erosion
RETRIEVAL_GRID: tuple[TransformSequence, ...] = tuple(
    [TransformSequence.of(("Hue", h)) for h in (-0.5, -0.25, 0.25, 0.5)]
    + [TransformSequence.of(("Contrast", c)) for c in (0.5, 0.75, 1.25, 1.5)]
    + [TransformSequence.of(("Blur", "on")), TransformSequence.of(("Erosion", "on"))]
)

Generate = Callable[[np.ndarray, Sequence[TransformSequence], np.ndarray], np.ndarray]


class EvalContractError(ValueError):
    pass


def fmt(x: float) -> str:
    return f"{x:.17g}"


def fingerprint(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class EvalReport:
    metric: str
    value: float
    ci_lo: float
    ci_hi: float
    n: int
    fingerprint: str = ""
    tags: dict = field(default_factory=dict)

    def overlaps(self, other: "EvalReport") -> bool:
        return self.ci_lo <= other.ci_hi and other.ci_lo <= self.ci_hi

    def row(self) -> dict[str, str]:
        out = {"metric": self.metric, "value": fmt(self.value), "ci_lo": fmt(self.ci_lo),
               "ci_hi": fmt(self.ci_hi), "n": str(self.n), "fingerprint": self.fingerprint}
        out.update({k: str(v) for k, v in sorted(self.tags.items())})
        return out


def bootstrap_ci(values, n_resamples: int = N_BOOTSTRAP, seed: int = 0,
                 level: float = 0.95) -> tuple[float, float]:
    """Percentile bootstrap CI of the mean, clipped so it always contains the point estimate."""
    values = np.asarray(values, dtype=float)
    if n_resamples < 1000:
        raise EvalContractError("bootstrap needs at least 1000 resamples")
    rng = np.random.default_rng(seed)
    means = values[rng.integers(0, len(values), size=(n_resamples, len(values)))].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, (1 + level) / 2])
    m = values.mean()
    return float(min(lo, m)), float(max(hi, m))


def report(metric: str, values, fp: str = "", seed: int = 0, **tags) -> EvalReport:
    values = np.asarray(values, dtype=float)
    lo, hi = bootstrap_ci(values, seed=seed)
    return EvalReport(metric, float(values.mean()), lo, hi, len(values), fp, tags)


def write_reports(reports: Iterable[EvalReport], path) -> Path:
    rows = [r.row() for r in reports]
    header = list(dict.fromkeys(k for row in rows for k in row))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header)
        w.writeheader()
        w.writerows(rows)
    return path


def true_oracle(encoder: ToyEncoder) -> Generate:
    """A 'generator' that returns the encoder's embedding of the truly transformed patch."""
    return lambda zs, seqs, patches: encoder.encode_transformed(patches, seqs)


def generate(generator, zs: np.ndarray, seqs: Sequence[TransformSequence], patches: np.ndarray) -> np.ndarray:
    if isinstance(generator, GeneratorModel):
        return augment_batch(generator, zs, list(seqs))
    return np.asarray(generator(zs, seqs, patches))


def paired_cosines(generator, encoder: ToyEncoder, patches: np.ndarray,
                   seqs: Sequence[TransformSequence]) -> tuple[np.ndarray, np.ndarray]:
    """Per patch: (cos(z_hat, z_bar), cos(z, z_bar)) under the same sequence."""
    z = encoder(patches)
    z_bar = encoder.encode_transformed(patches, seqs)
    z_hat = generate(generator, z, seqs, patches)
    return cosine(z_hat, z_bar), cosine(z, z_bar)


def reconstruction_eval(generator, encoder: ToyEncoder, patches: np.ndarray, rng: np.random.Generator,
                        k_max: int = 4, kinds: Sequence[str] = KIND_NAMES, fp: str = "",
                        resolution: int | None = None) -> tuple[EvalReport, EvalReport]:
    """Reconstruction and encoder-invariance reports over one shared set of sampled sequences."""
    patches = np.asarray(patches)
    seqs = [sample_sequence(rng, k_max, kinds) for _ in range(len(patches))]
    rec, inv = paired_cosines(generator, encoder, patches, seqs)
    res = resolution or patches.shape[1]
    return (report("reconstruction_cosine", rec, fp, resolution=res),
            report("invariance_cosine", inv, fp, resolution=res))


def cross_resolution_eval(generator, encoder: ToyEncoder, patches64: np.ndarray, rng: np.random.Generator,
                          k_max: int = 4, kinds: Sequence[str] = KIND_NAMES,
                          fp: str = "") -> tuple[EvalReport, EvalReport]:
    patches64 = np.asarray(patches64)
    if patches64.shape[1] != 64:
        raise EvalContractError(f"cross-resolution evaluation expects 64-px patches, got {patches64.shape[1]}")
    return reconstruction_eval(generator, encoder, patches64, rng, k_max, kinds, fp, resolution=64)


# retrieval

@dataclass(frozen=True)
class RetrievalReport:
    accuracy: float
    n_queries: int
    n_patches: int
    grid: tuple[str, ...]
    per_key: dict

    @property
    def grid_size(self) -> int:
        return len(self.grid)


def _label(seq: TransformSequence) -> str:
    return "+".join(f"{s.kind}({s.param})" for s in seq)


def _image_classes(images: np.ndarray, atol: float = 1e-9) -> np.ndarray:
    """Keys whose transformed pixels coincide (e.g. hue -0.5 and +0.5) share a class."""
    classes = np.arange(len(images))
    for i in range(len(images)):
        for j in range(i):
            if classes[j] == j and np.max(np.abs(images[i] - images[j])) <= atol:
                classes[i] = j
                break
    return classes


def retrieval_eval(generator, encoder: ToyEncoder, patches: np.ndarray,
                   key_grid: Sequence[TransformSequence] = RETRIEVAL_GRID) -> RetrievalReport:
    """Top-1 retrieval of true-augmented keys by generated queries, per patch.

    A query is correct when the retrieved key is its own (kind, param), or a
    key that produces the same image up to rounding.
    """
    key_grid = list(key_grid)
    if len(key_grid) < 2:
        raise EvalContractError("retrieval needs a key grid of at least 2 entries")
    patches = np.asarray(patches)
    hits = np.zeros(len(key_grid))
    for p in patches:
        images = np.stack([_apply_seq(p, s) for s in key_grid])
        classes = _image_classes(images)
        keys = encoder(images)
        z = np.repeat(encoder(p)[None], len(key_grid), axis=0)
        queries = generate(generator, z, key_grid, np.repeat(p[None], len(key_grid), axis=0))
        qn = queries / np.linalg.norm(queries, axis=1, keepdims=True)
        kn = keys / np.linalg.norm(keys, axis=1, keepdims=True)
        top = np.argmax(qn @ kn.T, axis=1)
        hits += classes[top] == classes
    n_q = len(patches) * len(key_grid)
    labels = tuple(_label(s) for s in key_grid)
    return RetrievalReport(float(hits.sum() / n_q), n_q, len(patches), labels,
                           {lab: float(h / len(patches)) for lab, h in zip(labels, hits)})


def _apply_seq(p, seq):
    out = p
    for step in seq:
        out = apply_transform(out, step)
    return out


# trajectories

def pca_2d(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project rows of ``x`` on the top-2 principal axes (exact eigendecomposition).

    Each axis is signed so that its first non-negligible loading is positive.
    """
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / max(len(x) - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    comps = vecs[:, np.argsort(vals)[::-1][:2]].T.copy()
    for c in comps:
        nz = np.flatnonzero(np.abs(c) > 1e-12)
        if len(nz) and c[nz[0]] < 0:
            c *= -1
    return xc @ comps.T, comps


def trajectory_step(kind: str, value: float) -> TransformStep:
    if kind == "Hue":
        return TransformStep("Hue", value)
    if kind == "HED":
        # one scalar sweeps all three stain scales together
        return TransformStep("HED", (value, value, value, 0.0, 0.0, 0.0))
    raise EvalContractError(f"trajectories need a continuous kind (Hue or HED), got {kind!r}")


@dataclass
class Trajectory:
    kind: str
    params: np.ndarray
    true_xy: np.ndarray
    gen_xy: np.ndarray

    @property
    def paired_distance(self) -> float:
        return float(np.linalg.norm(self.true_xy - self.gen_xy, axis=1).mean())

    @property
    def cross_distance(self) -> float:
        d = np.linalg.norm(self.true_xy[:, None] - self.gen_xy[None], axis=2)
        return float(d[~np.eye(len(d), dtype=bool)].mean())

    def rows(self) -> list[dict[str, str]]:
        out = []
        for source, xy in (("true", self.true_xy), ("generated", self.gen_xy)):
            for p, (x, y) in zip(self.params, xy):
                out.append({"kind": self.kind, "param": fmt(p), "source": source, "pc1": fmt(x), "pc2": fmt(y)})
        return out


def trajectory_export(generator, encoder: ToyEncoder, patch: np.ndarray, kind: str,
                      param_grid: Sequence[float], out_stem=None) -> Trajectory:
    """PCA trajectories of true vs generated embeddings over a parameter sweep.

    With ``out_stem`` set, writes ``<stem>.csv`` and ``<stem>.svg``.
    """
    params = np.asarray(param_grid, dtype=float)
    if len(params) < 3:
        raise EvalContractError("trajectory grid needs at least 3 points")
    seqs = [TransformSequence((trajectory_step(kind, float(v)),)) for v in params]
    stack = np.repeat(np.asarray(patch)[None], len(seqs), axis=0)
    z = encoder(stack)
    true = encoder.encode_transformed(stack, seqs)
    gen = generate(generator, z, seqs, stack)
    xy, _ = pca_2d(np.concatenate([true, gen]))
    traj = Trajectory(kind, params, xy[: len(params)], xy[len(params):])
    if out_stem is not None:
        from .plotting import plot_trajectory

        stem = Path(out_stem)
        _write_rows(traj.rows(), stem.with_suffix(".csv"))
        plot_trajectory(traj.true_xy, traj.gen_xy, params, f"{kind} trajectory", stem.with_suffix(".svg"))
    return traj


def _write_rows(rows: list[dict], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


# throughput

@dataclass(frozen=True)
class BenchRecord:
    batch_size: int
    seconds: float
    peak_bytes: int
    throughput: float
    tape_nodes: int = 0
    workers: int = 1

    def row(self) -> dict[str, str]:
        return {"batch_size": str(self.batch_size), "seconds": fmt(self.seconds),
                "peak_bytes": str(self.peak_bytes), "throughput": fmt(self.throughput),
                "workers": str(self.workers)}


def _bench_inputs(d: int, batch: int, seed: int, dtype) -> np.ndarray:
    return np.random.default_rng([seed, batch]).standard_normal((batch, d)).astype(dtype)


def bench_throughput(generator: GeneratorModel, batch_sizes: Sequence[int], mem_budget: int,
                     seed: int = 0, repeats: int = 2, seq: TransformSequence | None = None,
                     dtype=np.float32) -> list[BenchRecord]:
    """Time one shared-sequence inference pass per batch size on the 32-bit path.

    Peak memory is the tracemalloc high-water mark of a separate traced pass.
    Stops before a batch whose linearly extrapolated peak would exceed
    ``mem_budget``; raises CapacityError if the first batch already does.
    """
    sizes = list(batch_sizes)
    if sizes != sorted(sizes) or len(set(sizes)) != len(sizes):
        raise EvalContractError(f"batch sizes must be strictly ascending, got {sizes}")
    model = generator.astype(dtype)
    seq = seq or TransformSequence.of(("Hue", 0.25), ("Gamma", 1.2))
    records: list[BenchRecord] = []
    for b in sizes:
        if records and records[-1].peak_bytes * b / records[-1].batch_size > mem_budget:
            break
        zs = _bench_inputs(model.config.d, b, seed, dtype)
        nodes0 = tc.tape_stats()["nodes"]
        best = math.inf
        for _ in range(repeats):
            gc.collect()
            t0 = time.perf_counter()
            augment_batch(model, zs, seq)
            best = min(best, time.perf_counter() - t0)
        gc.collect()
        tracemalloc.start()
        tracemalloc.reset_peak()
        base = tracemalloc.get_traced_memory()[0]
        augment_batch(model, zs, seq)
        peak = tracemalloc.get_traced_memory()[1] - base
        tracemalloc.stop()
        nodes = tc.tape_stats()["nodes"] - nodes0
        if peak > mem_budget:
            if not records:
                raise CapacityError(f"batch {b} needs {peak} bytes, over the {mem_budget}-byte budget")
            break
        records.append(BenchRecord(b, best, int(peak), b / best, nodes))
    return records


def write_bench(records: Sequence[BenchRecord], csv_path, svg_path=None) -> None:
    _write_rows([r.row() for r in records], Path(csv_path))
    if svg_path is not None:
        from .plotting import plot_bench

        plot_bench([r.batch_size for r in records], [r.seconds for r in records],
                   [r.peak_bytes for r in records], svg_path)


# MIL result aggregation

RESULT_FIELDS = ("fold", "strategy", "data_fraction", "resolution", "seed", "auc",
                 "epochs_ran", "wall_seconds", "fingerprint")


@dataclass(frozen=True)
class TableCell:
    strategy: str
    data_fraction: float
    resolution: int
    mean: float
    std: float | None
    n: int

    @property
    def flagged(self) -> bool:
        return self.std is None


def read_results(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def strategy_table(rows: Sequence[dict]) -> tuple[list[TableCell], list[dict], list[tuple]]:
    """Mean and sample std of AUC per (strategy, fraction, resolution) over folds.

    Returns (cells, gain-over-noise rows, missing cells).  Single-fold cells
    carry ``std=None`` and are flagged rather than given a fabricated spread.
    """
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        key = (r["strategy"], float(r["data_fraction"]), int(r["resolution"]))
        groups.setdefault(key, []).append(float(r["auc"]))
    cells = []
    for (s, f, res), vals in sorted(groups.items()):
        std = float(np.std(vals, ddof=1)) if len(vals) >= 2 else None
        cells.append(TableCell(s, f, res, float(np.mean(vals)), std, len(vals)))
    by_key = {(c.strategy, c.data_fraction, c.resolution): c for c in cells}
    settings = sorted({(f, res) for (_, f, res) in groups})
    strategies = sorted({s for (s, _, _) in groups} | {"base", "noise", "inst", "wsi"})
    missing = [(s, f, res) for (f, res) in settings for s in strategies if (s, f, res) not in by_key]
    gains = []
    for f, res in settings:
        noise = by_key.get(("noise", f, res))
        if noise is None:
            continue
        for s in strategies:
            c = by_key.get((s, f, res))
            if c is not None and s != "noise":
                gains.append({"strategy": s, "data_fraction": f, "resolution": res,
                              "gain_over_noise": c.mean - noise.mean})
    return cells, gains, missing


def write_table(cells: Sequence[TableCell], gains: Sequence[dict], out_dir) -> None:
    out = Path(out_dir)
    _write_rows([{"strategy": c.strategy, "data_fraction": fmt(c.data_fraction), "resolution": str(c.resolution),
                  "mean_auc": fmt(c.mean), "std_auc": "" if c.std is None else fmt(c.std),
                  "n_folds": str(c.n), "flag": "single-fold" if c.flagged else ""} for c in cells],
                out / "strategy_table.csv")
    if gains:
        _write_rows([{k: (fmt(v) if isinstance(v, float) else str(v)) for k, v in g.items()} for g in gains],
                    out / "gain_over_noise.csv")
