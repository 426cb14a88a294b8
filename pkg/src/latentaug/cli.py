"""Command-line entry point.

Exit codes: 0 success, 2 usage, 3 missing dependency (e.g. weights), 4 file
format, 5 numeric failure (divergence, capacity).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import evalkit, formats
from .experiment import ConfigError, Settings, Workspace, resolve
from .generator import CapacityError, TrainingError
from .milbench import FRACTIONS, STRATEGIES, MetricError
from .plotting import plot_loss_curve

log = logging.getLogger("latentaug")

EXIT_OK, EXIT_USAGE, EXIT_DEPENDENCY, EXIT_FORMAT, EXIT_NUMERIC = 0, 2, 3, 4, 5
EVAL_KINDS = ("recon", "invariance", "retrieval", "trajectories", "cross-res")


class UsageError(Exception):
    pass


class DependencyError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value settings file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=str, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="latentaug", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train-gen", parents=[common], help="train the latent augmentation generator")
    mil = sub.add_parser("train-mil", parents=[common], help="run one strategy over all folds")
    mil.add_argument("--strategy", choices=STRATEGIES, required=True)
    mil.add_argument("--fraction", type=float, choices=FRACTIONS, default=1.0)
    mil.add_argument("--resolution", type=int, choices=(32, 64), default=32)
    mil.add_argument("--folds", type=str, help="comma-separated fold indices (default: all)")
    ev = sub.add_parser("eval", parents=[common], help="evaluation protocols")
    ev.add_argument("--which", choices=EVAL_KINDS, required=True)
    ev.add_argument("--resolution", type=int, choices=(32, 64), default=32)
    sub.add_parser("retrieve", parents=[common], help="alias of eval --which retrieval").set_defaults(
        which="retrieval", resolution=32)
    sub.add_parser("trajectories", parents=[common], help="alias of eval --which trajectories").set_defaults(
        which="trajectories", resolution=32)
    bench = sub.add_parser("bench", parents=[common], help="inference throughput and memory")
    bench.add_argument("--batch-sizes", type=str, help="ascending comma-separated batch sizes")
    sub.add_parser("table", parents=[common], help="aggregate results.csv into strategy tables")
    return p


def _ints(text: str, what: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"{what} must be comma-separated integers, got {text!r}") from None


def _need_generator(ws: Workspace):
    if not ws.generator_path.exists():
        raise DependencyError(f"generator weights not found at {ws.generator_path}; run train-gen first")
    return ws.load_generator()


def cmd_train_gen(ws: Workspace, args) -> int:
    every = max(1, ws.s.gen_steps // 20)

    def progress(step, value):
        if step % every == 0:
            log.info("step %d loss %.4f", step, value)

    model, tlog = ws.train_generator(progress)
    formats.save_generator(model, ws.generator_path)
    formats.save_encoder(ws.encoder.weights, ws.encoder_path)
    if tlog.loss:
        evalkit._write_rows([{"step": str(i), "loss": evalkit.fmt(v), "reconstruction": evalkit.fmt(r),
                              "identity": evalkit.fmt(d)}
                             for i, (v, r, d) in enumerate(zip(tlog.loss, tlog.reconstruction, tlog.identity))],
                            ws.out / "train_loss.csv")
        plot_loss_curve(tlog.loss, ws.out / "train_loss.svg")
    print(f"wrote {ws.generator_path} ({model.param_count} parameters, {len(tlog.loss)} steps)")
    return EXIT_OK


def cmd_train_mil(ws: Workspace, args) -> int:
    generator = sigma = None
    if args.strategy in ("inst", "wsi"):
        generator = _need_generator(ws)
    if args.strategy == "noise":
        if ws.s.noise_sigma > 0:
            sigma = ws.s.noise_sigma
        else:
            if not ws.generator_path.exists():
                raise DependencyError("noise needs noise_sigma in the config or generator weights to calibrate against")
            cal = ws.noise_calibration(ws.load_generator())
            sigma = cal.sigma
            log.info("noise sigma %.6g (displacement %.4g vs %.4g)", sigma, cal.noise_displacement,
                     cal.target_displacement)
    folds = _ints(args.folds, "--folds") if args.folds else None
    if folds and not all(0 <= f < len(ws.plan.folds) for f in folds):
        raise UsageError(f"fold indices must be in 0..{len(ws.plan.folds) - 1}")
    results = ws.run_mil(args.strategy, args.fraction, args.resolution, generator, sigma, folds)
    path = ws.append_results(args.strategy, args.fraction, args.resolution, results)
    for f, r in results:
        print(f"fold {f} {args.strategy} fraction={args.fraction} auc={r.test_auc:.4f} epochs={r.epochs_ran}")
    print(f"appended {len(results)} rows to {path}")
    return EXIT_OK


def cmd_eval(ws: Workspace, args) -> int:
    which = args.which
    generator = _need_generator(ws)
    enc, fp = ws.encoder, ws.s.fingerprint
    out = ws.out / "eval"
    if which in ("recon", "invariance", "cross-res"):
        res = 64 if which == "cross-res" else args.resolution
        patches = ws.patches(ws.heldout_ids(ws.s.eval_patches), res)
        rec, inv = evalkit.reconstruction_eval(generator, enc, patches, ws.rng(5), ws.s.k_max,
                                               ws.s.kind_list, fp=fp)
        path = evalkit.write_reports([rec, inv], out / f"{which}_{res}px.csv")
        for r in (rec, inv):
            print(f"{r.metric} @ {res}px: {r.value:.4f} [{r.ci_lo:.4f}, {r.ci_hi:.4f}] n={r.n}")
        print(f"wrote {path}")
    elif which == "retrieval":
        patches = ws.patches(ws.heldout_ids(ws.s.retrieval_patches))
        rep = evalkit.retrieval_eval(generator, enc, patches)
        oracle = evalkit.retrieval_eval(evalkit.true_oracle(enc), enc, patches)
        evalkit._write_rows([{"key": k, "accuracy": evalkit.fmt(v)} for k, v in rep.per_key.items()]
                            + [{"key": "ALL", "accuracy": evalkit.fmt(rep.accuracy)},
                               {"key": "ORACLE", "accuracy": evalkit.fmt(oracle.accuracy)}],
                            out / "retrieval.csv")
        print(f"retrieval top-1 {rep.accuracy:.4f} over {rep.n_queries} queries ({rep.grid_size} keys); "
              f"oracle {oracle.accuracy:.4f}")
    elif which == "trajectories":
        kinds = [k.strip() for k in ws.s.trajectory_kinds.split(",") if k.strip()]
        patch = ws.patches(ws.heldout_ids(1))[0]
        grids = {"Hue": np.linspace(-0.5, 0.5, 9), "HED": np.linspace(-0.05, 0.05, 9)}
        for kind in kinds:
            if kind not in grids:
                raise UsageError(f"trajectory kind must be Hue or HED, got {kind!r}")
            traj = evalkit.trajectory_export(generator, enc, patch, kind, grids[kind], out / f"trajectory_{kind}")
            print(f"{kind}: paired {traj.paired_distance:.4f} vs cross {traj.cross_distance:.4f}")
    return EXIT_OK


def cmd_bench(ws: Workspace, args) -> int:
    sizes = _ints(args.batch_sizes or ws.s.batch_sizes, "--batch-sizes")
    if not sizes or sizes != sorted(sizes) or len(set(sizes)) != len(sizes) or sizes[0] < 1:
        raise UsageError(f"batch sizes must be positive and strictly ascending, got {sizes}")
    generator = _need_generator(ws)
    records = evalkit.bench_throughput(generator, sizes, ws.s.mem_budget, seed=ws.s.seed)
    evalkit.write_bench(records, ws.out / "bench.csv", ws.out / "bench.svg")
    for r in records:
        print(f"batch {r.batch_size}: {r.seconds:.4f} s, peak {r.peak_bytes / 2**20:.1f} MiB, "
              f"{r.throughput:.0f} embeddings/s")
    if len(records) < len(sizes):
        print(f"stopped after {len(records)} of {len(sizes)} sizes: memory budget {ws.s.mem_budget} bytes",
              file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_table(ws: Workspace, args) -> int:
    if not ws.results_path.exists():
        raise DependencyError(f"no results at {ws.results_path}; run train-mil first")
    cells, gains, missing = evalkit.strategy_table(evalkit.read_results(ws.results_path))
    evalkit.write_table(cells, gains, ws.out)
    for c in cells:
        spread = "n/a (single fold)" if c.std is None else f"{c.std:.4f}"
        print(f"{c.strategy:6s} fraction={c.data_fraction:<4} {c.resolution}px  auc {c.mean:.4f} +- {spread}  n={c.n}")
    for m in missing:
        print(f"missing cell: strategy={m[0]} fraction={m[1]} resolution={m[2]}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        settings: Settings = resolve(args.config, seed=args.seed, out=args.out)
        ws = Workspace(settings)
        ws.write_resolved(args.command)
        handler = {"train-gen": cmd_train_gen, "train-mil": cmd_train_mil, "eval": cmd_eval, "retrieve": cmd_eval,
                   "trajectories": cmd_eval, "bench": cmd_bench, "table": cmd_table}[args.command]
        return handler(ws, args)
    except (UsageError, ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DependencyError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except formats.FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except (TrainingError, CapacityError, MetricError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
