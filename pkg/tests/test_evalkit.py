import csv

import numpy as np
import pytest

from latentaug.evalkit import (RETRIEVAL_GRID, EvalContractError, bench_throughput, bootstrap_ci, cross_resolution_eval,
                               fingerprint, pca_2d, reconstruction_eval, report, retrieval_eval, strategy_table,
                               trajectory_export, true_oracle, write_bench, write_table)
from latentaug.generator import CapacityError, GeneratorConfig, init_generator
from latentaug.patchlab import synth_patch
from latentaug.toyencoder import ToyEncoder


@pytest.fixture(scope="module")
def encoder():
    return ToyEncoder()


@pytest.fixture(scope="module")
def patches():
    return np.stack([synth_patch(400_000 + i, i % 2) for i in range(20)])


@pytest.fixture(scope="module")
def untrained():
    return init_generator(GeneratorConfig(), np.random.default_rng(0))


def test_bootstrap_contains_estimate(rng):
    for _ in range(10):
        v = rng.standard_normal(50)
        lo, hi = bootstrap_ci(v)
        assert lo <= v.mean() <= hi
    r = report("m", [0.25] * 10)
    assert (r.ci_lo, r.value, r.ci_hi) == (0.25, 0.25, 0.25)
    assert report("m", v, seed=0) == report("m", v, seed=0)
    with pytest.raises(EvalContractError):
        bootstrap_ci(v, n_resamples=999)


def test_fingerprint_is_stable():
    assert fingerprint({"a": 1, "b": 2}) == fingerprint({"b": 2, "a": 1})
    assert fingerprint({"a": 1}) != fingerprint({"a": 2})


def test_oracle_reconstruction_is_exact(encoder, patches):
    rec, inv = reconstruction_eval(true_oracle(encoder), encoder, patches, np.random.default_rng(0))
    assert rec.value == pytest.approx(1.0, abs=1e-12)
    assert inv.value < 1.0 and rec.n == inv.n == len(patches)


def test_cross_resolution_identity_and_tag(encoder):
    hi = np.stack([synth_patch(i, i % 2, 64) for i in range(6)])
    rng = np.random.default_rng(1)
    rec, _ = cross_resolution_eval(true_oracle(encoder), encoder, hi, rng)
    assert rec.tags["resolution"] == 64
    ident = lambda zs, seqs, p: zs
    seqs_rng = np.random.default_rng(2)
    rec_id, inv_id = reconstruction_eval(ident, encoder, hi, seqs_rng, k_max=1, kinds=("Hue",))
    assert rec_id.value == pytest.approx(inv_id.value)
    with pytest.raises(EvalContractError):
        cross_resolution_eval(ident, encoder, np.zeros((2, 32, 32, 3)), rng)


def test_retrieval_oracle_and_chance(encoder, patches):
    oracle = retrieval_eval(true_oracle(encoder), encoder, patches[:5])
    assert oracle.accuracy == 1.0
    assert oracle.grid_size == len(RETRIEVAL_GRID) == 10
    rng = np.random.default_rng(0)
    rand = lambda zs, seqs, p: rng.standard_normal(zs.shape)
    acc = np.mean([retrieval_eval(rand, encoder, patches).accuracy for _ in range(5)])
    # equivalence classes make a hit slightly likelier than 1/10
    assert 0.03 < acc < 0.3
    with pytest.raises(EvalContractError):
        retrieval_eval(rand, encoder, patches, RETRIEVAL_GRID[:1])


def test_pca_centered_and_signed(rng):
    x = rng.standard_normal((30, 8)) @ rng.standard_normal((8, 8))
    xy, comps = pca_2d(x)
    assert np.max(np.abs(xy.mean(axis=0))) <= 1e-9
    np.testing.assert_allclose(comps @ comps.T, np.eye(2), atol=1e-12)
    for c in comps:
        assert c[np.flatnonzero(np.abs(c) > 1e-12)[0]] > 0
    xy2, _ = pca_2d(-x)
    np.testing.assert_allclose(np.abs(xy2), np.abs(xy), atol=1e-9)


def test_trajectory_oracle_coincides(encoder, tmp_path):
    grid = np.linspace(-0.5, 0.5, 9)
    traj = trajectory_export(true_oracle(encoder), encoder, synth_patch(1, 1), "Hue", grid, tmp_path / "hue")
    np.testing.assert_allclose(traj.true_xy, traj.gen_xy, atol=1e-12)
    assert traj.paired_distance < 1e-12 < traj.cross_distance
    assert (tmp_path / "hue.svg").read_text().lstrip().startswith("<?xml")
    with (tmp_path / "hue.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 18 and abs(sum(float(r["pc1"]) for r in rows)) <= 1e-9
    with pytest.raises(EvalContractError):
        trajectory_export(true_oracle(encoder), encoder, synth_patch(1, 1), "Hue", [0.0, 0.1])
    with pytest.raises(EvalContractError):
        trajectory_export(true_oracle(encoder), encoder, synth_patch(1, 1), "Flip", grid)


def test_bench_records_and_purity(untrained, tmp_path):
    recs = bench_throughput(untrained, [100, 200, 400], mem_budget=2**30, repeats=1)
    assert [r.batch_size for r in recs] == [100, 200, 400]
    for r in recs:
        assert r.throughput == pytest.approx(r.batch_size / r.seconds)
        assert r.tape_nodes == 0 and r.peak_bytes > 0 and r.workers == 1
    write_bench(recs, tmp_path / "bench.csv", tmp_path / "bench.svg")
    assert (tmp_path / "bench.svg").exists()
    with pytest.raises(EvalContractError):
        bench_throughput(untrained, [200, 100], mem_budget=2**30)
    with pytest.raises(CapacityError):
        bench_throughput(untrained, [1000], mem_budget=1000)


def test_bench_stops_at_budget(untrained):
    first = bench_throughput(untrained, [100], mem_budget=2**30, repeats=1)[0]
    recs = bench_throughput(untrained, [100, 10_000], mem_budget=int(first.peak_bytes * 10), repeats=1)
    assert [r.batch_size for r in recs] == [100]


def _row(fold, strategy, auc, fraction=0.1):
    return {"fold": str(fold), "strategy": strategy, "data_fraction": str(fraction), "resolution": "32",
            "seed": "0", "auc": str(auc)}


def test_strategy_table(tmp_path):
    rows = [_row(0, "base", 0.7), _row(1, "base", 0.7), _row(0, "noise", 0.6), _row(1, "noise", 0.8),
            _row(0, "wsi", 0.9)]
    cells, gains, missing = strategy_table(rows)
    by = {c.strategy: c for c in cells}
    assert by["base"].std == 0.0 and by["base"].mean == pytest.approx(0.7)
    assert by["wsi"].flagged and by["wsi"].mean == 0.9
    assert ("inst", 0.1, 32) in missing
    assert {g["strategy"]: g["gain_over_noise"] for g in gains}["wsi"] == pytest.approx(0.2)
    write_table(cells, gains, tmp_path)
    with (tmp_path / "strategy_table.csv").open() as fh:
        table = list(csv.DictReader(fh))
    assert [r["flag"] for r in table if r["strategy"] == "wsi"] == ["single-fold"]
    assert (tmp_path / "gain_over_noise.csv").exists()
