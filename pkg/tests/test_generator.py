import numpy as np
import pytest

from latentaug import tensorcore as tc
from latentaug.generator import (ABLATION_CONFIGS, CapacityError, GeneratorConfig, TrainConfig, TrainingError,
                                 augment_batch, chunk, embed_steps, forward, generator_loss, init_generator, loss,
                                 lr_at, sinusoidal_pe, train_generator)
from latentaug.patchlab import TransformSequence, identity_sequence, sample_sequence, synth_patch
from latentaug.toyencoder import ToyEncoder
from oracles import numeric_grad, rel_err

TOY = GeneratorConfig(d=8, C=2, L=2, heads=2, k_max=2, ffn_mult=2)


def _randomize(model, rng, scale=0.5):
    for p in model.parameters():
        p.data = rng.normal(0, scale, size=p.shape)
    return model


def test_config_validation():
    with pytest.raises(tc.DimensionError):
        GeneratorConfig(d=10, C=4)
    with pytest.raises(tc.DimensionError):
        GeneratorConfig(d=128, C=4, heads=3)


def test_chunk_examples():
    z = np.arange(1.0, 7.0)
    assert np.array_equal(chunk(z, 2, positional=False), [[1, 2, 3], [4, 5, 6]])
    assert chunk(np.zeros(1024), 8).shape == (8, 128)
    np.testing.assert_array_equal(chunk(z, 1)[0], z + sinusoidal_pe(1, 6)[0])
    assert np.array_equal(chunk(z, 2, positional=False).reshape(-1), z)
    with pytest.raises(tc.DimensionError):
        chunk(np.zeros(10), 3)


def test_embed_steps_examples(rng):
    model = init_generator(TOY, rng)
    for p in model.parameters():
        p.data = np.zeros(p.shape)
    tokens, _ = embed_steps(model, TransformSequence.of(("Hue", 0.3), ("Gamma", 1.2)))
    assert np.array_equal(tokens.data, np.zeros((1, 2, 4)))

    model = _randomize(init_generator(TOY, rng), rng)
    tokens, _ = embed_steps(model, TransformSequence.of(("Hue", 0.0), ("Gamma", 1.0)))
    np.testing.assert_array_equal(tokens.data[0], model["order"].data[:2])

    a, _ = embed_steps(model, TransformSequence.of(("Hue", 0.3), ("Gamma", 1.2)))
    b, _ = embed_steps(model, TransformSequence.of(("Gamma", 1.2), ("Hue", 0.3)))
    rows = lambda t: sorted(map(tuple, np.round(t.data[0], 12)))
    assert rows(a) != rows(b)

    with pytest.raises(CapacityError):
        embed_steps(model, TransformSequence.of(("Hue", 0.1), ("Gamma", 1.1), ("Contrast", 0.9)))


def test_output_shape_and_batch_purity(rng):
    cfg = GeneratorConfig()
    model = init_generator(cfg, rng)
    z = rng.standard_normal(128)
    for k in range(1, cfg.k_max + 1):
        seq = sample_sequence(np.random.default_rng(k), k)
        assert forward(model, z, [seq]).shape == (1, 128)
    seq = TransformSequence.of(("Hue", 0.2), ("Crop", "tl"))
    out = augment_batch(model, np.tile(z, (6, 1)), [seq] * 6)
    assert all(out[i].tobytes() == out[0].tobytes() for i in range(6))


def test_shared_mode_matches_independent_calls(rng):
    model = init_generator(GeneratorConfig(), rng)
    zs = rng.standard_normal((7, 128))
    seq = TransformSequence.of(("Contrast", 1.3), ("Flip", "v"))
    shared = augment_batch(model, zs, seq)
    single = np.concatenate([augment_batch(model, zs[i:i + 1], [seq]) for i in range(7)])
    assert shared.tobytes() == single.tobytes()
    assert np.array_equal(augment_batch(model, zs[:1], [seq]), forward(model, zs[:1], [seq]).data)


def test_augment_batch_records_no_tape(rng):
    model = init_generator(GeneratorConfig(), rng)
    before = tc.tape_stats()["nodes"]
    augment_batch(model, rng.standard_normal((3, 128)), TransformSequence.of(("Hue", 0.1)))
    assert tc.tape_stats()["nodes"] == before
    with pytest.raises(tc.DimensionError):
        augment_batch(model, rng.standard_normal((3, 64)), TransformSequence.of(("Hue", 0.1)))


def test_loss_identities(rng):
    model = init_generator(TOY, rng)
    z, zt = rng.standard_normal((3, 8)), rng.standard_normal((3, 8))
    seqs = [sample_sequence(rng, 2) for _ in range(3)]
    full = generator_loss(model, z, zt, seqs, lambda_id=1.0)
    none = generator_loss(model, z, zt, seqs, lambda_id=0.0)
    double = generator_loss(model, z, zt, seqs, lambda_id=2.0)
    assert none.total.item() == pytest.approx(none.reconstruction.item(), abs=0)
    assert double.total.item() - full.total.item() == pytest.approx(full.identity.item(), rel=1e-12)
    out = forward(model, np.concatenate([z, z]), seqs + [identity_sequence(s) for s in seqs]).data
    perfect = generator_loss(model, z, out[:3], seqs)
    assert perfect.reconstruction.item() == pytest.approx(0.0, abs=1e-12)


def test_single_patch_loss_uses_encoder(rng):
    enc = ToyEncoder()
    model = init_generator(GeneratorConfig(), rng)
    x = synth_patch(1, 0)
    seq = TransformSequence.of(("Hue", 0.25))
    parts = loss(model, x, seq, enc)
    z = enc(x)
    expected = np.linalg.norm(forward(model, z, [seq]).data - enc.encode_transformed(x[None], seq))
    assert parts.reconstruction.item() == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_full_loss_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    model = _randomize(init_generator(TOY, rng), rng)
    z, zt = rng.standard_normal((3, 8)), rng.standard_normal((3, 8))
    seqs = [sample_sequence(rng, 2) for _ in range(3)]
    tc.backward(generator_loss(model, z, zt, seqs).total)
    for name, p in model.params.items():
        with tc.no_grad():
            num = numeric_grad(lambda: generator_loss(model, z, zt, seqs).total.item(), p.data, eps=1e-5)
        assert rel_err(p.grad, num) <= 1e-3, name


def test_lr_schedule():
    tcfg = TrainConfig(steps=1000, lr=1e-3, warmup=100, final_lr_frac=0.05)
    assert lr_at(0, tcfg) == pytest.approx(1e-5)
    assert lr_at(99, tcfg) == pytest.approx(1e-3)
    assert lr_at(999, tcfg) == pytest.approx(5e-5, rel=1e-3)
    assert all(lr_at(s, tcfg) >= lr_at(s + 1, tcfg) for s in range(100, 999))


def test_training_reduces_loss_and_is_deterministic():
    enc = ToyEncoder()
    patches = np.stack([synth_patch(300_000 + i, i % 2) for i in range(64)])
    cfg = GeneratorConfig(k_max=2)
    tcfg = TrainConfig(steps=2000, batch_size=64)
    model, log = train_generator(cfg, patches, enc, tcfg, np.random.default_rng(0))
    assert np.mean(log.loss[-100:]) < 0.25 * np.mean(log.loss[:10])
    short = TrainConfig(steps=5, batch_size=8)
    a, _ = train_generator(cfg, patches, enc, short, np.random.default_rng(3))
    b, _ = train_generator(cfg, patches, enc, short, np.random.default_rng(3))
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a.params)


def test_zero_steps_returns_initialization():
    cfg = GeneratorConfig()
    init = init_generator(cfg, np.random.default_rng(9))
    model, log = train_generator(cfg, np.zeros((4, 32, 32, 3)), ToyEncoder(), TrainConfig(steps=0),
                                 np.random.default_rng(9))
    assert not log.loss
    assert all(model[k].data.tobytes() == init[k].data.tobytes() for k in init.params)


def test_divergence_reports_step(rng):
    enc = ToyEncoder()
    patches = np.stack([synth_patch(i, i % 2) for i in range(8)])
    model = init_generator(GeneratorConfig(), rng)
    model["head.b2"].data = np.full(128, np.nan)
    with pytest.raises(TrainingError, match="step 0"):
        train_generator(GeneratorConfig(), patches, enc, TrainConfig(steps=3, batch_size=4), rng, model=model)


def test_ablation_pair_has_matched_budget(rng):
    counts = [init_generator(c, rng).param_count for c in ABLATION_CONFIGS]
    assert [c.C for c in ABLATION_CONFIGS] == [4, 1]
    assert abs(counts[0] - counts[1]) / max(counts) < 0.02
