import numpy as np
import pytest

from latentaug.patchlab import TransformSequence, identity_sequence, sample_sequence, synth_patch
from latentaug.toyencoder import (EncoderContractError, ToyEncoder, cosine, encode, encoder_invariance,
                                  init_encoder, invariance_cosines)


@pytest.fixture(scope="module")
def encoder():
    return ToyEncoder()


@pytest.fixture(scope="module")
def patches():
    return np.stack([synth_patch(100_000 + i, i % 2) for i in range(200)])


def test_deterministic_and_frozen(encoder, patches):
    a, b = encoder(patches[:5]), encoder(patches[:5])
    assert a.tobytes() == b.tobytes()
    assert init_encoder(42).w1.tobytes() == encoder.weights.w1.tobytes()
    with pytest.raises(ValueError):
        encoder.weights.w1[0, 0] = 1.0


def test_weights_are_float32_representable(encoder):
    for arr in encoder.weights.arrays():
        assert np.array_equal(arr, arr.astype(np.float32).astype(np.float64))


def test_single_and_batch_agree(encoder, patches):
    assert encoder(patches[0]).shape == (128,)
    assert np.array_equal(encoder(patches[0]), encoder(patches[:1])[0])


def test_unsupported_resolution():
    with pytest.raises(EncoderContractError):
        encode(init_encoder(), np.zeros((48, 48, 3)))


def test_64px_pipeline_pools_to_32(encoder):
    lo = np.stack([synth_patch(i, i % 2, 32) for i in range(50)])
    hi = np.stack([synth_patch(i, i % 2, 64) for i in range(50)])
    assert cosine(encoder(lo), encoder(hi)).mean() > 0.95


def test_hue_sensitivity(encoder, patches):
    c = cosine(encoder(patches[:100]), encoder.encode_transformed(patches[:100], TransformSequence.of(("Hue", 0.4))))
    assert c.mean() < 0.9


def test_linear_probe_separates_classes(encoder):
    labels = np.arange(2000) % 2
    z = encoder(np.stack([synth_patch(200_000 + i, int(c)) for i, c in enumerate(labels)]))
    assert np.linalg.norm(z[labels == 1].mean(0) - z[labels == 0].mean(0)) > 0
    # least-squares linear classifier, fit on 1500 and scored on 500 held-out embeddings
    x = np.hstack([z, np.ones((len(z), 1))])
    w, *_ = np.linalg.lstsq(x[:1500], 2.0 * labels[:1500] - 1, rcond=None)
    acc = np.mean((x[1500:] @ w > 0) == labels[1500:])
    assert acc >= 0.9


def test_invariance_gate(encoder, patches):
    rng = np.random.default_rng(0)
    assert encoder_invariance(encoder, patches, lambda: sample_sequence(rng, 4)) <= 0.7
    ident = encoder_invariance(encoder, patches, lambda: identity_sequence(sample_sequence(rng, 4)))
    assert ident == pytest.approx(1.0, abs=1e-12)
    fixed = TransformSequence.of(("Contrast", 0.6))
    assert invariance_cosines(encoder, patches, lambda: fixed).std() > 0
    with pytest.raises(EncoderContractError):
        encoder_invariance(encoder, patches[:50], lambda: fixed)
