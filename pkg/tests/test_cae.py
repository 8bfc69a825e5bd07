import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tooluse import cae as C
from tooluse.numerics import DimensionError, finite_diff_check

TINY = C.CaeConfig(image_width=9, image_height=7, channels=3, feature_dim=3,
                   conv_layers=[(2, 3, 2)], fc_layers=[5])


def images(n, cfg=TINY, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (n, cfg.channels, cfg.image_height,
                                                      cfg.image_width))


# -- configuration and shapes ----------------------------------------------

def test_default_and_large_configs():
    assert C.CaeConfig().conv_shapes()[-1] == (32, 3, 5)
    big = C.CaeConfig.paper()
    assert (big.image_width, big.image_height, big.feature_dim) == (64, 48, 20)
    assert big.fc_widths()[-1] == 20


@pytest.mark.parametrize("kw", [dict(feature_dim=0), dict(hidden_activation="relu"),
                                dict(conv_layers=[(4, 30, 2)])])
def test_config_rejects_invalid(kw):
    with pytest.raises(ValueError):
        C.CaeConfig(**kw)


def test_large_encode_gives_twenty_features():
    cfg = C.CaeConfig.paper()
    p = C.init_params(cfg, seed=0)
    z = C.encode(np.full((3, 48, 64), 0.5), p, cfg)
    assert z.shape == (20,)
    assert C.decode(z, p, cfg).shape == (3, 48, 64)


def test_zero_params():
    cfg = C.CaeConfig()
    p = C.init_params(cfg, zero=True)
    assert not C.encode(np.zeros((3, 24, 32)), p, cfg).any()
    assert np.all(C.decode(np.zeros(20), p, cfg) == 0.5)


def test_encode_is_pure():
    cfg = C.CaeConfig()
    p = C.init_params(cfg, seed=1)
    x = images(1, cfg)[0]
    assert np.array_equal(C.encode(x, p, cfg), C.encode(x.copy(), p, cfg))
    batch = C.encode(np.stack([x, x]), p, cfg)
    assert np.array_equal(batch[0], batch[1])


def test_shape_errors():
    cfg = C.CaeConfig()
    p = C.init_params(cfg, seed=0)
    with pytest.raises(DimensionError):
        C.encode(np.zeros((3, 24, 31)), p, cfg)
    with pytest.raises(DimensionError):
        C.decode(np.zeros(19), p, cfg)


@settings(max_examples=20, deadline=None)
@given(w=st.integers(8, 40), h=st.integers(8, 40), k=st.integers(2, 5), s=st.integers(1, 3),
       layers=st.integers(1, 2))
def test_decoder_mirrors_encoder(w, h, k, s, layers):
    try:
        cfg = C.CaeConfig(image_width=w, image_height=h, feature_dim=4,
                          conv_layers=[(2, k, s)] * layers, fc_layers=[6])
    except ValueError:
        return
    p = C.init_params(cfg, seed=0)
    x = np.full((3, h, w), 0.3)
    assert C.reconstruct(x, p, cfg).shape == x.shape


# -- gradients and training -------------------------------------------------

def test_loss_gradients_match_finite_differences():
    x = images(2)
    p = C.init_from_data(x, TINY, seed=3)
    for t in p.tensors()[:-2]:
        t += np.random.default_rng(4).normal(0, 0.05, t.shape)
    scale = 1.0 / x.size
    _, grads = C.loss_and_grads(x, p, TINY, scale)
    rep = finite_diff_check(lambda: C.loss_and_grads(x, p, TINY, scale)[0],
                            p.tensors()[:-1], grads.tensors()[:-1])
    assert rep.max_relative_error < 1e-4
    assert not grads.input_mean.any()


def test_single_image_is_memorised():
    cfg = C.CaeConfig()
    x = images(1, cfg, seed=5)
    p, curve = C.train_cae(x, cfg, C.CaeTrainConfig(iterations=500, seed=0))
    assert C.reconstruction_mse(x, p, cfg) < 0.01
    assert p.iterations == 500 and len(curve) == 500


def test_zero_iterations_rejected():
    with pytest.raises(ValueError):
        C.CaeTrainConfig(iterations=0)


@pytest.mark.parametrize("threads", [1, 3])
def test_training_bit_deterministic(threads):
    x = images(10)
    tc = C.CaeTrainConfig(iterations=15, batch_size=6, chunk_size=2, seed=9, threads=threads)
    base = C.train_cae(x, TINY, C.CaeTrainConfig(iterations=15, batch_size=6, chunk_size=2,
                                                 seed=9))
    p, curve = C.train_cae(x, TINY, tc)
    assert np.array_equal(curve, base[1])
    assert C.to_bytes(p, TINY) == C.to_bytes(base[0], TINY)


def test_full_batch_loss_settles_monotonically():
    x = images(6, seed=6)
    tc = C.CaeTrainConfig(iterations=1, optimizer="momentum", alpha=0.5, momentum=0.5,
                          batch_size=6, seed=0)
    p = C.init_from_data(x, TINY, seed=0)
    mse = [C.reconstruction_mse(x, p, TINY)]
    for _ in range(600):
        p, _ = C.train_cae(x, TINY, tc, params=p)
        mse.append(C.reconstruction_mse(x, p, TINY))
    mse = np.array(mse)
    start = int(np.argmax(mse < 10 * mse[0]))
    for i in range(start, len(mse) - 100):
        assert mse[i + 100] <= mse[i]


# -- features --------------------------------------------------------------

def test_rescale_round_trip_and_degenerate_range():
    rng = np.random.default_rng(7)
    raw = rng.normal(size=(50, 4))
    raw[:, 2] = 1.5
    lo, hi = raw.min(axis=0), raw.max(axis=0)
    scaled = C.rescale(raw, lo, hi)
    assert np.all(scaled[:, 2] == 0.0)
    assert scaled.min() == -1.0 and scaled.max() == 1.0
    back = C.inverse_rescale(scaled, lo, hi)
    np.testing.assert_allclose(back[:, [0, 1, 3]], raw[:, [0, 1, 3]], atol=1e-9)


def test_extract_feature_sequences():
    cfg = C.CaeConfig()
    x = np.random.default_rng(8).uniform(0, 1, (4, 6, 3, 24, 32))
    p = C.init_params(cfg, seed=0)
    p.iterations = 1
    fs = C.extract_feature_sequences(x, p, cfg)
    assert fs.features.shape == (4, 6, 20)
    assert np.all(np.abs(fs.features) <= 1.0)
    assert not fs.untrained
    np.testing.assert_allclose(fs.inverse(fs.features).reshape(-1, 20),
                               C.encode(x.reshape(-1, 3, 24, 32), p, cfg), atol=1e-9)
    clipped = C.encode_scaled(np.zeros((3, 24, 32)), p, cfg, fs)
    assert np.all(np.abs(clipped) <= 1.0)


def test_untrained_extraction_warns():
    cfg = C.CaeConfig()
    x = np.zeros((1, 2, 3, 24, 32))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fs = C.extract_feature_sequences(x, C.init_params(cfg), cfg)
    assert fs.untrained and any("untrained" in str(w.message) for w in caught)


# -- serialization ---------------------------------------------------------

def test_model_bytes_round_trip():
    p = C.init_from_data(images(3), TINY, seed=2)
    p.iterations = 7
    blob = C.to_bytes(p, TINY)
    q, cfg = C.from_bytes(blob)
    assert cfg == TINY and q.iterations == 7
    assert C.to_bytes(q, cfg) == blob
    with pytest.raises(ValueError, match="magic"):
        C.from_bytes(b"NOPE" + blob[4:])
    with pytest.raises(ValueError):
        C.from_bytes(blob + b"\0")
