import math

import numpy as np
import pytest

from umamba.errors import ConfigError, DataError
from umamba.model import (ModelConfig, NormStats, count_parameters, decode, decoder_extents, encode,
                          forecast, init_model, load_checkpoint, model_forward, revin_denorm,
                          revin_norm, save_checkpoint, tokenize)

import gradcases

SMALL = ModelConfig(L=16, T=8, N=3, scales=(24, 12, 6), K=2, d_state=2, dropout=0.0)


def zeroed(params, prefix=""):
    for k, p in params.items():
        if k.startswith(prefix):
            p.data = np.zeros(p.shape)
    return params


def mamba_count(d_model, expand, d_state, conv_width):
    di = expand * d_model
    r = math.ceil(d_model / 16)
    return 2 * d_model * di + di * (conv_width + 1) + 2 * di * r + di + 3 * di * d_state + di \
        + di * d_model + d_model


def model_count(cfg):
    M = cfg.scales
    total = cfg.L * M[0] + M[0]
    total += sum(M[i - 1] * M[i] + M[i] for i in range(1, len(M)))
    width = {"integration": cfg.N, "parallel": None, "independence": 1}[cfg.channel_mode]
    for m in M:
        total += cfg.K * mamba_count(1, cfg.expand, cfg.d_state, cfg.conv_width)
        total += mamba_count(width or m, cfg.expand, cfg.d_state, cfg.conv_width)
    widths = [M[-1]] + [2 * m for m in reversed(M[:-1])]
    targets = list(reversed(M[:-1])) + [cfg.T]
    total += sum(a * b + b for a, b in zip(widths, targets))
    return total


# instance normalization


def test_revin_constant_channel():
    Xn, stats = revin_norm(np.array([[5.0, 5.0, 5.0, 5.0]]))
    assert Xn.tolist() == [[0.0, 0.0, 0.0, 0.0]]
    assert stats.std.item() == 1e-5


def test_revin_two_points():
    Xn, stats = revin_norm(np.array([[1.0, 3.0]]))
    assert stats.mean.item() == 2.0 and stats.std.item() == 1.0
    assert Xn.tolist() == [[-1.0, 1.0]]


def test_denorm_examples():
    stats = NormStats(np.array([[2.0]]), np.array([[1.0]]))
    assert revin_denorm(np.array([[-1.0, 1.0]]), stats).tolist() == [[1.0, 3.0]]
    ident = NormStats(np.zeros((2, 1)), np.ones((2, 1)))
    Y = np.array([[0.5, -2.0], [3.0, 4.0]])
    assert np.array_equal(revin_denorm(Y, ident), Y)
    means = NormStats(np.array([[1.5], [-4.0]]), np.array([[2.0], [3.0]]))
    assert revin_denorm(np.zeros((2, 3)), means).tolist() == [[1.5] * 3, [-4.0] * 3]


def test_revin_round_trip(rng):
    X = rng.normal(3.0, 5.0, size=(4, 7, 96))
    Xn, stats = revin_norm(X)
    assert np.max(np.abs(revin_denorm(Xn, stats) - X)) < 1e-6


def test_denorm_shape_mismatch():
    with pytest.raises(ValueError):
        revin_denorm(np.zeros((3, 4)), NormStats(np.zeros((2, 1)), np.ones((2, 1))))


# tokenizer


def test_tokenizer_embedded_identity(rng):
    cfg = ModelConfig(L=4, T=2, N=2, scales=(6, 4), K=1, d_state=2)
    params = init_model(cfg, rng)
    params["tok.w"].data = np.hstack([np.eye(4), np.zeros((4, 2))])
    params["tok.b"].data = np.zeros(6)
    X = rng.normal(size=(2, 4))
    assert np.array_equal(tokenize(X, params, cfg).data[:, :4], X)


def test_tokenizer_bias_only(rng):
    cfg = ModelConfig(L=4, T=2, N=3, scales=(6, 4), K=1, d_state=2)
    params = init_model(cfg, rng)
    params["tok.w"].data[:] = 0.0
    out = tokenize(rng.normal(size=(3, 4)), params, cfg).data
    assert np.array_equal(out, np.tile(params["tok.b"].data, (3, 1)))


def test_tokenizer_matmul_oracle(rng):
    params = init_model(SMALL, rng)
    X = rng.normal(size=(3, 16))
    ref = X @ params["tok.w"].data + params["tok.b"].data
    assert np.allclose(tokenize(X, params, SMALL).data, ref, atol=1e-14)


def test_tokenizer_warns_without_expansion(rng):
    with pytest.warns(UserWarning):
        init_model(ModelConfig(L=16, T=4, N=1, scales=(8, 4), K=1, d_state=2), rng)


# encoder and decoder


def test_encoder_shapes_three_scales(rng):
    cfg = ModelConfig(L=96, T=96, N=7, scales=(256, 128, 64), K=1, d_state=2)
    params = init_model(cfg, rng)
    Xn, _ = revin_norm(rng.normal(size=(7, 96)))
    feats = encode(tokenize(Xn, params, cfg), params, cfg)
    assert [x.shape for x in feats.encoder] == [(7, 256), (7, 128), (7, 64)]
    assert [x.shape for x in feats.skips] == [(7, 256), (7, 128), (7, 64)]


def test_encoder_eval_mode_repeatable(rng):
    params = init_model(SMALL, rng)
    tokens = tokenize(rng.normal(size=(3, 16)), params, SMALL)
    a = encode(tokens, params, SMALL, training=False)
    b = encode(tokens, params, SMALL, training=False)
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.skips, b.skips))


def test_zero_mtsp_skips_equal_encoder(rng):
    params = zeroed(init_model(SMALL, rng), "mtsp.")
    feats = encode(tokenize(rng.normal(size=(3, 16)), params, SMALL), params, SMALL)
    assert all(np.array_equal(x.data, m.data) for x, m in zip(feats.encoder, feats.skips))


def test_decoder_extents_two_scales(rng):
    cfg = ModelConfig(L=96, T=96, N=7, scales=(128, 64), K=1, d_state=2)
    assert decoder_extents(cfg) == [(64, 128), (256, 96)]
    params = init_model(cfg, rng)
    Xn, _ = revin_norm(rng.normal(size=(7, 96)))
    feats = encode(tokenize(Xn, params, cfg), params, cfg)
    out = decode(feats, params, cfg)
    assert [d.shape for d in feats.decoder] == [(7, 64), (7, 128), (7, 96)]
    assert out.shape == (7, 96)


def test_decoder_extents_three_scales():
    cfg = ModelConfig(L=96, T=192, N=7, scales=(256, 128, 64), K=1, d_state=2)
    assert decoder_extents(cfg) == [(64, 128), (256, 256), (512, 192)]


def test_zero_decoder_outputs_zero(rng):
    params = zeroed(init_model(SMALL, rng), "dec.")
    feats = encode(tokenize(rng.normal(size=(3, 16)), params, SMALL), params, SMALL)
    assert not decode(feats, params, SMALL).data.any()


# forecast


def test_zero_network_forecasts_lookback_mean(rng):
    params = zeroed(init_model(SMALL, rng))
    X = rng.normal(2.0, 3.0, size=(3, 16))
    Y = forecast(X, params, SMALL).data
    assert np.allclose(Y, np.repeat(X.mean(axis=1, keepdims=True), 8, axis=1), atol=1e-12)


def test_forecast_shape_and_determinism(rng):
    cfg = ModelConfig(L=96, T=96, N=7, scales=(128, 64), K=1, d_state=2)
    params = init_model(cfg, rng)
    X = rng.normal(size=(7, 96))
    a, b = forecast(X, params, cfg).data, forecast(X, params, cfg).data
    assert a.shape == (7, 96)
    assert a.tobytes() == b.tobytes()


def test_shift_equivariance(rng):
    params = init_model(SMALL, rng)
    X = rng.normal(size=(5, 3, 16))
    c = rng.uniform(-50, 50, size=(1, 3, 1))
    diff = forecast(X + c, params, SMALL).data - (forecast(X, params, SMALL).data + c)
    assert np.max(np.abs(diff)) < 1e-6


@pytest.mark.parametrize("a", [0.5, 2.0, 10.0])
def test_scale_equivariance(rng, a):
    params = init_model(SMALL, rng)
    X = rng.normal(size=(3, 16))
    X -= X.mean(axis=1, keepdims=True)
    diff = forecast(a * X, params, SMALL).data - a * forecast(X, params, SMALL).data
    assert np.max(np.abs(diff)) < 1e-5


def test_non_finite_input_names_position(rng):
    X = rng.normal(size=(3, 16))
    X[2, 9] = np.nan
    with pytest.raises(DataError, match="channel 2, position 9"):
        forecast(X, init_model(SMALL, rng), SMALL)


def test_training_dropout_needs_rng(rng):
    cfg = ModelConfig(**{**SMALL.to_dict(), "dropout": 0.2})
    with pytest.raises(ValueError):
        forecast(rng.normal(size=(3, 16)), init_model(cfg, rng), cfg, training=True)


# parameters and config


@pytest.mark.parametrize("mode", ["integration", "parallel", "independence"])
def test_parameter_count_oracle(rng, mode):
    cfg = ModelConfig(L=16, T=8, N=3, scales=(24, 12, 6), K=2, d_state=2, channel_mode=mode)
    assert count_parameters(init_model(cfg, rng)) == model_count(cfg)


def test_parameter_count_independent_of_data(rng):
    params = init_model(SMALL, rng)
    before = count_parameters(params)
    forecast(rng.normal(size=(3, 16)), params, SMALL)
    assert count_parameters(params) == before


@pytest.mark.parametrize("bad", [dict(scales=(12, 12)), dict(scales=(12, 3)), dict(scales=()),
                                 dict(K=0), dict(channel_mode="mixed"), dict(dropout=1.0),
                                 dict(d_state=17), dict(L=1), dict(skip_path="both")])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        ModelConfig(**{**dict(L=8, T=4, N=2, scales=(12, 6)), **bad})


def test_config_dict_round_trip():
    assert ModelConfig.from_dict(SMALL.to_dict()) == SMALL
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({**SMALL.to_dict(), "bogus": 1})


def test_flags_change_structure(rng):
    cfg = ModelConfig(**{**SMALL.to_dict(), "extra_projection": True, "per_channel_tokenizer": True})
    params = init_model(cfg, rng)
    assert params["proj.w"].shape == (8, 8)
    assert params["tok.w"].shape == (3, 16, 24)
    assert forecast(rng.normal(size=(2, 3, 16)), params, cfg).shape == (2, 3, 8)


def test_single_scale_wiring(rng):
    cfg = ModelConfig(L=8, T=4, N=2, scales=(12,), K=1, d_state=2)
    assert decoder_extents(cfg) == [(24, 4)]
    assert forecast(rng.normal(size=(2, 8)), init_model(cfg, rng), cfg).shape == (2, 4)


def test_linear_kind(rng):
    cfg = ModelConfig(L=8, T=4, N=2, scales=(12, 6), kind="linear")
    params = init_model(cfg, rng)
    assert set(params) == {"head.w", "head.b"}
    assert forecast(rng.normal(size=(2, 8)), params, cfg).shape == (2, 4)


def test_revin_affine_identity_at_init(rng):
    plain = init_model(SMALL, np.random.default_rng(3))
    cfg = ModelConfig(**{**SMALL.to_dict(), "revin_affine": True})
    affine = init_model(cfg, np.random.default_rng(3))
    X = rng.normal(size=(3, 16))
    assert np.allclose(forecast(X, affine, cfg).data, forecast(X, plain, SMALL).data, atol=1e-9)


# checkpoints


def test_checkpoint_byte_round_trip(tmp_path, rng):
    params = init_model(SMALL, rng)
    blob = save_checkpoint(tmp_path / "a.umts", params, SMALL, {"seed": 3})
    loaded, cfg, meta = load_checkpoint(tmp_path / "a.umts")
    assert cfg == SMALL.to_dict() and meta == {"seed": 3}
    assert save_checkpoint(None, loaded, cfg, meta) == blob
    for k, p in params.items():
        assert np.array_equal(loaded[k].data, p.data.astype(np.float32).astype(np.float64))


def test_checkpoint_layout(rng):
    blob = save_checkpoint(None, init_model(SMALL, rng), SMALL)
    assert blob[:4] == b"UMTS"
    assert int.from_bytes(blob[4:8], "little") == 1


@pytest.mark.parametrize("mangle", [lambda b: b"XXXX" + b[4:], lambda b: b[:-8]])
def test_corrupt_checkpoint(rng, mangle):
    blob = save_checkpoint(None, init_model(SMALL, rng), SMALL)
    with pytest.raises(DataError):
        load_checkpoint(mangle(blob))


def test_model_gradient_one_seed():
    # randomized parameters avoid the near-zero gradients of the initializer
    err = gradcases.case_full_model(np.random.default_rng(2), per_tensor=1, randomized=True)
    assert np.isfinite(err)


def test_model_forward_rejects_wrong_shape(rng):
    with pytest.raises(ValueError):
        model_forward(rng.normal(size=(3, 15)), init_model(SMALL, rng), SMALL)
