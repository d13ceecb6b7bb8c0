import numpy as np
import pytest

from lanescope import codec
from lanescope.codec import (ARCHITECTURE, SHAPE_CHAIN, TrainConfig, cae_forward,
                             cae_gradients, cae_init, cae_loss, cae_train)
from lanescope.errors import (EmptyDataset, LengthMismatch, RankDeficient,
                              ShapeError)

from helpers import make_state


def random_fields(n, seed=0, amplitude=0.8):
    rng = np.random.default_rng(seed)
    return rng.uniform(-amplitude, amplitude, size=(n, 13, 17, 2))


def fd_gradient_check(model, batch, n_params=60, step=1e-5, seed=0):
    """Central finite differences against backprop over sampled parameters;
    returns the max relative error."""
    grads_w, grads_b, _ = cae_gradients(model, batch)
    params = model.weights + model.biases
    grads = grads_w + grads_b
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_params):
        p = int(rng.integers(len(params)))
        idx = tuple(int(rng.integers(s)) for s in params[p].shape)
        orig = params[p][idx]
        params[p][idx] = orig + step
        up = cae_loss(model, batch)
        params[p][idx] = orig - step
        down = cae_loss(model, batch)
        params[p][idx] = orig
        fd = (up - down) / (2 * step)
        an = grads[p][idx]
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    return worst


# architecture ---------------------------------------------------------------

def test_parameter_count_matches_layer_table():
    # independent closed-form sum over the declared layer shapes
    expected = 0
    for spec in ARCHITECTURE:
        kh, kw = spec.kernel
        expected += kh * kw * spec.in_channels * spec.out_channels + spec.out_channels
    assert codec.parameter_count(cae_init(0)) == expected


def test_shape_chain():
    # recompute the chain from the kernel arithmetic: valid convs shrink by
    # k-1, valid transposed convs grow by k-1, the same-padded one keeps shape
    h, w = 13, 17
    for spec, expected in zip(ARCHITECTURE, SHAPE_CHAIN[1:]):
        kh, kw = spec.kernel
        if spec.kind == "conv":
            h, w = h - kh + 1, w - kw + 1
        elif spec.kind == "convT":
            h, w = h + kh - 1, w + kw - 1
        assert (h, w, spec.out_channels) == expected

    model = cae_init(1)
    latents, recon = cae_forward(model, random_fields(3))
    assert latents.shape == (3, 8)
    assert recon.shape == (3, 13, 17, 2)


def test_forward_rejects_bad_shape():
    with pytest.raises(ShapeError):
        cae_forward(cae_init(0), np.zeros((2, 12, 17, 2)))


def test_init_deterministic_and_seed_sensitive():
    a, b, c = cae_init(5), cae_init(5), cae_init(6)
    for wa, wb in zip(a.weights, b.weights):
        assert np.array_equal(wa, wb)
    assert any(not np.array_equal(wa, wc) for wa, wc in zip(a.weights, c.weights))
    assert all(np.all(bias == 0) for bias in a.biases)


def test_zero_weight_model_outputs_zero():
    model = cae_init(0)
    for w in model.weights:
        w[:] = 0
    latents, recon = cae_forward(model, random_fields(2))
    assert np.all(latents == 0)
    assert np.all(recon == 0)


# gradients --------------------------------------------------------------------

def test_gradient_check_at_init():
    model = cae_init(3)
    batch = random_fields(2, seed=1)
    assert fd_gradient_check(model, batch, n_params=80) < 1e-4


def test_zero_input_zero_bias_first_layer_gradient():
    model = cae_init(2)
    grads_w, _, _ = cae_gradients(model, np.zeros((2, 13, 17, 2)))
    assert np.all(grads_w[0] == 0)


def test_duplicated_sample_same_gradient():
    model = cae_init(4)
    single = random_fields(1, seed=5)
    doubled = np.concatenate([single, single])
    gw1, gb1, loss1 = cae_gradients(model, single)
    gw2, gb2, loss2 = cae_gradients(model, doubled)
    assert loss1 == pytest.approx(loss2, rel=1e-12)
    for a, b in zip(gw1 + gb1, gw2 + gb2):
        assert np.allclose(a, b, rtol=1e-12, atol=1e-15)


# training ------------------------------------------------------------------------

def test_train_memorizes_single_sample():
    model = cae_init(7)
    data = random_fields(1, seed=2, amplitude=0.6)
    cfg = TrainConfig(batch_size=1, max_iterations=500, seed=0, auto_scale=False)
    trained, history = cae_train(model, data, cfg)
    assert history[-1] < 1e-4
    assert trained.iterations_trained == 500


def test_zero_learning_rate_is_a_no_op():
    model = cae_init(8)
    data = random_fields(16, seed=3)
    # full-dataset batches so every iteration sees the same loss
    cfg = TrainConfig(batch_size=16, max_iterations=20, lr=0.0, auto_scale=False)
    trained, history = cae_train(model, data, cfg)
    for a, b in zip(model.weights, trained.weights):
        assert np.array_equal(a, b)
    assert max(history) - min(history) < 1e-15  # float summation order only


def test_train_deterministic():
    data = random_fields(32, seed=4)
    cfg = TrainConfig(batch_size=16, max_iterations=30, seed=9)
    _, h1 = cae_train(cae_init(1), data, cfg)
    _, h2 = cae_train(cae_init(1), data, cfg)
    assert h1 == h2


def test_train_empty_dataset():
    with pytest.raises(EmptyDataset):
        cae_train(cae_init(0), np.zeros((0, 13, 17, 2)))


def test_auto_scale_sets_input_scale():
    data = 5.0 * random_fields(8, seed=6)
    trained, _ = cae_train(cae_init(0), data,
                           TrainConfig(batch_size=4, max_iterations=5))
    assert trained.input_scale == pytest.approx(0.9 / np.abs(data).max())


def test_checkpoint_roundtrip(tmp_path):
    model, _ = cae_train(cae_init(11), random_fields(8, seed=7),
                         TrainConfig(batch_size=4, max_iterations=10))
    path = tmp_path / "cae.json"
    codec.save_checkpoint(model, path)
    back = codec.load_checkpoint(path)
    assert back.seed == model.seed
    assert back.input_scale == model.input_scale
    assert back.iterations_trained == model.iterations_trained
    for a, b in zip(model.weights + model.biases, back.weights + back.biases):
        assert np.array_equal(a, b)
    lat1, _ = cae_forward(model, random_fields(2, seed=8))
    lat2, _ = cae_forward(back, random_fields(2, seed=8))
    assert np.array_equal(lat1, lat2)


# linear fallback ---------------------------------------------------------------

def test_linear_fallback_identical_fields_rank_deficient():
    data = np.tile(random_fields(1, seed=9), (10, 1, 1, 1))
    with pytest.raises(RankDeficient):
        codec.linear_fallback_fit(data, k=8)


def test_linear_fallback_error_nonincreasing_in_k():
    data = random_fields(60, seed=10)
    errors = []
    for k in (2, 4, 8, 16):
        proj = codec.linear_fallback_fit(data, k=k)
        recon = codec.linear_fallback_decode(proj, codec.linear_fallback_encode(proj, data))
        errors.append(float(np.mean((recon - data) ** 2)))
    assert all(a >= b for a, b in zip(errors, errors[1:]))


def test_linear_fallback_full_basis_lossless():
    data = random_fields(450, seed=11)
    proj = codec.linear_fallback_fit(data, k=codec.FIELD_SIZE)
    recon = codec.linear_fallback_decode(proj, codec.linear_fallback_encode(proj, data))
    assert np.max(np.abs(recon - data)) < 1e-9


def test_projection_roundtrip(tmp_path):
    data = random_fields(40, seed=12)
    proj = codec.linear_fallback_fit(data, k=8)
    path = tmp_path / "projection.json"
    codec.save_projection(proj, path)
    back = codec.load_projection(path)
    assert np.array_equal(back.mean, proj.mean)
    assert np.array_equal(back.components, proj.components)


# features --------------------------------------------------------------------------

def test_build_features():
    states = [make_state(frame=t, vx=30.0 + t, vy=0.1 * t, ax=0.2, ay=-0.1)
              for t in range(100)]
    latents = np.arange(800, dtype=float).reshape(100, 8)
    seq = codec.build_features(states, latents)
    assert seq.values.shape == (100, 12)
    assert np.array_equal(seq.values[:, 4:], latents)
    assert seq.values[3, 0] == 33.0
    with pytest.raises(LengthMismatch):
        codec.build_features(states, latents[:99])


def test_standardize():
    rng = np.random.default_rng(13)
    values = rng.normal(3.0, 2.5, size=(500, 12))
    values[:, 7] = 4.2  # constant dimension
    from lanescope.core import FeatureSequence
    seq = FeatureSequence(values=values, frames=np.arange(500))
    out, std = codec.standardize(seq)
    assert np.abs(out.values.mean(axis=0)).max() < 1e-10
    variances = out.values.var(axis=0)
    nonconstant = [i for i in range(12) if i != 7]
    assert np.abs(variances[nonconstant] - 1).max() < 1e-8
    assert std.scale[7] == 1.0
    assert np.abs(out.values[:, 7]).max() < 1e-12
    restored = std.inverse(out.values)
    assert np.allclose(restored, values, atol=1e-12)
