"""Differentiable-substrate tests: forwards, gradients, optimizer, checkpoints."""

import numpy as np
import pytest

from v2a import rng as vrng
from v2a.difffn import (
    GaussianHead,
    MLPApproximator,
    MomentState,
    ParamVector,
    RecurrentEncoder,
    build_params,
    forward,
    gaussian_log_density,
    gradient,
    load_params,
    load_sidecar,
    save_params,
    sgd_step,
)
from v2a.difffn import autodiff as ad
from v2a.errors import ConfigError, NumericError


def finite_difference(loss_value_fn, values: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Independent central-difference gradient oracle."""
    g = np.zeros_like(values)
    for i in range(values.size):
        up = values.copy()
        up[i] += step
        dn = values.copy()
        dn[i] -= step
        g[i] = (loss_value_fn(up) - loss_value_fn(dn)) / (2 * step)
    return g


def rel_err(a, b):
    denom = np.maximum(np.abs(a) + np.abs(b), 1e-8)
    return np.abs(a - b) / denom


# ---------------------------------------------------------------------------
# forward


def test_forward_single_linear_layer_affine_map():
    net = MLPApproximator((1, 1), "f")
    params = ParamVector(np.array([2.0, 1.0]), {"f": (0, 2)})
    assert forward(net, params, np.array([[3.0]]))[0, 0] == pytest.approx(7.0, abs=1e-12)


def test_forward_zero_head_gives_zero():
    net = MLPApproximator((4, 8, 3), "f")
    params = ParamVector(np.zeros(net.n_params), {"f": (0, net.n_params)})
    out = forward(net, params, np.ones((2, 4)))
    assert np.all(out == 0.0)


def test_forward_matches_hand_unrolled_two_layer_net():
    rng = vrng.generator(7, "fwd")
    net = MLPApproximator((3, 5, 2), "f")
    params = build_params([net], rng)
    x = rng.normal(size=(4, 3))
    out = forward(net, params, x)

    # straight-line re-evaluation of the same weights
    theta = params.segment("f")
    w1 = theta[:15].reshape(3, 5)
    b1 = theta[15:20]
    w2 = theta[20:30].reshape(5, 2)
    b2 = theta[30:32]
    expect = np.maximum(x @ w1 + b1, 0.0) @ w2 + b2
    assert np.allclose(out, expect, atol=1e-14)


def test_forward_shape_mismatch_raises():
    net = MLPApproximator((3, 5, 2), "f")
    params = build_params([net], vrng.generator(0, "x"))
    with pytest.raises(ConfigError):
        forward(net, params, np.ones((2, 4)))


def test_recurrent_encoder_consumes_whole_sequence():
    rng = vrng.generator(3, "rnn")
    enc = RecurrentEncoder(6, 8, 2, "enc")
    params = build_params([enc], rng)
    steps = rng.normal(size=(11, 6))
    head = enc.forward(params, steps)
    assert head.mean.shape == (2,) and head.log_variance.shape == (2,)
    # a different prefix length gives a different head: every step is consumed
    head_short = enc.forward(params, steps[:5])
    assert not np.allclose(head.mean, head_short.mean)


def test_recurrent_logvar_clamped():
    enc = RecurrentEncoder(2, 4, 3, "enc")
    params = build_params([enc], vrng.generator(0, "c"))
    # push the head bias far out of range
    params.segment("enc")[-3:] = 100.0
    head = enc.forward(params, np.ones((4, 2)))
    assert np.all(head.log_variance <= 4.0) and np.all(head.log_variance >= -10.0)


def test_recurrent_batch_matches_sequential():
    rng = vrng.generator(5, "rnnb")
    enc = RecurrentEncoder(4, 6, 2, "enc")
    params = build_params([enc], rng)
    seqs = [rng.normal(size=(t, 4)) for t in (3, 7, 5)]
    padded = np.zeros((3, 7, 4))
    for i, s in enumerate(seqs):
        padded[i, : len(s)] = s
    means, logvars = enc.forward_batch(params, padded, [3, 7, 5])
    for i, s in enumerate(seqs):
        head = enc.forward(params, s)
        assert np.allclose(means[i], head.mean, atol=1e-12)
        assert np.allclose(logvars[i], head.log_variance, atol=1e-12)


# ---------------------------------------------------------------------------
# gradient


def test_gradient_square():
    params = ParamVector(np.array([3.0]), {"p": (0, 1)})

    def loss(flat, layout):
        p = ad.segment(flat, 0, 1)
        return ad.vsum(ad.mul(p, p))

    g = gradient(loss, params)
    assert g.values[0] == pytest.approx(6.0, abs=1e-12)


def test_gradient_constant_loss_is_zero():
    params = ParamVector(np.ones(4), {"p": (0, 4)})

    def loss(flat, layout):
        p = ad.segment(flat, 0, 4)
        return ad.vsum(ad.mul(p, 0.0))

    g = gradient(loss, params)
    assert np.all(g.values == 0.0)


def test_gradient_two_layer_net_matches_finite_differences():
    rng = vrng.generator(11, "fd")
    net = MLPApproximator((4, 6, 1), "f")
    params = build_params([net], rng)
    x = rng.normal(size=(8, 4))
    y = rng.normal(size=(8,))

    def loss(flat, layout):
        out = net.forward_rows(flat, layout, x)
        return ad.weighted_mse(out, y)

    def loss_value(values):
        p = ParamVector(values, dict(params.layout))
        out = net.forward(p, x)[:, 0]
        return float(np.mean((out - y) ** 2))

    g = gradient(loss, params)
    fd = finite_difference(loss_value, params.values)
    assert np.max(rel_err(g.values, fd)) < 1e-4


def test_gradient_nonfinite_loss_raises():
    params = ParamVector(np.array([0.0]), {"p": (0, 1)})

    def loss(flat, layout):
        p = ad.segment(flat, 0, 1)
        return ad.log(p)  # log(0) = -inf

    with pytest.raises(NumericError):
        gradient(loss, params)


@pytest.mark.parametrize("component", ["mlp", "rnn"])
def test_gradient_check_32_draws(component):
    """Reverse-mode gradients match central differences on 32 random draws."""
    for draw in range(32):
        rng = vrng.generator(100 + draw, "gradcheck", component)
        if component == "mlp":
            net = MLPApproximator((3, 5, 2), "f")
            params = build_params([net], rng)
            x = rng.normal(size=(4, 3))
            t = rng.normal(size=(4, 2))

            def loss(flat, layout):
                out = net.forward_graph(flat, layout, x)
                return ad.vmean(ad.square(ad.sub(out, t)))

            def loss_value(values):
                out = net.forward(ParamVector(values, dict(params.layout)), x)
                return float(np.mean((out - t) ** 2))

        else:
            net = RecurrentEncoder(3, 4, 2, "enc")
            params = build_params([net], rng)
            seq = rng.normal(size=(1, 5, 3))

            def loss(flat, layout):
                mean, logvar = net.forward_graph(flat, layout, seq, [5])
                return ad.add(ad.vsum(ad.square(mean)), ad.vsum(ad.square(logvar)))

            def loss_value(values):
                head = net.forward(ParamVector(values, dict(params.layout)), seq[0])
                return float(np.sum(head.mean**2) + np.sum(head.log_variance**2))

        g = gradient(loss, params)
        fd = finite_difference(loss_value, params.values)
        assert np.max(rel_err(g.values, fd)) < 1e-4, f"{component} draw {draw}"


# ---------------------------------------------------------------------------
# gaussian log density


def test_log_density_standard_normal_at_mode():
    head = GaussianHead(mean=np.zeros(1), log_variance=np.zeros(1))
    assert gaussian_log_density(head, np.zeros(1)) == pytest.approx(
        -0.5 * np.log(2 * np.pi), abs=1e-12
    )


def test_log_density_at_mean_depends_only_on_variance():
    lv = np.array([0.3, -0.7])
    head = GaussianHead(mean=np.array([2.0, -1.0]), log_variance=lv)
    expect = -0.5 * np.sum(np.log(2 * np.pi) + lv)
    assert gaussian_log_density(head, head.mean) == pytest.approx(expect, abs=1e-12)


def test_log_density_closed_form_example():
    head = GaussianHead(mean=np.array([1.0]), log_variance=np.array([np.log(4.0)]))
    expect = -0.5 * np.log(2 * np.pi) - 0.5 * np.log(4.0) - 0.5
    assert gaussian_log_density(head, np.array([3.0])) == pytest.approx(expect, abs=1e-12)


def test_log_density_shape_mismatch():
    head = GaussianHead(mean=np.zeros(2), log_variance=np.zeros(2))
    with pytest.raises(ConfigError):
        gaussian_log_density(head, np.zeros(3))


def test_log_density_normalization_monte_carlo():
    """E_{x~p}[p(x)] = 1/(2*sigma*sqrt(pi)) for a normalized 1-d Gaussian."""
    sigma = 1.7
    head = GaussianHead(mean=np.array([0.4]), log_variance=np.array([2 * np.log(sigma)]))
    rng = vrng.generator(0, "mc")
    xs = head.mean + sigma * rng.normal(size=(100_000, 1))
    dens = np.exp([gaussian_log_density(head, x) for x in xs])
    expect = 1.0 / (2 * sigma * np.sqrt(np.pi))
    se = dens.std() / np.sqrt(len(dens))
    assert abs(dens.mean() - expect) < 3 * se


# ---------------------------------------------------------------------------
# optimizer


def test_sgd_step_zero_gradient_keeps_params():
    params = ParamVector(np.array([1.0, -2.0]), {"p": (0, 2)})
    state = MomentState.for_params(params)
    before = params.values.copy()
    sgd_step(params, ParamVector(np.zeros(2), {"p": (0, 2)}), 0.1, state)
    assert np.allclose(params.values, before)
    assert state.t == 1


def test_sgd_step_plain_descent_when_moments_disabled():
    params = ParamVector(np.array([1.0, 2.0]), {"p": (0, 2)})
    state = MomentState.for_params(params, beta1=0.0, beta2=0.0)
    g = np.array([0.5, -1.0])
    sgd_step(params, ParamVector(g, {"p": (0, 2)}), 0.1, state)
    assert np.allclose(params.values, np.array([1.0, 2.0]) - 0.1 * g, atol=1e-15)


def test_sgd_step_rejects_nonpositive_lr_and_nonfinite_grad():
    params = ParamVector(np.zeros(1), {"p": (0, 1)})
    state = MomentState.for_params(params)
    with pytest.raises(ConfigError):
        sgd_step(params, ParamVector(np.zeros(1), {"p": (0, 1)}), 0.0, state)
    with pytest.raises(NumericError):
        sgd_step(params, ParamVector(np.array([np.nan]), {"p": (0, 1)}), 0.1, state)


def test_default_learning_rate_in_config():
    from v2a.config import DEFAULTS

    assert DEFAULTS["policy"]["lr"] == 3e-4
    assert DEFAULTS["modality"]["lr"] == 3e-4
    assert DEFAULTS["advantage"]["lr"] == 3e-4


# ---------------------------------------------------------------------------
# checkpoints and determinism


def test_checkpoint_round_trip(tmp_path):
    rng = vrng.generator(1, "ckpt")
    net = MLPApproximator((3, 4, 1), "f")
    enc = RecurrentEncoder(2, 3, 2, "enc")
    params = build_params([net, enc], rng)
    path = tmp_path / "stage.ckpt"
    save_params(path, params, "deadbeef", 42, {"stage": "test"})
    loaded = load_params(path)
    assert loaded.layout == params.layout
    assert np.array_equal(loaded.values, params.values)
    meta = load_sidecar(path)
    assert meta["config_hash"] == "deadbeef" and meta["seed"] == 42


def test_checkpoint_magic_bytes(tmp_path):
    path = tmp_path / "stage.ckpt"
    params = ParamVector(np.arange(3.0), {"p": (0, 3)})
    save_params(path, params, "h", 0)
    raw = path.read_bytes()
    assert raw[:4] == b"V2A1"
    with pytest.raises(ConfigError):
        path2 = tmp_path / "bad.ckpt"
        path2.write_bytes(b"XXXX" + raw[4:])
        load_params(path2)


def test_param_vector_invariants():
    with pytest.raises(NumericError):
        ParamVector(np.array([np.inf]), {"p": (0, 1)})
    with pytest.raises(ConfigError):
        ParamVector(np.zeros(3), {"a": (0, 1), "b": (2, 1)})  # gap at index 1


def test_training_determinism_bit_identical():
    def run():
        rng = vrng.generator(5, "det")
        net = MLPApproximator((3, 8, 1), "f")
        params = build_params([net], rng)
        state = MomentState.for_params(params)
        x = rng.normal(size=(16, 3))
        y = rng.normal(size=(16,))
        for _ in range(25):
            def loss(flat, layout):
                return ad.weighted_mse(net.forward_rows(flat, layout, x), y)

            g = gradient(loss, params)
            sgd_step(params, g, 3e-4, state)
        return params.values.copy()

    a, b = run(), run()
    assert np.array_equal(a, b)
