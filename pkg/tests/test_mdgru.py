import math

import numpy as np
import pytest

from cordseg import mdgru
from cordseg import tensor as T
from cordseg.errors import ConfigError, GraphError, ShapeError


def small_config(**kw):
    defaults = dict(in_channels=2, hidden_channels=2, kernel_size=3,
                    num_classes=2, dropout_rate=0.5, dropconnect_on_state=True,
                    residual=True, combine_mode="sum")
    defaults.update(kw)
    return mdgru.MDGRUConfig(**defaults).validate()


def zero_cgru(k=1, cin=1, ch=1):
    z = lambda *s: T.Tensor(np.zeros(s), requires_grad=True)
    return mdgru.CGRUParams(
        w_r=z(k, k, cin, ch), w_z=z(k, k, cin, ch), w_h=z(k, k, cin, ch),
        u_r=z(k, k, ch, ch), u_z=z(k, k, ch, ch), u_h=z(k, k, ch, ch),
        b_r=z(ch), b_z=z(ch), b_h=z(ch)).validate()


# ---------------------------------------------------------------------------
# oracles


def scalar_gru_oracle(xs, wr, wz, wh, ur, uz, uh, br, bz, bh):
    """The recurrence with 1x1 kernels and one channel, in plain floats."""
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    h = 0.0
    states = []
    for x in xs:
        r = sig(wr * x + ur * h + br)
        z = sig(wz * x + uz * h + bz)
        cand = math.tanh(wh * x + uh * (r * h) + bh)
        h = (1.0 - z) * h + z * cand
        states.append(h)
    return states


# ---------------------------------------------------------------------------
# cgru_step


def test_step_zero_params_zero_state():
    p = zero_cgru()
    h = mdgru.cgru_step(T.Tensor(np.random.default_rng(0).standard_normal((1, 4, 1))),
                        T.Tensor(np.zeros((1, 4, 1))), p)
    np.testing.assert_array_equal(h.data, np.zeros((1, 4, 1)))


def test_step_zero_params_halves_state():
    # z = sigmoid(0) = 0.5 and cand = 0, so h' = 0.5 h.
    p = zero_cgru()
    h_prev = np.random.default_rng(1).standard_normal((1, 5, 1))
    h = mdgru.cgru_step(T.Tensor(np.zeros((1, 5, 1))), T.Tensor(h_prev), p)
    np.testing.assert_allclose(h.data, 0.5 * h_prev, atol=1e-15)


def test_step_matches_scalar_oracle():
    rng = np.random.default_rng(2)
    vals = rng.standard_normal(9)
    wr, wz, wh, ur, uz, uh, br, bz, bh = vals
    p = mdgru.CGRUParams(
        *[T.Tensor(np.full((1, 1, 1, 1), v), requires_grad=True) for v in (wr, wz, wh)],
        *[T.Tensor(np.full((1, 1, 1, 1), v), requires_grad=True) for v in (ur, uz, uh)],
        *[T.Tensor(np.full(1, v), requires_grad=True) for v in (br, bz, bh)])
    xs = rng.standard_normal(3)
    expected = scalar_gru_oracle(xs, wr, wz, wh, ur, uz, uh, br, bz, bh)

    h = T.Tensor(np.zeros((1, 1, 1)))
    got = []
    for x in xs:
        h = mdgru.cgru_step(T.Tensor(np.full((1, 1, 1), x)), h, p)
        got.append(h.data.item())
    np.testing.assert_allclose(got, expected, atol=1e-12)


def test_step_shape_mismatch_raises():
    p = zero_cgru(k=3, cin=2, ch=2)
    with pytest.raises(ShapeError):
        mdgru.cgru_step(T.Tensor(np.zeros((1, 4, 2))), T.Tensor(np.zeros((1, 4, 3))), p)
    with pytest.raises(ShapeError):
        mdgru.cgru_step(T.Tensor(np.zeros((2, 4, 2))), T.Tensor(np.zeros((2, 4, 2))), p)


def test_state_stays_inside_unit_interval():
    rng = np.random.default_rng(3)
    p = mdgru.init_params(small_config(in_channels=1, hidden_channels=3), seed=4)
    scan = p.scans["rows_fwd"]
    h = T.Tensor(np.zeros((1, 6, 3)))
    for _ in range(30):
        x = T.Tensor(rng.standard_normal((1, 6, 1)) * 2.0)
        h = mdgru.cgru_step(x, h, scan)
        assert np.all(np.abs(h.data) < 1.0)
    # Extreme inputs saturate tanh to exactly 1.0 in float64; the gate
    # algebra still cannot escape the closed interval.
    for _ in range(30):
        x = T.Tensor(rng.standard_normal((1, 6, 1)) * 50.0)
        h = mdgru.cgru_step(x, h, scan)
        assert np.all(np.abs(h.data) <= 1.0)


# ---------------------------------------------------------------------------
# cgru_scan


def test_single_row_scan_equals_step():
    rng = np.random.default_rng(5)
    p = mdgru.init_params(small_config(), seed=6).scans["rows_fwd"]
    x = rng.standard_normal((1, 5, 2))
    scanned = mdgru.cgru_scan(T.Tensor(x), p, "rows", "forward")
    stepped = mdgru.cgru_step(T.Tensor(x), T.Tensor(np.zeros((1, 5, 2))), p)
    np.testing.assert_allclose(scanned.data, stepped.data, atol=1e-12)


def test_backward_scan_is_reversed_forward_scan():
    rng = np.random.default_rng(7)
    p = mdgru.init_params(small_config(), seed=8).scans["rows_bwd"]
    x = rng.standard_normal((6, 5, 2))
    bwd = mdgru.cgru_scan(T.Tensor(x), p, "rows", "backward")
    fwd_rev = mdgru.cgru_scan(T.Tensor(x[::-1].copy()), p, "rows", "forward")
    np.testing.assert_array_equal(bwd.data, fwd_rev.data[::-1])


def test_scan_matches_step_loop_oracle():
    rng = np.random.default_rng(9)
    p = mdgru.init_params(small_config(), seed=10).scans["rows_fwd"]
    x = rng.standard_normal((4, 4, 2))
    scanned = mdgru.cgru_scan(T.Tensor(x), p, "rows", "forward")

    h = T.Tensor(np.zeros((1, 4, 2)))
    rows = []
    for t in range(4):
        h = mdgru.cgru_step(T.Tensor(x[t:t + 1]), h, p)
        rows.append(h.data)
    np.testing.assert_allclose(scanned.data, np.concatenate(rows, axis=0), atol=1e-12)


def test_cols_scan_is_transposed_rows_scan():
    rng = np.random.default_rng(11)
    p = mdgru.init_params(small_config(), seed=12).scans["cols_fwd"]
    x = rng.standard_normal((5, 3, 2))
    cols = mdgru.cgru_scan(T.Tensor(x), p, "cols", "forward")
    rows = mdgru.cgru_scan(T.Tensor(x.transpose(1, 0, 2).copy()), p, "rows", "forward")
    np.testing.assert_array_equal(cols.data, rows.data.transpose(1, 0, 2))


def test_scan_rejects_bad_axis_direction():
    p = zero_cgru()
    x = T.Tensor(np.zeros((3, 3, 1)))
    with pytest.raises(ConfigError):
        mdgru.cgru_scan(x, p, "diag", "forward")
    with pytest.raises(ConfigError):
        mdgru.cgru_scan(x, p, "rows", "up")


# ---------------------------------------------------------------------------
# mdgru_forward


def test_forward_output_shape():
    config = small_config(in_channels=8, hidden_channels=3, num_classes=3)
    params = mdgru.init_params(config, seed=13)
    logits = mdgru.mdgru_forward(T.Tensor(np.random.default_rng(14).standard_normal((16, 12, 8))),
                                 config, params)
    assert logits.shape == (16, 12, 3)


def test_inference_is_deterministic():
    config = small_config()
    params = mdgru.init_params(config, seed=15)
    x = np.random.default_rng(16).standard_normal((8, 8, 2))
    a = mdgru.mdgru_forward(T.Tensor(x), config, params, training=False)
    b = mdgru.mdgru_forward(T.Tensor(x), config, params, training=False)
    assert np.array_equal(a.data, b.data)


def test_training_masks_change_logits_but_seed_fixes_them():
    config = small_config()
    params = mdgru.init_params(config, seed=17)
    x = np.random.default_rng(18).standard_normal((6, 6, 2))
    a = mdgru.mdgru_forward(T.Tensor(x), config, params, training=True, rng=5)
    b = mdgru.mdgru_forward(T.Tensor(x), config, params, training=True, rng=5)
    c = mdgru.mdgru_forward(T.Tensor(x), config, params, training=True, rng=6)
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)


def test_training_forward_without_rng_raises():
    config = small_config()
    params = mdgru.init_params(config, seed=19)
    with pytest.raises(ConfigError):
        mdgru.mdgru_forward(T.Tensor(np.zeros((4, 4, 2))), config, params, training=True)


def test_channel_mismatch_raises():
    config = small_config(in_channels=8)
    params = mdgru.init_params(config, seed=20)
    with pytest.raises(ShapeError):
        mdgru.mdgru_forward(T.Tensor(np.zeros((4, 4, 3))), config, params)


def test_single_pixel_forward_matches_hand_composition():
    config = small_config(residual=False, dropout_rate=0.0)
    params = mdgru.init_params(config, seed=21)
    x = np.random.default_rng(22).standard_normal((1, 1, 2))

    logits = mdgru.mdgru_forward(T.Tensor(x), config, params)

    combined = np.zeros((1, 1, config.hidden_channels))
    for key in mdgru.SCAN_KEYS:
        h = mdgru.cgru_step(T.Tensor(x), T.Tensor(np.zeros((1, 1, 2))), params.scans[key])
        combined += h.data
    expected = combined @ params.cls_kernel.data[0, 0] + params.cls_bias.data
    np.testing.assert_allclose(logits.data, expected, atol=1e-12)


def test_concat_combination_shape():
    config = small_config(combine_mode="concat", num_classes=3)
    params = mdgru.init_params(config, seed=23)
    logits = mdgru.mdgru_forward(T.Tensor(np.zeros((5, 4, 2))), config, params)
    assert logits.shape == (5, 4, 3)
    assert params.cls_kernel.shape[2] == 4 * config.hidden_channels


# ---------------------------------------------------------------------------
# gradients


def test_zero_classifier_blocks_gradient_to_scans():
    from cordseg import losses

    config = small_config(residual=False, dropout_rate=0.0)
    params = mdgru.init_params(config, seed=24)
    params.cls_kernel.data[:] = 0.0
    rng = np.random.default_rng(25)
    x = rng.standard_normal((4, 4, 2))
    r = losses.one_hot(rng.integers(0, 2, (4, 4)), 2)
    logits = mdgru.mdgru_forward(T.Tensor(x), config, params)
    loss = losses.cross_entropy(T.softmax(logits, axis=-1), r)
    params.zero_grad()
    mdgru.mdgru_backward(loss)
    for key in mdgru.SCAN_KEYS:
        for _, p in params.scans[key].named(key):
            assert p.grad is None or np.all(p.grad == 0.0)
    assert np.any(params.cls_kernel.grad != 0.0)


def test_backward_accumulates_exactly_double():
    config = small_config(dropout_rate=0.0)
    params = mdgru.init_params(config, seed=26)
    x = np.random.default_rng(27).standard_normal((3, 3, 2))
    logits = mdgru.mdgru_forward(T.Tensor(x), config, params)
    loss = T.reduce_mean(T.mul(logits, logits))
    params.zero_grad()
    loss.backward()
    once = {n: p.grad.copy() for n, p in params.named_parameters()}
    loss.backward()
    for name, p in params.named_parameters():
        np.testing.assert_array_equal(p.grad, 2.0 * once[name])


def test_backward_without_forward_raises():
    with pytest.raises(GraphError):
        mdgru.mdgru_backward(T.Tensor(1.0))


def _swap_param(params, name, tensor):
    if "." in name:
        scan, attr = name.split(".")
        setattr(params.scans[scan], attr, tensor)
    else:
        setattr(params, name, tensor)


def _composite_gradcheck(config, seed, spatial=(6, 6)):
    params = mdgru.init_params(config, seed=seed)
    rng = np.random.default_rng(seed + 1)
    x = rng.standard_normal(spatial + (config.in_channels,))
    r = np.zeros(spatial + (config.num_classes,))
    flat = rng.integers(0, config.num_classes, spatial)
    for l in range(config.num_classes):
        r[..., l] = flat == l

    from cordseg import losses

    worst = 0.0
    for name, original in params.named_parameters():
        def f(theta, name=name, original=original):
            _swap_param(params, name, theta)
            try:
                logits = mdgru.mdgru_forward(T.Tensor(x), config, params)
                probs = T.softmax(logits, axis=-1)
                return losses.combined_loss(probs, r, 0.5, "gdl")
            finally:
                _swap_param(params, name, original)

        worst = max(worst, T.grad_check(f, original, eps=1e-5))
    return worst


def test_full_network_gradcheck():
    config = small_config(dropout_rate=0.0, dropconnect_on_state=False)
    assert _composite_gradcheck(config, seed=28) <= 1e-4


# ---------------------------------------------------------------------------
# directional symmetry


@pytest.mark.parametrize("axis", [0, 1])
@pytest.mark.parametrize("mode", ["sum", "concat"])
def test_mirror_symmetry(axis, mode):
    config = small_config(combine_mode=mode)
    params = mdgru.init_params(config, seed=29 + axis)
    x = np.random.default_rng(30).standard_normal((7, 6, 2))
    base = mdgru.mdgru_forward(T.Tensor(x), config, params).data
    mirrored = mdgru.mdgru_forward(T.Tensor(np.flip(x, axis=axis).copy()), config,
                                   mdgru.mirrored_params(params, axis)).data
    np.testing.assert_allclose(mirrored, np.flip(base, axis=axis), atol=1e-9)
