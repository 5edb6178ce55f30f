"""Engine primitives: forward oracles, gradient checks, determinism."""

import numpy as np
import numpy.testing as npt
import pytest

from dyngraph import engine as en
from dyngraph.engine import (
    NonFiniteError,
    ParameterStore,
    PrngState,
    Tape,
    Tensor,
)
from dyngraph import gradcheck


def t(data, grad=True):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def conv2d_scalar_oracle(x, w, b, pad):
    """Direct quadruple-loop cross-correlation with zero padding."""
    B, Cin, H, W = x.shape
    Cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((B, Cout, H, W))
    for bi in range(B):
        for co in range(Cout):
            for i in range(H):
                for j in range(W):
                    acc = b[co]
                    for ci in range(Cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[bi, ci, i + u, j + v] * w[co, ci, u, v]
                    out[bi, co, i, j] = acc
    return out


def test_conv2d_zero_input():
    x = t(np.zeros((1, 2, 4, 4)))
    w = t(np.random.default_rng(0).normal(size=(3, 2, 3, 3)))
    b = t(np.zeros(3))
    out = en.conv2d(x, w, b, padding=1)
    npt.assert_array_equal(out.data, 0.0)


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(1)
    x = t(rng.normal(size=(2, 1, 5, 5)))
    w = t(np.ones((1, 1, 1, 1)))
    b = t(np.zeros(1))
    out = en.conv2d(x, w, b, padding=0)
    npt.assert_allclose(out.data, x.data)


def test_conv2d_center_cell_sums_all_inputs():
    x = t(np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3))
    w = t(np.ones((1, 1, 3, 3)))
    b = t(np.zeros(1))
    out = en.conv2d(x, w, b, padding=1)
    assert out.data[0, 0, 1, 1] == x.data.sum()


def test_conv2d_matches_scalar_oracle():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 5, 4))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = en.conv2d(t(x), t(w), t(b), padding=1)
    npt.assert_allclose(out.data, conv2d_scalar_oracle(x, w, b, 1), rtol=1e-12)


def test_conv2d_shape_errors():
    x = t(np.zeros((1, 2, 4, 4)))
    with pytest.raises(ValueError):
        en.conv2d(x, t(np.zeros((1, 3, 3, 3))), t(np.zeros(1)), padding=1)
    with pytest.raises(ValueError):
        en.conv2d(x, t(np.zeros((1, 2, 3, 3))), t(np.zeros(1)), padding=0)
    with pytest.raises(ValueError):
        en.conv2d(x, t(np.zeros((1, 2, 4, 4))), t(np.zeros(1)), padding=1)


# ---------------------------------------------------------------------------
# channel_pool
# ---------------------------------------------------------------------------

def test_channel_pool_single_channel():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 1, 3, 3))
    out = en.channel_pool(t(x))
    npt.assert_allclose(out.data[:, 0], x[:, 0])
    npt.assert_allclose(out.data[:, 1], x[:, 0])


def test_channel_pool_two_values():
    x = np.zeros((1, 2, 1, 1))
    x[0, 0, 0, 0], x[0, 1, 0, 0] = 1.0, 3.0
    out = en.channel_pool(t(x))
    assert out.data[0, 0, 0, 0] == 2.0
    assert out.data[0, 1, 0, 0] == 3.0


def test_channel_pool_matches_scalar_loops():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 5, 4, 4))
    out = en.channel_pool(t(x)).data
    for b in range(2):
        for i in range(4):
            for j in range(4):
                vals = [x[b, c, i, j] for c in range(5)]
                assert out[b, 0, i, j] == pytest.approx(sum(vals) / 5, rel=1e-12)
                assert out[b, 1, i, j] == max(vals)


def test_channel_pool_max_tie_routes_to_lowest_channel():
    x = np.zeros((1, 3, 1, 1))
    x[0, 1], x[0, 2] = 5.0, 5.0  # tie between channels 1 and 2
    xt = t(x)
    with Tape() as tape:
        out = en.channel_pool(xt)
        loss = out.sum()
    tape.backward(loss)
    # mean contributes 1/3 everywhere; max adds 1 only to channel 1
    npt.assert_allclose(xt.grad[0, :, 0, 0], [1 / 3, 1 / 3 + 1, 1 / 3])


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------

def test_softmax_uniform():
    out = en.softmax(t(np.full(4, 2.5)))
    npt.assert_allclose(out.data, 0.25)


def test_softmax_singleton():
    out = en.softmax(t([7.0]))
    npt.assert_allclose(out.data, [1.0])


def test_softmax_closed_form():
    out = en.softmax(t([0.0, np.log(3.0)]))
    npt.assert_allclose(out.data, [0.25, 0.75], rtol=1e-12)


def test_softmax_sums_and_shift_invariance():
    rng = np.random.default_rng(5)
    for _ in range(20):
        x = rng.normal(scale=5.0, size=rng.integers(1, 12))
        s = en.softmax(t(x)).data
        assert abs(s.sum() - 1.0) < 1e-6
        shifted = en.softmax(t(x + rng.normal() * 10)).data
        npt.assert_allclose(s, shifted, atol=1e-9)


# ---------------------------------------------------------------------------
# gather_rows
# ---------------------------------------------------------------------------

def test_gather_rows_identity_permutation():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 5, 3))
    out = en.gather_rows(t(x), np.arange(5))
    npt.assert_array_equal(out.data, x)


def test_gather_rows_repeated_index_accumulates_grad():
    x = t(np.random.default_rng(7).normal(size=(1, 4, 2)))
    with Tape() as tape:
        out = en.gather_rows(x, [2, 2])
        loss = out.sum()
    tape.backward(loss)
    npt.assert_allclose(x.grad[0, 2], [2.0, 2.0])
    npt.assert_allclose(x.grad[0, [0, 1, 3]], 0.0)


def test_gather_rows_matches_scalar_copy():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(3, 8, 4))
    idx = rng.integers(0, 8, size=(3, 5))
    out = en.gather_rows(t(x), idx).data
    for b in range(3):
        for r in range(5):
            npt.assert_array_equal(out[b, r], x[b, idx[b, r]])


def test_gather_rows_out_of_range():
    x = t(np.zeros((1, 4, 2)))
    with pytest.raises(IndexError):
        en.gather_rows(x, [4])


def test_gather_scatter_conserves_gradient_mass():
    rng = np.random.default_rng(9)
    for _ in range(25):
        B, N, C, k = 2, int(rng.integers(3, 10)), 3, int(rng.integers(1, 6))
        x = t(rng.normal(size=(B, N, C)))
        idx = rng.integers(0, N, size=(B, k))
        weights = rng.normal(size=(B, k, C))
        with Tape() as tape:
            out = en.gather_rows(x, idx)
            loss = (out * Tensor(weights)).sum()
        tape.backward(loss)
        assert x.grad.sum() == pytest.approx(weights.sum(), rel=1e-12)


# ---------------------------------------------------------------------------
# backward / tape
# ---------------------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = t(np.random.default_rng(10).normal(size=(3, 4)))
    with Tape() as tape:
        loss = x.sum()
    tape.backward(loss)
    npt.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_half_square_gives_x():
    x = t(np.random.default_rng(11).normal(size=(5,)))
    with Tape() as tape:
        loss = (x * x).sum() * 0.5
    tape.backward(loss)
    npt.assert_allclose(x.grad, x.data, rtol=1e-12)


def test_backward_requires_scalar_loss():
    x = t(np.ones(3))
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError):
        tape.backward(y)


def test_backward_twice_fails():
    x = t(np.ones(3))
    with Tape() as tape:
        loss = x.sum()
    tape.backward(loss)
    with pytest.raises(RuntimeError):
        tape.backward(loss)


def test_backward_without_forward_fails():
    tape = Tape()
    with pytest.raises(RuntimeError):
        tape.backward(Tensor(np.asarray(1.0)))


def test_nonfinite_output_is_an_error():
    with np.errstate(divide="ignore"):
        with pytest.raises(NonFiniteError):
            en.log(t([0.0]))
        with pytest.raises(NonFiniteError):
            en.div(t([1.0]), t([0.0]))


# ---------------------------------------------------------------------------
# cross-entropy
# ---------------------------------------------------------------------------

def test_cross_entropy_uniform_logits():
    loss = en.cross_entropy_with_logits(t(np.zeros((3, 4))), [0, 1, 2])
    assert loss.item() == pytest.approx(np.log(4.0), rel=1e-12)


def test_cross_entropy_matches_scalar_oracle():
    rng = np.random.default_rng(12)
    z = rng.normal(scale=3.0, size=(6, 5))
    labels = rng.integers(0, 5, size=6)
    loss = en.cross_entropy_with_logits(t(z), labels).item()
    per_sample = []
    for i in range(6):
        p = np.exp(z[i]) / np.exp(z[i]).sum()
        per_sample.append(-np.log(p[labels[i]]))
    assert loss == pytest.approx(np.mean(per_sample), rel=1e-10)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError):
        en.cross_entropy_with_logits(t(np.zeros((2, 3))), [0, 3])


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

def test_sgd_zero_grad_leaves_values():
    store = ParameterStore()
    p = store.register("w", np.array([1.0, 2.0]))
    en.sgd_step(store, lr=0.1)
    npt.assert_array_equal(p.data, [1.0, 2.0])


def test_sgd_scalar_example():
    store = ParameterStore()
    p = store.register("w", np.array([1.0]))
    p.grad = np.array([2.0])
    en.sgd_step(store, lr=0.5)
    npt.assert_array_equal(p.data, [0.0])
    assert p.grad is None


def test_sgd_two_steps_equal_accumulated_update():
    g = np.array([0.3, -0.7])
    store = ParameterStore()
    p = store.register("w", np.array([1.0, -1.0]))
    p.grad = g.copy()
    en.sgd_step(store, lr=0.25)
    p.grad = g.copy()
    en.sgd_step(store, lr=0.25)
    npt.assert_allclose(p.data, np.array([1.0, -1.0]) - 2 * 0.25 * g, rtol=1e-15)


def test_sgd_nonfinite_gradient():
    store = ParameterStore()
    p = store.register("w", np.array([1.0]))
    p.grad = np.array([np.inf])
    with pytest.raises(NonFiniteError):
        en.sgd_step(store, lr=0.1)


def test_cosine_lr_endpoints():
    assert en.cosine_lr(0, 200, 1e-5) == pytest.approx(1e-5)
    assert en.cosine_lr(200, 200, 1e-5) == pytest.approx(0.0, abs=1e-20)
    assert en.cosine_lr(100, 200, 1e-5) == pytest.approx(0.5e-5)


def test_cosine_lr_non_increasing():
    lrs = [en.cosine_lr(e, 50, 1e-5) for e in range(51)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


# ---------------------------------------------------------------------------
# finite-difference property over every primitive
# ---------------------------------------------------------------------------

def _random_projection_loss(out, rng):
    w = Tensor(rng.normal(size=out.data.shape))
    return (out * w).sum()


PRIMITIVE_CASES = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (b * b + 1.0),
    "neg": lambda a, b: -a,
    "relu": lambda a, b: (a + 0.05).relu(),
    "sigmoid": lambda a, b: a.sigmoid(),
    "exp": lambda a, b: a.exp(),
    "log": lambda a, b: (a * a + 1.0).log(),
    "softmax": lambda a, b: en.softmax(a, axis=-1),
    "sum": lambda a, b: a.sum(axis=-1),
    "mean": lambda a, b: a.mean(axis=0),
    "max": lambda a, b: en.reduce_max(a, axis=-1),
    "concat": lambda a, b: en.concat([a, b], axis=0),
    "reshape": lambda a, b: a.reshape(a.size),
    "transpose": lambda a, b: a.transpose(),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_elementwise_primitive_gradients(name):
    op = PRIMITIVE_CASES[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    for trial in range(8):
        shape = (int(rng.integers(1, 4)), int(rng.integers(2, 5)))
        a = t(rng.normal(size=shape))
        b = t(rng.normal(size=shape) + 2.0)

        def loss_fn():
            return _random_projection_loss(op(a, b), np.random.default_rng(trial))

        errors = gradcheck.check_tensors(loss_fn, {"a": a, "b": b})
        assert max(errors.values()) < 1e-4, (name, errors)


def test_matmul_gradients_batched_and_plain():
    rng = np.random.default_rng(13)
    for _ in range(8):
        a = t(rng.normal(size=(2, 3, 4)))
        b = t(rng.normal(size=(4, 5)))

        def loss_fn():
            return _random_projection_loss(a @ b, rng=np.random.default_rng(0))

        errors = gradcheck.check_tensors(loss_fn, {"a": a, "b": b})
        assert max(errors.values()) < 1e-4


def test_conv2d_gradients():
    rng = np.random.default_rng(14)
    x = t(rng.normal(size=(2, 2, 4, 4)))
    w = t(rng.normal(size=(3, 2, 3, 3)))
    b = t(rng.normal(size=3))

    def loss_fn():
        return _random_projection_loss(en.conv2d(x, w, b, padding=1), np.random.default_rng(1))

    errors = gradcheck.check_tensors(loss_fn, {"x": x, "w": w, "b": b})
    assert max(errors.values()) < 1e-4


def test_avg_pool_gradients():
    rng = np.random.default_rng(15)
    x = t(rng.normal(size=(2, 3, 4, 4)))

    def loss_fn():
        return _random_projection_loss(en.avg_pool2d(x, 2), np.random.default_rng(2))

    errors = gradcheck.check_tensors(loss_fn, {"x": x})
    assert errors["x"] < 1e-4


def test_gather_rows_gradients():
    rng = np.random.default_rng(16)
    x = t(rng.normal(size=(2, 6, 3)))
    idx = rng.integers(0, 6, size=(2, 4))

    def loss_fn():
        return _random_projection_loss(en.gather_rows(x, idx), np.random.default_rng(3))

    errors = gradcheck.check_tensors(loss_fn, {"x": x})
    assert errors["x"] < 1e-4


def test_cross_entropy_gradients():
    rng = np.random.default_rng(17)
    z = t(rng.normal(size=(4, 5)))
    labels = rng.integers(0, 5, size=4)

    def loss_fn():
        return en.cross_entropy_with_logits(z, labels)

    errors = gradcheck.check_tensors(loss_fn, {"z": z})
    assert errors["z"] < 1e-4


def test_channel_pool_gradients():
    rng = np.random.default_rng(18)
    x = t(rng.normal(size=(2, 4, 3, 3)))

    def loss_fn():
        return _random_projection_loss(en.channel_pool(x), np.random.default_rng(4))

    errors = gradcheck.check_tensors(loss_fn, {"x": x})
    assert errors["x"] < 1e-4


def test_gradient_check_instance_count():
    # >= 100 random instances across the primitive battery
    count = len(PRIMITIVE_CASES) * 8 + 8 + 5
    assert count >= 100


# ---------------------------------------------------------------------------
# determinism
# ---------------------------------------------------------------------------

def test_prng_reproducible_streams():
    a = PrngState.derive(42, "weights", 3).normal(shape=100)
    b = PrngState.derive(42, "weights", 3).normal(shape=100)
    npt.assert_array_equal(a, b)
    c = PrngState.derive(42, "weights", 4).normal(shape=100)
    assert not np.array_equal(a, c)


def test_forward_bit_identical_across_runs():
    def run():
        rng = PrngState.derive(7, "det")
        x = Tensor(rng.normal(shape=(2, 3, 8, 8)))
        w = Tensor(en.glorot_uniform(rng, (4, 3, 3, 3), 27, 36))
        b = Tensor(np.zeros(4))
        out = en.conv2d(x, w, b, padding=1).relu()
        return en.channel_pool(out).data.tobytes()

    assert run() == run()


def test_glorot_bounds():
    rng = PrngState.derive(1, "init")
    w = en.glorot_uniform(rng, (50, 50), 50, 50)
    s = np.sqrt(6.0 / 100)
    assert np.all(np.abs(w) <= s)
