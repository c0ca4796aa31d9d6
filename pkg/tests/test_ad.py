"""Tape engine: forward semantics, adjoints vs finite differences, replay."""

import numpy as np
import pytest

from sgnn import ad
from sgnn.errors import ShapeError, TapeError

from helpers import fd_grad, rel_err


def test_eager_path_returns_plain_arrays():
    a = np.arange(6.0).reshape(2, 3)
    b = np.ones((2, 3))
    out = ad.add(ad.mul(a, 2.0), b)
    assert isinstance(out, np.ndarray)
    np.testing.assert_array_equal(out, 2.0 * a + 1.0)


def test_backward_before_forward_raises():
    tape = ad.Tape()
    v = tape.var(np.ones(3))
    with pytest.raises(TapeError):
        tape.backward(v, np.ones(3))


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_identity_grad_passthrough():
    tape = ad.Tape()
    x = tape.var(np.array([1.0, -2.0, 3.0]))
    y = ad.add(x, 0.0)
    g = np.array([0.5, 1.5, -1.0])
    grads = tape.backward(y, g)
    np.testing.assert_array_equal(grads.of(x), g)


def test_scalar_quadratic_grad():
    tape = ad.Tape()
    w = tape.var(np.array([3.0]))
    loss = ad.mul(w, w)
    grads = tape.backward(loss, np.ones(1))
    np.testing.assert_allclose(grads.of(w), np.array([6.0]))


@pytest.mark.parametrize("trial", range(10))
def test_composite_ops_match_finite_differences(trial):
    rng = np.random.default_rng(100 + trial)
    a0 = rng.normal(size=(4, 3))
    b0 = rng.normal(size=(3, 5))
    seg = np.array([0, 1, 0, 1])

    def run(tape):
        if tape is None:
            a, b = a0, b0
        else:
            a, b = tape.var(a0), tape.var(b0)
        y = ad.matmul(a, b)
        y = ad.silu(y)
        y = ad.concat([y, ad.mul(y, y)], axis=-1)
        y = ad.segment_sum(y, seg, 2)
        y = ad.div(y, ad.add(ad.sqrt(ad.sum_(ad.mul(y, y), keepdims=False)), 1.0))
        y = ad.relu(ad.sub(y, 0.05))
        out = ad.sum_(ad.gather(y, np.array([1, 0, 1])))
        return out

    tape = ad.Tape()
    a = tape.var(a0)
    b = tape.var(b0)
    y = ad.matmul(a, b)
    y = ad.silu(y)
    y = ad.concat([y, ad.mul(y, y)], axis=-1)
    y = ad.segment_sum(y, seg, 2)
    y = ad.div(y, ad.add(ad.sqrt(ad.sum_(ad.mul(y, y), keepdims=False)), 1.0))
    y = ad.relu(ad.sub(y, 0.05))
    out = ad.sum_(ad.gather(y, np.array([1, 0, 1])))
    grads = tape.backward(out, np.array(1.0))

    for arr, var in ((a0, a), (b0, b)):
        coords = rng.choice(arr.size, size=min(6, arr.size), replace=False)
        fd = fd_grad(lambda: float(ad.value_of(run(None))), arr, coords)
        got = grads.of(var).reshape(-1)[coords]
        assert rel_err(got, fd) < 1e-6


def test_batched_matmul_grads():
    rng = np.random.default_rng(7)
    a0 = rng.normal(size=(5, 3, 2))
    b0 = rng.normal(size=(5, 2, 4))
    tape = ad.Tape()
    a, b = tape.var(a0), tape.var(b0)
    out = ad.sum_(ad.matmul(a, b))
    grads = tape.backward(out, np.array(1.0))

    def loss():
        return float((a0 @ b0).sum())

    coords = rng.choice(a0.size, size=6, replace=False)
    assert rel_err(grads.of(a).reshape(-1)[coords], fd_grad(loss, a0, coords)) < 1e-6
    coords = rng.choice(b0.size, size=6, replace=False)
    assert rel_err(grads.of(b).reshape(-1)[coords], fd_grad(loss, b0, coords)) < 1e-6


def test_broadcast_add_unbroadcasts_grad():
    tape = ad.Tape()
    x = tape.var(np.ones((4, 3)))
    b = tape.var(np.zeros(3))
    out = ad.sum_(ad.add(x, b))
    grads = tape.backward(out, np.array(1.0))
    np.testing.assert_array_equal(grads.of(b), np.full(3, 4.0))


def test_same_var_used_twice_accumulates():
    tape = ad.Tape()
    x = tape.var(np.array([2.0]))
    out = ad.mul(x, x)
    grads = tape.backward(out, np.ones(1))
    np.testing.assert_allclose(grads.of(x), np.array([4.0]))


def test_replay_reproduces_forward_bit_exactly():
    rng = np.random.default_rng(3)
    tape = ad.Tape()
    a = tape.var(rng.normal(size=(6, 4)))
    b = tape.var(rng.normal(size=(4, 4)))
    y = ad.silu(ad.matmul(a, b))
    z = ad.sum_(ad.mul(y, y), axis=0)
    originals = [rec.out.value for rec in tape._records]
    replayed = tape.replay()
    assert len(originals) == len(replayed)
    for orig, re in zip(originals, replayed):
        assert np.array_equal(orig, re)
    assert np.array_equal(replayed[-1], ad.value_of(z))


def test_determinism_same_seed_same_bits():
    def run():
        rng = np.random.default_rng(42)
        tape = ad.Tape()
        a = tape.var(rng.normal(size=(8, 8)))
        b = tape.var(rng.normal(size=(8, 8)))
        out = ad.sum_(ad.silu(ad.matmul(a, b)))
        grads = tape.backward(out, np.array(1.0))
        return ad.value_of(out).copy(), grads.of(a).copy()

    v1, g1 = run()
    v2, g2 = run()
    assert np.array_equal(v1, v2)
    assert np.array_equal(g1, g2)
