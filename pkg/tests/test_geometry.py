"""Geometric core: stacking, scalarization equivariance, transforms, witness."""

import numpy as np
import pytest

from sgnn import ad
from sgnn.errors import ContractError, GramMismatchError, ShapeError
from sgnn.geometry import (
    Gravity,
    check_equivariance,
    horizontal_axis_rotation,
    lemma5_witness,
    normalized_gram,
    ominus,
    random_orthogonal,
    random_subgroup_transform,
    sample_subgroup_transform,
    scalarize_equivariant,
    scalarize_subequivariant,
)
from sgnn.mlp import mlp_init

GRAVITY = Gravity()


def constant_sigma(matrix: np.ndarray):
    """sigma ignoring its input, returning a fixed flat output per row."""
    flat = np.asarray(matrix, dtype=float).reshape(-1)

    def f(x):
        xv = ad.value_of(x)
        return np.tile(flat, (xv.shape[0], 1))

    return f


def constant_eta(value: float):
    def f(x):
        xv = ad.value_of(x)
        return np.full((xv.shape[0], 1), value)

    return f


# ------------------------------------------------------------------- ominus

def test_ominus_direct_read():
    zi = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    zj = np.array([[0.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
    out = ominus(zi, zj)
    want = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    np.testing.assert_array_equal(out, want)


def test_ominus_self():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(3, 2))
    out = ominus(z, z)
    np.testing.assert_array_equal(out[:, 0], np.zeros(3))
    np.testing.assert_array_equal(out[:, 1], z[:, 1])
    np.testing.assert_array_equal(out[:, 2], z[:, 1])


def test_ominus_translation_invariance_exact():
    # dyadic-rational coordinates keep the additions exact, so the structural
    # cancellation of the common translation is visible as bit equality
    rng = np.random.default_rng(1)
    zi = rng.integers(-128, 128, size=(3, 3)) / 16.0
    zj = rng.integers(-128, 128, size=(3, 2)) / 16.0
    t = rng.integers(-128, 128, size=3) / 16.0
    zi_t = zi.copy()
    zj_t = zj.copy()
    zi_t[:, 0] += t
    zj_t[:, 0] += t
    np.testing.assert_array_equal(ominus(zi, zj), ominus(zi_t, zj_t))


def test_ominus_zero_channel_error():
    with pytest.raises(ShapeError):
        ominus(np.zeros((3, 0)), np.zeros((3, 1)))


# ------------------------------------------------------------- scalarization

def test_equivariant_identity_selector():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(3, 2))
    sigma = constant_sigma(np.array([[1.0], [0.0]]))
    out = scalarize_equivariant(z, np.zeros(0), sigma, out_channels=1)
    np.testing.assert_allclose(out[:, 0], z[:, 0], atol=1e-14)


def test_equivariant_zero_stack_gives_zero():
    sigma_rng = np.random.default_rng(3)
    net = mlp_init(sigma_rng, [2 * 2 + 1, 8, 2 * 1])
    out = scalarize_equivariant(np.zeros((3, 2)), np.ones(1), net)
    np.testing.assert_array_equal(out, np.zeros((3, 1)))


def test_equivariant_commutes_with_full_orthogonal_group():
    rng = np.random.default_rng(4)
    net = mlp_init(rng, [3 * 3 + 2, 16, 3 * 2])
    z0 = rng.normal(size=(3, 3))
    h0 = rng.normal(size=2)

    def fn(geo, sca):
        y = scalarize_equivariant(geo[0], sca[0], net, out_channels=2)
        return [y], []

    dev = check_equivariance(fn, ([z0], [h0]), group="o3", trials=100, seed=5,
                             position_channels=[None], output_position_channels=[None])
    assert dev < 1e-9


def test_subequivariant_pure_gravity_with_empty_stack():
    sigma = constant_sigma(np.array([[1.0]]))
    eta = constant_eta(0.7)
    out = scalarize_subequivariant(np.zeros((3, 0)), np.ones(2), GRAVITY, sigma, eta)
    np.testing.assert_allclose(out[:, 0], 0.7 * GRAVITY.direction, atol=1e-14)


def test_subequivariant_channel_selector():
    sigma = constant_sigma(np.array([[1.0], [0.0]]))  # keep channel 0, drop gravity
    eta = constant_eta(1.0)
    z = np.array([[1.0], [0.0], [0.0]])
    out = scalarize_subequivariant(z, np.zeros(1), GRAVITY, sigma, eta)
    np.testing.assert_allclose(out, z, atol=1e-14)


def _random_sub_block(rng, m=2, nh=2, out_channels=1):
    sigma = mlp_init(rng, [(m + 1) * (m + 1) + nh, 16, (m + 1) * out_channels])
    eta = mlp_init(rng, [nh, 8, 1])
    return sigma, eta


def test_subequivariant_commutes_with_axis_subgroup():
    rng = np.random.default_rng(6)
    sigma, eta = _random_sub_block(rng)
    z0 = rng.normal(size=(3, 2))
    h0 = rng.normal(size=2)

    def fn(geo, sca):
        y = scalarize_subequivariant(geo[0], sca[0], GRAVITY, sigma, eta)
        return [y], []

    dev = check_equivariance(fn, ([z0], [h0]), group="og3", trials=200, seed=7,
                             position_channels=[None], output_position_channels=[None])
    assert dev < 1e-9


def test_subequivariant_breaks_under_horizontal_rotation():
    rng = np.random.default_rng(8)
    sigma, eta = _random_sub_block(rng)
    worst = 0.0
    for _ in range(20):
        z = rng.normal(size=(3, 2))
        h = rng.normal(size=2)
        O = horizontal_axis_rotation(rng)
        y0 = scalarize_subequivariant(z, h, GRAVITY, sigma, eta)
        y1 = scalarize_subequivariant(O @ z, h, GRAVITY, sigma, eta)
        worst = max(worst, float(np.max(np.abs(y1 - O @ y0))))
    assert worst > 1e-3


def test_subequivariant_rejects_non_unit_gravity():
    with pytest.raises(ContractError):
        Gravity(direction=np.array([0.0, 0.0, -2.0]))


def test_gram_normalization_scale_invariance():
    rng = np.random.default_rng(9)
    z = rng.normal(size=(3, 4))
    for c in (0.1, 3.0, 250.0):
        g1 = normalized_gram(z)
        g2 = normalized_gram(c * z)
        np.testing.assert_allclose(g1, g2, atol=1e-12, rtol=0.0)


def test_gram_normalization_scale_invariance_with_gravity_channel():
    # scaling the stack and the gated gravity column together leaves the
    # normalized Gram unchanged, so sigma sees scale-free inputs
    rng = np.random.default_rng(19)
    z = rng.normal(size=(3, 2))
    eta = 0.37
    aug = np.concatenate([z, eta * GRAVITY.direction.reshape(3, 1)], axis=1)
    for c in (0.2, 7.0, 1500.0):
        aug_scaled = np.concatenate(
            [c * z, c * eta * GRAVITY.direction.reshape(3, 1)], axis=1
        )
        np.testing.assert_allclose(
            normalized_gram(aug), normalized_gram(aug_scaled), atol=1e-12, rtol=0.0
        )


def test_gram_normalization_skips_tiny_norm():
    z = np.zeros((3, 2))
    g = normalized_gram(z)
    np.testing.assert_array_equal(g, np.zeros((2, 2)))


# ------------------------------------------------------------- transforms

def test_transform_theta_zero_is_identity():
    tr = sample_subgroup_transform(0.0)
    np.testing.assert_allclose(tr.O, np.eye(3), atol=1e-15)


def test_transform_quarter_turn_maps_x_to_y():
    g = Gravity(direction=np.array([0.0, 0.0, -1.0]))
    tr = sample_subgroup_transform(np.pi / 2, gravity=g)
    got = tr.O @ np.array([1.0, 0.0, 0.0])
    # quarter turn about -z sends e_x to -e_y or +e_y depending on handedness
    assert min(np.max(np.abs(got - np.array([0.0, 1.0, 0.0]))),
               np.max(np.abs(got + np.array([0.0, 1.0, 0.0])))) < 1e-15


def test_sampled_transforms_orthogonal_and_axis_fixing():
    rng = np.random.default_rng(10)
    for _ in range(1000):
        tr = random_subgroup_transform(rng, GRAVITY)
        assert np.max(np.abs(tr.O.T @ tr.O - np.eye(3))) < 1e-12
        assert np.max(np.abs(tr.O @ GRAVITY.direction - GRAVITY.direction)) < 1e-12


def test_horizontal_axis_rotation_moves_gravity():
    rng = np.random.default_rng(11)
    for _ in range(50):
        O = horizontal_axis_rotation(rng, GRAVITY)
        assert np.max(np.abs(O.T @ O - np.eye(3))) < 1e-12
        assert np.max(np.abs(O @ GRAVITY.direction - GRAVITY.direction)) > 1e-2


# ------------------------------------------------------------------ witness

def test_witness_identity_for_equal_stacks():
    rng = np.random.default_rng(12)
    z = rng.normal(size=(3, 3))
    tr = lemma5_witness(z, z, GRAVITY)
    np.testing.assert_allclose(tr.O @ z, z, atol=1e-10)


def test_witness_construct_then_recover_1000_rounds():
    rng = np.random.default_rng(13)
    worst = 0.0
    for _ in range(1000):
        m = int(rng.integers(1, 4))
        z2 = rng.normal(size=(3, m))
        O_true = random_subgroup_transform(rng, GRAVITY).O
        z1 = O_true @ z2
        tr = lemma5_witness(z1, z2, GRAVITY)
        tr.validate(GRAVITY, tol=1e-10)
        worst = max(worst, float(np.max(np.abs(tr.O @ z2 - z1))))
    assert worst < 1e-6


def test_witness_rank_deficient_horizontal_part():
    rng = np.random.default_rng(14)
    # single channel along gravity: horizontal part is zero
    z2 = np.array([[0.0], [0.0], [2.0]])
    O_true = random_subgroup_transform(rng, GRAVITY).O
    z1 = O_true @ z2
    tr = lemma5_witness(z1, z2, GRAVITY)
    assert np.max(np.abs(tr.O @ z2 - z1)) < 1e-10


def test_witness_rejects_gram_mismatch():
    z2 = np.array([[1.0], [0.0], [0.0]])
    z1 = np.array([[0.0], [0.0], [1.0]])  # different vertical projection
    with pytest.raises(GramMismatchError):
        lemma5_witness(z1, z2, GRAVITY)


# -------------------------------------------------------- harness behaviors

def test_check_equivariance_identity_zero_deviation():
    rng = np.random.default_rng(15)
    z0 = rng.normal(size=(3, 2))

    def fn(geo, sca):
        return [geo[0]], []

    dev = check_equivariance(fn, ([z0], []), group="og3", trials=50, seed=16,
                             position_channels=[None], output_position_channels=[None])
    assert dev == 0.0


def test_check_equivariance_rejects_unknown_group():
    with pytest.raises(ContractError):
        check_equivariance(lambda g, s: (g, s), ([np.zeros((3, 1))], []), group="su2")


def test_random_orthogonal_is_orthogonal():
    rng = np.random.default_rng(17)
    for _ in range(100):
        O = random_orthogonal(rng)
        assert np.max(np.abs(O.T @ O - np.eye(3))) < 1e-12


def test_zero_stack_gradients_stay_finite():
    # normalization is skipped on all-zero stacks; the skip must not poison
    # the backward pass with 0 * inf
    from sgnn import ad
    from sgnn.mlp import mlp_grads

    rng = np.random.default_rng(18)
    net = mlp_init(rng, [2 * 2 + 1, 8, 2 * 1])
    tape = ad.Tape()
    z = tape.var(np.zeros((3, 2)))
    out = scalarize_equivariant(z, np.ones(1), net, tape=tape)
    loss = ad.sum_(ad.mul(out, out))
    grads = tape.backward(loss, np.array(1.0))
    assert np.isfinite(grads.of(z)).all()
    for g in mlp_grads(tape, grads, net):
        assert np.isfinite(g).all()


def test_build_edges_survives_huge_coordinates():
    from sgnn.graph import ParticleSystem, build_edges

    sys_ = ParticleSystem(
        positions=np.array([[0.0, 0.0, 0.0], [1e300, 1e300, 1e300]]),
        velocities=np.zeros((2, 3)),
        attrs=np.ones((2, 1)),
        object_of=np.array([0, 1]),
    )
    edges = build_edges(sys_, 0.1)
    assert edges.inter.shape[0] == 0 and edges.inner.shape[0] == 0
