"""Geometric primitives: channel stacking, scalarization, axis-preserving
orthogonal transforms, and the Gram-equivalence witness.

A geometric tensor is a stack of m column vectors in R^3, stored as an array
of shape (3, m), or batched as (B, 3, m).  By convention channel 0 is the
position-like channel; the remaining channels transform like velocities
(rotate but do not translate).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import ad
from .errors import ContractError, GramMismatchError, ShapeError
from .mlp import MLP, mlp_forward

GRAM_NORM_EPS = 1e-12


@dataclass(frozen=True)
class Gravity:
    """Unit direction plus a separate magnitude (m/s^2 scale for scenes)."""

    direction: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -1.0]))
    magnitude: float = 9.8

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if d.shape != (3,):
            raise ShapeError("gravity direction must be a 3-vector")
        if abs(np.linalg.norm(d) - 1.0) > 1e-12:
            raise ContractError("gravity direction must be a unit vector")
        object.__setattr__(self, "direction", d)

    def vector(self) -> np.ndarray:
        return self.direction * self.magnitude


@dataclass(frozen=True)
class SubgroupTransform:
    """Orthogonal map O fixing the gravity direction, plus a translation."""

    O: np.ndarray
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def validate(self, gravity: Gravity, tol: float = 1e-12) -> None:
        if np.max(np.abs(self.O.T @ self.O - np.eye(3))) > tol:
            raise ContractError("transform is not orthogonal")
        if np.max(np.abs(self.O @ gravity.direction - gravity.direction)) > tol:
            raise ContractError("transform does not fix the gravity direction")


def _channels(z) -> int:
    v = ad.value_of(z)
    if v.ndim < 2 or v.shape[-2] != 3:
        raise ShapeError(f"geometric tensor must have shape (..., 3, m), got {v.shape}")
    return v.shape[-1]


def ominus(zi, zj):
    """Translation-cancelling stack: [x_i - x_j, v-channels of i, v-channels of j].

    Channel 0 of each operand is position-like; the rest are carried over
    unchanged.  Works on (3, m) tensors or (B, 3, m) batches.
    """
    mi, mj = _channels(zi), _channels(zj)
    if mi == 0 or mj == 0:
        raise ShapeError("ominus operands need at least the position channel")
    rel = ad.sub(ad.narrow(zi, -1, 0, 1), ad.narrow(zj, -1, 0, 1))
    parts = [rel]
    if mi > 1:
        parts.append(ad.narrow(zi, -1, 1, mi - 1))
    if mj > 1:
        parts.append(ad.narrow(zj, -1, 1, mj - 1))
    return ad.concat(parts, axis=-1) if len(parts) > 1 else rel


def _apply_sigma(sigma, x, tape):
    if isinstance(sigma, MLP):
        return mlp_forward(sigma, x, tape=tape)
    return sigma(x)


def normalized_gram(z, normalize: bool = True):
    """Gram matrix of the column stack, scaled to unit Frobenius norm.

    Scaling is skipped (divide by 1) whenever the norm falls below 1e-12 so
    all-zero stacks stay finite.  Accepts (3, m) or (B, 3, m).
    """
    gram = ad.matmul(ad.swap_last2(z), z)
    if not normalize:
        return gram
    sq = ad.sum_(ad.mul(gram, gram), axis=(-2, -1), keepdims=True)
    mask = (ad.value_of(sq) >= GRAM_NORM_EPS**2).astype(np.float64)
    # feed sqrt a masked-off 1 instead of 0 so its adjoint stays finite on
    # the all-zero stacks where normalization is skipped
    norm = ad.sqrt(ad.add(ad.mul(sq, mask), 1.0 - mask))
    denom = ad.add(ad.mul(norm, mask), 1.0 - mask)
    return ad.div(gram, denom)


def _scalarize(z, h, sigma, out_channels, extra_channels, normalize, tape, batched):
    m = _channels(z)
    zb = z if batched else ad.reshape(z, (1, 3, m)) if isinstance(z, ad.Var) else ad.value_of(z)[None]
    hv = ad.value_of(h)
    hb = h
    if not batched:
        hb = ad.reshape(h, (1, hv.shape[-1])) if isinstance(h, ad.Var) else hv.reshape(1, -1)
    B = ad.value_of(zb).shape[0]
    gram = normalized_gram(zb, normalize=normalize)
    gram_flat = ad.reshape(gram, (B, m * m))
    feats = ad.concat([gram_flat, hb], axis=-1)
    out = _apply_sigma(sigma, feats, tape)
    width = ad.value_of(out).shape[-1]
    need = m * out_channels + extra_channels
    if width != need:
        raise ShapeError(
            f"sigma output width {width} != channels {m}*{out_channels} + extra {extra_channels}"
        )
    v = ad.reshape(ad.narrow(out, -1, 0, m * out_channels), (B, m, out_channels))
    y = ad.matmul(zb, v)
    ex = ad.narrow(out, -1, m * out_channels, extra_channels) if extra_channels else None
    if not batched:
        y = ad.reshape(y, (3, out_channels)) if isinstance(y, ad.Var) else ad.value_of(y)[0]
        if ex is not None:
            ex = ad.reshape(ex, (extra_channels,)) if isinstance(ex, ad.Var) else ad.value_of(ex)[0]
    return y, ex


def scalarize_equivariant(
    z,
    h,
    sigma,
    out_channels: int = 1,
    extra_channels: int = 0,
    normalize: bool = True,
    tape: ad.Tape | None = None,
):
    """Orthogonally equivariant map Z V with V = sigma(gram(Z), h).

    The Gram features are invariant under any orthogonal transform of the
    columns' ambient space, so the output rotates with Z and the extra
    channels (if requested) are invariant.  Returns the geometric output, or
    a (geometric, extras) pair when ``extra_channels > 0``.
    """
    batched = ad.value_of(z).ndim == 3
    y, ex = _scalarize(z, h, sigma, out_channels, extra_channels, normalize, tape, batched)
    return (y, ex) if extra_channels else y


def scalarize_subequivariant(
    z,
    h,
    gravity: Gravity,
    sigma,
    eta,
    out_channels: int = 1,
    extra_channels: int = 0,
    normalize: bool = True,
    tape: ad.Tape | None = None,
):
    """Scalarization of the stack augmented with a learned-scale gravity column.

    The gravity direction is appended as channel m with scale eta(h), so the
    output can leave the span of Z along the vertical axis while staying
    equivariant to rotations/reflections about it.
    """
    if abs(np.linalg.norm(gravity.direction) - 1.0) > 1e-12:
        raise ContractError("gravity direction must be a unit vector")
    batched = ad.value_of(z).ndim == 3
    m = _channels(z)
    zb = z if batched else ad.reshape(z, (1, 3, m)) if isinstance(z, ad.Var) else ad.value_of(z)[None]
    hv = ad.value_of(h)
    hb = h
    if not batched:
        hb = ad.reshape(h, (1, hv.shape[-1])) if isinstance(h, ad.Var) else hv.reshape(1, -1)
    B = ad.value_of(zb).shape[0]
    scale = _apply_sigma(eta, hb, tape)
    if ad.value_of(scale).shape[-1] != 1:
        raise ShapeError("eta must map the scalar features to one real")
    g_col = ad.mul(ad.reshape(scale, (B, 1, 1)), gravity.direction.reshape(3, 1))
    if m:
        z_aug = ad.concat([zb, g_col], axis=-1)
    else:
        z_aug = g_col
    y, ex = _scalarize(z_aug, hb, sigma, out_channels, extra_channels, normalize, tape, True)
    if not batched:
        y = ad.reshape(y, (3, out_channels)) if isinstance(y, ad.Var) else ad.value_of(y)[0]
        if ex is not None:
            ex = ad.reshape(ex, (extra_channels,)) if isinstance(ex, ad.Var) else ad.value_of(ex)[0]
    return (y, ex) if extra_channels else y


# ----------------------------------------------------------------- transforms

def _horizontal_frame(g_dir: np.ndarray) -> np.ndarray:
    """Two orthonormal vectors spanning the plane perpendicular to g_dir."""
    seed = np.array([1.0, 0.0, 0.0])
    if abs(seed @ g_dir) > 0.9:
        seed = np.array([0.0, 1.0, 0.0])
    u = seed - (seed @ g_dir) * g_dir
    u /= np.linalg.norm(u)
    w = np.cross(g_dir, u)
    return np.stack([u, w], axis=1)


def sample_subgroup_transform(
    theta: float,
    reflect: bool = False,
    t: np.ndarray | None = None,
    gravity: Gravity | None = None,
) -> SubgroupTransform:
    """Rotation by ``theta`` about the gravity axis, optionally composed with
    a reflection across a vertical plane containing the axis."""
    g = gravity or Gravity()
    gd = g.direction
    frame = _horizontal_frame(gd)
    basis = np.column_stack([frame[:, 0], frame[:, 1], gd])
    c, s = np.cos(theta), np.sin(theta)
    plane = np.array([[c, -s], [s, c]])
    if reflect:
        plane = plane @ np.array([[1.0, 0.0], [0.0, -1.0]])
    block = np.eye(3)
    block[:2, :2] = plane
    O = basis @ block @ basis.T
    trans = np.zeros(3) if t is None else np.asarray(t, dtype=np.float64)
    return SubgroupTransform(O=O, t=trans)


def random_subgroup_transform(
    rng: np.random.Generator,
    gravity: Gravity | None = None,
    translation_scale: float = 0.0,
) -> SubgroupTransform:
    theta = rng.uniform(0.0, 2.0 * np.pi)
    reflect = bool(rng.integers(0, 2))
    t = rng.normal(0.0, translation_scale, size=3) if translation_scale > 0 else np.zeros(3)
    return sample_subgroup_transform(theta, reflect, t, gravity)


def random_orthogonal(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish O(3) sample (QR with a random reflection)."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if rng.integers(0, 2):
        q[:, 0] = -q[:, 0]
    return q


def horizontal_axis_rotation(rng: np.random.Generator, gravity: Gravity | None = None) -> np.ndarray:
    """Rotation about a horizontal axis: orthogonal, but moves the gravity
    direction (a witness that full orthogonal symmetry does not hold)."""
    g = gravity or Gravity()
    frame = _horizontal_frame(g.direction)
    phi = rng.uniform(0.0, 2.0 * np.pi)
    axis = np.cos(phi) * frame[:, 0] + np.sin(phi) * frame[:, 1]
    angle = rng.uniform(0.25 * np.pi, 0.75 * np.pi)
    k = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def lemma5_witness(z1: np.ndarray, z2: np.ndarray, gravity: Gravity, tol: float = 1e-8) -> SubgroupTransform:
    """Recover an axis-preserving orthogonal map sending z2 to z1.

    Valid whenever the gravity-augmented Gram matrices of the two stacks
    agree: the vertical components must already match, and the horizontal
    parts are aligned with a 2x2 orthogonal Procrustes solve.  The assembled
    map is g g^T plus the horizontal alignment embedded in the horizontal
    plane.  Rank-deficient horizontal parts are fine; the SVD alignment is
    then one of the many consistent choices.
    """
    gd = gravity.direction
    a1 = np.concatenate([np.atleast_2d(z1), gd.reshape(3, 1)], axis=1)
    a2 = np.concatenate([np.atleast_2d(z2), gd.reshape(3, 1)], axis=1)
    if a1.shape != a2.shape:
        raise ShapeError("stacks must have the same channel count")
    if np.max(np.abs(a1.T @ a1 - a2.T @ a2)) > tol:
        raise GramMismatchError("augmented Gram matrices differ beyond tolerance")
    frame = _horizontal_frame(gd)
    beta1 = frame.T @ z1
    beta2 = frame.T @ z2
    u, _, vt = np.linalg.svd(beta1 @ beta2.T)
    o2 = u @ vt
    O = np.outer(gd, gd) + frame @ o2 @ frame.T
    return SubgroupTransform(O=O)


# ----------------------------------------------------- equivariance checking

def check_equivariance(
    fn: Callable,
    inputs: tuple[list[np.ndarray], list[np.ndarray]],
    group: str,
    trials: int = 100,
    seed: int = 0,
    gravity: Gravity | None = None,
    translate: bool = False,
    translation_scale: float = 1.0,
    position_channels: list[int | None] | None = None,
    output_position_channels: list[int | None] | None = None,
) -> float:
    """Max deviation of ``fn`` from commuting with sampled transforms.

    ``fn`` maps (geo_tensors, scalars) to (geo_outputs, scalar_outputs).
    Geometric arrays rotate as column stacks; when ``translate`` is set, the
    sampled translation is added to the listed position channel of each
    tensor (None = tensor does not translate).  Scalars are checked for
    invariance.  ``group`` is one of ``o3``, ``og3`` or ``translation``.
    """
    if group not in ("o3", "og3", "translation"):
        raise ContractError(f"unknown group {group!r}")
    g = gravity or Gravity()
    rng = np.random.default_rng(seed)
    geo_in, sca_in = inputs
    pos_ch = position_channels or [0] * len(geo_in)

    worst = 0.0
    base_geo, base_sca = fn(geo_in, sca_in)
    out_pos = output_position_channels or [0] * len(base_geo)
    for _ in range(trials):
        if group == "o3":
            O = random_orthogonal(rng)
        elif group == "og3":
            O = random_subgroup_transform(rng, g).O
        else:
            O = np.eye(3)
        t = rng.normal(0.0, translation_scale, size=3) if (translate or group == "translation") else np.zeros(3)

        moved = []
        for z, pc in zip(geo_in, pos_ch):
            zt = np.einsum("ab,...bm->...am", O, z)
            if pc is not None and np.any(t):
                zt = zt.copy()
                zt[..., :, pc] += t
            moved.append(zt)
        got_geo, got_sca = fn(moved, sca_in)

        for y0, y1, pc in zip(base_geo, got_geo, out_pos):
            want = np.einsum("ab,...bm->...am", O, y0)
            if pc is not None and np.any(t):
                want = want.copy()
                want[..., :, pc] += t
            worst = max(worst, float(np.max(np.abs(y1 - want))) if want.size else 0.0)
        for s0, s1 in zip(base_sca, got_sca):
            if np.asarray(s0).size:
                worst = max(worst, float(np.max(np.abs(np.asarray(s1) - np.asarray(s0)))))
    return worst
