"""Three-stage hierarchical simulator: cross-object particle messages, an
object-level exchange over pooled interaction features, then within-object
refinement conditioned on the updated object states.  Next positions are the
position channel of the final particle stacks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ad
from .errors import ContractError, RolloutError
from .geometry import Gravity
from .graph import (
    EdgeSets,
    ObjectFeatures,
    ParticleSystem,
    build_edges,
    merged_particle_edges,
    pool_objects,
    pooled_object_edge_features,
)
from .layers import SompParams, make_somp_params, somp_forward
from .mlp import MLP
from .scenes import Trajectory


@dataclass
class SGNNModel:
    """Parameter bundle for the three stages plus wiring flags.

    ``stage3_from_stage1`` feeds the first stage's particle outputs into the
    third stage instead of the frame's original states.  The ablation flags
    turn off the hierarchy (single stage over all edges), zero the pooled
    object features, or run every stage over the shared full edge set.
    """

    stage1: SompParams
    stage2: SompParams | None
    stage3: SompParams | None
    gravity: Gravity = field(default_factory=Gravity)
    cutoff: float = 0.08
    stage3_from_stage1: bool = False
    no_hierarchy: bool = False
    zero_object_features: bool = False
    shared_edges: bool = False
    velocity_scale: float = 1.0  # input normalization for the velocity channel
    variant: str = "sgnn"

    def mlps(self) -> list[MLP]:
        out = list(self.stage1.mlps())
        if not self.no_hierarchy:
            out += self.stage2.mlps() + self.stage3.mlps()
        return out

    def predict(self, system: ParticleSystem, edges: EdgeSets | None = None,
                tape: ad.Tape | None = None):
        if edges is None:
            edges = build_edges(system, self.cutoff)
        return predict_step(self, system, edges, tape=tape)


def make_sgnn_model(
    rng: np.random.Generator,
    n_scalar: int,
    *,
    gravity: Gravity | None = None,
    cutoff: float = 0.08,
    hidden: int = 64,
    msg_channels: int = 2,
    msg_extra: int = 16,
    iterations: int = 4,
    activation: str = "silu",
    equivariant_only: bool = False,
    zero_init_update: bool = True,
    stage3_from_stage1: bool = False,
    no_hierarchy: bool = False,
    zero_object_features: bool = False,
    shared_edges: bool = False,
) -> SGNNModel:
    common = dict(
        hidden=hidden,
        msg_channels=msg_channels,
        msg_extra=msg_extra,
        iterations=iterations,
        activation=activation,
        equivariant_only=equivariant_only,
        zero_init_update=zero_init_update,
    )
    stage1 = make_somp_params(rng, n_scalar, use_objects=True, **common)
    stage2 = stage3 = None
    if not no_hierarchy:
        stage2 = make_somp_params(
            rng, n_scalar, use_objects=False,
            edge_stack_channels=3, edge_scalar_dim=2 * n_scalar, **common,
        )
        stage3 = make_somp_params(rng, n_scalar, use_objects=True, **common)
    return SGNNModel(
        stage1=stage1, stage2=stage2, stage3=stage3,
        gravity=gravity or Gravity(), cutoff=cutoff,
        stage3_from_stage1=stage3_from_stage1,
        no_hierarchy=no_hierarchy,
        zero_object_features=zero_object_features,
        shared_edges=shared_edges,
    )


def predict_step(model: SGNNModel, system: ParticleSystem, edges: EdgeSets,
                 tape: ad.Tape | None = None):
    """One-frame position prediction via the three-stage hierarchy.

    Velocity channels (particle and pooled) are divided by the model's
    ``velocity_scale`` on the way in; only the position channel is read out,
    so the scale is a pure input normalization.
    """
    vs = model.velocity_scale
    z = np.stack([system.positions, system.velocities / vs], axis=-1)
    h = system.attrs
    if tape is not None:
        z = tape.var(z)
        h = tape.var(h)
    feats = pool_objects(system)
    feats = ObjectFeatures(
        C=np.stack([feats.C[:, :, 0], feats.C[:, :, 1] / vs], axis=-1), c=feats.c
    )
    if model.zero_object_features:
        feats = ObjectFeatures(C=np.zeros_like(feats.C), c=np.zeros_like(feats.c))
    object_of = system.object_of
    n = system.n_particles
    merged = merged_particle_edges(edges)

    if model.no_hierarchy:
        z1, _ = somp_forward(
            model.stage1, z, h, merged, objects=feats, object_of=object_of,
            gravity=model.gravity, tape=tape,
        )
        pos = ad.narrow(z1, -1, 0, 1)
        return ad.reshape(pos, (n, 3)) if isinstance(pos, ad.Var) else ad.value_of(pos).reshape(n, 3)

    e1 = merged if model.shared_edges else edges.inter
    z1, h1 = somp_forward(
        model.stage1, z, h, e1, objects=feats, object_of=object_of,
        gravity=model.gravity, tape=tape,
    )

    C2, c2 = feats.C, feats.c
    if edges.obj.shape[0]:
        zpool, hpool = pooled_object_edge_features(z1, h1, edges)
        C2, c2 = somp_forward(
            model.stage2, feats.C if tape is None else tape.var(feats.C),
            feats.c if tape is None else tape.var(feats.c),
            edges.obj, objects=None, object_of=None,
            gravity=model.gravity, edge_features=(zpool, hpool), tape=tape,
        )

    e3 = merged if model.shared_edges else edges.inner
    z3_in, h3_in = (z1, h1) if model.stage3_from_stage1 else (z, h)
    z3, _ = somp_forward(
        model.stage3, z3_in, h3_in, e3, objects=(C2, c2), object_of=object_of,
        gravity=model.gravity, tape=tape,
    )
    pos = ad.narrow(z3, -1, 0, 1)
    return ad.reshape(pos, (n, 3)) if isinstance(pos, ad.Var) else ad.value_of(pos).reshape(n, 3)


# ------------------------------------------------------------------ rollout

@dataclass
class RigidFit:
    """Result of projecting a predicted cloud onto a rigid motion of the
    reference shape."""

    positions: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    translation_only: bool = False
    inlier_mask: np.ndarray | None = None


def _kabsch(reference: np.ndarray, predicted: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
    ref_c = reference.mean(axis=0)
    pred_c = predicted.mean(axis=0)
    a = reference - ref_c
    b = predicted - pred_c
    svals = np.linalg.svd(a, compute_uv=False)
    if svals[1] <= 1e-9 * max(svals[0], 1e-12):
        # collinear reference: rotation is underdetermined
        return np.eye(3), pred_c - ref_c, True
    H = a.T @ b
    u, _, vt = np.linalg.svd(H)
    v = vt.T
    d = np.sign(np.linalg.det(v @ u.T))
    R = v @ np.diag([1.0, 1.0, d]) @ u.T
    t = pred_c - R @ ref_c
    return R, t, False


def rigid_project(
    predicted: np.ndarray,
    reference: np.ndarray,
    ransac: bool = False,
    seed: int = 0,
    inlier_threshold: float = 0.01,
    ransac_iterations: int = 20,
) -> RigidFit:
    """Least-squares rigid motion of ``reference`` matching ``predicted``.

    Proper rotations only (the smallest singular direction is flipped when
    the determinant is negative).  With ``ransac`` the fit is repeated on
    random 4-point subsets and refit on the best inlier set, which discards
    grossly displaced particles.  Collinear references fall back to a
    translation-only fit, flagged on the result.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if predicted.shape != reference.shape or predicted.shape[0] < 3:
        raise ContractError("need matching point sets with at least 3 points")
    n = predicted.shape[0]
    if not ransac:
        R, t, degenerate = _kabsch(reference, predicted)
        return RigidFit(
            positions=reference @ R.T + t,
            rotation=R,
            translation=t,
            translation_only=degenerate,
        )

    rng = np.random.default_rng(seed)
    best_mask = None
    subset_size = min(4, n)
    for _ in range(ransac_iterations):
        idx = rng.choice(n, size=subset_size, replace=False)
        R, t, degenerate = _kabsch(reference[idx], predicted[idx])
        if degenerate:
            continue
        residual = np.linalg.norm(reference @ R.T + t - predicted, axis=1)
        mask = residual < inlier_threshold
        if best_mask is None or mask.sum() > best_mask.sum():
            best_mask = mask
    if best_mask is None or best_mask.sum() < 3:
        best_mask = np.ones(n, dtype=bool)
    R, t, degenerate = _kabsch(reference[best_mask], predicted[best_mask])
    return RigidFit(
        positions=reference @ R.T + t,
        rotation=R,
        translation=t,
        translation_only=degenerate,
        inlier_mask=best_mask,
    )


def rollout(
    model,
    initial: ParticleSystem,
    steps: int,
    *,
    rigid: bool = False,
    rigid_objects: np.ndarray | None = None,
    dt: float = 1.0,
    seed: int = 0,
    ransac: bool = True,
    rebuild_edges: bool = True,
) -> Trajectory:
    """Autoregressive prediction for ``steps`` frames from ``initial``.

    Edges are rebuilt every step by default (``rebuild_edges=False`` freezes
    the initial graph); next-frame velocities are the one-frame position
    differences.  With ``rigid``, each tagged object's predicted cloud is
    replaced by the best rigid motion of its layout in ``initial`` before
    the next step.  Raises ``RolloutError`` on non-finite states.
    """
    if steps < 1:
        raise ContractError("steps must be >= 1")
    n_obj = initial.n_objects
    if rigid_objects is None:
        rigid_objects = np.ones(n_obj, dtype=bool)
    references = [
        initial.positions[initial.object_of == k] for k in range(n_obj)
    ] if rigid else None

    frames = np.zeros((steps + 1, initial.n_particles, 3))
    frames[0] = initial.positions
    system = initial
    frozen = None if rebuild_edges else build_edges(initial, model.cutoff)
    for step in range(steps):
        edges = frozen if frozen is not None else build_edges(system, model.cutoff)
        nxt = np.array(ad.value_of(model.predict(system, edges)))
        if not np.isfinite(nxt).all():
            raise RolloutError(step)
        if rigid:
            for k in range(n_obj):
                if not rigid_objects[k]:
                    continue
                members = system.object_of == k
                fit = rigid_project(
                    nxt[members], references[k], ransac=ransac,
                    seed=seed * 100003 + step * 31 + k,
                )
                nxt[members] = fit.positions
        vel = nxt - system.positions
        system = ParticleSystem(
            positions=nxt, velocities=vel, attrs=system.attrs, object_of=system.object_of
        )
        frames[step + 1] = nxt
    return Trajectory(
        frames=frames, object_of=initial.object_of, attrs=initial.attrs, dt=dt
    )
