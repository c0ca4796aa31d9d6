"""Particle interaction graphs: cutoff edges, object pooling, edge separation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ad
from .errors import ContractError, ShapeError
from .geometry import ominus


@dataclass
class ParticleSystem:
    """One frame of a particle scene.

    velocities are per-frame displacements (finite differences of recorded
    positions), attrs are per-particle invariant features, object_of maps
    each particle to its object index.
    """

    positions: np.ndarray  # (N, 3)
    velocities: np.ndarray  # (N, 3)
    attrs: np.ndarray  # (N, n)
    object_of: np.ndarray  # (N,) int

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.velocities = np.asarray(self.velocities, dtype=np.float64)
        self.attrs = np.atleast_2d(np.asarray(self.attrs, dtype=np.float64))
        self.object_of = np.asarray(self.object_of, dtype=np.int64)
        n = self.positions.shape[0]
        if self.positions.shape != (n, 3) or self.velocities.shape != (n, 3):
            raise ShapeError("positions/velocities must be (N, 3)")
        if self.attrs.shape[0] != n or self.object_of.shape != (n,):
            raise ShapeError("attrs/object_of must have N rows")
        if not (np.isfinite(self.positions).all() and np.isfinite(self.velocities).all()):
            raise ContractError("non-finite positions or velocities")
        if n:
            m = int(self.object_of.max()) + 1
            if self.object_of.min() < 0:
                raise ContractError("negative object index")
            counts = np.bincount(self.object_of, minlength=m)
            if (counts == 0).any():
                raise ContractError("every object must own at least one particle")

    @property
    def n_particles(self) -> int:
        return self.positions.shape[0]

    @property
    def n_objects(self) -> int:
        return int(self.object_of.max()) + 1 if self.n_particles else 0

    def geometric_stack(self) -> np.ndarray:
        """Per-particle stack [position, velocity] of shape (N, 3, 2)."""
        return np.stack([self.positions, self.velocities], axis=-1)


@dataclass
class EdgeSets:
    """Cutoff graph split into cross-object, within-object and object edges.

    Particle edge lists are directed and symmetric ((i, j) implies (j, i)),
    sorted lexicographically.  ``obj`` holds the object pairs bridged by at
    least one inter edge; ``inter_to_obj`` maps each inter edge to its row in
    ``obj``.
    """

    inter: np.ndarray  # (Ei, 2) int
    inner: np.ndarray  # (Ew, 2) int
    obj: np.ndarray  # (K, 2) int
    inter_to_obj: np.ndarray = field(default_factory=lambda: np.zeros((0,), dtype=np.int64))


def _empty_edges() -> np.ndarray:
    return np.zeros((0, 2), dtype=np.int64)


def build_edges(system: ParticleSystem, r: float) -> EdgeSets:
    """All directed particle pairs closer than ``r``, partitioned by object.

    Cell-list spatial hashing; expected O(N) for bounded density.  Ordering
    is lexicographic by (i, j) so downstream aggregation is reproducible.
    """
    if r <= 0:
        raise ContractError("cutoff radius must be positive")
    pos = system.positions
    n = pos.shape[0]
    cells: dict[tuple[int, int, int], list[int]] = {}
    # clip so degenerate (diverged) coordinates cannot overflow the cell key;
    # far-out particles share boundary cells and the exact distance test
    # still filters them
    keys = np.floor(np.clip(pos / r, -2.0**31, 2.0**31)).astype(np.int64)
    for i in range(n):
        cells.setdefault(tuple(keys[i]), []).append(i)

    senders: list[int] = []
    receivers: list[int] = []
    r2 = r * r
    for i in range(n):
        kx, ky, kz = keys[i]
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    bucket = cells.get((kx + dx, ky + dy, kz + dz))
                    if not bucket:
                        continue
                    for j in bucket:
                        if j == i:
                            continue
                        d = pos[i] - pos[j]
                        if d @ d < r2:
                            senders.append(i)
                            receivers.append(j)
    if not senders:
        return EdgeSets(inter=_empty_edges(), inner=_empty_edges(), obj=_empty_edges())

    edges = np.stack([np.asarray(senders), np.asarray(receivers)], axis=1)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    edges = edges[order]
    same = system.object_of[edges[:, 0]] == system.object_of[edges[:, 1]]
    inner = edges[same]
    inter = edges[~same]

    if inter.shape[0]:
        pairs = np.stack(
            [system.object_of[inter[:, 0]], system.object_of[inter[:, 1]]], axis=1
        )
        obj, inter_to_obj = np.unique(pairs, axis=0, return_inverse=True)
    else:
        obj = _empty_edges()
        inter_to_obj = np.zeros((0,), dtype=np.int64)
    return EdgeSets(inter=inter, inner=inner, obj=obj, inter_to_obj=inter_to_obj.reshape(-1))


def merged_particle_edges(edges: EdgeSets) -> np.ndarray:
    """All particle edges (inter plus inner) in lexicographic order."""
    if edges.inter.shape[0] == 0:
        return edges.inner
    if edges.inner.shape[0] == 0:
        return edges.inter
    both = np.concatenate([edges.inter, edges.inner], axis=0)
    order = np.lexsort((both[:, 1], both[:, 0]))
    return both[order]


@dataclass
class ObjectFeatures:
    """Per-object pooled state: mean geometric stack, summed scalars."""

    C: np.ndarray  # (M, 3, 2)
    c: np.ndarray  # (M, n)


def pool_objects(system: ParticleSystem) -> ObjectFeatures:
    """Mean-pool [x, v] and sum-pool attrs over each object's particles."""
    m = system.n_objects
    if m == 0:
        raise ContractError("cannot pool an empty system")
    counts = np.bincount(system.object_of, minlength=m).astype(np.float64)
    if (counts == 0).any():
        raise ContractError("every object must own at least one particle")
    stack = system.geometric_stack()
    C = np.zeros((m, 3, 2))
    np.add.at(C, system.object_of, stack)
    C /= counts[:, None, None]
    c = np.zeros((m, system.attrs.shape[1]))
    np.add.at(c, system.object_of, system.attrs)
    return ObjectFeatures(C=C, c=c)


def pooled_object_edge_features(z, h, edges: EdgeSets):
    """Object-edge features from updated particle states.

    For each object pair (k, l) the geometric feature is the mean of the
    per-edge stacks z_i (-) z_j over the inter edges bridging k and l, and
    the scalar feature is the matching mean of [h_i, h_j].  Differentiable:
    feeds the object stage from the first particle stage's outputs.
    """
    n_obj_edges = edges.obj.shape[0]
    if n_obj_edges == 0:
        raise ContractError("no object edges to pool")
    src = edges.inter[:, 0]
    dst = edges.inter[:, 1]
    zi = ad.gather(z, src)
    zj = ad.gather(z, dst)
    per_edge = ominus(zi, zj)
    hi = ad.gather(h, src)
    hj = ad.gather(h, dst)
    per_edge_h = ad.concat([hi, hj], axis=-1)
    counts = np.bincount(edges.inter_to_obj, minlength=n_obj_edges).astype(np.float64)
    zsum = ad.segment_sum(per_edge, edges.inter_to_obj, n_obj_edges)
    hsum = ad.segment_sum(per_edge_h, edges.inter_to_obj, n_obj_edges)
    zmean = ad.div(zsum, counts[:, None, None])
    hmean = ad.div(hsum, counts[:, None])
    return zmean, hmean


def object_level_ominus(z: np.ndarray, edges: EdgeSets, k: int, l: int) -> np.ndarray:
    """Mean of particle-level (-) stacks over the inter edges from object k
    to object l.  ``z`` holds the updated per-particle stacks (N, 3, m)."""
    rows = np.nonzero(
        (edges.obj[:, 0] == k) & (edges.obj[:, 1] == l)
    )[0]
    if rows.size == 0:
        raise ContractError(f"objects ({k}, {l}) share no inter edges")
    mask = edges.inter_to_obj == rows[0]
    src = edges.inter[mask, 0]
    dst = edges.inter[mask, 1]
    stacks = [ominus(z[i], z[j]) for i, j in zip(src, dst)]
    return np.mean(np.stack(stacks, axis=0), axis=0)
