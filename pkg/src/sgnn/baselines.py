"""Comparison layers: raw-coordinate message passing (GNS-style), distance
scalarization (EGNN-style) and multichannel scalarization (GMN-style), each
with an optional gravity term that trades full orthogonal equivariance for
equivariance about the vertical axis only.

All variants share the residual/masking conventions of the object-aware
layer so the expressivity-ordering constructions compare like with like.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ad
from .errors import ShapeError
from .geometry import Gravity, ominus, scalarize_equivariant, scalarize_subequivariant
from .graph import ParticleSystem, build_edges, merged_particle_edges
from .mlp import MLP, mlp_forward, mlp_init


def _edge_mask(edges: np.ndarray, n_nodes: int):
    counts = np.bincount(edges[:, 0], minlength=n_nodes).astype(np.float64)
    return (counts > 0).astype(np.float64)


# ----------------------------------------------------------------- GNS-style

@dataclass
class GNSParams:
    phi: MLP  # raw edge features -> message
    psi: MLP  # aggregated message + node features -> residual
    iterations: int = 10
    msg_dim: int = 64
    n_scalar: int = 1
    aggregate: str = "sum"

    def mlps(self) -> list[MLP]:
        return [self.phi, self.psi]


def make_gns_params(
    rng: np.random.Generator,
    n_scalar: int,
    *,
    hidden: int = 64,
    msg_dim: int = 64,
    iterations: int = 10,
    activation: str = "relu",
    zero_init_update: bool = True,
) -> GNSParams:
    phi = mlp_init(rng, [9 + 2 * n_scalar, hidden, hidden, msg_dim], activation=activation)
    psi = mlp_init(
        rng,
        [msg_dim + 3 + n_scalar, hidden, hidden, 6 + n_scalar],
        activation=activation,
        zero_last=zero_init_update,
    )
    return GNSParams(phi=phi, psi=psi, iterations=iterations, msg_dim=msg_dim, n_scalar=n_scalar)


def gns_forward(params: GNSParams, x, v, h, edges: np.ndarray, tape: ad.Tape | None = None):
    """Raw-coordinate message passing: relative positions and velocities are
    fed to the MLP directly, so only translation symmetry is preserved."""
    n = ad.value_of(x).shape[0]
    if edges.shape[0] == 0:
        return x, v, h
    recv, send = edges[:, 0], edges[:, 1]
    mask = _edge_mask(edges, n)[:, None]
    denom = np.maximum(np.bincount(recv, minlength=n), 1.0)[:, None]
    for _ in range(params.iterations):
        rel = ad.sub(ad.gather(x, recv), ad.gather(x, send))
        feats = ad.concat(
            [rel, ad.gather(v, recv), ad.gather(v, send), ad.gather(h, recv), ad.gather(h, send)],
            axis=-1,
        )
        msg = mlp_forward(params.phi, feats, tape=tape)
        agg = ad.segment_sum(msg, recv, n)
        if params.aggregate == "mean":
            agg = ad.div(agg, denom)
        upd = mlp_forward(params.psi, ad.concat([agg, v, h], axis=-1), tape=tape)
        dx = ad.narrow(upd, -1, 0, 3)
        dv = ad.narrow(upd, -1, 3, 3)
        dh = ad.narrow(upd, -1, 6, params.n_scalar)
        x = ad.add(x, ad.mul(dx, mask))
        v = ad.add(v, ad.mul(dv, mask))
        h = ad.add(h, ad.mul(dh, mask))
    return x, v, h


# ---------------------------------------------------------------- EGNN-style

@dataclass
class EGNNParams:
    phi_m: MLP  # squared distance + endpoint scalars -> message
    phi_x: MLP  # message -> coordinate weight
    phi_v: MLP  # node scalars -> velocity gate
    phi_h: MLP  # node scalars + aggregated message -> scalar residual
    phi_g: MLP  # node scalars -> gravity weight
    iterations: int = 10
    msg_dim: int = 64
    n_scalar: int = 1
    subequivariant: bool = False
    aggregate: str = "sum"

    def mlps(self) -> list[MLP]:
        return [self.phi_m, self.phi_x, self.phi_v, self.phi_h, self.phi_g]


def make_egnn_params(
    rng: np.random.Generator,
    n_scalar: int,
    *,
    hidden: int = 64,
    msg_dim: int = 64,
    iterations: int = 10,
    activation: str = "silu",
    subequivariant: bool = False,
    zero_init_update: bool = True,
) -> EGNNParams:
    phi_m = mlp_init(rng, [1 + 2 * n_scalar, hidden, hidden, msg_dim], activation=activation)
    phi_x = mlp_init(rng, [msg_dim, hidden, 1], activation=activation, zero_last=zero_init_update)
    phi_v = mlp_init(rng, [n_scalar, hidden, 1], activation=activation, zero_last=zero_init_update)
    phi_h = mlp_init(
        rng, [n_scalar + msg_dim, hidden, n_scalar], activation=activation,
        zero_last=zero_init_update,
    )
    phi_g = mlp_init(rng, [n_scalar, hidden, 1], activation=activation, zero_last=zero_init_update)
    return EGNNParams(
        phi_m=phi_m, phi_x=phi_x, phi_v=phi_v, phi_h=phi_h, phi_g=phi_g,
        iterations=iterations, msg_dim=msg_dim, n_scalar=n_scalar,
        subequivariant=subequivariant,
    )


def egnn_forward(
    params: EGNNParams,
    x,
    v,
    h,
    edges: np.ndarray,
    gravity: Gravity | None = None,
    tape: ad.Tape | None = None,
    velocity_scale: float = 1.0,
):
    """Distance-scalarized updates; with ``subequivariant`` set an extra
    learned multiple of the gravity direction enters the velocity update.

    ``v`` is expected in units of ``velocity_scale`` (an input normalization);
    the position update multiplies the scale back in.
    """
    n = ad.value_of(x).shape[0]
    if edges.shape[0] == 0:
        return x, v, h
    if params.subequivariant and gravity is None:
        raise ShapeError("gravity required for the subequivariant variant")
    recv, send = edges[:, 0], edges[:, 1]
    mask = _edge_mask(edges, n)[:, None]
    denom = np.maximum(np.bincount(recv, minlength=n), 1.0)[:, None]
    for _ in range(params.iterations):
        rel = ad.sub(ad.gather(x, recv), ad.gather(x, send))
        d2 = ad.sum_(ad.mul(rel, rel), axis=-1, keepdims=True)
        msg = mlp_forward(
            params.phi_m,
            ad.concat([d2, ad.gather(h, recv), ad.gather(h, send)], axis=-1),
            tape=tape,
        )
        coord_w = mlp_forward(params.phi_x, msg, tape=tape)
        agg_geo = ad.segment_sum(ad.mul(rel, coord_w), recv, n)
        agg_msg = ad.segment_sum(msg, recv, n)
        if params.aggregate == "mean":
            agg_geo = ad.div(agg_geo, denom)
            agg_msg = ad.div(agg_msg, denom)
        v_new = ad.add(ad.mul(mlp_forward(params.phi_v, h, tape=tape), v), agg_geo)
        if params.subequivariant:
            g_term = ad.mul(mlp_forward(params.phi_g, h, tape=tape), gravity.direction[None, :])
            v_new = ad.add(v_new, g_term)
        v = ad.add(v, ad.mul(ad.sub(v_new, v), mask))
        x = ad.add(x, ad.mul(ad.mul(v_new, velocity_scale), mask))
        h = ad.add(
            h,
            ad.mul(mlp_forward(params.phi_h, ad.concat([h, agg_msg], axis=-1), tape=tape), mask),
        )
    return x, v, h


# ----------------------------------------------------------------- GMN-style

@dataclass
class GMNParams:
    sigma_msg: MLP | object
    sigma_upd: MLP | object
    eta_msg: MLP | object
    eta_upd: MLP | object
    iterations: int = 10
    msg_channels: int = 2
    msg_extra: int = 16
    n_scalar: int = 1
    subequivariant: bool = False
    normalize: bool = True
    aggregate: str = "sum"

    def mlps(self) -> list[MLP]:
        out = []
        for m in (self.sigma_msg, self.sigma_upd, self.eta_msg, self.eta_upd):
            if isinstance(m, MLP):
                out.append(m)
        return out


def make_gmn_params(
    rng: np.random.Generator,
    n_scalar: int,
    *,
    hidden: int = 64,
    msg_channels: int = 2,
    msg_extra: int = 16,
    iterations: int = 10,
    activation: str = "silu",
    subequivariant: bool = False,
    zero_init_update: bool = True,
    eta_hidden: int = 16,
    eta_init: float = 0.05,
    normalize: bool = True,
) -> GMNParams:
    aug = 1 if subequivariant else 0
    sigma_msg = mlp_init(
        rng,
        [(3 + aug) ** 2 + 2 * n_scalar, hidden, hidden, (3 + aug) * msg_channels + msg_extra],
        activation=activation,
    )
    m_upd = msg_channels + 1
    sigma_upd = mlp_init(
        rng,
        [(m_upd + aug) ** 2 + msg_extra + n_scalar, hidden, hidden, (m_upd + aug) * 2 + n_scalar],
        activation=activation,
        zero_last=zero_init_update,
    )
    eta_msg = mlp_init(rng, [2 * n_scalar, eta_hidden, 1], activation=activation, zero_last=True)
    eta_upd = mlp_init(rng, [msg_extra + n_scalar, eta_hidden, 1], activation=activation,
                       zero_last=True)
    eta_msg.biases[-1][:] = eta_init
    eta_upd.biases[-1][:] = eta_init
    return GMNParams(
        sigma_msg=sigma_msg, sigma_upd=sigma_upd, eta_msg=eta_msg, eta_upd=eta_upd,
        iterations=iterations, msg_channels=msg_channels, msg_extra=msg_extra,
        n_scalar=n_scalar, subequivariant=subequivariant, normalize=normalize,
    )


def _gmn_block(params: GMNParams, sigma, eta, stack, scalars, out_channels, extra, gravity, tape):
    if params.subequivariant:
        return scalarize_subequivariant(
            stack, scalars, gravity, sigma, eta,
            out_channels=out_channels, extra_channels=extra,
            normalize=params.normalize, tape=tape,
        )
    return scalarize_equivariant(
        stack, scalars, sigma,
        out_channels=out_channels, extra_channels=extra,
        normalize=params.normalize, tape=tape,
    )


def gmn_forward(
    params: GMNParams,
    z,
    h,
    edges: np.ndarray,
    gravity: Gravity | None = None,
    tape: ad.Tape | None = None,
):
    """Multichannel scalarization on the pairwise stack [x_i - x_j, v_i, v_j];
    the update recombines aggregated messages with the node's own velocity
    channel.  ``z`` is the (N, 3, 2) stack of [position, velocity]."""
    zv = ad.value_of(z)
    n = zv.shape[0]
    if zv.ndim != 3 or zv.shape[1:] != (3, 2):
        raise ShapeError(f"node stack must be (N, 3, 2), got {zv.shape}")
    if edges.shape[0] == 0:
        return z, h
    if params.subequivariant and gravity is None:
        raise ShapeError("gravity required for the subequivariant variant")
    recv, send = edges[:, 0], edges[:, 1]
    mask = _edge_mask(edges, n)
    mask2 = mask[:, None]
    mask3 = mask[:, None, None]
    denom = np.maximum(np.bincount(recv, minlength=n), 1.0)
    for _ in range(params.iterations):
        pair = ominus(ad.gather(z, recv), ad.gather(z, send))
        h_edge = ad.concat([ad.gather(h, recv), ad.gather(h, send)], axis=-1)
        msg_geo, msg_sca = _gmn_block(
            params, params.sigma_msg, params.eta_msg, pair, h_edge,
            params.msg_channels, params.msg_extra, gravity, tape,
        )
        agg_geo = ad.segment_sum(msg_geo, recv, n)
        agg_sca = ad.segment_sum(msg_sca, recv, n)
        if params.aggregate == "mean":
            agg_geo = ad.div(agg_geo, denom[:, None, None])
            agg_sca = ad.div(agg_sca, denom[:, None])
        upd_stack = ad.concat([agg_geo, ad.narrow(z, -1, 1, 1)], axis=-1)
        upd_scalars = ad.concat([agg_sca, h], axis=-1)
        dz, dh = _gmn_block(
            params, params.sigma_upd, params.eta_upd, upd_stack, upd_scalars,
            2, params.n_scalar, gravity, tape,
        )
        z = ad.add(z, ad.mul(dz, mask3))
        h = ad.add(h, ad.mul(dh, mask2))
    return z, h


# ----------------------------------------------------------- model wrappers

BASELINE_VARIANTS = ("gns", "egnn", "egnn_s", "gmn", "gmn_s")


@dataclass
class BaselineModel:
    """A baseline layer stack plus scene-facing plumbing."""

    variant: str
    params: GNSParams | EGNNParams | GMNParams
    gravity: Gravity = field(default_factory=Gravity)
    cutoff: float = 0.08
    velocity_scale: float = 1.0

    def mlps(self) -> list[MLP]:
        return self.params.mlps()

    def predict(self, system: ParticleSystem, edges=None, tape: ad.Tape | None = None):
        """Next positions for one frame (uses the merged cutoff graph)."""
        if edges is None:
            edges = build_edges(system, self.cutoff)
        merged = merged_particle_edges(edges)
        h = system.attrs
        vel = system.velocities / self.velocity_scale
        if self.variant == "gns":
            x, v, hh = gns_forward(
                self.params, system.positions, vel, h, merged, tape=tape
            )
            return x
        if self.variant in ("egnn", "egnn_s"):
            x, v, hh = egnn_forward(
                self.params, system.positions, vel, h, merged,
                gravity=self.gravity, tape=tape, velocity_scale=self.velocity_scale,
            )
            return x
        if self.variant in ("gmn", "gmn_s"):
            z = np.stack([system.positions, vel], axis=-1)
            if tape is not None:
                z = tape.var(z)
            z2, _ = gmn_forward(self.params, z, h, merged, gravity=self.gravity, tape=tape)
            pos = ad.narrow(z2, -1, 0, 1)
            n = system.n_particles
            return ad.reshape(pos, (n, 3)) if isinstance(pos, ad.Var) else ad.value_of(pos).reshape(n, 3)
        raise ShapeError(f"unknown baseline variant {self.variant!r}")


def make_baseline(
    variant: str,
    rng: np.random.Generator,
    n_scalar: int,
    *,
    gravity: Gravity | None = None,
    cutoff: float = 0.08,
    hidden: int = 64,
    iterations: int = 10,
    **kwargs,
) -> BaselineModel:
    if variant not in BASELINE_VARIANTS:
        raise ShapeError(f"unknown baseline variant {variant!r}")
    g = gravity or Gravity()
    if variant == "gns":
        params = make_gns_params(rng, n_scalar, hidden=hidden, iterations=iterations, **kwargs)
    elif variant in ("egnn", "egnn_s"):
        params = make_egnn_params(
            rng, n_scalar, hidden=hidden, iterations=iterations,
            subequivariant=(variant == "egnn_s"), **kwargs,
        )
    else:
        params = make_gmn_params(
            rng, n_scalar, hidden=hidden, iterations=iterations,
            subequivariant=(variant == "gmn_s"), **kwargs,
        )
    return BaselineModel(variant=variant, params=params, gravity=g, cutoff=cutoff)
