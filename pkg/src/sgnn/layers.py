"""Object-aware message passing with gravity-axis symmetry.

One layer updates per-particle stacks [x, v] and scalar features by
exchanging messages along an edge list.  Each edge builds a translation
invariant multichannel stack: the sender's and receiver's offsets from
their objects' pooled features plus the pairwise offset, all fed through
gravity-augmented scalarization so outputs stay equivariant to rotations
and reflections about the vertical axis.  Node updates are residual, and
nodes without incident edges are left untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ad
from .errors import ContractError, ShapeError
from .geometry import (
    Gravity,
    ominus,
    scalarize_equivariant,
    scalarize_subequivariant,
)
from .graph import ObjectFeatures
from .mlp import MLP, mlp_forward, mlp_init


@dataclass
class SompParams:
    """Message function, update function and their gravity gates."""

    phi_sigma: MLP | object
    phi_eta: MLP | object
    psi_sigma: MLP | object
    psi_eta: MLP | object
    iterations: int = 4
    msg_channels: int = 2
    msg_extra: int = 16
    node_channels: int = 2
    n_scalar: int = 1
    use_objects: bool = True
    aggregate: str = "sum"
    normalize: bool = True
    equivariant_only: bool = False

    def mlps(self) -> list[MLP]:
        out = []
        for m in (self.phi_sigma, self.phi_eta, self.psi_sigma, self.psi_eta):
            if isinstance(m, MLP):
                out.append(m)
        return out


def edge_stack_width(node_channels: int, use_objects: bool) -> int:
    pair = 2 * node_channels - 1
    if not use_objects:
        return pair
    return pair + 2 * (node_channels + 1)


def make_somp_params(
    rng: np.random.Generator,
    n_scalar: int,
    *,
    node_channels: int = 2,
    hidden: int = 64,
    msg_channels: int = 2,
    msg_extra: int = 16,
    iterations: int = 4,
    use_objects: bool = True,
    activation: str = "silu",
    equivariant_only: bool = False,
    zero_init_update: bool = True,
    eta_hidden: int = 16,
    eta_init: float = 0.05,
    edge_stack_channels: int | None = None,
    edge_scalar_dim: int | None = None,
) -> SompParams:
    """Allocate MLPs with dimensions matching the layer's channel arithmetic.

    ``eta_init`` pins the initial output of the gravity gates; starting near
    the geometric feature scale keeps the augmented Gram well conditioned.
    """
    if n_scalar < 1:
        raise ContractError("need at least one scalar feature channel")
    m_edge = edge_stack_channels if edge_stack_channels is not None else edge_stack_width(
        node_channels, use_objects
    )
    h_edge = edge_scalar_dim if edge_scalar_dim is not None else (
        (4 if use_objects else 2) * n_scalar
    )
    aug = 0 if equivariant_only else 1
    phi_sigma = mlp_init(
        rng,
        [(m_edge + aug) ** 2 + h_edge, hidden, hidden, (m_edge + aug) * msg_channels + msg_extra],
        activation=activation,
    )
    phi_eta = mlp_init(rng, [h_edge, eta_hidden, 1], activation=activation, zero_last=True)
    phi_eta.biases[-1][:] = eta_init
    m_upd = msg_channels + (node_channels + 1 if use_objects else 0)
    s_upd = msg_extra + n_scalar + (n_scalar if use_objects else 0)
    psi_sigma = mlp_init(
        rng,
        [(m_upd + aug) ** 2 + s_upd, hidden, hidden, (m_upd + aug) * node_channels + n_scalar],
        activation=activation,
        zero_last=zero_init_update,
    )
    psi_eta = mlp_init(rng, [s_upd, eta_hidden, 1], activation=activation, zero_last=True)
    psi_eta.biases[-1][:] = eta_init
    return SompParams(
        phi_sigma=phi_sigma,
        phi_eta=phi_eta,
        psi_sigma=psi_sigma,
        psi_eta=psi_eta,
        iterations=iterations,
        msg_channels=msg_channels,
        msg_extra=msg_extra,
        node_channels=node_channels,
        n_scalar=n_scalar,
        use_objects=use_objects,
        equivariant_only=equivariant_only,
    )


def _block(params: SompParams, sigma, eta, stack, scalars, out_channels, extra, gravity, tape):
    if params.equivariant_only:
        return scalarize_equivariant(
            stack, scalars, sigma,
            out_channels=out_channels, extra_channels=extra,
            normalize=params.normalize, tape=tape,
        )
    return scalarize_subequivariant(
        stack, scalars, gravity, sigma, eta,
        out_channels=out_channels, extra_channels=extra,
        normalize=params.normalize, tape=tape,
    )


def somp_forward(
    params: SompParams,
    z,
    h,
    edges: np.ndarray,
    objects: ObjectFeatures | tuple | None = None,
    object_of: np.ndarray | None = None,
    *,
    gravity: Gravity,
    edge_features: tuple | None = None,
    tape: ad.Tape | None = None,
):
    """Run ``params.iterations`` rounds of message passing and return the
    updated (stacks, scalars).

    ``edges`` lists directed (receiver, sender) pairs.  With ``objects`` the
    edge stacks include each endpoint's offset from its object's pooled
    feature; otherwise only the pairwise stack is used.  ``edge_features``
    overrides the per-edge inputs with fixed (stack, scalars), which is how
    the object-level stage consumes features pooled from the particle stage.
    Nodes with no incident edges are returned bit-identically.
    """
    zv = ad.value_of(z)
    n_nodes = zv.shape[0]
    if zv.ndim != 3 or zv.shape[1] != 3 or zv.shape[2] != params.node_channels:
        raise ShapeError(f"node stack must be (N, 3, {params.node_channels}), got {zv.shape}")
    if ad.value_of(h).shape != (n_nodes, params.n_scalar):
        raise ShapeError("scalar features must be (N, n_scalar)")
    if params.use_objects and (objects is None or object_of is None):
        raise ShapeError("object features required when use_objects is set")
    if edges.shape[0] == 0:
        return z, h

    recv = edges[:, 0]
    send = edges[:, 1]
    counts = np.bincount(recv, minlength=n_nodes).astype(np.float64)
    mask = (counts > 0).astype(np.float64)
    mask2 = mask[:, None]
    mask3 = mask[:, None, None]
    denom = np.maximum(counts, 1.0)

    if objects is not None:
        C, c = (objects.C, objects.c) if isinstance(objects, ObjectFeatures) else objects
        c_of = ad.gather(c, object_of) if params.use_objects else None
        C_of = ad.gather(C, object_of) if params.use_objects else None

    for _ in range(params.iterations):
        if edge_features is not None:
            z_edge, h_edge = edge_features
        else:
            zi = ad.gather(z, recv)
            zj = ad.gather(z, send)
            hi = ad.gather(h, recv)
            hj = ad.gather(h, send)
            pair = ominus(zi, zj)
            if params.use_objects:
                Ci = ad.gather(C, object_of[recv])
                Cj = ad.gather(C, object_of[send])
                ci = ad.gather(c, object_of[recv])
                cj = ad.gather(c, object_of[send])
                z_edge = ad.concat([ominus(zi, Ci), ominus(zj, Cj), pair], axis=-1)
                h_edge = ad.concat([hi, ci, hj, cj], axis=-1)
            else:
                z_edge = pair
                h_edge = ad.concat([hi, hj], axis=-1)

        msg_geo, msg_sca = _block(
            params, params.phi_sigma, params.phi_eta, z_edge, h_edge,
            params.msg_channels, params.msg_extra, gravity, tape,
        )
        agg_geo = ad.segment_sum(msg_geo, recv, n_nodes)
        agg_sca = ad.segment_sum(msg_sca, recv, n_nodes)
        if params.aggregate == "mean":
            agg_geo = ad.div(agg_geo, denom[:, None, None])
            agg_sca = ad.div(agg_sca, denom[:, None])

        if params.use_objects:
            upd_stack = ad.concat([agg_geo, ominus(z, C_of)], axis=-1)
            upd_scalars = ad.concat([agg_sca, h, c_of], axis=-1)
        else:
            upd_stack = agg_geo
            upd_scalars = ad.concat([agg_sca, h], axis=-1)

        dz, dh = _block(
            params, params.psi_sigma, params.psi_eta, upd_stack, upd_scalars,
            params.node_channels, params.n_scalar, gravity, tape,
        )
        z = ad.add(z, ad.mul(dz, mask3))
        h = ad.add(h, ad.mul(dh, mask2))
    return z, h


# ------------------------------------------------------------ mask wiring

def masked_sigma(
    inner,
    keep_stack: list[int],
    full_channels: int,
    keep_scalars: list[int],
    out_channels: int,
    extra_channels: int,
    renormalize: bool = False,
):
    """Wrap a smaller layer's sigma so a wider layer reproduces it exactly.

    The wrapper selects the Gram sub-block of the kept stack channels and the
    kept scalar entries, applies ``inner``, and embeds the resulting mixing
    weights back into the full stack with zero rows elsewhere: the dropped
    channels (gravity column, object offsets) contribute nothing to the
    output.  With ``renormalize`` the sub-block is rescaled to unit Frobenius
    norm, matching the smaller layer's own normalization.  Inference-only.
    """
    keep_stack = list(keep_stack)
    keep_scalars = list(keep_scalars)
    sub_m = len(keep_stack)

    def f(x):
        xv = ad.value_of(x)
        B = xv.shape[0]
        gram = xv[:, : full_channels * full_channels].reshape(B, full_channels, full_channels)
        sub = gram[:, keep_stack][:, :, keep_stack]
        if renormalize:
            nrm = np.sqrt((sub * sub).sum(axis=(-2, -1), keepdims=True))
            sub = sub / np.where(nrm >= 1e-12, nrm, 1.0)
        scal = xv[:, full_channels * full_channels :][:, keep_scalars]
        inner_in = np.concatenate([sub.reshape(B, -1), scal], axis=-1)
        out = ad.value_of(mlp_forward(inner, inner_in)) if isinstance(inner, MLP) else ad.value_of(inner(inner_in))
        v_sub = out[:, : sub_m * out_channels].reshape(B, sub_m, out_channels)
        v_full = np.zeros((B, full_channels, out_channels))
        v_full[:, keep_stack] = v_sub
        return np.concatenate(
            [v_full.reshape(B, -1), out[:, sub_m * out_channels :]], axis=-1
        )

    return f
