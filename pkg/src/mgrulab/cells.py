"""Recurrent cells: update-gated ReLU units, with and without input projection.

All three step functions share one state recipe: a sigmoid update gate z
mixes the previous state with a ReLU candidate,

    h_t = z_t * h_prev + (1 - z_t) * cand_t.

Batch norm can sit on the input-to-hidden pre-activation only, or on both
the input-to-hidden and hidden-to-hidden pre-activations, chosen
independently for the gate and for the candidate. Every placement has a
hand-written backward pass so the whole family is finite-difference
checkable. When a gate-side batch norm is present its beta plays the role
of the gate bias, and b_z is dropped.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .numerics import (
    BNCache,
    BNState,
    ShapeError,
    batch_norm_backward,
    batch_norm_forward,
    bn_state,
    matmul,
    relu,
    relu_backward,
    sigmoid,
    sigmoid_backward,
)


class GateBNMode(Enum):
    """Where batch norm sits on the update-gate pre-activation."""

    NONE = "none"
    ITOH = "itoh"
    BOTH = "both"


class CellBNMode(Enum):
    """Where batch norm sits on the candidate pre-activation.

    A no-norm variant is deliberately absent: the unbounded ReLU needs at
    least its input path normalized to stay stable.
    """

    ITOH = "itoh"
    BOTH = "both"


@dataclass(frozen=True)
class BNConfig:
    """Batch-norm placement for one cell. Default is the hybrid placement:
    gate normalized on the input path only, candidate on both paths."""

    gate: GateBNMode = GateBNMode.ITOH
    cell: CellBNMode = CellBNMode.BOTH


def glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Symmetric uniform init, scale sqrt(6 / (fan_in + fan_out))."""
    a = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-a, a, size=(rows, cols))


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class MGRUParams:
    """Weights for one plain (non-projected) cell layer.

    b_z exists only in the no-BN gate variant; gate-side batch norm
    carries its own shift.
    """

    W_z: np.ndarray  # D_in x N, input to gate
    U_z: np.ndarray  # N x N, state to gate
    b_z: np.ndarray | None  # N
    W_h: np.ndarray  # D_in x N, input to candidate
    U_h: np.ndarray  # N x N, state to candidate
    bn: dict[str, BNState] = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.W_z.shape[0]

    @property
    def cell_count(self) -> int:
        return self.U_z.shape[0]


@dataclass
class MGRUIPParams:
    """Weights for one projected cell layer.

    The input and the previous state are compressed to a shared
    bottleneck v = x @ W_v1 + h_prev @ W_v2 that feeds both the gate and
    the candidate. The same W_z is applied to both halves of v in the
    gate's input-only BN variant.
    """

    W_v1: np.ndarray  # D_in x P, input to projection
    W_v2: np.ndarray  # N x P, state to projection
    W_z: np.ndarray  # P x N, projection to gate
    b_z: np.ndarray | None  # N
    W_h: np.ndarray  # P x N, projection to candidate
    bn: dict[str, BNState] = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.W_v1.shape[0]

    @property
    def cell_count(self) -> int:
        return self.W_v2.shape[0]

    @property
    def projection_dim(self) -> int:
        return self.W_v1.shape[1]


def init_mgru_params(
    d_in: int,
    n: int,
    cfg: BNConfig,
    rng: np.random.Generator,
    bn_momentum: float = 0.1,
    bn_epsilon: float = 1e-5,
) -> MGRUParams:
    """Glorot weights, zero bias, fresh BN states for the configured sites."""
    bn: dict[str, BNState] = {}
    if cfg.gate is not GateBNMode.NONE:
        bn["gate_itoh"] = bn_state(n, bn_momentum, bn_epsilon)
    if cfg.gate is GateBNMode.BOTH:
        bn["gate_htoh"] = bn_state(n, bn_momentum, bn_epsilon)
    bn["cell_itoh"] = bn_state(n, bn_momentum, bn_epsilon)
    if cfg.cell is CellBNMode.BOTH:
        bn["cell_htoh"] = bn_state(n, bn_momentum, bn_epsilon)
    return MGRUParams(
        W_z=glorot(rng, d_in, n),
        U_z=glorot(rng, n, n),
        b_z=np.zeros(n) if cfg.gate is GateBNMode.NONE else None,
        W_h=glorot(rng, d_in, n),
        U_h=glorot(rng, n, n),
        bn=bn,
    )


def init_mgruip_params(
    d_in: int,
    n: int,
    p: int,
    cfg: BNConfig,
    rng: np.random.Generator,
    bn_momentum: float = 0.1,
    bn_epsilon: float = 1e-5,
) -> MGRUIPParams:
    """Glorot weights and fresh BN states for a projected layer."""
    if p < 1:
        raise ValueError(f"projection dim must be positive, got {p}")
    if p >= d_in + n:
        raise ValueError(
            f"projection dim {p} must stay below input+state width {d_in + n} to be a bottleneck"
        )
    bn: dict[str, BNState] = {}
    if cfg.gate is not GateBNMode.NONE:
        bn["gate"] = bn_state(n, bn_momentum, bn_epsilon)
    bn["cell"] = bn_state(n, bn_momentum, bn_epsilon)
    return MGRUIPParams(
        W_v1=glorot(rng, d_in, p),
        W_v2=glorot(rng, n, p),
        W_z=glorot(rng, p, n),
        b_z=np.zeros(n) if cfg.gate is GateBNMode.NONE else None,
        W_h=glorot(rng, p, n),
        bn=bn,
    )


def named_params(params: MGRUParams | MGRUIPParams) -> dict[str, np.ndarray]:
    """Trainable tensors keyed by stable names (weights, bias, BN affine)."""
    out: dict[str, np.ndarray] = {}
    if isinstance(params, MGRUParams):
        weight_names = ("W_z", "U_z", "b_z", "W_h", "U_h")
    else:
        weight_names = ("W_v1", "W_v2", "W_z", "b_z", "W_h")
    for name in weight_names:
        value = getattr(params, name)
        if value is not None:
            out[name] = value
    for site in sorted(params.bn):
        out[f"bn/{site}/gamma"] = params.bn[site].gamma
        out[f"bn/{site}/beta"] = params.bn[site].beta
    return out


def named_bn_stats(params: MGRUParams | MGRUIPParams) -> dict[str, np.ndarray]:
    """Running statistics keyed by stable names (not trainable)."""
    out: dict[str, np.ndarray] = {}
    for site in sorted(params.bn):
        out[f"bn/{site}/running_mean"] = params.bn[site].running_mean
        out[f"bn/{site}/running_var"] = params.bn[site].running_var
    return out


def set_bn_mode(params: MGRUParams | MGRUIPParams, mode: str) -> None:
    for state in params.bn.values():
        state.mode = mode


def zero_grads(params: MGRUParams | MGRUIPParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(value) for name, value in named_params(params).items()}


# ---------------------------------------------------------------------------
# shared pieces


def gate_combine(z: np.ndarray, h_prev: np.ndarray, cand: np.ndarray) -> np.ndarray:
    """Convex mix h = z * h_prev + (1 - z) * cand."""
    return z * h_prev + (1.0 - z) * cand


def gate_combine_backward(grad_h: np.ndarray, z: np.ndarray, h_prev: np.ndarray, cand: np.ndarray):
    """Gradients of the convex mix wrt (z, h_prev, cand)."""
    return grad_h * (h_prev - cand), grad_h * z, grad_h * (1.0 - z)


def _check_step_inputs(x: np.ndarray, h_prev: np.ndarray, d_in: int, n: int, cell: str) -> None:
    if x.ndim != 2 or x.shape[1] != d_in:
        raise ShapeError(f"{cell} step expects input (B, {d_in}), got {x.shape}")
    if h_prev.ndim != 2 or h_prev.shape[1] != n:
        raise ShapeError(f"{cell} step expects state (B, {n}), got {h_prev.shape}")
    if x.shape[0] != h_prev.shape[0]:
        raise ShapeError(
            f"{cell} step batch sizes differ: input {x.shape[0]} vs state {h_prev.shape[0]}"
        )


# ---------------------------------------------------------------------------
# plain cell


@dataclass
class MGRUCache:
    """Single-use intermediates from one mgru_step call."""

    x: np.ndarray
    h_prev: np.ndarray
    z: np.ndarray
    c: np.ndarray  # candidate pre-activation (ReLU input)
    cand: np.ndarray
    bn_caches: dict[str, BNCache]
    gate_overridden: bool


def mgru_step(
    x: np.ndarray,
    h_prev: np.ndarray,
    params: MGRUParams,
    cfg: BNConfig,
    gate_override: np.ndarray | None = None,
):
    """One step of the plain cell.

    gate_override, when given, replaces the computed z (diagnostic hook
    for the convex-combination endpoints; no gate-path gradients flow).
    """
    _check_step_inputs(x, h_prev, params.input_dim, params.cell_count, "mgru")
    bn_caches: dict[str, BNCache] = {}

    if gate_override is not None:
        z = np.broadcast_to(np.asarray(gate_override, dtype=np.float64), h_prev.shape).copy()
    else:
        if cfg.gate is GateBNMode.NONE:
            g = matmul(x, params.W_z) + matmul(h_prev, params.U_z) + params.b_z
        elif cfg.gate is GateBNMode.ITOH:
            gx, bn_caches["gate_itoh"] = batch_norm_forward(matmul(x, params.W_z), params.bn["gate_itoh"])
            g = gx + matmul(h_prev, params.U_z)
        else:
            gx, bn_caches["gate_itoh"] = batch_norm_forward(matmul(x, params.W_z), params.bn["gate_itoh"])
            gh, bn_caches["gate_htoh"] = batch_norm_forward(matmul(h_prev, params.U_z), params.bn["gate_htoh"])
            g = gx + gh
        z = sigmoid(g)

    cx, bn_caches["cell_itoh"] = batch_norm_forward(matmul(x, params.W_h), params.bn["cell_itoh"])
    if cfg.cell is CellBNMode.BOTH:
        ch, bn_caches["cell_htoh"] = batch_norm_forward(matmul(h_prev, params.U_h), params.bn["cell_htoh"])
        c = cx + ch
    else:
        c = cx + matmul(h_prev, params.U_h)
    cand = relu(c)

    h = gate_combine(z, h_prev, cand)
    cache = MGRUCache(
        x=x, h_prev=h_prev, z=z, c=c, cand=cand, bn_caches=bn_caches,
        gate_overridden=gate_override is not None,
    )
    return h, cache


def mgru_backward(grad_h: np.ndarray, cache: MGRUCache, params: MGRUParams, cfg: BNConfig):
    """Gradients of one mgru_step: (grad_x, grad_h_prev, grad_params)."""
    grads = zero_grads(params)
    x, h_prev = cache.x, cache.h_prev

    dz, dh_prev, dcand = gate_combine_backward(grad_h, cache.z, h_prev, cache.cand)
    dx = np.zeros_like(x)

    # candidate path
    dc = relu_backward(dcand, cache.c)
    dcx, dgamma, dbeta = batch_norm_backward(dc, cache.bn_caches["cell_itoh"])
    grads["bn/cell_itoh/gamma"] += dgamma
    grads["bn/cell_itoh/beta"] += dbeta
    grads["W_h"] += x.T @ dcx
    dx += dcx @ params.W_h.T
    if cfg.cell is CellBNMode.BOTH:
        dch, dgamma, dbeta = batch_norm_backward(dc, cache.bn_caches["cell_htoh"])
        grads["bn/cell_htoh/gamma"] += dgamma
        grads["bn/cell_htoh/beta"] += dbeta
        grads["U_h"] += h_prev.T @ dch
        dh_prev += dch @ params.U_h.T
    else:
        grads["U_h"] += h_prev.T @ dc
        dh_prev += dc @ params.U_h.T

    # gate path (absent when the gate was overridden)
    if not cache.gate_overridden:
        dg = sigmoid_backward(dz, cache.z)
        if cfg.gate is GateBNMode.NONE:
            grads["W_z"] += x.T @ dg
            grads["U_z"] += h_prev.T @ dg
            grads["b_z"] += dg.sum(axis=0)
            dx += dg @ params.W_z.T
            dh_prev += dg @ params.U_z.T
        elif cfg.gate is GateBNMode.ITOH:
            dgx, dgamma, dbeta = batch_norm_backward(dg, cache.bn_caches["gate_itoh"])
            grads["bn/gate_itoh/gamma"] += dgamma
            grads["bn/gate_itoh/beta"] += dbeta
            grads["W_z"] += x.T @ dgx
            dx += dgx @ params.W_z.T
            grads["U_z"] += h_prev.T @ dg
            dh_prev += dg @ params.U_z.T
        else:
            dgx, dgamma, dbeta = batch_norm_backward(dg, cache.bn_caches["gate_itoh"])
            grads["bn/gate_itoh/gamma"] += dgamma
            grads["bn/gate_itoh/beta"] += dbeta
            grads["W_z"] += x.T @ dgx
            dx += dgx @ params.W_z.T
            dgh, dgamma, dbeta = batch_norm_backward(dg, cache.bn_caches["gate_htoh"])
            grads["bn/gate_htoh/gamma"] += dgamma
            grads["bn/gate_htoh/beta"] += dbeta
            grads["U_z"] += h_prev.T @ dgh
            dh_prev += dgh @ params.U_z.T

    return dx, dh_prev, grads


# ---------------------------------------------------------------------------
# projected cell


@dataclass
class MGRUIPCache:
    """Single-use intermediates from one mgruip_step call."""

    x: np.ndarray
    h_prev: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    v: np.ndarray
    z: np.ndarray
    c: np.ndarray
    cand: np.ndarray
    bn_caches: dict[str, BNCache]
    gate_overridden: bool


def mgruip_step(
    x: np.ndarray,
    h_prev: np.ndarray,
    params: MGRUIPParams,
    cfg: BNConfig,
    gate_override: np.ndarray | None = None,
):
    """One step of the projected cell.

    The gate variants differ in what gets normalized: nothing (plain
    affine on v with a bias), the input half W_z @ v1 only (the state
    half W_z @ v2 is added raw, same matrix), or the full W_z @ v.
    """
    _check_step_inputs(x, h_prev, params.input_dim, params.cell_count, "mgruip")
    bn_caches: dict[str, BNCache] = {}

    v1 = matmul(x, params.W_v1)
    v2 = matmul(h_prev, params.W_v2)
    v = v1 + v2

    if gate_override is not None:
        z = np.broadcast_to(np.asarray(gate_override, dtype=np.float64), h_prev.shape).copy()
    else:
        if cfg.gate is GateBNMode.NONE:
            g = matmul(v, params.W_z) + params.b_z
        elif cfg.gate is GateBNMode.ITOH:
            g1, bn_caches["gate"] = batch_norm_forward(matmul(v1, params.W_z), params.bn["gate"])
            g = g1 + matmul(v2, params.W_z)
        else:
            g, bn_caches["gate"] = batch_norm_forward(matmul(v, params.W_z), params.bn["gate"])
        z = sigmoid(g)

    if cfg.cell is CellBNMode.BOTH:
        c, bn_caches["cell"] = batch_norm_forward(matmul(v, params.W_h), params.bn["cell"])
    else:
        c1, bn_caches["cell"] = batch_norm_forward(matmul(v1, params.W_h), params.bn["cell"])
        c = c1 + matmul(v2, params.W_h)
    cand = relu(c)

    h = gate_combine(z, h_prev, cand)
    cache = MGRUIPCache(
        x=x, h_prev=h_prev, v1=v1, v2=v2, v=v, z=z, c=c, cand=cand,
        bn_caches=bn_caches, gate_overridden=gate_override is not None,
    )
    return h, cache


def mgruip_backward(grad_h: np.ndarray, cache: MGRUIPCache, params: MGRUIPParams, cfg: BNConfig):
    """Gradients of one mgruip_step: (grad_x, grad_h_prev, grad_params)."""
    grads = zero_grads(params)
    x, h_prev = cache.x, cache.h_prev
    v1, v2, v = cache.v1, cache.v2, cache.v

    dz, dh_prev, dcand = gate_combine_backward(grad_h, cache.z, h_prev, cache.cand)
    dv1 = np.zeros_like(v1)
    dv2 = np.zeros_like(v2)
    dv = np.zeros_like(v)

    # candidate path
    dc = relu_backward(dcand, cache.c)
    if cfg.cell is CellBNMode.BOTH:
        dq, dgamma, dbeta = batch_norm_backward(dc, cache.bn_caches["cell"])
        grads["bn/cell/gamma"] += dgamma
        grads["bn/cell/beta"] += dbeta
        grads["W_h"] += v.T @ dq
        dv += dq @ params.W_h.T
    else:
        dq1, dgamma, dbeta = batch_norm_backward(dc, cache.bn_caches["cell"])
        grads["bn/cell/gamma"] += dgamma
        grads["bn/cell/beta"] += dbeta
        grads["W_h"] += v1.T @ dq1 + v2.T @ dc
        dv1 += dq1 @ params.W_h.T
        dv2 += dc @ params.W_h.T

    # gate path (absent when the gate was overridden)
    if not cache.gate_overridden:
        dg = sigmoid_backward(dz, cache.z)
        if cfg.gate is GateBNMode.NONE:
            grads["W_z"] += v.T @ dg
            grads["b_z"] += dg.sum(axis=0)
            dv += dg @ params.W_z.T
        elif cfg.gate is GateBNMode.ITOH:
            dp1, dgamma, dbeta = batch_norm_backward(dg, cache.bn_caches["gate"])
            grads["bn/gate/gamma"] += dgamma
            grads["bn/gate/beta"] += dbeta
            grads["W_z"] += v1.T @ dp1 + v2.T @ dg  # same matrix on both halves
            dv1 += dp1 @ params.W_z.T
            dv2 += dg @ params.W_z.T
        else:
            dp, dgamma, dbeta = batch_norm_backward(dg, cache.bn_caches["gate"])
            grads["bn/gate/gamma"] += dgamma
            grads["bn/gate/beta"] += dbeta
            grads["W_z"] += v.T @ dp
            dv += dp @ params.W_z.T

    # v = v1 + v2 fans the shared contribution out to both halves
    dv1 += dv
    dv2 += dv
    grads["W_v1"] += x.T @ dv1
    grads["W_v2"] += h_prev.T @ dv2
    dx = dv1 @ params.W_v1.T
    dh_prev += dv2 @ params.W_v2.T

    return dx, dh_prev, grads


def mgruip_ctx_step(
    x_spliced: np.ndarray,
    h_prev: np.ndarray,
    params: MGRUIPParams,
    cfg: BNConfig,
    gate_override: np.ndarray | None = None,
):
    """Projected-cell step on a spliced input frame.

    Splicing itself lives in the context module; by the time a frame
    reaches the cell it is an ordinary (wider) input vector, so the step
    body is exactly the projected cell's.
    """
    return mgruip_step(x_spliced, h_prev, params, cfg, gate_override=gate_override)
