"""Recurrent cells: GRU, MiRU-1 and MiRU-2.

All three share one parameter layout. Each *block* owns an input matrix
``W`` (n_h x n_x), a recurrent matrix ``U`` (n_h x n_h) and a bias ``b``.
The GRU has blocks ``r``, ``z`` and ``h``; MiRU-1 keeps ``r`` and ``h`` and
swaps the update gate for a fixed per-unit coefficient ``lam``; MiRU-2
keeps only ``h`` and also swaps the reset gate for a fixed ``beta``.

``lam`` and ``beta`` are hyperparameters. They never appear in
:meth:`CellParams.tensors`, so neither optimizers nor gradient code can
touch them.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .numerics import DEFAULT_DTYPE, ContractError, Rng, sigmoid


class CellKind(str, enum.Enum):
    GRU = "gru"
    MIRU1 = "miru1"
    MIRU2 = "miru2"

    @classmethod
    def parse(cls, value) -> "CellKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "").replace("_", "")
        for kind in cls:
            if kind.value == key:
                return kind
        raise ContractError(f"unknown cell kind {value!r}")


# gate blocks first, candidate block last; this is also the row order of
# the stacked input matrix used by the sequence model
BLOCKS = {
    CellKind.GRU: ("r", "z", "h"),
    CellKind.MIRU1: ("r", "h"),
    CellKind.MIRU2: ("h",),
}


@dataclass
class Block:
    W: np.ndarray
    U: np.ndarray
    b: np.ndarray


@dataclass
class CellParams:
    kind: CellKind
    n_x: int
    n_h: int
    blocks: dict[str, Block]
    lam: np.ndarray | None = None
    beta: np.ndarray | None = None

    @property
    def dtype(self):
        return self.blocks["h"].W.dtype

    def tensors(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name. The arrays are the live storage."""
        out = {}
        for name in BLOCKS[self.kind]:
            blk = self.blocks[name]
            out[f"{name}.W"] = blk.W
            out[f"{name}.U"] = blk.U
            out[f"{name}.b"] = blk.b
        return out

    def audit(self) -> None:
        """Raise if the block set or coefficient vectors disagree with ``kind``."""
        if tuple(self.blocks) != BLOCKS[self.kind]:
            raise ContractError(
                f"{self.kind.value} expects blocks {BLOCKS[self.kind]}, "
                f"found {tuple(self.blocks)}")
        for name, blk in self.blocks.items():
            if blk.W.shape != (self.n_h, self.n_x) or blk.U.shape != (self.n_h, self.n_h) \
                    or blk.b.shape != (self.n_h,):
                raise ContractError(f"block {name!r} has inconsistent shapes")
        needs_lam = self.kind is not CellKind.GRU
        needs_beta = self.kind is CellKind.MIRU2
        if needs_lam != (self.lam is not None) or needs_beta != (self.beta is not None):
            raise ContractError(f"coefficient vectors do not match {self.kind.value}")
        for coeff in (self.lam, self.beta):
            if coeff is not None and (coeff.shape != (self.n_h,)
                                      or coeff.min() < 0 or coeff.max() > 1):
                raise ContractError("coefficients must be n_h values in [0, 1]")

    def copy(self) -> "CellParams":
        return CellParams(
            self.kind, self.n_x, self.n_h,
            {k: Block(v.W.copy(), v.U.copy(), v.b.copy()) for k, v in self.blocks.items()},
            None if self.lam is None else self.lam.copy(),
            None if self.beta is None else self.beta.copy(),
        )

    def astype(self, dtype) -> "CellParams":
        p = self.copy()
        for blk in p.blocks.values():
            blk.W, blk.U, blk.b = (a.astype(dtype) for a in (blk.W, blk.U, blk.b))
        if p.lam is not None:
            p.lam = p.lam.astype(dtype)
        if p.beta is not None:
            p.beta = p.beta.astype(dtype)
        return p


@dataclass(frozen=True)
class CoeffSpec:
    """Either scalar coefficients broadcast to every unit, or ``random=True``
    for per-unit draws from ``uniform(low, high)``."""

    lam: float = 0.8
    beta: float = 0.55
    random: bool = False
    low: float = 0.1
    high: float = 0.9


def init_params(kind, n_x: int, n_h: int, coeff: CoeffSpec | None = None,
                rng: Rng | None = None, dtype=DEFAULT_DTYPE) -> CellParams:
    kind = CellKind.parse(kind)
    if n_x < 1 or n_h < 1:
        raise ContractError(f"n_x and n_h must be >= 1, got {n_x}, {n_h}")
    coeff = coeff or CoeffSpec()
    if not coeff.random and not (0 <= coeff.lam <= 1 and 0 <= coeff.beta <= 1):
        raise ContractError(f"coefficients must lie in [0, 1]: {coeff}")
    if coeff.random and not 0 <= coeff.low <= coeff.high <= 1:
        raise ContractError(f"random coefficient range must lie in [0, 1]: {coeff}")
    rng = rng or Rng(0)

    s_w = np.sqrt(6.0 / (n_x + n_h))
    s_u = np.sqrt(6.0 / (2 * n_h))
    blocks = {}
    for name in BLOCKS[kind]:
        W = rng.uniform(-s_w, s_w, (n_h, n_x)).astype(dtype)
        U = rng.uniform(-s_u, s_u, (n_h, n_h)).astype(dtype)
        blocks[name] = Block(W, U, np.zeros(n_h, dtype=dtype))

    def coefficient(value):
        if coeff.random:
            return rng.uniform(coeff.low, coeff.high, n_h).astype(dtype)
        return np.full(n_h, value, dtype=dtype)

    lam = coefficient(coeff.lam) if kind is not CellKind.GRU else None
    beta = coefficient(coeff.beta) if kind is CellKind.MIRU2 else None
    return CellParams(kind, n_x, n_h, blocks, lam, beta)


@dataclass
class StepTrace:
    """Everything one step needs to cache for its backward pass.

    ``h`` is the cell output before any inhibition mask; ``mask`` is filled
    in by the sequence model when inhibition is on. ``rh`` is the vector the
    candidate's recurrent matrix multiplied: ``r * h_prev`` (GRU, MiRU-1)
    or ``beta * h_prev`` (MiRU-2).
    """

    kind: CellKind
    x: np.ndarray
    h_prev: np.ndarray
    h_tilde: np.ndarray
    h: np.ndarray
    rh: np.ndarray
    r: np.ndarray | None = None
    z: np.ndarray | None = None
    mask: np.ndarray | None = field(default=None, repr=False)

    @property
    def h_out(self) -> np.ndarray:
        return self.h if self.mask is None else self.h * self.mask


@dataclass
class Stacked:
    """Block matrices stacked in ``BLOCKS`` order, built once per sequence."""

    W: np.ndarray        # (G*n_h, n_x)
    b: np.ndarray        # (G*n_h, 1)
    U_gates: np.ndarray | None   # ((G-1)*n_h, n_h)
    U_h: np.ndarray
    lam: np.ndarray | None       # (n_h, 1)
    beta: np.ndarray | None

    @classmethod
    def of(cls, p: CellParams) -> "Stacked":
        names = BLOCKS[p.kind]
        W = np.concatenate([p.blocks[n].W for n in names], axis=0)
        b = np.concatenate([p.blocks[n].b for n in names])[:, None]
        gates = names[:-1]
        U_gates = np.concatenate([p.blocks[n].U for n in gates], axis=0) if gates else None
        lam = None if p.lam is None else p.lam[:, None]
        beta = None if p.beta is None else p.beta[:, None]
        return cls(W, b, U_gates, p.blocks["h"].U, lam, beta)


def _check_step_inputs(p: CellParams, x, h_prev, kind: CellKind):
    if p.kind is not kind:
        raise ContractError(f"{kind.value} step called with {p.kind.value} parameters")
    if x.ndim != 2 or x.shape[0] != p.n_x:
        raise ContractError(f"x has shape {x.shape}, expected ({p.n_x}, n_b)")
    if h_prev.shape != (p.n_h, x.shape[1]):
        raise ContractError(
            f"h_prev has shape {h_prev.shape}, expected ({p.n_h}, {x.shape[1]})")


def _input_projection(stk: Stacked, x, xp):
    if xp is not None:
        return xp
    return stk.W @ x + stk.b


def gru_step(p: CellParams, x, h_prev, xp=None, stk: Stacked | None = None) -> StepTrace:
    """One GRU step. ``xp`` optionally supplies the precomputed ``W x + b``."""
    _check_step_inputs(p, x, h_prev, CellKind.GRU)
    stk = stk or Stacked.of(p)
    n_h = p.n_h
    xp = _input_projection(stk, x, xp)
    gates = sigmoid(xp[:2 * n_h] + stk.U_gates @ h_prev)
    r, z = gates[:n_h], gates[n_h:]
    rh = r * h_prev
    h_tilde = np.tanh(xp[2 * n_h:] + stk.U_h @ rh)
    h = z * h_prev + (1.0 - z) * h_tilde
    return StepTrace(CellKind.GRU, x, h_prev, h_tilde, h, rh, r=r, z=z)


def miru1_step(p: CellParams, x, h_prev, xp=None, stk: Stacked | None = None) -> StepTrace:
    _check_step_inputs(p, x, h_prev, CellKind.MIRU1)
    stk = stk or Stacked.of(p)
    n_h = p.n_h
    xp = _input_projection(stk, x, xp)
    r = sigmoid(xp[:n_h] + stk.U_gates @ h_prev)
    rh = r * h_prev
    h_tilde = np.tanh(xp[n_h:] + stk.U_h @ rh)
    h = stk.lam * h_prev + (1.0 - stk.lam) * h_tilde
    return StepTrace(CellKind.MIRU1, x, h_prev, h_tilde, h, rh, r=r)


def miru2_step(p: CellParams, x, h_prev, xp=None, stk: Stacked | None = None) -> StepTrace:
    _check_step_inputs(p, x, h_prev, CellKind.MIRU2)
    stk = stk or Stacked.of(p)
    xp = _input_projection(stk, x, xp)
    rh = stk.beta * h_prev
    h_tilde = np.tanh(xp + stk.U_h @ rh)
    h = stk.lam * h_prev + (1.0 - stk.lam) * h_tilde
    return StepTrace(CellKind.MIRU2, x, h_prev, h_tilde, h, rh)


_STEPS = {CellKind.GRU: gru_step, CellKind.MIRU1: miru1_step, CellKind.MIRU2: miru2_step}


def step(p: CellParams, x, h_prev, xp=None, stk: Stacked | None = None) -> StepTrace:
    return _STEPS[p.kind](p, x, h_prev, xp, stk)


def step_backward_pre(stk: Stacked, tr: StepTrace, dh: np.ndarray):
    """Backpropagate ``dL/dh`` (w.r.t. the unmasked step output) one step.

    Returns ``(dpre, dh_prev)`` where ``dpre`` stacks the gradients of the
    block pre-activations in ``BLOCKS`` order, shape ``(G*n_h, n_b)``.
    """
    if tr.kind is CellKind.GRU:
        r, z = tr.r, tr.z
        dz = dh * (tr.h_prev - tr.h_tilde)
        da_h = dh * (1.0 - z) * (1.0 - tr.h_tilde ** 2)
        drh = stk.U_h.T @ da_h
        da_r = drh * tr.h_prev * r * (1.0 - r)
        da_z = dz * z * (1.0 - z)
        dpre = np.concatenate([da_r, da_z, da_h], axis=0)
        dh_prev = dh * z + drh * r + stk.U_gates.T @ dpre[:-da_h.shape[0]]
        return dpre, dh_prev
    if tr.kind is CellKind.MIRU1:
        r = tr.r
        da_h = dh * (1.0 - stk.lam) * (1.0 - tr.h_tilde ** 2)
        drh = stk.U_h.T @ da_h
        da_r = drh * tr.h_prev * r * (1.0 - r)
        dh_prev = dh * stk.lam + drh * r + stk.U_gates.T @ da_r
        return np.concatenate([da_r, da_h], axis=0), dh_prev
    if tr.kind is CellKind.MIRU2:
        da_h = dh * (1.0 - stk.lam) * (1.0 - tr.h_tilde ** 2)
        dh_prev = dh * stk.lam + stk.beta * (stk.U_h.T @ da_h)
        return da_h, dh_prev
    raise ContractError(f"unknown cell kind {tr.kind!r}")


def _block_grads(p: CellParams, dpre, x, h_prev, rh) -> dict[str, np.ndarray]:
    grads = {}
    n_h = p.n_h
    for i, name in enumerate(BLOCKS[p.kind]):
        d = dpre[i * n_h:(i + 1) * n_h]
        grads[f"{name}.W"] = d @ x.T
        grads[f"{name}.U"] = d @ (rh if name == "h" else h_prev).T
        grads[f"{name}.b"] = d.sum(axis=1)
    return grads


def cell_backward(p: CellParams, trace: StepTrace, dh: np.ndarray):
    """Gradients of one step given ``dL/dh^t``.

    Returns ``(grads, dh_prev, dx)`` with ``grads`` keyed like
    :meth:`CellParams.tensors`. If the trace carries an inhibition mask,
    ``dh`` is taken w.r.t. the masked output.
    """
    if trace.kind is not p.kind:
        raise ContractError(
            f"trace from a {trace.kind.value} step passed with {p.kind.value} parameters")
    if dh.shape != trace.h.shape:
        raise ContractError(f"dL/dh has shape {dh.shape}, expected {trace.h.shape}")
    stk = Stacked.of(p)
    if trace.mask is not None:
        dh = dh * trace.mask
    dpre, dh_prev = step_backward_pre(stk, trace, dh)
    grads = _block_grads(p, dpre, trace.x, trace.h_prev, trace.rh)
    dx = stk.W.T @ dpre
    return grads, dh_prev, dx
