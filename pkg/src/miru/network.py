"""Sequence classifier: one recurrent hidden layer, optional global
inhibition (k-winner-take-all on the hidden state), a dense output layer,
and exact backpropagation through time.

Only the final hidden state is classified. With inhibition on, the masked
hidden state is what recurs into the next step and what feeds the output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensorio
from .cells import (BLOCKS, Block, CellKind, CellParams, CoeffSpec, Stacked, StepTrace,
                    init_params, step, step_backward_pre)
from .numerics import DEFAULT_DTYPE, ContractError, Rng, sigmoid

LOSSES = ("softmax", "sigmoid")


@dataclass
class ModelConfig:
    n_x: int = 28
    n_h: int = 128
    n_y: int = 10
    n_T: int = 28
    kind: CellKind = CellKind.MIRU2
    sparsity: float | None = None   # fraction of hidden units suppressed; None = off
    loss: str = "softmax"
    output_bias: bool = True

    def __post_init__(self):
        self.kind = CellKind.parse(self.kind)
        self.validate()

    def validate(self) -> None:
        for name in ("n_x", "n_h", "n_y", "n_T"):
            if int(getattr(self, name)) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.sparsity is not None and not 0.0 < self.sparsity < 1.0:
            raise ContractError(f"sparsity must lie in (0, 1), got {self.sparsity}")
        if self.loss not in LOSSES:
            raise ContractError(f"loss must be one of {LOSSES}, got {self.loss!r}")

    @property
    def active_units(self) -> int | None:
        if self.sparsity is None:
            return None
        return active_units(self.sparsity, self.n_h)


@dataclass
class ModelParams:
    cell: CellParams
    W_y: np.ndarray                 # (n_y, n_h); logits = W_y @ h + b_y
    b_y: np.ndarray | None

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"cell.{k}": v for k, v in self.cell.tensors().items()}
        out["out.W"] = self.W_y
        if self.b_y is not None:
            out["out.b"] = self.b_y
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(self.cell.copy(), self.W_y.copy(),
                           None if self.b_y is None else self.b_y.copy())

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.cell.astype(dtype), self.W_y.astype(dtype),
                           None if self.b_y is None else self.b_y.astype(dtype))


def init_model(cfg: ModelConfig, coeff: CoeffSpec | None = None, rng: Rng | None = None,
               dtype=DEFAULT_DTYPE) -> ModelParams:
    rng = rng or Rng(0)
    cell = init_params(cfg.kind, cfg.n_x, cfg.n_h, coeff, rng, dtype)
    s = math.sqrt(6.0 / (cfg.n_h + cfg.n_y))
    W_y = rng.uniform(-s, s, (cfg.n_y, cfg.n_h)).astype(dtype)
    b_y = np.zeros(cfg.n_y, dtype=dtype) if cfg.output_bias else None
    return ModelParams(cell, W_y, b_y)


def active_units(sparsity: float, n_h: int) -> int:
    """k = max(1, round((1 - sparsity) * n_h)), halves rounded up."""
    if not 0.0 < sparsity < 1.0:
        raise ContractError(f"sparsity must lie in (0, 1), got {sparsity}")
    return max(1, int(math.floor((1.0 - sparsity) * n_h + 0.5)))


def kmax_mask(h: np.ndarray, sparsity: float | None = None, k: int | None = None) -> np.ndarray:
    """Binary mask keeping the ``k`` largest entries of each column of ``h``.

    Pass either ``sparsity`` (k derived with :func:`active_units`) or ``k``
    directly. Ties go to the lower index.
    """
    h = np.asarray(h)
    vec = h.ndim == 1
    H = h[:, None] if vec else h
    n_h = H.shape[0]
    if k is None:
        if sparsity is None:
            raise ContractError("kmax_mask needs sparsity or k")
        k = active_units(sparsity, n_h)
    if not 1 <= k <= n_h:
        raise ContractError(f"k={k} outside [1, {n_h}]")
    # k-th largest per column; entries tied with it are admitted in index order
    thr = -np.partition(-H, k - 1, axis=0)[k - 1]
    above = H > thr
    tied = H == thr
    need = k - above.sum(axis=0)
    if np.array_equal(tied.sum(axis=0), need):
        keep = above | tied
    else:
        keep = above | (tied & (np.cumsum(tied, axis=0) <= need))
    mask = keep.astype(H.dtype if H.dtype.kind == "f" else np.float64)
    return mask[:, 0] if vec else mask


@dataclass
class ForwardRecord:
    x: np.ndarray                   # (n_T, n_x, n_b)
    traces: list[StepTrace]
    logits: np.ndarray              # (n_y, n_b)
    probs: np.ndarray
    stacked: Stacked = field(repr=False)

    @property
    def h_final(self) -> np.ndarray:
        return self.traces[-1].h_out


def _sequence_input(batch, cfg: ModelConfig) -> np.ndarray:
    x = getattr(batch, "x", batch)
    if x.ndim != 3 or x.shape[0] != cfg.n_T or x.shape[1] != cfg.n_x:
        raise ContractError(
            f"sequence input has shape {x.shape}, expected ({cfg.n_T}, {cfg.n_x}, n_b)")
    return x


def output_probs(logits: np.ndarray, loss: str) -> np.ndarray:
    if loss == "sigmoid":
        return sigmoid(logits)
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def forward_sequence(p: ModelParams, cfg: ModelConfig, batch, masks=None) -> ForwardRecord:
    """Unroll the cell over ``n_T`` steps from ``h^0 = 0``.

    ``masks`` optionally supplies precomputed inhibition masks (one per
    step); they are then used instead of ones computed from the activations.
    """
    x = _sequence_input(batch, cfg)
    n_T, n_x, n_b = x.shape
    x = x.astype(p.cell.dtype, copy=False)
    stk = Stacked.of(p.cell)
    # one product for every step's input projection
    proj = stk.W @ x.transpose(1, 0, 2).reshape(n_x, n_T * n_b) + stk.b
    proj = proj.reshape(-1, n_T, n_b)
    k = cfg.active_units
    h = np.zeros((cfg.n_h, n_b), dtype=p.cell.dtype)
    traces = []
    for t in range(n_T):
        tr = step(p.cell, x[t], h, proj[:, t, :], stk)
        if masks is not None:
            tr.mask = masks[t]
        elif k is not None:
            tr.mask = kmax_mask(tr.h, k=k)
        traces.append(tr)
        h = tr.h_out
    logits = p.W_y @ h
    if p.b_y is not None:
        logits += p.b_y[:, None]
    return ForwardRecord(x, traces, logits, output_probs(logits, cfg.loss), stk)


def predict_logits(p: ModelParams, cfg: ModelConfig, x: np.ndarray) -> np.ndarray:
    """Forward pass without keeping traces; for evaluation."""
    x = _sequence_input(x, cfg).astype(p.cell.dtype, copy=False)
    n_T, n_x, n_b = x.shape
    stk = Stacked.of(p.cell)
    proj = (stk.W @ x.transpose(1, 0, 2).reshape(n_x, n_T * n_b) + stk.b).reshape(-1, n_T, n_b)
    k = cfg.active_units
    h = np.zeros((cfg.n_h, n_b), dtype=p.cell.dtype)
    for t in range(n_T):
        h = step(p.cell, x[t], h, proj[:, t, :], stk).h
        if k is not None:
            h = h * kmax_mask(h, k=k)
    logits = p.W_y @ h
    if p.b_y is not None:
        logits += p.b_y[:, None]
    return logits


def loss_and_grad(logits: np.ndarray, labels, loss: str = "softmax"):
    """Mean loss over the batch and its gradient w.r.t. the logits.

    ``softmax``: cross-entropy over ``n_y`` classes. ``sigmoid``: binary
    cross-entropy per output unit; with ``n_y == 1`` the label itself is
    the target, otherwise labels are one-hot encoded.
    """
    labels = np.asarray(labels)
    n_y, n_b = logits.shape
    if labels.shape != (n_b,):
        raise ContractError(f"expected {n_b} labels, got shape {labels.shape}")
    hi = 2 if (loss == "sigmoid" and n_y == 1) else n_y
    if labels.size and (labels.min() < 0 or labels.max() >= hi):
        raise ContractError(f"labels must lie in [0, {hi})")
    labels = labels.astype(np.int64)
    cols = np.arange(n_b)
    if loss == "softmax":
        z = logits - logits.max(axis=0, keepdims=True)
        log_norm = np.log(np.exp(z).sum(axis=0))
        logp = z - log_norm
        value = float(-logp[labels, cols].mean())
        grad = np.exp(logp)
        grad[labels, cols] -= 1.0
        return value, grad / n_b
    if loss == "sigmoid":
        target = labels[None, :].astype(logits.dtype) if n_y == 1 else \
            np.eye(n_y, dtype=logits.dtype)[:, labels]
        # log(1 + e^{-|a|}) form keeps large logits finite
        per = np.maximum(logits, 0) - logits * target + np.log1p(np.exp(-np.abs(logits)))
        value = float(per.sum(axis=0).mean())
        return value, (sigmoid(logits) - target) / n_b
    raise ContractError(f"unknown loss {loss!r}")


def backward_through_time(p: ModelParams, cfg: ModelConfig, record: ForwardRecord,
                          dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients for every trainable tensor, keyed like :meth:`ModelParams.tensors`.

    Inhibition masks are treated as constants.
    """
    traces = record.traces
    if len(traces) != cfg.n_T:
        raise ContractError(f"record has {len(traces)} steps, expected {cfg.n_T}")
    cell = p.cell
    n_h = cfg.n_h
    x = record.x
    n_T, n_x, n_b = x.shape
    stk = record.stacked
    names = BLOCKS[cell.kind]
    G = len(names)

    grads = {}
    h_last = traces[-1].h_out
    grads["out.W"] = dlogits @ h_last.T
    if p.b_y is not None:
        grads["out.b"] = dlogits.sum(axis=1)

    dpre_all = np.empty((G * n_h, n_T, n_b), dtype=dlogits.dtype)
    dh = p.W_y.T @ dlogits
    for t in range(n_T - 1, -1, -1):
        tr = traces[t]
        if tr.mask is not None:
            dh = dh * tr.mask
        dpre, dh = step_backward_pre(stk, tr, dh)
        dpre_all[:, t, :] = dpre

    D = dpre_all.reshape(G * n_h, n_T * n_b)
    X = x.transpose(1, 0, 2).reshape(n_x, n_T * n_b)
    dW = D @ X.T
    db = D.sum(axis=1)
    H_prev = np.stack([tr.h_prev for tr in traces], axis=1).reshape(n_h, -1)
    RH = np.stack([tr.rh for tr in traces], axis=1).reshape(n_h, -1)
    for i, name in enumerate(names):
        rows = slice(i * n_h, (i + 1) * n_h)
        grads[f"cell.{name}.W"] = dW[rows]
        grads[f"cell.{name}.U"] = D[rows] @ (RH if name == "h" else H_prev).T
        grads[f"cell.{name}.b"] = db[rows]
    return grads


def model_loss(p: ModelParams, cfg: ModelConfig, batch, labels, masks=None) -> float:
    rec = forward_sequence(p, cfg, batch, masks)
    return loss_and_grad(rec.logits, labels, cfg.loss)[0]


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(path, p: ModelParams, cfg: ModelConfig, extra: dict | None = None) -> None:
    """Write the header and named tensors (coefficients first, then blocks,
    then the output layer). See :mod:`miru.tensorio` for the byte layout."""
    header = {
        "kind": cfg.kind.value, "n_x": cfg.n_x, "n_h": cfg.n_h, "n_y": cfg.n_y,
        "n_T": cfg.n_T, "sparsity": cfg.sparsity, "loss": cfg.loss,
        "output_bias": cfg.output_bias,
        "precision": 8 * p.cell.dtype.itemsize,
    }
    if extra:
        header["extra"] = extra
    tensors = {}
    if p.cell.lam is not None:
        tensors["lam"] = p.cell.lam
    if p.cell.beta is not None:
        tensors["beta"] = p.cell.beta
    tensors.update(p.tensors())
    tensorio.write_tensors(path, header, tensors)


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig, dict]:
    header, t = tensorio.read_tensors(path)
    cfg = ModelConfig(n_x=header["n_x"], n_h=header["n_h"], n_y=header["n_y"],
                      n_T=header["n_T"], kind=header["kind"], sparsity=header["sparsity"],
                      loss=header["loss"], output_bias=header["output_bias"])
    blocks = {n: Block(t[f"cell.{n}.W"], t[f"cell.{n}.U"], t[f"cell.{n}.b"])
              for n in BLOCKS[cfg.kind]}
    cell = CellParams(cfg.kind, cfg.n_x, cfg.n_h, blocks, t.get("lam"), t.get("beta"))
    cell.audit()
    return ModelParams(cell, t["out.W"], t.get("out.b")), cfg, header.get("extra", {})
