"""Central finite-difference check of the full-model backward pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cells import CoeffSpec
from .network import (ModelConfig, backward_through_time, forward_sequence,
                      init_model, loss_and_grad, model_loss)
from .numerics import CHECK_DTYPE, Rng

TOLERANCE = 1e-6
EPS = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> np.ndarray:
    """Entrywise ``|a - n| / max(|a|, |n|, floor)``.

    Central differences at eps=1e-5 carry ~1e-11 of roundoff for an O(1)
    loss, so entries below ``floor`` are compared absolutely (any error
    above ``floor * 1e-6`` still fails).
    """
    return np.abs(analytic - numeric) / np.maximum(
        np.maximum(np.abs(analytic), np.abs(numeric)), floor)


@dataclass
class CheckResult:
    kind: str
    seed: int
    sparsity: float | None
    errors: dict[str, float]
    tolerance: float = TOLERANCE

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def failing(self) -> list[str]:
        return [k for k, v in self.errors.items() if v > self.tolerance]


def check_model(kind, n_x=5, n_h=7, n_y=3, n_T=4, n_b=2, seed=0, sparsity=None,
                eps=EPS, corrupt: str | None = None) -> CheckResult:
    """Compare BPTT gradients with central differences on every parameter.

    With inhibition on, the masks of the unperturbed forward pass are held
    fixed for every perturbed evaluation. ``corrupt`` names a tensor whose
    analytic gradient is deliberately perturbed (negative control).
    """
    cfg = ModelConfig(n_x, n_h, n_y, n_T, kind, sparsity=sparsity)
    rng = Rng.from_key(seed, 1)
    p = init_model(cfg, CoeffSpec(random=True), rng, dtype=CHECK_DTYPE)
    # non-zero biases so every term of the derivative is exercised
    for arr in [blk.b for blk in p.cell.blocks.values()] + [p.b_y]:
        arr[:] = rng.normal(0.0, 0.5, arr.shape)
    x = rng.normal(0.0, 1.0, (n_T, n_x, n_b))
    labels = rng.integers(0, n_y, n_b)

    rec = forward_sequence(p, cfg, x)
    masks = [tr.mask for tr in rec.traces] if sparsity is not None else None
    _, dlogits = loss_and_grad(rec.logits, labels, cfg.loss)
    grads = backward_through_time(p, cfg, rec, dlogits)
    if corrupt is not None:
        grads[corrupt] = grads[corrupt] + 1e-3

    errors = {}
    for name, theta in p.tensors().items():
        numeric = np.empty_like(theta)
        for idx in np.ndindex(theta.shape):
            orig = theta[idx]
            theta[idx] = orig + eps
            up = model_loss(p, cfg, x, labels, masks)
            theta[idx] = orig - eps
            down = model_loss(p, cfg, x, labels, masks)
            theta[idx] = orig
            numeric[idx] = (up - down) / (2 * eps)
        errors[name] = float(relative_error(grads[name], numeric).max())
    return CheckResult(cfg.kind.value, seed, sparsity, errors)
