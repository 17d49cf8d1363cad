"""First-order optimizers over a dict of named parameter arrays.

Parameters are updated in place. The dict normally comes from
``ModelParams.tensors()``, which never contains the fixed ``lam``/``beta``
coefficients.
"""

from __future__ import annotations

import numpy as np

from . import tensorio
from .numerics import ContractError


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in tensor {name!r}")
        self.name = name


class Optimizer:
    kind = "base"

    def __init__(self, lr: float, weight_decay: float = 0.0):
        if not lr > 0:
            raise ContractError(f"learning rate must be positive, got {lr}")
        self.lr = lr
        self.weight_decay = weight_decay
        self.t = 0
        self.state: dict[str, dict[str, np.ndarray]] = {}

    def hyperparams(self) -> dict:
        return {"lr": self.lr, "weight_decay": self.weight_decay}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if name not in params:
                raise ContractError(f"gradient for unknown tensor {name!r}")
            if g.shape != params[name].shape:
                raise ContractError(
                    f"{name}: gradient shape {g.shape} vs parameter {params[name].shape}")
            if not np.isfinite(g).all():
                raise NonFiniteGradient(name)
        self.t += 1
        for name, g in grads.items():
            theta = params[name]
            if self.weight_decay:
                theta -= self.lr * self.weight_decay * theta
            theta -= self._delta(name, g).astype(theta.dtype, copy=False)

    def _delta(self, name: str, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _slot(self, name: str, key: str, like: np.ndarray) -> np.ndarray:
        slots = self.state.setdefault(name, {})
        if key not in slots:
            slots[key] = np.zeros_like(like)
        return slots[key]

    # -- serialization ----------------------------------------------------
    def save(self, path) -> None:
        tensors = {f"{name}/{key}": arr for name, slots in self.state.items()
                   for key, arr in slots.items()}
        header = {"optimizer": self.kind, "t": self.t, "hyperparams": self.hyperparams()}
        tensorio.write_tensors(path, header, tensors)

    @classmethod
    def load(cls, path) -> "Optimizer":
        header, tensors = tensorio.read_tensors(path)
        opt = make_optimizer(header["optimizer"], **header["hyperparams"])
        opt.t = header["t"]
        for key, arr in tensors.items():
            name, slot = key.rsplit("/", 1)
            opt.state.setdefault(name, {})[slot] = arr
        return opt


class SGD(Optimizer):
    kind = "sgd"

    def _delta(self, name, g):
        return self.lr * g


class RMSProp(Optimizer):
    kind = "rmsprop"

    def __init__(self, lr=1e-3, rho=0.9, eps=1e-8, weight_decay=0.0):
        super().__init__(lr, weight_decay)
        self.rho = rho
        self.eps = eps

    def hyperparams(self):
        return {**super().hyperparams(), "rho": self.rho, "eps": self.eps}

    def _delta(self, name, g):
        v = self._slot(name, "v", g)
        v *= self.rho
        v += (1.0 - self.rho) * g * g
        return self.lr * g / (np.sqrt(v) + self.eps)


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        super().__init__(lr, weight_decay)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def hyperparams(self):
        return {**super().hyperparams(), "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps}

    def _delta(self, name, g):
        m = self._slot(name, "m", g)
        v = self._slot(name, "v", g)
        m *= self.beta1
        m += (1.0 - self.beta1) * g
        v *= self.beta2
        v += (1.0 - self.beta2) * g * g
        m_hat = m / (1.0 - self.beta1 ** self.t)
        v_hat = v / (1.0 - self.beta2 ** self.t)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


OPTIMIZERS = {cls.kind: cls for cls in (SGD, RMSProp, Adam)}


def make_optimizer(kind: str, **hyperparams) -> Optimizer:
    try:
        cls = OPTIMIZERS[kind.lower()]
    except KeyError:
        raise ContractError(f"unknown optimizer {kind!r}") from None
    return cls(**hyperparams)
