"""Dense kernels and seeded randomness shared by every other module.

Matrices are plain ``numpy.ndarray`` objects. Activations use a
column-of-batch layout (``n_h x n_b``) so that one matrix product serves
the whole mini-batch.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32
CHECK_DTYPE = np.float64


class ContractError(ValueError):
    """A precondition of a kernel or model operation was violated."""


def as_matrix(a, dtype=None) -> np.ndarray:
    a = np.asarray(a, dtype=dtype)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ContractError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def gemm_bias(A: np.ndarray, x: np.ndarray, b: np.ndarray | None = None,
              out: np.ndarray | None = None, accumulate: bool = False) -> np.ndarray:
    """Return ``A @ x + b`` with ``b`` broadcast over the columns of ``x``.

    With ``accumulate`` the product is added into ``out`` in place.
    """
    if A.ndim != 2 or x.ndim != 2 or A.shape[1] != x.shape[0]:
        raise ContractError(f"gemm_bias: cannot multiply {A.shape} by {x.shape}")
    if b is not None and np.shape(b)[0] != A.shape[0]:
        raise ContractError(
            f"gemm_bias: bias of shape {np.shape(b)} does not match {A.shape}")
    y = A @ x
    if b is not None:
        y += np.reshape(b, (-1, 1))
    if accumulate:
        if out is None or out.shape != y.shape:
            shape = None if out is None else out.shape
            raise ContractError(
                f"gemm_bias: accumulate target {shape} vs result {y.shape}")
        out += y
        return out
    return y


def sigmoid(x):
    # branch form: exp() only ever sees non-positive arguments
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    e = np.exp(np.where(pos, -x, x))
    np.divide(1.0, 1.0 + e, out=out, where=pos)
    np.divide(e, 1.0 + e, out=out, where=~pos)
    return out


def tanh(x):
    return np.tanh(x)


def _same_shape(op, a, b):
    if np.shape(a) != np.shape(b):
        raise ContractError(f"{op}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


def hadamard(a, b):
    _same_shape("hadamard", a, b)
    return np.multiply(a, b)


def add(a, b):
    _same_shape("add", a, b)
    return np.add(a, b)


def sub(a, b):
    _same_shape("sub", a, b)
    return np.subtract(a, b)


def scale(c: float, a):
    return np.multiply(c, a)


def one_minus(a):
    return 1.0 - np.asarray(a)


_ELEMENTWISE = {
    "hadamard": hadamard,
    "add": add,
    "sub": sub,
    "scale": scale,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "one_minus": one_minus,
}


def elementwise(op: str, *operands):
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*operands)


class Rng:
    """Seeded generator built on the counter-based Philox bit generator.

    The draw sequence depends only on ``seed`` and call order; the OS
    entropy source is never consulted.
    """

    def __init__(self, seed: int | np.random.SeedSequence):
        if isinstance(seed, np.random.SeedSequence):
            self._ss = seed
            self.seed = int(seed.entropy) if isinstance(seed.entropy, int) else None
        else:
            self.seed = int(seed)
            self._ss = np.random.SeedSequence(self.seed)
        self.gen = np.random.Generator(np.random.Philox(self._ss))

    def spawn(self, n: int) -> list["Rng"]:
        """Independent child streams, reproducible from the parent seed."""
        return [Rng(ss) for ss in self._ss.spawn(n)]

    @classmethod
    def from_key(cls, *key: int) -> "Rng":
        return cls(np.random.SeedSequence([int(k) for k in key]))

    def uniform(self, a: float, b: float, size=None):
        if a > b:
            raise ContractError(f"uniform: a={a} > b={b}")
        return self.gen.uniform(a, b, size)

    def normal(self, mu: float, sigma: float, size=None):
        if sigma < 0:
            raise ContractError(f"normal: sigma={sigma} < 0")
        return self.gen.normal(mu, sigma, size)

    def permutation(self, n: int) -> np.ndarray:
        if n < 0:
            raise ContractError(f"permutation: n={n} < 0")
        return self.gen.permutation(n)

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``."""
        if not 0 <= k <= n:
            raise ContractError(f"choice: need 0 <= k <= n, got k={k}, n={n}")
        return self.gen.choice(n, size=k, replace=False)

    def integers(self, low: int, high: int, size=None):
        return self.gen.integers(low, high, size)


def draw(rng: Rng, dist: str, *params, size=None):
    """Dispatch helper: ``draw(rng, "uniform", 0, 1, size=10)``."""
    if dist == "uniform":
        return rng.uniform(*params, size=size)
    if dist == "normal":
        return rng.normal(*params, size=size)
    if dist == "permutation":
        return rng.permutation(*params)
    if dist == "choice":
        return rng.choice(*params)
    raise ContractError(f"unknown distribution {dist!r}")
