"""Analytical resource accounting and an inference energy estimate.

Counts are per hidden-layer timestep plus one pass through the output
layer; ``steps`` multiplies the per-timestep hidden part for whole
sequences.

Forward convention: every input, recurrent and bias term of every block
counts as one MAC (``n_h*n_x + n_h*n_h + n_h`` per block), plus
``n_h*n_y`` MACs for the output layer. One activation per gate or
candidate unit (sigmoid for gates, tanh for the candidate) plus ``n_y``
sigmoid outputs.

Backward conventions (terms listed by :func:`backward_terms`):

``step``
    the output layer's gradients and the current step's parameter
    gradients given ``dL/dh^t``; no propagation into ``h^{t-1}``.
``bptt``
    ``step`` plus the products that carry the gradient into ``h^{t-1}``.

Additions count elementwise additions/subtractions and the reduction
adds of matrix-vector products; outer products contribute no adds.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .cells import BLOCKS, CellKind
from .network import ModelConfig
from .numerics import ContractError

PARAM_CONVENTIONS = ("with-output-bias", "without-output-bias")
BACKWARD_CONVENTIONS = ("step", "bptt")


@dataclass(frozen=True)
class EnergyTable:
    """Per-operation energies in picojoules."""

    multiplier: float = 0.11
    adder: float = 0.013
    accumulator: float = 0.235
    mac: float = 0.376
    tanh: float = 0.326
    sigmoid: float = 0.228
    sram_read: float = 5.893
    sram_write: float = 6.628

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ContractError(f"energy {k}={v} is negative")

    @classmethod
    def load(cls, path) -> "EnergyTable":
        """Read ``name = value`` lines; ``#`` starts a comment."""
        values = {}
        known = set(cls.__dataclass_fields__)
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line or line.startswith("["):
                continue
            key, sep, val = line.partition("=")
            key = key.strip().replace("-", "_")
            if not sep or key not in known:
                raise ContractError(f"{path}:{lineno}: cannot parse {line!r}")
            values[key] = float(val)
        return cls(**values)

    @classmethod
    def zero(cls) -> "EnergyTable":
        return cls(**{k: 0.0 for k in cls.__dataclass_fields__})


# reference figures for the 28x128x10 models, used for delta reporting
REFERENCE = {
    CellKind.GRU: {"parameters": 61696, "macs": 60160, "activations": 394,
                   "bwd_mul": 96768, "bwd_add": 34816, "energy_uj": 0.391},
    CellKind.MIRU1: {"parameters": 41472, "macs": 41477, "activations": 266,
                     "bwd_mul": 59776, "bwd_add": 17920, "energy_uj": 0.263},
    CellKind.MIRU2: {"parameters": 21386, "macs": 21376, "activations": 138,
                     "bwd_mul": 23040, "bwd_add": 1408, "energy_uj": 0.136},
}
REFERENCE_SIZE = (28, 128, 10)


def _check(cfg: ModelConfig):
    cfg.validate()


def count_parameters(cfg: ModelConfig, convention: str = "with-output-bias") -> int:
    """Trainable weights; the fixed coefficients are not parameters."""
    _check(cfg)
    if convention not in PARAM_CONVENTIONS:
        raise ContractError(f"unknown parameter convention {convention!r}")
    n_x, n_h, n_y = cfg.n_x, cfg.n_h, cfg.n_y
    G = len(BLOCKS[cfg.kind])
    total = G * (n_h * n_x + n_h * n_h + n_h) + n_h * n_y
    if convention == "with-output-bias":
        total += n_y
    return total


@dataclass(frozen=True)
class ForwardCounts:
    macs: int
    tanh: int
    sigmoid: int

    @property
    def activations(self) -> int:
        return self.tanh + self.sigmoid


def count_forward(cfg: ModelConfig, steps: int = 1) -> ForwardCounts:
    _check(cfg)
    n_x, n_h, n_y = cfg.n_x, cfg.n_h, cfg.n_y
    G = len(BLOCKS[cfg.kind])
    hidden = G * (n_h * n_x + n_h * n_h + n_h)
    return ForwardCounts(
        macs=steps * hidden + n_h * n_y,
        tanh=steps * n_h,
        sigmoid=steps * (G - 1) * n_h + n_y,
    )


@dataclass(frozen=True)
class Term:
    what: str
    mul: int
    add: int
    propagation: bool = False     # only counted under the "bptt" convention
    output: bool = False          # output layer; counted once per sequence


def backward_terms(cfg: ModelConfig) -> list[Term]:
    """Operation counts of the analytic backward pass, term by term."""
    _check(cfg)
    n_x, n_h, n_y = cfg.n_x, cfg.n_h, cfg.n_y
    kind = cfg.kind
    matvec = (n_h * n_h, n_h * (n_h - 1))
    terms = [
        Term("dlogits = p - onehot", 0, n_y, output=True),
        Term("dW_y = dlogits h^T", n_y * n_h, 0, output=True),
        Term("dh = W_y^T dlogits", n_h * n_y, n_h * (n_y - 1), output=True),
    ]
    if kind is CellKind.GRU:
        terms += [
            Term("dz_hat = dh*(h_prev - h_tilde)", n_h, n_h),
            Term("da_h = dh*(1-z)*(1-h_tilde^2)", 3 * n_h, 2 * n_h),
            Term("drh = U_h^T da_h", *matvec),
            Term("da_r = drh*h_prev*r*(1-r)", 3 * n_h, n_h),
            Term("da_z = dz_hat*z*(1-z)", 2 * n_h, n_h),
            Term("dW, dU outer products (r, z, h)", 3 * (n_h * n_x + n_h * n_h), 0),
            Term("dh*z + drh*r (into h_prev)", 2 * n_h, n_h, propagation=True),
            Term("U_r^T da_r + U_z^T da_z", 2 * matvec[0], 2 * matvec[1] + n_h,
                 propagation=True),
            Term("sum of h_prev contributions", 0, n_h, propagation=True),
        ]
    elif kind is CellKind.MIRU1:
        terms += [
            Term("da_h = dh*(1-lam)*(1-h_tilde^2)", 3 * n_h, 2 * n_h),
            Term("drh = U_h^T da_h", *matvec),
            Term("da_r = drh*h_prev*r*(1-r)", 3 * n_h, n_h),
            Term("dW, dU outer products (r, h)", 2 * (n_h * n_x + n_h * n_h), 0),
            Term("dh*lam + drh*r (into h_prev)", 2 * n_h, n_h, propagation=True),
            Term("U_r^T da_r", *matvec, propagation=True),
            Term("sum of h_prev contributions", 0, n_h, propagation=True),
        ]
    elif kind is CellKind.MIRU2:
        terms += [
            Term("da_h = dh*(1-lam)*(1-h_tilde^2)", 3 * n_h, 2 * n_h),
            Term("dW, dU outer products (h)", n_h * n_x + n_h * n_h, 0),
            Term("beta*(U_h^T da_h) + lam*dh (into h_prev)", matvec[0] + 2 * n_h,
                 matvec[1] + n_h, propagation=True),
        ]
    else:
        raise ContractError(f"unknown cell kind {kind!r}")
    return terms


@dataclass(frozen=True)
class BackwardCounts:
    mul: int
    add: int
    convention: str


def count_backward(cfg: ModelConfig, convention: str = "step", steps: int = 1) -> BackwardCounts:
    if convention not in BACKWARD_CONVENTIONS:
        raise ContractError(f"unknown backward convention {convention!r}")
    mul = add = 0
    for term in backward_terms(cfg):
        if term.propagation and convention == "step":
            continue
        reps = 1 if term.output else steps
        mul += reps * term.mul
        add += reps * term.add
    return BackwardCounts(mul, add, convention)


@dataclass
class CostReport:
    kind: str
    n_x: int
    n_h: int
    n_y: int
    parameters: int
    param_convention: str
    macs: int
    tanh: int
    sigmoid: int
    activations: int
    bwd_mul: int
    bwd_add: int
    bwd_convention: str
    energy_uj: float = 0.0
    steps: int = 1
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def estimate_energy(report: CostReport, table: EnergyTable | None = None) -> float:
    """Inference energy in microjoules: one SRAM read per parameter, one
    MAC per forward MAC, and one activation unit per activation."""
    table = table or EnergyTable()
    pj = (report.parameters * table.sram_read + report.macs * table.mac
          + report.tanh * table.tanh + report.sigmoid * table.sigmoid)
    return pj * 1e-6


def cost_report(cfg: ModelConfig, param_convention: str = "with-output-bias",
                bwd_convention: str = "step", table: EnergyTable | None = None,
                steps: int = 1) -> CostReport:
    fwd = count_forward(cfg, steps)
    bwd = count_backward(cfg, bwd_convention, steps)
    rep = CostReport(
        kind=cfg.kind.value, n_x=cfg.n_x, n_h=cfg.n_h, n_y=cfg.n_y,
        parameters=count_parameters(cfg, param_convention), param_convention=param_convention,
        macs=fwd.macs, tanh=fwd.tanh, sigmoid=fwd.sigmoid, activations=fwd.activations,
        bwd_mul=bwd.mul, bwd_add=bwd.add, bwd_convention=bwd_convention, steps=steps,
        notes=["update/reset coefficients are fixed hyperparameters, not counted"],
    )
    rep.energy_uj = estimate_energy(rep, table)
    return rep


def reference_deltas(rep: CostReport) -> dict[str, dict]:
    """Relative deltas against the reference figures (28x128x10 only)."""
    kind = CellKind.parse(rep.kind)
    if (rep.n_x, rep.n_h, rep.n_y) != REFERENCE_SIZE or rep.steps != 1:
        return {}
    out = {}
    for key, ref in REFERENCE[kind].items():
        ours = getattr(rep, key)
        out[key] = {"ours": ours, "reference": ref, "delta": ours - ref,
                    "rel": (ours - ref) / ref}
    return out


def format_reports(reports: list[CostReport]) -> str:
    """Side-by-side text table with reference deltas where available."""
    if not reports:
        return "(no models)\n"
    cols = ["parameters", "macs", "activations", "bwd_mul", "bwd_add", "energy_uj"]
    lines = []
    head = f"{'model':<8} {'size':<11} " + " ".join(f"{c:>22}" for c in cols)
    lines.append(head)
    for rep in reports:
        deltas = reference_deltas(rep)
        cells = []
        for c in cols:
            v = getattr(rep, c)
            s = f"{v:.4f}" if isinstance(v, float) else f"{v:,}"
            if c in deltas:
                s += f" ({100 * deltas[c]['rel']:+.2f}%)"
            cells.append(f"{s:>22}")
        size = f"{rep.n_x}x{rep.n_h}x{rep.n_y}"
        lines.append(f"{rep.kind:<8} {size:<11} " + " ".join(cells))
        lines.append(f"{'':<8} params: {rep.param_convention}; backward: "
                     f"{rep.bwd_convention}; steps: {rep.steps}")
    return "\n".join(lines) + "\n"
