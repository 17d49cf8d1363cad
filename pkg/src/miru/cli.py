"""Command-line experiment runner.

Every command reads the TOML config (``--config``), applies ``--set
section.key=value`` overrides, validates everything, and only then loads
data or computes. Outputs land in ``output.dir`` next to a
``manifest.json`` holding the config hash, seed(s) and code version.

Exit codes: 0 success, 1 a check failed, 2 bad config or missing inputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .cells import CellKind
from .continual import DilConfig, gate_histogram, run_dil_seed, summarize, write_matrix_csv
from .cost import (BACKWARD_CONVENTIONS, PARAM_CONVENTIONS, EnergyTable, cost_report,
                   format_reports, reference_deltas)
from .data import Dataset, IdxError, apply_task, load_mnist, load_npz, make_tasks
from .gradcheck import TOLERANCE, check_model
from .network import ModelConfig, init_model, load_checkpoint, save_checkpoint
from .numerics import CHECK_DTYPE, DEFAULT_DTYPE, ContractError, Rng
from .optim import make_optimizer
from .tensorio import TensorFileError
from .train import fit_epoch, timed_evaluate

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


class PreflightError(Exception):
    """Raised for anything that must stop a command before compute starts."""


def code_version() -> str:
    """Package version plus a digest of the package sources."""
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    digest = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return f"{version}+{digest.hexdigest()[:12]}"


def write_manifest(out: Path, command: str, cfg: dict | None, seeds, extra=None) -> dict:
    manifest = {
        "command": command,
        "config_hash": cfgmod.config_hash(cfg) if cfg is not None else None,
        "seeds": list(seeds),
        "code_version": code_version(),
        "config": cfg,
        **(extra or {}),
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_data(cfg: dict) -> tuple[Dataset, Dataset]:
    d = cfg["data"]
    try:
        if d["format"] == "npz":
            if not d["npz"]:
                raise PreflightError("data.format = 'npz' needs data.npz")
            train, test = load_npz(d["npz"])
        else:
            train, test = load_mnist(d["dir"] or None)
    except (FileNotFoundError, IdxError, KeyError) as err:
        raise PreflightError(f"data: {err}") from None
    m = cfg["model"]
    width = m["n_T"] * m["n_x"]
    if train.images.shape[1] != width:
        raise PreflightError(f"data has {train.images.shape[1]} features per example, "
                             f"model expects n_T*n_x = {width}")
    return train, test


def _dtype(cfg: dict):
    return CHECK_DTYPE if cfg["model"]["precision"] == 64 else DEFAULT_DTYPE


def _subset(ds: Dataset, fraction: float, rng: Rng) -> Dataset:
    if fraction >= 1.0:
        return ds
    n = max(1, int(round(fraction * len(ds))))
    return ds.subset(np.sort(rng.choice(len(ds), n)))


def _append_jsonl(path: Path, rec: dict) -> None:
    with open(path, "a") as f:
        f.write(json.dumps(rec, sort_keys=True) + "\n")


# -- commands --------------------------------------------------------------

def cmd_train(cfg: dict) -> int:
    model = cfgmod.model_config(cfg)
    train, test = load_data(cfg)
    t = cfg["train"]
    out = Path(cfg["output"]["dir"])
    write_manifest(out, "train", cfg, [t["seed"]])
    for name in ("metrics.jsonl", "timings.jsonl"):
        (out / name).unlink(missing_ok=True)

    init_rng, shuffle_rng, sub_rng = Rng(t["seed"]).spawn(3)
    train = _subset(train, t["train_fraction"], sub_rng)
    p = init_model(model, cfgmod.coeff_spec(cfg), init_rng, _dtype(cfg))
    opt = make_optimizer(cfg["optimizer"]["kind"], **cfgmod.optimizer_kwargs(cfg))
    clip = t["clip"] or None

    acc, infer_s = timed_evaluate(p, model, test, t["eval_batch"])
    rows = [{"epoch": 0, "train_loss": None, "train_acc": None, "test_acc": acc}]
    _append_jsonl(out / "metrics.jsonl", rows[0])
    _append_jsonl(out / "timings.jsonl", {"epoch": 0, "train_seconds": 0.0,
                                          "infer_seconds": infer_s})
    for epoch in range(1, t["epochs"] + 1):
        stats = fit_epoch(p, model, opt, train, t["batch_size"], shuffle_rng, clip=clip,
                          context={"epoch": epoch})
        acc, infer_s = timed_evaluate(p, model, test, t["eval_batch"])
        rec = {"epoch": epoch, "train_loss": stats.loss, "train_acc": stats.accuracy,
               "test_acc": acc}
        rows.append(rec)
        _append_jsonl(out / "metrics.jsonl", rec)
        _append_jsonl(out / "timings.jsonl", {"epoch": epoch, "train_seconds": stats.seconds,
                                              "infer_seconds": infer_s})
        print(f"epoch {epoch:3d}  loss {stats.loss:.4f}  train {stats.accuracy:.4f}  "
              f"test {acc:.4f}  ({stats.seconds:.1f}s)", flush=True)

    save_checkpoint(out / "checkpoint.bin", p, model, {"epochs": t["epochs"], "seed": t["seed"]})
    opt.save(out / "optimizer.bin")
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_loss", "train_acc", "test_acc"])
        for r in rows:
            w.writerow([r["epoch"], "" if r["train_loss"] is None else f"{r['train_loss']:.6f}",
                        "" if r["train_acc"] is None else f"{r['train_acc']:.6f}",
                        f"{r['test_acc']:.6f}"])
    print(f"final test accuracy {rows[-1]['test_acc']:.4f}")
    return EXIT_OK


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except (FileNotFoundError, TensorFileError) as err:
        raise PreflightError(f"checkpoint: {err}") from None


def _task_view(ds: Dataset, task: int, task_seed: int) -> Dataset:
    if task <= 0:
        return ds
    return apply_task(ds, make_tasks(task, task_seed)[task - 1])


def cmd_eval(cfg: dict, checkpoint, task: int = 0, task_seed: int = 0) -> int:
    p, model, _ = _load_ckpt(checkpoint)
    cfg["model"]["n_T"], cfg["model"]["n_x"] = model.n_T, model.n_x
    _, test = load_data(cfg)
    test = _task_view(test, task, task_seed)
    acc, seconds = timed_evaluate(p, model, test, cfg["train"]["eval_batch"])
    out = Path(cfg["output"]["dir"])
    write_manifest(out, "eval", cfg, [task_seed],
                   {"checkpoint": str(checkpoint), "task": task})
    (out / "eval.json").write_text(json.dumps(
        {"accuracy": acc, "examples": len(test), "task": task}, sort_keys=True) + "\n")
    print(f"accuracy {acc:.4f} on {len(test)} examples ({seconds:.2f}s)")
    return EXIT_OK


def dil_config(cfg: dict) -> DilConfig:
    cl, t, o = cfg["continual"], cfg["train"], cfg["optimizer"]
    kw = cfgmod.optimizer_kwargs(cfg)
    lr = kw.pop("lr")
    return DilConfig(
        T=cl["tasks"], epochs=t["epochs"], k_store=cl["k"],
        k_interleave=None if cl["k_interleave"] < 0 else cl["k_interleave"],
        capacity=cl["capacity"] or None, model=cfgmod.model_config(cfg),
        coeff=cfgmod.coeff_spec(cfg), optimizer=o["kind"], lr=lr, opt_params=kw,
        n_b=t["batch_size"], seeds=tuple(cl["seeds"]), train_fraction=t["train_fraction"],
        clip=t["clip"] or None)


def cmd_cl(cfg: dict) -> int:
    try:
        dil = dil_config(cfg)
    except ContractError as err:
        raise PreflightError(str(err)) from None
    train, test = load_data(cfg)
    out = Path(cfg["output"]["dir"])
    write_manifest(out, "cl", cfg, dil.seeds,
                   {"capacity_per_task": dil.resolved_capacity(
                       max(1, int(round(dil.train_fraction * len(train)))))})
    log_path = out / "log.jsonl"
    log_path.unlink(missing_ok=True)

    def on_record(rec):
        _append_jsonl(log_path, rec)
        if "eval" in rec:
            accs = " ".join(f"{a:.4f}" for a in rec["eval"])
            print(f"seed {rec['seed']} after task {rec['task']}: {accs}", flush=True)

    runs = []
    for seed in dil.seeds:
        run = run_dil_seed(dil, train, test, seed, on_record)
        runs.append(run)
        np.savetxt(out / f"matrix_seed{seed}.csv", run.matrix.R, delimiter=",", fmt="%.6f")
        save_checkpoint(out / f"checkpoint_seed{seed}.bin", run.params, dil.model,
                        {"seed": seed, "tasks": dil.T})
    write_matrix_csv(out / "matrix.csv", runs)
    summary = summarize(runs)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["task", "final_mean", "final_std"])
        for i, (m, s) in enumerate(zip(summary["final_mean"], summary["final_std"]), 1):
            w.writerow([i, f"{m:.6f}", f"{s:.6f}"])
        w.writerow(["MA", f"{summary['ma_mean']:.6f}", f"{summary['ma_std']:.6f}"])
    print(f"mean accuracy {summary['ma_mean']:.4f} +/- {summary['ma_std']:.4f} "
          f"over seeds {list(dil.seeds)}")
    return EXIT_OK


def cmd_gradcheck(kinds, seeds, size, sparsity=None, corrupt=None, out=None) -> int:
    n_x, n_h, n_y, n_T, n_b = size
    results = []
    for kind in kinds:
        for seed in seeds:
            res = check_model(kind, n_x, n_h, n_y, n_T, n_b, seed=seed, sparsity=sparsity,
                              corrupt=corrupt if corrupt in _tensor_names(kind) else None)
            results.append(res)
            status = "ok  " if res.passed else "FAIL"
            print(f"{status} {res.kind:<6} seed {seed}  max rel err {res.max_error:.2e}"
                  + ("" if res.passed else f"  failing: {', '.join(res.failing())}"))
            if not res.passed or len(kinds) * len(seeds) == 1:
                for name, err in res.errors.items():
                    print(f"       {name:<10} {err:.2e}")
    if out is not None:
        out = Path(out)
        write_manifest(out, "gradcheck", None, seeds,
                       {"kinds": [CellKind.parse(k).value for k in kinds], "size": list(size),
                        "sparsity": sparsity})
        (out / "gradcheck.json").write_text(json.dumps(
            [{"kind": r.kind, "seed": r.seed, "sparsity": r.sparsity, "errors": r.errors,
              "passed": r.passed} for r in results], indent=2, sort_keys=True) + "\n")
    ok = all(r.passed for r in results)
    print(f"{'PASS' if ok else 'FAIL'}: {sum(r.passed for r in results)}/{len(results)} "
          f"checks within {TOLERANCE:g}")
    return EXIT_OK if ok else EXIT_FAIL


def _tensor_names(kind) -> set[str]:
    p = init_model(ModelConfig(2, 2, 2, 1, kind), rng=Rng(0))
    return set(p.tensors())


def cmd_resources(models, size, param_convention, bwd_convention, energy=None,
                  as_json=False, out=None) -> int:
    table = EnergyTable.load(energy) if energy else EnergyTable()
    n_x, n_h, n_y = size
    reports = [cost_report(ModelConfig(n_x, n_h, n_y, 1, m), param_convention,
                           bwd_convention, table) for m in models]
    if as_json:
        payload = [{**json.loads(r.to_json()), "reference_deltas": reference_deltas(r)}
                   for r in reports]
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(format_reports(reports), end="")
    if out is not None:
        out = Path(out)
        write_manifest(out, "resources", None, [],
                       {"models": [r.kind for r in reports], "size": list(size)})
        (out / "resources.json").write_text(json.dumps(
            [json.loads(r.to_json()) for r in reports], indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_gate_hist(cfg: dict, checkpoint, mode, task, task_seed, samples, bins) -> int:
    if checkpoint:
        p, model, _ = _load_ckpt(checkpoint)
        cfg["model"]["n_T"], cfg["model"]["n_x"] = model.n_T, model.n_x
    else:
        model = cfgmod.model_config(cfg)
        p = init_model(model, cfgmod.coeff_spec(cfg), Rng(cfg["train"]["seed"]).spawn(1)[0])
    _, test = load_data(cfg)
    test = _task_view(test, task, task_seed)
    if samples:
        test = test.subset(np.arange(min(samples, len(test))))
    try:
        hist = gate_histogram(p, model, test.as_sequences(model.n_T), mode, bins)
    except ContractError as err:
        raise PreflightError(str(err)) from None
    out = Path(cfg["output"]["dir"])
    write_manifest(out, "gate-hist", cfg, [task_seed],
                   {"checkpoint": str(checkpoint) if checkpoint else None, "mode": mode,
                    "values": hist.total, "extreme_fraction": hist.extreme_fraction})
    hist.write_csv(out / f"gate_hist_{mode}.csv")
    print(f"{hist.total} values, extreme-bin fraction {hist.extreme_fraction:.4f}")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------

def _size(text: str, n: int) -> tuple[int, ...]:
    parts = text.lower().split("x")
    if len(parts) != n or not all(p.isdigit() and int(p) > 0 for p in parts):
        raise argparse.ArgumentTypeError(f"expected {n} positive integers joined by 'x'")
    return tuple(int(p) for p in parts)


def _kinds(text: str) -> list[str]:
    items = [s for s in text.split(",") if s.strip()]
    try:
        return [CellKind.parse(s.strip()).value for s in items]
    except ValueError as err:
        raise argparse.ArgumentTypeError(str(err)) from None


def _ints(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {text}") from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="miru", description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", "-c", help="TOML config file")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override one config key")
        sp.add_argument("--data", help="MNIST directory (else data.dir or $MIRU_DATA)")
        sp.add_argument("--out", help="output directory (overrides output.dir)")
        return sp

    with_config(sub.add_parser("train", help="single-task training"))
    sp = with_config(sub.add_parser("eval", help="evaluate a checkpoint"))
    sp.add_argument("checkpoint")
    sp.add_argument("--task", type=int, default=0, help="permuted task index (0 = none)")
    sp.add_argument("--task-seed", type=int, default=0)
    with_config(sub.add_parser("cl", help="domain-incremental permuted-MNIST run"))

    sp = sub.add_parser("gradcheck", help="finite-difference check of BPTT")
    sp.add_argument("--kinds", type=_kinds, default=["gru", "miru1", "miru2"])
    sp.add_argument("--seeds", type=_ints, default=[0, 1, 2, 3, 4])
    sp.add_argument("--size", type=lambda s: _size(s, 5), default=(5, 7, 3, 4, 2),
                    metavar="NXxNHxNYxNTxNB")
    sp.add_argument("--sparsity", type=float, default=None)
    sp.add_argument("--corrupt", default=None, metavar="TENSOR",
                    help="perturb one analytic gradient (negative control)")
    sp.add_argument("--out", default=None)

    sp = sub.add_parser("resources", help="parameter/MAC/energy report")
    sp.add_argument("--models", type=_kinds, default=["gru", "miru1", "miru2"],
                    help="comma-separated cell kinds; empty string for none")
    sp.add_argument("--size", type=lambda s: _size(s, 3), default=(28, 128, 10),
                    metavar="NXxNHxNY")
    sp.add_argument("--params", choices=PARAM_CONVENTIONS, default="with-output-bias")
    sp.add_argument("--backward", choices=BACKWARD_CONVENTIONS, default="step")
    sp.add_argument("--energy", default=None, help="energy table file (key = pJ lines)")
    sp.add_argument("--json", action="store_true")
    sp.add_argument("--out", default=None)

    sp = with_config(sub.add_parser("gate-hist", help="update-gate/coefficient histogram"))
    sp.add_argument("checkpoint", nargs="?", default=None,
                    help="trained checkpoint; omit for a freshly initialised model")
    sp.add_argument("--mode", choices=("z", "lambda"), default="z")
    sp.add_argument("--task", type=int, default=0)
    sp.add_argument("--task-seed", type=int, default=0)
    sp.add_argument("--samples", type=int, default=0, help="limit test examples (0 = all)")
    sp.add_argument("--bins", type=int, default=50)
    return ap


def _resolve_config(args) -> dict:
    overrides = list(args.overrides)
    if args.data:
        overrides.append(f"data.dir={json.dumps(args.data)}")
    if args.out:
        overrides.append(f"output.dir={json.dumps(args.out)}")
    return cfgmod.load(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args.kinds, args.seeds, args.size, args.sparsity,
                                 args.corrupt, args.out)
        if args.command == "resources":
            return cmd_resources(args.models, args.size, args.params, args.backward,
                                 args.energy, args.json, args.out)
        cfg = _resolve_config(args)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.task, args.task_seed)
        if args.command == "cl":
            return cmd_cl(cfg)
        return cmd_gate_hist(cfg, args.checkpoint, args.mode, args.task, args.task_seed,
                             args.samples, args.bins)
    except (cfgmod.ConfigError, PreflightError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
