"""Command-line experiment runner.

    lowbit train-single  --bits 1 --method rsm --seeds 0-19 --out runs/t1
    lowbit baseline-sag  --out runs/sag
    lowbit train-mlp     --config fc2 --method gcd --subsample 0.2 --out runs/fc2
    lowbit verify
    lowbit report runs/

Every run directory gets ``manifest.json`` (config, config hash, seeds, build
id), ``metrics.json`` (deterministic: no timings), ``timing.json`` and CSVs.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__, checks, dataio, netmodel, optim, quantcore
from .oracle import ExhaustiveSizeError, check_supermodular, logistic_loss

log = logging.getLogger("lowbit")

SINGLE_TASK = ([0, 1, 2], [3, 4, 5])
MLP_TASK = ([0, 1, 2, 3, 4], [5, 6, 7, 8, 9])


@dataclass
class RunConfig:
    data: str | None = None
    dataset: str = "mnist"
    positive: list | None = None
    negative: list | None = None
    subsample: float = 1.0
    subsample_seed: int = 0
    arch: str = "fc2"
    bits: int = 1
    method: str = "rsm"
    surrogate: str = "no_relu"
    n_iter: int | None = None
    temperature: float = 0.05
    beta: float = 0.5
    multibit_scale: float | None = None
    multibit_objective: str = "exact"
    sag_epochs: int = 20
    output_epochs: int = 5
    seeds: list = field(default_factory=lambda: [0])
    out: str = "runs"
    allow_cifar: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def parse_seeds(text: str) -> list:
    """'3' -> [3]; '0-4' -> [0..4]; '1,5,7' -> [1, 5, 7]."""
    seeds = []
    for part in str(text).split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-")
            seeds.extend(range(int(lo), int(hi) + 1))
        elif part:
            seeds.append(int(part))
    return seeds


def build_id() -> str:
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, rows: list, columns) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


def _summary(values) -> dict:
    values = np.asarray(values, dtype=float)
    return {"mean": float(values.mean()), "std": float(values.std()), "n": int(values.size)}


def write_manifest(out: Path, command: str, cfg: RunConfig) -> None:
    _dump(out / "manifest.json", {
        "command": command, "config": cfg.to_dict(), "config_hash": cfg.digest(),
        "seeds": cfg.seeds, "build_id": build_id(),
    })


def load_tasks(cfg: RunConfig, default_task) -> tuple:
    pos = cfg.positive if cfg.positive is not None else default_task[0]
    neg = cfg.negative if cfg.negative is not None else default_task[1]
    if cfg.dataset == "mnist":
        train = dataio.load_mnist_split("train", cfg.data)
        test = dataio.load_mnist_split("test", cfg.data)
    elif cfg.dataset == "cifar10":
        if not cfg.allow_cifar:
            raise SystemExit("CIFAR-10 runs are long; pass --allow-cifar to run them")
        train = dataio.load_cifar10_split("train", cfg.data)
        test = dataio.load_cifar10_split("test", cfg.data)
    else:
        raise SystemExit(f"unknown dataset {cfg.dataset!r}")
    tr = dataio.make_binary_task(train, pos, neg)
    te = dataio.make_binary_task(test, pos, neg)
    if cfg.subsample < 1:
        tr = dataio.subsample(tr, cfg.subsample, cfg.subsample_seed)
    return tr, te


# -- single layer -------------------------------------------------------------------

def multibit_beta(cfg: RunConfig, d: int) -> float:
    """Largest weight magnitude for B >= 2: ceil(B/2) times the per-plane
    scale, which defaults to the He level sqrt(2 / d)."""
    s = cfg.multibit_scale if cfg.multibit_scale is not None else math.sqrt(2.0 / d)
    return s * -(-cfg.bits // 2)


def train_single(cfg: RunConfig, train, test, seed: int):
    ocfg = optim.OptimizerConfig(
        n_iter=cfg.n_iter or (1 if cfg.bits == 1 else 3), seed=seed,
        multibit_objective=cfg.multibit_objective,
        temperature=cfg.temperature)
    if cfg.bits == 1:
        levels = quantcore.QuantLevels.symmetric(cfg.beta)
        w = optim.train_single_binary(train, levels, cfg.method, ocfg)
    else:
        m = quantcore.new_multibit(train.d, cfg.bits, multibit_beta(cfg, train.d))
        w = optim.multibit_cd(train, m, ocfg, cfg.method)
    return w


def cmd_train_single(cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    (out / "weights").mkdir(parents=True, exist_ok=True)
    write_manifest(out, "train-single", cfg)
    train, test = load_tasks(cfg, SINGLE_TASK)
    rows, timing = [], {}
    for seed in cfg.seeds:
        t0 = time.perf_counter()
        w = train_single(cfg, train, test, seed)
        timing[str(seed)] = time.perf_counter() - t0
        dense = w.dense()
        tr_loss, tr_acc = optim.evaluate_outputs(train.features @ dense, train.y)
        te_loss, te_acc = optim.evaluate_outputs(test.features @ dense, test.y)
        rows.append({"seed": seed, "bits": cfg.bits, "method": cfg.method,
                     "train_loss": tr_loss, "train_acc": tr_acc,
                     "test_loss": te_loss, "test_acc": te_acc})
        quantcore.save(out / "weights" / f"seed{seed}.lbw", w)
        np.savetxt(out / "weights" / f"seed{seed}.csv", dense.reshape(train.image_shape[1:] or (-1,)),
                   delimiter=",", fmt="%.17g")
        log.info("seed %d: test acc %.4f loss %.4f", seed, te_acc, te_loss)
    _write_csv(out / "seeds.csv", rows, rows[0].keys())
    metrics = {"kind": "single", "bits": cfg.bits, "method": cfg.method,
               "test_acc": _summary([r["test_acc"] for r in rows]),
               "test_loss": _summary([r["test_loss"] for r in rows]),
               "train_loss": _summary([r["train_loss"] for r in rows]),
               "per_seed": rows}
    _dump(out / "metrics.json", metrics)
    _dump(out / "timing.json", {"seconds_per_seed": timing})
    return metrics


def cmd_baseline_sag(cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, "baseline-sag", cfg)
    train, test = load_tasks(cfg, SINGLE_TASK)
    rows, timing = [], {}
    for seed in cfg.seeds:
        t0 = time.perf_counter()
        w = optim.sag(train.features, train.y, cfg.sag_epochs, seed=seed)
        timing[str(seed)] = time.perf_counter() - t0
        te_loss, te_acc = optim.evaluate_outputs(test.features @ w, test.y)
        rows.append({"seed": seed, "test_loss": te_loss, "test_acc": te_acc})
        np.savetxt(out / f"weights_seed{seed}.csv", w, delimiter=",", fmt="%.17g")
    _write_csv(out / "seeds.csv", rows, rows[0].keys())
    metrics = {"kind": "sag", "bits": 32, "method": "sag",
               "test_acc": _summary([r["test_acc"] for r in rows]),
               "test_loss": _summary([r["test_loss"] for r in rows]), "per_seed": rows}
    _dump(out / "metrics.json", metrics)
    _dump(out / "timing.json", {"seconds_per_seed": timing})
    return metrics


# -- multi layer ----------------------------------------------------------------------

def cmd_train_mlp(cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    arch = netmodel.architecture(cfg.arch)
    write_manifest(out, "train-mlp", cfg)
    default = MLP_TASK if cfg.dataset == "mnist" else SINGLE_TASK
    train, test = load_tasks(cfg, default)
    runs, timing = [], {}
    for seed in cfg.seeds:
        model = netmodel.build_model(arch, train.image_shape, cfg.bits, seed)
        ocfg = optim.OptimizerConfig(
            n_iter=cfg.n_iter or 5, seed=seed, method=cfg.method, surrogate=cfg.surrogate,
            temperature=cfg.temperature, sag_epochs=cfg.sag_epochs, output_epochs=cfg.output_epochs)
        model, report = optim.multilayer_train(model, train, ocfg, test)
        report.meta.update({"arch": arch.get("name", str(cfg.arch)), "method": cfg.method,
                            "bits": cfg.bits})
        (out / f"report_seed{seed}.json").write_text(report.to_json(timing=False))
        csv_path = out / f"sweeps_seed{seed}.csv"
        csv_path.unlink(missing_ok=True)
        report.append_csv(csv_path)
        netmodel.save_model(out / f"model_seed{seed}", model)
        timing[str(seed)] = [r["seconds"] for r in report.rows]
        runs.append(report.to_dict(timing=False))
    last = [r["rows"][-1] for r in runs]
    metrics = {"kind": "mlp", "arch": arch.get("name", str(cfg.arch)), "method": cfg.method,
               "bits": cfg.bits,
               "test_acc": _summary([r["test_acc"] for r in last]),
               "test_loss": _summary([r["test_loss"] for r in last]),
               "train_loss": _summary([r["train_loss"] for r in last]), "runs": runs}
    _dump(out / "metrics.json", metrics)
    per_sweep = [s for v in timing.values() for s in v]
    _dump(out / "timing.json", {"seconds_per_sweep": timing,
                                "mean_seconds_per_sweep": float(np.mean(per_sweep))})
    return metrics


# -- verification and reporting ---------------------------------------------------------

def cmd_verify(fault: bool = False, quick: bool = False, exhaustive_d: int | None = None) -> int:
    if exhaustive_d is not None:
        try:
            rng = np.random.default_rng(0)
            X = rng.random((4, exhaustive_d))
            y = np.array([1.0, -1.0, 1.0, -1.0])
            rep = check_supermodular(lambda m: logistic_loss(X @ m, y), exhaustive_d)
        except ExhaustiveSizeError as e:
            print(f"[FAIL] exhaustive check refused: {e}")
            return 2
        print(f"[{'PASS' if rep.ok else 'FAIL'}] exhaustive check d={exhaustive_d}: "
              f"{rep.n_checked} pairs, {rep.n_violations} violations")
        return 0 if rep.ok else 1
    results = checks.run_all(fault=fault, quick=quick)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def _fmt(s: dict, scale: float = 1.0, digits: int = 3) -> str:
    return f"{s['mean'] * scale:.{digits}f} ± {s['std'] * scale:.{digits}f}"


def cmd_report(paths) -> str:
    """Markdown tables from the ``metrics.json`` files under ``paths``."""
    found = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            found.extend(sorted(p.rglob("metrics.json")))
        elif p.exists():
            found.append(p)
    single, mlp = [], []
    for path in found:
        m = json.loads(path.read_text())
        timing_path = path.with_name("timing.json")
        t = json.loads(timing_path.read_text()) if timing_path.exists() else {}
        if m["kind"] in ("single", "sag"):
            bits = "full precision" if m["kind"] == "sag" else f"{m['bits']}-bit"
            single.append(f"| {m['method'].upper()} | {bits} | {_fmt(m['test_acc'], 100, 1)} "
                          f"| {_fmt(m['test_loss'])} | {m['test_acc']['n']} |")
        elif m["kind"] == "mlp":
            secs = t.get("mean_seconds_per_sweep")
            secs = f"{secs:.1f}" if secs is not None else "-"
            mlp.append(f"| {m['arch']} | {m['method'].upper()} | {m['bits']} "
                       f"| {_fmt(m['test_acc'], 100, 1)} | {_fmt(m['test_loss'])} | {secs} |")
    lines = []
    if single:
        lines += ["| Method | Weights | Test acc (%) | Test loss | Seeds |",
                  "|---|---|---|---|---|", *single, ""]
    if mlp:
        lines += ["| Architecture | Method | Bits | Test acc (%) | Test loss | Time(s)/Iter |",
                  "|---|---|---|---|---|---|", *mlp, ""]
    return "\n".join(lines) if lines else "no metrics.json files found\n"


# -- argument parsing ------------------------------------------------------------------

def _add_common(p, mlp: bool = False):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--data", help=f"dataset root (default ${dataio.DATA_DIR_ENV})")
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", help="e.g. 0-19 or 0,3,5")
    p.add_argument("--out")
    p.add_argument("--subsample", type=float)
    p.add_argument("--positive", help="comma-separated class list")
    p.add_argument("--negative", help="comma-separated class list")
    p.add_argument("--dataset", choices=["mnist", "cifar10"])
    p.add_argument("--allow-cifar", action="store_true", default=None)
    if mlp:
        p.add_argument("--method", choices=["gcd", "rsm", "hybrid"])
        p.add_argument("--arch", help="architecture name or JSON file (alias of config 'arch')")
    else:
        p.add_argument("--method", choices=["gcd", "rsm"])
    p.add_argument("--bits", type=int)
    p.add_argument("--surrogate", choices=["tangent", "no_relu"])
    p.add_argument("--sweeps", type=int, dest="n_iter")
    p.add_argument("--temperature", type=float)


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lowbit", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("train-single", help="single-layer binary / multi-bit classifier"))
    _add_common(sub.add_parser("baseline-sag", help="full-precision logistic regression"))
    p = sub.add_parser("train-mlp", help="layerwise training of a quantized network")
    _add_common(p, mlp=True)
    p = sub.add_parser("verify", help="run the numerical invariant checks")
    p.add_argument("--inject-fault", action="store_true",
                   help="corrupt the incremental margin update (the cache check must fail)")
    p.add_argument("--quick", action="store_true")
    p.add_argument("--exhaustive-d", type=int, help="run one exhaustive supermodularity check of size d")
    p = sub.add_parser("report", help="aggregate metrics.json files into Markdown tables")
    p.add_argument("paths", nargs="+")
    p.add_argument("--out", help="write the Markdown here instead of stdout")
    return ap


def config_from_args(args) -> RunConfig:
    base = {}
    if getattr(args, "config", None):
        src = Path(args.config)
        if src.suffix == ".json" and src.exists():
            base = json.loads(src.read_text())
            if "layers" in base:
                base = {"arch": str(src)}
        else:
            base = {"arch": args.config}
    for key in ("data", "out", "subsample", "dataset", "allow_cifar", "method", "bits",
                "surrogate", "n_iter", "temperature", "arch"):
        val = getattr(args, key, None)
        if val is not None:
            base[key] = val
    for key in ("positive", "negative"):
        val = getattr(args, key, None)
        if val is not None:
            base[key] = [int(v) for v in val.split(",")]
    if args.seeds is not None:
        base["seeds"] = parse_seeds(args.seeds)
    elif args.seed is not None:
        base["seeds"] = [args.seed]
    if args.command == "train-mlp":
        base.setdefault("method", "gcd")
    return RunConfig.from_dict(base)


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.command == "verify":
        return cmd_verify(args.inject_fault, args.quick, args.exhaustive_d)
    if args.command == "report":
        text = cmd_report(args.paths)
        if args.out:
            Path(args.out).write_text(text)
        else:
            print(text)
        return 0
    cfg = config_from_args(args)
    try:
        if args.command == "train-single":
            metrics = cmd_train_single(cfg)
        elif args.command == "baseline-sag":
            metrics = cmd_baseline_sag(cfg)
        else:
            metrics = cmd_train_mlp(cfg)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except netmodel.ArchitectureError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(f"test accuracy {_fmt(metrics['test_acc'], 100, 2)}%  "
          f"loss {_fmt(metrics['test_loss'], 1, 4)}  -> {cfg.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
