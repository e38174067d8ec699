"""Command-line front end: verification suite, runs, sweeps, reports.

JSON configs in, CSV metric streams out. All file writes are atomic
(write-temp-then-rename), sweep cells are resumable (a cell is complete
exactly when its JSON sidecar exists), and configs are validated strictly:
unknown keys are rejected so typos in sweep files fail loudly.

Exit codes: 0 success, 1 check/run failure, 2 usage/config error,
3 internal error.
"""

from __future__ import annotations

import argparse
import itertools
import json
import math
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__, bench, optim, oracle

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_INTERNAL = 3

RUN_SCHEMA = "altlora-run/1"
DEFAULT_CHECK_SEED = 1789

_TRAIN_KEYS = {
    "eta",
    "beta1",
    "beta2",
    "gamma",
    "lambda",
    "order",
    "steps",
    "eps",
    "lora_plus_ratio",
    "bias_correction",
    "schedule",
    "warmup_ratio",
}
_SPEC_KEYS = {
    "task",
    "k",
    "d",
    "r",
    "width",
    "teacher_rank",
    "kappa",
    "optimizer",
    "init_a",
    "init_b",
    "alpha",
    "seed",
    "eval_every",
    "kappa_knob",
}
_TOP_KEYS = _SPEC_KEYS | {"train", "out", "name", "grid"}
_GRID_KEYS = {"eta", "alpha", "order", "optimizer"}


class ConfigError(Exception):
    """Malformed or invalid configuration input."""


def _reject_unknown(given: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def load_config(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config root must be a JSON object, got {type(doc).__name__}")
    _reject_unknown(doc, _TOP_KEYS, "config")
    train = doc.get("train", {})
    if not isinstance(train, dict):
        raise ConfigError("'train' must be a JSON object")
    _reject_unknown(train, _TRAIN_KEYS, "config.train")
    if "grid" in doc:
        grid = doc["grid"]
        if not isinstance(grid, dict):
            raise ConfigError("'grid' must be a JSON object")
        _reject_unknown(grid, _GRID_KEYS, "config.grid")
        for axis, values in grid.items():
            if not isinstance(values, list) or not values:
                raise ConfigError(f"grid axis {axis!r} must be a nonempty list")
    return doc


def build_spec(doc: dict, seed_override: int | None = None) -> bench.ExperimentSpec:
    train_doc = dict(doc.get("train", {}))
    if "eta" not in train_doc:
        raise ConfigError("config.train.eta is required")
    if "lambda" in train_doc:
        train_doc["lam"] = train_doc.pop("lambda")
    try:
        train = optim.TrainConfig(**train_doc)
        spec_kwargs = {k: doc[k] for k in _SPEC_KEYS if k in doc}
        if seed_override is not None:
            spec_kwargs["seed"] = seed_override
        return bench.ExperimentSpec(train=train, **spec_kwargs)
    except (TypeError, ValueError, bench.InvalidSpec) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def resolve_out_dir(flag_value: str | None, doc: dict | None = None) -> Path:
    if flag_value:
        return Path(flag_value)
    if doc and doc.get("out"):
        return Path(str(doc["out"]))
    env = os.environ.get("ALTLORA_OUT")
    if env:
        return Path(env)
    return Path.cwd() / "runs"


def atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.parent / f".{path.name}.{os.getpid()}.tmp"
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _build_id() -> str:
    # ALTLORA_BUILD_ID lets packagers stamp a git describe string
    return os.environ.get("ALTLORA_BUILD_ID", f"altlora-{__version__}")


def _sidecar(spec: bench.ExperimentSpec, record: bench.RunRecord) -> dict:
    return {
        "schema": RUN_SCHEMA,
        "spec": spec.to_dict(),
        "steps_to_threshold": record.steps_to_threshold,
        "diverged": record.diverged,
        "final_loss": None if math.isnan(record.final_loss) else record.final_loss,
        "build_id": _build_id(),
    }


def _write_run(out_dir: Path, name: str, spec: bench.ExperimentSpec, record: bench.RunRecord) -> None:
    # CSV first, sidecar last: the sidecar is the completion marker
    atomic_write_text(out_dir / f"{name}.csv", record.to_csv())
    atomic_write_text(out_dir / f"{name}.json", json.dumps(_sidecar(spec, record), indent=2) + "\n")


def execute_run(spec: bench.ExperimentSpec, out_dir: Path, name: str) -> tuple[bool, str]:
    """Run one experiment and persist it; returns (ok, message)."""
    try:
        record = bench.run_experiment(spec)
    except bench.DivergenceDetected as exc:
        _write_run(out_dir, name, spec, exc.record)
        return False, f"{name}: diverged ({exc})"
    _write_run(out_dir, name, spec, record)
    return True, f"{name}: steps_to_threshold={record.steps_to_threshold}"


def _sweep_worker(payload):
    spec, out_dir, name = payload
    return execute_run(spec, Path(out_dir), name)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_verify(args) -> int:
    names = oracle.select_checks(args.filter)
    if not names:
        print(f"no checks selected by filter {args.filter!r}", file=sys.stderr)
        return EXIT_CONFIG
    report = oracle.run_checks(args.filter, seed=args.seed)
    out_dir = resolve_out_dir(args.out)
    atomic_write_text(out_dir / "check_report.json", json.dumps(report, indent=2) + "\n")
    width = max(len(c["name"]) for c in report["checks"])
    for c in report["checks"]:
        status = "PASS" if c["passed"] else "FAIL"
        print(f"{c['name']:<{width}}  n={c['instances']:<4d} max_dev={c['max_deviation']:.3e}  {status}")
    print(f"report: {out_dir / 'check_report.json'}")
    if report["passed"]:
        print(f"all {len(report['checks'])} checks passed")
        return EXIT_OK
    failed = [c["name"] for c in report["checks"] if not c["passed"]]
    print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
    return EXIT_FAILURE


def cmd_train(args) -> int:
    doc = load_config(args.config)
    if "grid" in doc:
        raise ConfigError("config has a 'grid' section; use the sweep command")
    spec = build_spec(doc, seed_override=args.seed)
    out_dir = resolve_out_dir(args.out, doc)
    name = doc.get("name") or Path(args.config).stem
    ok, message = execute_run(spec, out_dir, str(name))
    print(message)
    return EXIT_OK if ok else EXIT_FAILURE


def _grid_cells(doc: dict):
    grid = doc.get("grid", {})
    axes = []
    for axis in ("eta", "alpha", "order", "optimizer"):
        axes.append([(axis, v) for v in grid[axis]] if axis in grid else [(axis, None)])
    for combo in itertools.product(*axes):
        overrides = {axis: v for axis, v in combo if v is not None}
        yield overrides


def _cell_name(base: str, overrides: dict) -> str:
    parts = [base]
    for axis in ("eta", "alpha", "order", "optimizer"):
        if axis in overrides:
            parts.append(f"{axis}-{overrides[axis]:g}" if axis in ("eta", "alpha") else f"{axis}-{overrides[axis]}")
    return "__".join(parts)


def _cell_spec(doc: dict, overrides: dict, seed_override) -> bench.ExperimentSpec:
    cell_doc = {k: v for k, v in doc.items() if k not in ("grid", "out", "name")}
    cell_doc["train"] = dict(doc.get("train", {}))
    if "eta" in overrides:
        cell_doc["train"]["eta"] = overrides["eta"]
    if "order" in overrides:
        cell_doc["train"]["order"] = overrides["order"]
    if "alpha" in overrides:
        cell_doc["alpha"] = overrides["alpha"]
    if "optimizer" in overrides:
        cell_doc["optimizer"] = overrides["optimizer"]
    return build_spec(cell_doc, seed_override=seed_override)


def cmd_sweep(args) -> int:
    doc = load_config(args.config)
    if "grid" not in doc:
        raise ConfigError("sweep config needs a 'grid' section")
    out_dir = resolve_out_dir(args.out, doc)
    base = str(doc.get("name") or Path(args.config).stem)
    pending = []
    skipped = 0
    for overrides in _grid_cells(doc):
        name = _cell_name(base, overrides)
        if (out_dir / f"{name}.json").exists():
            skipped += 1
            continue
        pending.append((_cell_spec(doc, overrides, args.seed), str(out_dir), name))
    if skipped:
        print(f"resuming: {skipped} completed cell(s) skipped")
    failures = 0
    if args.threads > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=args.threads) as pool:
            for ok, message in pool.map(_sweep_worker, pending):
                print(message)
                failures += 0 if ok else 1
    else:
        for payload in pending:
            ok, message = _sweep_worker(payload)
            print(message)
            failures += 0 if ok else 1
    print(f"sweep: {len(pending)} run, {skipped} skipped, {failures} failed")
    return EXIT_OK if failures == 0 else EXIT_FAILURE


def _load_runs(directory: Path):
    offenders = []
    runs = []
    for csv_path in sorted(directory.glob("*.csv")):
        if csv_path.name == "summary.csv":
            continue
        try:
            record = bench.RunRecord.parse_csv(csv_path.read_text(encoding="utf-8"))
        except ValueError:
            offenders.append(csv_path.name)
            continue
        sidecar_path = csv_path.with_suffix(".json")
        if not sidecar_path.exists():
            continue
        meta = json.loads(sidecar_path.read_text(encoding="utf-8"))
        if meta.get("schema") != RUN_SCHEMA:
            offenders.append(sidecar_path.name)
            continue
        runs.append((csv_path.stem, meta, record))
    return runs, offenders


def cmd_report(args) -> int:
    directory = Path(args.directory)
    if not directory.is_dir():
        raise ConfigError(f"not a directory: {directory}")
    runs, offenders = _load_runs(directory)
    if offenders:
        print("schema mismatch in: " + ", ".join(offenders), file=sys.stderr)
        return EXIT_CONFIG
    if not runs:
        print(f"no runs in {directory}")
        return EXIT_OK

    header = "name,optimizer,task,kappa,eta,alpha,order,seed,steps_to_threshold,final_loss,diverged"
    lines = [header]
    for name, meta, record in runs:
        spec = meta["spec"]
        lines.append(
            ",".join(
                str(v)
                for v in (
                    name,
                    spec["optimizer"],
                    spec["task"],
                    spec["kappa"],
                    spec["train"]["eta"],
                    spec["alpha"] if spec["alpha"] is not None else spec["r"],
                    spec["train"]["order"],
                    spec["seed"],
                    meta["steps_to_threshold"],
                    meta["final_loss"],
                    meta["diverged"],
                )
            )
        )
    atomic_write_text(directory / "summary.csv", "\n".join(lines) + "\n")

    # best cell per optimizer: fewest steps to threshold, else lowest loss
    by_opt: dict = {}
    for name, meta, record in runs:
        by_opt.setdefault(meta["spec"]["optimizer"], []).append((name, meta))
    print(f"{len(runs)} run(s); summary written to {directory / 'summary.csv'}")
    print("best cell per optimizer:")
    for opt_name in sorted(by_opt):
        cells = by_opt[opt_name]

        def rank(item):
            stt = item[1]["steps_to_threshold"]
            loss = item[1]["final_loss"]
            return (0, stt) if stt >= 0 else (1, loss if loss is not None else math.inf)

        best = min(cells, key=rank)
        print(
            f"  {opt_name:<16} {best[0]}  steps_to_threshold={best[1]['steps_to_threshold']}"
            f"  final_loss={best[1]['final_loss']}"
        )

    kappas = sorted({meta["spec"]["kappa"] for _, meta, _ in runs})
    if len(kappas) > 1:
        print("steps_to_threshold vs kappa:")
        print("  " + " ".join(f"{'kappa=' + str(k):>12}" for k in kappas))
        for opt_name in sorted(by_opt):
            per_kappa = []
            for kappa in kappas:
                vals = [
                    meta["steps_to_threshold"]
                    for _, meta, _ in runs
                    if meta["spec"]["optimizer"] == opt_name and meta["spec"]["kappa"] == kappa
                ]
                per_kappa.append(min(vals) if vals else None)
            print(
                f"  {opt_name:<16}"
                + " ".join(f"{v if v is not None else '-':>12}" for v in per_kappa)
            )
            positives = [v for v in per_kappa if v is not None and v > 0]
            if len(positives) == len(kappas) and len(positives) > 1:
                ratio = max(positives) / min(positives)
                monotone = all(a <= b for a, b in zip(positives, positives[1:]))
                print(f"    ratio max/min = {ratio:.2f}, monotone in kappa: {'yes' if monotone else 'no'}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="altlora", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_verify = sub.add_parser("verify", help="run the invariant/oracle check suite")
    p_verify.add_argument("--filter", default=None, help="glob over check names")
    p_verify.add_argument("--seed", type=int, default=DEFAULT_CHECK_SEED)
    p_verify.add_argument("--out", default=None, help="output directory (default $ALTLORA_OUT)")
    p_verify.set_defaults(func=cmd_verify)

    p_train = sub.add_parser("train", help="run one experiment from a JSON config")
    p_train.add_argument("config")
    p_train.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_train.add_argument("--out", default=None)
    p_train.set_defaults(func=cmd_train)

    p_sweep = sub.add_parser("sweep", help="run a grid of experiments (resumable)")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--seed", type=int, default=None)
    p_sweep.add_argument("--out", default=None)
    p_sweep.add_argument("--threads", type=int, default=1, help="parallel sweep cells")
    p_sweep.set_defaults(func=cmd_sweep)

    p_report = sub.add_parser("report", help="aggregate a directory of runs")
    p_report.add_argument("directory")
    p_report.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception:  # pragma: no cover - internal failure path
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
