"""Command-line experiment runner.

Every (policy, lambda, seed) evaluation and every per-seed training sweep is
a unit whose result file is written atomically under the output directory.
Aggregate tables are rebuilt from the unit files at the end of each run, so
an interrupted run can simply be started again.

Modes
-----
``eval``          evaluate a backoff baseline or a trained network
``train``         run the DQN transfer sweep and write checkpoints per lambda
``sweep``         ``train`` (for ``dqn``) followed by evaluation at every lambda
``policy-table``  read checkpoints and tabulate the buffer-full transmit probabilities
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .env import BUFFER_FULL_LABELS
from .policy import NSEB, SEB, DQNPolicy, extract_policy_table, make_policy
from .qnet import load_checkpoint, save_checkpoint, write_atomic
from .train import (TrainSchedule, default_lambda_grid, evaluate_one, transfer_sweep)

log = logging.getLogger("aloha_dqn")

MODES = ("train", "eval", "sweep", "policy-table")
POLICIES = ("dqn", NSEB, SEB)
DEFAULT_USERS = 10
DEFAULT_SLOTS = {"dqn": 30_000, NSEB: 100_000, SEB: 100_000}
TRACE_STRIDE = 10
FAILED_MARKER = "FAILED"
DONE_MARKER = "DONE"

CURVE_COLUMNS = ("policy", "lambda", "seed", "throughput", "system_aop")
TABLE_COLUMNS = ("lambda", "state_label", "transmit_prob")
BOX_COLUMNS = ("policy", "lambda", "seed", "user", "p25", "p50", "p75", "whisker_low", "whisker_high", "mean")
TRACE_COLUMNS = ("slot", "lambda", "alpha", "beta", "loss", "reward")


class SpecError(ValueError):
    """Invalid experiment specification; the message names the field or line."""


@dataclass(frozen=True)
class ExperimentSpec:
    mode: str
    policy: str = "dqn"
    sigma: float | None = None
    lambdas: tuple = ()
    users: int = DEFAULT_USERS
    slots: int = 0
    seeds: tuple = (0,)
    out: str = "runs"
    checkpoint: str | None = None
    resume: bool = False
    jobs: int = 1
    schedule: TrainSchedule = field(default_factory=TrainSchedule)

    @property
    def policy_id(self) -> str:
        return "dqn" if self.policy == "dqn" else f"{self.policy}-{self.sigma:g}"


# ------------------------------------------------------------ parsing --

def fmt(x) -> str:
    """Decimal text for CSV cells: 17 significant digits for floats."""
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def parse_lambdas(values) -> tuple:
    """Expand repeated values and ``a:b:step`` ranges (end inclusive)."""
    out = []
    for v in values:
        text = str(v).strip()
        if ":" in text:
            parts = text.split(":")
            if len(parts) != 3:
                raise SpecError(f"lambda range {text!r} must look like start:stop:step")
            a, b, step = (float(p) for p in parts)
            if step <= 0 or b < a:
                raise SpecError(f"lambda range {text!r} is empty")
            n = int(math.floor((b - a) / step + 1e-9)) + 1
            out.extend(round(a + i * step, 10) for i in range(n))
        else:
            out.append(float(text))
    for lam in out:
        if not (math.isfinite(lam) and lam > 0):
            raise SpecError(f"lambda must be positive, got {lam}")
    if len(set(out)) != len(out):
        raise SpecError("duplicate lambda values")
    return tuple(sorted(out))


def parse_seeds(value) -> tuple:
    """``"0,1,2"``, ``"0:5"`` (half-open) or a list of ints."""
    if isinstance(value, (list, tuple)):
        items = [str(v) for v in value]
    else:
        items = [p for p in str(value).split(",") if p.strip()]
    seeds = []
    for item in items:
        item = item.strip()
        if ":" in item:
            lo, hi = (int(p) for p in item.split(":"))
            seeds.extend(range(lo, hi))
        else:
            seeds.append(int(item))
    if not seeds:
        raise SpecError("seeds: at least one seed is required")
    if any(s < 0 for s in seeds):
        raise SpecError("seeds must be non-negative")
    if len(set(seeds)) != len(seeds):
        raise SpecError(f"seeds: duplicate entries in {seeds}")
    return tuple(seeds)


CONFIG_KEYS = {"mode", "policy", "sigma", "lambda", "users", "slots", "seeds", "out", "checkpoint",
               "resume", "jobs"}


def read_config(path) -> dict:
    """Load a flat key/value YAML document, reporting problems by line."""
    text = Path(path).read_text()
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        raise SpecError(f"{path}: {exc}") from None
    if root is None:
        return {}
    if not isinstance(root, yaml.MappingNode):
        raise SpecError(f"{path}:{root.start_mark.line + 1}: expected key: value pairs")
    out = {}
    for key_node, value_node in root.value:
        line = key_node.start_mark.line + 1
        key = key_node.value
        if key not in CONFIG_KEYS:
            raise SpecError(f"{path}:{line}: unknown key {key!r}")
        if key in out:
            raise SpecError(f"{path}:{line}: duplicate key {key!r}")
        if isinstance(value_node, yaml.MappingNode):
            raise SpecError(f"{path}:{line}: {key} must be a scalar or a list")
        out[key] = yaml.safe_load(yaml.serialize(value_node))
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aloha-dqn", description=__doc__.split("\n\n")[0],
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", help="flat key/value YAML file; flags override its values")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--policy", choices=POLICIES)
    p.add_argument("--sigma", type=float, help="backoff factor for nseb/seb (> 1)")
    p.add_argument("--lambda", dest="lambdas", action="append",
                   help="total arrival rate; repeat the flag or give start:stop:step")
    p.add_argument("--users", type=int, help=f"number of users (default {DEFAULT_USERS})")
    p.add_argument("--slots", type=int, help="evaluation horizon K (default 30000 dqn, 100000 backoff)")
    p.add_argument("--seeds", help="comma list or lo:hi range of master seeds (default 0)")
    p.add_argument("--out", help="output directory (default runs)")
    p.add_argument("--checkpoint", help="checkpoint file, or a directory of per-lambda checkpoints")
    p.add_argument("--resume", action="store_true", default=None,
                   help="skip units whose result files already exist")
    p.add_argument("--jobs", type=int, help="parallel evaluation units (default 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def parse_spec(argv=None) -> ExperimentSpec:
    args = build_parser().parse_args(argv)
    values = read_config(args.config) if args.config else {}
    flag_values = {
        "mode": args.mode, "policy": args.policy, "sigma": args.sigma, "lambda": args.lambdas,
        "users": args.users, "slots": args.slots, "seeds": args.seeds, "out": args.out,
        "checkpoint": args.checkpoint, "resume": args.resume, "jobs": args.jobs,
    }
    values.update({k: v for k, v in flag_values.items() if v is not None})
    return spec_from_values(values)


def spec_from_values(values: dict) -> ExperimentSpec:
    unknown = set(values) - CONFIG_KEYS
    if unknown:
        raise SpecError(f"unknown keys: {sorted(unknown)}")
    mode = values.get("mode")
    if mode not in MODES:
        raise SpecError(f"mode: expected one of {MODES}, got {mode!r}")
    policy = values.get("policy", "dqn")
    if policy not in POLICIES:
        raise SpecError(f"policy: expected one of {POLICIES}, got {policy!r}")
    if mode in ("train", "policy-table") and policy != "dqn":
        raise SpecError(f"mode {mode} needs policy dqn")

    sigma = values.get("sigma")
    if policy in (NSEB, SEB):
        if sigma is None:
            raise SpecError(f"sigma: required for policy {policy}")
        sigma = float(sigma)
        if not sigma > 1:
            raise SpecError(f"sigma: must exceed 1, got {sigma}")
    elif sigma is not None:
        raise SpecError("sigma: only valid for nseb/seb")

    raw = values.get("lambda")
    if raw is None:
        if mode == "eval":
            raise SpecError("lambda: required in eval mode")
        lambdas = default_lambda_grid()
    else:
        lambdas = parse_lambdas(raw if isinstance(raw, (list, tuple)) else [raw])

    users = int(values.get("users", DEFAULT_USERS))
    if users < 1:
        raise SpecError(f"users: must be >= 1, got {users}")
    slots = int(values.get("slots", DEFAULT_SLOTS[policy]))
    if slots < 1:
        raise SpecError(f"slots: must be >= 1, got {slots}")
    jobs = int(values.get("jobs", 1))
    if jobs < 1:
        raise SpecError(f"jobs: must be >= 1, got {jobs}")

    checkpoint = values.get("checkpoint")
    if mode == "policy-table" or (mode == "eval" and policy == "dqn"):
        if checkpoint is None:
            raise SpecError(f"checkpoint: required for mode {mode} with policy dqn")
    schedule = replace(TrainSchedule(), n_users=users, eval_slots=slots, lambda_grid=lambdas)
    return ExperimentSpec(
        mode=mode, policy=policy, sigma=sigma, lambdas=lambdas, users=users, slots=slots,
        seeds=parse_seeds(values.get("seeds", "0")), out=str(values.get("out", "runs")),
        checkpoint=None if checkpoint is None else str(checkpoint),
        resume=bool(values.get("resume", False)), jobs=jobs, schedule=schedule,
    )


# ------------------------------------------------------------- layout --

def lam_tag(lam: float) -> str:
    return f"lambda_{lam:.2f}"


def unit_path(out: Path, policy_id: str, lam: float, seed: int) -> Path:
    return out / "units" / policy_id / lam_tag(lam) / f"seed_{seed}.json"


def seed_dir(out: Path, seed: int) -> Path:
    return out / "checkpoints" / f"seed_{seed}"


def checkpoint_for(source: Path, lam: float) -> Path:
    if source.is_dir():
        path = source / f"{lam_tag(lam)}.json"
        if not path.exists():
            raise FileNotFoundError(f"no checkpoint for lambda={lam:.2f} in {source}")
        return path
    return source


def csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def dump_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


# ------------------------------------------------------------ running --

def run_training(spec: ExperimentSpec, out: Path, seed: int) -> dict:
    """One transfer sweep; returns ``{lambda: checkpoint path}``."""
    d = seed_dir(out, seed)
    paths = {lam: d / f"{lam_tag(lam)}.json" for lam in spec.lambdas}
    if spec.resume and (d / DONE_MARKER).exists() and all(p.exists() for p in paths.values()):
        log.info("seed %d: training already complete, skipping", seed)
        return paths
    log.info("seed %d: training over %d arrival rates", seed, len(spec.lambdas))
    result = transfer_sweep(spec.lambdas, spec.schedule, master_seed=seed, trace_stride=TRACE_STRIDE)
    for phase in result.phases:
        save_checkpoint(phase.net, paths[phase.lam])
    rows = [(lam, f"s{j}", phase.table[j]) for lam, phase in result.by_lambda().items()
            for j in BUFFER_FULL_LABELS]
    write_atomic(d / "policy_table.csv", csv_text(TABLE_COLUMNS, rows))
    write_atomic(d / "trace.csv", csv_text(TRACE_COLUMNS, result.trace.rows))
    write_atomic(d / DONE_MARKER, "")
    return paths


def policy_for(spec: ExperimentSpec, lam: float, checkpoint: Path | None):
    if spec.policy == "dqn":
        return DQNPolicy(load_checkpoint(checkpoint_for(checkpoint, lam)), spec.schedule.beta_max)
    return make_policy(spec.policy, spec.sigma)


def run_eval_unit(spec: ExperimentSpec, out: Path, lam: float, seed: int, checkpoint: Path | None):
    path = unit_path(out, spec.policy_id, lam, seed)
    if spec.resume and path.exists():
        return path
    summary = evaluate_one(policy_for(spec, lam, checkpoint), lam, spec.slots, seed, spec.users)
    summary["policy"] = spec.policy_id
    write_atomic(path, dump_json(summary))
    return path


def _eval_task(args):
    return run_eval_unit(*args)


def run_evaluations(spec: ExperimentSpec, out: Path, sources: dict) -> None:
    tasks = [(spec, out, lam, seed, sources.get(seed)) for lam in spec.lambdas for seed in spec.seeds]
    if spec.jobs > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=spec.jobs) as pool:
            list(pool.map(_eval_task, tasks))
    else:
        for task in tasks:
            log.info("eval %s lambda=%.2f seed=%d", spec.policy_id, task[2], task[3])
            _eval_task(task)


def load_units(out: Path) -> list:
    runs = [json.loads(p.read_text()) for p in sorted((out / "units").glob("*/*/seed_*.json"))]
    runs.sort(key=lambda r: (r["policy"], r["lambda"], r["seed"]))
    return runs


def write_aggregates(out: Path) -> None:
    """Rebuild summary.json, curves.csv and boxplot.csv from every unit file."""
    runs = load_units(out)
    if not runs:
        return
    summary = [{k: v for k, v in r.items() if k != "boxplot"} for r in runs]
    write_atomic(out / "summary.json", dump_json({"runs": summary}))
    write_atomic(out / "curves.csv", csv_text(CURVE_COLUMNS, [[r[c] for c in CURVE_COLUMNS] for r in runs]))
    box_rows = []
    for r in runs:
        for user, b in enumerate(r.get("boxplot", [])):
            box_rows.append([r["policy"], r["lambda"], r["seed"], user] + [b[c] for c in BOX_COLUMNS[4:]])
    write_atomic(out / "boxplot.csv", csv_text(BOX_COLUMNS, box_rows))


def write_policy_table(out: Path, tables: dict) -> None:
    """``tables`` maps seed -> {lambda: checkpoint path}; rows hold the seed mean."""
    rows = []
    beta = TrainSchedule().beta_max
    lams = sorted(next(iter(tables.values())))
    per_seed = {seed: {lam: extract_policy_table(load_checkpoint(p), beta) for lam, p in paths.items()}
                for seed, paths in tables.items()}
    for lam in lams:
        for j in BUFFER_FULL_LABELS:
            rows.append((lam, f"s{j}", float(np.mean([per_seed[s][lam][j] for s in per_seed]))))
    write_atomic(out / "policy_table.csv", csv_text(TABLE_COLUMNS, rows))
    doc = {"policy_table": {str(seed): {f"{lam:.2f}": {f"s{j}": t[j] for j in BUFFER_FULL_LABELS}
                                        for lam, t in sorted(per.items())}
                            for seed, per in sorted(per_seed.items())}}
    write_atomic(out / "policy_tables.json", dump_json(doc))


def run(spec: ExperimentSpec) -> int:
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / FAILED_MARKER
    if marker.exists():
        marker.unlink()
    write_atomic(out / "spec.json", dump_json(
        {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(spec).items() if k != "schedule"}))
    try:
        sources = {}
        if spec.policy == "dqn" and spec.mode in ("train", "sweep"):
            for seed in spec.seeds:
                sources[seed] = seed_dir(out, seed)
                run_training(spec, out, seed)
            write_policy_table(out, {s: {lam: seed_dir(out, s) / f"{lam_tag(lam)}.json"
                                         for lam in spec.lambdas} for s in spec.seeds})
        elif spec.mode == "policy-table":
            src = Path(spec.checkpoint)
            write_policy_table(out, {0: {lam: checkpoint_for(src, lam) for lam in spec.lambdas}})
        elif spec.checkpoint is not None:
            sources = {seed: Path(spec.checkpoint) for seed in spec.seeds}

        if spec.mode in ("eval", "sweep"):
            run_evaluations(spec, out, sources)
        write_aggregates(out)
    except Exception as exc:  # noqa: BLE001 - any abort must leave a marker and a nonzero status
        write_atomic(marker, "".join(traceback.format_exception(exc)))
        log.error("run aborted: %s (details in %s)", exc, marker)
        return 1
    return 0


def main(argv=None) -> int:
    parser_args = sys.argv[1:] if argv is None else list(argv)
    verbose = "-v" in parser_args or "--verbose" in parser_args
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        spec = parse_spec(parser_args)
    except (SpecError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return run(spec)


if __name__ == "__main__":
    sys.exit(main())
