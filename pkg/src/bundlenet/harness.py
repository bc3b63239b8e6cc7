"""Experiment workbench: datasets, reference bounds, eta0 grid search, evaluation, training, reports.

A dataset directory holds ``manifest.json`` and ``instances/*.json``. Commands
add files next to them: ``gridsearch.csv`` and ``gridsearch_best.csv``,
``results_<method>.csv`` with per-iteration ``traces_<method>.csv``,
``checkpoint.npz`` with ``train_log.csv``, and a ``report/`` directory.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import network as nw
from .eta_strategies import KINDS, EtaConfig
from .oracles import (ContractError, GapParams, McndParams, OracleHandle, gap_percent,
                      generate_gap, generate_mcnd, load_instance, make_min_oracle, save_instance)
from .solvers import SolverConfig, Trace, run_adam, run_bundle, run_descent

log = logging.getLogger(__name__)

ETA_GRID = (1e4, 1e3, 1e2, 1e1, 1e0, 1e-1)
DEFAULT_BUDGETS = (10, 25, 50, 100)
RESULT_HEADER = ["dataset", "instance", "method", "eta0", "budget", "gap_pct", "bound", "wall_time_s", "seed"]
TRACE_HEADER = ["dataset", "instance", "method", "eta0", "seed", "iteration", "gap_pct", "wall_time_s"]
METHODS = tuple(f"bundle-{k}" for k in KINDS) + ("descent", "adam", "learned")

DEFAULT_CONFIG = {
    "generator": {
        "problem": "mcnd",
        "name": "MCND-small",
        "n_train": 50,
        "n_test": 20,
        "seed": 0,
        "params": {},
    },
    "eta": {"grid": list(ETA_GRID)},
    "solver": {
        "m": 0.001,
        "eps": 1e-6,
        "prune_window": 20,
        "record_times": True,
        "reference_iters": 2000,
        "reference_eps": 1e-8,
        "reference_sweep_iters": 50,
    },
    "train": {},
}


def merge_config(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in (override or {}).items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = merge_config(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path: str | Path | None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    try:
        user = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ContractError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    unknown = set(user) - set(DEFAULT_CONFIG)
    if unknown:
        raise ContractError(f"{path}: unknown config sections {sorted(unknown)}")
    return merge_config(DEFAULT_CONFIG, user)


def eta_config(config: dict, kind: str, eta0: float) -> EtaConfig:
    extra = {k: v for k, v in config["eta"].items() if k not in ("grid", "kind", "eta0")}
    return EtaConfig(kind=kind, eta0=eta0, **extra)


def solver_config(config: dict, kind: str, eta0: float, max_iter: int) -> SolverConfig:
    s = config["solver"]
    return SolverConfig(m=s["m"], eps=s["eps"], max_iter=max_iter, eta=eta_config(config, kind, eta0),
                        prune_window=s["prune_window"], record_times=s["record_times"])


def train_config(config: dict, seed: int | None = None) -> nw.TrainConfig:
    tc = {k: v for k, v in config["train"].items() if k != "net"}
    if seed is not None:
        tc["seed"] = seed
    return nw.TrainConfig(**tc)


# ---------------------------------------------------------------------------
# manifest


@dataclass
class InstanceRecord:
    name: str
    file: str
    split: str
    seed: int


@dataclass
class DatasetManifest:
    name: str
    problem: str
    instances: list[InstanceRecord]
    generator: dict
    references: dict[str, float] = field(default_factory=dict)

    def split(self, which: str) -> list[InstanceRecord]:
        return [r for r in self.instances if r.split == which]

    def to_dict(self) -> dict:
        return {"name": self.name, "problem": self.problem, "generator": self.generator,
                "instances": [asdict(r) for r in self.instances],
                "references": dict(sorted(self.references.items()))}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        m = cls(d["name"], d["problem"], [InstanceRecord(**r) for r in d["instances"]],
                d.get("generator", {}), {k: float(v) for k, v in d.get("references", {}).items()})
        check_manifest(m)
        return m


def check_manifest(m: DatasetManifest) -> None:
    names = [r.name for r in m.instances]
    if len(set(names)) != len(names):
        raise ContractError("manifest has duplicate instance names")
    bad = {r.split for r in m.instances} - {"train", "test"}
    if bad:
        raise ContractError(f"manifest has unknown splits {sorted(bad)}")


def manifest_path(dataset_dir) -> Path:
    return Path(dataset_dir) / "manifest.json"


def save_manifest(m: DatasetManifest, dataset_dir) -> None:
    manifest_path(dataset_dir).write_text(json.dumps(m.to_dict(), indent=2, sort_keys=True) + "\n")


def load_manifest(dataset_dir) -> DatasetManifest:
    p = manifest_path(dataset_dir)
    if not p.exists():
        raise ContractError(f"{p}: no manifest (run generate first)")
    return DatasetManifest.from_dict(json.loads(p.read_text()))


def instance_oracle(dataset_dir, rec: InstanceRecord) -> OracleHandle:
    inst = load_instance(Path(dataset_dir) / rec.file)
    return make_min_oracle(inst)


# ---------------------------------------------------------------------------
# commands


def cmd_generate(config: dict, out_dir, seed: int | None = None) -> DatasetManifest:
    g = config["generator"]
    base_seed = g["seed"] if seed is None else seed
    problem = g["problem"]
    if problem == "mcnd":
        params = McndParams(**_tuples(g["params"]))
        make = generate_mcnd
    elif problem == "gap":
        params = GapParams(**_tuples(g["params"]))
        make = generate_gap
    else:
        raise ContractError(f"unknown problem type {problem!r}")
    out = Path(out_dir)
    (out / "instances").mkdir(parents=True, exist_ok=True)
    records = []
    counts = (("train", g["n_train"]), ("test", g["n_test"]))
    idx = 0
    for split, n in counts:
        for i in range(n):
            s = base_seed * 100_000 + idx
            idx += 1
            name = f"{g['name']}-{split}-{i:03d}"
            rel = f"instances/{name}.json"
            save_instance(make(params, s), out / rel)
            records.append(InstanceRecord(name, rel, split, s))
    gen_echo = {"problem": problem, "seed": base_seed, "params": asdict(params),
                "n_train": g["n_train"], "n_test": g["n_test"]}
    m = DatasetManifest(g["name"], problem, records, gen_echo)
    save_manifest(m, out)
    return m


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def reference_bound(oracle: OracleHandle, config: dict) -> float:
    """Best raw LR over a coarse soft-strategy sweep and one long run from the best eta0."""
    s = config["solver"]
    pi0 = np.zeros(oracle.dimension)
    best_val, best_lr, best_eta = math.inf, math.nan, None
    for eta0 in config["eta"]["grid"]:
        tr = run_bundle(oracle, pi0, solver_config(config, "soft", eta0, s["reference_sweep_iters"]))
        row = min(tr.rows, key=lambda r: r.value)
        if row.value < best_val:
            best_val, best_lr, best_eta = row.value, row.raw_lr, eta0
    cfg = solver_config(config, "soft", best_eta, s["reference_iters"])
    cfg.eps = s["reference_eps"]
    row = min(run_bundle(oracle, pi0, cfg).rows, key=lambda r: r.value)
    if row.value < best_val:
        best_lr = row.raw_lr
    if not math.isfinite(best_lr):
        raise ContractError("non-finite reference bound")
    return float(best_lr)


def cmd_reference(dataset_dir, config: dict, threads: int = 1) -> DatasetManifest:
    m = load_manifest(dataset_dir)

    def one(rec):
        return rec.name, reference_bound(instance_oracle(dataset_dir, rec), config)
    sense = _sense(m)
    for name, lr in _map(one, m.instances, threads):
        # merge keeps the better bound, so re-running never weakens a reference
        if name not in m.references or _better(lr, m.references[name], sense):
            m.references[name] = lr
    save_manifest(m, dataset_dir)
    return m


def _require_references(m: DatasetManifest, recs) -> None:
    missing = [r.name for r in recs if r.name not in m.references]
    if missing:
        raise ContractError(f"missing reference bounds for {len(missing)} instances (run reference first)")


def run_method(method: str, oracle: OracleHandle, eta0: float | None, budget: int, config: dict,
               params=None, psi: str = "softmax") -> Trace:
    pi0 = np.zeros(oracle.dimension)
    record_times = config["solver"]["record_times"]
    if method.startswith("bundle-"):
        return run_bundle(oracle, pi0, solver_config(config, method[len("bundle-"):], eta0, budget))
    if method == "descent":
        return run_descent(oracle, pi0, eta0, budget, record_times=record_times)
    if method == "adam":
        return run_adam(oracle, pi0, eta0, budget, record_times=record_times)
    if method == "learned":
        if params is None:
            raise ContractError("the learned method needs a checkpoint")
        return nw.rollout(params, oracle, pi0, budget, psi=psi, record_times=record_times).trace
    raise ContractError(f"unknown method {method!r}; expected one of {METHODS}")


@dataclass
class _Run:
    instance: str
    method: str
    eta0: str
    trace: Trace


def _best_lr_prefix(trace: Trace) -> np.ndarray:
    """Raw LR of the best (lowest objective) row among rows 0..t, for every t."""
    out, best_val, best_lr = [], math.inf, math.nan
    for r in trace.rows:
        if r.value < best_val:
            best_val, best_lr = r.value, r.raw_lr
        out.append(best_lr)
    return np.array(out)


def _eta_label(eta0) -> str:
    return "learned" if eta0 is None else f"{eta0:g}"


def _collect(m: DatasetManifest, runs: list[_Run], budgets, seed: int, sense: str):
    """Result rows and per-iteration trace rows, with references max-merged first."""
    for run in runs:
        best = float(_best_lr_prefix(run.trace)[-1])
        ref = m.references[run.instance]
        if _better(best, ref, sense):
            if abs(best - ref) > 1e-9 * max(1.0, abs(ref)):
                log.warning("%s: bound %.10g beats the reference %.10g; raising the reference",
                            run.instance, best, ref)
            m.references[run.instance] = best
    rows, trace_rows = [], []
    for run in runs:
        ref = m.references[run.instance]
        prefix = _best_lr_prefix(run.trace)
        times = np.array([r.wall_time for r in run.trace.rows])
        # a run that stopped early keeps its final bound and time for later budgets
        need = max(budgets) + 1
        if len(prefix) < need:
            pad = need - len(prefix)
            prefix = np.concatenate([prefix, np.full(pad, prefix[-1])])
            times = np.concatenate([times, np.full(pad, times[-1])])
        times = [float(x) for x in times]
        for b in budgets:
            rows.append([m.name, run.instance, run.method, run.eta0, b,
                         gap_percent(ref, float(prefix[b]), sense), float(prefix[b]), times[b], seed])
        for t in range(len(prefix)):
            trace_rows.append([m.name, run.instance, run.method, run.eta0, seed, t,
                               gap_percent(ref, float(prefix[t]), sense), times[t]])
    return sorted(rows, key=_row_key), sorted(trace_rows, key=_row_key)


def _better(bound: float, ref: float, sense: str) -> bool:
    return bound > ref if sense == "max" else bound < ref


def _row_key(row):
    return tuple(str(x) if isinstance(x, str) else f"{x:024.12f}" for x in row)


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x) if math.isfinite(x) else str(x)
    return str(x)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _sense(m: DatasetManifest) -> str:
    return "max" if m.problem == "mcnd" else "min"


def cmd_gridsearch(dataset_dir, config: dict, method: str, budgets=DEFAULT_BUDGETS,
                   seed: int = 0, threads: int = 1):
    """Mean test-split gap for every eta0 in the grid; the best eta0 per budget is written too."""
    if method == "learned" or method not in METHODS:
        raise ContractError(f"grid search needs a classical method, got {method!r}")
    m = load_manifest(dataset_dir)
    recs = m.split("test")
    _require_references(m, recs)
    grid = list(config["eta"]["grid"])
    horizon = max(budgets)
    cells = [(rec, eta0) for rec in recs for eta0 in grid]

    def one(cell):
        rec, eta0 = cell
        tr = run_method(method, instance_oracle(dataset_dir, rec), eta0, horizon, config)
        return _Run(rec.name, method, _eta_label(eta0), tr)
    runs = _map(one, cells, threads)
    rows, _ = _collect(m, runs, budgets, seed, _sense(m))
    save_manifest(m, dataset_dir)
    best = best_eta_table(rows)
    d = Path(dataset_dir)
    _merge_csv(d / "gridsearch.csv", RESULT_HEADER, rows, lambda r: r["method"] == method)
    _merge_csv(d / "gridsearch_best.csv", ["method", "budget", "eta0", "mean_gap_pct"], best,
               lambda r: r["method"] == method)
    return rows, best


def best_eta_table(rows) -> list[list]:
    """Per (method, budget), the eta0 with the lowest mean gap (ties go to the first grid value)."""
    means: dict[tuple, dict[str, list[float]]] = {}
    order: dict[tuple, list[str]] = {}
    for r in rows:
        key = (r[2], r[4])
        means.setdefault(key, {}).setdefault(r[3], []).append(r[5])
        if r[3] not in order.setdefault(key, []):
            order[key].append(r[3])
    out = []
    for key in sorted(means):
        cand = [(float(np.mean(means[key][e])), e) for e in order[key]]
        gap, eta = min(cand, key=lambda c: c[0])
        out.append([key[0], key[1], eta, gap])
    return out


def _merge_csv(path: Path, header, rows, drop) -> None:
    """Replace the rows selected by ``drop`` in an existing CSV with ``rows``."""
    keep = []
    if path.exists():
        for r in read_csv(path):
            if not drop(r):
                keep.append([r[h] for h in header])
    allrows = [[_fmt(x) for x in r] for r in rows] + keep
    allrows.sort(key=_text_key)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(allrows)


def _text_key(row):
    key = []
    for x in row:
        try:
            key.append((0, float(x), ""))
        except ValueError:
            key.append((1, 0.0, x))
    return tuple(key)


def _grid_choice(dataset_dir, method: str, budgets) -> dict[int, float] | None:
    p = Path(dataset_dir) / "gridsearch_best.csv"
    if not p.exists():
        return None
    table = {int(r["budget"]): float(r["eta0"]) for r in read_csv(p) if r["method"] == method}
    if not all(b in table for b in budgets):
        return None
    return table


def cmd_evaluate(dataset_dir, config: dict, method: str, budgets=DEFAULT_BUDGETS, seed: int = 0,
                 threads: int = 1, checkpoint=None, split: str = "test"):
    """Run ``method`` on the test split and write results and per-iteration traces.

    Classical methods use the grid-searched eta0 per budget when available,
    otherwise ``config['eta']['eta0']``.
    """
    m = load_manifest(dataset_dir)
    recs = m.split(split)
    _require_references(m, recs)
    params, psi = None, "softmax"
    if method == "learned":
        if checkpoint is None:
            raise ContractError("--checkpoint is required for the learned method")
        params, meta = nw.load_checkpoint(checkpoint)
        psi = (meta.get("train") or {}).get("psi", "softmax")
        plan = {None: list(budgets)}
    elif method in METHODS:
        choice = _grid_choice(dataset_dir, method, budgets)
        if choice is None:
            if "eta0" not in config["eta"]:
                raise ContractError(f"no grid-search result for {method}; run gridsearch or set eta.eta0")
            choice = {b: float(config["eta"]["eta0"]) for b in budgets}
        plan = {}
        for b in budgets:
            plan.setdefault(choice[b], []).append(b)
    else:
        raise ContractError(f"unknown method {method!r}; expected one of {METHODS}")

    cells = [(rec, eta0) for rec in recs for eta0 in plan]

    def one(cell):
        rec, eta0 = cell
        tr = run_method(method, instance_oracle(dataset_dir, rec), eta0, max(budgets), config, params, psi)
        return _Run(rec.name, method, _eta_label(eta0), tr), plan[eta0]
    done = _map(one, cells, threads)
    sense = _sense(m)
    rows, trace_rows = [], []
    # references are merged over all runs before any gap is computed
    _collect(m, [r for r, _ in done], [0], seed, sense)
    for run, bs in done:
        r, t = _collect(m, [run], bs, seed, sense)
        rows += r
        trace_rows += t
    rows.sort(key=_row_key)
    trace_rows.sort(key=_row_key)
    save_manifest(m, dataset_dir)
    d = Path(dataset_dir)
    write_csv(d / f"results_{method}.csv", RESULT_HEADER, rows)
    write_csv(d / f"traces_{method}.csv", TRACE_HEADER, trace_rows)
    return rows


def cmd_train(dataset_dir, config: dict, checkpoint, seed: int | None = None):
    """Train on the train split only; writes the checkpoint and a per-epoch CSV log."""
    m = load_manifest(dataset_dir)
    recs = m.split("train")
    if not recs:
        raise ContractError("train split is empty")
    tc = train_config(config, seed)
    oracles = [instance_oracle(dataset_dir, rec) for rec in recs]
    net_cfg = nw.NetConfig(**config["train"].get("net", {}))
    params = nw.init_params(net_cfg, tc.seed)
    params, history = nw.train(params, oracles, tc, net_cfg,
                               record_times=config["solver"]["record_times"])
    nw.save_checkpoint(checkpoint, params, tc, {"dataset": m.name, "problem": m.problem})
    log_path = Path(checkpoint).with_name(Path(checkpoint).stem + "_log.csv")
    write_csv(log_path, ["epoch", "mean_loss", "wall_time_s"],
              [[h.epoch, h.mean_loss, h.wall_time] for h in history])
    return params, history


def cmd_report(dataset_dir, out_dir=None) -> Path:
    """Collect every results_*.csv into one CSV and write plot-data series per (dataset, method, eta0)."""
    d = Path(dataset_dir)
    out = Path(out_dir) if out_dir is not None else d / "report"
    out.mkdir(parents=True, exist_ok=True)
    result_files = sorted(d.glob("results_*.csv"))
    if not result_files:
        raise ContractError(f"{d}: no results_*.csv to report (run evaluate first)")
    rows = []
    for p in result_files:
        rows += [[r[h] for h in RESULT_HEADER] for r in read_csv(p)]
    if not rows:
        raise ContractError("no result rows to report")
    rows.sort()
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_HEADER)
        w.writerows(rows)

    summary = {}
    for r in rows:
        summary.setdefault((r[0], r[2], r[3], int(r[4])), []).append(float(r[5]))
    write_csv(out / "summary.csv", ["dataset", "method", "eta0", "budget", "mean_gap_pct", "instances"],
              [[k[0], k[1], k[2], k[3], float(np.mean(v)), len(v)] for k, v in sorted(summary.items())])

    for p in sorted(d.glob("traces_*.csv")):
        series: dict[tuple, dict[int, list[tuple[float, float]]]] = {}
        for r in read_csv(p):
            key = (r["dataset"], r["method"], r["eta0"])
            series.setdefault(key, {}).setdefault(int(r["iteration"]), []).append(
                (float(r["gap_pct"]), float(r["wall_time_s"])))
        for (ds, meth, eta), by_t in sorted(series.items()):
            tag = f"{ds}_{meth}_eta{eta}"
            its = sorted(by_t)
            gaps = [float(np.mean([g for g, _ in by_t[t]])) for t in its]
            times = [float(np.mean([s for _, s in by_t[t]])) for t in its]
            write_csv(out / f"series_iter_{tag}.csv", ["iteration", "mean_gap_pct"], list(zip(its, gaps)))
            write_csv(out / f"series_time_{tag}.csv", ["time_s", "mean_gap_pct"], list(zip(times, gaps)))
    return out
