"""Seeded experiment execution, accuracy/latency metrics and result files."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ExperimentConfig
from .data import Dataset, Shard, load_csv, make_blobs, partition_dirichlet, PartitionSpec, shard_imbalance
from .errors import DivergenceError, UsageError
from .latency import ClientProfile, ServerProfile, read_profiles, round_latency, sample_profiles
from .protocols import Federation, GlobalState, RoundRecord, make_cohort, run_round, select_cohort
from .split import SplitModel
from .tensor import evaluate, init_params, mlp

log = logging.getLogger(__name__)

CSV_COLUMNS = ("round", "accuracy", "cum_time_s", "cohort", "js_mean")
UNREACHED = "—"


def derive_seed(base: int, stream: int) -> int:
    return int(np.random.SeedSequence([base, stream]).generate_state(1)[0])


@dataclass
class Setup:
    """Everything built from a config before the first round."""

    model: SplitModel
    train: Dataset
    test: Dataset
    shards: list[Shard]
    profiles: list[ClientProfile]
    server: ServerProfile
    imbalance: dict[int, float]


def build(cfg: ExperimentConfig) -> Setup:
    ds = cfg.dataset
    if ds.kind == "csv":
        train = load_csv(ds.train)
        test = load_csv(ds.test, train.class_count)
    else:
        train = make_blobs(ds.classes, ds.dims, ds.per_class, ds.spread, derive_seed(cfg.seeds.data, 0), ds.scale)
        test = make_blobs(ds.classes, ds.dims, ds.test_per_class, ds.spread, derive_seed(cfg.seeds.data, 1), ds.scale)
    layers = mlp(train.dims, cfg.model.hidden, train.class_count, cfg.model.head)
    model = SplitModel(layers, cfg.model.cut)
    shards = partition_dirichlet(
        train, PartitionSpec(cfg.partition.clients, cfg.partition.gamma, derive_seed(cfg.seeds.data, 2))
    )
    if cfg.latency.profiles_csv:
        profiles = read_profiles(cfg.latency.profiles_csv)
        if len(profiles) < cfg.partition.clients:
            raise UsageError(f"{cfg.latency.profiles_csv} lists {len(profiles)} clients, need {cfg.partition.clients}")
        profiles = profiles[: cfg.partition.clients]
    else:
        profiles = sample_profiles(cfg.partition.clients, cfg.seeds.profiles, cfg.latency.p_d_range, cfg.latency.b_range)
    server = ServerProfile.from_clients(profiles, cfg.latency.kappa)
    imbalance = {s.owner: shard_imbalance(train, s) for s in shards}
    return Setup(model, train, test, shards, profiles, server, imbalance)


@dataclass
class RunResult:
    config: ExperimentConfig
    initial_accuracy: float
    records: list[RoundRecord]
    summary: dict


def rounds_to_target(accuracies: Sequence[float], target: float | None, initial: float | None = None) -> int | None:
    """First round (1-based) whose accuracy reaches ``target``; 0 if the initial model already does."""
    if target is None:
        return None
    if initial is not None and initial >= target:
        return 0
    for n, acc in enumerate(accuracies, start=1):
        if acc >= target:
            return n
    return None


def time_to_round(records: Sequence[RoundRecord], n: int | None) -> float | None:
    if n is None:
        return None
    return records[n - 1].cum_time_s if n > 0 else 0.0


def train_rounds(cfg: ExperimentConfig, setup: Setup | None = None, on_round=None, **fed_kw) -> tuple[float, list[RoundRecord], GlobalState]:
    """Run N rounds; returns (initial accuracy, per-round records, final state)."""
    setup = setup or build(cfg)
    model = setup.model
    fed = Federation(model, setup.train, setup.shards, cfg.rounds, cfg.optim, cfg.seeds.batching, cfg.workers, **fed_kw)
    state = GlobalState.initial(init_params(model, cfg.seeds.init))
    initial = evaluate(model, state.params, setup.test.samples, setup.test.labels)
    all_ids = [s.owner for s in setup.shards]
    records, elapsed = [], 0.0
    for n in range(1, cfg.rounds.N + 1):
        selected = select_cohort(all_ids, cfg.rounds.selection_rate, cfg.rounds.selection_mode, cfg.seeds.selection, n)
        cohort = make_cohort(selected, setup.shards, cfg.rounds.E, cfg.rounds.B)
        state, rec = run_round(state, cohort, fed)
        if not np.all(np.isfinite(state.params.values)):
            raise DivergenceError(n, "non-finite model parameters")
        lat = round_latency(
            cfg.rounds.method, cohort.steps, dict(enumerate(setup.profiles)), setup.server, model, cfg.rounds.B
        )
        elapsed += lat.seconds
        rec.accuracy = evaluate(model, state.params, setup.test.samples, setup.test.labels)
        rec.round_time_s, rec.t_d, rec.t_s, rec.t_comm = lat.seconds, lat.t_d, lat.t_s, lat.t_comm
        rec.cum_time_s = elapsed
        rec.js_mean = float(np.mean([setup.imbalance[c] for c in cohort.client_ids])) if len(cohort) else math.nan
        records.append(rec)
        if on_round is not None:
            on_round(rec)
        log.info("round %d %s acc=%.4f t=%.1fs", n, cfg.rounds.method, rec.accuracy, elapsed)
    return initial, records, state


def baseline_config(cfg: ExperimentConfig) -> ExperimentConfig:
    t = cfg.target
    return cfg.with_rounds(method=t.baseline_method, beta_g=t.baseline_beta_g).replace(name=f"{cfg.name}-baseline")


def _summary_of(cfg: ExperimentConfig, initial: float, records: Sequence[RoundRecord], target: float | None) -> dict:
    accs = [r.accuracy for r in records]
    R = rounds_to_target(accs, target, initial)
    return {
        "name": cfg.name,
        "method": cfg.rounds.method,
        "fingerprint": cfg.fingerprint(),
        "rounds": len(records),
        "initial_accuracy": initial,
        "best_accuracy": max(accs, default=initial),
        "final_accuracy": accs[-1] if accs else initial,
        "target_accuracy": target,
        "rounds_to_target": R,
        "time_to_target_s": time_to_round(records, R),
        "total_time_s": records[-1].cum_time_s if records else 0.0,
    }


def run_experiment(cfg: ExperimentConfig, baseline: RunResult | None = None, **fed_kw) -> RunResult:
    """Train, then summarise against the configured accuracy target.

    In relative mode the target is ``fraction`` of the best accuracy of a
    baseline run (same config, baseline method); that run is executed here
    unless passed in.
    """
    setup = build(cfg)
    initial, records, _ = train_rounds(cfg, setup, **fed_kw)
    if cfg.target.mode == "absolute":
        target = cfg.target.value
        if baseline is not None:
            baseline = dataclasses.replace(
                baseline,
                summary=_summary_of(baseline.config, baseline.initial_accuracy, baseline.records, target),
            )
    else:
        if baseline is None:
            bcfg = baseline_config(cfg)
            if bcfg.rounds == cfg.rounds and bcfg.optim == cfg.optim:
                b_initial, b_records = initial, records
            else:
                b_initial, b_records, _ = train_rounds(bcfg, setup)
            b_best = max((r.accuracy for r in b_records), default=b_initial)
            target = cfg.target.fraction * b_best
            baseline = RunResult(bcfg, b_initial, b_records, _summary_of(bcfg, b_initial, b_records, target))
        else:
            target = cfg.target.fraction * baseline.summary["best_accuracy"]
            baseline = dataclasses.replace(
                baseline,
                summary=_summary_of(baseline.config, baseline.initial_accuracy, baseline.records, target),
            )

    summary = _summary_of(cfg, initial, records, target)
    if baseline is not None:
        b = baseline.summary
        summary["baseline"] = {k: b[k] for k in ("name", "method", "best_accuracy", "final_accuracy", "rounds_to_target", "time_to_target_s")}
        summary["speedup_rounds"] = speedup(b["rounds_to_target"], summary["rounds_to_target"])
        summary["speedup_time"] = speedup(b["time_to_target_s"], summary["time_to_target_s"])
    else:
        summary["baseline"] = None
    return RunResult(cfg, initial, records, summary)


def speedup(base, method) -> float | None:
    if base is None or method is None:
        return None
    if method == 0:
        return None if base else 1.0
    return base / method


def format_speedup(x: float | None) -> str:
    return UNREACHED if x is None else f"{x:.2f}×"


def compare(summaries: Sequence[dict], baseline: int = 0) -> list[dict]:
    """R and T speedups of every run relative to ``summaries[baseline]``."""
    if not summaries:
        raise UsageError("nothing to compare")
    prints = {s["fingerprint"] for s in summaries}
    if len(prints) != 1:
        raise UsageError("runs were produced from different dataset/model/seed settings")
    targets = {s["target_accuracy"] for s in summaries}
    if len(targets) != 1:
        raise UsageError("runs were scored against different accuracy targets")
    base = summaries[baseline]
    rows = []
    for s in summaries:
        rows.append({
            "name": s["name"],
            "method": s["method"],
            "best_accuracy": s["best_accuracy"],
            "R": s["rounds_to_target"],
            "T_s": s["time_to_target_s"],
            "R_speedup": speedup(base["rounds_to_target"], s["rounds_to_target"]),
            "T_speedup": speedup(base["time_to_target_s"], s["time_to_target_s"]),
        })
    return rows


def format_table(rows: Sequence[dict]) -> str:
    header = f"{'run':<24}{'method':<8}{'acc':>8}{'R':>6}{'R up':>9}{'T (s)':>12}{'T up':>9}"
    lines = [header, "-" * len(header)]
    for r in rows:
        R = UNREACHED if r["R"] is None else str(r["R"])
        T = UNREACHED if r["T_s"] is None else f"{r['T_s']:.1f}"
        lines.append(
            f"{r['name'][:23]:<24}{r['method']:<8}{100 * r['best_accuracy']:>7.2f}%{R:>6}"
            f"{format_speedup(r['R_speedup']):>9}{T:>12}{format_speedup(r['T_speedup']):>9}"
        )
    return "\n".join(lines)


# ---------------------------------------------------------------- output


def _num(x):
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def records_csv(records: Sequence[RoundRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow([r.round, _num(r.accuracy), _num(r.cum_time_s), len(r.cohort), _num(r.js_mean)])
    return buf.getvalue()


def record_dict(r: RoundRecord) -> dict:
    d = dataclasses.asdict(r)
    d["cohort"] = list(r.cohort)
    d["skipped"] = list(r.skipped)
    d["steps"] = {str(k): v for k, v in sorted(r.steps.items())}
    for k, v in d.items():
        if isinstance(v, float) and math.isnan(v):
            d[k] = None
    return d


def records_jsonl(records: Sequence[RoundRecord]) -> str:
    return "".join(json.dumps(record_dict(r), sort_keys=True) + "\n" for r in records)


def emit(result: RunResult, out_dir, fmt: str = "csv") -> list[Path]:
    """Write per-round records (csv or jsonl) and ``summary.json``; idempotent."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if fmt == "csv":
            rounds_path = out / "rounds.csv"
            rounds_path.write_text(records_csv(result.records))
        elif fmt == "jsonl":
            rounds_path = out / "rounds.jsonl"
            rounds_path.write_text(records_jsonl(result.records))
        else:
            raise UsageError(f"unknown format {fmt!r}")
        summary_path = out / "summary.json"
        summary_path.write_text(json.dumps(result.summary, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise UsageError(f"cannot write results to {out}: {exc.strerror}") from exc
    return [rounds_path, summary_path]


def partition_report(cfg: ExperimentConfig, out_dir) -> tuple[Path, Path]:
    """Per-client class histograms + imbalance, and the device profiles."""
    from .data import write_histograms
    from .latency import write_profiles

    setup = build(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hist = out / "partition.csv"
    prof = out / "profiles.csv"
    write_histograms(setup.train, setup.shards, hist)
    write_profiles(setup.profiles, prof)
    return hist, prof
