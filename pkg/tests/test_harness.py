import dataclasses
import json
import logging

import numpy as np
import pytest
import yaml

from smofisim import cli
from smofisim.config import ExperimentConfig, dump, from_dict, load, load_preset, preset_names
from smofisim.errors import ConfigurationError, UsageError
from smofisim.harness import (
    CSV_COLUMNS, UNREACHED, compare, emit, format_speedup, format_table, records_csv, rounds_to_target,
    run_experiment, speedup, train_rounds,
)

logging.getLogger("smofisim").setLevel(logging.ERROR)

TINY = {
    "name": "tiny",
    "model": {"hidden": [8], "cut": 1},
    "dataset": {"kind": "blobs", "classes": 4, "dims": 4, "per_class": 30, "test_per_class": 10, "spread": 0.5},
    "partition": {"clients": 4, "gamma": 1.0},
    "rounds": {"N": 3, "E": 1, "B": 4, "selection_rate": 0.5},
}


def tiny(**over) -> ExperimentConfig:
    raw = json.loads(json.dumps(TINY))
    for k, v in over.items():
        raw.setdefault(k, {}).update(v) if isinstance(v, dict) else raw.__setitem__(k, v)
    return from_dict(raw)


def write_cfg(tmp_path, **over):
    raw = json.loads(json.dumps(TINY))
    for k, v in over.items():
        raw.setdefault(k, {}).update(v)
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump(raw))
    return p


# ---------------------------------------------------------------- metrics


def test_rounds_to_target():
    assert rounds_to_target([0.1, 0.5, 0.9], 0.5) == 2
    assert rounds_to_target([0.1, 0.2], 0.5) is None
    assert rounds_to_target([0.1], 0.05, initial=0.06) == 0
    assert rounds_to_target([0.1], None) is None


def test_speedup_formatting():
    assert format_speedup(speedup(258, 56)) == "4.61×"
    assert format_speedup(speedup(None, 56)) == UNREACHED
    assert format_speedup(speedup(56, None)) == UNREACHED
    assert speedup(0, 0) == 1.0


def test_compare_rejects_mismatch():
    a = {"name": "a", "method": "fedavg", "fingerprint": "x", "target_accuracy": 0.5, "best_accuracy": 0.6,
         "rounds_to_target": 258, "time_to_target_s": 100.0}
    b = dict(a, name="b", method="smofi", rounds_to_target=56, time_to_target_s=None)
    rows = compare([a, b])
    assert rows[1]["R_speedup"] == 258 / 56 and rows[1]["T_speedup"] is None
    table = format_table(rows)
    assert "4.61×" in table and UNREACHED in table
    with pytest.raises(UsageError):
        compare([a, dict(b, fingerprint="y")])
    with pytest.raises(UsageError):
        compare([a, dict(b, target_accuracy=0.4)])


def test_fingerprint_ignores_method_knobs_only():
    c = tiny()
    assert c.fingerprint() == c.with_rounds(method="smofi", beta_g=0.3, alpha=-1.0).fingerprint()
    assert c.fingerprint() != c.with_seeds(data=1).fingerprint()
    assert c.fingerprint() != c.with_rounds(B=8).fingerprint()


# ---------------------------------------------------------------- runs


def test_zero_rounds():
    res = run_experiment(tiny(rounds={"N": 0}))
    assert res.records == []
    assert res.summary["best_accuracy"] == res.initial_accuracy
    assert records_csv(res.records) == ",".join(CSV_COLUMNS) + "\n"


@pytest.mark.parametrize("method", ["smofi", "fedavg", "sflv1", "sflv2"])
def test_every_method_runs(method):
    res = run_experiment(tiny(rounds={"method": method}))
    assert len(res.records) == 3
    cum = [r.cum_time_s for r in res.records]
    assert all(a < b for a, b in zip(cum, cum[1:]))
    assert all(0 <= r.accuracy <= 1 for r in res.records)


def test_relative_target_uses_fedavg_baseline():
    res = run_experiment(tiny())
    b = res.summary["baseline"]
    assert b["method"] == "fedavg"
    assert res.summary["target_accuracy"] == pytest.approx(0.9 * b["best_accuracy"])


def test_absolute_target():
    res = run_experiment(tiny(target={"mode": "absolute", "value": 0.0}))
    assert res.summary["rounds_to_target"] == 0 and res.summary["baseline"] is None


def test_sequential_latency_dominates_parallel():
    par = run_experiment(tiny(rounds={"method": "sflv1"}))
    seq = run_experiment(tiny(rounds={"method": "sflv2"}))
    for a, b in zip(par.records, seq.records):
        assert a.round_time_s <= b.round_time_s


def test_emit_is_idempotent_and_deterministic(tmp_path):
    cfg = tiny(workers=3)
    first = emit(run_experiment(cfg), tmp_path / "a")
    again = emit(run_experiment(cfg), tmp_path / "a")
    serial = emit(run_experiment(cfg.replace(workers=1)), tmp_path / "b")
    for x, y, z in zip(first, again, serial):
        assert x.read_bytes() == y.read_bytes() == z.read_bytes()
    header = first[0].read_text().splitlines()[0]
    assert header == "round,accuracy,cum_time_s,cohort,js_mean"
    jl = emit(run_experiment(cfg), tmp_path / "c", "jsonl")
    rows = [json.loads(l) for l in jl[0].read_text().splitlines()]
    assert [r["round"] for r in rows] == [1, 2, 3]


def test_emit_to_unwritable_location(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(UsageError):
        emit(run_experiment(tiny(rounds={"N": 0})), blocker / "sub")


# ---------------------------------------------------------------- config


def test_config_errors_name_the_field(tmp_path):
    with pytest.raises(ConfigurationError, match="rounds.beta_g"):
        tiny(rounds={"beta_g": 1.5})
    with pytest.raises(ConfigurationError, match="rounds.bogus"):
        tiny(rounds={"bogus": 1})
    with pytest.raises(ConfigurationError, match="model.cut"):
        build_cut = tiny(model={"cut": 9})
        run_experiment(build_cut)
    with pytest.raises(ConfigurationError):
        load(tmp_path / "missing.yaml")


def test_config_round_trip_and_presets():
    c = tiny()
    assert from_dict(yaml.safe_load(dump(c))) == c
    names = preset_names()
    assert "desk" in names
    for n in names:
        load_preset(n)


def test_relative_csv_paths(tmp_path):
    from smofisim.data import make_blobs, save_csv

    (tmp_path / "d").mkdir()
    save_csv(make_blobs(3, 2, 20, 0.5, 0), tmp_path / "d" / "train.csv")
    save_csv(make_blobs(3, 2, 5, 0.5, 1), tmp_path / "d" / "test.csv")
    p = write_cfg(tmp_path, dataset={"kind": "csv", "train": "d/train.csv", "test": "d/test.csv"}, rounds={"N": 1})
    cfg = load(p)
    assert cfg.dataset.train == str((tmp_path / "d" / "train.csv").resolve())
    initial, records, _ = train_rounds(cfg)
    assert len(records) == 1


# ---------------------------------------------------------------- CLI


def test_cli_run_and_compare(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert cli.main(["run", "--config", str(cfg), "--method", "fedavg", "--out", str(tmp_path / "f")]) == 0
    assert cli.main(["run", "--config", str(cfg), "--method", "smofi", "--out", str(tmp_path / "s")]) == 0
    capsys.readouterr()
    runs = [str(tmp_path / d / "summary.json") for d in ("f", "s")]
    assert cli.main(["compare", "--runs", *runs, "--json"]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert [r["method"] for r in rows] == ["fedavg", "smofi"]
    assert cli.main(["compare", "--runs", *runs]) == 0


def test_cli_seed_override_changes_output(tmp_path):
    cfg = write_cfg(tmp_path)
    cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")])
    cli.main(["run", "--config", str(cfg), "--seed-init", "7", "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "rounds.csv").read_bytes() != (tmp_path / "b" / "rounds.csv").read_bytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_exit_codes(tmp_path, capsys):
    bad = write_cfg(tmp_path, rounds={"alpha": 0.5})
    assert cli.main(["run", "--config", str(bad)]) == 2
    assert "rounds.alpha" in capsys.readouterr().err
    assert cli.main(["run", "--preset", "nope"]) == 2
    assert cli.main(["compare", "--runs", str(tmp_path / "missing.json")]) == 2
    # squared loss on a linear model with a huge step grows geometrically
    hot = write_cfg(tmp_path, model={"hidden": [], "cut": 0, "head": "mse-head"}, optim={"eta": 50.0}, rounds={"N": 20})
    assert cli.main(["run", "--config", str(hot), "--out", str(tmp_path / "o")]) == 3


def test_cli_partition_report(tmp_path):
    cfg = write_cfg(tmp_path)
    assert cli.main(["partition-report", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 0
    lines = (tmp_path / "r" / "partition.csv").read_text().splitlines()
    assert lines[0] == "client_id,c0,c1,c2,c3,size,js" and len(lines) == 5
    assert sum(int(l.split(",")[5]) for l in lines[1:]) == 120
    assert (tmp_path / "r" / "profiles.csv").read_text().startswith("client_id,p_d_s_per_frame,b_kbps")


def test_cli_presets(capsys):
    assert cli.main(["presets"]) == 0
    assert "desk" in capsys.readouterr().out.split()
