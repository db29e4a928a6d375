"""Command-line workflows: simulate, train, fit, error reporting."""

import csv
import json
import math
import os

import pytest

from moesim import cli


def base_config(**overrides):
    cfg = {
        "model": {
            "num_layers": 12,
            "experts_per_layer": 8,
            "top_k": 2,
            "expert_size_bytes": 10_000_000,
            "embed_dim": 8,
            "vocab_size": 256,
        },
        "hardware": {
            "link_bandwidth_bytes_per_sec": 2_000_000_000,
            "layer_compute_time_sec": 0.005,
            "device_memory_bytes": 120_000_000,
        },
        "workload": {"num_traces": 2, "batch_size": 4, "persistence": 0.8},
        "policies": [
            {"name": "baseline", "strategy": "static"},
            {
                "name": "lookahead",
                "strategy": "fixed_interval",
                "interval": 2,
                "predictor": "pregate",
            },
        ],
        "seed": 21,
    }
    cfg.update(overrides)
    return cfg


def write_config(path, **overrides):
    path.write_text(json.dumps(base_config(**overrides)))
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_simulate_writes_metrics_and_summary(tmp_path, capsys):
    config = write_config(tmp_path / "exp.json")
    out = tmp_path / "out"
    rc = cli.main(["simulate", "--config", config, "--out-dir", str(out)])
    assert rc == 0

    rows = read_csv(out / "metrics.csv")
    assert rows[0][:2] == ["workload", "policy"]
    # 2 traces x 2 policies
    assert len(rows) == 1 + 4
    assert {r[1] for r in rows[1:]} == {"baseline", "lookahead"}

    summary = (out / "summary.txt").read_text()
    assert "policy baseline:" in summary
    assert "reduction" in summary
    assert capsys.readouterr().out.strip() == summary.strip()

    # predictions were logged for the training path
    log = (out / "activations.log").read_text().strip().split("\n")
    assert all("token_ids=" in line for line in log)


def test_simulate_is_idempotent(tmp_path):
    config = write_config(tmp_path / "exp.json")
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["simulate", "--config", config, "--out-dir", str(out_a)]) == 0
    assert cli.main(["simulate", "--config", config, "--out-dir", str(out_b)]) == 0
    for name in ("metrics.csv", "summary.txt", "activations.log"):
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes()


def test_emit_events_writes_timeline(tmp_path):
    config = write_config(tmp_path / "exp.json")
    out = tmp_path / "out"
    rc = cli.main([
        "simulate", "--config", config, "--out-dir", str(out), "--emit-events",
    ])
    assert rc == 0
    rows = read_csv(out / "events.csv")
    assert rows[0] == ["workload", "policy", "time_ns", "kind", "seq", "detail"]
    assert len(rows) > 1
    assert {"layer_start", "layer_end"} <= {r[3] for r in rows[1:]}


def test_compare_writes_paired_csv(tmp_path):
    config = write_config(tmp_path / "exp.json")
    out = tmp_path / "out"
    rc = cli.main(["compare", "--config", config, "--out-dir", str(out)])
    assert rc == 0
    rows = read_csv(out / "comparison.csv")
    assert rows[0][-1] == "reduction_pct"
    assert len(rows) == 1 + 4


def test_unknown_preset_is_a_config_error(tmp_path, capsys):
    config = write_config(
        tmp_path / "exp.json",
        hardware={
            "preset": "tpu_v9",
            "layer_compute_time_sec": 0.005,
            "device_memory_bytes": 120_000_000,
        },
    )
    rc = cli.main(["simulate", "--config", config, "--out-dir", str(tmp_path)])
    assert rc == 2
    err = capsys.readouterr().err
    assert "tpu_v9" in err


def test_unknown_config_keys_are_rejected(tmp_path, capsys):
    config = write_config(tmp_path / "exp.json", epochs=3)
    rc = cli.main(["simulate", "--config", config, "--out-dir", str(tmp_path)])
    assert rc == 2
    assert "epochs" in capsys.readouterr().err


def test_unknown_policy_key_is_rejected(tmp_path, capsys):
    cfg = base_config()
    cfg["policies"][0]["eagerness"] = 2
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(cfg))
    rc = cli.main(["simulate", "--config", str(path), "--out-dir", str(tmp_path)])
    assert rc == 2
    assert "eagerness" in capsys.readouterr().err


def test_usage_errors_exit_one(capsys):
    assert cli.main([]) == 1
    capsys.readouterr()
    assert cli.main(["simulate"]) == 1
    assert "usage error" in capsys.readouterr().err
    assert cli.main(["simulate", "--config", "x.json", "--preset", "abacus"]) == 1


def test_missing_config_file_is_a_runtime_error(tmp_path, capsys):
    rc = cli.main([
        "simulate", "--config", str(tmp_path / "absent.json"),
        "--out-dir", str(tmp_path),
    ])
    assert rc == 3


def test_seed_override_changes_workload(tmp_path):
    config = write_config(tmp_path / "exp.json")
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    cli.main(["simulate", "--config", config, "--out-dir", str(out_a)])
    cli.main([
        "simulate", "--config", config, "--out-dir", str(out_b), "--seed", "99",
    ])
    assert (out_a / "metrics.csv").read_text() != (out_b / "metrics.csv").read_text()


# -- training ----------------------------------------------------------------

def train_inputs(tmp_path, num_traces=12):
    cfg = base_config(workload={
        "num_traces": num_traces, "batch_size": 4, "persistence": 0.8,
    })
    cfg["policies"] = [cfg["policies"][1]]
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(cfg))
    sim_out = tmp_path / "sim"
    rc = cli.main(["simulate", "--config", str(path), "--out-dir", str(sim_out)])
    assert rc == 0
    return str(path), str(sim_out / "activations.log")


def test_train_writes_model_and_accuracy(tmp_path, capsys):
    config, log = train_inputs(tmp_path, num_traces=4)
    out = tmp_path / "train"
    rc = cli.main([
        "train", "--config", config, "--log", log, "--out-dir", str(out),
        "--trees", "10", "--max-depth", "8",
    ])
    assert rc == 0
    stdout = capsys.readouterr().out
    assert "trained 10 trees on" in stdout

    model = json.loads((out / "model.json").read_text())
    assert model["format"] == "moesim-forest"
    assert model["hyper"]["num_trees"] == 10
    assert model["embedding_seed"] is not None

    rows = read_csv(out / "accuracy.csv")
    assert rows[0] == ["step_size", "predictor_acc", "pregate_acc"]
    assert len(rows) >= 2


def test_retraining_is_byte_identical(tmp_path):
    config, log = train_inputs(tmp_path, num_traces=4)
    out_a, out_b = tmp_path / "ta", tmp_path / "tb"
    args = ["train", "--config", config, "--log", log, "--trees", "6"]
    assert cli.main(args + ["--out-dir", str(out_a)]) == 0
    assert cli.main(args + ["--out-dir", str(out_b)]) == 0
    assert (out_a / "model.json").read_bytes() == (out_b / "model.json").read_bytes()
    assert (out_a / "accuracy.csv").read_bytes() == (out_b / "accuracy.csv").read_bytes()


def test_malformed_log_reports_line(tmp_path, capsys):
    config = write_config(tmp_path / "exp.json")
    log = tmp_path / "bad.log"
    log.write_text(
        "token_ids=1,2;layer_idx=0;predicted_experts=1;actual_experts=1;step_size=1\n"
        "token_ids=1,2;layer_idx=1;predicted_experts=zap;actual_experts=1;step_size=1\n"
    )
    rc = cli.main([
        "train", "--config", config, "--log", str(log),
        "--out-dir", str(tmp_path),
    ])
    assert rc == 2
    err = capsys.readouterr().err
    assert "line 2" in err
    assert "predicted_experts" in err


def test_trained_forest_cuts_the_logged_miss_rate(tmp_path):
    # close the loop: log predictions, train on them, rerun with the model
    config, log = train_inputs(tmp_path)
    out = tmp_path / "train"
    rc = cli.main([
        "train", "--config", config, "--log", log, "--out-dir", str(out),
        "--trees", "50", "--max-depth", "16", "--min-samples-leaf", "8",
    ])
    assert rc == 0

    cfg = base_config(workload={
        "num_traces": 12, "batch_size": 4, "persistence": 0.8,
    })
    cfg["policies"] = [
        {
            "name": "pregate",
            "strategy": "fixed_interval",
            "interval": 2,
            "predictor": "pregate",
        },
        {
            "name": "forest",
            "strategy": "fixed_interval",
            "interval": 2,
            "predictor": "forest",
        },
    ]
    cfg["forest_model"] = str(out / "model.json")
    rerun = tmp_path / "rerun.json"
    rerun.write_text(json.dumps(cfg))
    sim_out = tmp_path / "rerun_out"
    assert cli.main([
        "simulate", "--config", str(rerun), "--out-dir", str(sim_out),
    ]) == 0

    rows = read_csv(sim_out / "metrics.csv")
    header = rows[0]
    miss_col = header.index("miss_rate")
    by_policy = {"pregate": [], "forest": []}
    for row in rows[1:]:
        by_policy[row[header.index("policy")]].append(float(row[miss_col]))
    mean_pregate = sum(by_policy["pregate"]) / len(by_policy["pregate"])
    mean_forest = sum(by_policy["forest"]) / len(by_policy["forest"])
    assert mean_forest < mean_pregate


# -- curve fitting -----------------------------------------------------------

def test_fit_recovers_planted_curve(tmp_path, capsys):
    rows = ["step_size,predictor_acc"]
    for t in range(1, 9):
        rows.append(f"{t},{30.0 * math.exp(-0.5 * t) + 60.0!r}")
    path = tmp_path / "acc.csv"
    path.write_text("\n".join(rows) + "\n")
    rc = cli.main(["fit", "--csv", str(path)])
    assert rc == 0
    out = capsys.readouterr().out
    fields = dict(
        part.split("=") for part in out.split(":")[1].split() if "=" in part
    )
    assert abs(float(fields["a"]) - 30.0) < 1e-3
    assert abs(float(fields["b"]) - 0.5) < 1e-3
    assert abs(float(fields["c"]) - 60.0) < 1e-3


def test_fit_reports_asymptotic_gap(tmp_path, capsys):
    rows = ["step_size,predictor_acc,pregate_acc"]
    for t in range(1, 7):
        rows.append(f"{t},60.0,30.0")
    path = tmp_path / "acc.csv"
    path.write_text("\n".join(rows) + "\n")
    report = tmp_path / "fits.txt"
    rc = cli.main(["fit", "--csv", str(path), "--out", str(report)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "delta_inf(predictor_acc - pregate_acc) = 30.0000" in out
    assert report.read_text() == out


def test_fit_rejects_headerless_csv(tmp_path, capsys):
    path = tmp_path / "acc.csv"
    path.write_text("1,60.0\n2,55.0\n3,52.0\n")
    rc = cli.main(["fit", "--csv", str(path)])
    assert rc == 2
    assert "step_size" in capsys.readouterr().err
