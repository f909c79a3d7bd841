import os

import pandas as pd
import pytest
import yaml
from click.testing import CliRunner

from app import cli
from project_src.operator_dynamics import simulation
from project_src.operator_dynamics.data_utils import EXIT_CONFIG, EXIT_OK, config_data, load_config
from project_src.operator_dynamics.src.errors import ConfigError

CHAIN = ["--preset", "kicked-ising-chain", "--chain-length", "6", "--theta-x", "0.3", "--quiet"]
TIMING_COLUMNS = ["wall_ms_per_gate", "compute_ms_per_gate", "exchange_ms_per_gate"]


def invoke(*args):
    return CliRunner().invoke(cli, list(args), catch_exceptions=False)


def test_chain_run_writes_ledger(tmp_path):
    out = str(tmp_path / "run")
    result = invoke("run", *CHAIN, "--layers", "3", "--workers", "2", "--out", out)
    assert result.exit_code == EXIT_OK, result.output
    ledger = pd.read_csv(os.path.join(out, "ledger.csv"))
    assert list(ledger.columns[:5]) == ["t", "observable", "term_count", "global_max", "removed"]
    assert list(ledger["t"]) == [1, 2, 3]
    with open(os.path.join(out, "run.yaml")) as file:
        manifest = yaml.safe_load(file)
    assert manifest["status"] == "ok"
    assert manifest["config"]["observable"] == "Z0"
    assert manifest["partition_hash"] == "splitmix64-chain/v1"


def test_missing_geometry_is_a_config_error(tmp_path):
    result = invoke("run", *CHAIN, "--geometry", str(tmp_path / "missing.txt"), "--out", str(tmp_path))
    assert result.exit_code == EXIT_CONFIG


def test_unknown_config_key(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text("layers = 2\nwokers = 4\n")
    result = invoke("run", "--config", str(path), "--out", str(tmp_path))
    assert result.exit_code == EXIT_CONFIG


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text("preset = kicked-ising-chain\nchain-length = 4\ntheta_x: 0.25pi\nlayers = 2\n")
    config = load_config(str(path), layers=3, epsilon0=None)
    assert config.chain_length == 4 and config.layers == 3
    assert config.theta_x == pytest.approx(0.7853981633974483)
    with pytest.raises(ConfigError):
        load_config(str(path), epsilon0=1.5)


def test_oracle_check_flag(tmp_path):
    out = str(tmp_path / "oracle")
    result = invoke("--oracle-check", *CHAIN, "--layers", "2", "--workers", "3", "--out", out)
    assert result.exit_code == EXIT_OK, result.output
    assert "max deviation" in result.output
    report = pd.read_csv(os.path.join(out, "oracle_check.csv"))
    assert set(report["reference"]) >= {"state-vector", "dense-max-deviation"}
    checked = report[report["reference"] != "dense-coefficients"]
    assert checked["deviation"].max() < 1e-10


def test_histograms_and_checkpoints(tmp_path):
    out = str(tmp_path / "run")
    result = invoke("run", *CHAIN, "--layers", "2", "--epsilon0", "1e-4", "--histogram-bins", "12",
                    "--checkpoint-every", "1", "--out", out)
    assert result.exit_code == EXIT_OK, result.output
    histogram = pd.read_csv(os.path.join(out, "histogram_t2.tsv"), sep="\t")
    assert histogram["normalized_count"].sum() == pytest.approx(1.0, abs=1e-5)
    assert os.path.exists(os.path.join(out, "checkpoints", "checkpoint_t1.yaml"))
    assert os.path.exists(os.path.join(out, "checkpoints", "checkpoint_t2.yaml"))


def test_rerun_reproduces_ledger(tmp_path):
    frames = []
    for name in ("a", "b"):
        out = str(tmp_path / name)
        assert invoke("run", *CHAIN, "--layers", "3", "--workers", "4", "--out", out).exit_code == EXIT_OK
        frames.append(pd.read_csv(os.path.join(out, "ledger.csv")).drop(columns=TIMING_COLUMNS))
    pd.testing.assert_frame_equal(frames[0], frames[1])


def test_clifford_kick_stays_single_term(tmp_path):
    out = str(tmp_path / "clifford")
    result = invoke("run", "--preset", "kicked-ising-chain", "--theta-x", "0.5pi", "--layers", "4",
                    "--quiet", "--out", out)
    assert result.exit_code == EXIT_OK, result.output
    assert set(pd.read_csv(os.path.join(out, "ledger.csv"))["term_count"]) == {1}


def test_circuit_file_run(tmp_path):
    circuit = tmp_path / "circuit.txt"
    circuit.write_text("X0 0.2\nX1 0.4\n\nZ0 Z1 -0.5pi\n")
    out = str(tmp_path / "file")
    result = invoke("run", "--circuit-file", str(circuit), "--n-qubits", "2", "--observable", "Z1",
                    "--quiet", "--out", out)
    assert result.exit_code == EXIT_OK, result.output
    assert len(pd.read_csv(os.path.join(out, "ledger.csv"))) == 2


def test_bench_sweep(tmp_path):
    out = str(tmp_path / "bench")
    result = invoke("bench", *CHAIN, "--layers", "2", "--sweep", "1,2", "--out", out)
    assert result.exit_code == EXIT_OK, result.output
    bench = pd.read_csv(os.path.join(out, "bench.csv"))
    assert sorted(set(bench["workers"])) == [1, 2]
    assert len(bench) == 4
    assert (bench["exchange_ms_per_gate"] <= bench["wall_ms_per_gate"]).all()


def test_sweep_over_angles_and_thresholds(tmp_path):
    out = str(tmp_path / "sweep")
    result = invoke("sweep", *CHAIN, "--layers", "3", "--theta-xs", "0,0.3", "--epsilons", "0,1e-3", "--out", out)
    assert result.exit_code == EXIT_OK, result.output
    frame = pd.read_csv(os.path.join(out, "sweep.csv"))
    assert list(frame.columns) == simulation.SWEEP_COLUMNS
    assert len(frame) == 2 * 2 * 3
    kickless = frame[frame["theta_x"] == 0.0]
    assert set(kickless["observable"]) == {1.0} and set(kickless["term_count"]) == {1}

    single = str(tmp_path / "single")
    assert invoke("run", *CHAIN, "--layers", "3", "--out", single).exit_code == EXIT_OK
    ledger = pd.read_csv(os.path.join(single, "ledger.csv"))
    exact = frame[(frame["theta_x"] == pytest.approx(0.3)) & (frame["epsilon0"] == 0.0)]
    assert list(exact["observable"]) == pytest.approx(list(ledger["observable"]), abs=1e-12)


def test_sweep_rejects_bad_values(tmp_path):
    assert invoke("sweep", *CHAIN, "--theta-xs", "0,north", "--out", str(tmp_path)).exit_code == 2
    assert invoke("sweep", *CHAIN, "--epsilons", "1e-3,1.5", "--out", str(tmp_path)).exit_code == EXIT_CONFIG


def test_oracle_limits_come_from_the_oracle_module(tmp_path, monkeypatch):
    assert "oracle" not in config_data
    monkeypatch.setattr(simulation, "MAX_CONJUGATION_QUBITS", 0)
    config = load_config(None, preset="kicked-ising-chain", chain_length=4, theta_x=0.3, layers=2,
                         quiet=True, out=str(tmp_path))
    report, deviation = simulation.oracle_check_pipeline(config)
    assert set(report["reference"]) == {"state-vector"}
    assert deviation < 1e-10
