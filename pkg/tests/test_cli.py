import json

import pytest
from click.testing import CliRunner

from wbsense.cli import cli
from wbsense.models.network_model import WeightSet, save_weights
from wbsense.models.signal_model import SensingMatrix, generate_dataset, generate_sensing_matrix


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def dataset_config(tmp_path):
    path = tmp_path / "dataset.json"
    path.write_text(json.dumps({
        "dims": {"K": 4, "N": 6, "Q": 16},
        "sparsity_range": [1, 2],
        "snr_grid_db": [10.0, 0.0],
        "samples_per_cell": 2,
        "seed": 5,
    }))
    return path


def invoke(runner, *args):
    return runner.invoke(cli, [str(a) for a in args], catch_exceptions=False)


def test_gen_data_then_omp(runner, tmp_path, dataset_config):
    result = invoke(runner, "gen-data", "--config", dataset_config, "--out", tmp_path / "ds")
    assert result.exit_code == 0, result.output
    summary = json.loads(result.output)
    assert summary["samples"] == 8
    assert (tmp_path / "ds" / "manifest.json").exists()

    result = invoke(runner, "omp", "--dataset", tmp_path / "ds", "--index", 0, "--index", 3, "--out", tmp_path / "omp.json")
    assert result.exit_code == 0, result.output
    assert [row["index"] for row in json.loads(result.output)] == [0, 3]
    assert "metrics" in json.loads((tmp_path / "omp.json").read_text())


def test_gen_data_flag_overrides(runner, tmp_path, dataset_config):
    result = invoke(
        runner, "gen-data", "--config", dataset_config, "--samples-per-cell", 1, "--snr", 5, "--seed", 9,
        "--out", tmp_path / "ds", "--format", "csv",
    )
    assert result.exit_code == 0, result.output
    header, row = result.output.strip().splitlines()
    assert header.split(",")[:2] == ["directory", "samples"]
    assert row.split(",")[1] == "2"


def test_calibrate_eps_across_channels(runner, tmp_path, dataset_config):
    invoke(runner, "gen-data", "--config", dataset_config, "--out", tmp_path / "ds")
    result = invoke(
        runner, "calibrate-eps", "--dataset", tmp_path / "ds", "--trials", 2,
        "--channel", "awgn", "--channel", "rayleigh", "--out", tmp_path / "eps",
    )
    assert result.exit_code == 0, result.output
    assert (tmp_path / "eps" / "epsilon_awgn.json").exists()
    assert (tmp_path / "eps" / "epsilon_rayleigh.json").exists()
    sensitivity = json.loads((tmp_path / "eps" / "sensitivity.json").read_text())
    assert sensitivity["channels"] == ["awgn", "rayleigh"]


def test_train_and_infer(runner, tmp_path, dataset_config):
    invoke(runner, "gen-data", "--config", dataset_config, "--out", tmp_path / "ds")
    network = tmp_path / "network.json"
    network.write_text(json.dumps({
        "n_bands": 6,
        "n_snapshots": 16,
        "conv_layers": [
            {"filters": 3, "kernel_len": 5, "in_channels": 2},
            {"filters": 2, "kernel_len": 4, "in_channels": 3},
        ],
    }))
    result = invoke(
        runner, "train", "--dataset", tmp_path / "ds", "--network", network, "--epochs", 2,
        "--batch-size", 4, "--out", tmp_path / "model",
    )
    assert result.exit_code == 0, result.output
    assert len(json.loads(result.output)) == 2
    assert (tmp_path / "model" / "weights.json").exists()

    result = invoke(runner, "infer", "--weights", tmp_path / "model" / "weights.json", "--dataset", tmp_path / "ds")
    assert result.exit_code == 0, result.output
    assert len(json.loads(result.output)) == 8

    result = invoke(
        runner, "quant-sweep", "--weights", tmp_path / "model" / "weights.json", "--dataset", tmp_path / "ds",
        "--out", tmp_path / "sweep", "--format", "csv",
    )
    assert result.exit_code == 0, result.output
    assert result.output.splitlines()[0].startswith("Wa,Ia,Ww,Iw")
    assert (tmp_path / "sweep" / "ranges.json").exists()


def test_complexity_json(runner):
    result = invoke(runner, "complexity", "--instrumented", "--q", 20, "--p", 2)
    assert result.exit_code == 0, result.output
    summary = json.loads(result.output)
    analytic = {k: v for k, v in summary["omp"].items()}
    assert summary["omp_instrumented"] == analytic
    assert summary["dlwss"]["layers"][0]["ops"] == 322_560_000


def test_tiling_report_csv(runner):
    result = invoke(runner, "tiling-report", "--tile", "20,16,20,20", "--format", "csv")
    assert result.exit_code == 0, result.output
    lines = result.output.strip().splitlines()
    assert len(lines) == 4
    assert lines[1].startswith("conv0,")


def test_bench(runner, tmp_path, dataset_config):
    invoke(runner, "gen-data", "--config", dataset_config, "--out", tmp_path / "ds")
    config = tmp_path / "bench.json"
    config.write_text(json.dumps({"datasets": ["ds"], "methods": ["omp_known"]}))
    result = invoke(runner, "bench", "--config", config, "--out", tmp_path / "bench", "--workers", 2)
    assert result.exit_code == 0, result.output
    assert (tmp_path / "bench" / "report.csv").exists()
    assert len(json.loads(result.output)) == 2


def test_invalid_input_exits_1(runner, tmp_path):
    assert invoke(runner, "complexity", "--k", 2, "--p", 5).exit_code == 1
    assert invoke(runner, "bench").exit_code == 1
    assert invoke(runner, "tiling-report", "--tile", "1,2,3").exit_code == 1
    assert invoke(runner, "gen-data", "--no-such-flag").exit_code == 1

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"samples_per_cell": 0}))
    assert invoke(runner, "gen-data", "--config", bad, "--out", tmp_path / "ds").exit_code == 1


def test_missing_files_exit_2(runner, tmp_path):
    assert invoke(runner, "omp", "--dataset", tmp_path / "absent").exit_code == 2
    assert invoke(runner, "gen-data", "--config", tmp_path / "absent.json").exit_code == 2


def test_corrupt_weights_exit_2(runner, tmp_path, dataset_config, small_network):
    invoke(runner, "gen-data", "--config", dataset_config, "--out", tmp_path / "ds")
    save_weights(tmp_path / "weights.json", small_network, WeightSet.initialize(small_network, seed=0))
    (tmp_path / "weights.bin").write_bytes(b"\x00" * 8)
    result = invoke(runner, "infer", "--weights", tmp_path / "weights.json", "--dataset", tmp_path / "ds")
    assert result.exit_code == 2


def test_singular_sensing_matrix_exits_3(runner, tmp_path, small_dataset_spec):
    entries = generate_sensing_matrix(small_dataset_spec.dims, seed=1).entries.copy()
    entries[1] = entries[0]
    generate_dataset(small_dataset_spec, directory=tmp_path / "degenerate", sensing_matrix=SensingMatrix(entries=entries))
    result = invoke(runner, "train", "--dataset", tmp_path / "degenerate", "--network", "tiny", "--epochs", 1)
    assert result.exit_code == 3
    assert "singular" in result.output


def test_omp_caps_true_sparsity_at_branch_count(runner, tmp_path):
    config = tmp_path / "dense.json"
    config.write_text(json.dumps({
        "dims": {"K": 4, "N": 8, "Q": 16},
        "sparsity_range": [5, 5],
        "snr_grid_db": [10.0],
        "samples_per_cell": 2,
    }))
    invoke(runner, "gen-data", "--config", config, "--out", tmp_path / "ds")
    result = invoke(runner, "omp", "--dataset", tmp_path / "ds")
    assert result.exit_code == 0, result.output
    assert all(row["predicted"].count("1") == 4 for row in json.loads(result.output))
