"""End-to-end command runs through main()."""

from __future__ import annotations

import json

import pytest

from ernn.cli import main
from ernn.features import write_features


def run_json(capsys, *argv: str) -> dict:
    assert main([*argv, "--json"]) == 0
    return json.loads(capsys.readouterr().out)


@pytest.fixture
def workspace(tmp_path, capsys, utterances):
    feats = tmp_path / "feats"
    feats.mkdir()
    for u in utterances:
        write_features(feats / f"{u.id}.feat", u)
    assert main(["init", "tiny", "-o", str(tmp_path / "tiny.ernn"), "--seed", "1"]) == 0
    capsys.readouterr()
    return tmp_path


class TestInfo:
    def test_preset(self, capsys):
        data = run_json(capsys, "info", "tiny")
        assert data["params"]["total"] > 0
        assert set(data["file_bytes"]) == {"float32", "hybrid8", "integer8_16"}
        assert data["file_bytes"]["hybrid8"] < data["file_bytes"]["float32"]

    def test_model_file(self, capsys, workspace):
        data = run_json(capsys, "info", str(workspace / "tiny.ernn"))
        assert data["mode"] == "float32"
        assert data["stored_params"] == data["params"]["total"]

    def test_table(self, capsys):
        assert main(["info", "tiny"]) == 0
        assert "encoder.0" in capsys.readouterr().out


def test_full_pipeline(capsys, workspace):
    model, stats, feats = workspace / "tiny.ernn", workspace / "tiny.stats", workspace / "feats"
    integer = workspace / "tiny-int.ernn"

    ranges = run_json(capsys, "calibrate", str(model), "--data", str(feats), "-o", str(stats))
    assert "encoder.input" in ranges

    converted = run_json(capsys, "convert", str(model), "--mode", "integer", "--stats", str(stats), "-o", str(integer))
    assert converted["mode"] == "integer8_16"
    assert integer.stat().st_size == converted["bytes"]

    serial = run_json(capsys, "run", str(integer), "--data", str(feats))
    threaded = run_json(capsys, "run", str(integer), "--data", str(feats), "--workers", "2")
    assert sorted(serial) == ["utt0", "utt1", "utt2", "utt3"]
    assert serial == threaded

    report = run_json(capsys, "compare", str(model), str(integer), "--data", str(feats))
    assert set(report["layers"]) == {"encoder.0", "encoder.1", "prediction.0"}
    assert 0.0 <= report["agreement"] <= 1.0

    timing = run_json(capsys, "bench", str(integer), "--data", str(feats), "--percentile", "0.5")
    assert timing["mode"] == "integer8_16"
    assert len(timing["utterances"]) == 4


def test_hybrid_convert_needs_no_stats(capsys, workspace):
    data = run_json(
        capsys, "convert", str(workspace / "tiny.ernn"), "--mode", "hybrid", "-o", str(workspace / "h.ernn")
    )
    assert data["mode"] == "hybrid8"


def test_prune(capsys, workspace):
    before = run_json(capsys, "info", str(workspace / "tiny.ernn"))["stored_params"]
    run_json(
        capsys, "prune", str(workspace / "tiny.ernn"), "--encoder-sparsity", "0.5", "-o", str(workspace / "s.ernn")
    )
    after = run_json(capsys, "info", str(workspace / "s.ernn"))
    assert after["stored_params"] < before
    assert after["stored_params"] == after["params"]["total"]


def test_bench_layer_modes(capsys):
    timings = run_json(capsys, "bench", "--modes", "sru:16x32x16", "--steps", "2")
    assert set(timings) == {"float", "hybrid", "integer"}


def test_demo_train(capsys):
    data = run_json(
        capsys, "demo-train", "--steps", "30", "--start-step", "0", "--end-step", "20", "--interval", "10"
    )
    assert [e["step"] for e in data["log"]] == [0, 10, 20]
    assert data["final_sparsity"] == pytest.approx(0.5)


PRUNED_TOPOLOGY = """\
feature_width: 8
vocab_size: 12
embedding_width: 8
encoder:
  - {kind: lstm, hidden: 32, projection: 16, count: 2}
prediction:
  - {kind: lstm, hidden: 32, projection: 16}
joint: {hidden: 16}
pruning:
  final_sparsity: 0.75
  start_step: 0
  end_step: 20
  mask_update_interval: 10
  prunable: [W]
"""


@pytest.fixture
def pruned_topology(tmp_path):
    path = tmp_path / "pruned.yaml"
    path.write_text(PRUNED_TOPOLOGY)
    return path


def test_demo_train_follows_topology_schedule(capsys, pruned_topology):
    data = run_json(capsys, "demo-train", "--topology", str(pruned_topology), "--steps", "30")
    assert [e["step"] for e in data["log"]] == [0, 10, 20]
    assert data["log"][-1]["target"] == pytest.approx(0.75)
    assert data["final_sparsity"] == pytest.approx(0.75)


def test_demo_train_flags_override_topology(capsys, pruned_topology):
    data = run_json(
        capsys, "demo-train", "--topology", str(pruned_topology), "--steps", "30", "--final-sparsity", "0.25"
    )
    assert data["final_sparsity"] == pytest.approx(0.25)


def test_prune_defaults_to_topology_target(capsys, tmp_path, pruned_topology):
    model, pruned = tmp_path / "m.ernn", tmp_path / "p.ernn"
    assert main(["init", str(pruned_topology), "-o", str(model)]) == 0
    capsys.readouterr()
    before = run_json(capsys, "info", str(model))
    run_json(capsys, "prune", str(model), "-o", str(pruned))
    after = run_json(capsys, "info", str(pruned))
    assert after["stored_params"] < before["stored_params"]
    # only the W matrices are prunable: 3 layers x 4 gates x (32 x input) at 75%
    w_values = 4 * 32 * (8 + 16 + 8)
    assert before["stored_params"] - after["stored_params"] == w_values * 3 // 4


class TestErrors:
    @pytest.mark.parametrize(
        "argv",
        [
            [],
            ["info"],
            ["bench", "--modes", "gru:1x2x3"],
            ["prune", "m.ernn", "--sparsity", "0.5", "--block", "sixteen", "-o", "x"],
        ],
    )
    def test_usage_errors(self, capsys, argv):
        assert main(argv) == 1
        assert capsys.readouterr().err.startswith("Error:")

    def test_prune_needs_a_target(self, capsys, workspace):
        assert main(["prune", str(workspace / "tiny.ernn"), "-o", str(workspace / "x.ernn")]) == 1
        assert "--sparsity" in capsys.readouterr().err

    def test_integer_convert_needs_stats(self, capsys, workspace):
        assert main(["convert", str(workspace / "tiny.ernn"), "--mode", "integer", "-o", str(workspace / "x")]) == 1
        assert "ernn calibrate" in capsys.readouterr().err

    def test_bench_needs_model_and_data(self, capsys):
        assert main(["bench"]) == 1

    def test_missing_file(self, capsys, tmp_path):
        assert main(["run", str(tmp_path / "absent.ernn"), "--data", str(tmp_path)]) == 2
        assert "absent.ernn" in capsys.readouterr().err

    def test_unknown_preset_hints_at_presets(self, capsys, tmp_path):
        assert main(["init", "enormous", "-o", str(tmp_path / "x.ernn")]) == 2
        err = capsys.readouterr().err
        assert err.startswith("Error:") and "baseline" in err

    def test_corrupt_model(self, capsys, workspace):
        path = workspace / "tiny.ernn"
        path.write_bytes(path.read_bytes()[:-1])
        assert main(["info", str(path)]) == 2

    def test_version(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
        assert "ernn" in capsys.readouterr().out
