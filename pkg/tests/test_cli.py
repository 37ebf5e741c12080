import io
import json

import pandas as pd
import pytest

from efcn.cli import build_parser, main, parse_act_tokens
from efcn.errors import IO_EXIT_CODE, UNEXPECTED_EXIT_CODE, ConfigurationError
from efcn.frame import ClassSet


def error_line(err: str) -> dict:
    lines = [line for line in err.splitlines() if line.startswith("{")]
    return json.loads(lines[-1])


def read_table(text: str) -> pd.DataFrame:
    return pd.read_csv(io.StringIO(text))


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_parse_act_tokens(frame3):
    assert parse_act_tokens("singletons", frame3) == frame3.singletons()
    assert len(parse_act_tokens("pairs", frame3)) == 3
    assert parse_act_tokens("omega, 1+3", frame3) == [frame3.omega, ClassSet(0b101)]
    assert len(parse_act_tokens("all", frame3)) == 7


def test_owa_weights(capsys):
    assert main(["owa", "--gamma", "0.8", "--table", "weights"]) == 0
    table = read_table(capsys.readouterr().out)
    assert list(table.columns) == ["cardinality", "position", "weight", "tdi"]
    pairs = table[table["cardinality"] == 2]
    assert pairs["weight"].tolist() == pytest.approx([0.8, 0.2])
    triple = table[table["cardinality"] == 3]
    assert triple["weight"].iloc[0] == pytest.approx(0.6819, abs=1e-4)
    multi = table[table["cardinality"] > 1]
    assert multi["tdi"].tolist() == pytest.approx([0.8] * len(multi), abs=1e-6)


def test_owa_extended_table(capsys):
    assert main(["owa", "--gamma", "0.8", "--table", "extended"]) == 0
    table = read_table(capsys.readouterr().out).set_index("act")
    assert list(table.index) == ["c1", "c2", "c3", "c1+c2", "c1+c3", "c2+c3", "omega"]
    assert table.loc["c1+c2"].tolist() == pytest.approx([0.8, 0.8, 0.0])
    assert table.loc["omega"].tolist() == pytest.approx([0.6819] * 3, abs=1e-4)
    assert table.loc["c2"].tolist() == [0.0, 1.0, 0.0]


def test_owa_soft_table(capsys):
    code = main(
        ["owa", "--gamma", "0.8", "--table", "soft", "--soft-labels", "pairs"]
    )
    assert code == 0
    table = read_table(capsys.readouterr().out).set_index("act")
    assert list(table.columns) == ["c1", "c2", "c3", "c1+c2", "c1+c3", "c2+c3"]
    assert table.loc["c1", "c1+c2"] == pytest.approx(0.625)
    assert table.loc["omega", "c1+c2"] == pytest.approx(0.8523, abs=2e-4)
    assert table.loc["c1+c3", "c1+c2"] == pytest.approx(0.5)
    for label in table.columns:
        assert table.loc[label, label] == pytest.approx(1.0)


def test_owa_all_tables(capsys):
    assert main(["owa", "--gamma", "0.9", "--m", "4", "--acts", "singletons"]) == 0
    out = capsys.readouterr().out
    assert [line for line in out.splitlines() if line.startswith("#")] == [
        "# weights",
        "# extended",
        "# soft",
    ]
    assert "\n\n# extended\n" in out


def test_errors_are_reported_as_json(capsys):
    assert main(["owa", "--m", "1"]) == ConfigurationError.exit_code
    line = error_line(capsys.readouterr().err)
    assert line["error"] == "ConfigurationError"
    assert line["exit_code"] == 2
    assert "--m" in line["message"]

    assert main(["owa", "--gamma", "0.2"]) != 0
    assert main(["owa", "--acts", "1+9"]) != 0


def test_missing_files_are_io_errors(tmp_path, capsys):
    code = main(["-c", str(tmp_path / "missing.json"), "owa"])
    assert code == IO_EXIT_CODE
    assert error_line(capsys.readouterr().err)["exit_code"] == IO_EXIT_CODE


@pytest.fixture
def run_config(tmp_path):
    config = {
        "seed": 1,
        "architecture": {
            "preset": "custom",
            "feature_dim": 6,
            "layers": [
                {"kind": "conv", "size": 3, "channels": 6},
                {"kind": "pool", "size": 2},
                {
                    "kind": "deconv",
                    "size": 4,
                    "channels": 6,
                    "stride": 2,
                    "activation": "none",
                },
            ],
        },
        "ds_layer": {"prototypes_per_class": 2},
        "training": {"epochs": 2, "batch_size": 3},
        "metrics": {"bins": 5, "gamma_grid": [0.5, 0.8, 1.0]},
        "data": {
            "count": 6,
            "size": [16, 16],
            "unknown_classes": 1,
            "unknown_probability": 1.0,
        },
        "paths": {
            "dataset": str(tmp_path / "scenes"),
            "checkpoint": str(tmp_path / "model.efcn"),
            "output": str(tmp_path / "output"),
        },
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(config))
    return str(path)


def test_pipeline(tmp_path, run_config):
    assert main(["-c", run_config, "synth"]) == 0
    assert (tmp_path / "scenes" / "manifest.json").is_file()
    assert main(["-c", run_config, "train"]) == 0
    assert (tmp_path / "model.efcn").is_file()
    history = pd.read_csv(tmp_path / "output" / "history.csv")
    assert history["epoch"].tolist() == [1, 2]

    assert main(["-c", run_config, "evaluate", "--gamma-sweep"]) == 0
    output = tmp_path / "output"
    metrics = pd.read_csv(output / "metrics.csv")
    assert metrics["metric"].tolist()[:3] == ["PU", "UIoU", "ECE"]
    assert (metrics["metric"] == "bin").sum() == 5
    sweep = pd.read_csv(output / "gamma_sweep.csv")
    assert sweep["gamma"].tolist() == [0.5, 0.8, 1.0]
    novelty = pd.read_csv(output / "novelty.csv")
    assert novelty["pixels"].tolist() == ["unknown", "known"]
    assert (output / "novelty_assignments.csv").is_file()
    assert (output / "novelty_containing.csv").is_file()

    assert main(["-c", run_config, "calibrate", "--plot"]) == 0
    reliability = pd.read_csv(output / "reliability.csv")
    assert len(reliability) == 5
    assert (output / "reliability.png").is_file()

    assert main(["-c", run_config, "predict", "--gamma", "0.9"]) == 0
    predictions = sorted(p.name for p in (output / "predictions").iterdir())
    assert len(predictions) == 3 * 4
    assert "sample_00003_assigned.efmk" in predictions


def test_training_is_reproducible(tmp_path, run_config):
    assert main(["-c", run_config, "synth", "--unknown-classes", "0"]) == 0
    first, second = tmp_path / "a.efcn", tmp_path / "b.efcn"
    assert main(["-c", run_config, "train", "--checkpoint", str(first)]) == 0
    assert main(["-c", run_config, "train", "--checkpoint", str(second)]) == 0
    assert first.read_bytes() == second.read_bytes()


def test_frame_mismatch(tmp_path, run_config, capsys):
    assert main(["-c", run_config, "synth"]) == 0
    assert main(["-c", run_config, "train", "--epochs", "0"]) == 0
    other = tmp_path / "other.json"
    config = json.loads(open(run_config).read())
    config["frame"] = {"classes": ["a", "b", "c", "d"]}
    config["paths"]["dataset"] = str(tmp_path / "four")
    other.write_text(json.dumps(config))
    assert main(["-c", str(other), "synth"]) == 0
    code = main(
        ["-c", run_config, "evaluate", "--dataset", str(tmp_path / "four")]
    )
    assert code == ConfigurationError.exit_code
    assert "frame" in error_line(capsys.readouterr().err)["message"]


def test_gradcheck_command(run_config, capsys):
    code = main(
        ["-c", run_config, "gradcheck", "--images", "1", "--samples", "40",
         "--tolerance", "1e-3"]
    )
    assert code == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "parameter,max_relative_error"
    assert out.splitlines()[-1].startswith("# checked=")


def test_single_scene_dataset(tmp_path, run_config, capsys):
    assert main(["-c", run_config, "synth", "--count", "1"]) == 0
    assert main(["-c", run_config, "train"]) == 0
    assert (tmp_path / "model.efcn").is_file()
    assert main(["-c", run_config, "evaluate"]) == ConfigurationError.exit_code
    line = error_line(capsys.readouterr().err)
    assert line["error"] == "ConfigurationError"
    assert "`test`" in line["message"]


def test_unexpected_failures_are_reported(monkeypatch, capsys):
    def broken(args, config):
        raise ValueError("need at least one array to stack")

    monkeypatch.setattr("efcn.cli.cmd_owa", broken)
    assert main(["owa"]) == UNEXPECTED_EXIT_CODE
    line = error_line(capsys.readouterr().err)
    assert line == {
        "error": "ValueError",
        "exit_code": UNEXPECTED_EXIT_CODE,
        "message": "need at least one array to stack",
    }
