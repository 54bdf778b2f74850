import csv
import json

import pytest

from clust3 import cli, config, harness
from clust3.errors import ConfigError


def write(tmp_path, text, name="cfg.json"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_defaults_round_trip():
    cfg = config.load()
    again = config.from_dict(json.loads(config.dumps(cfg)))
    assert config.dumps(again) == config.dumps(cfg)
    assert len(config.content_hash(cfg)) == 64


def test_unknown_key_reports_line(tmp_path):
    path = write(tmp_path, '{\n  "train": {\n    "epochs": 3,\n    "epocs": 4\n  }\n}\n')
    with pytest.raises(ConfigError) as exc:
        config.load(path)
    assert exc.value.line == 4
    assert str(exc.value).startswith("line 4:")


def test_type_errors_and_bad_json(tmp_path):
    with pytest.raises(ConfigError) as exc:
        config.load(write(tmp_path, '{\n "adapt": {"lr": "fast"}\n}'))
    assert exc.value.line == 2
    with pytest.raises(ConfigError) as exc:
        config.load(write(tmp_path, '{\n "seeds": [0,\n}'))
    assert exc.value.line is not None
    with pytest.raises(ConfigError):
        config.load(write(tmp_path, '{"corruptions": ["fog"]}'))
    with pytest.raises(ConfigError):
        config.load(write(tmp_path, '{"model": {"num_classes": 5}}'))


def test_overrides():
    cfg = config.load(overrides=["adapt.J=1", "train.epochs=2", "model.projector_layers=[1]", "output_dir=x"])
    assert cfg.adapt.J == 1 and cfg.train.epochs == 2 and cfg.model.projector_layers == (1,)
    assert cfg.output_dir == "x"
    with pytest.raises(ConfigError):
        config.load(overrides=["adapt.nope=1"])
    with pytest.raises(ConfigError):
        config.load(overrides=["adapt.J"])


def test_cli_exit_codes(tmp_path, capsys):
    bad = write(tmp_path, '{\n  "dataset": {"sed": 1}\n}')
    assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == 2
    assert "line 2" in capsys.readouterr().err
    assert cli.main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "r")]) == 3
    assert cli.main(["gen-data", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "d")]) == 3
    assert cli.main(["report", str(tmp_path / "none.csv")]) == 3


def test_fig1_command(tmp_path):
    out = tmp_path / "fig1.csv"
    assert cli.main(["fig1", "--k", "10", "--n", "100000", "--seed", "1", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 1 and abs(float(rows[0]["source_bits"]) - 3.3219) < 0.02
    assert set(rows[0]) == {"K", "source_bits", "target_bits", "delta_mi_bits"}


def test_small_pipeline_end_to_end(tmp_path):
    sets = ["dataset.train_per_class=12", "dataset.test_per_class=8", "model.channels=[4,6,6,4]",
            "model.heads=2", "model.clusters=4", "train.epochs=1", "train.batch_size=32",
            "adapt.checkpoints=[1,2]", "adapt.batch_size=16", "adapt.max_batches=1",
            "corruptions=[\"contrast\"]"]
    flags = sum((["--set", s] for s in sets), [])
    src = write(tmp_path, '{"seeds": [0]}\n', "exp.json")
    data_dir, run_dir = tmp_path / "data", tmp_path / "run"
    assert cli.main(["gen-data", "--config", str(src), "--out", str(data_dir)] + flags) == 0
    assert cli.main(["train", "--config", str(src), "--data", str(data_dir), "--out", str(run_dir)] + flags) == 0
    assert (run_dir / "config.input.json").read_bytes() == src.read_bytes()
    saved = config.load(run_dir / "config.json")
    assert (run_dir / "config.sha256").read_text().strip() == config.content_hash(saved)
    assert len((run_dir / "train_log.jsonl").read_text().splitlines()) == 1
    assert cli.main(["adapt", "--run", str(run_dir), "--data", str(data_dir)]) == 0
    results = run_dir / "adapt" / "results.csv"
    rows = list(csv.DictReader(results.open()))
    assert {r["method"] for r in rows} == {"source", "ptbn", "tent", "clust3"}
    assert json.loads((run_dir / "adapt" / "summary.json").read_text())["seed"] == 0
    assert cli.main(["eval", "--run", str(run_dir), "--data", str(data_dir)]) == 0
    report = tmp_path / "report.md"
    assert cli.main(["report", str(results), "--out", str(report)]) == 0
    text = report.read_text()
    assert "| contrast | 5 |" in text and "clust3" in text


def test_ablate_layers_grid_has_four_rows(tmp_path, monkeypatch):
    cfg = config.load(overrides=["dataset.train_per_class=6", "dataset.test_per_class=4", "model.channels=[4,6,6,4]",
                                 "model.heads=1", "model.clusters=3", "train.epochs=1", "train.batch_size=16",
                                 "adapt.checkpoints=[1]", "adapt.batch_size=16", "adapt.max_batches=1",
                                 "corruptions=[\"brightness\"]"])
    harness.gen_data(cfg, tmp_path / "d")
    out = tmp_path / "ablate.csv"
    rows = harness.ablate(cfg, "layers", tmp_path / "d", out)
    assert [r["layers"] for r in rows] == [(1,), (2,), (1, 2), (1, 2, 3, 4)]
    assert len(list(csv.DictReader(out.open()))) == 4
    with pytest.raises(Exception):
        harness.ablate(cfg, "depth", tmp_path / "d", out)

    monkeypatch.setenv("CLUST3_THREADS", "2")
    parallel = tmp_path / "ablate_parallel.csv"
    harness.ablate(cfg, "layers", tmp_path / "d", parallel)
    assert parallel.read_bytes() == out.read_bytes()


def test_ablate_grids_match_tables():
    assert [c["clusters"] for c in harness.ABLATION_GRIDS["k"]] == [2, 5, 10, 20, 50, 100]
    assert [c["heads"] for c in harness.ABLATION_GRIDS["heads"]] == [1, 5, 10, 15, 20]
