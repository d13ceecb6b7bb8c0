import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from lanescope import cli
from lanescope.errors import ConfigError

MINI = {
    "seed": 11,
    "io": {"out_dir": None},  # filled per test
    "synth": {"scenarios": 2, "duration": 400, "rate": 25.0},
    "ingest": {"source_rate_hz": 25, "target_rate_hz": 5},
    "codec": {"encoder": "linear"},
    "bnp": {"L": 8, "iterations": 40},
    "analysis": {"regions": ["ALL", "LANE_CHANGE"]},
}


def write_config(tmp_path, out_name="run", **extra):
    raw = json.loads(json.dumps(MINI))
    raw["io"]["out_dir"] = str(tmp_path / out_name)
    raw.update(extra)
    path = tmp_path / f"config_{out_name}.json"
    path.write_text(json.dumps(raw))
    return path


def tree_digest(root, subdirs=("labels", "analysis")):
    out = {}
    for p in sorted(Path(root).rglob("*")):
        if p.is_file() and any(part in subdirs for part in p.parts):
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


# config handling ---------------------------------------------------------------

def test_unknown_section_rejected(tmp_path):
    path = write_config(tmp_path, mystery={"x": 1})
    assert cli.run("synth", path) == 2


def test_unknown_key_rejected(tmp_path):
    path = write_config(tmp_path)
    assert cli.run("synth", path, ["bnp.not_a_knob=3"]) == 2


def test_missing_seed_rejected(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"io": {"out_dir": str(tmp_path / "x")}}))
    assert cli.run("synth", path) == 2


def test_config_not_json(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{nope")
    assert cli.run("synth", path) == 2


def test_override_applies(tmp_path):
    path = write_config(tmp_path)
    cfg = cli.load_config(path, ["bnp.L=30", "codec.encoder=cae"])
    assert cfg.hyper.L == 30
    assert cfg.encoder == "cae"


def test_override_string_values(tmp_path):
    path = write_config(tmp_path)
    cfg = cli.load_config(path, ["io.out_dir=elsewhere"])
    assert cfg.out_dir == Path("elsewhere")
    with pytest.raises(ConfigError):
        cli.load_config(path, ["no_equals_sign"])


def test_missing_input_path_is_domain_error(tmp_path):
    path = write_config(tmp_path)
    # fields before ingest: sequences.json does not exist yet
    assert cli.run("fields", path) == 1


def test_missing_config_path(tmp_path):
    assert cli.run("synth", tmp_path / "absent.json") == 1


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("LANESCOPE_THREADS", "3")
    assert cli.worker_count() == 3
    monkeypatch.setenv("LANESCOPE_THREADS", "0")
    assert cli.worker_count() >= 1
    monkeypatch.delenv("LANESCOPE_THREADS")
    assert cli.worker_count() >= 1
    monkeypatch.setenv("LANESCOPE_THREADS", "lots")
    with pytest.raises(ConfigError):
        cli.worker_count()


def test_help_for_every_subcommand(capsys):
    for name in cli.SUBCOMMANDS:
        with pytest.raises(SystemExit) as exc:
            cli.main([name, "--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        assert "--set" in out and "config" in out


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        cli.main(["not-a-stage", "config.json"])
    assert exc.value.code == 2


# pipeline ------------------------------------------------------------------------

def test_pipeline_end_to_end(tmp_path):
    path = write_config(tmp_path, out_name="e2e")
    assert cli.run("pipeline", path) == 0
    out = tmp_path / "e2e"

    index = json.loads((out / "sequences.json").read_text())
    assert index, "expected at least one ego sequence"
    name = index[0]["name"]

    # external formats: scenes JSONL spells the vehicle-state fields
    first_scene = json.loads((out / "scenes" / f"{name}.jsonl").read_text()
                             .splitlines()[0])
    assert set(first_scene) == {"frame", "ego", "neighbors"}
    assert set(first_scene["ego"]) == {"vehicle_id", "frame", "x", "y", "vx", "vy",
                                       "ax", "ay", "lane_id"}

    # fields JSONL carries the grid and 221-cell channels
    first_field = json.loads((out / "fields" / f"{name}.jsonl").read_text()
                             .splitlines()[0])
    assert first_field["grid"]["nx"] == 17 and first_field["grid"]["ny"] == 13
    assert len(first_field["dvx"]) == 221

    # labels CSV: header plus one integer label per frame
    labels_lines = (out / "labels" / f"{name}.csv").read_text().splitlines()
    assert labels_lines[0] == "frame,label"
    assert all(int(line.split(",")[1]) >= 1 for line in labels_lines[1:])

    # every stage left a manifest with the config snapshot and hashes
    for stage in ("synth", "ingest", "fields", "train_codec", "encode",
                  "segment", "analyze"):
        doc = json.loads((out / "manifests" / f"{stage}.json").read_text())
        assert doc["seed"] == 11
        assert doc["config"]["bnp"]["L"] == 8
        assert all(len(h) == 64 for h in doc["outputs"].values())

    # analysis artifacts parse and agree on the pattern set
    occupancy = json.loads((out / "analysis" / "occupancy.json").read_text())
    assert occupancy["total"] == sum(occupancy["counts"])
    transitions = json.loads((out / "analysis" / "transitions.json").read_text())
    regions = {m["region"] for m in transitions["matrices"]}
    assert regions == {"ALL", "LANE_CHANGE"}
    for m in transitions["matrices"]:
        if not m["include_self"]:
            counts = np.asarray(m["counts"])
            assert np.all(np.diag(counts) == 0)


def test_pipeline_deterministic_across_runs_and_threads(tmp_path, monkeypatch):
    path_a = write_config(tmp_path, out_name="da")
    path_b = write_config(tmp_path, out_name="db")
    monkeypatch.setenv("LANESCOPE_THREADS", "1")
    assert cli.run("pipeline", path_a) == 0
    monkeypatch.setenv("LANESCOPE_THREADS", "4")
    assert cli.run("pipeline", path_b) == 0
    da = tree_digest(tmp_path / "da")
    db = tree_digest(tmp_path / "db")
    assert da and da == db


def test_stagewise_equals_pipeline(tmp_path):
    whole = write_config(tmp_path, out_name="whole")
    staged = write_config(tmp_path, out_name="staged")
    assert cli.run("pipeline", whole) == 0
    for stage in ("synth", "ingest", "fields", "train-codec", "encode",
                  "segment", "analyze"):
        assert cli.run(stage, staged) == 0
    assert tree_digest(tmp_path / "whole") == tree_digest(tmp_path / "staged")
