from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbgen.cli import (
    EXIT_NUMERIC,
    EXIT_OK,
    EXIT_USAGE,
    ConfigError,
    format_spec_expr,
    load_config,
    main,
    parse_spec_expr,
)
from cbgen.checkpoint import load_checkpoint
from cbgen.energymodel import ConceptSpec

SMALL_CONFIG = {
    "run": {"seed": 0},
    "world": {"d": 6, "concept_names": ["A", "B", "C"], "seed": 1},
    "schedule": {"kind": "cosine", "T": 10},
    "model": {"hidden": 12, "time_dim": 8},
    "train": {"steps": 8, "batch_size": 8, "eval_every": 4},
}


def write_config(tmp_path, overrides=None, drop_out_dir=False) -> Path:
    cfg = json.loads(json.dumps(SMALL_CONFIG))
    cfg["run"]["out_dir"] = str(tmp_path / "out")
    if drop_out_dir:
        del cfg["run"]["out_dir"]
    for sec, vals in (overrides or {}).items():
        cfg.setdefault(sec, {}).update(vals)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


class TestConfig:
    def test_env_override(self, tmp_path):
        path = write_config(tmp_path)
        cfg = load_config(str(path), env={"COCO_TRAIN_STEPS": "3", "COCO_WORLD_D": "4"})
        assert cfg["train"]["steps"] == 3
        assert cfg["world"]["d"] == 4

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"train": {"nope": 1}}))
        with pytest.raises(ConfigError, match="train.nope"):
            load_config(str(path))

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"banana": {}}))
        with pytest.raises(ConfigError, match="banana"):
            load_config(str(path))

    def test_invalid_json_reports_line(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{\n  broken\n}")
        with pytest.raises(ConfigError, match="line 2"):
            load_config(str(path))


class TestSpecExpressions:
    def test_parse_mixed(self):
        spec = ConceptSpec.binary(("Smile", "Male", "Young"))
        out = parse_spec_expr("+Smile,-Male", spec)
        assert out.states == ("active", "negated", "neutral")
        assert out.targets == (1, 1, None)
        assert out.w_neg == -0.001

    def test_parse_explicit_value(self):
        spec = ConceptSpec.binary(("Smile", "Male"))
        out = parse_spec_expr("+Smile=0", spec)
        assert out.targets[0] == 0

    def test_unknown_name_lists_valid(self):
        spec = ConceptSpec.binary(("Smile", "Male"))
        with pytest.raises(KeyError, match="Smile, Male"):
            parse_spec_expr("+Nope", spec)

    def test_printer_roundtrip(self):
        spec = ConceptSpec.binary(("A", "B", "C", "D"))
        expr = "+A,-C,+D=0"
        parsed = parse_spec_expr(expr, spec)
        assert format_spec_expr(parsed, spec) == expr
        assert parse_spec_expr(format_spec_expr(parsed, spec), spec) == parsed

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.sampled_from(["+A", "+A=0", "-A", "+B", "-B", "+C", "-C"]), min_size=1, max_size=3))
    def test_roundtrip_property(self, terms):
        spec = ConceptSpec.binary(("A", "B", "C"))
        seen = {t.lstrip("+-").split("=")[0] for t in terms}
        if len(seen) != len(terms):
            return  # duplicate concepts are rejected by design
        expr = ",".join(terms)
        parsed = parse_spec_expr(expr, spec)
        assert parse_spec_expr(format_spec_expr(parsed, spec), spec) == parsed


class TestCmdTrain:
    def test_missing_out_dir_names_key(self, tmp_path, capsys):
        path = write_config(tmp_path, drop_out_dir=True)
        code = main(["train", "--config", str(path), "--quiet"])
        assert code == EXIT_USAGE
        assert "run.out_dir" in capsys.readouterr().err

    def test_zero_steps_writes_init_checkpoint(self, tmp_path):
        path = write_config(tmp_path, {"train": {"steps": 0}})
        code = main(["train", "--config", str(path), "--quiet"])
        assert code == EXIT_OK
        ckpt = load_checkpoint(tmp_path / "out" / "checkpoint")
        assert ckpt.step == 0

    def test_small_run_artifacts_and_roundtrip(self, tmp_path):
        path = write_config(tmp_path)
        code = main(["train", "--config", str(path), "--quiet"])
        assert code == EXIT_OK
        out = tmp_path / "out"
        assert (out / "metrics.csv").exists()
        assert (out / "config.json").exists()
        ckpt = load_checkpoint(out / "checkpoint")
        assert ckpt.step == 8
        assert ckpt.world is not None

    def test_divergence_exits_3(self, tmp_path, capsys):
        path = write_config(tmp_path, {"train": {"lr": 1e200, "steps": 20}})
        with np.errstate(over="ignore", invalid="ignore"):
            code = main(["train", "--config", str(path), "--quiet"])
        assert code == EXIT_NUMERIC
        assert (tmp_path / "out" / "checkpoint" / "manifest.json").exists()

    def test_rerun_into_fresh_dir_byte_identical(self, tmp_path):
        p1 = write_config(tmp_path)
        assert main(["train", "--config", str(p1), "--quiet"]) == EXIT_OK
        out2 = tmp_path / "out2"
        assert main(["train", "--config", str(p1), "--out", str(out2), "--quiet"]) == EXIT_OK
        a = (tmp_path / "out" / "checkpoint" / "params.bin").read_bytes()
        b = (out2 / "checkpoint" / "params.bin").read_bytes()
        assert a == b
        m1 = (tmp_path / "out" / "metrics.csv").read_bytes()
        m2 = (out2 / "metrics.csv").read_bytes()
        assert m1 == m2


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli_train")
    path = write_config(tmp)
    assert main(["train", "--config", str(path), "--quiet"]) == EXIT_OK
    return tmp / "out" / "checkpoint"


class TestCmdIntervene:
    def test_writes_trajectories_and_glyphs(self, trained_dir, tmp_path):
        out = tmp_path / "iv"
        code = main(
            [
                "intervene",
                "--checkpoint",
                str(trained_dir),
                "--spec",
                "+A,-B",
                "--n",
                "3",
                "--out",
                str(out),
                "--quiet",
            ]
        )
        assert code == EXIT_OK
        lines = (out / "trajectories.jsonl").read_text().strip().splitlines()
        records = [json.loads(l) for l in lines]
        assert {r["trajectory"] for r in records} == {0, 1, 2}
        glyphs = (out / "glyphs.csv").read_text().strip().splitlines()
        assert len(glyphs) == 4  # header + 3 rows
        summary = json.loads((out / "summary.json").read_text())
        assert summary["spec_expr"] == "+A,-B"

    def test_unknown_concept_exits_2(self, trained_dir, tmp_path, capsys):
        code = main(
            [
                "intervene",
                "--checkpoint",
                str(trained_dir),
                "--spec",
                "+Nope",
                "--n",
                "1",
                "--out",
                str(tmp_path / "x"),
                "--quiet",
            ]
        )
        assert code == EXIT_USAGE
        assert "A, B, C" in capsys.readouterr().err

    def test_missing_checkpoint_exits_2(self, tmp_path):
        code = main(
            [
                "intervene",
                "--checkpoint",
                str(tmp_path / "nope"),
                "--spec",
                "+A",
                "--n",
                "1",
                "--out",
                str(tmp_path / "x"),
                "--quiet",
            ]
        )
        assert code == EXIT_USAGE


class TestCmdEval:
    def test_default_battery(self, trained_dir, tmp_path):
        out = tmp_path / "ev"
        code = main(
            [
                "eval",
                "--checkpoint",
                str(trained_dir),
                "--out",
                str(out),
                "--n",
                "20",
                "--quiet",
            ]
        )
        assert code == EXIT_OK
        report = json.loads((out / "report.json").read_text())
        assert report["n_samples"] == 20
        assert (out / "summary.csv").exists()

    def test_specs_file(self, trained_dir, tmp_path):
        specs = tmp_path / "specs.json"
        specs.write_text(json.dumps({"specs": [{"name": "roundish", "expr": "+A"}]}))
        out = tmp_path / "ev2"
        code = main(
            [
                "eval",
                "--checkpoint",
                str(trained_dir),
                "--specs",
                str(specs),
                "--out",
                str(out),
                "--n",
                "10",
                "--quiet",
            ]
        )
        assert code == EXIT_OK
        report = json.loads((out / "report.json").read_text())
        assert [s["name"] for s in report["specs"]] == ["roundish"]

    def test_rerun_byte_identical(self, trained_dir, tmp_path):
        outs = []
        for name in ("e1", "e2"):
            out = tmp_path / name
            assert (
                main(
                    [
                        "eval",
                        "--checkpoint",
                        str(trained_dir),
                        "--out",
                        str(out),
                        "--n",
                        "10",
                        "--seed",
                        "7",
                        "--quiet",
                    ]
                )
                == EXIT_OK
            )
            outs.append((out / "report.json").read_bytes())
        assert outs[0] == outs[1]
