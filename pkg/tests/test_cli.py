import json

import pytest

from diffincl import HypothesisError, ModelError
from diffincl.cascade import CascadeConfig, SolutionFamily, build_effective_model
from diffincl.cli import FAMILY_COLUMNS, ConfigError, emit_family, main, parse_config
from diffincl.discretization import build_mesh, bump_geometry
from diffincl.function_model import F0


def test_minimal_config():
    run = parse_config("")
    assert run.cascade.regime == "origin" and run.cascade.target_count == 4
    run = parse_config('{"p": 2, "G": {"name": "G0", "p": 2}, "lambda": 0.5}')
    assert run.cascade.p == 2.0 and run.cascade.lam == 0.5


def test_p_negative():
    with pytest.raises(HypothesisError, match="p > 0 required"):
        parse_config("p: -1\n")


def test_unknown_keys_and_models():
    with pytest.raises(ConfigError, match="mesh.cells: unknown key"):
        parse_config("mesh: {cells: 3}\n")
    with pytest.raises(ModelError):
        parse_config("F: F9\n")
    with pytest.raises(ConfigError, match="target_count"):
        parse_config("target_count: many\n")


def test_hypothesis_checked_up_front():
    text = "F: {add_quadratic: [-1, zero]}\nG: {add_quadratic: [2, zero]}\np: 1\nlambda: 0.5\n"
    with pytest.raises(HypothesisError, match="λ c̄ < −l₀"):
        parse_config(text)
    with pytest.raises(HypothesisError, match="thresholds apply"):
        parse_config("p: 2\nG: {name: G0, p: 2}\n", "lambda-threshold")


def _empty_family():
    cfg = CascadeConfig(target_count=0, resolution=16)
    mesh = build_mesh(1, (0, 1), 16)
    case = build_effective_model(F0(), None, 1.0, 0.0, "origin")
    return SolutionFamily(cfg, case, mesh, bump_geometry(mesh), [], 0.0)


def test_empty_family_header_only(tmp_path):
    paths = emit_family(_empty_family(), tmp_path)
    assert paths["family"].read_text() == ",".join(FAMILY_COLUMNS) + "\n"
    manifest = json.loads(paths["manifest"].read_text())
    assert manifest["verdict"] == "pass" and manifest["records"] == 0


def test_exit_codes(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("p: -1\n")
    assert main(["cascade", "--config", str(bad), "--out", str(tmp_path / "o")]) == 3
    assert main(["cascade", "--config", str(tmp_path / "missing.yaml")]) == 1
    short = tmp_path / "short.yaml"
    short.write_text("window: [0.01, 0.05]\ntarget_count: 50\nmesh: {resolution: 128}\n")
    assert main(["intervals", "--config", str(short), "--out", str(tmp_path / "s")]) == 2


def test_solve_one_record_and_determinism(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("mesh: {resolution: 256}\nnodal: true\n")
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["solve", "--config", str(cfg), "--out", str(out)]) == 0
        outs.append(out)
    lines = (outs[0] / "family.csv").read_text().splitlines()
    assert len(lines) == 2
    assert (outs[0] / "record_1.csv").exists()
    for f in ("family.csv", "manifest.json", "record_1.csv"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()


def test_cascade_and_calculus(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("mesh: {resolution: 256}\ntarget_count: 2\nsamples: 50\n")
    assert main(["cascade", "--config", str(cfg), "--out", str(tmp_path / "c")]) == 0
    rows = (tmp_path / "c" / "family.csv").read_text().splitlines()
    assert len(rows) == 3
    assert len(rows[1].split(",")) == len(FAMILY_COLUMNS)
    m = json.loads((tmp_path / "c" / "manifest.json").read_text())
    assert len(m["input_sha256"]) == 64 and m["config"]["target_count"] == 2
    assert main(["calculus-check", "--config", str(cfg), "--out", str(tmp_path / "k")]) == 0


def test_lambda_threshold(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("p: 0.5\nG: {name: G0, p: 0.5}\ntarget_count: 2\nmesh: {resolution: 256}\n")
    assert main(["lambda-threshold", "--config", str(cfg), "--out", str(tmp_path / "t")]) == 0
    m = json.loads((tmp_path / "t" / "manifest.json").read_text())
    assert m["lambda_k"] > 0
