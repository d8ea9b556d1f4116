import json
import logging
import subprocess
import sys
from pathlib import Path

import pytest

from geoinfer import cli
from geoinfer import data as gd


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    assert run("generate", "--seed", 1, "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def imputed(generated, tmp_path_factory):
    out = tmp_path_factory.mktemp("imp")
    g = generated
    code = run(
        "impute", "--train", g / "train.csv", "--test", g / "test.csv", "--schema", g / "schema.json",
        "--truth", g / "truth.csv", "--out", out,
    )
    assert code == 0
    return out


def test_soil_demo_census(tmp_path, capsys):
    assert run("soil-demo", "--out", tmp_path, "--json") == 0
    files = sorted(p.name for p in tmp_path.iterdir())
    assert files == ["manifest.json", "metrics.json", "soil_probability.svg", "soil_scatter.svg", "soil_similarity.svg"]
    metrics = read_json(tmp_path / "metrics.json")
    assert metrics["accuracy"] >= 15 / 16
    assert 0.0 <= metrics["roc_auc"] <= 1.0
    summary = json.loads(capsys.readouterr().out)
    assert summary["command"] == "soil-demo" and summary["summary"]["misclassified"] == [8]


def test_generate_is_byte_identical(tmp_path, generated):
    assert run("generate", "--seed", 1, "--out", tmp_path) == 0
    for name in ("train.csv", "test.csv", "truth.csv", "schema.json", "benchmark.json", "manifest.json"):
        assert (tmp_path / name).read_bytes() == (generated / name).read_bytes()


def test_generate_row_count_and_mask_rate(tmp_path):
    assert run("generate", "--seed", 3, "--n-test", 20, "--out", tmp_path) == 0
    schema = gd.load_schema(tmp_path / "schema.json")
    test = gd.load_csv(tmp_path / "test.csv", schema)
    assert test.n_rows == 20
    masked = int(test.missing.sum())
    sigma = (100 * 0.5 * 0.5) ** 0.5
    assert abs(masked - 50) <= 3 * sigma


def test_generate_invalid_params(tmp_path):
    assert run("generate", "--missing-rate", 1.5, "--out", tmp_path) == 1
    assert run("generate", "--n-train", 10, "--out", tmp_path / "b") == 1


def test_impute_artifacts(imputed):
    names = {p.name for p in imputed.iterdir()}
    expected = {"run.json", "rmse.csv", "rmse_trend.svg", "manifest.json"} | {f"violins_{t}.svg" for t in gd.ORACLE_TARGETS}
    assert names == expected
    run_doc = read_json(imputed / "run.json")
    assert len(run_doc["snapshots"]) == 11
    manifest = read_json(imputed / "manifest.json")
    assert manifest["config"]["iterations"] == 10 and manifest["config"]["bins"] == 128
    assert set(manifest["inputs"]) == {"train", "test", "schema", "truth"}


def test_impute_one_iteration(generated, tmp_path):
    g = generated
    assert run("impute", "--train", g / "train.csv", "--test", g / "test.csv", "--schema", g / "schema.json",
               "--iterations", 1, "--out", tmp_path) == 0
    assert len(read_json(tmp_path / "run.json")["snapshots"]) == 2
    assert not (tmp_path / "rmse.csv").exists()


def test_impute_fully_observed_warns(generated, tmp_path, caplog):
    g = generated
    with caplog.at_level(logging.WARNING):
        assert run("impute", "--train", g / "train.csv", "--test", g / "truth.csv", "--schema", g / "schema.json",
                   "--iterations", 3, "--out", tmp_path) == 0
    assert "no missing" in caplog.text
    snaps = read_json(tmp_path / "run.json")["snapshots"]
    assert all(s == snaps[0] for s in snaps)


def test_impute_schema_violation(generated, tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n", encoding="utf-8")
    g = generated
    assert run("impute", "--train", bad, "--test", g / "test.csv", "--schema", g / "schema.json", "--out", tmp_path / "o") == 1
    assert run("impute", "--train", tmp_path / "absent.csv", "--test", g / "test.csv", "--schema", g / "schema.json",
               "--out", tmp_path / "o2") == 1


def test_explain_exact(imputed, tmp_path, caplog):
    with caplog.at_level(logging.INFO):
        assert run("explain", "--run", imputed / "run.json", "--targets", "C_c", "--rows", "0,1,2", "--out", tmp_path, "-v") == 0
    residuals = [float(m.rsplit(" ", 1)[1]) for m in caplog.messages if "efficiency residual" in m]
    assert len(residuals) == 3 and max(residuals) < 1e-9
    names = {p.name for p in tmp_path.iterdir()}
    assert {"shap_C_c.csv", "shap_C_c.json", "shap_bar_C_c.svg", "shap_scatter_C_c.svg"} <= names
    assert read_json(tmp_path / "shap_C_c.json")["rows"] == [0, 1, 2]
    svg = (tmp_path / "shap_scatter_C_c.svg").read_text(encoding="utf-8")
    assert "SHAP of LL for C_c" in svg


def test_explain_monte_carlo_deterministic(imputed, tmp_path):
    args = ["explain", "--run", imputed / "run.json", "--targets", "s_u", "--rows", "3", "--shap-mode", "monte_carlo",
            "--shap-perms", 20, "--seed", 5]
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    for name in ("shap_s_u.csv", "shap_s_u.json", "shap_bar_s_u.svg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_explain_missing_run(tmp_path):
    assert run("explain", "--run", tmp_path / "nothing.json", "--out", tmp_path / "o") == 1
    garbage = tmp_path / "garbage.json"
    garbage.write_text("{}", encoding="utf-8")
    assert run("explain", "--run", garbage, "--out", tmp_path / "o2") == 1


def test_replay_matches(imputed, tmp_path):
    assert run("replay", imputed / "manifest.json", "--out", tmp_path) == 0
    for p in imputed.iterdir():
        if p.name != "manifest.json":
            assert (tmp_path / p.name).read_bytes() == p.read_bytes()


def test_replay_detects_tampering(tmp_path):
    src = tmp_path / "src"
    assert run("soil-demo", "--out", src, "--resolution", 10) == 0
    manifest = read_json(src / "manifest.json")
    manifest["outputs"]["metrics.json"] = "0" * 64
    (src / "manifest.json").write_text(json.dumps(manifest), encoding="utf-8")
    assert run("replay", src / "manifest.json") == 1


def test_replay_detects_changed_input(generated, tmp_path):
    g = tmp_path / "g"
    assert run("generate", "--seed", 2, "--n-train", 50, "--n-test", 5, "--out", g) == 0
    out = tmp_path / "o"
    assert run("impute", "--train", g / "train.csv", "--test", g / "test.csv", "--schema", g / "schema.json",
               "--iterations", 1, "--out", out) == 0
    with open(g / "train.csv", "a", encoding="utf-8") as f:
        f.write(f"{','.join(['0.5'] * 11)}\n")
    assert run("replay", out / "manifest.json") == 1


def test_config_precedence(tmp_path, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"k": 3, "alpha": 1.0, "seed": 9}), encoding="utf-8")
    monkeypatch.setenv(cli.SEED_ENV, "77")
    assert run("soil-demo", "--config", cfg, "--k", 4, "--resolution", 10, "--out", tmp_path / "o") == 0
    resolved = read_json(tmp_path / "o" / "manifest.json")["config"]
    assert resolved["k"] == 4 and resolved["alpha"] == 1.0 and resolved["seed"] == 9
    assert resolved["bins"] == 128 and resolved["bandwidth"] is None


def test_seed_env_fallback(monkeypatch):
    assert cli.resolve_config("generate", {}, env={cli.SEED_ENV: "12"})["seed"] == 12
    assert cli.resolve_config("generate", {"seed": 3}, env={cli.SEED_ENV: "12"})["seed"] == 3
    assert cli.resolve_config("generate", {}, env={})["seed"] == 0
    with pytest.raises(cli.CommandError):
        cli.resolve_config("generate", {}, env={cli.SEED_ENV: "x"})
    with pytest.raises(cli.CommandError):
        cli.resolve_config("generate", {"bogus": 1}, env={})


def test_bad_config_file(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text("[1, 2]", encoding="utf-8")
    assert run("soil-demo", "--config", cfg, "--out", tmp_path / "o") == 1


def test_lock_blocks_concurrent_runs(tmp_path):
    tmp_path.joinpath(cli.LOCK).write_text("1", encoding="utf-8")
    assert run("soil-demo", "--resolution", 10, "--out", tmp_path) == 1
    tmp_path.joinpath(cli.LOCK).unlink()
    assert run("soil-demo", "--resolution", 10, "--out", tmp_path) == 0
    assert not tmp_path.joinpath(cli.LOCK).exists()


def test_out_required():
    assert run("soil-demo") == 1


def test_console_entry_point(tmp_path):
    done = subprocess.run(
        [sys.executable, "-m", "geoinfer.cli", "soil-demo", "--resolution", "10", "--out", str(tmp_path), "--json"],
        capture_output=True,
        text=True,
        check=False,
    )
    assert done.returncode == 0, done.stderr
    assert json.loads(done.stdout)["command"] == "soil-demo"
    assert "accuracy" not in done.stdout.split("{", 1)[0]


def test_manifest_checksums_match_files(imputed):
    manifest = read_json(imputed / "manifest.json")
    for name, digest in manifest["outputs"].items():
        assert cli.sha256_file(imputed / name) == digest
    assert len(manifest["outputs"]) == 8
