import json

import pytest

from hierenv import cli

TINY = [
    "--set", "n_train=24", "--set", "n_val=8", "--set", "n_test=12",
    "--set", "hidden=8", "--set", "proj_dim=4", "--set", "layers_stage2=1",
    "--set", "epochs_stage1=2", "--set", "epochs_stage2=2", "--set", "batch_size=8",
    "--set", "num_envs=4,2",
]  # fmt: skip


def run(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_downstream_without_upstream_is_dependency_error(tmp_path, capsys):
    code, _, err = run(["train-inv", "--out", str(tmp_path), *TINY], capsys)
    assert code == cli.EXIT_DEPENDENCY
    rec = json.loads(err.strip().splitlines()[-1])
    assert rec["error"] == "DependencyError"
    assert rec["missing"].endswith("manifest.json")


def test_bad_config_is_machine_readable(tmp_path, capsys):
    code, _, err = run(["generate-data", "--out", str(tmp_path), "--set", "threshold=2"], capsys)
    assert code == cli.EXIT_ERROR
    assert json.loads(err.strip().splitlines()[-1])["status"] == "error"


@pytest.mark.parametrize("strategy", ["hier", "rand#2", "erm"])
def test_pipeline_writes_artifacts_and_manifests(tmp_path, capsys, strategy):
    code, out, _ = run(["pipeline", "--out", str(tmp_path), "--strategy", strategy, "--dump-variant-edges", *TINY], capsys)
    assert code == 0, out
    for d in ["data", "stage1", "envs", "stage2", "eval", "diversity", "."]:
        manifest = json.loads((tmp_path / d / cli.RUN_MANIFEST).read_text())
        assert manifest["seed"] == 1 and len(manifest["config_digest"]) == 64
        for name, digest in manifest["artifacts"].items():
            assert cli.sha256_file(tmp_path / d / name) == digest
    header = (tmp_path / "eval" / "metrics.csv").read_text().splitlines()[0]
    assert header == "strategy,seed,accuracy,auc,inter_env_distance,recovery,dependency"
    assert (tmp_path / "summary.json").exists()
    if strategy == "hier":
        recs = [json.loads(l) for l in (tmp_path / "envs" / "variant_edges.jsonl").read_text().splitlines()]
        assert {r["k"] for r in recs} == {1, 2}
        assert set(recs[0]) == {"id", "k", "variant_edges"}


def test_pipeline_is_byte_reproducible(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["pipeline", "--out", str(a), *TINY], capsys)[0] == 0
    assert run(["pipeline", "--out", str(b), *TINY], capsys)[0] == 0
    assert (a / "eval" / "metrics.csv").read_bytes() == (b / "eval" / "metrics.csv").read_bytes()


def test_split_commands_match_pipeline(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["pipeline", "--out", str(a), *TINY], capsys)[0] == 0
    for cmd in ["generate-data", "train-env", "assign-env", "train-inv", "evaluate"]:
        assert run([cmd, "--out", str(b), *TINY], capsys)[0] == 0
    assert (a / "eval" / "metrics.csv").read_bytes() == (b / "eval" / "metrics.csv").read_bytes()


def test_gradcheck_command(tmp_path, capsys):
    code, out, _ = run(["gradcheck", "--out", str(tmp_path)], capsys)
    doc = json.loads((tmp_path / "gradcheck" / "gradcheck.json").read_text())
    assert code == 0 and doc["passed"]
    assert doc["max_relative_error"] < cli.GRADCHECK_TOL
    assert "L_inv" in doc["losses"] and "L_HEI" in doc["losses"]


def test_gradcheck_failure_exits_nonzero(tmp_path, capsys, monkeypatch):
    monkeypatch.setattr(cli, "gradient_report", lambda cfg: {"L_ED[1]": {"w": 1e-2}})
    code, _, err = run(["gradcheck", "--out", str(tmp_path)], capsys)
    assert code == cli.EXIT_GRADCHECK
    assert json.loads(err.strip())["status"] == "failed"


def test_ablation_command(tmp_path, capsys):
    argv = ["ablation", "--out", str(tmp_path), "--seeds", "1,2", "--strategies", "erm,rand#2", *TINY]
    code, out, _ = run(argv, capsys)
    assert code == 0
    lines = (tmp_path / "ablation" / "metrics.csv").read_text().splitlines()
    assert len(lines) == 5
    summary = json.loads((tmp_path / "ablation" / "summary.json").read_text())
    assert set(summary["mean_accuracy"]) == {"erm", "rand#2"}
