import pytest

from hierenv.config import RunConfig, build_config, env_overrides, read_config_file, write_config
from hierenv.errors import ContractError, ParseError


def test_defaults_validate():
    cfg = build_config()
    assert cfg.num_envs == [8, 4, 2] and cfg.K == 3
    assert (cfg.batch_size, cfg.lr, cfg.epochs_stage1, cfg.patience, cfg.dropout) == (32, 1e-3, 100, 20, 0.5)
    assert cfg.tau_gumbel == 0.05 and cfg.tau_contrastive == 0.5


def test_precedence_flags_env_file(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("seed: 3\nlr: 0.01\nthreshold: 0.8\n")
    cfg = build_config(path, {"seed": 9}, {"HIERENV_LR": "0.05"})
    assert cfg.seed == 9  # flag beats file
    assert cfg.lr == 0.05  # env beats file
    assert cfg.threshold == 0.8  # file beats default


def test_seed_ranges_and_lists():
    assert build_config(flags={"seeds": "1..5"}, environ={}).seeds == [1, 2, 3, 4, 5]
    assert build_config(flags={"seeds": "2,4"}, environ={}).seeds == [2, 4]
    cfg = build_config(flags={"strategies": "erm,rand#2"}, environ={})
    assert cfg.strategies == ["erm", "rand#2"]


def test_num_envs_sets_k():
    cfg = build_config(flags={"num_envs": "6,3"}, environ={})
    assert cfg.K == 2 and cfg.num_envs == [6, 3]


@pytest.mark.parametrize(
    "flags",
    [{"K": 2}, {"num_envs": "2,4"}, {"threshold": 1.0}, {"lr": 0}, {"bogus": 1}, {"seed": "x"}],
)
def test_invalid_config(flags):
    with pytest.raises(ContractError):
        build_config(flags=flags, environ={})


def test_missing_data_path_rejected(tmp_path):
    with pytest.raises(ContractError):
        build_config(flags={"data": str(tmp_path / "nope.json")}, environ={})


def test_nested_file_rejected(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("hierarchy:\n  K: 3\n")
    with pytest.raises(ParseError):
        read_config_file(path)


def test_write_read_round_trip(tmp_path):
    cfg = RunConfig(seed=4, num_envs=[6, 2], K=2, lam=1.0)
    write_config(tmp_path / "c.yaml", cfg)
    assert build_config(tmp_path / "c.yaml", environ={}) == cfg


def test_digest_ignores_output_dir():
    a = RunConfig(out="x")
    assert a.digest() == RunConfig(out="y").digest()
    assert a.digest() != RunConfig(seed=2).digest()


def test_env_overrides_prefix():
    assert env_overrides({"HIERENV_SEED": "4", "OTHER": "1", "HIERENV_K": "2"}) == {"seed": "4", "K": "2"}
