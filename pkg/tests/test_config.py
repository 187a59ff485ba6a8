import pytest

from evseg.config import ConfigError, RunConfig, dump_config, load_config
from evseg.flatcfg import loads


def test_defaults_resolve():
    cfg = load_config(env={})
    assert cfg.seed == 0 and cfg.net.seed == 0 and cfg.train.seed == 0
    assert cfg.loss.total_epochs == cfg.train.epochs == 30
    assert cfg.loss.lambda2 == 0.5 and cfg.train.lr == 1e-4


def test_file_and_overrides(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\nseed=7\ntrain.epochs=12  # trailing\nnet.euga.rank=4\nnet.stage_channels=8,16,32\n")
    cfg = load_config(p, ["loss.literal_lu_sign=true"], env={})
    assert cfg.seed == cfg.net.seed == cfg.train.seed == 7
    assert cfg.loss.total_epochs == 12
    assert cfg.net.euga.rank == 4 and cfg.net.euga.feature_channels == 8
    assert cfg.net.stage_channels == (8, 16, 32)
    assert cfg.loss.literal_lu_sign is True


def test_env_seed_wins(tmp_path):
    assert load_config(None, ["seed=3"], env={"EVSEG_SEED": "9"}).seed == 9


def test_roundtrip():
    cfg = load_config(None, ["net.use_euga=false", "prog.epsilon=0.02"], env={})
    again = loads(RunConfig(), dump_config(cfg))
    assert again == cfg


@pytest.mark.parametrize("text,line,field", [
    ("seed=1\nnope=2\n", 2, "nope"),
    ("train.epochs=abc\n", 1, "train.epochs"),
    ("net.euga.rank=x\n", 1, "net.euga.rank"),
    ("junk line\n", 1, None),
])
def test_errors_point_at_line_and_field(tmp_path, text, line, field):
    p = tmp_path / "bad.cfg"
    p.write_text(text)
    with pytest.raises(ConfigError) as info:
        load_config(p, env={})
    assert info.value.line == line
    assert info.value.field == field


def test_validation_errors():
    with pytest.raises(ConfigError):
        load_config(None, ["loss.lambda2=-1"], env={})
    with pytest.raises(ConfigError):
        load_config(None, ["data.corpus=/definitely/not/here"], env={})
    with pytest.raises(ConfigError):
        load_config("/no/such.cfg", env={})
