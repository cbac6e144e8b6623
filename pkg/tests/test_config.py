import dataclasses
from pathlib import Path

import pytest

from grounded_mmt.config import ConfigError, format_config, load_config, parse_config
from grounded_mmt.trainer import TrainConfig


def test_defaults_from_empty_file():
    assert parse_config("# nothing here\n\n") == TrainConfig()


def test_typed_values():
    cfg = parse_config("variant = q-waae\nlambda_a = 0.5  # trailing comment\nbatch_size = 8\nuse_visual = false\n")
    assert cfg.variant == "q-waae" and cfg.lambda_a == 0.5 and cfg.batch_size == 8 and cfg.use_visual is False


def test_round_trip():
    cfg = TrainConfig(variant="g-wgan", lambda_r=0.8, paper_literal_signs=True, seed=7, train_src="/data/a.src")
    assert parse_config(format_config(cfg)) == cfg


def test_format_lists_every_key():
    keys = [ln.split(" = ")[0] for ln in format_config(TrainConfig()).splitlines()]
    assert keys == [f.name for f in dataclasses.fields(TrainConfig)]


def test_relative_paths_resolve_against_file(tmp_path):
    (tmp_path / "run.cfg").write_text("train_src = data/tr.src\nvalid_src = /abs/va.src\n", encoding="utf-8")
    cfg = load_config(tmp_path / "run.cfg")
    assert Path(cfg.train_src) == tmp_path / "data" / "tr.src"
    assert cfg.valid_src == "/abs/va.src"


@pytest.mark.parametrize("text, match", [
    ("colour = red\n", "unknown key"),
    ("seed = 1\nseed = 2\n", "duplicate"),
    ("seed 1\n", "key = value"),
    ("seed = one\n", "expects int"),
    ("use_visual = maybe\n", "expects bool"),
    ("variant = gan\n", "variant"),
    ("patience = 0\n", "patience"),
])
def test_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)
