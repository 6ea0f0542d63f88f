import json

import pytest

from floodtweets.config import SCHEMA, parse_flat, resolve, validate_config
from floodtweets.errors import ConfigError


@pytest.fixture
def data_files(tmp_path):
    for name in ("train.jsonl", "dev.jsonl"):
        (tmp_path / name).write_text("", encoding="utf-8")
    return tmp_path


def write_cfg(tmp_path, body, name="run.cfg"):
    p = tmp_path / name
    p.write_text(body, encoding="utf-8")
    return p


MINIMAL = "run_id = run2_text\ndata.train = train.jsonl\ndata.dev = dev.jsonl\n"


def test_minimal_is_fully_defaulted(data_files):
    cfg = validate_config(write_cfg(data_files, MINIMAL))
    p = cfg.protocol
    assert (p.learning_rate, p.epochs, p.seeds, p.batch_size) == (1e-5, 10, tuple(range(10)), 32)
    assert cfg["data.train"] == str(data_files / "train.jsonl")
    assert cfg.smote is None
    assert set(cfg.values) == set(SCHEMA)


def test_misspelt_key_suggests(data_files):
    with pytest.raises(ConfigError, match="learnig_rate.*protocol.learning_rate"):
        validate_config(write_cfg(data_files, MINIMAL + "protocol.learnig_rate = 1e-4\n"))


def test_factor_zero_is_a_range_error(data_files):
    body = MINIMAL.replace("run2_text", "run4_fused") + "smote.inflation_factor = 0\n"
    with pytest.raises(ConfigError, match="smote.inflation_factor"):
        validate_config(write_cfg(data_files, body))


@pytest.mark.parametrize("line,key", [
    ("protocol.epochs = ten", "protocol.epochs"),
    ("protocol.learning_rate = -1", "protocol.learning_rate"),
    ("protocol.seeds = 1,1", "protocol.seeds"),
    ("text.strip_mentions = maybe", "text.strip_mentions"),
    ("mm.image_mode = late", "mm.image_mode"),
])
def test_bad_values_name_key(data_files, line, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        validate_config(write_cfg(data_files, MINIMAL + line + "\n"))


def test_missing_required_and_missing_file(data_files):
    with pytest.raises(ConfigError, match="data.dev"):
        validate_config(write_cfg(data_files, "run_id = run2_text\ndata.train = train.jsonl\n"))
    with pytest.raises(ConfigError, match="not found"):
        validate_config(write_cfg(data_files, MINIMAL.replace("dev.jsonl", "nope.jsonl")))


def test_smote_defaults_per_run(data_files):
    run3 = validate_config(write_cfg(data_files, MINIMAL.replace("run2_text", "run3_scene")))
    assert run3.smote.inflation_factor == 3 and run3.smote.k_neighbors == 5
    with pytest.raises(ConfigError, match="smote.enabled"):
        validate_config(write_cfg(data_files, MINIMAL + "smote.enabled = true\n"))


def test_json_nested_equals_flat(data_files):
    flat = validate_config(write_cfg(data_files, MINIMAL + "protocol.seeds = 3,4\n"))
    nested = {"run_id": "run2_text", "data": {"train": "train.jsonl", "dev": "dev.jsonl"},
              "protocol": {"seeds": [3, 4]}}
    as_json = validate_config(write_cfg(data_files, json.dumps(nested), "run.json"))
    assert flat == as_json


def test_resolved_text_round_trips(data_files):
    cfg = validate_config(write_cfg(data_files, MINIMAL + "mm.n_image_tokens = 3\n"))
    again = resolve(parse_flat(cfg.to_text()), check_paths=False)
    assert again == cfg


def test_malformed_line(data_files):
    with pytest.raises(ConfigError, match="line 2"):
        validate_config(write_cfg(data_files, "run_id = run2_text\njust words\n"))
