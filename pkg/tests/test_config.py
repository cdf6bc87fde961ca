import json

import pytest

from lfpo.config import TrainConfig, config_from_dict, config_to_dict, config_to_json, load_config
from lfpo.errors import ConfigError, InvalidInputError
from lfpo.scheduler import AccumMode


def test_defaults_round_trip():
    config = TrainConfig()
    assert config_from_dict(json.loads(config_to_json(config))) == config


def test_overrides_round_trip():
    config = TrainConfig().replace(task__kind="reverse", lfpo__mode="neg_only", trainer__seed=9,
                                   trainer__accum_mode="step_per_block", decode__max_unmask=2)
    back = config_from_dict(config_to_dict(config))
    assert back == config and back.trainer.accum_mode is AccumMode.STEP_PER_BLOCK


def test_json_is_canonical():
    text = config_to_json(TrainConfig())
    assert text == json.dumps(json.loads(text), sort_keys=True, separators=(",", ":"))


def test_partial_document_uses_defaults():
    config = config_from_dict({"trainer": {"seed": 4}})
    assert config.trainer.seed == 4 and config.task == TrainConfig().task


@pytest.mark.parametrize("doc,key", [
    ({"trainer": {"foo": 1}}, "trainer.foo"),
    ({"optimizer": {}}, "optimizer"),
    ({"lfpo": {"beta": 1.0, "gamma": 2}}, "lfpo.gamma"),
])
def test_unknown_keys_named(doc, key):
    with pytest.raises(ConfigError) as info:
        config_from_dict(doc)
    assert info.value.key == key and key in str(info.value)


@pytest.mark.parametrize("doc", [
    [], {"trainer": 3}, {"trainer": {"learning_rate": -1.0}}, {"lfpo": {"mode": "sideways"}},
    {"task": {"completion_len": 2}, "trainer": {"strata": 3}},
])
def test_invalid_documents(doc):
    with pytest.raises(ConfigError):
        config_from_dict(doc)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"model": {"embed_dim": 8}}))
    assert load_config(good).model.embed_dim == 8


def test_replace_validates():
    with pytest.raises(InvalidInputError):
        TrainConfig().replace(trainer__ema_decay=1.0)


def test_model_config_follows_task():
    config = TrainConfig().replace(task__kind="mod_sum", task__data_vocab=10, task__prompt_len=3,
                                   task__completion_len=5)
    mc = config.model_config
    assert mc.vocab_size == config.task.vocab_size and mc.seq_len == 8
    assert mc.mask_id == config.task.mask_id == mc.vocab_size - 1
