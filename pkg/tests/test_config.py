import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from fkt.config import RunConfig, apply_overrides, config_from_dict, parse_override, read_config
from fkt.errors import InvalidConfig

from conftest import CONFIGS, blob_config


def test_defaults_follow_training_protocol():
    cfg = config_from_dict({})
    assert (cfg.epochs, cfg.batch_size, cfg.lam, cfg.temperature, cfg.trials) == (100, 256, 1.0, 0.5, 3)
    assert (cfg.ssl_optimizer.name, cfg.ssl_optimizer.lr) == ("lars", 0.001)
    assert (cfg.supervised_optimizer.name, cfg.supervised_optimizer.lr) == ("sgd", 0.025)
    assert (cfg.joint_optimizer.name, cfg.joint_optimizer.lr, cfg.joint_optimizer.momentum) == ("sgd", 0.025, 0.9)
    assert cfg.ssl_optimizer.weight_decay == 1e-6 and cfg.ssl_optimizer.momentum == 0.9


def test_partial_optimizer_block_keeps_other_defaults():
    cfg = config_from_dict({"ssl_optimizer": {"lr": 0.3}})
    assert cfg.ssl_optimizer.name == "lars" and cfg.ssl_optimizer.lr == 0.3 and cfg.ssl_optimizer.momentum == 0.9


@pytest.mark.parametrize("raw,field", [
    ({"lambda": -1}, "lambda"), ({"epochs": 0}, "epochs"), ({"trials": 2, "seeds": [0]}, "seeds"),
    ({"regime": "other"}, "regime"), ({"bogus": 1}, "bogus"), ({"dataset": {"colour": 1}}, "dataset.colour"),
    ({"epochs": "ten"}, "epochs"), ({"lam": 1.0}, "lam"), ({"seeds": [1, 1]}, "seeds"),
    ({"ssl_optimizer": {"name": "adam"}}, "ssl_optimizer.name"), ({"augment": {"flip_probability": 2.0}}, None),
    ({"model": {"num_classes": 3}}, "model.num_classes"),
])
def test_invalid_configs_name_the_field(raw, field):
    with pytest.raises(InvalidConfig) as err:
        config_from_dict(raw)
    if field is not None:
        assert err.value.field == field


def test_model_classes_default_from_dataset():
    cfg = config_from_dict({"dataset": {"name": "aptos2019", "num_classes": 5}})
    assert cfg.model.num_classes == 5


def test_trials_inferred_from_seeds():
    assert config_from_dict({"seeds": [4, 5]}).trials == 2
    assert config_from_dict({"trials": 2}).seeds == [0, 1]


def test_augment_defaults_depend_on_image_size():
    assert config_from_dict({"dataset": {"name": "synthetic_blobs", "image_size": 32}}).augment.crop_scale_range == (0.2, 1.0)
    big = config_from_dict({"dataset": {"name": "intel_image", "num_classes": 6, "image_size": 224}})
    assert big.augment.blur_enabled and big.augment.output_size == 224


def test_overrides():
    assert parse_override("model.encoder_dim=32") == (["model", "encoder_dim"], 32)
    assert parse_override("regime=functional") == (["regime"], "functional")
    raw = apply_overrides(blob_config(), ["epochs=1", "dataset.image_size=16", "seeds=[5, 6]"])
    cfg = config_from_dict(raw)
    assert (cfg.epochs, cfg.dataset.image_size, cfg.seeds, cfg.trials) == (1, 16, [5, 6], 2)
    with pytest.raises(InvalidConfig):
        parse_override("epochs")


def test_read_config_errors(tmp_path):
    with pytest.raises(InvalidConfig):
        read_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(InvalidConfig):
        read_config(bad)


def test_round_trip_through_dict():
    cfg = read_config(CONFIGS / "cifar10_desk_representational.json")
    again = config_from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg and again.hash() == cfg.hash()


@given(st.permutations(list(blob_config())))
def test_hash_ignores_key_order(order):
    raw = blob_config()
    shuffled = {k: raw[k] for k in order}
    assert config_from_dict(shuffled).hash() == config_from_dict(raw).hash()


def test_hash_sees_value_changes():
    assert config_from_dict(blob_config()).hash() != config_from_dict(blob_config(epochs=21)).hash()


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.json")), ids=lambda p: p.name)
def test_shipped_configs_load(path):
    assert isinstance(read_config(path), RunConfig)


def test_desk_pair_accounts_two_to_one():
    rep = read_config(CONFIGS / "cifar10_desk_representational.json")
    fun = read_config(CONFIGS / "cifar10_desk_functional.json")
    assert rep.epochs_total == 40 and fun.epochs_total == 20
    assert (rep.dataset.subset_size, rep.dataset.test_subset_size) == (5000, 1000)
    assert rep.model.backbone == "resnet18" and rep.model.small_input_stem and rep.seeds == fun.seeds == [0, 1, 2]
