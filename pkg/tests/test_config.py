"""Config validation and JSON round trips."""

import json

import pytest

from fieldmark.config import DecoderPretrainConfig, TrainConfig


def test_defaults_are_valid():
    TrainConfig()
    DecoderPretrainConfig()


@pytest.mark.parametrize("field,value,match", [
    ("lambda_message", -0.1, "must be >= 0"),
    ("lambda_tv", -1.0, "must be >= 0"),
    ("pretrain_iters", -1, "must be >= 0"),
    ("lr_grids", 0.0, "must be positive"),
    ("lr_network", -1e-3, "must be positive"),
    ("lr_decay_target", 0.0, r"lr_decay_target must lie in \(0, 1\]"),
    ("lr_decay_target", 1.5, r"lr_decay_target must lie in \(0, 1\]"),
    ("num_watermarks", 0, "num_watermarks must be >= 1"),
    ("message_bits", 0, "message_bits must be >= 1"),
    ("ray_batch", 0, "must be >= 1"),
    ("patch_size", 0, "must be >= 1"),
    ("augment_probability", 1.2, r"must lie in \[0, 1\]"),
])
def test_train_config_rejects(field, value, match):
    with pytest.raises(ValueError, match=match):
        TrainConfig(**{field: value})


def test_capacity_check():
    with pytest.raises(ValueError, match="exceeds the embedder capacity"):
        TrainConfig(num_watermarks=9, num_ids=8)
    TrainConfig(num_watermarks=8, num_ids=8)  # boundary is fine


def test_near_far_pairing():
    with pytest.raises(ValueError, match="set together"):
        TrainConfig(near=1.0)
    with pytest.raises(ValueError, match="set together"):
        TrainConfig(far=5.0)
    with pytest.raises(ValueError, match="far must exceed near"):
        TrainConfig(near=2.0, far=2.0)
    TrainConfig(near=2.0, far=6.0)


def test_effective_min_hamming():
    assert TrainConfig(message_bits=48).effective_min_hamming == 12
    assert TrainConfig(message_bits=3).effective_min_hamming == 1
    assert TrainConfig(message_bits=48, min_hamming=5).effective_min_hamming == 5


def test_post_init_normalizes_sequences():
    cfg = TrainConfig(resolution=[32, 48, 64], adam_betas=[0.8, 0.95])
    assert cfg.resolution == (32, 48, 64)
    assert cfg.adam_betas == (0.8, 0.95)


def test_round_trip_through_json(tmp_path):
    cfg = TrainConfig(resolution=(24, 24, 24), num_watermarks=4,
                      message_bits=16, near=2.0, far=6.0, seed=7)
    path = tmp_path / "cfg.json"
    cfg.to_file(path)
    # file is plain JSON with list-valued tuples
    raw = json.loads(path.read_text())
    assert raw["resolution"] == [24, 24, 24]
    assert raw["adam_betas"] == [0.9, 0.99]
    assert TrainConfig.from_file(path) == cfg


def test_from_dict_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown config keys"):
        TrainConfig.from_dict({"resolutoin": [8, 8, 8]})
    with pytest.raises(ValueError, match="unknown config keys"):
        DecoderPretrainConfig.from_dict({"num_bits": 8, "tiles": 16})


def test_replace_revalidates():
    cfg = TrainConfig()
    out = cfg.replace(message_bits=16)
    assert out.message_bits == 16
    assert cfg.message_bits == 48  # original untouched
    with pytest.raises(ValueError):
        cfg.replace(message_bits=0)


@pytest.mark.parametrize("field,value,match", [
    ("num_bits", 0, "num_bits must be >= 1"),
    ("steps", 0, "steps and batch_size"),
    ("batch_size", 0, "steps and batch_size"),
    ("tile", 4, "divisible by 4"),
    ("tile", 30, "divisible by 4"),
    ("target_accuracy", 0.0, r"must lie in \(0, 1\]"),
])
def test_decoder_config_rejects(field, value, match):
    with pytest.raises(ValueError, match=match):
        DecoderPretrainConfig(**{field: value})


def test_decoder_config_round_trip():
    cfg = DecoderPretrainConfig(num_bits=16, tile=48, noise=False)
    assert DecoderPretrainConfig.from_dict(
        json.loads(json.dumps(cfg.to_dict()))) == cfg
