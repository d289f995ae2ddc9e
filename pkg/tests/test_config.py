import json

import pytest

from facevq.config import (ConfigError, PipelineConfig, config_dict,
                           dump_config, load_config)


def test_defaults_match_reported_settings():
    cfg = PipelineConfig()
    assert cfg.arch.image_size == 64
    assert cfg.arch.compression == 8
    assert cfg.arch.codebook_size == 256
    assert cfg.arch.latent_dim == 64
    assert cfg.arch.embed_dim == 64
    assert (cfg.loss.eta1, cfg.loss.eta2, cfg.loss.eta3) == (1.5, 0.2, 1.0)
    assert cfg.loss.beta == 0.25
    assert (cfg.loss.lambda1, cfg.loss.lambda2, cfg.loss.lambda3) == (1.5, 0.1, 0.1)
    assert cfg.train.stage1.batch_size == 16
    assert cfg.data.reflectance_ratio == 0.1
    assert cfg.stitch.frontal_priority == 2.0
    assert cfg.stitch.feather_pixels == 8
    assert cfg.metrics.ssim_window == 7
    assert cfg.metrics.psnr_cap == 99.0


def test_dump_config_is_complete_json():
    dump = json.loads(dump_config())
    assert set(dump) == {"data", "arch", "loss", "train", "stitch", "metrics", "seed"}
    assert dump["train"]["swapper"]["iterations"] > 0


def test_load_config_overrides(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({
        "arch": {"codebook_size": 1024, "latent_dim": 256,
                 "image_size": 512, "channel_mult": [1, 1, 2, 2, 4]},
        "seed": 42,
    }))
    cfg = load_config(path)
    assert cfg.arch.codebook_size == 1024
    assert cfg.arch.compression == 32
    assert cfg.arch.channel_mult == (1, 1, 2, 2, 4)
    assert cfg.seed == 42
    assert cfg.loss.eta1 == 1.5  # untouched sections keep defaults


def test_override_dict_applies_after_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"seed": 1}))
    cfg = load_config(path, overrides={"seed": 2})
    assert cfg.seed == 2


def test_unknown_keys_rejected(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"arch": {"codebok_size": 12}}))
    with pytest.raises(ConfigError, match="arch.codebok_size"):
        load_config(path)
    path.write_text(json.dumps({"archx": {}}))
    with pytest.raises(ConfigError, match="archx"):
        load_config(path)


def test_config_dict_round_trips(tmp_path):
    cfg = PipelineConfig()
    path = tmp_path / "full.json"
    path.write_text(dump_config(cfg))
    reloaded = load_config(path)
    assert config_dict(reloaded) == config_dict(cfg)
