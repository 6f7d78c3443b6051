import json

import pytest

from hc3ldiff.config import ConfigError, PipelineConfig


def test_defaults():
    cfg = PipelineConfig()
    assert cfg.diffusion.T == 1000 and cfg.diffusion.ddim_steps == 150
    assert cfg.training.stage1_epochs == 60 and cfg.training.stage2_epochs == 200
    assert cfg.phantom.n_train == 200 and cfg.phantom.n_test == 50 and cfg.phantom.size == 64


def test_roundtrip_through_json():
    cfg = PipelineConfig().with_overrides(training={"seed": 7}, diffusion={"ddim_steps": 20})
    again = PipelineConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    assert again.training.seed == 7


def test_partial_sections_fill_defaults():
    cfg = PipelineConfig.from_dict({"ufe": {"base_width": 8}})
    assert cfg.ufe.base_width == 8
    assert cfg.ufe.codebook_size == PipelineConfig().ufe.codebook_size


@pytest.mark.parametrize("data", [
    {"bogus": {}},
    {"training": {"nope": 1}},
    {"training": []},
    {"training": {"stage1_epochs": 0}},
    {"diffusion": {"ddim_steps": 1001}},
    {"diffusion": {"beta_start": 0.5, "beta_end": 0.1}},
    {"diffusion": {"hfe_mode": "xor"}},
    {"phantom": {"size": 60}},
    [],
])
def test_rejects_invalid(data):
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict(data)


def test_load_bad_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        PipelineConfig.load(p)
