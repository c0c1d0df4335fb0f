from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from airwayseg.backbone import (
    ChannelAttention,
    LayerSpec,
    ModelConfig,
    build_model,
    forward,
    load_checkpoint,
    predict_patches,
    probe_receptive_field,
    probe_receptive_field_3d,
    receptive_field_dilated,
    receptive_field_standard,
    save_checkpoint,
)
from airwayseg.errors import ConfigurationError, ContractError

TINY = ModelConfig(channels=(4, 8), patch_shape=(8, 8, 8))


def test_receptive_field_examples():
    assert receptive_field_standard([LayerSpec(3, 2), LayerSpec(3, 1)]) == 7
    assert receptive_field_dilated([LayerSpec(3, 1, 2), LayerSpec(3, 1, 2)]) == 9
    assert receptive_field_dilated([LayerSpec(5, 2, 4)] * 5) == 497
    with pytest.raises(ContractError):
        receptive_field_standard([LayerSpec(3, 1, 2)])
    with pytest.raises(ConfigurationError):
        LayerSpec(0)


layer = st.builds(LayerSpec, st.sampled_from([3, 5]), st.sampled_from([1, 2]), st.integers(1, 4))


@settings(max_examples=15, deadline=None)
@given(st.lists(layer, min_size=1, max_size=4))
def test_receptive_field_matches_probe(layers):
    rf = receptive_field_dilated(layers)
    assert probe_receptive_field(layers) == (rf, rf, rf)


def test_probe_3d_agrees_on_small_stack():
    layers = [LayerSpec(3, 1, 2), LayerSpec(3, 2), LayerSpec(3)]
    rf = receptive_field_dilated(layers)
    assert probe_receptive_field_3d(layers, rf + 4) == (rf, rf, rf)


def test_dilation_widens_encoder_field():
    cfg = ModelConfig()
    plain = replace(cfg, use_dilation=False)
    assert receptive_field_dilated(cfg.encoder_layers()) > receptive_field_dilated(plain.encoder_layers())


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(kernel_size=4)
    with pytest.raises(ConfigurationError):
        ModelConfig(channels=(4, 8, 16), patch_shape=(10, 16, 16))
    assert ModelConfig().config_hash() != ModelConfig(use_attention=False).config_hash()


def test_channel_attention_scales_channels():
    torch.manual_seed(0)
    module = ChannelAttention(8, 4)
    x = torch.rand(2, 8, 3, 3, 3)
    g = module.gates(x)
    assert g.shape == (2, 8) and torch.all((g > 0) & (g < 1))
    assert torch.allclose(module(x), x * g[:, :, None, None, None])


@pytest.mark.parametrize("attention,dilation", [(True, True), (False, False)])
def test_model_output_shape_and_range(attention, dilation):
    model = build_model(replace(TINY, use_attention=attention, use_dilation=dilation), seed=0)
    out = model(torch.rand(2, 1, 8, 8, 8))
    assert out.shape == (2, 2, 8, 8, 8)
    assert torch.all((out >= 0) & (out <= 1))


def test_forward_contract():
    model = build_model(TINY, seed=0)
    maps = forward(model, np.random.default_rng(0).random((8, 8, 8)))
    assert maps.airway.shape == (8, 8, 8)
    with pytest.raises(ContractError):
        forward(model, np.zeros((8, 8, 4)))
    with pytest.raises(ContractError):
        forward(model, np.full((8, 8, 8), 2.0))
    batch = predict_patches(model, np.zeros((3, 8, 8, 8)), batch_size=2)
    assert batch.shape == (3, 2, 8, 8, 8)


def test_seeded_build_is_deterministic():
    a = build_model(TINY, seed=3).state_dict()
    b = build_model(TINY, seed=3).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_checkpoint_roundtrip(tmp_path):
    model = build_model(TINY, seed=1)
    path = tmp_path / "m.pt"
    save_checkpoint(model, path, {"step": 7})
    loaded, extra = load_checkpoint(path, TINY)
    assert extra == {"step": 7}
    x = torch.rand(1, 1, 8, 8, 8)
    model.eval()
    loaded.eval()
    assert torch.equal(model(x), loaded(x))
    with pytest.raises(ConfigurationError):
        load_checkpoint(path, replace(TINY, use_attention=False))
    blob = torch.load(path, weights_only=True)
    blob["format_version"] = 99
    torch.save(blob, path)
    with pytest.raises(ConfigurationError):
        load_checkpoint(path)
