import numpy as np
import pytest
import torch

from rosam.config import ModelConfig
from rosam.errors import ConfigurationError, InputError
from rosam.lora import inject_lora
from rosam.model import (BoxPrompt, build_model, encode_box_prompt,
                         encoder_forward)
from rosam.training import bce_dice_loss

from helpers import finite_difference_check, tiny_config, toy_config


def random_image(cfg, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((cfg.canvas_size, cfg.canvas_size, 3)).astype(np.float32)


def test_build_is_deterministic():
    cfg = tiny_config()
    a = build_model(cfg).param_snapshot()
    b = build_model(cfg).param_snapshot()
    assert a.keys() == b.keys()
    for name in a:
        assert np.array_equal(a[name], b[name]), name


def test_different_seed_differs():
    a = build_model(tiny_config(seed=0)).param_snapshot()
    b = build_model(tiny_config(seed=1)).param_snapshot()
    assert any(not np.array_equal(a[n], b[n]) for n in a)


def test_rank_at_min_dim_rejected():
    with pytest.raises(ConfigurationError):
        ModelConfig(canvas_size=64, patch_size=16, embed_dim=32, num_blocks=2,
                    num_heads=2, lora_rank=32)


def test_token_grid_side():
    assert toy_config().grid_size == 16  # 256 / 16


def test_encoder_output_shapes():
    cfg = toy_config()
    state = build_model(cfg)
    out = encoder_forward(state, random_image(cfg))
    assert out.early_features.shape == (cfg.embed_dim, 16, 16)
    assert out.final_embedding.shape == (cfg.embed_dim, 16, 16)


def test_encoder_forward_bit_identical():
    cfg = tiny_config()
    state = build_model(cfg)
    img = random_image(cfg)
    a = encoder_forward(state, img)
    b = encoder_forward(state, img)
    assert torch.equal(a.early_features, b.early_features)
    assert torch.equal(a.final_embedding, b.final_embedding)


def test_encoder_shape_mismatch():
    state = build_model(tiny_config())
    with pytest.raises(InputError):
        encoder_forward(state, np.zeros((32, 32, 3), np.float32))


class TestBoxPrompt:
    def test_identical_boxes_identical_tokens(self):
        state = build_model(tiny_config())
        a = encode_box_prompt(state, BoxPrompt(4, 8, 30, 40))
        b = encode_box_prompt(state, BoxPrompt(4, 8, 30, 40))
        assert torch.equal(a, b)

    def test_per_corner_encoding(self):
        state = build_model(tiny_config())
        a = encode_box_prompt(state, BoxPrompt(4, 8, 30, 40))
        b = encode_box_prompt(state, BoxPrompt(4, 8, 50, 60))
        assert torch.equal(a[0], b[0])
        assert not torch.equal(a[1], b[1])

    def test_full_canvas_box_hits_normalization_endpoints(self):
        cfg = tiny_config()
        state = build_model(cfg)
        tokens = encode_box_prompt(state, BoxPrompt(0, 0, cfg.canvas_size, cfg.canvas_size))
        pe = state.network.prompt_encoder
        expect0 = pe._positional(0.0, 0.0) + pe.corner_embed.weight[0]
        expect1 = pe._positional(1.0, 1.0) + pe.corner_embed.weight[1]
        assert torch.equal(tokens[0], expect0)
        assert torch.equal(tokens[1], expect1)

    def test_degenerate_box_rejected(self):
        with pytest.raises(InputError):
            BoxPrompt(10, 10, 10, 40)

    def test_box_outside_canvas_rejected(self):
        state = build_model(tiny_config())
        with pytest.raises(InputError):
            encode_box_prompt(state, BoxPrompt(0, 0, 100, 100))


def test_gradients_match_finite_differences():
    cfg = tiny_config()
    state = build_model(cfg)
    inject_lora(state, cfg.lora_rank)
    net = state.network.double()
    for p in net.parameters():
        p.requires_grad_(True)
    img = torch.from_numpy(random_image(cfg).transpose(2, 0, 1)).double()
    gt = torch.zeros(cfg.logit_size, cfg.logit_size, dtype=torch.float64)
    gt[3:10, 4:12] = 1.0
    box = BoxPrompt(10, 10, 50, 50)

    def loss_fn():
        enc = net.encoder(img)
        out = net.decoder(enc, net.prompt_encoder(box))
        total_sam, _, _ = bce_dice_loss(out.sam_logits, gt)
        total_hq, _, _ = bce_dice_loss(out.hq_logits, gt)
        return total_sam + total_hq

    last = cfg.num_blocks - 1
    coords = [
        ("encoder.blocks.0.attn.q_proj.lora_down.weight", 3),
        ("encoder.blocks.0.attn.v_proj.lora_up.weight", 1),
        (f"encoder.blocks.{last}.attn.k_proj.weight", 7),
        (f"encoder.blocks.{last}.mlp.fc1.weight", 11),
    ]
    assert finite_difference_check(net, loss_fn, coords) <= 1e-3
