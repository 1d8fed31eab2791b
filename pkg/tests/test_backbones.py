from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from emvfm.backbones import (
    REGISTRY,
    Backbone,
    Family,
    FeatureMap,
    LocalCheckpointProvider,
    RandomInitProvider,
    VisionTransformer,
    architecture_only,
    build_backbone,
    convert_openclip_visual,
    get_spec,
    parameter_checksum,
    pooled_embedding,
)
from emvfm.errors import RegistryError, ShapeError
from emvfm.lora import count_trainable
from emvfm.seghead import head_for


def test_registry_keys():
    for key in ("dinov2-l14", "dinov3-l16", "openclip-l14", "toy-s14"):
        assert key in REGISTRY
    with pytest.raises(RegistryError):
        get_spec("vit-huge-nonexistent")
    with pytest.raises(KeyError):
        build_backbone("nope")


@pytest.mark.parametrize(
    "key,shape,expected",
    [
        ("dinov2-l14", (2, 3, 1022, 770), (2, 1024, 73, 55)),
        ("dinov3-l16", (1, 3, 1024, 768), (1, 1024, 64, 48)),
        ("openclip-l14", (1, 3, 224, 224), (1, 1024, 16, 16)),
        ("dinov2-s14", (1, 3, 56, 70), (1, 384, 4, 5)),
    ],
)
def test_feature_map_shapes_meta(key, shape, expected):
    bb = architecture_only(key)
    with torch.device("meta"):
        fm = bb.extract_feature_map(torch.empty(shape))
    assert tuple(fm.tokens.shape) == expected
    assert fm.patch_size == bb.patch_size


def test_openclip_projected_option_changes_width():
    assert get_spec("openclip-l14").embed_dim == 1024
    assert get_spec("openclip-l14", token_source="projected").embed_dim == 768
    bb = architecture_only("openclip-l14", token_source="projected")
    with torch.device("meta"):
        fm = bb.extract_feature_map(torch.empty(1, 3, 28, 28))
    assert fm.tokens.shape[1] == 768


def test_token_layer_recorded():
    assert isinstance(get_spec("openclip-l14").token_layer, str)
    assert get_spec("openclip-l14").token_layer != get_spec("openclip-l14", token_source="projected").token_layer


def test_non_divisible_input_raises(toy):
    with pytest.raises(ShapeError):
        toy.extract_feature_map(torch.zeros(1, 3, 29, 28))
    with pytest.raises(ShapeError):
        toy.extract_feature_map(torch.zeros(1, 1, 28, 28))


def test_zero_weights_give_zero_features():
    bb = build_backbone("toy-s14", provider=RandomInitProvider(zero=True))
    x = torch.randn(2, 3, 42, 28)
    fm = bb.extract_feature_map(x)
    assert fm.tokens.shape == (2, 48, 3, 2)
    assert torch.count_nonzero(fm.tokens) == 0


def test_toy_is_deterministic(toy):
    x = torch.randn(1, 3, 56, 42, generator=torch.Generator().manual_seed(0))
    a = toy(x)
    b = toy(x)
    assert torch.equal(a, b)
    other = build_backbone("toy-s14", seed=0)
    assert torch.equal(other(x), a)
    assert not torch.equal(build_backbone("toy-s14", seed=1)(x), a)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5))
def test_token_count_conservation(gh, gw):
    spec = get_spec("toy-s14")
    enc = RandomInitProvider(0).load(spec)
    x = torch.randn(1, 3, gh * 14, gw * 14)
    tokens, cls = enc.forward_tokens(x)
    assert tokens.shape[1] == gh * gw
    fm = Backbone(spec, enc).extract_feature_map(x)
    assert fm.grid == (gh, gw)
    # row-major reshape: grid cell (i, j) is token i * gw + j
    i, j = gh - 1, gw - 1
    assert torch.equal(fm.tokens[0, :, i, j], tokens[0, i * gw + j])


def test_registers_and_cls_dropped():
    bb = build_backbone("toy-s14", num_register_tokens=4)
    fm = bb.extract_feature_map(torch.randn(1, 3, 28, 42))
    assert fm.tokens.shape == (1, 48, 2, 3)
    assert fm.cls.shape == (1, 48)


# ----------------------------------------------------------------- pooling


def test_pooled_constant_grid():
    fm = FeatureMap(torch.full((2, 5, 3, 4), 0.75), 14)
    assert torch.allclose(pooled_embedding(fm), torch.full((2, 5), 0.75))


def test_pooled_two_tokens():
    fm = FeatureMap(torch.tensor([0.0, 2.0]).reshape(1, 1, 1, 2), 14)
    assert pooled_embedding(fm).item() == 1.0


def test_pooled_matches_flat_mean_oracle(rng):
    tokens = rng.normal(size=(3, 16, 5, 7))
    got = pooled_embedding(FeatureMap(torch.from_numpy(tokens), 14)).numpy()
    oracle = np.array([[sum(tokens[b, c].ravel()) / 35 for c in range(16)] for b in range(3)])
    np.testing.assert_allclose(got, oracle, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_pooled_permutation_invariant(seed):
    g = torch.Generator().manual_seed(seed)
    tokens = torch.randn(1, 8, 4, 6, generator=g, dtype=torch.float64)
    perm = torch.randperm(24, generator=g)
    shuffled = tokens.reshape(1, 8, 24)[..., perm].reshape(1, 8, 4, 6)
    a = pooled_embedding(FeatureMap(tokens, 14))
    b = pooled_embedding(FeatureMap(shuffled, 14))
    assert torch.allclose(a, b, atol=1e-12)


def test_cls_pooling(toy):
    fm = toy.extract_feature_map(torch.randn(1, 3, 28, 28))
    assert torch.equal(pooled_embedding(fm, "cls"), fm.cls)
    with pytest.raises(ValueError):
        pooled_embedding(fm, "max")


# ------------------------------------------------------------------ freeze


def test_frozen_backbone_has_no_trainable_params(fresh_toy):
    assert count_trainable(fresh_toy) == 0
    head = head_for(fresh_toy, hidden_channels=16, refine_channels=4)
    assert count_trainable(fresh_toy) + count_trainable(head) == count_trainable(head)


def test_frozen_checksum_unchanged_after_step(fresh_toy):
    head = head_for(fresh_toy, hidden_channels=16, refine_channels=4)
    before = parameter_checksum(fresh_toy)
    opt = torch.optim.AdamW([p for p in head.parameters()], lr=1e-2)
    x = torch.randn(2, 3, 28, 28)
    fresh_toy.train()
    head.train()
    loss = head(fresh_toy(x)).square().mean()
    loss.backward()
    opt.step()
    assert parameter_checksum(fresh_toy) == before
    assert all(p.grad is None for p in fresh_toy.parameters())


def test_train_mode_keeps_frozen_encoder_in_eval(fresh_toy):
    fresh_toy.train()
    assert not fresh_toy.encoder.training


# ---------------------------------------------------------------- weights


def test_local_provider_roundtrip(tmp_path, monkeypatch):
    spec = get_spec("toy-s14")
    src = RandomInitProvider(7).load(spec)
    torch.save(src.state_dict(), tmp_path / "toy-s14.pth")
    monkeypatch.setenv("EMVFM_WEIGHTS_DIR", str(tmp_path))
    bb = build_backbone("toy-s14", provider=LocalCheckpointProvider())
    x = torch.randn(1, 3, 28, 28)
    assert torch.equal(bb(x), Backbone(spec, src.eval())(x))


def test_local_provider_missing_weights(tmp_path):
    with pytest.raises(FileNotFoundError, match="dinov2-l14"):
        build_backbone("dinov2-l14", provider=LocalCheckpointProvider(tmp_path))


def test_openclip_conversion_loads_into_tree():
    spec = replace(get_spec("toy-s14"), family=Family.OPENCLIP, pre_norm=True, patch_bias=False,
                   layerscale=None, norm_eps=1e-5, proj_dim=32, key="openclip-toy")
    d, n = spec.width, spec.num_blocks
    target = VisionTransformer(spec)
    g = torch.Generator().manual_seed(0)
    state = {
        "visual.conv1.weight": torch.randn(d, 3, 14, 14, generator=g),
        "visual.class_embedding": torch.randn(d, generator=g),
        "visual.positional_embedding": torch.randn(1 + spec.base_grid**2, d, generator=g),
        "visual.ln_pre.weight": torch.ones(d), "visual.ln_pre.bias": torch.zeros(d),
        "visual.ln_post.weight": torch.ones(d), "visual.ln_post.bias": torch.zeros(d),
        "visual.proj": torch.randn(d, 32, generator=g),
    }
    hidden = int(d * spec.mlp_ratio)
    for i in range(n):
        p = f"visual.transformer.resblocks.{i}."
        state.update({
            p + "ln_1.weight": torch.ones(d), p + "ln_1.bias": torch.zeros(d),
            p + "ln_2.weight": torch.ones(d), p + "ln_2.bias": torch.zeros(d),
            p + "attn.in_proj_weight": torch.randn(3 * d, d, generator=g) * 0.02,
            p + "attn.in_proj_bias": torch.zeros(3 * d),
            p + "attn.out_proj.weight": torch.randn(d, d, generator=g) * 0.02,
            p + "attn.out_proj.bias": torch.zeros(d),
            p + "mlp.c_fc.weight": torch.randn(hidden, d, generator=g) * 0.02,
            p + "mlp.c_fc.bias": torch.zeros(hidden),
            p + "mlp.c_proj.weight": torch.randn(d, hidden, generator=g) * 0.02,
            p + "mlp.c_proj.bias": torch.zeros(d),
        })
    state["text.ignored"] = torch.zeros(1)
    converted = convert_openclip_visual(state)
    missing, unexpected = target.load_state_dict(converted, strict=False)
    assert not unexpected
    assert set(missing) <= {"mask_token"}
    assert torch.equal(target.blocks[1].attn.qkv.weight, state["visual.transformer.resblocks.1.attn.in_proj_weight"])


def test_dinov3_defaults_to_hub_and_reports_failures(monkeypatch):
    calls = []

    def offline(repo, entry):
        calls.append((repo, entry))
        raise RuntimeError("network unreachable")

    monkeypatch.setattr(torch.hub, "load", offline)
    with pytest.raises(FileNotFoundError, match="dinov3_vitl16"):
        build_backbone("dinov3-l16")
    assert calls == [("facebookresearch/dinov3", "dinov3_vitl16")]
