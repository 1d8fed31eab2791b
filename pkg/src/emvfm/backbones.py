"""Vision-transformer feature extractors exposing the patch-token grid.

The in-tree :class:`VisionTransformer` follows the DINOv2 parameter naming
(``patch_embed.proj``, ``blocks.N.attn.qkv``, ``blocks.N.attn.proj``, ...)
so official DINOv2 state dicts load directly, and OpenCLIP visual towers can
be converted with :func:`convert_openclip_visual`. Anything else (e.g. the
DINOv3 hub models, which use RoPE) plugs in through a weight provider that
returns a module with ``forward_tokens(x) -> (patch_tokens, cls_token)``.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import RegistryError, ShapeError

log = logging.getLogger(__name__)

WEIGHTS_ENV = "EMVFM_WEIGHTS_DIR"


class Family(str, enum.Enum):
    DINOV2 = "DINOV2"
    DINOV3 = "DINOV3"
    OPENCLIP = "OPENCLIP"
    TOY = "TOY"


@dataclass(frozen=True)
class BackboneSpec:
    family: Family
    variant: str
    patch_size: int
    width: int
    num_blocks: int
    num_heads: int
    mlp_ratio: float = 4.0
    ffn: str = "mlp"
    num_register_tokens: int = 0
    base_grid: int = 37
    layerscale: Optional[float] = 1e-5
    norm_eps: float = 1e-6
    pre_norm: bool = False
    patch_bias: bool = True
    proj_dim: Optional[int] = None
    token_source: str = "final_norm"
    key: str = ""

    @property
    def embed_dim(self) -> int:
        """Channel width ``D`` of the tokens handed to the segmentation head."""
        if self.token_source == "projected":
            return self.proj_dim
        return self.width

    @property
    def token_layer(self) -> str:
        if self.family is Family.OPENCLIP:
            return "ln_post output, pre-projection" if self.token_source != "projected" else "ln_post @ proj"
        return "final LayerNorm output"


def _spec(key, family, variant, p, d, blocks, heads, **kw):
    return BackboneSpec(Family(family), variant, p, d, blocks, heads, key=key, **kw)


REGISTRY = {
    s.key: s
    for s in [
        _spec("dinov2-s14", "DINOV2", "S", 14, 384, 12, 6),
        _spec("dinov2-b14", "DINOV2", "B", 14, 768, 12, 12),
        _spec("dinov2-l14", "DINOV2", "L", 14, 1024, 24, 16),
        _spec("dinov2-g14", "DINOV2", "G", 14, 1536, 40, 24, ffn="swiglu"),
        _spec("dinov3-s16", "DINOV3", "S", 16, 384, 12, 6, num_register_tokens=4, base_grid=14),
        _spec("dinov3-b16", "DINOV3", "B", 16, 768, 12, 12, num_register_tokens=4, base_grid=14),
        _spec("dinov3-l16", "DINOV3", "L", 16, 1024, 24, 16, num_register_tokens=4, base_grid=14),
        _spec(
            "openclip-l14", "OPENCLIP", "L", 14, 1024, 24, 16,
            base_grid=16, layerscale=None, norm_eps=1e-5, pre_norm=True, patch_bias=False, proj_dim=768,
        ),
        _spec(
            "openclip-h14", "OPENCLIP", "H", 14, 1280, 32, 16,
            base_grid=16, layerscale=None, norm_eps=1e-5, pre_norm=True, patch_bias=False, proj_dim=1024,
        ),
        _spec("toy-s14", "TOY", "S", 14, 48, 2, 4, mlp_ratio=2.0, base_grid=8, layerscale=None),
        _spec("toy-s16", "TOY", "S", 16, 48, 2, 4, mlp_ratio=2.0, base_grid=8, layerscale=None),
    ]
}


def get_spec(key: str, **overrides) -> BackboneSpec:
    try:
        spec = REGISTRY[key]
    except KeyError:
        raise RegistryError(f"unknown backbone {key!r}; known: {', '.join(sorted(REGISTRY))}") from None
    return replace(spec, **overrides) if overrides else spec


# ------------------------------------------------------------------ modules


class PatchEmbed(nn.Module):
    def __init__(self, patch_size, dim, bias=True):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv2d(3, dim, kernel_size=patch_size, stride=patch_size, bias=bias)

    def forward(self, x):
        x = self.proj(x)
        return x.flatten(2).transpose(1, 2)


class Attention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"width {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, c // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(b, n, c))


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class SwiGLUFFN(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        hidden = (int(hidden * 2 / 3) + 7) // 8 * 8
        self.w12 = nn.Linear(dim, 2 * hidden)
        self.w3 = nn.Linear(hidden, dim)

    def forward(self, x):
        x1, x2 = self.w12(x).chunk(2, dim=-1)
        return self.w3(F.silu(x1) * x2)


class LayerScale(nn.Module):
    def __init__(self, dim, init):
        super().__init__()
        self.gamma = nn.Parameter(torch.full((dim,), float(init)))

    def forward(self, x):
        return x * self.gamma


class Block(nn.Module):
    def __init__(self, spec: BackboneSpec):
        super().__init__()
        d = spec.width
        hidden = int(d * spec.mlp_ratio)
        self.norm1 = nn.LayerNorm(d, eps=spec.norm_eps)
        self.attn = Attention(d, spec.num_heads)
        self.ls1 = LayerScale(d, spec.layerscale) if spec.layerscale else nn.Identity()
        self.norm2 = nn.LayerNorm(d, eps=spec.norm_eps)
        self.mlp = SwiGLUFFN(d, hidden) if spec.ffn == "swiglu" else Mlp(d, hidden)
        self.ls2 = LayerScale(d, spec.layerscale) if spec.layerscale else nn.Identity()

    def forward(self, x):
        x = x + self.ls1(self.attn(self.norm1(x)))
        return x + self.ls2(self.mlp(self.norm2(x)))


class VisionTransformer(nn.Module):
    def __init__(self, spec: BackboneSpec):
        super().__init__()
        d = spec.width
        self.spec = spec
        self.patch_embed = PatchEmbed(spec.patch_size, d, bias=spec.patch_bias)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + spec.base_grid**2, d))
        self.register_tokens = (
            nn.Parameter(torch.zeros(1, spec.num_register_tokens, d)) if spec.num_register_tokens else None
        )
        self.mask_token = nn.Parameter(torch.zeros(1, d))
        self.norm_pre = nn.LayerNorm(d, eps=spec.norm_eps) if spec.pre_norm else nn.Identity()
        self.blocks = nn.ModuleList(Block(spec) for _ in range(spec.num_blocks))
        self.norm = nn.LayerNorm(d, eps=spec.norm_eps)
        self.head_proj = nn.Parameter(torch.zeros(d, spec.proj_dim)) if spec.proj_dim else None

    def init_weights(self, generator: torch.Generator, std: float = 0.02):
        """Seeded Gaussian init, deterministic for a given generator state."""
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, nn.Linear):
                    m.weight.copy_(torch.randn(m.weight.shape, generator=generator) * std)
                    m.bias.zero_()
            for p in (self.cls_token, self.pos_embed, self.register_tokens):
                if p is not None:
                    p.copy_(torch.randn(p.shape, generator=generator) * std)
            # raw pixels in: unit-variance patch projection
            w = self.patch_embed.proj.weight
            w.copy_(torch.randn(w.shape, generator=generator) / math.sqrt(w[0].numel()))
            if self.patch_embed.proj.bias is not None:
                self.patch_embed.proj.bias.zero_()
            if self.head_proj is not None:
                self.head_proj.copy_(torch.randn(self.head_proj.shape, generator=generator) * std)

    def interpolate_pos_embed(self, gh, gw):
        pos = self.pos_embed
        g = self.spec.base_grid
        if gh == g and gw == g:
            return pos
        cls_pos, patch_pos = pos[:, :1], pos[:, 1:]
        d = patch_pos.shape[-1]
        patch_pos = patch_pos.reshape(1, g, g, d).permute(0, 3, 1, 2)
        patch_pos = F.interpolate(patch_pos, size=(gh, gw), mode="bicubic", align_corners=False)
        patch_pos = patch_pos.permute(0, 2, 3, 1).reshape(1, gh * gw, d)
        return torch.cat([cls_pos, patch_pos], dim=1)

    def forward_tokens(self, x):
        b, _, h, w = x.shape
        p = self.spec.patch_size
        gh, gw = h // p, w // p
        x = self.patch_embed(x)
        x = torch.cat([self.cls_token.expand(b, -1, -1), x], dim=1)
        x = x + self.interpolate_pos_embed(gh, gw)
        if self.register_tokens is not None:
            x = torch.cat([x[:, :1], self.register_tokens.expand(b, -1, -1), x[:, 1:]], dim=1)
        x = self.norm_pre(x)
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)
        if self.spec.token_source == "projected":
            x = x @ self.head_proj
        skip = 1 + self.spec.num_register_tokens
        return x[:, skip:], x[:, 0]


# ----------------------------------------------------------------- wrappers


@dataclass
class FeatureMap:
    tokens: torch.Tensor
    patch_size: int
    source: Optional[BackboneSpec] = None
    cls: Optional[torch.Tensor] = field(default=None, repr=False)

    @property
    def grid(self):
        return tuple(self.tokens.shape[-2:])


class Backbone(nn.Module):
    """Uniform handle: ``forward(x)`` returns the ``(B, D, H', W')`` token grid."""

    def __init__(self, spec: BackboneSpec, encoder: nn.Module):
        super().__init__()
        self.spec = spec
        self.encoder = encoder
        self.frozen = False

    @property
    def patch_size(self):
        return self.spec.patch_size

    def _check(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) input, got {tuple(x.shape)}")
        p = self.spec.patch_size
        if x.shape[-2] % p or x.shape[-1] % p:
            raise ShapeError(f"input {tuple(x.shape[-2:])} is not divisible by patch size {p}")

    def extract_feature_map(self, x) -> FeatureMap:
        self._check(x)
        b, _, h, w = x.shape
        p = self.spec.patch_size
        tokens, cls = self.encoder.forward_tokens(x)
        gh, gw = h // p, w // p
        if tokens.shape[1] != gh * gw:
            raise ShapeError(f"encoder returned {tokens.shape[1]} patch tokens, expected {gh}x{gw}")
        grid = tokens.transpose(1, 2).reshape(b, tokens.shape[-1], gh, gw)
        return FeatureMap(grid, p, self.spec, cls)

    def forward(self, x):
        return self.extract_feature_map(x).tokens

    def train(self, mode: bool = True):
        super().train(mode)
        if self.frozen:
            self.encoder.eval()
            for m in self.encoder.modules():
                if getattr(m, "is_adapter", False):
                    m.dropout.train(mode)
        return self


def extract_feature_map(backbone: Backbone, batch) -> FeatureMap:
    return backbone.extract_feature_map(batch)


def pooled_embedding(fm: FeatureMap, mode: str = "mean") -> torch.Tensor:
    """One vector per image: mean over the patch grid (or the CLS token)."""
    if mode == "cls":
        if fm.cls is None:
            raise ValueError("feature map carries no CLS token")
        return fm.cls
    if mode != "mean":
        raise ValueError(f"unknown pooling {mode!r}")
    return fm.tokens.mean(dim=(-2, -1))


def freeze(backbone: Backbone) -> Backbone:
    """Disable gradients for every encoder parameter and pin eval mode."""
    for p in backbone.encoder.parameters():
        p.requires_grad_(False)
    backbone.frozen = True
    backbone.encoder.eval()
    return backbone


def parameter_checksum(module: nn.Module, only_frozen: bool = False) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        if only_frozen and p.requires_grad:
            continue
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ------------------------------------------------------------ weight providers


class RandomInitProvider:
    """Seeded random weights. Used for TOY and for architecture-only work."""

    def __init__(self, seed: int = 0, zero: bool = False):
        self.seed = seed
        self.zero = zero

    def load(self, spec: BackboneSpec, device="cpu") -> nn.Module:
        model = VisionTransformer(spec)
        if self.zero:
            with torch.no_grad():
                for p in model.parameters():
                    p.zero_()
        else:
            g = torch.Generator().manual_seed(self.seed)
            model.init_weights(g)
        return model.to(device)


class LocalCheckpointProvider:
    """Load ``<cache>/<key>.pth`` (a state dict) into the in-tree ViT.

    DINOv2 checkpoints load as-is. OpenCLIP checkpoints (full model or
    ``visual.*`` state dicts) are converted on the fly.
    """

    def __init__(self, cache_dir=None):
        cache_dir = cache_dir or os.environ.get(WEIGHTS_ENV) or Path.home() / ".cache" / "emvfm"
        self.cache_dir = Path(cache_dir)

    def path_for(self, spec: BackboneSpec) -> Path:
        return self.cache_dir / f"{spec.key}.pth"

    def load(self, spec: BackboneSpec, device="cpu") -> nn.Module:
        path = self.path_for(spec)
        if not path.is_file():
            raise FileNotFoundError(f"no weights for {spec.key} at {path} (set {WEIGHTS_ENV})")
        state = torch.load(path, map_location="cpu", weights_only=True)
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]
        if spec.family is Family.OPENCLIP:
            state = convert_openclip_visual(state)
        model = VisionTransformer(spec)
        missing, unexpected = model.load_state_dict(state, strict=False)
        missing = [k for k in missing if k not in ("mask_token", "head_proj")]
        if missing or unexpected:
            raise ValueError(f"{path.name}: missing {missing[:5]} unexpected {unexpected[:5]}")
        return model.to(device)


class HubEncoder(nn.Module):
    """Adapter for torch.hub DINO models exposing ``forward_features`` dicts."""

    def __init__(self, model):
        super().__init__()
        self.model = model

    def forward_tokens(self, x):
        out = self.model.forward_features(x)
        return out["x_norm_patchtokens"], out["x_norm_clstoken"]


class TorchHubProvider:
    HUB = {
        Family.DINOV2: ("facebookresearch/dinov2", "dinov2_vit{v}14"),
        Family.DINOV3: ("facebookresearch/dinov3", "dinov3_vit{v}16"),
    }

    def load(self, spec: BackboneSpec, device="cpu") -> nn.Module:
        if spec.family not in self.HUB:
            raise RegistryError(f"no torch.hub entry for {spec.family.value}")
        repo, entry = self.HUB[spec.family]
        entry = entry.format(v=spec.variant.lower())
        try:
            model = torch.hub.load(repo, entry)
        except Exception as exc:
            raise FileNotFoundError(f"could not load {repo}:{entry} through torch.hub ({exc})") from exc
        return HubEncoder(model).to(device)


def convert_openclip_visual(state: dict) -> dict:
    """Rename an OpenCLIP visual tower state dict to the in-tree ViT naming."""
    prefix = "visual." if any(k.startswith("visual.") for k in state) else ""
    out = {}
    simple = {
        "conv1.weight": "patch_embed.proj.weight",
        "ln_pre.weight": "norm_pre.weight",
        "ln_pre.bias": "norm_pre.bias",
        "ln_post.weight": "norm.weight",
        "ln_post.bias": "norm.bias",
        "proj": "head_proj",
    }
    block_map = {
        "ln_1": "norm1",
        "ln_2": "norm2",
        "attn.in_proj_weight": "attn.qkv.weight",
        "attn.in_proj_bias": "attn.qkv.bias",
        "attn.out_proj": "attn.proj",
        "mlp.c_fc": "mlp.fc1",
        "mlp.c_proj": "mlp.fc2",
    }
    for key, value in state.items():
        if not key.startswith(prefix):
            continue
        k = key[len(prefix):]
        if k in simple:
            out[simple[k]] = value
        elif k == "class_embedding":
            out["cls_token"] = value.reshape(1, 1, -1)
        elif k == "positional_embedding":
            out["pos_embed"] = value.unsqueeze(0)
        elif k.startswith("transformer.resblocks."):
            idx, rest = k[len("transformer.resblocks."):].split(".", 1)
            for src, dst in block_map.items():
                if rest.startswith(src):
                    out[f"blocks.{idx}.{dst}{rest[len(src):]}"] = value
                    break
    return out


def build_backbone(key: str, provider=None, seed: int = 0, device="cpu", frozen: bool = True, **overrides) -> Backbone:
    """Instantiate a registered backbone.

    TOY backbones default to :class:`RandomInitProvider`, DINOv3 to
    :class:`TorchHubProvider` (its RoPE encoder is not in-tree), everything
    else to :class:`LocalCheckpointProvider`.
    """
    spec = get_spec(key, **overrides)
    if provider is None:
        if spec.family is Family.TOY:
            provider = RandomInitProvider(seed)
        elif spec.family is Family.DINOV3:
            provider = TorchHubProvider()
        else:
            provider = LocalCheckpointProvider()
    backbone = Backbone(spec, provider.load(spec, device=device))
    return freeze(backbone) if frozen else backbone


def architecture_only(key: str, **overrides) -> Backbone:
    """Weightless (meta-device) backbone, for parameter accounting of large variants."""
    spec = get_spec(key, **overrides)
    with torch.device("meta"):
        encoder = VisionTransformer(spec)
    return freeze(Backbone(spec, encoder))
