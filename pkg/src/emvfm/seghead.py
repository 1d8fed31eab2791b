"""Convolutional decoder from the patch-token grid to two-class pixel logits."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbones import FeatureMap
from .errors import ConfigError, FingerprintMismatch


@dataclass(frozen=True)
class HeadConfig:
    in_channels: int
    patch_size: int
    hidden_channels: int = 512
    refine_channels: int = 32
    num_classes: int = 2
    zero_init_classifier: bool = False

    def __post_init__(self):
        if self.num_classes != 2:
            raise ConfigError("the head is binary: num_classes must be 2")
        if self.hidden_channels < 2 or self.hidden_channels % 2:
            raise ConfigError("hidden_channels must be an even integer >= 2")


def _conv_bn_relu(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class SegHead(nn.Module):
    """1x1 projection, two 3x3 conv-BN-ReLU blocks on the grid, bilinear x P
    upsampling, a 3x3 refinement conv and a 1x1 classifier.

    Parameter count is ``hidden * D + const(hidden, refine)``, so heads for
    backbones with equal ``D`` are identical in size.
    """

    def __init__(self, cfg: HeadConfig):
        super().__init__()
        self.cfg = cfg
        h = cfg.hidden_channels
        self.input_proj = nn.Conv2d(cfg.in_channels, h, 1)
        self.block1 = _conv_bn_relu(h, h)
        self.block2 = _conv_bn_relu(h, h // 2)
        self.refine = nn.Sequential(nn.Conv2d(h // 2, cfg.refine_channels, 3, padding=1), nn.ReLU(inplace=True))
        self.classifier = nn.Conv2d(cfg.refine_channels, cfg.num_classes, 1)
        if cfg.zero_init_classifier:
            nn.init.zeros_(self.classifier.weight)
            nn.init.zeros_(self.classifier.bias)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.dim() != 4 or tokens.shape[1] != self.cfg.in_channels:
            raise ConfigError(
                f"feature map has {tokens.shape[1] if tokens.dim() == 4 else '?'} channels, "
                f"head expects {self.cfg.in_channels}"
            )
        p = self.cfg.patch_size
        # channels-last is markedly faster for these convs on CPU
        x = tokens.contiguous(memory_format=torch.channels_last)
        x = self.block2(self.block1(self.input_proj(x)))
        x = F.interpolate(x, scale_factor=p, mode="bilinear", align_corners=False)
        return self.classifier(self.refine(x))


def decode(fm: FeatureMap, head: SegHead) -> torch.Tensor:
    if fm.patch_size != head.cfg.patch_size:
        raise ConfigError(f"feature map patch size {fm.patch_size} != head patch size {head.cfg.patch_size}")
    return head(fm.tokens)


def predict(logits: torch.Tensor) -> torch.Tensor:
    """Per-pixel argmax over two classes; ties go to background (class 0)."""
    if logits.dim() != 4 or logits.shape[1] != 2:
        raise ConfigError(f"expected (B, 2, H, W) logits, got {tuple(logits.shape)}")
    return (logits[:, 1] > logits[:, 0]).to(torch.uint8)


class Segmenter(nn.Module):
    def __init__(self, backbone, head: SegHead):
        super().__init__()
        self.backbone = backbone
        self.head = head

    def forward(self, x):
        return self.head(self.backbone(x))


def head_for(backbone, **kw) -> SegHead:
    return SegHead(HeadConfig(backbone.spec.embed_dim, backbone.spec.patch_size, **kw))


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, head: SegHead, fingerprint: str, backbone_key: str,
                    lora_state: Optional[dict] = None, adapter_config: Optional[dict] = None, **extra):
    payload = {
        "fingerprint": fingerprint,
        "backbone": backbone_key,
        "head_config": asdict(head.cfg),
        "head": {k: v.detach().cpu().clone() for k, v in head.state_dict().items()},
        "lora": lora_state,
        "adapter_config": adapter_config,
        **extra,
    }
    path = Path(path)
    torch.save(payload, path)
    return path


def load_checkpoint(path, expected_fingerprint: Optional[str] = None) -> dict:
    ckpt = torch.load(Path(path), map_location="cpu", weights_only=False)
    if expected_fingerprint is not None and ckpt.get("fingerprint") != expected_fingerprint:
        raise FingerprintMismatch(
            f"checkpoint {path} was trained under config fingerprint {ckpt.get('fingerprint')}, "
            f"but the supplied config has fingerprint {expected_fingerprint}; "
            "evaluate with the config the checkpoint was trained with"
        )
    return ckpt


def head_from_checkpoint(ckpt: dict) -> SegHead:
    head = SegHead(HeadConfig(**ckpt["head_config"]))
    head.load_state_dict(ckpt["head"])
    return head.eval()
