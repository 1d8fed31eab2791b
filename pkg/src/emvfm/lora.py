"""Low-rank adapters on ViT attention projections, with exact parameter accounting."""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import FrozenSet, Optional

import torch
import torch.nn as nn

from .backbones import Backbone, BackboneSpec
from .errors import ConfigError, InjectionError

REPORT_NAME = "lora_targets.json"


class Target(str, enum.Enum):
    ATTN_QKV = "ATTN_QKV"
    ATTN_PROJ = "ATTN_PROJ"


# module-name suffix each target resolves to
TARGET_SUFFIX = {Target.ATTN_QKV: "attn.qkv", Target.ATTN_PROJ: "attn.proj"}


@dataclass(frozen=True)
class AdapterConfig:
    rank: int = 16
    alpha: float = 32.0
    targets: FrozenSet[Target] = frozenset({Target.ATTN_QKV, Target.ATTN_PROJ})
    dropout: float = 0.0
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "targets", frozenset(Target(t) for t in self.targets))
        if self.rank < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {self.rank}")
        if self.alpha <= 0:
            raise ConfigError(f"LoRA alpha must be > 0, got {self.alpha}")
        if not self.targets:
            raise ConfigError("LoRA targets must be non-empty")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"LoRA dropout must be in [0, 1), got {self.dropout}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


class LoRALinear(nn.Module):
    """``y = W x + b + (alpha / r) * B (A x)`` with ``W``, ``b`` frozen.

    ``lora_A`` is ``(r, d_in)`` (down), ``lora_B`` is ``(d_out, r)`` (up,
    zero at init so the adapted map starts out equal to the frozen one).
    """

    is_adapter = True

    def __init__(self, base: nn.Linear, rank: int, alpha: float, dropout: float = 0.0,
                 init_std: float = 0.02, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        self.alpha = alpha
        dev = base.weight.device
        shape_a = (rank, base.in_features)
        if dev.type == "meta":
            a = torch.empty(shape_a, device=dev)
        else:
            a = (torch.randn(shape_a, generator=generator) * init_std).to(dev)
        self.lora_A = nn.Parameter(a)
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank, device=dev))
        self.dropout = nn.Dropout(dropout) if dropout > 0 else nn.Identity()

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def in_features(self):
        return self.base.in_features

    @property
    def out_features(self):
        return self.base.out_features

    def delta_weight(self) -> torch.Tensor:
        return self.scaling * (self.lora_B @ self.lora_A)

    def forward(self, x):
        out = self.base(x)
        return out + (self.dropout(x) @ self.lora_A.t() @ self.lora_B.t()) * self.scaling


@dataclass
class AdapterReport:
    resolved_targets: list = field(default_factory=list)
    trainable_total: int = 0
    trainable_lora: int = 0
    trainable_head: int = 0

    def __post_init__(self):
        if self.trainable_total != self.trainable_lora + self.trainable_head:
            raise ValueError("trainable_total must equal trainable_lora + trainable_head")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["resolved_targets"]), int(d["trainable_total"]),
                   int(d["trainable_lora"]), int(d["trainable_head"]))


def count_trainable(module: Optional[nn.Module]) -> int:
    if module is None:
        return 0
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def _resolve(encoder: nn.Module, cfg: AdapterConfig):
    suffixes = tuple(TARGET_SUFFIX[t] for t in cfg.targets)
    return [
        name
        for name, m in encoder.named_modules()
        if isinstance(m, nn.Linear) and (name.endswith(suffixes))
    ]


def inject(backbone: Backbone, cfg: AdapterConfig = AdapterConfig(), head: Optional[nn.Module] = None):
    """Wrap every targeted linear map in a :class:`LoRALinear`, in place.

    Returns ``(backbone, report)``. Raises :class:`InjectionError` if the
    backbone is not frozen, is already adapted, or no layer matches.
    """
    encoder = backbone.encoder
    if any(getattr(m, "is_adapter", False) for m in encoder.modules()):
        raise InjectionError("backbone already carries LoRA adapters")
    if not backbone.frozen or count_trainable(backbone) != 0:
        raise InjectionError("backbone must be frozen (no trainable parameters) before LoRA injection")
    names = _resolve(encoder, cfg)
    if not names:
        wanted = ", ".join(sorted(TARGET_SUFFIX[t] for t in cfg.targets))
        raise InjectionError(f"LoRA target pattern ({wanted}) matched zero layers in {backbone.spec.key or 'backbone'}")
    gen = torch.Generator().manual_seed(cfg.seed)
    for name in names:
        parent_name, _, child = name.rpartition(".")
        parent = encoder.get_submodule(parent_name) if parent_name else encoder
        base = getattr(parent, child)
        setattr(parent, child, LoRALinear(base, cfg.rank, cfg.alpha, cfg.dropout, cfg.init_std, gen))
    backbone.adapter_config = cfg
    backbone.train(backbone.training)
    return backbone, make_report(backbone, head)


def make_report(backbone: Backbone, head: Optional[nn.Module] = None) -> AdapterReport:
    """Brute-force report: counts every registered tensor with ``requires_grad``."""
    targets = [name for name, m in backbone.encoder.named_modules() if getattr(m, "is_adapter", False)]
    n_lora = count_trainable(backbone)
    n_head = count_trainable(head)
    return AdapterReport(targets, n_lora + n_head, n_lora, n_head)


def expected_lora_params(spec: BackboneSpec, cfg: AdapterConfig = AdapterConfig()) -> int:
    """Closed form ``sum r * (d_in + d_out)`` over resolved targets (fused qkv)."""
    d = spec.width
    per_block = 0
    if Target.ATTN_QKV in cfg.targets:
        per_block += cfg.rank * (d + 3 * d)
    if Target.ATTN_PROJ in cfg.targets:
        per_block += cfg.rank * (d + d)
    return per_block * spec.num_blocks


def write_report(report: AdapterReport, path) -> Path:
    path = Path(path)
    if path.is_dir():
        path = path / REPORT_NAME
    path.write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    return path


def read_report(path) -> AdapterReport:
    path = Path(path)
    if path.is_dir():
        path = path / REPORT_NAME
    return AdapterReport.from_dict(json.loads(path.read_text(encoding="utf-8")))


def lora_state_dict(backbone: Backbone) -> dict:
    return {k: v.detach().clone() for k, v in backbone.encoder.state_dict().items() if ".lora_" in k}


def load_lora_state(backbone: Backbone, state: dict):
    own = backbone.encoder.state_dict()
    missing = [k for k in own if ".lora_" in k and k not in state]
    if missing:
        raise InjectionError(f"checkpoint lacks LoRA tensors, e.g. {missing[0]}")
    backbone.encoder.load_state_dict(state, strict=False)
