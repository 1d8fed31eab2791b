"""Training protocol shared by every backbone and adaptation regime."""

from __future__ import annotations

import copy
import enum
import json
import logging
import math
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import lora as lora_mod
from .backbones import Backbone, parameter_checksum
from .datasets import ModelInput, ResizePolicy, Sample, prediction_to_native, to_model_input
from .errors import ConfigError, DataError, NumericalAbort
from .metrics import MetricAccumulator
from .seghead import Segmenter, head_for, predict, save_checkpoint

log = logging.getLogger(__name__)


class Regime(str, enum.Enum):
    SINGLE = "SINGLE"
    PAIRED = "PAIRED"


class Sampling(str, enum.Enum):
    UNBALANCED = "UNBALANCED"
    BALANCED_1P1 = "BALANCED_1P1"


class Adapt(str, enum.Enum):
    HEAD_ONLY = "HEAD_ONLY"
    LORA = "LORA"


@dataclass
class TrainConfig:
    max_epochs: int = 1000
    patience: int = 20
    learning_rate: float = 5e-5
    weight_decay: float = 1e-4
    batch_size: int = 2
    loss: str = "DICE"
    seed: int = 0
    regime: Regime = Regime.SINGLE
    sampling: Sampling = Sampling.UNBALANCED
    adapt: Adapt = Adapt.HEAD_ONLY
    cache_features: bool = True
    device: str = "cpu"

    def __post_init__(self):
        self.regime = Regime(self.regime)
        self.sampling = Sampling(self.sampling)
        self.adapt = Adapt(self.adapt)
        if self.loss != "DICE":
            raise ConfigError(f"unsupported loss {self.loss!r}")
        if self.max_epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ConfigError("max_epochs, patience and batch_size must be positive")
        if self.sampling is Sampling.BALANCED_1P1:
            if self.batch_size != 2:
                raise ConfigError("BALANCED_1P1 sampling requires batch_size=2")
            if self.regime is not Regime.PAIRED:
                raise ConfigError("BALANCED_1P1 sampling only applies to the paired regime")


@dataclass
class RunRecord:
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    steps_per_epoch: int = 0
    checkpoint_path: Optional[str] = None
    adapter_report: Optional[dict] = None
    fingerprint: str = ""
    seed: int = 0
    frozen_checksum: str = ""

    def to_dict(self):
        return asdict(self)


# ------------------------------------------------------------------- loss


def dice_loss(logits: torch.Tensor, target: torch.Tensor, smooth: float = 1e-5) -> torch.Tensor:
    """Soft Dice on the foreground softmax channel, averaged over the batch."""
    if logits.dim() != 4 or logits.shape[1] != 2:
        raise ValueError(f"expected (B, 2, H, W) logits, got {tuple(logits.shape)}")
    if target.shape != (logits.shape[0], *logits.shape[2:]):
        raise ValueError(f"target {tuple(target.shape)} does not match logits {tuple(logits.shape)}")
    p = torch.softmax(logits, dim=1)[:, 1].flatten(1)
    g = target.to(p.dtype).flatten(1)
    inter = (p * g).sum(1)
    denom = p.sum(1) + g.sum(1)
    return (1.0 - (2.0 * inter + smooth) / (denom + smooth)).mean()


# ---------------------------------------------------------- early stopping


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without a strictly lower loss.

    Epochs are counted from 1.
    """

    def __init__(self, patience: int = 20):
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0
        self.epoch = 0

    def step(self, val_loss: float) -> bool:
        """Record one epoch. Returns True when training should stop."""
        self.epoch += 1
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = self.epoch
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    @property
    def improved(self) -> bool:
        return self.best_epoch == self.epoch


def simulate_early_stopping(val_losses, patience: int = 20, max_epochs: Optional[int] = None):
    """Replay a validation-loss trace; returns ``(best_epoch, stopped_epoch)``."""
    stopper = EarlyStopping(patience)
    for i, loss in enumerate(val_losses, start=1):
        if stopper.step(loss) or (max_epochs is not None and i >= max_epochs):
            return stopper.best_epoch, i
    return stopper.best_epoch, stopper.epoch


def steps_per_epoch(n_train: int, batch_size: int = 2) -> int:
    return math.ceil(n_train / batch_size)


# ----------------------------------------------------------------- batches


def make_batches(sizes_or_lists, sampling: Sampling = Sampling.UNBALANCED, rng=None, batch_size: int = 2):
    """One epoch of batches as lists of ``(dataset_index, item_index)``.

    UNBALANCED concatenates every dataset, shuffles, and chunks into
    ``batch_size``. BALANCED_1P1 puts exactly one sample of each dataset in
    every batch; the epoch has as many batches as the largest dataset has
    samples, which are each visited once, while smaller datasets are drawn
    with replacement.
    """
    sizes = [s if isinstance(s, int) else len(s) for s in sizes_or_lists]
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    sampling = Sampling(sampling)
    if sampling is Sampling.UNBALANCED:
        pool = [(d, i) for d, n in enumerate(sizes) for i in range(n)]
        order = rng.permutation(len(pool))
        flat = [pool[k] for k in order]
        return [flat[i:i + batch_size] for i in range(0, len(flat), batch_size)]

    if len(sizes) < 2:
        raise ConfigError("BALANCED_1P1 sampling needs at least two datasets")
    if min(sizes) < 1:
        raise DataError("BALANCED_1P1 sampling got an empty dataset")
    length = max(sizes)
    columns = []
    for n in sizes:
        columns.append(rng.permutation(n) if n == length else rng.integers(0, n, size=length))
    return [[(d, int(columns[d][k])) for d in range(len(sizes))] for k in range(length)]


# -------------------------------------------------------------- training


@dataclass
class TrainResult:
    record: RunRecord
    model: Segmenter
    report: lora_mod.AdapterReport


def _prepare(sets, patch_size, policy, regime):
    pol = policy if regime is Regime.PAIRED else None
    if regime is Regime.PAIRED and pol is None:
        pol = ResizePolicy(patch_size)
    return [[to_model_input(s, patch_size, pol, d) for s in samples] for d, samples in enumerate(sets)]


def _group(items: Sequence[ModelInput]):
    groups = defaultdict(list)
    for it in items:
        groups[(it.shape, it.valid)].append(it)
    return list(groups.values())


def _forward(model: Segmenter, items, device, use_cache):
    if use_cache and "tokens" in items[0].extra:
        tokens = torch.stack([it.extra["tokens"] for it in items]).to(device)
        logits = model.head(tokens)
    else:
        x = torch.stack([it.image for it in items]).to(device)
        logits = model(x)
    h, w = items[0].valid
    return logits[..., :h, :w]


def _batch_loss(model, items, device, use_cache):
    total = 0.0
    n = len(items)
    for group in _group(items):
        logits = _forward(model, group, device, use_cache)
        target = torch.stack([it.target for it in group]).to(device)
        total = total + dice_loss(logits, target) * (len(group) / n)
    return total


@torch.no_grad()
def _cache_tokens(backbone: Backbone, sets, device):
    backbone.eval()
    for items in sets:
        for it in items:
            it.extra["tokens"] = backbone(it.image[None].to(device))[0].cpu()


def _snapshot(model: Segmenter, adapt: Adapt):
    state = {"head": copy.deepcopy(model.head.state_dict())}
    if adapt is Adapt.LORA:
        state["lora"] = lora_mod.lora_state_dict(model.backbone)
    return state


def _restore(model: Segmenter, state):
    model.head.load_state_dict(state["head"])
    if "lora" in state:
        lora_mod.load_lora_state(model.backbone, state["lora"])


@torch.no_grad()
def validation_loss(model: Segmenter, items, device="cpu", use_cache=False) -> float:
    model.eval()
    losses = [float(dice_loss(_forward(model, [it], device, use_cache), it.target[None].to(device))) for it in items]
    return float(np.mean(losses))


def train(train_sets: Sequence[Sequence[Sample]], val_sets: Sequence[Sequence[Sample]], backbone: Backbone,
          cfg: TrainConfig, adapter_cfg: Optional[lora_mod.AdapterConfig] = None, head_kw: Optional[dict] = None,
          resize_policy: Optional[ResizePolicy] = None, run_dir=None, fingerprint: str = "") -> TrainResult:
    """Fit a head (plus LoRA adapters for ``Adapt.LORA``) with early stopping.

    ``train_sets`` / ``val_sets`` hold one sample list per dataset (one for
    SINGLE, two for PAIRED). The model returned carries the weights of the
    epoch with the lowest validation loss.
    """
    if cfg.regime is Regime.SINGLE and len(train_sets) != 1:
        raise ConfigError("SINGLE regime takes exactly one dataset")
    if cfg.regime is Regime.PAIRED and len(train_sets) != 2:
        raise ConfigError("PAIRED regime takes exactly two datasets")
    if any(len(s) == 0 for s in train_sets) or sum(len(s) for s in train_sets) == 0:
        raise DataError("empty training set")
    if sum(len(s) for s in val_sets) == 0:
        raise DataError("empty validation set")
    for samples in list(train_sets) + list(val_sets):
        if any(s.mask is None for s in samples):
            raise DataError("training and validation samples need masks")

    device = torch.device(cfg.device)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)

    backbone = backbone.to(device)
    if cfg.adapt is Adapt.LORA:
        acfg = adapter_cfg or lora_mod.AdapterConfig()
        acfg = lora_mod.AdapterConfig(acfg.rank, acfg.alpha, acfg.targets, acfg.dropout, acfg.init_std, cfg.seed)
        lora_mod.inject(backbone, acfg)
        backbone.to(device)
    elif lora_mod.count_trainable(backbone):
        raise ConfigError("HEAD_ONLY training needs a frozen backbone")
    head = head_for(backbone, **(head_kw or {})).to(device)
    model = Segmenter(backbone, head)
    report = lora_mod.make_report(backbone, head)
    frozen_sum = parameter_checksum(backbone, only_frozen=True)

    p = backbone.patch_size
    train_items = _prepare(train_sets, p, resize_policy, cfg.regime)
    val_items = [it for items in _prepare(val_sets, p, resize_policy, cfg.regime) for it in items]
    use_cache = cfg.adapt is Adapt.HEAD_ONLY and cfg.cache_features
    if use_cache:
        _cache_tokens(backbone, train_items + [val_items], device)

    params = [q for q in model.parameters() if q.requires_grad]
    optim = torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    stopper = EarlyStopping(cfg.patience)
    record = RunRecord(fingerprint=fingerprint, seed=cfg.seed, adapter_report=report.to_dict(),
                       frozen_checksum=frozen_sum)
    best_state = None
    log_file = open(run_dir / "epochs.jsonl", "a", encoding="utf-8") if run_dir is not None else None
    ckpt_path = run_dir / "best.pt" if run_dir is not None else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            t0 = time.perf_counter()
            model.train()
            batches = make_batches(train_items, cfg.sampling, rng, cfg.batch_size)
            record.steps_per_epoch = len(batches)
            epoch_losses = []
            for batch in batches:
                items = [train_items[d][i] for d, i in batch]
                loss = _batch_loss(model, items, device, use_cache)
                if not torch.isfinite(loss):
                    raise NumericalAbort(f"non-finite training loss at epoch {epoch}: {loss.item()}")
                optim.zero_grad(set_to_none=True)
                loss.backward()
                optim.step()
                epoch_losses.append(loss.item())
            train_loss = float(np.mean(epoch_losses))
            val_loss = validation_loss(model, val_items, device, use_cache)
            if not math.isfinite(val_loss):
                raise NumericalAbort(f"non-finite validation loss at epoch {epoch}")
            record.train_losses.append(train_loss)
            record.val_losses.append(val_loss)
            stop = stopper.step(val_loss)
            if stopper.improved:
                best_state = _snapshot(model, cfg.adapt)
                if ckpt_path is not None:
                    _write_checkpoint(ckpt_path, model, cfg, fingerprint, epoch)
            if log_file is not None:
                log_file.write(json.dumps({
                    "epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                    "best_epoch": stopper.best_epoch, "seconds": round(time.perf_counter() - t0, 3),
                }) + "\n")
                log_file.flush()
            log.debug("epoch %d train %.4f val %.4f", epoch, train_loss, val_loss)
            if stop:
                break
    finally:
        if log_file is not None:
            log_file.close()

    record.best_epoch = stopper.best_epoch
    record.stopped_epoch = stopper.epoch
    record.checkpoint_path = str(ckpt_path) if ckpt_path is not None else None
    _restore(model, best_state)
    model.eval()
    if run_dir is not None:
        lora_mod.write_report(report, run_dir)
        (run_dir / "run_record.json").write_text(json.dumps(record.to_dict(), indent=2) + "\n", encoding="utf-8")
    return TrainResult(record, model, report)


def _write_checkpoint(path, model: Segmenter, cfg: TrainConfig, fingerprint, epoch):
    bb = model.backbone
    lora_state = lora_mod.lora_state_dict(bb) if cfg.adapt is Adapt.LORA else None
    acfg = getattr(bb, "adapter_config", None)
    acfg_dict = None
    if acfg is not None and cfg.adapt is Adapt.LORA:
        acfg_dict = {**asdict(acfg), "targets": sorted(t.value for t in acfg.targets)}
    save_checkpoint(path, model.head, fingerprint, bb.spec.key, lora_state, acfg_dict,
                    epoch=epoch, regime=cfg.regime.value)


# ------------------------------------------------------------- evaluation


@torch.no_grad()
def evaluate(model: Segmenter, samples: Sequence[Sample], resize_policy: Optional[ResizePolicy] = None,
             device="cpu", dataset_id=None) -> MetricAccumulator:
    """Dataset-level IoU accumulator at native ground-truth resolution."""
    model.eval()
    acc = MetricAccumulator(dataset_id=dataset_id)
    p = model.backbone.patch_size
    for s in samples:
        if s.mask is None:
            raise DataError(f"{s.name or s.slice_index}: cannot evaluate an unlabelled slice")
        item = to_model_input(s, p, resize_policy)
        logits = model(item.image[None].to(device))
        pred = predict(logits)[0].cpu().numpy()
        acc.update(prediction_to_native(pred, item), item.native_mask)
    return acc
