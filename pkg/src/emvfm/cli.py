"""Command-line entry point: ``emvfm <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data/IO error,
4 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, kernels
from . import lora as lora_mod
from .backbones import build_backbone, get_spec
from .config import ExperimentConfig, load_config, schema_doc
from .datasets import DatasetSpec, Layout, ResizePolicy, SplitConfig, load_dataset, make_split
from .diagnostics import EmbeddingMatrix, extract_embeddings, load_embeddings, mismatch_report, save_embeddings
from .errors import ConfigError, DataError, EmvfmError
from .metrics import format_mean_std, macro_average, mean_std, write_metrics
from .seghead import Segmenter, head_from_checkpoint, load_checkpoint
from .trainer import Adapt, Regime, Sampling, TrainConfig, evaluate, train

log = logging.getLogger("emvfm")

# backbone weights are a property of the model, not of the run seed
BACKBONE_SEED = 0


# ------------------------------------------------------------------ helpers


def dataset_spec(cfg: ExperimentConfig, name: str) -> DatasetSpec:
    d = cfg.dataset(name)
    layout = Layout.LUCCHI_SPLIT_DIRS if d["layout"] == "lucchi" else Layout.VNC_STACKS
    ds_id = d["id"].upper() if d["id"] else None
    return DatasetSpec(d["root"], layout, d["train_count"], d["test_count"], ds_id)


def load_split(cfg: ExperimentConfig, name: str, split: str):
    return load_dataset(dataset_spec(cfg, name), split, cfg.dataset(name)["binarize_threshold"])


def resize_policy(cfg: ExperimentConfig, patch_size: int) -> Optional[ResizePolicy]:
    if cfg["regime"] != "paired":
        return None
    return ResizePolicy(patch_size, cfg["resize.target_longest_edge"])


def train_config(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    return TrainConfig(
        max_epochs=cfg["train.max_epochs"],
        patience=cfg["train.patience"],
        learning_rate=cfg["train.learning_rate"],
        weight_decay=cfg["train.weight_decay"],
        batch_size=cfg["train.batch_size"],
        seed=seed,
        regime=Regime.PAIRED if cfg["regime"] == "paired" else Regime.SINGLE,
        sampling=Sampling.BALANCED_1P1 if cfg["sampling"] == "balanced" else Sampling.UNBALANCED,
        adapt=Adapt.LORA if cfg["adapt"] == "lora" else Adapt.HEAD_ONLY,
        cache_features=cfg["train.cache_features"],
        device=cfg["train.device"],
    )


def adapter_config(cfg: ExperimentConfig) -> lora_mod.AdapterConfig:
    names = {"qkv": lora_mod.Target.ATTN_QKV, "proj": lora_mod.Target.ATTN_PROJ}
    return lora_mod.AdapterConfig(
        rank=cfg["lora.rank"], alpha=cfg["lora.alpha"],
        targets=frozenset(names[t] for t in cfg["lora.targets"]), dropout=cfg["lora.dropout"],
    )


def head_kwargs(cfg: ExperimentConfig) -> dict:
    return {"hidden_channels": cfg["head.hidden_channels"], "refine_channels": cfg["head.refine_channels"]}


def _backbone(key, device="cpu"):
    try:
        return build_backbone(key, seed=BACKBONE_SEED, device=device)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None


def manifest(cfg: ExperimentConfig, seed: int, **extra) -> dict:
    spec = get_spec(cfg["backbone"])
    return {
        "emvfm_version": __version__,
        "fingerprint": cfg.fingerprint,
        "seed": seed,
        "backbone": spec.key,
        "patch_size": spec.patch_size,
        "embed_dim": spec.embed_dim,
        "token_layer": spec.token_layer,
        "kernel_backend": kernels.BACKEND,
        **extra,
    }


def _write_json(path: Path, payload) -> Path:
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return path


def _invocation_dir(cfg: ExperimentConfig, out: Path) -> Path:
    base = out / cfg.fingerprint
    stamp = time.strftime("%Y%m%d-%H%M%S")
    for i in range(1000):
        d = base / (f"{stamp}" if i == 0 else f"{stamp}-{i}")
        if not d.exists():
            d.mkdir(parents=True)
            return d
    raise DataError(f"could not allocate a run directory under {base}")


def model_from_checkpoint(ckpt: dict, device="cpu") -> Segmenter:
    backbone = _backbone(ckpt["backbone"], device)
    if ckpt.get("lora"):
        acfg = dict(ckpt["adapter_config"])
        acfg["targets"] = frozenset(lora_mod.Target(t) for t in acfg["targets"])
        lora_mod.inject(backbone, lora_mod.AdapterConfig(**acfg))
        lora_mod.load_lora_state(backbone, ckpt["lora"])
    model = Segmenter(backbone, head_from_checkpoint(ckpt)).to(device)
    return model.eval()


# --------------------------------------------------------------- experiments


def run_experiment(cfg: ExperimentConfig, out: Optional[Path] = None) -> dict:
    """Train and evaluate ``num_runs`` seeded runs; return the summary."""
    out = Path(out or cfg["out"])
    inv = _invocation_dir(cfg, out)
    names = cfg["datasets"]
    train_data = {n: load_split(cfg, n, "train") for n in names}
    test_data = {n: load_split(cfg, n, "test") for n in names}
    spec = get_spec(cfg["backbone"])
    policy = resize_policy(cfg, spec.patch_size)

    runs = []
    for k in range(cfg["num_runs"]):
        seed = cfg["train.seed"] + k
        run_dir = inv / f"run_{k}"
        run_dir.mkdir()
        (run_dir / "config.yaml").write_text(cfg.to_yaml(), encoding="utf-8")
        splits = {n: make_split(train_data[n], SplitConfig(cfg["train.validation_fraction"], seed)) for n in names}
        backbone = _backbone(cfg["backbone"], cfg["train.device"])
        result = train(
            [splits[n][0] for n in names], [splits[n][1] for n in names], backbone,
            train_config(cfg, seed), adapter_config(cfg), head_kwargs(cfg), policy, run_dir, cfg.fingerprint,
        )
        scores = {
            n: evaluate(result.model, test_data[n], policy, cfg["train.device"]).finalize() for n in names
        }
        write_metrics(run_dir, scores, cfg.fingerprint, seed)
        _write_json(run_dir / "manifest.json", manifest(
            cfg, seed, best_epoch=result.record.best_epoch, stopped_epoch=result.record.stopped_epoch,
            n_train={n: len(splits[n][0]) for n in names}, n_val={n: len(splits[n][1]) for n in names},
            n_test={n: len(test_data[n]) for n in names},
        ))
        log.info("run %d (seed %d): %s", k, seed, {n: round(v, 4) for n, v in scores.items()})
        runs.append({"seed": seed, "dir": str(run_dir), "iou_fg": scores, "macro_iou_fg": macro_average(scores)})

    summary = summarize(cfg, runs)
    _write_json(inv / "summary.json", summary)
    write_summary_csv(inv / "summary.csv", summary)
    summary["dir"] = str(inv)
    return summary


def summarize(cfg: ExperimentConfig, runs: list) -> dict:
    names = cfg["datasets"]
    agg = {}
    for n in names:
        m, s = mean_std(r["iou_fg"][n] for r in runs)
        agg[n] = {"mean": m, "std": s, "formatted": format_mean_std(r["iou_fg"][n] for r in runs)}
    m, s = mean_std(r["macro_iou_fg"] for r in runs)
    agg["macro"] = {"mean": m, "std": s, "formatted": format_mean_std(r["macro_iou_fg"] for r in runs)}
    return {
        "fingerprint": cfg.fingerprint,
        "backbone": cfg["backbone"],
        "adapt": cfg["adapt"],
        "regime": cfg["regime"],
        "sampling": cfg["sampling"],
        "datasets": names,
        "num_runs": len(runs),
        "iou_fg": agg,
        "runs": runs,
    }


def write_summary_csv(path: Path, summary: dict) -> Path:
    cols = ["backbone", "adapt", "regime", "sampling", "num_runs", "fingerprint"]
    keys = list(summary["datasets"]) + ["macro"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols + [f"iou_fg_{k}" for k in keys])
        w.writerow([summary[c] for c in cols] + [summary["iou_fg"][k]["formatted"] for k in keys])
    return path


def diagnostic_sources(cfg: ExperimentConfig) -> list:
    sources = cfg["diagnostics.sources"] or [f"{n}:test" for n in cfg["datasets"]]
    parsed = []
    for src in sources:
        name, _, split = src.partition(":")
        if name not in cfg["datasets"]:
            raise ConfigError(f"config key 'diagnostics.sources': unknown dataset {name!r}")
        parsed.append((name, split or "test"))
    if len(parsed) != 2:
        raise ConfigError(f"config key 'diagnostics.sources': need exactly two domains, got {len(parsed)}")
    return parsed


def embed_domains(cfg: ExperimentConfig, backbone, source: str) -> EmbeddingMatrix:
    blocks, ids = {}, {}
    for name, split in diagnostic_sources(cfg):
        samples = load_split(cfg, name, split)
        domain = f"{name}_{split}"
        blocks[domain] = extract_embeddings(
            backbone, samples, cfg["diagnostics.pooling"], cfg["resize.target_longest_edge"], cfg["train.device"]
        )
        ids[domain] = [s.name or str(s.slice_index) for s in samples]
    return EmbeddingMatrix.from_domains(blocks, source, ids)


def extract_all(cfg: ExperimentConfig, checkpoint: Optional[Path], out: Path) -> dict:
    out = Path(out)
    written = {}
    frozen = embed_domains(cfg, _backbone(cfg["backbone"], cfg["train.device"]), "frozen")
    save_embeddings(frozen, out / "frozen", cfg.fingerprint)
    written["frozen"] = frozen
    if checkpoint is not None:
        checkpoint = Path(checkpoint)
        if not checkpoint.is_file():
            raise DataError(
                f"checkpoint not found: {checkpoint}. Train a LoRA run first "
                "(emvfm train --adapt lora) or omit --checkpoint for frozen-only diagnostics"
            )
        ckpt = load_checkpoint(checkpoint)
        if ckpt["backbone"] != cfg["backbone"]:
            raise ConfigError(f"checkpoint backbone {ckpt['backbone']!r} != config backbone {cfg['backbone']!r}")
        model = model_from_checkpoint(ckpt, cfg["train.device"])
        adapted = embed_domains(cfg, model.backbone, "adapted" if ckpt.get("lora") else "head_only")
        save_embeddings(adapted, out / "adapted", cfg.fingerprint)
        written["adapted"] = adapted
    return written


def diagnose(cfg: ExperimentConfig, checkpoint: Optional[Path], out: Path) -> dict:
    emb = extract_all(cfg, checkpoint, Path(out) / "embeddings")
    probe_kw = {
        "validation_fraction": cfg["diagnostics.probe_validation_fraction"],
        "seed": cfg["diagnostics.seed"], "C": cfg["diagnostics.probe_C"],
    }
    report = mismatch_report(emb["frozen"], emb.get("adapted"), out, probe_kw)
    if checkpoint is None:
        log.info("no checkpoint given: frozen-only diagnostics")
    return report


def build_report(summaries: list, literature: Optional[Path], out: Path, metric: str = "macro") -> list:
    """Merge run summaries with literature baselines into report.csv / report.png."""
    rows = []
    for path in summaries:
        path = Path(path)
        if path.is_dir():
            path = path / "summary.json"
        if not path.is_file():
            raise DataError(f"summary not found: {path}")
        s = json.loads(path.read_text(encoding="utf-8"))
        key = metric if metric in s["iou_fg"] else "macro"
        rows.append({
            "method": f"{s['backbone']} {s['adapt']}" + (f" {s['regime']}/{s['sampling']}" if s["regime"] == "paired" else ""),
            "group": s["adapt"], "source": "framework",
            "iou_fg_mean": s["iou_fg"][key]["mean"], "iou_fg_std": s["iou_fg"][key]["std"],
        })
    if literature is not None:
        try:
            with open(literature, newline="", encoding="utf-8") as fh:
                for rec in csv.DictReader(fh):
                    rows.append({
                        "method": rec["method"], "group": rec.get("group") or "literature", "source": "literature",
                        "iou_fg_mean": float(rec["iou_fg"]),
                        "iou_fg_std": float(rec["iou_fg_std"]) if rec.get("iou_fg_std") else None,
                    })
        except FileNotFoundError:
            raise DataError(f"literature file not found: {literature}") from None
        except (KeyError, ValueError) as exc:
            raise DataError(f"{literature}: expected columns method,iou_fg[,group,iou_fg_std] ({exc})") from None
    if not rows:
        raise DataError("nothing to report: pass run summaries and/or --literature")

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["method", "group", "source", "iou_fg_mean", "iou_fg_std"])
        w.writeheader()
        w.writerows(rows)
    report_figure(rows, out / "report.png")
    return rows


def report_figure(rows: list, path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    groups = list(dict.fromkeys(r["group"] for r in rows))
    colours = {g: plt.cm.tab10(i % 10) for i, g in enumerate(groups)}
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(rows) + 1.5), 4.0))
    x = np.arange(len(rows))
    ax.bar(
        x, [r["iou_fg_mean"] for r in rows],
        yerr=[r["iou_fg_std"] or 0.0 for r in rows], capsize=3,
        color=[colours[r["group"]] for r in rows],
    )
    ax.set_xticks(x, [r["method"] for r in rows], rotation=35, ha="right", fontsize=8)
    ax.set_ylabel("foreground IoU")
    ax.set_ylim(0, 1)
    handles = [plt.Rectangle((0, 0), 1, 1, color=colours[g]) for g in groups]
    ax.legend(handles, groups, fontsize=8, loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


# ------------------------------------------------------------- subcommands


def _config_from_args(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required")
    cfg = load_config(args.config)
    overrides = {
        "train.seed": getattr(args, "seed", None),
        "num_runs": getattr(args, "runs", None),
        "out": getattr(args, "out", None),
        "backbone": getattr(args, "backbone", None),
        "adapt": getattr(args, "adapt", None),
        "regime": getattr(args, "regime", None),
        "sampling": getattr(args, "sampling", None),
    }
    if any(v is not None for v in overrides.values()):
        cfg = cfg.with_overrides(**overrides)
    get_spec(cfg["backbone"])
    return cfg


def cmd_prepare_data(args) -> int:
    if args.synthetic:
        from .synthetic import write_synthetic_dataset

        root = Path(args.synthetic)
        size = (args.size, args.size)
        write_synthetic_dataset(root / "domain_a", args.n_train, args.n_test, 0, size, args.cell, "a")
        write_synthetic_dataset(root / "domain_b", args.n_train, args.n_test, 1, size, args.cell, "b")
        toy = {
            "backbone": "toy-s14" if args.cell == 14 else "toy-s16",
            "adapt": "head",
            "regime": "single",
            "datasets": ["domain_a"],
            "data.domain_a.root": "domain_a",
            "data.domain_a.train_count": args.n_train,
            "data.domain_a.test_count": args.n_test,
            "data.domain_b.root": "domain_b",
            "data.domain_b.train_count": args.n_train,
            "data.domain_b.test_count": args.n_test,
            "head.hidden_channels": 64,
            "head.refine_channels": 16,
            "train.max_epochs": 30,
            "train.patience": 10,
            "train.learning_rate": 1e-3,
            "num_runs": 2,
        }
        # domain_b is only referenced by the paired/diagnostic variants
        paired = dict(toy, regime="paired", datasets=["domain_a", "domain_b"])
        import yaml

        single = {k: v for k, v in toy.items() if not k.startswith("data.domain_b")}
        (root / "toy.yaml").write_text(yaml.safe_dump(single, sort_keys=False), encoding="utf-8")
        (root / "toy_paired.yaml").write_text(yaml.safe_dump(paired, sort_keys=False), encoding="utf-8")
        print(f"wrote synthetic domains and configs to {root} (toy.yaml, toy_paired.yaml)")
        return 0

    cfg = _config_from_args(args)
    summary = {}
    for name in cfg["datasets"]:
        layout = cfg.dataset(name)["layout"]
        splits = ("train", "test", "unlabelled") if layout == "vnc" else ("train", "test")
        entry = {}
        for split in splits:
            if split == "unlabelled" and not (Path(cfg.dataset(name)["root"]) / "stack2").is_dir():
                continue
            samples = load_split(cfg, name, split)
            sizes = sorted({s.size for s in samples})
            fg = [float(s.mask.mean()) for s in samples if s.mask is not None]
            entry[split] = {"count": len(samples), "sizes": [list(z) for z in sizes],
                            "foreground_fraction": float(np.mean(fg)) if fg else None}
            print(f"{name:>12s} {split:<10s} {len(samples):4d} slices  sizes {sizes}")
        summary[name] = entry
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "prepare_summary.json", {"fingerprint": cfg.fingerprint, "datasets": summary})
    return 0


def cmd_train(args) -> int:
    if args.help_config:
        print(schema_doc())
        return 0
    cfg = _config_from_args(args)
    summary = run_experiment(cfg)
    for key, agg in summary["iou_fg"].items():
        print(f"{key:>12s} IoU_fg {agg['formatted']}  (n={summary['num_runs']})")
    print(f"results in {summary['dir']}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config_from_args(args)
    if not Path(args.checkpoint).is_file():
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    ckpt = load_checkpoint(args.checkpoint, expected_fingerprint=cfg.fingerprint)
    model = model_from_checkpoint(ckpt, cfg["train.device"])
    policy = resize_policy(cfg, model.backbone.patch_size)
    names = args.dataset or cfg["datasets"]
    scores = {n: evaluate(model, load_split(cfg, n, args.split), policy, cfg["train.device"]).finalize() for n in names}
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    path = write_metrics(out / "metrics.json", scores, cfg.fingerprint, cfg["train.seed"])
    for n, v in scores.items():
        print(f"{n:>12s} IoU_fg {v:.4f}")
    print(f"wrote {path}")
    return 0


def cmd_extract_embeddings(args) -> int:
    cfg = _config_from_args(args)
    out = Path(args.out or Path(cfg["out"]) / cfg.fingerprint / "embeddings")
    written = extract_all(cfg, args.checkpoint, out)
    for regime, emb in written.items():
        print(f"{regime}: {len(emb.rows)} x {emb.rows.shape[1]} -> {out / regime}")
    return 0


def cmd_diagnose(args) -> int:
    cfg = _config_from_args(args)
    out = Path(args.out or Path(cfg["out"]) / cfg.fingerprint / "diagnostics")
    if args.embeddings:
        frozen = load_embeddings(Path(args.embeddings) / "frozen")
        adapted_dir = Path(args.embeddings) / "adapted"
        adapted = load_embeddings(adapted_dir) if adapted_dir.is_dir() else None
        probe_kw = {"validation_fraction": cfg["diagnostics.probe_validation_fraction"],
                    "seed": cfg["diagnostics.seed"], "C": cfg["diagnostics.probe_C"]}
        report = mismatch_report(frozen, adapted, out, probe_kw)
    else:
        report = diagnose(cfg, args.checkpoint, out)
    for regime in ("frozen", "adapted"):
        r = report[regime]
        if r is not None:
            print(f"{regime:>8s} FD {r['fd']:.4f}  probe acc {r['probe']['accuracy']:.3f}")
    if report["fd_delta"] is not None:
        print(f"FD delta (adapted - frozen) {report['fd_delta']:+.4f}")
    print(f"wrote {out / 'mismatch_report.json'}")
    return 0


def cmd_report(args) -> int:
    rows = build_report(args.summaries, args.literature, Path(args.out), args.metric)
    for r in rows:
        std = f" ± {r['iou_fg_std']:.3f}" if r["iou_fg_std"] is not None else ""
        print(f"{r['method']:<40s} {r['iou_fg_mean']:.3f}{std}  [{r['source']}]")
    print(f"wrote {Path(args.out) / 'report.csv'} and report.png")
    return 0


def cmd_pipeline(args) -> int:
    """prepare (synthetic) -> train -> evaluate -> diagnose, end to end on the TOY backbone."""
    root = Path(args.workdir)
    ns = argparse.Namespace(synthetic=str(root / "data"), size=112, cell=14, n_train=args.n_train, n_test=8)
    cmd_prepare_data(ns)
    cfg = load_config(root / "data" / "toy.yaml").with_overrides(
        num_runs=args.runs, out=str(root / "runs"), adapt=args.adapt, **{"train.max_epochs": args.epochs}
    )
    summary = run_experiment(cfg)
    ckpt = Path(summary["runs"][0]["dir"]) / "best.pt"
    model = model_from_checkpoint(load_checkpoint(ckpt, cfg.fingerprint))
    score = evaluate(model, load_split(cfg, "domain_a", "test")).finalize()
    diag_cfg = cfg.with_overrides(**{
        "datasets": ["domain_a", "domain_b"], "regime": "paired",
        "data.domain_b.root": str(root / "data" / "domain_b"),
        "data.domain_b.train_count": args.n_train, "data.domain_b.test_count": 8,
    })
    report = diagnose(diag_cfg, ckpt, root / "diagnostics")
    print(f"IoU_fg {summary['iou_fg']['macro']['formatted']} (re-evaluated run 0: {score:.4f})")
    print(f"frozen FD {report['frozen']['fd']:.4f}")
    print(f"artifacts under {root}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emvfm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"emvfm {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, train_flags=False):
        p.add_argument("--config", help="experiment YAML")
        p.add_argument("--out", help="output directory")
        p.add_argument("--backbone", help="override the backbone key")
        if train_flags:
            p.add_argument("--seed", type=int, help="seed of run 0")
            p.add_argument("--runs", type=int, help="number of seeded runs")
            p.add_argument("--adapt", choices=["head", "lora"])
            p.add_argument("--regime", choices=["single", "paired"])
            p.add_argument("--sampling", choices=["unbalanced", "balanced"])

    p = sub.add_parser("prepare-data", help="validate dataset layouts, or generate synthetic data")
    common(p)
    p.add_argument("--synthetic", metavar="DIR", help="write two synthetic domains + toy configs to DIR")
    p.add_argument("--size", type=int, default=112)
    p.add_argument("--cell", type=int, default=14)
    p.add_argument("--n-train", type=int, default=40)
    p.add_argument("--n-test", type=int, default=8)
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("train", help="train and evaluate num_runs seeded runs")
    common(p, train_flags=True)
    p.add_argument("--help-config", action="store_true", help="print every config key and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a split")
    common(p, train_flags=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--dataset", action="append", help="restrict to these dataset names")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("extract-embeddings", help="pooled frozen (and adapted) embeddings per domain")
    common(p)
    p.add_argument("--checkpoint", help="LoRA checkpoint for adapted embeddings")
    p.set_defaults(func=cmd_extract_embeddings)

    p = sub.add_parser("diagnose", help="Frechet distance, linear probe and PCA between two domains")
    common(p)
    p.add_argument("--checkpoint", help="LoRA checkpoint; omit for frozen-only diagnostics")
    p.add_argument("--embeddings", help="reuse embeddings written by extract-embeddings")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("report", help="tabulate run summaries next to literature baselines")
    p.add_argument("summaries", nargs="*", help="summary.json files or invocation directories")
    p.add_argument("--literature", help="CSV with method,iou_fg[,group,iou_fg_std]")
    p.add_argument("--metric", default="macro", help="dataset name or 'macro'")
    p.add_argument("--out", default="report")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pipeline", help="synthetic prepare -> train -> evaluate -> diagnose in one go")
    p.add_argument("workdir")
    p.add_argument("--adapt", choices=["head", "lora"], default="lora")
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--n-train", type=int, default=24)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except EmvfmError as exc:
        print(f"emvfm: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"emvfm: error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
