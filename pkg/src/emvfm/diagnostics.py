"""Embedding-space domain-mismatch diagnostics.

Pooled per-image embeddings from two domains are compared with a PCA
projection, the Fréchet distance between their Gaussian approximations,
and a logistic-regression probe that tries to predict the domain label.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .datasets import validation_count
from .errors import DataError, NumericalAbort

log = logging.getLogger(__name__)

NEG_EIG_RTOL = 1e-6


@dataclass
class EmbeddingMatrix:
    """``rows`` is ``(n, D)``; ``labels`` holds one domain name per row."""

    rows: np.ndarray
    labels: np.ndarray
    source: str = ""
    ids: Optional[list] = None

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        self.labels = np.asarray(self.labels).astype(str)
        if self.rows.ndim != 2:
            raise ValueError(f"rows must be 2-D, got {self.rows.shape}")
        if len(self.labels) != len(self.rows):
            raise ValueError("one label per row required")
        if not np.all(np.isfinite(self.rows)):
            raise NumericalAbort("embedding matrix has non-finite entries")
        if self.ids is not None and len(self.ids) != len(self.rows):
            raise ValueError("one id per row required")

    @property
    def domains(self):
        seen = []
        for lab in self.labels:
            if lab not in seen:
                seen.append(lab)
        return seen

    def domain_rows(self, domain) -> np.ndarray:
        return self.rows[self.labels == domain]

    @classmethod
    def from_domains(cls, blocks: dict, source: str = "", ids: Optional[dict] = None):
        rows, labels, all_ids = [], [], []
        for name, r in blocks.items():
            r = np.asarray(r)
            rows.append(r)
            labels += [name] * len(r)
            if ids is not None:
                all_ids += list(ids[name])
        return cls(np.concatenate(rows), np.array(labels), source, all_ids if ids is not None else None)


@dataclass
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def from_rows(cls, rows) -> "GaussianSummary":
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim == 1:
            rows = rows[:, None]
        if rows.shape[0] < 2:
            raise DataError("need at least 2 embeddings per domain to estimate a covariance")
        if not np.all(np.isfinite(rows)):
            raise NumericalAbort("embeddings have non-finite entries")
        cov = np.atleast_2d(np.cov(rows, rowvar=False, ddof=1))
        if not np.all(np.isfinite(cov)):
            raise NumericalAbort("covariance has non-finite entries")
        return cls(rows.mean(axis=0), cov)


def sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    """Square root of a symmetric PSD matrix via eigh, negative eigenvalues clamped."""
    sym = 0.5 * (mat + mat.T)
    w, v = np.linalg.eigh(sym)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _trace_sqrt_product(s1: np.ndarray, s2: np.ndarray) -> float:
    """``Tr((S1^1/2 S2 S1^1/2)^1/2)``; errors on materially negative eigenvalues."""
    root1 = sqrtm_psd(s1)
    m = root1 @ s2 @ root1
    m = 0.5 * (m + m.T)
    w = np.linalg.eigvalsh(m)
    scale = max(float(np.trace(m)), 1e-12)
    if w.min() < -NEG_EIG_RTOL * scale:
        raise NumericalAbort(
            f"S1^1/2 S2 S1^1/2 has eigenvalue {w.min():.3g} (trace {scale:.3g}); covariance is not PSD"
        )
    return float(np.sqrt(np.clip(w, 0.0, None)).sum())


def frechet_distance(e1, e2) -> float:
    """Fréchet distance between Gaussian fits of two embedding sets.

    ``||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)`` with
    unbiased (n - 1) covariances. Accepts ``(n, D)`` arrays or
    :class:`GaussianSummary` objects. Result is clamped at 0.
    """
    g1 = e1 if isinstance(e1, GaussianSummary) else GaussianSummary.from_rows(e1)
    g2 = e2 if isinstance(e2, GaussianSummary) else GaussianSummary.from_rows(e2)
    if g1.mean.shape != g2.mean.shape:
        raise ValueError(f"dimension mismatch: {g1.mean.shape[0]} vs {g2.mean.shape[0]}")
    diff = g1.mean - g2.mean
    fd = diff @ diff + np.trace(g1.cov) + np.trace(g2.cov) - 2.0 * _trace_sqrt_product(g1.cov, g2.cov)
    return float(max(fd, 0.0))


# ------------------------------------------------------------------- PCA


@dataclass
class PCAResult:
    coords: np.ndarray
    explained_variance_ratio: np.ndarray
    components: np.ndarray
    mean: np.ndarray


def pca_project(rows, k: int = 2) -> PCAResult:
    """Project mean-centred rows on the top-``k`` principal axes.

    Each axis is signed so that its largest-magnitude loading is positive.
    Axes beyond the data rank come back as zeros with ratio 0.
    """
    x = np.asarray(rows, dtype=np.float64)
    n, d = x.shape
    if n <= k:
        raise ValueError(f"need more than k={k} rows, got {n}")
    mean = x.mean(axis=0)
    xc = x - mean
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    var = s**2 / (n - 1)
    total = var.sum()
    tol = max(n, d) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    components = np.zeros((k, d))
    ratios = np.zeros(k)
    for i in range(min(k, len(s))):
        if s[i] <= tol:
            continue
        v = vt[i]
        j = np.argmax(np.abs(v))
        components[i] = v if v[j] >= 0 else -v
        ratios[i] = var[i] / total
    return PCAResult(xc @ components.T, ratios, components, mean)


# ---------------------------------------------------------------- probe


@dataclass
class ProbeResult:
    accuracy: float
    auroc: float
    seed: int
    train_index: list = field(repr=False, default_factory=list)
    val_index: list = field(repr=False, default_factory=list)
    C: float = 1.0

    def to_dict(self):
        return {"accuracy": self.accuracy, "auroc": self.auroc, "seed": self.seed,
                "n_train": len(self.train_index), "n_val": len(self.val_index), "C": self.C}


def row_groups(rows) -> np.ndarray:
    """Group id per row; identical rows share a group, ids follow first appearance."""
    rows = np.ascontiguousarray(rows)
    _, first, inverse = np.unique(rows, axis=0, return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first)] = np.arange(len(first))
    return rank[np.ravel(inverse)]


def probe_split(labels, validation_fraction: float = 0.10, seed: int = 0, max_tries: int = 100, groups=None):
    """Random hold-out with both classes on each side; bumps the seed until so.

    With ``groups``, whole groups go to one side (identical embeddings never
    straddle the split). Without, every row is its own group.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if len(set(labels.tolist())) < 2:
        raise DataError("linear probe needs two domains")
    groups = np.arange(n) if groups is None else np.asarray(groups)
    n_groups = int(groups.max()) + 1
    if n_groups < 2:
        raise DataError("linear probe needs at least two distinct embeddings")
    n_val = validation_count(n_groups, validation_fraction)
    for attempt in range(max_tries):
        s = seed + attempt
        perm = np.random.default_rng(s).permutation(n_groups)
        in_val = np.zeros(n_groups, dtype=bool)
        in_val[perm[:n_val]] = True
        val, tr = np.flatnonzero(in_val[groups]), np.flatnonzero(~in_val[groups])
        if len(set(labels[val].tolist())) == 2 and len(set(labels[tr].tolist())) == 2:
            if attempt:
                log.info("probe split: single-class split for seed %d, used seed %d", seed, s)
            return tr, val, s
    raise DataError(f"no two-class probe split found in {max_tries} seeds (n={n}, n_val={n_val})")


def linear_probe(emb: EmbeddingMatrix, validation_fraction: float = 0.10, seed: int = 0, C: float = 1.0) -> ProbeResult:
    """L2 logistic regression on standardized features; held-out accuracy and ROC-AUC."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.metrics import roc_auc_score
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    domains = emb.domains
    if len(domains) != 2:
        raise DataError(f"linear probe needs exactly two domains, got {domains}")
    y = (emb.labels == domains[1]).astype(int)
    tr, val, used = probe_split(y, validation_fraction, seed, groups=row_groups(emb.rows))
    clf = make_pipeline(StandardScaler(), LogisticRegression(C=C, max_iter=5000))
    clf.fit(emb.rows[tr], y[tr])
    proba = clf.predict_proba(emb.rows[val])[:, 1]
    acc = float(np.mean((proba > 0.5).astype(int) == y[val]))
    auroc = float(roc_auc_score(y[val], proba))
    return ProbeResult(acc, auroc, used, tr.tolist(), val.tolist(), C)


# -------------------------------------------------------------- reporting


def pca_figure(pca: PCAResult, labels, path, title: str = ""):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = np.asarray(labels)
    fig, ax = plt.subplots(figsize=(5, 4.5))
    for dom in dict.fromkeys(labels.tolist()):
        sel = labels == dom
        ax.scatter(pca.coords[sel, 0], pca.coords[sel, 1], s=14, alpha=0.8, label=dom)
    r = pca.explained_variance_ratio
    ax.set_xlabel(f"PC1 ({100 * r[0]:.1f}%)")
    ax.set_ylabel(f"PC2 ({100 * r[1]:.1f}%)" if len(r) > 1 else "PC2")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def regime_summary(emb: EmbeddingMatrix, probe_kw=None, figure_path=None, title=""):
    doms = emb.domains
    if len(doms) != 2:
        raise DataError(f"mismatch report needs exactly two domains, got {doms}")
    fd = frechet_distance(emb.domain_rows(doms[0]), emb.domain_rows(doms[1]))
    probe = linear_probe(emb, **(probe_kw or {}))
    pca = pca_project(emb.rows, 2)
    out = {
        "fd": fd,
        "probe": probe.to_dict(),
        "pca_explained_variance_ratio": pca.explained_variance_ratio.tolist(),
        "figure": None,
    }
    if figure_path is not None:
        out["figure"] = str(pca_figure(pca, emb.labels, figure_path, title))
    return out


def mismatch_report(frozen: EmbeddingMatrix, adapted: Optional[EmbeddingMatrix] = None, out_dir=None,
                    probe_kw=None) -> dict:
    """FD, probe and PCA for the frozen and (optionally) adapted embeddings.

    ``fd_delta`` is ``adapted - frozen`` (negative when adaptation brings the
    domains closer). Both regimes must embed the same images in the same order.
    """
    if adapted is not None:
        same_labels = np.array_equal(frozen.labels, adapted.labels)
        same_ids = frozen.ids is None or adapted.ids is None or list(frozen.ids) == list(adapted.ids)
        if not (same_labels and same_ids and len(frozen.rows) == len(adapted.rows)):
            raise DataError("frozen and adapted embeddings were extracted from different image lists")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    def fig(name):
        return out_dir / f"pca_{name}.png" if out_dir is not None else None

    report = {
        "domains": frozen.domains,
        "counts": {d: int((frozen.labels == d).sum()) for d in frozen.domains},
        "frozen": regime_summary(frozen, probe_kw, fig("frozen"), "frozen backbone"),
        "adapted": None,
        "fd_delta": None,
        "source": {"frozen": frozen.source, "adapted": adapted.source if adapted is not None else None},
    }
    if adapted is not None:
        report["adapted"] = regime_summary(adapted, probe_kw, fig("adapted"), "LoRA-adapted backbone")
        report["fd_delta"] = report["adapted"]["fd"] - report["frozen"]["fd"]
    if out_dir is not None:
        (out_dir / "mismatch_report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return report


# ------------------------------------------------------------------- I/O


def save_embeddings(emb: EmbeddingMatrix, directory, fingerprint: str = "") -> list:
    """Write ``<domain>.f32`` (row-major float32) + ``<domain>.meta`` (JSON) per domain."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for dom in emb.domains:
        sel = emb.labels == dom
        rows = np.ascontiguousarray(emb.rows[sel], dtype="<f4")
        (directory / f"{dom}.f32").write_bytes(rows.tobytes(order="C"))
        meta = {
            "n": int(rows.shape[0]),
            "D": int(rows.shape[1]),
            "labels": [dom] * int(rows.shape[0]),
            "ids": [emb.ids[i] for i in np.flatnonzero(sel)] if emb.ids is not None else None,
            "fingerprint": fingerprint,
            "source": emb.source,
            "dtype": "float32-le",
        }
        (directory / f"{dom}.meta").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
        written.append(directory / f"{dom}.f32")
    return written


def load_embeddings(directory, domains: Optional[Sequence[str]] = None) -> EmbeddingMatrix:
    directory = Path(directory)
    if domains is None:
        domains = sorted(p.stem for p in directory.glob("*.meta"))
    if not domains:
        raise DataError(f"no embeddings found in {directory}")
    rows, labels, ids, source = [], [], [], ""
    have_ids = True
    for dom in domains:
        meta = json.loads((directory / f"{dom}.meta").read_text(encoding="utf-8"))
        data = np.fromfile(directory / f"{dom}.f32", dtype="<f4")
        if data.size != meta["n"] * meta["D"]:
            raise DataError(f"{dom}.f32 holds {data.size} floats, descriptor says {meta['n']}x{meta['D']}")
        rows.append(data.reshape(meta["n"], meta["D"]))
        labels += meta["labels"]
        if meta.get("ids") is None:
            have_ids = False
        else:
            ids += meta["ids"]
        source = source or meta.get("source", "")
    return EmbeddingMatrix(np.concatenate(rows), np.array(labels), source, ids if have_ids else None)


def extract_embeddings(backbone, samples, pooling: str = "mean", target_longest_edge=None, device="cpu") -> np.ndarray:
    """Pooled final-layer patch tokens, one row per sample.

    Slices are resized to the patch grid (no padding) so zero-padded
    tokens never enter the average.
    """
    import torch

    from .backbones import pooled_embedding
    from .datasets import ResizePolicy, to_model_input

    policy = ResizePolicy(backbone.patch_size, target_longest_edge)
    out = []
    backbone.eval()
    with torch.no_grad():
        for s in samples:
            item = to_model_input(s, backbone.patch_size, policy)
            fm = backbone.extract_feature_map(item.image[None].to(device))
            out.append(pooled_embedding(fm, pooling)[0].double().cpu().numpy())
    return np.stack(out)
