"""Evaluation: glyph-identity classifier, content accuracy, Fréchet
feature distance over the classifier's penultimate features, and figure
rendering (comparison grids, attention overlays, loss curves).

The feature distance uses the in-repo classifier rather than a large
pretrained recognizer, so its values are comparable between runs of this
pipeline but not to scores computed with other feature extractors.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import json

import matplotlib.pyplot as plt
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import data as data_mod
from .errors import (
    ConfigError,
    DimensionMismatch,
    EmptyInput,
    InsufficientClasses,
    IoError,
    UnknownLabel,
)
from .networks import load_checkpoint, load_module_arrays, module_arrays, save_checkpoint

__all__ = [
    "GlyphClassifier",
    "ClassifierConfig",
    "train_classifier",
    "save_classifier",
    "load_classifier",
    "content_accuracy",
    "FeatureStats",
    "feature_stats",
    "frechet_distance",
    "render_grid",
    "attention_overlay",
    "plot_training_log",
]


class GlyphClassifier(nn.Module):
    """Small conv net over glyph identities; ``features`` exposes the
    pooled penultimate layer used for the feature distance.

    Inputs are min-max normalized per image so recognition does not
    depend on stroke contrast (generated glyphs start out faint)."""

    def __init__(self, classes: list[str], feature_dim: int = 64):
        super().__init__()
        if len(classes) < 2:
            raise InsufficientClasses(f"need >= 2 classes, got {len(classes)}")
        self.classes = list(classes)
        self.feature_dim = feature_dim
        self.body = nn.Sequential(
            nn.Conv2d(1, 16, 3, 2, 1), nn.ReLU(inplace=True),
            nn.Conv2d(16, 32, 3, 2, 1), nn.ReLU(inplace=True),
            nn.Conv2d(32, 64, 3, 2, 1), nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(4),
        )
        # keep a coarse spatial layout before projecting: glyph identity
        # lives in where strokes sit, not only in local texture
        self.project = nn.Linear(64 * 16, feature_dim)
        self.fc = nn.Linear(feature_dim, len(self.classes))

    @staticmethod
    def _normalize(x: torch.Tensor) -> torch.Tensor:
        lo = x.amin(dim=(2, 3), keepdim=True)
        hi = x.amax(dim=(2, 3), keepdim=True)
        return (x - lo) / (hi - lo).clamp_min(1e-6)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return torch.relu(self.project(self.body(self._normalize(x)).flatten(1)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.features(x))


@dataclass(frozen=True)
class ClassifierConfig:
    feature_dim: int = 64
    epochs: int = 40
    lr: float = 1e-3
    batch_size: int = 32
    augment_copies: int = 10
    max_shift: int = 3
    holdout_fraction: float = 0.2
    seed: int = 0


def _box_blur(img: np.ndarray) -> np.ndarray:
    p = np.pad(img, 1, mode="edge")
    out = np.zeros_like(img)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            out += p[dy : dy + img.shape[0], dx : dx + img.shape[1]]
    return out / 9.0


def _augmented_pool(root: Path, entries, cfg: ClassifierConfig):
    """Deterministic training pool for the recognizer.

    Each rendering contributes one clean copy plus shifted variants, half
    of them degraded (contrast fade toward white, box blur) so the model
    tolerates the soft, faint strokes produced by the translator early in
    training. ``clean`` marks rows without degradation; the sanity gate is
    measured on held-out clean rows only.
    """
    rows = sorted((e for e in entries), key=lambda e: (e.style, e.char_id))
    images, labels, clean = [], [], []
    for e in rows:
        img = data_mod._load_gray(root / e.path)
        images.append(img)
        labels.append(e.char_id)
        clean.append(True)
        rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, zlib.crc32(e.path.encode())])
        )
        for copy in range(cfg.augment_copies - 1):
            dy, dx = rng.integers(-cfg.max_shift, cfg.max_shift + 1, size=2)
            aug = np.roll(np.roll(img, dy, axis=0), dx, axis=1)
            degrade = copy % 2 == 1
            if degrade:
                fade = rng.uniform(0.3, 1.0)
                aug = 1.0 - fade * (1.0 - aug)
                if rng.random() < 0.5:
                    aug = _box_blur(aug)
            images.append(aug)
            labels.append(e.char_id)
            clean.append(not degrade)
    return np.stack(images), labels, np.array(clean)


def train_classifier(root, entries, cfg: ClassifierConfig | None = None) -> GlyphClassifier:
    """Train a glyph-identity classifier on all manifest renderings.

    A held-out fifth of the (augmented) pool is used as the sanity gate;
    training is deterministic under the config seed.
    """
    cfg = cfg or ClassifierConfig()
    root = Path(root)
    classes = sorted({e.char_id for e in entries})
    if len(classes) < 2:
        raise InsufficientClasses(f"need >= 2 glyph classes, got {len(classes)}")
    class_index = {c: i for i, c in enumerate(classes)}
    images, labels, clean = _augmented_pool(root, entries, cfg)
    x = torch.from_numpy(images).float().unsqueeze(1)
    y = torch.tensor([class_index[c] for c in labels])

    n = x.shape[0]
    order = np.random.default_rng(np.random.SeedSequence([cfg.seed, 13])).permutation(n)
    n_hold = max(1, int(round(n * cfg.holdout_fraction)))
    hold, tr = order[:n_hold], order[n_hold:]
    hold_clean = hold[clean[hold]]
    if hold_clean.size == 0:
        hold_clean = hold

    torch.manual_seed(cfg.seed + 17)
    model = GlyphClassifier(classes, cfg.feature_dim)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    for epoch in range(cfg.epochs):
        perm = np.random.default_rng(np.random.SeedSequence([cfg.seed, 29, epoch])).permutation(len(tr))
        for start in range(0, len(tr), cfg.batch_size):
            idx = tr[perm[start : start + cfg.batch_size]]
            opt.zero_grad(set_to_none=True)
            loss = F.cross_entropy(model(x[idx]), y[idx])
            loss.backward()
            opt.step()
        with torch.no_grad():
            acc = float((model(x[hold_clean]).argmax(1) == y[hold_clean]).float().mean())
        if acc == 1.0 and epoch >= 2:
            break
    model.eval()
    model.holdout_accuracy = acc
    return model


def save_classifier(model: GlyphClassifier, directory) -> Path:
    return save_checkpoint(
        directory,
        module_arrays({"classifier": model}),
        {"feature_dim": model.feature_dim, "n_classes": len(model.classes)},
        {"classes": model.classes, "holdout_accuracy": getattr(model, "holdout_accuracy", None)},
    )


def load_classifier(directory) -> GlyphClassifier:
    arrays, config, extras = load_checkpoint(directory)
    classes = extras.get("classes")
    if not classes:
        raise ConfigError(f"{directory}: classifier checkpoint lacks class list")
    model = GlyphClassifier(classes, config.get("feature_dim", 64))
    load_module_arrays({"classifier": model}, arrays)
    model.eval()
    return model


def _image_batch(images) -> torch.Tensor:
    if torch.is_tensor(images):
        t = images.float()
        if t.dim() == 3:
            t = t.unsqueeze(1)
        return t
    arrs = [np.asarray(a, dtype=np.float32) for a in images]
    if not arrs:
        raise EmptyInput("no images")
    return torch.from_numpy(np.stack(arrs)).unsqueeze(1)


def content_accuracy(model: GlyphClassifier, images, labels) -> float:
    """Fraction of images whose top-1 predicted glyph matches the label."""
    labels = list(labels)
    if len(labels) == 0:
        raise EmptyInput("content_accuracy over an empty set is undefined")
    index = {c: i for i, c in enumerate(model.classes)}
    for lab in labels:
        if lab not in index:
            raise UnknownLabel(f"label {lab!r} not in classifier classes")
    x = _image_batch(images)
    if x.shape[0] != len(labels):
        raise EmptyInput(f"{x.shape[0]} images vs {len(labels)} labels")
    with torch.no_grad():
        pred = model(x).argmax(dim=1).numpy()
    want = np.array([index[c] for c in labels])
    return float((pred == want).mean())


# ---------------------------------------------------------------------------
# Frechet feature distance
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = np.asarray(self.cov, dtype=np.float64)
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise DimensionMismatch(f"cov shape {cov.shape} vs mean dim {d}")
        if np.abs(cov - cov.T).max() > 1e-8:
            raise DimensionMismatch("covariance is not symmetric within 1e-8")
        if np.linalg.eigvalsh((cov + cov.T) / 2).min() < -1e-8:
            raise DimensionMismatch("covariance has eigenvalues below -1e-8")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", (cov + cov.T) / 2)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def feature_stats(features: np.ndarray) -> FeatureStats:
    """Sample mean and (n-1)-normalized covariance of row-wise features."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise EmptyInput("need at least 2 feature rows")
    return FeatureStats(mean=f.mean(axis=0), cov=np.cov(f, rowvar=False).reshape(f.shape[1], f.shape[1]))


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((mat + mat.T) / 2)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})``.

    The cross square root is evaluated symmetrically via
    ``sqrt(S_a)^T S_b sqrt(S_a)`` with eigendecompositions, clamping
    negative eigenvalues at zero; the result is clamped at zero.
    """
    if a.dim != b.dim:
        raise DimensionMismatch(f"feature dims differ: {a.dim} vs {b.dim}")
    diff = a.mean - b.mean
    root_a = _psd_sqrt(a.cov)
    inner = root_a @ b.cov @ root_a
    w = np.clip(np.linalg.eigvalsh((inner + inner.T) / 2), 0.0, None)
    trace_sqrt = float(np.sqrt(w).sum())
    fd = float(diff @ diff) + float(np.trace(a.cov) + np.trace(b.cov)) - 2.0 * trace_sqrt
    return max(fd, 0.0)


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------

_PNG_METADATA = {"Software": "skelfont"}


def render_grid(rows, path) -> Path:
    """Write a labeled comparison grid.

    ``rows`` is a list of (label, images) with same-size grayscale images
    in [0, 1]. Layout and bytes are deterministic for identical inputs.
    """
    rows = [(label, list(images)) for label, images in rows]
    if not rows or all(len(imgs) == 0 for _, imgs in rows):
        raise EmptyInput("render_grid needs at least one image")
    ncols = max(len(imgs) for _, imgs in rows)
    nrows = len(rows)
    fig, axes = plt.subplots(
        nrows, ncols, figsize=(1.2 * ncols + 0.8, 1.2 * nrows),
        squeeze=False,
    )
    for r, (label, imgs) in enumerate(rows):
        for c in range(ncols):
            ax = axes[r][c]
            ax.set_xticks([])
            ax.set_yticks([])
            if c < len(imgs):
                ax.imshow(np.asarray(imgs[c]), cmap="gray", vmin=0.0, vmax=1.0,
                          interpolation="nearest")
            else:
                ax.axis("off")
            if c == 0:
                ax.set_ylabel(str(label), fontsize=8)
    fig.tight_layout()
    out = Path(path)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out, dpi=100, metadata=_PNG_METADATA)
    except OSError as e:
        raise IoError(f"{out}: {e}") from e
    finally:
        plt.close(fig)
    return out


def _normalized(heat: np.ndarray) -> np.ndarray:
    h = np.asarray(heat, dtype=np.float64)
    lo, hi = h.min(), h.max()
    return (h - lo) / (hi - lo) if hi > lo else np.zeros_like(h)


def attention_overlay(img: np.ndarray, heats: dict, path) -> Path:
    """Panelled per-pixel heatmap overlays for one glyph.

    ``heats`` maps panel names to low-resolution attention maps; each is
    upsampled to the glyph size and blended over the image.
    """
    if not heats:
        raise EmptyInput("no heatmaps to draw")
    names = list(heats)
    fig, axes = plt.subplots(1, len(names) + 1,
                             figsize=(2.0 * (len(names) + 1), 2.2), squeeze=False)
    axes[0][0].imshow(img, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
    axes[0][0].set_title("input", fontsize=8)
    for k, name in enumerate(names):
        heat = _normalized(heats[name])
        zoom_y = img.shape[0] // heat.shape[0]
        zoom_x = img.shape[1] // heat.shape[1]
        up = np.kron(heat, np.ones((max(zoom_y, 1), max(zoom_x, 1))))
        up = up[: img.shape[0], : img.shape[1]]
        ax = axes[0][k + 1]
        ax.imshow(img, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
        ax.imshow(up, cmap="jet", alpha=0.45, interpolation="bilinear")
        ax.set_title(name, fontsize=8)
    for ax in axes[0]:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    out = Path(path)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out, dpi=100, metadata=_PNG_METADATA)
    except OSError as e:
        raise IoError(f"{out}: {e}") from e
    finally:
        plt.close(fig)
    return out


def plot_training_log(log_path, out_path) -> Path:
    """Loss curves from an ND-JSON training log."""
    steps, series = [], {}
    with open(log_path) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            steps.append(rec["step"])
            for key in ("total", "pix", "sc", "cycle", "cls", "adv_i", "adv_s"):
                if key in rec:
                    series.setdefault(key, []).append(rec[key])
    if not steps:
        raise EmptyInput(f"{log_path} has no records")
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(steps, series["total"], lw=1.0)
    ax1.set_xlabel("step")
    ax1.set_ylabel("total objective")
    for key in ("pix", "sc", "cycle", "cls", "adv_i", "adv_s"):
        if key in series and any(v != 0 for v in series[key]):
            ax2.plot(steps, series[key], lw=0.8, label=key)
    ax2.set_xlabel("step")
    ax2.set_ylabel("term value")
    if ax2.lines:
        ax2.legend(fontsize=7)
    fig.tight_layout()
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=110, metadata=_PNG_METADATA)
    plt.close(fig)
    return out
