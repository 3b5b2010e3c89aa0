"""Dataset plumbing: synthetic glyph corpus, manifests, splits, batching.

Directory layout: ``<root>/<style>/<char_id>.png`` plus a skeleton cache
mirrored under ``<root>/_skeletons/<style>/<char_id>.png``. The manifest
is a JSON array of entries ``{char_id, style, path, split}``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import raster, skeleton
from .errors import (
    ConfigError,
    DuplicateCharId,
    EmptyStyle,
    ExhaustedSplit,
    ShapeMismatch,
)
from .raster import RasterImage

__all__ = [
    "StrokeStyle",
    "SynthSpec",
    "ManifestEntry",
    "ManifestBuildResult",
    "TrainingBatch",
    "render_glyph",
    "render_glyph_pair",
    "synth_corpus",
    "build_manifest",
    "load_manifest",
    "paired_entries",
    "epoch_length",
    "next_batch",
    "epoch_seed",
    "SKELETON_DIR",
]

SKELETON_DIR = "_skeletons"


@dataclass(frozen=True)
class StrokeStyle:
    stroke_width: float = 6.5
    slant: float = 0.0     # horizontal shear per vertical pixel
    jitter: float = 0.0    # wobble amplitude in pixels, perpendicular to the path


@dataclass(frozen=True)
class SynthSpec:
    glyph_count: int
    canvas: int = 64
    source_style: StrokeStyle = field(default_factory=lambda: StrokeStyle(6.5, 0.0, 0.0))
    target_style: StrokeStyle = field(default_factory=lambda: StrokeStyle(5.0, 0.25, 1.2))
    seed: int = 0

    def __post_init__(self):
        if self.glyph_count < 1:
            raise ConfigError("glyph_count must be >= 1")
        if self.canvas < 8 or self.canvas % 4 != 0:
            raise ConfigError("canvas must be >= 8 and divisible by 4")


@dataclass(frozen=True)
class ManifestEntry:
    char_id: str
    style: str
    path: str      # relative to the dataset root
    split: str     # train | dev | test


@dataclass(frozen=True)
class ManifestBuildResult:
    path: Path
    counts: dict
    warnings: list


@dataclass(frozen=True)
class TrainingBatch:
    x_img: np.ndarray
    x_skel: np.ndarray
    y_img: np.ndarray
    y_skel: np.ndarray
    char_id: str
    paired: bool = True
    flipped: bool = False


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

def _sample_topology(rng: np.random.Generator) -> list[dict]:
    """2-4 strokes in unit coordinates; lines or quadratic arcs."""
    n = int(rng.integers(2, 5))
    strokes = []
    for _ in range(n):
        for _attempt in range(50):
            p0 = rng.uniform(0.12, 0.88, size=2)
            p1 = rng.uniform(0.12, 0.88, size=2)
            if np.linalg.norm(p1 - p0) >= 0.35:
                break
        kind = "arc" if rng.random() < 0.5 else "line"
        mid = (p0 + p1) / 2
        d = p1 - p0
        normal = np.array([-d[1], d[0]])
        nn = np.linalg.norm(normal)
        normal = normal / nn if nn > 0 else np.array([0.0, 1.0])
        ctrl = mid + normal * rng.uniform(-0.3, 0.3)
        strokes.append({"kind": kind, "p0": p0, "p1": p1, "ctrl": np.clip(ctrl, 0.02, 0.98)})
    return strokes


def _stroke_path(stroke: dict, samples: int = 64) -> np.ndarray:
    t = np.linspace(0.0, 1.0, samples)[:, None]
    p0, p1, c = stroke["p0"][None], stroke["p1"][None], stroke["ctrl"][None]
    if stroke["kind"] == "line":
        return p0 + t * (p1 - p0)
    return (1 - t) ** 2 * p0 + 2 * t * (1 - t) * c + t**2 * p1


def _render_glyph(
    strokes: list[dict], style: StrokeStyle, canvas: int, jitter_rng: np.random.Generator
) -> np.ndarray:
    """Rasterize strokes as dark ink on white via distance to the path."""
    ys, xs = np.mgrid[0:canvas, 0:canvas]
    px = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64) + 0.5
    ink = np.zeros(canvas * canvas)
    center = canvas / 2.0
    for stroke in strokes:
        path = _stroke_path(stroke) * canvas
        if style.jitter > 0:
            seg = np.gradient(path, axis=0)
            norms = np.linalg.norm(seg, axis=1, keepdims=True)
            normal = np.stack([-seg[:, 1], seg[:, 0]], axis=1) / np.maximum(norms, 1e-9)
            t = np.linspace(0.0, 1.0, path.shape[0])[:, None]
            freq = jitter_rng.uniform(0.8, 2.2)
            phase = jitter_rng.uniform(0.0, 1.0)
            path = path + normal * (style.jitter * np.sin(2 * np.pi * (freq * t + phase)))
        if style.slant != 0.0:
            path = path.copy()
            path[:, 0] = path[:, 0] + style.slant * (path[:, 1] - center)
        a, b = path[:-1], path[1:]
        ab = b - a
        denom = np.maximum((ab**2).sum(axis=1), 1e-12)
        ap = px[:, None, :] - a[None, :, :]
        tt = np.clip((ap * ab[None]).sum(axis=2) / denom[None], 0.0, 1.0)
        closest = a[None] + tt[..., None] * ab[None]
        d2 = ((px[:, None, :] - closest) ** 2).sum(axis=2)
        dist = np.sqrt(d2.min(axis=1))
        cover = np.clip(style.stroke_width / 2 + 0.5 - dist, 0.0, 1.0)
        ink = np.maximum(ink, cover)
    return 1.0 - ink.reshape(canvas, canvas)


def _component_count(img: np.ndarray) -> int:
    grid = raster.binarize(RasterImage(img), 0.5, ink="dark")
    return skeleton.connected_components(grid)


def render_glyph(spec: SynthSpec, glyph_index: int, style: str = "source") -> np.ndarray:
    """One style's rendering of a glyph, without the pairing validity loop."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, glyph_index, 0]))
    strokes = _sample_topology(rng)
    which = spec.source_style if style == "source" else spec.target_style
    tag = 1 if style == "source" else 2
    jit = np.random.default_rng(np.random.SeedSequence([spec.seed, glyph_index, 0, tag]))
    return _render_glyph(strokes, which, spec.canvas, jit)


def render_glyph_pair(
    spec: SynthSpec, glyph_index: int
) -> tuple[np.ndarray, np.ndarray]:
    """Source and target renderings of one glyph, resampling the stroke
    layout until both share the same stroke-component count."""
    for attempt in range(40):
        rng = np.random.default_rng(
            np.random.SeedSequence([spec.seed, glyph_index, attempt])
        )
        strokes = _sample_topology(rng)
        jit_src = np.random.default_rng(
            np.random.SeedSequence([spec.seed, glyph_index, attempt, 1])
        )
        jit_tgt = np.random.default_rng(
            np.random.SeedSequence([spec.seed, glyph_index, attempt, 2])
        )
        src = _render_glyph(strokes, spec.source_style, spec.canvas, jit_src)
        tgt = _render_glyph(strokes, spec.target_style, spec.canvas, jit_tgt)
        ns, nt = _component_count(src), _component_count(tgt)
        if ns >= 1 and ns == nt:
            return src, tgt
    raise ConfigError(f"could not render a consistent glyph pair for index {glyph_index}")


def synth_corpus(spec: SynthSpec, out_dir) -> Path:
    """Generate the corpus, its skeleton cache, and a manifest.

    Deterministic: the same spec produces byte-identical files.
    """
    root = Path(out_dir)
    (root / "source").mkdir(parents=True, exist_ok=True)
    (root / "target").mkdir(parents=True, exist_ok=True)
    cfg = skeleton.ThinningConfig()
    for i in range(spec.glyph_count):
        char_id = f"g{i:04d}"
        src, tgt = render_glyph_pair(spec, i)
        for style, arr in (("source", src), ("target", tgt)):
            img = RasterImage(arr)
            raster.save_image(img, root / style / f"{char_id}.png")
            skel = skeleton.extract_skeleton(img, cfg, threshold=0.5, ink="dark")
            raster.save_image(skel, root / SKELETON_DIR / style / f"{char_id}.png")
    result = build_manifest(root, (8, 1, 1), seed=spec.seed)
    return result.path


# ---------------------------------------------------------------------------
# manifests and splits
# ---------------------------------------------------------------------------

def build_manifest(
    root_dir, split_ratio=(8, 1, 1), seed: int = 0, source_style: str = "source"
) -> ManifestBuildResult:
    """Scan ``<root>/<style>/<char_id>.png`` and write ``manifest.json``.

    Characters are assigned to train/dev/test as whole units (no char
    appears in two splits); the assignment is a seeded shuffle. Characters
    present only in the source style are excluded from pairing and listed
    under warnings.
    """
    root = Path(root_dir)
    styles = sorted(
        d.name for d in root.iterdir() if d.is_dir() and not d.name.startswith("_")
    )
    if not styles:
        raise EmptyStyle(f"no style directories under {root}")
    by_style: dict[str, dict[str, str]] = {}
    for style in styles:
        files = sorted((root / style).glob("*.png"))
        if not files:
            raise EmptyStyle(f"style {style!r} contains no PNG files")
        chars: dict[str, str] = {}
        for f in files:
            if f.stem in chars:
                raise DuplicateCharId(f"{style}/{f.stem} appears twice")
            chars[f.stem] = f"{style}/{f.name}"
        by_style[style] = chars
    if source_style not in by_style:
        raise ConfigError(f"source style {source_style!r} not found (have {styles})")

    warnings: list[str] = []
    target_styles = [s for s in styles if s != source_style]
    target_chars = set().union(*(set(by_style[s]) for s in target_styles)) if target_styles else set()
    for c in sorted(set(by_style[source_style]) - target_chars):
        warnings.append(f"char {c!r} present only in source style; not pair-eligible")

    all_chars = sorted(set().union(*(set(v) for v in by_style.values())))
    n = len(all_chars)
    total = sum(split_ratio)
    n_dev = int(round(n * split_ratio[1] / total))
    n_test = int(round(n * split_ratio[2] / total))
    n_train = n - n_dev - n_test
    if n_train < 0:
        raise ConfigError(f"split ratio {split_ratio} infeasible for {n} characters")
    order = np.random.default_rng(np.random.SeedSequence([seed])).permutation(n)
    split_of = {}
    for rank, idx in enumerate(order):
        if rank < n_train:
            split_of[all_chars[idx]] = "train"
        elif rank < n_train + n_dev:
            split_of[all_chars[idx]] = "dev"
        else:
            split_of[all_chars[idx]] = "test"

    entries = [
        {"char_id": c, "style": style, "path": by_style[style][c], "split": split_of[c]}
        for style in styles
        for c in sorted(by_style[style])
    ]
    path = root / "manifest.json"
    with open(path, "w") as f:
        json.dump(entries, f, indent=1, sort_keys=True)
        f.write("\n")
    counts = {
        "train": n_train,
        "dev": n_dev,
        "test": n_test,
        "styles": len(styles),
        "images": len(entries),
    }
    return ManifestBuildResult(path=path, counts=counts, warnings=warnings)


def load_manifest(path) -> list[ManifestEntry]:
    with open(path) as f:
        rows = json.load(f)
    return [ManifestEntry(**row) for row in rows]


def paired_entries(
    entries: list[ManifestEntry], split: str, source_style: str = "source"
) -> list[tuple[ManifestEntry, ManifestEntry]]:
    """(source, target) entry pairs for one split, keyed by char identity."""
    src = {e.char_id: e for e in entries if e.style == source_style and e.split == split}
    pairs = [
        (src[e.char_id], e)
        for e in entries
        if e.style != source_style and e.split == split and e.char_id in src
    ]
    pairs.sort(key=lambda p: (p[1].char_id, p[1].style))
    return pairs


def epoch_length(entries: list[ManifestEntry], split: str, source_style: str = "source") -> int:
    return len(paired_entries(entries, split, source_style))


def epoch_seed(seed: int, epoch: int) -> int:
    """Stable per-epoch shuffle seed."""
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def _skeleton_path(root: Path, rel: str) -> Path:
    return root / SKELETON_DIR / rel


def _load_gray(path: Path) -> np.ndarray:
    return raster.to_grayscale(raster.load_image(path)).pixels


def next_batch(
    root,
    entries: list[ManifestEntry],
    split: str,
    seed: int,
    step: int,
    source_style: str = "source",
    allow_unpaired: bool = False,
) -> TrainingBatch:
    """Deterministic batch ``step`` of the epoch keyed by ``seed``.

    Raises ExhaustedSplit once ``step`` runs past the split, which marks
    the epoch boundary. Horizontal flips (train split only) are applied
    jointly to all four images.
    """
    root = Path(root)
    pairs = paired_entries(entries, split, source_style)
    if not pairs:
        raise ConfigError(f"split {split!r} has no pair-eligible characters")
    n = len(pairs)
    if step >= n:
        raise ExhaustedSplit(f"step {step} past the end of split {split!r} ({n} pairs)")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    order = rng.permutation(n)
    src_e, tgt_e = pairs[order[step]]
    paired = True
    if allow_unpaired:
        tgt_order = np.random.default_rng(np.random.SeedSequence([seed, 211])).permutation(n)
        tgt_e = pairs[tgt_order[step]][1]
        paired = tgt_e.char_id == src_e.char_id

    x_img = _load_gray(root / src_e.path)
    x_skel = _load_gray(_skeleton_path(root, src_e.path))
    y_img = _load_gray(root / tgt_e.path)
    y_skel = _load_gray(_skeleton_path(root, tgt_e.path))
    shapes = {a.shape for a in (x_img, x_skel, y_img, y_skel)}
    if len(shapes) != 1:
        raise ShapeMismatch(f"batch images disagree in size: {shapes}")

    flipped = False
    if split == "train":
        flip_rng = np.random.default_rng(np.random.SeedSequence([seed, step, 307]))
        if flip_rng.random() < 0.5:
            x_img, x_skel, y_img, y_skel = (
                np.ascontiguousarray(np.flip(a, axis=-1))
                for a in (x_img, x_skel, y_img, y_skel)
            )
            flipped = True
    return TrainingBatch(
        x_img=x_img,
        x_skel=x_skel,
        y_img=y_img,
        y_skel=y_skel,
        char_id=src_e.char_id,
        paired=paired,
        flipped=flipped,
    )
