"""Deterministic glyph skeletonization by iterative parallel thinning.

The thinning rule is the classic two-sub-iteration scheme over 3x3
neighborhoods: a foreground pixel P with neighbors P2..P9 (clockwise from
north) is deleted iff

    2 <= B(P) <= 6,  A(P) == 1,  and the directional products
    sub-iteration 1:  P2*P4*P6 == 0  and  P4*P6*P8 == 0
    sub-iteration 2:  P2*P4*P8 == 0  and  P2*P6*P8 == 0

where B counts foreground neighbors and A counts 0->1 transitions in the
circular sequence P2,P3,...,P9,P2. Within a sub-iteration every decision
reads only the previous state, so the update is order-independent.

The raw rule can leave a stable 2x2 ink block at stroke crossings; a
final cleanup stage deletes one pixel per residual block, preferring
pixels whose removal provably keeps local topology intact (8-simple,
not an endpoint). Thinning then resumes until a global fixed point.
"""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import raster
from .errors import IterationLimitWarning, SkelfontError
from .raster import BinaryGrid, RasterImage

__all__ = [
    "ThinningConfig",
    "ThinResult",
    "thin",
    "extract_skeleton",
    "batch_skeletonize",
    "dilate",
    "erode",
    "closing",
    "connected_components",
]


@dataclass(frozen=True)
class ThinningConfig:
    max_iterations: int = 100
    pre_close: bool = True       # morphological closing before thinning
    dilate_radius: int = 1       # thicken the skeleton on output for visibility

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.dilate_radius < 0:
            raise ValueError("dilate_radius must be >= 0")


@dataclass(frozen=True)
class ThinResult:
    grid: BinaryGrid
    iterations: int
    iteration_limit_reached: bool


# Neighbor order P2..P9: N, NE, E, SE, S, SW, W, NW (clockwise from north).
_OFFSETS = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


def _neighbor_planes(g: np.ndarray, pad_value: int = 0) -> list[np.ndarray]:
    p = np.pad(g, 1, constant_values=pad_value)
    return [
        p[1 + dy : p.shape[0] - 1 + dy, 1 + dx : p.shape[1] - 1 + dx]
        for dy, dx in _OFFSETS
    ]


def _delete_mask(g: np.ndarray, sub: int) -> np.ndarray:
    n = _neighbor_planes(g)
    b = np.zeros(g.shape, dtype=np.int16)
    for plane in n:
        b += plane
    a = np.zeros(g.shape, dtype=np.int16)
    for k in range(8):
        a += (n[k] == 0) & (n[(k + 1) % 8] == 1)
    if sub == 0:
        c1 = n[0] * n[2] * n[4]  # P2*P4*P6
        c2 = n[2] * n[4] * n[6]  # P4*P6*P8
    else:
        c1 = n[0] * n[2] * n[6]  # P2*P4*P8
        c2 = n[0] * n[4] * n[6]  # P2*P6*P8
    return (g == 1) & (b >= 2) & (b <= 6) & (a == 1) & (c1 == 0) & (c2 == 0)


def _build_simple_lut() -> tuple[np.ndarray, np.ndarray]:
    """Lookup tables over the 256 neighborhood codes (bit k = P(2+k)).

    simple[m] is True when deleting the center preserves topology under
    8-connected foreground / 4-connected background adjacency, decided
    locally: the foreground neighbors must form one 8-connected piece
    within the ring, and exactly one background 4-component must touch
    the center's edge-neighbors.
    """
    simple = np.zeros(256, dtype=bool)
    bcount = np.zeros(256, dtype=np.int16)

    def components(cells: list[tuple[int, int]], four_conn: bool) -> list[set]:
        remaining = set(cells)
        comps = []
        while remaining:
            seed = remaining.pop()
            comp = {seed}
            queue = deque([seed])
            while queue:
                cy, cx = queue.popleft()
                for oy, ox in list(remaining):
                    dy, dx = abs(cy - oy), abs(cx - ox)
                    ok = (dy + dx == 1) if four_conn else (max(dy, dx) == 1)
                    if ok:
                        remaining.discard((oy, ox))
                        comp.add((oy, ox))
                        queue.append((oy, ox))
            comps.append(comp)
        return comps

    for m in range(256):
        fg = [_OFFSETS[k] for k in range(8) if m >> k & 1]
        bg = [_OFFSETS[k] for k in range(8) if not m >> k & 1]
        bcount[m] = len(fg)
        if not fg:
            continue
        if len(components(fg, four_conn=False)) != 1:
            continue
        edge = {(-1, 0), (0, 1), (1, 0), (0, -1)}
        touching = [c for c in components(bg, four_conn=True) if c & edge]
        simple[m] = len(touching) == 1
    return simple, bcount


_SIMPLE_LUT, _BCOUNT_LUT = _build_simple_lut()


def _neighbor_code(g: np.ndarray, y: int, x: int) -> int:
    h, w = g.shape
    code = 0
    for k, (dy, dx) in enumerate(_OFFSETS):
        yy, xx = y + dy, x + dx
        if 0 <= yy < h and 0 <= xx < w and g[yy, xx]:
            code |= 1 << k
    return code


def _cleanup_pass(g: np.ndarray) -> bool:
    """Delete one pixel from every remaining 2x2 ink block.

    Scans block corners in raster order; within a block, candidates are
    tried SE, SW, NE, NW, preferring a simple non-endpoint pixel, then any
    simple pixel, then the SE corner as a last resort (only reachable on
    adversarial inputs whose crossings cannot be thinned without touching
    topology).
    """
    blocks = np.argwhere(
        (g[:-1, :-1] == 1) & (g[:-1, 1:] == 1) & (g[1:, :-1] == 1) & (g[1:, 1:] == 1)
    )
    changed = False
    for i, j in blocks:
        corners = ((i + 1, j + 1), (i + 1, j), (i, j + 1), (i, j))
        if not all(g[c] for c in corners):
            continue  # an earlier deletion already opened this block
        pick = None
        for y, x in corners:
            m = _neighbor_code(g, y, x)
            if _SIMPLE_LUT[m] and _BCOUNT_LUT[m] >= 2:
                pick = (y, x)
                break
        if pick is None:
            for y, x in corners:
                if _SIMPLE_LUT[_neighbor_code(g, y, x)]:
                    pick = (y, x)
                    break
        if pick is None:
            pick = corners[0]
        g[pick] = 0
        changed = True
    return changed


def thin(grid: BinaryGrid, cfg: ThinningConfig | None = None) -> ThinResult:
    """Thin an ink mask to a one-pixel-wide skeleton.

    The result is always a subset of the input. Unless the iteration cap
    was hit (reported via ``iteration_limit_reached``), the output is a
    fixed point of the thinning rule and contains no 2x2 all-ink block.
    """
    cfg = cfg or ThinningConfig()
    g = grid.cells.astype(np.uint8).copy()
    iterations = 0
    limit_hit = False
    while True:
        stable = False
        while iterations < cfg.max_iterations:
            deleted = False
            for sub in (0, 1):
                mask = _delete_mask(g, sub)
                if mask.any():
                    g[mask] = 0
                    deleted = True
            iterations += 1
            if not deleted:
                stable = True
                break
        if not stable:
            limit_hit = True
            break
        if not _cleanup_pass(g):
            break
    return ThinResult(BinaryGrid(g), iterations, limit_hit)


def _shift_or(g: np.ndarray) -> np.ndarray:
    out = g.copy()
    for plane in _neighbor_planes(g):
        out |= plane
    return out


def _shift_and(g: np.ndarray) -> np.ndarray:
    # out-of-bounds counts as foreground so closing stays extensive
    out = g.copy()
    for plane in _neighbor_planes(g, pad_value=1):
        out &= plane
    return out


def dilate(grid: BinaryGrid, radius: int = 1) -> BinaryGrid:
    g = grid.cells.astype(np.uint8)
    for _ in range(radius):
        g = _shift_or(g)
    return BinaryGrid(g)


def erode(grid: BinaryGrid, radius: int = 1) -> BinaryGrid:
    g = grid.cells.astype(np.uint8)
    for _ in range(radius):
        g = _shift_and(g)
    return BinaryGrid(g)


def closing(grid: BinaryGrid, radius: int = 1) -> BinaryGrid:
    """Dilate then erode; seals pinholes that would spawn spurious loops."""
    return erode(dilate(grid, radius), radius)


def connected_components(grid: BinaryGrid) -> int:
    """Number of 8-connected foreground components."""
    g = grid.cells
    seen = np.zeros(g.shape, dtype=bool)
    h, w = g.shape
    count = 0
    for sy, sx in zip(*np.nonzero(g)):
        if seen[sy, sx]:
            continue
        count += 1
        queue = deque([(int(sy), int(sx))])
        seen[sy, sx] = True
        while queue:
            y, x = queue.popleft()
            for dy, dx in _OFFSETS:
                yy, xx = y + dy, x + dx
                if 0 <= yy < h and 0 <= xx < w and g[yy, xx] and not seen[yy, xx]:
                    seen[yy, xx] = True
                    queue.append((yy, xx))
    return count


def extract_skeleton(
    img: RasterImage,
    cfg: ThinningConfig | None = None,
    threshold=0.5,
    ink: str = "dark",
) -> RasterImage:
    """Binarize, optionally close, thin, optionally re-thicken, re-rasterize.

    The output is a grayscale image of the input's size with the skeleton
    drawn black on white.
    """
    cfg = cfg or ThinningConfig()
    gray = raster.to_grayscale(img)
    grid = raster.binarize(gray, threshold, ink)
    if cfg.pre_close:
        grid = closing(grid, 1)
    result = thin(grid, cfg)
    if result.iteration_limit_reached:
        warnings.warn(
            f"thinning stopped at the {cfg.max_iterations}-iteration cap",
            IterationLimitWarning,
            stacklevel=2,
        )
    s = result.grid
    if cfg.dilate_radius > 0:
        s = dilate(s, cfg.dilate_radius)
    return RasterImage(1.0 - s.cells.astype(np.float64))


def batch_skeletonize(
    src_dir,
    dst_dir,
    cfg: ThinningConfig | None = None,
    threshold=0.5,
    ink: str = "dark",
) -> dict:
    """Skeletonize every PNG under ``src_dir`` into a mirrored tree.

    Per-file failures are collected into the report instead of aborting
    the batch. Files are processed in sorted order so reruns are
    deterministic.
    """
    src = Path(src_dir)
    dst = Path(dst_dir)
    report = {"processed": 0, "warnings": []}
    for path in sorted(src.rglob("*.png")):
        rel = path.relative_to(src)
        try:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                img = raster.load_image(path)
                skel = extract_skeleton(img, cfg, threshold=threshold, ink=ink)
                raster.save_image(skel, dst / rel)
            for c in caught:
                report["warnings"].append(f"{rel}: {c.message}")
            report["processed"] += 1
        except SkelfontError as e:
            report["warnings"].append(f"{rel}: {e}")
    return report
