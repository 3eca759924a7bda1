"""Block matching between consecutive frames.

The pipeline finds reusable regions in five steps: partition the current
frame into a grid of equal blocks, find per-block motion with a pluggable
block search (diamond search by default), average the motion of well-matched
blocks into one global offset, re-verify every block at that uniform offset,
and merge adjacent verified blocks into maximal rectangles.

Block similarity is PSNR over all channels jointly (MSE pooled across
channels, peak value 255).  Identical blocks score the finite sentinel
``PSNR_MAX`` so the metric stays totally ordered.

Two accelerations are built in: Step 2 can search only every k-th grid row
and column (``skip_k``), and PSNR values computed during the search are
memoized so Step 4 re-verification can reuse them instead of recomputing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import EMPTY_RECT, Frame, Rect, RegionMapping

PSNR_MAX = 100.0

# Large/small diamond search patterns; offsets relative to the pattern center.
_LDSP = ((0, 0), (-2, 0), (2, 0), (0, -2), (0, 2), (-1, -1), (1, -1), (-1, 1), (1, 1))
_SDSP = ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1))
_TSS_DIRS = ((-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1))


@dataclass
class MatcherConfig:
    """Tuning knobs for the matcher.

    block_size: side of a square grid block, pixels.
    threshold_t: minimum PSNR (dB) for a block pair to count as matched.
    skip_k: grid stride for Step-2 searches (1 = search every block).
    search_range: maximum |offset| per axis explored by the block search.
    strategy: block-search strategy name; see SEARCH_STRATEGIES.
    reuse_memo: let Step 4 reuse PSNR values memoized during Step 2.
    """

    block_size: int = 10
    threshold_t: float = 20.0
    skip_k: int = 2
    search_range: int = 16
    strategy: str = "diamond"
    reuse_memo: bool = True

    def __post_init__(self):
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if self.skip_k < 1:
            raise ValueError("skip_k must be >= 1")
        if self.search_range < 0:
            raise ValueError("search_range must be >= 0")
        if not self.threshold_t > 0:
            raise ValueError("threshold_t must be > 0")
        if self.strategy not in SEARCH_STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; "
                             f"choose from {sorted(SEARCH_STRATEGIES)}")


@dataclass(frozen=True)
class BlockMatch:
    """Best match found for one grid block: offset into the previous frame."""

    block: Rect
    offset: tuple[int, int]
    psnr: float


@dataclass
class MatchStats:
    """Work counters, mostly for tests and the matcher benchmark."""

    searches: int = 0        # Step-2 block_search invocations
    psnr_evals: int = 0      # block-pair PSNR (SSE) computations, all steps
    verify_memo_hits: int = 0  # Step-4 lookups served from the Step-2 memo


@dataclass(frozen=True)
class MatchResult:
    mappings: list[RegionMapping]
    global_motion: tuple[int, int]
    match_ratio: float
    matched_block_count: int
    stats: MatchStats = field(default_factory=MatchStats)


def partition_grid(frame_w: int, frame_h: int, block_size: int) -> list[Rect]:
    """Row-major list of block_size x block_size tiles covering the frame.

    Right/bottom margins smaller than a full block are excluded; those
    pixels are never reusable.
    """
    if frame_w < block_size or frame_h < block_size:
        raise ValueError(f"frame too small: {frame_w}x{frame_h} for block size {block_size}")
    cols = frame_w // block_size
    rows = frame_h // block_size
    return [Rect(c * block_size, r * block_size, block_size, block_size)
            for r in range(rows) for c in range(cols)]


def psnr_from_sse(sse: float, count: int) -> float:
    """PSNR in dB for a squared-error sum over `count` 8-bit samples."""
    if sse == 0:
        return PSNR_MAX
    return 10.0 * math.log10(65025.0 * count / sse)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR between two equal-shaped 8-bit blocks, MSE pooled over channels."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"block shape mismatch: {a.shape} vs {b.shape}")
    d = (a.astype(np.float64) - b.astype(np.float64)).ravel()
    return psnr_from_sse(float(np.dot(d, d)), d.size)


class _BlockSearcher:
    """Candidate evaluation for one block: bounds checks, SSE memo, counters.

    Works on float64 copies of the frames; squared differences of 8-bit
    samples are exact integers in float64, so SSE values are identical no
    matter which code path or summation order produced them.
    """

    def __init__(self, cur64, ref64, block: Rect, cfg: MatcherConfig,
                 memo: dict, stats: MatchStats):
        self.block = block
        self.cfg = cfg
        self.memo = memo
        self.stats = stats
        self.ref = ref64
        self.ref_h = ref64.shape[1]
        self.ref_w = ref64.shape[2]
        self.cblk = np.ascontiguousarray(
            cur64[:, block.y:block.y2, block.x:block.x2]).ravel()
        self.count = self.cblk.size

    def valid(self, dx: int, dy: int) -> bool:
        sr = self.cfg.search_range
        if abs(dx) > sr or abs(dy) > sr:
            return False
        x = self.block.x + dx
        y = self.block.y + dy
        return 0 <= x and x + self.block.w <= self.ref_w and 0 <= y and y + self.block.h <= self.ref_h

    def sse(self, dx: int, dy: int) -> float:
        key = (dx, dy)
        hit = self.memo.get(key)
        if hit is not None:
            return hit
        x = self.block.x + dx
        y = self.block.y + dy
        d = self.cblk - self.ref[:, y:y + self.block.h, x:x + self.block.w].ravel()
        value = float(np.dot(d, d))
        self.memo[key] = value
        self.stats.psnr_evals += 1
        return value

    def best(self, candidates) -> tuple[int, int]:
        """Lowest-SSE candidate; ties prefer small |dx|+|dy|, then dy, then dx."""
        best_key = None
        best_off = None
        for dx, dy in candidates:
            if not self.valid(dx, dy):
                continue
            key = (self.sse(dx, dy), abs(dx) + abs(dy), dy, dx)
            if best_key is None or key < best_key:
                best_key = key
                best_off = (dx, dy)
        return best_off


def _diamond_search(s: _BlockSearcher) -> tuple[int, int]:
    # Large diamond until its best point is the center, then one small step.
    cx = cy = 0
    while True:
        bx, by = s.best((cx + ox, cy + oy) for ox, oy in _LDSP)
        if (bx, by) == (cx, cy):
            break
        cx, cy = bx, by
    return s.best((cx + ox, cy + oy) for ox, oy in _SDSP)


def _three_step_search(s: _BlockSearcher) -> tuple[int, int]:
    sr = s.cfg.search_range
    if sr == 0:
        s.sse(0, 0)
        return (0, 0)
    rounds = max(1, (sr - 1).bit_length())
    step = 1 << (rounds - 1)
    cx = cy = 0
    while step >= 1:
        cands = [(cx, cy)] + [(cx + ox * step, cy + oy * step) for ox, oy in _TSS_DIRS]
        cx, cy = s.best(cands)
        step //= 2
    return (cx, cy)


def _exhaustive_search(s: _BlockSearcher) -> tuple[int, int]:
    sr = s.cfg.search_range
    b = s.block
    dy_lo = max(-sr, -b.y)
    dy_hi = min(sr, s.ref_h - b.h - b.y)
    dx_lo = max(-sr, -b.x)
    dx_hi = min(sr, s.ref_w - b.w - b.x)
    if dy_lo > dy_hi or dx_lo > dx_hi:
        s.sse(0, 0)
        return (0, 0)
    region = s.ref[:, b.y + dy_lo:b.y + dy_hi + b.h, b.x + dx_lo:b.x + dx_hi + b.w]
    windows = np.lib.stride_tricks.sliding_window_view(region, (b.h, b.w), axis=(1, 2))
    d = windows - s.cblk.reshape(-1, 1, 1, b.h, b.w)
    sse = np.einsum("cijhw,cijhw->ij", d, d)
    dxs, dys = np.meshgrid(np.arange(dx_lo, dx_hi + 1), np.arange(dy_lo, dy_hi + 1))
    s.stats.psnr_evals += sse.size
    s.memo.update(zip(zip(dxs.ravel().tolist(), dys.ravel().tolist()),
                      sse.ravel().tolist()))
    order = np.lexsort((dxs.ravel(), dys.ravel(),
                        (np.abs(dxs) + np.abs(dys)).ravel(), sse.ravel()))
    i = int(order[0])
    return (int(dxs.ravel()[i]), int(dys.ravel()[i]))


SEARCH_STRATEGIES = {
    "diamond": _diamond_search,
    "three-step": _three_step_search,
    "exhaustive": _exhaustive_search,
}


def _search_block(cur64, ref64, block, cfg, block_memo, stats) -> BlockMatch:
    searcher = _BlockSearcher(cur64, ref64, block, cfg, block_memo, stats)
    dx, dy = SEARCH_STRATEGIES[cfg.strategy](searcher)
    return BlockMatch(block, (dx, dy), psnr_from_sse(searcher.sse(dx, dy), searcher.count))


def block_search(cur: Frame, ref: Frame, block: Rect, cfg: MatcherConfig) -> BlockMatch:
    """Find the best-matching same-size block in ref for `block` of cur.

    The search never proposes an offset that would push the candidate block
    outside ref or beyond cfg.search_range on either axis.
    """
    if cur.data.shape != ref.data.shape:
        raise ValueError("cur and ref must have identical dimensions")
    if not Rect(0, 0, cur.width, cur.height).contains(block) or block.is_empty:
        raise ValueError(f"block {block} outside frame")
    return _search_block(cur.data.astype(np.float64), ref.data.astype(np.float64),
                         block, cfg, {}, MatchStats())


def estimate_global_motion(matches: list[BlockMatch], threshold_t: float) -> tuple[int, int]:
    """Mean offset of matches scoring above the threshold, rounded to integers.

    Rounding is half-away-from-zero per axis.  With no match above the
    threshold the motion falls back to (0, 0).
    """
    selected = [m for m in matches if m.psnr > threshold_t]
    if not selected:
        return (0, 0)
    sx = sum(m.offset[0] for m in selected)
    sy = sum(m.offset[1] for m in selected)
    k = len(selected)
    return (_round_half_away(sx, k), _round_half_away(sy, k))


def _round_half_away(numer: int, denom: int) -> int:
    if numer >= 0:
        return (2 * numer + denom) // (2 * denom)
    return -((-2 * numer + denom) // (2 * denom))


def _verify_blocks(cur64, ref64, grid, motion, cfg, memo, stats) -> list[Rect]:
    mx, my = motion
    ref_h, ref_w = ref64.shape[1], ref64.shape[2]
    verified = []
    for block in grid:
        x = block.x + mx
        y = block.y + my
        if x < 0 or y < 0 or x + block.w > ref_w or y + block.h > ref_h:
            continue
        sse = None
        if cfg.reuse_memo:
            block_memo = memo.get((block.x, block.y))
            if block_memo is not None:
                sse = block_memo.get((mx, my))
                if sse is not None:
                    stats.verify_memo_hits += 1
        if sse is None:
            d = (cur64[:, block.y:block.y2, block.x:block.x2]
                 - ref64[:, y:y + block.h, x:x + block.w]).ravel()
            sse = float(np.dot(d, d))
            stats.psnr_evals += 1
        if psnr_from_sse(sse, block.area * cur64.shape[0]) > cfg.threshold_t:
            verified.append(block)
    return verified


def verify_blocks(cur: Frame, ref: Frame, grid: list[Rect], motion: tuple[int, int],
                  cfg: MatcherConfig, psnr_memo: dict | None = None,
                  stats: MatchStats | None = None) -> list[Rect]:
    """Step 4: keep blocks whose counterpart at the uniform motion offset
    lies inside ref and scores above the threshold.

    psnr_memo is the per-block memo filled during Step 2; entries for the
    exact (motion) offset are reused instead of recomputed.
    """
    return _verify_blocks(cur.data.astype(np.float64), ref.data.astype(np.float64),
                          grid, motion, cfg, psnr_memo or {}, stats or MatchStats())


def merge_blocks(verified: list[Rect], motion: tuple[int, int]) -> list[RegionMapping]:
    """Greedy two-pass merge of verified grid blocks into larger rectangles.

    First concatenate horizontally adjacent blocks within each grid row into
    strips, then stack vertically adjacent strips of identical x-extent.
    """
    mx, my = motion
    strips: list[Rect] = []
    for block in sorted(verified, key=lambda r: (r.y, r.x)):
        last = strips[-1] if strips else None
        if last is not None and last.y == block.y and last.x2 == block.x and last.h == block.h:
            strips[-1] = Rect(last.x, last.y, last.w + block.w, last.h)
        else:
            strips.append(block)

    merged: list[Rect] = []
    for strip in sorted(strips, key=lambda r: (r.x, r.w, r.y)):
        last = merged[-1] if merged else None
        if last is not None and last.x == strip.x and last.w == strip.w and last.y2 == strip.y:
            merged[-1] = Rect(last.x, last.y, last.w, last.h + strip.h)
        else:
            merged.append(strip)

    merged.sort(key=lambda r: (r.y, r.x))
    return [RegionMapping(dst=r, src=r.translate(mx, my)) for r in merged]


def match_frames(cur: Frame, ref: Frame, cfg: MatcherConfig | None = None) -> MatchResult:
    """Run the full five-step matching pipeline on a frame pair."""
    cfg = cfg or MatcherConfig()
    if cur.data.shape != ref.data.shape:
        raise ValueError(f"frame dimensions differ: {cur.data.shape} vs {ref.data.shape}")
    cur64 = cur.data.astype(np.float64)
    ref64 = ref.data.astype(np.float64)

    grid = partition_grid(cur.width, cur.height, cfg.block_size)
    cols = cur.width // cfg.block_size

    stats = MatchStats()
    memo: dict[tuple[int, int], dict] = {}
    matches = []
    for i, block in enumerate(grid):
        if (i // cols) % cfg.skip_k or (i % cols) % cfg.skip_k:
            continue
        block_memo = memo.setdefault((block.x, block.y), {})
        matches.append(_search_block(cur64, ref64, block, cfg, block_memo, stats))
        stats.searches += 1

    motion = estimate_global_motion(matches, cfg.threshold_t)
    verified = _verify_blocks(cur64, ref64, grid, motion, cfg, memo, stats)
    mappings = merge_blocks(verified, motion)

    covered = sum(m.dst.area for m in mappings)
    return MatchResult(
        mappings=mappings,
        global_motion=motion,
        match_ratio=covered / (cur.width * cur.height),
        matched_block_count=len(verified),
        stats=stats,
    )
