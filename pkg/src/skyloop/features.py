"""Sparse image features: FAST segment-test corners on an image pyramid,
rotation-aware 256-bit binary descriptors and Hamming-distance matching.

Keypoint coordinates are expressed at their own octave's resolution; callers
that need level-0 pixels multiply by scale_factor ** octave.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import SkyloopError

# Detection stays this far from every image edge so that orientation patches
# and rotated descriptor patterns (disc of radius 15) never leave the image.
BORDER_MARGIN = 19

DESCRIPTOR_BITS = 256
DESCRIPTOR_BYTES = DESCRIPTOR_BITS // 8
PATTERN_RADIUS = 15
DEFAULT_PATTERN_SEED = 42

MIN_LEVEL_SIDE = 32


class ImageTooSmall(SkyloopError):
    """A pyramid level would fall below the minimum usable size."""


class PatchOutOfBounds(SkyloopError):
    """Requested patch leaves the image."""


@dataclass(frozen=True)
class GrayImage:
    """8-bit grayscale image, row-major (height, width) buffer."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.dtype != np.uint8 or px.ndim != 2:
            raise ValueError("GrayImage wants a 2-D uint8 array")
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass
class Keypoint:
    x: float
    y: float
    response: float = 0.0
    orientation: float = 0.0
    octave: int = 0


@dataclass
class Match:
    index_a: int
    index_b: int
    distance: int


# 16-point Bresenham circle of radius 3, clockwise from 12 o'clock
# (x right, y down).
_RING = np.array([
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
], dtype=np.int64)


def _build_contiguity_lut(arc: int = 9) -> np.ndarray:
    """lut[m] is True when 16-bit ring mask m has >= arc contiguous set bits
    (cyclically)."""
    masks = np.arange(1 << 16, dtype=np.uint32)
    doubled = masks | (masks << np.uint32(16))  # wraparound
    window = np.uint32((1 << arc) - 1)
    lut = np.zeros(1 << 16, dtype=bool)
    for start in range(16):
        seg = (doubled >> np.uint32(start)) & window
        lut |= seg == window
    return lut


_CONTIG_LUT: np.ndarray | None = None


def _contiguity_lut() -> np.ndarray:
    global _CONTIG_LUT
    if _CONTIG_LUT is None:
        _CONTIG_LUT = _build_contiguity_lut()
    return _CONTIG_LUT


def build_pyramid(img: GrayImage, levels: int, scale_factor: float = 2.0) -> list[GrayImage]:
    """Downsample by scale_factor per level with bilinear area sampling.

    Raises ImageTooSmall when any requested level would be under 32x32.
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if scale_factor <= 1.0:
        raise ValueError("scale_factor must exceed 1")
    out = [img]
    src = img.pixels.astype(np.float32)
    for lv in range(1, levels):
        s = scale_factor**lv
        w = int(img.width / s)
        h = int(img.height / s)
        if w < MIN_LEVEL_SIDE or h < MIN_LEVEL_SIDE:
            raise ImageTooSmall(
                f"level {lv} would be {w}x{h}, below {MIN_LEVEL_SIDE}x{MIN_LEVEL_SIDE}")
        xs = (np.arange(w) + 0.5) * s - 0.5
        ys = (np.arange(h) + 0.5) * s - 0.5
        x0 = np.clip(np.floor(xs).astype(int), 0, img.width - 2)
        y0 = np.clip(np.floor(ys).astype(int), 0, img.height - 2)
        ax = (xs - x0).astype(np.float32)
        ay = (ys - y0).astype(np.float32)
        top = src[y0][:, x0] * (1 - ax) + src[y0][:, x0 + 1] * ax
        bot = src[y0 + 1][:, x0] * (1 - ax) + src[y0 + 1][:, x0 + 1] * ax
        lvl = top * (1 - ay[:, None]) + bot * ay[:, None]
        out.append(GrayImage(np.clip(np.rint(lvl), 0, 255).astype(np.uint8)))
    if img.width < MIN_LEVEL_SIDE or img.height < MIN_LEVEL_SIDE:
        raise ImageTooSmall(f"base level is {img.width}x{img.height}")
    return out


def corner_response_map(img: GrayImage, threshold: int) -> np.ndarray:
    """FAST 9-of-16 segment test response for every pixel.

    Response is the larger of the bright-arc and dark-arc margin sums; zero
    for pixels that fail the segment test or sit within 3 px of the border.
    """
    px = img.pixels.astype(np.int32)
    h, w = px.shape
    resp = np.zeros((h, w), dtype=np.int32)
    if h < 7 or w < 7:
        return resp
    center = px[3:h - 3, 3:w - 3]
    hi = center + threshold
    lo = center - threshold
    # cardinal pretest: a 9-long arc leaves a 7-long gap, which can hide at
    # most 2 of the 4 cardinal ring pixels, so any corner has >= 2 bright
    # (or dark) cardinals; everything else is skipped unexamined
    bcount = np.zeros(center.shape, dtype=np.uint8)
    dcount = np.zeros(center.shape, dtype=np.uint8)
    for dx, dy in (_RING[0], _RING[4], _RING[8], _RING[12]):
        ring = px[3 + dy:h - 3 + dy, 3 + dx:w - 3 + dx]
        bcount += ring > hi
        dcount += ring < lo
    cy, cx = np.nonzero((bcount >= 2) | (dcount >= 2))
    if len(cy) == 0:
        return resp
    hi = hi[cy, cx]
    lo = lo[cy, cx]
    bright_mask = np.zeros(len(cy), dtype=np.uint16)
    dark_mask = np.zeros(len(cy), dtype=np.uint16)
    bright_sum = np.zeros(len(cy), dtype=np.int32)
    dark_sum = np.zeros(len(cy), dtype=np.int32)
    for i, (dx, dy) in enumerate(_RING):
        ring = px[cy + 3 + dy, cx + 3 + dx]
        b = ring > hi
        d = ring < lo
        bright_mask |= b.astype(np.uint16) << i
        dark_mask |= d.astype(np.uint16) << i
        bright_sum += np.where(b, ring - hi, 0)
        dark_sum += np.where(d, lo - ring, 0)
    lut = _contiguity_lut()
    score = np.maximum(np.where(lut[bright_mask], bright_sum, 0),
                       np.where(lut[dark_mask], dark_sum, 0))
    resp[cy + 3, cx + 3] = score
    return resp


def _subpixel_offset(resp: np.ndarray, y: np.ndarray, x: np.ndarray):
    """Parabolic peak interpolation on the response map, clamped to +-0.5."""
    c = resp[y, x].astype(np.float64)
    left = resp[y, x - 1].astype(np.float64)
    right = resp[y, x + 1].astype(np.float64)
    up = resp[y - 1, x].astype(np.float64)
    down = resp[y + 1, x].astype(np.float64)
    denx = left - 2.0 * c + right
    deny = up - 2.0 * c + down
    dx = np.where(denx < 0.0, 0.5 * (left - right) / np.where(denx == 0, 1, denx), 0.0)
    dy = np.where(deny < 0.0, 0.5 * (up - down) / np.where(deny == 0, 1, deny), 0.0)
    return np.clip(dx, -0.5, 0.5), np.clip(dy, -0.5, 0.5)


def detect(img: GrayImage, threshold: int = 12, grid=(8, 8),
           max_per_cell: int = 25) -> list[Keypoint]:
    """FAST corners with per-cell non-max suppression.

    The image is bucketed into grid cells; each keeps at most max_per_cell
    corners, strongest first. Output ordering is (cell row, cell col,
    descending response), which makes detection deterministic.
    """
    resp = corner_response_map(img, threshold)
    h, w = resp.shape
    m = BORDER_MARGIN
    if m > 0:
        resp[:m, :] = 0
        resp[-m:, :] = 0
        resp[:, :m] = 0
        resp[:, -m:] = 0
    # 3x3 local maxima; the asymmetric >=/> rule breaks plateau ties
    # deterministically toward the top-left pixel.
    r = resp
    inner = r[1:-1, 1:-1]
    is_max = (
        (inner > 0)
        & (inner > r[:-2, :-2]) & (inner > r[:-2, 1:-1]) & (inner > r[:-2, 2:])
        & (inner > r[1:-1, :-2]) & (inner >= r[1:-1, 2:])
        & (inner >= r[2:, :-2]) & (inner >= r[2:, 1:-1]) & (inner >= r[2:, 2:])
    )
    ys, xs = np.nonzero(is_max)
    ys = ys + 1
    xs = xs + 1
    if len(ys) == 0:
        return []
    dx, dy = _subpixel_offset(resp, ys, xs)
    fx = xs + dx
    fy = ys + dy
    responses = resp[ys, xs].astype(np.float64)

    rows, cols = grid
    cell_r = np.minimum((fy * rows / h).astype(np.int64), rows - 1)
    cell_c = np.minimum((fx * cols / w).astype(np.int64), cols - 1)
    # order candidates by (cell row, cell col, -response, y, x)
    order = np.lexsort((xs, ys, -responses, cell_c, cell_r))
    out: list[Keypoint] = []
    kept_in_cell = 0
    last_cell = (-1, -1)
    for idx in order:
        cell = (int(cell_r[idx]), int(cell_c[idx]))
        if cell != last_cell:
            last_cell = cell
            kept_in_cell = 0
        if kept_in_cell >= max_per_cell:
            continue
        kept_in_cell += 1
        out.append(Keypoint(float(fx[idx]), float(fy[idx]),
                            float(responses[idx])))
    return out


def _orientation_disc(radius: int):
    dy, dx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    mask = dx * dx + dy * dy <= radius * radius
    return dx[mask], dy[mask]


def compute_orientations(img: GrayImage, kps: list[Keypoint],
                         patch_radius: int = 15) -> None:
    """Assign intensity-centroid orientations in [0, 2pi) to keypoints,
    in place. Raises PatchOutOfBounds if any patch leaves the image."""
    if not kps:
        return
    dx, dy = _orientation_disc(patch_radius)
    xs = np.array([int(round(k.x)) for k in kps])
    ys = np.array([int(round(k.y)) for k in kps])
    h, w = img.pixels.shape
    if (xs.min() < patch_radius or ys.min() < patch_radius
            or xs.max() >= w - patch_radius or ys.max() >= h - patch_radius):
        raise PatchOutOfBounds("orientation patch leaves the image")
    patch = img.pixels[ys[:, None] + dy[None, :], xs[:, None] + dx[None, :]]
    patch = patch.astype(np.float64)
    m10 = patch @ dx.astype(np.float64)
    m01 = patch @ dy.astype(np.float64)
    for i, kp in enumerate(kps):
        if m10[i] == 0.0 and m01[i] == 0.0:
            kp.orientation = 0.0
        else:
            kp.orientation = math.atan2(m01[i], m10[i]) % (2.0 * math.pi)


def compute_orientation(img: GrayImage, kp: Keypoint,
                        patch_radius: int = 15) -> float:
    """Orientation of a single keypoint (see compute_orientations)."""
    compute_orientations(img, [kp], patch_radius)
    return kp.orientation


_PATTERN_CACHE: dict[int, np.ndarray] = {}


def _sample_pattern(seed: int) -> np.ndarray:
    """(256, 4) array of (x1, y1, x2, y2) comparison offsets drawn once per
    seed, uniformly inside a disc of PATTERN_RADIUS pixels."""
    if seed in _PATTERN_CACHE:
        return _PATTERN_CACHE[seed]
    rng = np.random.default_rng(seed)
    pts = np.empty((2 * DESCRIPTOR_BITS, 2))
    n = 0
    while n < len(pts):
        cand = rng.uniform(-PATTERN_RADIUS, PATTERN_RADIUS, size=(64, 2))
        good = cand[np.sum(cand * cand, axis=1) <= PATTERN_RADIUS**2]
        take = min(len(good), len(pts) - n)
        pts[n:n + take] = good[:take]
        n += take
    pattern = np.hstack([pts[0::2], pts[1::2]])
    _PATTERN_CACHE[seed] = pattern
    return pattern


def describe(img: GrayImage, kps: list[Keypoint],
             pattern_seed: int = DEFAULT_PATTERN_SEED):
    """Binary descriptors from 256 pairwise intensity comparisons.

    The sampling pattern is rotated by each keypoint's orientation before
    lookup. Keypoints whose rotated pattern exits the image are dropped, and
    the returned keypoint list is aligned with the descriptor rows.

    Returns (kept_keypoints, descriptors) where descriptors is (N, 32) uint8.
    """
    if not kps:
        return [], np.zeros((0, DESCRIPTOR_BYTES), dtype=np.uint8)
    pattern = _sample_pattern(pattern_seed)
    p1 = pattern[:, :2]
    p2 = pattern[:, 2:]
    cos = np.array([math.cos(k.orientation) for k in kps])
    sin = np.array([math.sin(k.orientation) for k in kps])
    rot = np.stack([np.stack([cos, -sin], axis=-1),
                    np.stack([sin, cos], axis=-1)], axis=-2)  # (N, 2, 2)
    c = np.array([[k.x, k.y] for k in kps])  # (N, 2)
    q1 = np.einsum("nij,pj->npi", rot, p1) + c[:, None, :]
    q2 = np.einsum("nij,pj->npi", rot, p2) + c[:, None, :]
    i1 = np.rint(q1).astype(np.int64)
    i2 = np.rint(q2).astype(np.int64)
    h, w = img.pixels.shape
    all_pts = np.concatenate([i1, i2], axis=1)
    ok = ((all_pts[..., 0] >= 0) & (all_pts[..., 0] < w)
          & (all_pts[..., 1] >= 0) & (all_pts[..., 1] < h)).all(axis=1)
    kept = [kp for kp, good in zip(kps, ok) if good]
    if not kept:
        return [], np.zeros((0, DESCRIPTOR_BYTES), dtype=np.uint8)
    i1 = i1[ok]
    i2 = i2[ok]
    v1 = img.pixels[i1[..., 1], i1[..., 0]]
    v2 = img.pixels[i2[..., 1], i2[..., 0]]
    bits = v1 < v2
    desc = np.packbits(bits, axis=1)
    return kept, desc


_POPCOUNT = np.unpackbits(np.arange(256, dtype=np.uint8)[:, None],
                          axis=1).sum(axis=1).astype(np.uint8)


def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(len(a), len(b)) matrix of Hamming distances between descriptor rows."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)), dtype=np.int32)
    x = a[:, None, :] ^ b[None, :, :]
    return _POPCOUNT[x].sum(axis=2, dtype=np.int32)


def match(desc_a: np.ndarray, desc_b: np.ndarray, max_distance: int = 64,
          ratio: float = 0.8) -> list[Match]:
    """Mutually-consistent nearest-neighbour matches with a ratio test.

    A match (i, j) is kept when j is i's nearest neighbour within
    max_distance, strictly closer than ratio times the second-nearest, and i
    is also j's nearest. The result is one-to-one.
    """
    if len(desc_a) == 0 or len(desc_b) == 0:
        return []
    d = hamming_matrix(desc_a, desc_b)
    nearest_j = np.argmin(d, axis=1)
    nearest_dist = d[np.arange(len(desc_a)), nearest_j]
    if d.shape[1] >= 2:
        part = np.partition(d, 1, axis=1)
        second = part[:, 1]
    else:
        second = np.full(len(desc_a), np.iinfo(np.int32).max)
    rev_nearest_i = np.argmin(d, axis=0)
    out: list[Match] = []
    used_b: set[int] = set()
    for i in range(len(desc_a)):
        j = int(nearest_j[i])
        if nearest_dist[i] > max_distance:
            continue
        if not (nearest_dist[i] < ratio * second[i]):
            continue
        if int(rev_nearest_i[j]) != i:
            continue
        if j in used_b:
            continue
        used_b.add(j)
        out.append(Match(i, j, int(nearest_dist[i])))
    return out
