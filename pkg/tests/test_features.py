import math

import numpy as np
import pytest

from skyloop import features
from skyloop.features import (
    BORDER_MARGIN,
    GrayImage,
    ImageTooSmall,
    Keypoint,
    PatchOutOfBounds,
    build_pyramid,
    compute_orientation,
    compute_orientations,
    describe,
    detect,
    hamming_matrix,
    match,
)

# Independent segment-test oracle. The ring is written out by hand and the
# contiguity check walks runs directly, so it shares no code with the
# vectorized detector.
_ORACLE_RING = [
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
]


def fast_oracle_is_corner(px, x, y, t):
    c = int(px[y, x])
    flags_bright = []
    flags_dark = []
    for dx, dy in _ORACLE_RING:
        v = int(px[y + dy, x + dx])
        flags_bright.append(v > c + t)
        flags_dark.append(v < c - t)
    for flags in (flags_bright, flags_dark):
        doubled = flags + flags
        run = 0
        for f in doubled:
            run = run + 1 if f else 0
            if run >= 9:
                return True
    return False


def splat_dot(px, cx, cy, sigma=1.6, amp=110.0):
    r = int(3 * sigma) + 1
    x0, x1 = int(cx) - r, int(cx) + r + 1
    y0, y1 = int(cy) - r, int(cy) + r + 1
    ys, xs = np.mgrid[y0:y1, x0:x1]
    g = amp * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma**2))
    region = px[y0:y1, x0:x1].astype(np.float64) + g
    px[y0:y1, x0:x1] = np.clip(np.rint(region), 0, 255).astype(np.uint8)


def dot_image(centers, w=240, h=200, bg=96):
    px = np.full((h, w), bg, dtype=np.uint8)
    for cx, cy in centers:
        splat_dot(px, cx, cy)
    return GrayImage(px)


# ------------------------------------------------------------------ detect


def test_detect_finds_isolated_dots():
    centers = [(40.0, 40.0), (120.5, 52.25), (200.0, 44.0), (60.25, 100.0),
               (150.0, 120.75), (205.5, 160.0), (40.0, 160.5), (100.0, 158.0)]
    img = dot_image(centers)
    kps = detect(img, threshold=12)
    assert len(kps) >= len(centers)
    for cx, cy in centers:
        d = min(math.hypot(k.x - cx, k.y - cy) for k in kps)
        assert d < 1.0, f"dot at ({cx},{cy}) missed, nearest {d}"
    # nothing fires far away from every dot
    for k in kps:
        d = min(math.hypot(k.x - cx, k.y - cy) for cx, cy in centers)
        assert d < 4.0


def test_detected_pixels_pass_oracle_segment_test():
    rng = np.random.default_rng(40)
    centers = [(rng.uniform(30, 210), rng.uniform(30, 170)) for _ in range(25)]
    img = dot_image(centers)
    kps = detect(img, threshold=12)
    assert kps
    for k in kps:
        assert fast_oracle_is_corner(img.pixels, int(round(k.x - (k.x - int(k.x)))),
                                     int(round(k.y - (k.y - int(k.y)))), 12) or \
            fast_oracle_is_corner(img.pixels, int(k.x), int(k.y), 12)


def test_detect_on_blank_image_is_empty():
    img = GrayImage(np.full((100, 120), 128, dtype=np.uint8))
    assert detect(img) == []


def test_detect_respects_border_margin():
    img = dot_image([(10.0, 10.0), (100.0, 100.0)])
    kps = detect(img)
    for k in kps:
        assert BORDER_MARGIN <= k.x < img.width - BORDER_MARGIN
        assert BORDER_MARGIN <= k.y < img.height - BORDER_MARGIN
    # the interior dot is present, the border one suppressed
    assert any(math.hypot(k.x - 100, k.y - 100) < 1.0 for k in kps)
    assert not any(math.hypot(k.x - 10, k.y - 10) < 3.0 for k in kps)


def test_detect_per_cell_cap():
    rng = np.random.default_rng(41)
    px = np.full((200, 240), 96, dtype=np.uint8)
    # crowd one region with dots
    for _ in range(60):
        splat_dot(px, rng.uniform(25, 55), rng.uniform(25, 55))
    img = GrayImage(px)
    kps = detect(img, grid=(4, 4), max_per_cell=5)
    h, w = px.shape
    counts = {}
    for k in kps:
        cell = (int(k.y) * 4 // h, int(k.x) * 4 // w)
        counts[cell] = counts.get(cell, 0) + 1
    assert counts
    assert max(counts.values()) <= 5


def test_detect_output_ordering():
    rng = np.random.default_rng(42)
    centers = [(rng.uniform(30, 210), rng.uniform(30, 170)) for _ in range(30)]
    img = dot_image(centers)
    kps = detect(img, grid=(4, 4))
    h, w = img.pixels.shape
    keys = []
    for k in kps:
        cell = (min(int(k.y) * 4 // h, 3), min(int(k.x) * 4 // w, 3))
        keys.append((cell[0], cell[1], -k.response))
    assert keys == sorted(keys)


def test_detect_deterministic():
    rng = np.random.default_rng(43)
    centers = [(rng.uniform(30, 210), rng.uniform(30, 170)) for _ in range(20)]
    img = dot_image(centers)
    a = detect(img)
    b = detect(img)
    assert [(k.x, k.y, k.response) for k in a] == [(k.x, k.y, k.response) for k in b]


def test_detect_translation_equivariance():
    centers = [(60.0, 60.0), (120.0, 80.0), (90.0, 140.0)]
    img = dot_image(centers)
    dx, dy = 11, 7
    rolled = GrayImage(np.roll(np.roll(img.pixels, dy, axis=0), dx, axis=1))
    kps_a = detect(img)
    kps_b = detect(rolled)
    pos_a = sorted((round(k.x + dx, 3), round(k.y + dy, 3)) for k in kps_a)
    pos_b = sorted((round(k.x, 3), round(k.y, 3)) for k in kps_b)
    assert pos_a == pos_b


# ----------------------------------------------------------------- pyramid


def test_pyramid_sizes_and_too_small():
    img = GrayImage(np.zeros((128, 256), dtype=np.uint8))
    pyr = build_pyramid(img, 3, 2.0)
    assert [(p.height, p.width) for p in pyr] == [(128, 256), (64, 128), (32, 64)]
    with pytest.raises(ImageTooSmall):
        build_pyramid(img, 4, 2.0)


def test_pyramid_preserves_constant_image():
    img = GrayImage(np.full((64, 64), 77, dtype=np.uint8))
    for p in build_pyramid(img, 2, 2.0):
        assert np.all(p.pixels == 77)


# ------------------------------------------------------------- orientation


def test_orientation_of_single_offset_pixel():
    px = np.zeros((64, 64), dtype=np.uint8)
    px[32 + 2, 32 + 5] = 200  # offset (dx=5, dy=2) from the keypoint
    kp = Keypoint(32.0, 32.0)
    theta = compute_orientation(GrayImage(px), kp)
    assert abs(theta - math.atan2(2.0, 5.0)) < 1e-12


def test_orientation_zero_moment_patch():
    px = np.full((64, 64), 50, dtype=np.uint8)
    kp = Keypoint(32.0, 32.0)
    assert compute_orientation(GrayImage(px), kp) == 0.0


def test_orientation_range_and_patch_bounds():
    px = np.zeros((64, 64), dtype=np.uint8)
    px[30, 20] = 255
    kp = Keypoint(32.0, 32.0)
    theta = compute_orientation(GrayImage(px), kp)
    assert 0.0 <= theta < 2.0 * math.pi
    with pytest.raises(PatchOutOfBounds):
        compute_orientation(GrayImage(px), Keypoint(5.0, 32.0))


def test_orientation_rotates_with_content():
    rng = np.random.default_rng(44)
    px = np.zeros((80, 80), dtype=np.uint8)
    px[30:50, 30:50] = rng.integers(0, 255, size=(20, 20), dtype=np.uint8)
    kp = Keypoint(40.0, 40.0)
    theta = compute_orientation(GrayImage(px), kp)
    # quarter-turn of the content (y-down convention, see describe test)
    rot = GrayImage(np.ascontiguousarray(np.rot90(px, k=-1)))
    h = px.shape[0]
    kp2 = Keypoint(h - 1 - kp.y, kp.x)
    theta2 = compute_orientation(rot, kp2)
    diff = (theta2 - theta - math.pi / 2) % (2 * math.pi)
    diff = min(diff, 2 * math.pi - diff)
    assert diff < 0.05


# ---------------------------------------------------------------- describe


def test_describe_shapes_and_alignment():
    rng = np.random.default_rng(45)
    px = rng.integers(0, 255, size=(100, 140), dtype=np.uint8)
    kps = [Keypoint(30.0, 30.0), Keypoint(5.0, 50.0), Keypoint(100.0, 60.0)]
    for k in kps:
        k.orientation = 0.3
    kept, desc = describe(GrayImage(px), kps)
    # the keypoint at x=5 cannot fit the rotated pattern and is dropped
    assert [(k.x, k.y) for k in kept] == [(30.0, 30.0), (100.0, 60.0)]
    assert desc.shape == (2, 32)
    assert desc.dtype == np.uint8


def test_describe_empty_input():
    kept, desc = describe(GrayImage(np.zeros((64, 64), dtype=np.uint8)), [])
    assert kept == [] and desc.shape == (0, 32)


def test_describe_deterministic_and_seed_dependent():
    rng = np.random.default_rng(46)
    px = rng.integers(0, 255, size=(80, 80), dtype=np.uint8)
    img = GrayImage(px)
    kp = Keypoint(40.0, 40.0, orientation=1.0)
    _, d1 = describe(img, [kp], pattern_seed=42)
    _, d2 = describe(img, [kp], pattern_seed=42)
    _, d3 = describe(img, [kp], pattern_seed=43)
    assert np.array_equal(d1, d2)
    assert hamming_matrix(d1, d3)[0, 0] > 20


def test_describe_quarter_turn_invariance():
    rng = np.random.default_rng(47)
    px = rng.integers(0, 255, size=(90, 90), dtype=np.uint8)
    img = GrayImage(px)
    theta = 0.4
    kp = Keypoint(45.0, 45.0, orientation=theta)
    _, d1 = describe(img, [kp])
    # np.rot90(k=-1): new pixel (x', y') samples old (x = y', y = H-1-x'),
    # a quarter turn of the content in the y-down convention; the matching
    # descriptor orientation gains +pi/2.
    rot = GrayImage(np.ascontiguousarray(np.rot90(px, k=-1)))
    h = px.shape[0]
    kp2 = Keypoint(h - 1.0 - kp.y, kp.x, orientation=theta + math.pi / 2)
    _, d2 = describe(rot, [kp2])
    dist = int(hamming_matrix(d1, d2)[0, 0])
    assert dist <= 40, dist


# ------------------------------------------------------------------- match


def _random_descriptors(rng, n):
    return rng.integers(0, 256, size=(n, 32), dtype=np.uint8)


def _flip_bits(desc, count, rng):
    out = desc.copy()
    pos = rng.choice(256, size=count, replace=False)
    for p in pos:
        out[p // 8] ^= np.uint8(1 << (7 - p % 8))
    return out


def test_hamming_matrix_against_bit_count():
    rng = np.random.default_rng(48)
    a = _random_descriptors(rng, 6)
    b = _random_descriptors(rng, 5)
    d = hamming_matrix(a, b)
    for i in range(6):
        for j in range(5):
            expect = bin(int.from_bytes(a[i].tobytes(), "big")
                         ^ int.from_bytes(b[j].tobytes(), "big")).count("1")
            assert d[i, j] == expect


def test_match_identity_and_one_to_one():
    rng = np.random.default_rng(49)
    base = _random_descriptors(rng, 12)
    noisy = np.stack([_flip_bits(base[i], 6, rng) for i in range(12)])
    ms = match(base, noisy, max_distance=64, ratio=0.8)
    assert len(ms) == 12
    assert all(m.index_a == m.index_b for m in ms)
    assert len({m.index_b for m in ms}) == len(ms)


def test_match_empty_and_duplicate_cases():
    rng = np.random.default_rng(50)
    d = _random_descriptors(rng, 1)
    assert match(d, np.zeros((0, 32), dtype=np.uint8)) == []
    # duplicate targets: nearest equals second nearest, ratio fails
    dup = np.vstack([d, d])
    assert match(d, dup) == []


def test_match_max_distance_gate():
    rng = np.random.default_rng(51)
    a = _random_descriptors(rng, 1)
    far = _flip_bits(a[0], 120, rng)[None, :]
    assert match(a, far, max_distance=64) == []


def test_match_ratio_gate():
    rng = np.random.default_rng(52)
    a = _random_descriptors(rng, 1)
    b = np.stack([_flip_bits(a[0], 10, rng), _flip_bits(a[0], 12, rng)])
    # 10 vs 12 bits: 10 >= 0.8 * 12, so the ratio test rejects
    assert match(a, b, ratio=0.8) == []
    b2 = np.stack([_flip_bits(a[0], 5, rng), _flip_bits(a[0], 120, rng)])
    ms = match(a, b2, ratio=0.8)
    assert len(ms) == 1 and ms[0].index_b == 0


def test_match_cross_check():
    rng = np.random.default_rng(53)
    # b's nearest for index 0 is a[1], but a[1]'s nearest is b[1]; the pair
    # (a0, b0) must survive only if mutual
    a0 = _random_descriptors(rng, 1)[0]
    a1 = _flip_bits(a0, 30, rng)
    b0 = _flip_bits(a0, 4, rng)
    b1 = _flip_bits(a1, 4, rng)
    ms = match(np.stack([a0, a1]), np.stack([b0, b1]))
    assert {(m.index_a, m.index_b) for m in ms} == {(0, 0), (1, 1)}
