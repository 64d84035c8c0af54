"""Monocular visual odometry over frame sequences.

Pipeline shape: features are chained frame to frame inside a small search
window (motion between consecutive frames is a few pixels, so position plus
descriptor distance disambiguates reliably even in repetitive scenes). Chained
tracks feed two-view initialization (normalized eight-point essential matrix
in RANSAC, cheirality-disambiguated decomposition, DLT triangulation, median
depth normalized to 1), then per-frame pose refinement (Levenberg-Marquardt on
the se(3) twist with Huber reweighting), keyframe insertion, triangulation of
new map points and a sliding-window local bundle adjustment with the first
keyframe as gauge anchor. No loop closure, no relocalization: tracking and
mapping are strictly sequential.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import features as feat
from . import geom
from .errors import SkyloopError
from .features import GrayImage
from .frames import FrameSequence
from .geom import CameraIntrinsics, RigidTransform, Rotation
from .trajectory import Trajectory, TrajectorySample


class InsufficientMatches(SkyloopError):
    """Too few correspondences between the initialization pair."""


class InsufficientParallax(SkyloopError):
    """Median triangulation angle below the minimum; geometry unusable."""


class DegenerateMotion(SkyloopError):
    """Essential-matrix consensus too weak to trust."""


class TooFewCorrespondences(SkyloopError):
    """Pose refinement needs at least 4 point-pixel pairs."""


class Diverged(SkyloopError):
    """Damping exceeded its ceiling without any cost reduction."""


class CheiralityFailure(SkyloopError):
    """Triangulated point falls behind a camera."""


class LowParallax(SkyloopError):
    """Triangulation rays nearly parallel (or zero baseline)."""


class HighReprojectionError(SkyloopError):
    """Triangulated point does not reproject near its measurements."""


class InitializationFailed(SkyloopError):
    """No frame pair initialized the map within the allowed window."""


@dataclass
class OdometryConfig:
    # front end
    max_features: int = 1000
    pyramid_levels: int = 2
    scale_factor: float = 2.0
    fast_threshold: int = 12
    grid: tuple = (8, 8)
    max_per_cell: int = 25
    pattern_seed: int = feat.DEFAULT_PATTERN_SEED
    # chained matching
    match_max_hamming: int = 64
    track_search_radius_px: float = 30.0
    init_search_radius_px: float = 60.0
    # two-view initialization
    init_min_matches: int = 50
    init_max_frames: int = 60
    init_min_flow_px: float = 8.0
    init_window_frames: int = 30
    ransac_iterations: int = 200
    inlier_threshold_px: float = 1.5
    min_inlier_ratio: float = 0.5
    min_parallax_deg: float = 1.0
    # optimization
    huber_delta_px: float = 2.0
    lm_max_iterations: int = 20
    lm_step_epsilon: float = 1e-10
    lm_max_damping: float = 1e8
    # triangulation acceptance
    triangulation_reproj_px: float = 2.0
    # tracking and keyframe policy
    min_track_inliers: int = 15
    max_lost_frames: int = 20
    keyframe_ratio: float = 0.8
    keyframe_max_interval: int = 10
    # local bundle adjustment
    ba_window: int = 4
    ba_max_iterations: int = 10
    cull_reproj_px: float = 3.0
    covisibility_min_shared: int = 15
    # synthetic measurement noise (testing hook), std in pixels
    measurement_noise_std_px: float = 0.0
    seed: int = 0


# ----------------------------------------------------------------- frames


@dataclass
class Frame:
    """Per-frame feature bundle, coordinates at level-0 pixels."""

    index: int
    timestamp: float
    xy: np.ndarray          # (N, 2) float64
    desc: np.ndarray        # (N, 32) uint8
    response: np.ndarray    # (N,)
    octave: np.ndarray      # (N,)

    @staticmethod
    def extract(image: GrayImage, cfg: OdometryConfig, index: int = 0,
                timestamp: float = 0.0) -> "Frame":
        pyr = feat.build_pyramid(image, cfg.pyramid_levels, cfg.scale_factor)
        xs, descs, resp, octs = [], [], [], []
        for lvl, img in enumerate(pyr):
            kps = feat.detect(img, cfg.fast_threshold, cfg.grid,
                              cfg.max_per_cell)
            if not kps:
                continue
            feat.compute_orientations(img, kps, feat.PATTERN_RADIUS)
            kept, d = feat.describe(img, kps, cfg.pattern_seed)
            if not kept:
                continue
            s = cfg.scale_factor**lvl
            for kp in kept:
                kp.octave = lvl
            xs.append(np.array([[kp.x * s, kp.y * s] for kp in kept]))
            resp.append(np.array([kp.response for kp in kept]))
            octs.append(np.full(len(kept), lvl, dtype=np.int64))
            descs.append(d)
        if not xs:
            return Frame(index, timestamp, np.zeros((0, 2)),
                         np.zeros((0, feat.DESCRIPTOR_BYTES), dtype=np.uint8),
                         np.zeros(0), np.zeros(0, dtype=np.int64))
        xy = np.vstack(xs)
        desc = np.vstack(descs)
        response = np.concatenate(resp)
        octave = np.concatenate(octs)
        if len(xy) > cfg.max_features:
            order = np.lexsort((xy[:, 0], xy[:, 1], octave, -response))
            keep = np.sort(order[:cfg.max_features])
            xy, desc = xy[keep], desc[keep]
            response, octave = response[keep], octave[keep]
        return Frame(index, timestamp, xy, desc, response, octave)

    def __len__(self) -> int:
        return len(self.xy)


def _window_match(xy_a, desc_a, xy_b, desc_b, radius: float,
                  max_hamming: int):
    """Mutual-best guided matching inside a pixel radius.

    Score is Hamming distance with a sub-integer positional tie-break, so
    lookalike features resolve to the nearest candidate. Returns index pairs
    (ia, ib), one-to-one.
    """
    if len(xy_a) == 0 or len(xy_b) == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    d2 = np.sum((xy_a[:, None, :] - xy_b[None, :, :]) ** 2, axis=2)
    within = d2 <= radius * radius
    ia, ib = np.nonzero(within)
    if len(ia) == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    ham = feat._POPCOUNT[desc_a[ia] ^ desc_b[ib]].sum(axis=1).astype(np.float64)
    score = np.full(d2.shape, np.inf)
    ok = ham <= max_hamming
    score[ia[ok], ib[ok]] = ham[ok] + np.sqrt(d2[ia[ok], ib[ok]]) / (4.0 * radius)
    best_b = np.argmin(score, axis=1)
    best_a = np.argmin(score, axis=0)
    rows = np.arange(len(xy_a))
    sel = np.isfinite(score[rows, best_b]) & (best_a[best_b] == rows)
    return rows[sel], best_b[rows[sel]]


# ------------------------------------------------------------ projection


def _pi_jacobian(pc: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """(N, 2, 3) Jacobian of pinhole projection wrt the camera-frame point."""
    n = len(pc)
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    a = np.zeros((n, 2, 3))
    a[:, 0, 0] = k.fx / z
    a[:, 0, 2] = -k.fx * x / (z * z)
    a[:, 1, 1] = k.fy / z
    a[:, 1, 2] = -k.fy * y / (z * z)
    return a


_BAD_RESIDUAL = 1e6


def _residuals(rm, t, pts, meas, k):
    """Residuals (N, 2) of projecting pts through (rm, t); points with
    non-positive depth get a large sentinel residual."""
    pc = pts @ rm.T + t
    z = pc[:, 2]
    good = z > geom.MIN_PROJECT_DEPTH
    r = np.full((len(pts), 2), _BAD_RESIDUAL)
    if good.any():
        uv = geom.project_many(k, pc[good])
        r[good] = uv - meas[good]
    return r, pc, good


def reprojection_jacobians(pose: RigidTransform, point, k: CameraIntrinsics):
    """Projection of a world point plus its Jacobians.

    Returns (uv, j_pose, j_point): j_pose is the (2, 6) derivative wrt a
    left-multiplicative twist (wx, wy, wz, vx, vy, vz) on the world-to-camera
    pose, j_point the (2, 3) derivative wrt the world point.
    """
    rm = pose.rotation.matrix()
    pc = rm @ np.asarray(point, dtype=float) + pose.translation
    if pc[2] <= geom.MIN_PROJECT_DEPTH:
        raise geom.NonPositiveDepth(f"depth {pc[2]}")
    uv = geom.project(k, pc)
    a = _pi_jacobian(pc[None, :], k)[0]
    j_pose = np.zeros((2, 6))
    j_pose[:, :3] = a @ (-geom._skew(pc))
    j_pose[:, 3:] = a
    j_point = a @ rm
    return uv, j_pose, j_point


# -------------------------------------------------------------- tracking


@dataclass
class TrackResult:
    pose: RigidTransform
    num_inliers: int
    mean_reprojection_px: float
    status: str                      # "OK" or "LOST"
    outlier_mask: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))
    frame_index: int = -1
    point_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, int))


def optimize_pose(initial_pose: RigidTransform, points: np.ndarray,
                  pixels: np.ndarray, k: CameraIntrinsics,
                  cfg: OdometryConfig) -> TrackResult:
    """Levenberg-Marquardt pose refinement with Huber reweighting.

    Minimizes the robust reprojection cost of world points against their
    pixel measurements over the world-to-camera pose. Accepted steps never
    increase the cost; correspondences whose weighted residual exceeds the
    inlier threshold are flagged in outlier_mask.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    if len(points) < 4:
        raise TooFewCorrespondences(f"{len(points)} < 4")
    if len(points) != len(pixels):
        raise ValueError("points and pixels must align")
    rm = initial_pose.rotation.matrix()
    t = initial_pose.translation.copy()
    delta_h = cfg.huber_delta_px

    def robust_cost(res):
        return geom.huber_cost(np.linalg.norm(res, axis=1), delta_h)

    r, pc, good = _residuals(rm, t, points, pixels, k)
    cost = robust_cost(r)
    lam = 1e-3
    for _ in range(cfg.lm_max_iterations):
        norms = np.linalg.norm(r, axis=1)
        w = np.where(norms <= delta_h, 1.0,
                     delta_h / np.maximum(norms, 1e-12))
        w = np.where(good, w, 0.0)
        a = _pi_jacobian(np.where(good[:, None], pc, [0.0, 0.0, 1.0]), k)
        jac = np.zeros((len(points), 2, 6))
        sk = np.zeros((len(points), 3, 3))
        sk[:, 0, 1] = -pc[:, 2]
        sk[:, 0, 2] = pc[:, 1]
        sk[:, 1, 0] = pc[:, 2]
        sk[:, 1, 2] = -pc[:, 0]
        sk[:, 2, 0] = -pc[:, 1]
        sk[:, 2, 1] = pc[:, 0]
        jac[:, :, :3] = -np.einsum("nij,njk->nik", a, sk)
        jac[:, :, 3:] = a
        jw = jac * w[:, None, None]
        h = np.einsum("nia,nib->ab", jw, jac)
        g = np.einsum("nia,ni->a", jw, r)
        stepped = False
        converged = False
        while lam <= cfg.lm_max_damping:
            damped = h + lam * np.diag(np.maximum(np.diag(h), 1e-12))
            try:
                delta = np.linalg.solve(damped, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            if float(np.linalg.norm(delta)) < cfg.lm_step_epsilon:
                converged = True
                break
            upd = geom.se3_exp(delta)
            rm_new = upd.rotation.matrix() @ rm
            t_new = upd.rotation.matrix() @ t + upd.translation
            r_new, pc_new, good_new = _residuals(rm_new, t_new, points,
                                                 pixels, k)
            cost_new = robust_cost(r_new)
            if cost_new <= cost:
                rm, t = rm_new, t_new
                r, pc, good = r_new, pc_new, good_new
                cost = cost_new
                lam = max(lam / 3.0, 1e-10)
                stepped = True
                break
            lam *= 10.0
        if converged:
            break
        if not stepped:
            raise Diverged(f"damping passed {cfg.lm_max_damping:g}")
    norms = np.linalg.norm(r, axis=1)
    w = np.where(norms <= delta_h, 1.0, delta_h / np.maximum(norms, 1e-12))
    weighted = np.sqrt(w) * norms
    outliers = (weighted > cfg.inlier_threshold_px) | ~good
    inliers = ~outliers
    mean_err = float(norms[inliers].mean()) if inliers.any() else float("inf")
    status = "OK" if int(inliers.sum()) >= cfg.min_track_inliers else "LOST"
    pose = RigidTransform(Rotation.from_matrix(rm), t)
    return TrackResult(pose, int(inliers.sum()), mean_err, status, outliers)


# ---------------------------------------------------------- triangulation


def _camera_center(pose: RigidTransform) -> np.ndarray:
    return geom.invert(pose).translation


def _triangulate_batch(pose_a: RigidTransform, pose_b: RigidTransform,
                       xy_a: np.ndarray, xy_b: np.ndarray,
                       k: CameraIntrinsics):
    """Vectorized DLT. Returns (points (N,3), z_a, z_b, angles_rad, reproj
    error max of the two views)."""
    km = k.matrix()
    pa = km @ np.hstack([pose_a.rotation.matrix(),
                         pose_a.translation[:, None]])
    pb = km @ np.hstack([pose_b.rotation.matrix(),
                         pose_b.translation[:, None]])
    n = len(xy_a)
    a = np.empty((n, 4, 4))
    a[:, 0] = xy_a[:, 0, None] * pa[2] - pa[0]
    a[:, 1] = xy_a[:, 1, None] * pa[2] - pa[1]
    a[:, 2] = xy_b[:, 0, None] * pb[2] - pb[0]
    a[:, 3] = xy_b[:, 1, None] * pb[2] - pb[1]
    _, _, vt = np.linalg.svd(a)
    hom = vt[:, 3, :]
    w = hom[:, 3]
    w = np.where(np.abs(w) < 1e-15, 1e-15, w)
    pts = hom[:, :3] / w[:, None]
    pc_a = pts @ pose_a.rotation.matrix().T + pose_a.translation
    pc_b = pts @ pose_b.rotation.matrix().T + pose_b.translation
    ca = _camera_center(pose_a)
    cb = _camera_center(pose_b)
    ra = pts - ca
    rb = pts - cb
    na = np.linalg.norm(ra, axis=1)
    nb = np.linalg.norm(rb, axis=1)
    cosang = np.sum(ra * rb, axis=1) / np.maximum(na * nb, 1e-15)
    angles = np.arccos(np.clip(cosang, -1.0, 1.0))
    err = np.full(n, np.inf)
    ok = (pc_a[:, 2] > geom.MIN_PROJECT_DEPTH) & (pc_b[:, 2] > geom.MIN_PROJECT_DEPTH)
    if ok.any():
        ea = np.linalg.norm(geom.project_many(k, pc_a[ok]) - xy_a[ok], axis=1)
        eb = np.linalg.norm(geom.project_many(k, pc_b[ok]) - xy_b[ok], axis=1)
        err[ok] = np.maximum(ea, eb)
    return pts, pc_a[:, 2], pc_b[:, 2], angles, err


def triangulate(pose_a: RigidTransform, pose_b: RigidTransform, xy_a, xy_b,
                k: CameraIntrinsics, min_angle_deg: float = 1.0,
                reproj_threshold_px: float = 2.0) -> np.ndarray:
    """DLT triangulation of one correspondence, with acceptance checks.

    Raises LowParallax (zero baseline or ray angle below min_angle_deg),
    CheiralityFailure (point behind either camera) or HighReprojectionError.
    """
    xy_a = np.asarray(xy_a, dtype=float).reshape(1, 2)
    xy_b = np.asarray(xy_b, dtype=float).reshape(1, 2)
    baseline = np.linalg.norm(_camera_center(pose_a) - _camera_center(pose_b))
    if baseline < 1e-12:
        raise LowParallax("zero baseline")
    pts, za, zb, ang, err = _triangulate_batch(pose_a, pose_b, xy_a, xy_b, k)
    if za[0] <= geom.MIN_PROJECT_DEPTH or zb[0] <= geom.MIN_PROJECT_DEPTH:
        raise CheiralityFailure(f"depths {za[0]:.4g}, {zb[0]:.4g}")
    if math.degrees(ang[0]) < min_angle_deg:
        raise LowParallax(f"angle {math.degrees(ang[0]):.4f} deg")
    if err[0] > reproj_threshold_px:
        raise HighReprojectionError(f"reprojection {err[0]:.3f} px")
    return pts[0]


# -------------------------------------------------------------------- map


@dataclass
class MapPoint:
    id: int
    position: np.ndarray
    desc: np.ndarray
    observations: list = field(default_factory=list)  # [(kf_id, xy)]


@dataclass
class Keyframe:
    id: int
    frame_index: int
    timestamp: float
    pose: RigidTransform                 # world -> camera
    point_ids: set = field(default_factory=set)


class SparseMap:
    """Keyframes plus triangulated points and their observations."""

    def __init__(self):
        self.keyframes: dict[int, Keyframe] = {}
        self.points: dict[int, MapPoint] = {}
        self._next_kf = 0
        self._next_pt = 0

    def add_keyframe(self, pose: RigidTransform, frame_index: int,
                     timestamp: float) -> Keyframe:
        kf = Keyframe(self._next_kf, frame_index, timestamp, pose)
        self.keyframes[kf.id] = kf
        self._next_kf += 1
        return kf

    def add_point(self, position, desc) -> MapPoint:
        pt = MapPoint(self._next_pt, np.asarray(position, dtype=float),
                      desc.copy())
        self.points[pt.id] = pt
        self._next_pt += 1
        return pt

    def add_observation(self, point_id: int, kf_id: int, xy) -> None:
        self.points[point_id].observations.append(
            (kf_id, np.asarray(xy, dtype=float)))
        self.keyframes[kf_id].point_ids.add(point_id)

    def remove_point(self, point_id: int) -> None:
        pt = self.points.pop(point_id)
        for kf_id, _ in pt.observations:
            self.keyframes[kf_id].point_ids.discard(point_id)

    def last_keyframe(self) -> Keyframe:
        return self.keyframes[max(self.keyframes)]

    def first_keyframe_id(self) -> int:
        return min(self.keyframes)

    def covisibility_edges(self, min_shared: int) -> dict:
        """Pairs of keyframe ids sharing at least min_shared points."""
        edges = {}
        ids = sorted(self.keyframes)
        for i, a in enumerate(ids):
            for b in ids[i + 1:]:
                shared = len(self.keyframes[a].point_ids
                             & self.keyframes[b].point_ids)
                if shared >= min_shared:
                    edges[(a, b)] = shared
        return edges


# ----------------------------------------------------------- eight point


def _essential_from_eight(xn_a: np.ndarray, xn_b: np.ndarray) -> np.ndarray:
    """Least-squares essential matrix from >= 8 normalized-coordinate pairs,
    projected onto the (1, 1, 0) singular-value manifold."""
    a = np.column_stack([
        xn_b[:, 0] * xn_a[:, 0], xn_b[:, 0] * xn_a[:, 1], xn_b[:, 0],
        xn_b[:, 1] * xn_a[:, 0], xn_b[:, 1] * xn_a[:, 1], xn_b[:, 1],
        xn_a[:, 0], xn_a[:, 1], np.ones(len(xn_a)),
    ])
    _, _, vt = np.linalg.svd(a)
    e = vt[8].reshape(3, 3)
    u, _, vt2 = np.linalg.svd(e)
    return u @ np.diag([1.0, 1.0, 0.0]) @ vt2


def _sampson_px(f: np.ndarray, px_a: np.ndarray, px_b: np.ndarray) -> np.ndarray:
    """Sampson distance in pixels for fundamental matrix f."""
    ones = np.ones((len(px_a), 1))
    x1 = np.hstack([px_a, ones])
    x2 = np.hstack([px_b, ones])
    fx1 = x1 @ f.T
    ftx2 = x2 @ f
    num = np.sum(x2 * fx1, axis=1) ** 2
    den = fx1[:, 0] ** 2 + fx1[:, 1] ** 2 + ftx2[:, 0] ** 2 + ftx2[:, 1] ** 2
    return np.sqrt(num / np.maximum(den, 1e-18))


def _decompose_essential(e: np.ndarray):
    u, _, vt = np.linalg.svd(e)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    w = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    r1 = u @ w @ vt
    r2 = u @ w.T @ vt
    t = u[:, 2]
    return [(r1, t), (r1, -t), (r2, t), (r2, -t)]


@dataclass
class InitResult:
    map: SparseMap
    pose_b: RigidTransform
    match_point_ids: dict  # match index -> map point id


def initialize(frame_a: Frame, frame_b: Frame, k: CameraIntrinsics,
               cfg: OdometryConfig, matches=None) -> InitResult:
    """Two-view map bootstrap.

    matches may be precomputed (ia, ib) index arrays; otherwise a guided
    window match runs between the frames. pose_a is pinned to identity and
    the map is scaled so the median triangulated depth in frame_a equals 1.

    Raises InsufficientMatches, DegenerateMotion (RANSAC inlier ratio below
    min_inlier_ratio) or InsufficientParallax (median triangulation angle
    under min_parallax_deg).
    """
    if matches is None:
        ia, ib = _window_match(frame_a.xy, frame_a.desc, frame_b.xy,
                               frame_b.desc, cfg.init_search_radius_px,
                               cfg.match_max_hamming)
    else:
        ia, ib = matches
    n = len(ia)
    if n < cfg.init_min_matches:
        raise InsufficientMatches(f"{n} < {cfg.init_min_matches}")
    px_a = frame_a.xy[ia]
    px_b = frame_b.xy[ib]
    kinv = np.linalg.inv(k.matrix())
    km = k.matrix()

    def norm_coords(px):
        h = np.hstack([px, np.ones((len(px), 1))]) @ kinv.T
        return h[:, :2]

    xn_a = norm_coords(px_a)
    xn_b = norm_coords(px_b)

    rng = np.random.default_rng(cfg.seed)
    best_inliers = None
    best_count = -1
    best_score = np.inf
    for _ in range(cfg.ransac_iterations):
        sample = rng.choice(n, size=8, replace=False)
        try:
            e = _essential_from_eight(xn_a[sample], xn_b[sample])
        except np.linalg.LinAlgError:
            continue
        f = kinv.T @ e @ kinv
        d = _sampson_px(f, px_a, px_b)
        inl = d < cfg.inlier_threshold_px
        count = int(inl.sum())
        score = float(d[inl].mean()) if count else np.inf
        if count > best_count or (count == best_count and score < best_score):
            best_count, best_score, best_inliers = count, score, inl
    if best_inliers is None or best_count / n < cfg.min_inlier_ratio:
        raise DegenerateMotion(
            f"inlier ratio {max(best_count, 0) / n:.2f} below "
            f"{cfg.min_inlier_ratio}")
    e = _essential_from_eight(xn_a[best_inliers], xn_b[best_inliers])
    f = kinv.T @ e @ kinv
    d = _sampson_px(f, px_a, px_b)
    inl = d < cfg.inlier_threshold_px
    if int(inl.sum()) / n < cfg.min_inlier_ratio:
        raise DegenerateMotion("refit lost consensus")

    pose_a = RigidTransform.identity()
    in_a = px_a[inl]
    in_b = px_b[inl]
    best_pose = None
    best_front = -1
    for rm, t in _decompose_essential(e):
        cand = RigidTransform(Rotation.from_matrix(rm), t)
        _, za, zb, _, _ = _triangulate_batch(pose_a, cand, in_a, in_b, k)
        front = int(np.sum((za > geom.MIN_PROJECT_DEPTH)
                           & (zb > geom.MIN_PROJECT_DEPTH)))
        if front > best_front:
            best_front, best_pose = front, cand
    pts, za, zb, ang, err = _triangulate_batch(pose_a, best_pose, in_a, in_b, k)
    valid = ((za > geom.MIN_PROJECT_DEPTH) & (zb > geom.MIN_PROJECT_DEPTH)
             & (err < cfg.triangulation_reproj_px))
    if not valid.any():
        raise InsufficientParallax("no triangulable points")
    med_angle = math.degrees(float(np.median(ang[valid])))
    if med_angle < cfg.min_parallax_deg:
        raise InsufficientParallax(
            f"median angle {med_angle:.3f} deg below {cfg.min_parallax_deg}")
    med_depth = float(np.median(za[valid]))
    scale = 1.0 / med_depth
    pts = pts * scale
    pose_b = RigidTransform(best_pose.rotation, best_pose.translation * scale)

    m = SparseMap()
    kf_a = m.add_keyframe(pose_a, frame_a.index, frame_a.timestamp)
    kf_b = m.add_keyframe(pose_b, frame_b.index, frame_b.timestamp)
    match_ids = np.nonzero(inl)[0]
    links = {}
    for row, midx in enumerate(match_ids):
        if not valid[row]:
            continue
        pt = m.add_point(pts[row], frame_a.desc[ia[midx]])
        m.add_observation(pt.id, kf_a.id, px_a[midx])
        m.add_observation(pt.id, kf_b.id, px_b[midx])
        links[int(midx)] = pt.id
    return InitResult(m, pose_b, links)


# --------------------------------------------------------------- local BA


def local_bundle_adjust(m: SparseMap, k: CameraIntrinsics,
                        cfg: OdometryConfig, window=None) -> SparseMap:
    """Sliding-window bundle adjustment with Schur elimination of points.

    The window defaults to the last ba_window keyframes. The globally first
    keyframe is always held fixed; keyframes outside the window that observe
    window points contribute residuals with frozen poses. The robust cost is
    non-increasing across accepted iterations.
    """
    if window is None:
        ids = sorted(m.keyframes)
        window = ids[-cfg.ba_window:]
    window = sorted(window)
    first_kf = m.first_keyframe_id()
    free_kfs = [i for i in window if i != first_kf]
    if not free_kfs:
        return m
    pt_ids = sorted({pid for kf_id in window
                     for pid in m.keyframes[kf_id].point_ids
                     if pid in m.points})
    if not pt_ids:
        return m
    cam_index = {kf_id: i for i, kf_id in enumerate(free_kfs)}
    pt_index = {pid: i for i, pid in enumerate(pt_ids)}

    obs_cam, obs_pt, obs_xy, obs_kf = [], [], [], []
    for pid in pt_ids:
        for kf_id, xy in m.points[pid].observations:
            obs_pt.append(pt_index[pid])
            obs_xy.append(xy)
            obs_kf.append(kf_id)
            obs_cam.append(cam_index.get(kf_id, -1))
    obs_pt = np.array(obs_pt, dtype=int)
    obs_cam = np.array(obs_cam, dtype=int)
    obs_free = obs_cam >= 0
    obs_xy = np.asarray(obs_xy, dtype=float)
    mobs = len(obs_pt)
    if mobs == 0 or not obs_free.any():
        return m

    rms = np.stack([m.keyframes[i].pose.rotation.matrix() for i in free_kfs])
    ts = np.stack([m.keyframes[i].pose.translation for i in free_kfs])
    pts = np.stack([m.points[p].position for p in pt_ids])
    fixed_ids = sorted({kf for kf, f in zip(obs_kf, obs_free) if not f})
    fixed_slot = {kf_id: i for i, kf_id in enumerate(fixed_ids)}
    if fixed_ids:
        fixed_rms = np.stack([m.keyframes[i].pose.rotation.matrix()
                              for i in fixed_ids])
        fixed_ts = np.stack([m.keyframes[i].pose.translation
                             for i in fixed_ids])
    obs_fixed_slot = np.array([fixed_slot.get(kf, 0) for kf in obs_kf],
                              dtype=int)

    def residuals(rms_now, ts_now, pts_now):
        rm_o = np.empty((mobs, 3, 3))
        t_o = np.empty((mobs, 3))
        rm_o[obs_free] = rms_now[obs_cam[obs_free]]
        t_o[obs_free] = ts_now[obs_cam[obs_free]]
        if fixed_ids:
            rm_o[~obs_free] = fixed_rms[obs_fixed_slot[~obs_free]]
            t_o[~obs_free] = fixed_ts[obs_fixed_slot[~obs_free]]
        pc = np.einsum("nij,nj->ni", rm_o, pts_now[obs_pt]) + t_o
        good = pc[:, 2] > geom.MIN_PROJECT_DEPTH
        r = np.full((mobs, 2), _BAD_RESIDUAL)
        if good.any():
            r[good] = geom.project_many(k, pc[good]) - obs_xy[good]
        return r, pc, good, rm_o

    delta_h = cfg.huber_delta_px
    nc = len(free_kfs)
    npts = len(pt_ids)
    dia6 = np.arange(6)
    dia3 = np.arange(3)
    r, pc, good, rm_o = residuals(rms, ts, pts)
    cost = geom.huber_cost(np.linalg.norm(r, axis=1), delta_h)
    lam = 1e-4
    for _ in range(cfg.ba_max_iterations):
        norms = np.linalg.norm(r, axis=1)
        w = np.where(norms <= delta_h, 1.0, delta_h / np.maximum(norms, 1e-12))
        w = np.where(good, w, 0.0)
        a = _pi_jacobian(np.where(good[:, None], pc, [0.0, 0.0, 1.0]), k)
        sk = np.zeros((mobs, 3, 3))
        sk[:, 0, 1] = -pc[:, 2]
        sk[:, 0, 2] = pc[:, 1]
        sk[:, 1, 0] = pc[:, 2]
        sk[:, 1, 2] = -pc[:, 0]
        sk[:, 2, 0] = -pc[:, 1]
        sk[:, 2, 1] = pc[:, 0]
        jc = np.zeros((mobs, 2, 6))
        jc[:, :, :3] = -np.einsum("nij,njk->nik", a, sk)
        jc[:, :, 3:] = a
        jc[~obs_free] = 0.0
        jp = np.einsum("nij,njk->nik", a, rm_o)

        wjc = jc * w[:, None, None]
        wjp = jp * w[:, None, None]
        cam_slot = np.maximum(obs_cam, 0)
        hcc = np.zeros((nc, 6, 6))
        np.add.at(hcc, cam_slot, np.einsum("nia,nib->nab", wjc, jc))
        hpp = np.zeros((npts, 3, 3))
        np.add.at(hpp, obs_pt, np.einsum("nia,nib->nab", wjp, jp))
        wblocks = np.einsum("nia,nib->nab", wjc, jp)  # zero rows when fixed
        w_cp = np.zeros((nc, npts, 6, 3))
        np.add.at(w_cp, (cam_slot, obs_pt), wblocks)
        gc = np.zeros((nc, 6))
        np.add.at(gc, cam_slot, np.einsum("nia,ni->na", wjc, r))
        gp = np.zeros((npts, 3))
        np.add.at(gp, obs_pt, np.einsum("nia,ni->na", wjp, r))

        stepped = False
        converged = False
        while lam <= cfg.lm_max_damping:
            hcc_d = hcc.copy()
            hcc_d[:, dia6, dia6] += lam * np.maximum(hcc[:, dia6, dia6], 1e-9)
            hpp_d = hpp.copy()
            hpp_d[:, dia3, dia3] += lam * np.maximum(hpp[:, dia3, dia3], 1e-9)
            try:
                hpp_inv = np.linalg.inv(hpp_d)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            wp = np.einsum("cpab,pbd->cpad", w_cp, hpp_inv)
            cross = np.einsum("cpad,epfd->caef", wp, w_cp)
            s_mat = np.zeros((6 * nc, 6 * nc))
            for ci in range(nc):
                s_mat[6 * ci:6 * ci + 6, 6 * ci:6 * ci + 6] = hcc_d[ci]
                for cj in range(nc):
                    s_mat[6 * ci:6 * ci + 6, 6 * cj:6 * cj + 6] -= \
                        cross[ci, :, cj, :]
            rhs = (-gc + np.einsum("cpad,pd->ca", wp, gp)).reshape(-1)
            try:
                dc = np.linalg.solve(s_mat, rhs)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            dc_blocks = dc.reshape(nc, 6)
            dp = np.einsum("pab,pb->pa", hpp_inv,
                           -gp - np.einsum("cpad,ca->pd", w_cp, dc_blocks))
            step_norm = math.sqrt(float(np.sum(dc_blocks**2))
                                  + float(np.sum(dp**2)))
            if step_norm < cfg.lm_step_epsilon:
                converged = True
                break
            rms_new = rms.copy()
            ts_new = ts.copy()
            for c in range(nc):
                upd = geom.se3_exp(dc_blocks[c])
                rms_new[c] = upd.rotation.matrix() @ rms[c]
                ts_new[c] = upd.rotation.matrix() @ ts[c] + upd.translation
            pts_new = pts + dp
            r_new, pc_new, good_new, rm_o_new = residuals(rms_new, ts_new,
                                                          pts_new)
            cost_new = geom.huber_cost(np.linalg.norm(r_new, axis=1), delta_h)
            if cost_new <= cost:
                rms, ts, pts = rms_new, ts_new, pts_new
                r, pc, good, rm_o = r_new, pc_new, good_new, rm_o_new
                cost = cost_new
                lam = max(lam / 3.0, 1e-10)
                stepped = True
                break
            lam *= 10.0
        if converged or not stepped:
            break

    for i, kf_id in enumerate(free_kfs):
        m.keyframes[kf_id].pose = RigidTransform(Rotation.from_matrix(rms[i]),
                                                 ts[i])
    for j, pid in enumerate(pt_ids):
        m.points[pid].position = pts[j]
    return m


def should_insert_keyframe(track: TrackResult, m: SparseMap,
                           cfg: OdometryConfig) -> bool:
    """Keyframe policy: tracked-map-point ratio against the reference (last)
    keyframe below keyframe_ratio, or keyframe_max_interval frames elapsed."""
    ref = m.last_keyframe()
    ref_pts = ref.point_ids
    if ref_pts:
        shared = len(ref_pts.intersection(track.point_ids.tolist()))
        ratio = shared / len(ref_pts)
    else:
        ratio = 0.0
    frames_since = track.frame_index - ref.frame_index
    return ratio < cfg.keyframe_ratio or frames_since >= cfg.keyframe_max_interval


# ------------------------------------------------------------ full runs


@dataclass
class StateActionPair:
    """Camera state at a frame plus the finite-difference action toward the
    next tracked frame. The last pair of a run carries a zero action."""

    timestamp: float
    position: np.ndarray
    rotation: Rotation
    velocity: np.ndarray
    yaw_rate: float


@dataclass
class RunResult:
    trajectory: Trajectory
    states: list
    partial: bool
    sparse_map: SparseMap
    frames_tracked: int


class _Track:
    __slots__ = ("start_frame", "start_kp", "start_xy", "kp", "xy", "desc",
                 "point_id", "kf_obs")

    def __init__(self, frame_index, kp_index, xy, desc):
        self.start_frame = frame_index
        self.start_kp = kp_index
        self.start_xy = xy
        self.kp = kp_index
        self.xy = xy
        self.desc = desc
        self.point_id = None
        self.kf_obs = []


def _chain(tracks, frame: Frame, cfg: OdometryConfig):
    """Advance tracks into the new frame; unmatched tracks die, unclaimed
    keypoints spawn fresh tracks."""
    if tracks:
        t_xy = np.array([tr.xy for tr in tracks])
        t_desc = np.stack([tr.desc for tr in tracks])
        ia, ib = _window_match(t_xy, t_desc, frame.xy, frame.desc,
                               cfg.track_search_radius_px,
                               cfg.match_max_hamming)
    else:
        ia = ib = np.zeros(0, dtype=int)
    survivors = []
    for i, j in zip(ia, ib):
        tr = tracks[i]
        tr.kp = int(j)
        tr.xy = frame.xy[j]
        tr.desc = frame.desc[j]
        survivors.append(tr)
    claimed = set(int(j) for j in ib)
    for j in range(len(frame)):
        if j not in claimed:
            survivors.append(_Track(frame.index, j, frame.xy[j],
                                    frame.desc[j]))
    return survivors


def _cull_points(m: SparseMap, k: CameraIntrinsics, cfg: OdometryConfig,
                 tracks):
    """Drop observations reprojecting worse than cull_reproj_px and points
    left with fewer than two observations (or behind a camera)."""
    if not m.points:
        return
    kf_of = []
    xys = []
    positions = []
    for pt in m.points.values():
        for kf_id, xy in pt.observations:
            kf_of.append(kf_id)
            xys.append(xy)
            positions.append(pt.position)
    kf_of = np.asarray(kf_of)
    xys = np.asarray(xys)
    positions = np.asarray(positions)
    ok = np.zeros(len(kf_of), dtype=bool)
    for kf_id in np.unique(kf_of):
        sel = kf_of == kf_id
        pose = m.keyframes[int(kf_id)].pose
        pc = positions[sel] @ pose.rotation.matrix().T + pose.translation
        front = pc[:, 2] > geom.MIN_PROJECT_DEPTH
        good = np.zeros(int(sel.sum()), dtype=bool)
        if front.any():
            err = np.linalg.norm(geom.project_many(k, pc[front])
                                 - xys[sel][front], axis=1)
            good[front] = err <= cfg.cull_reproj_px
        ok[sel] = good

    dead = []
    cursor = 0
    for pid, pt in m.points.items():
        n = len(pt.observations)
        flags = ok[cursor:cursor + n]
        cursor += n
        if flags.all():
            continue
        keep = [obs for obs, fl in zip(pt.observations, flags) if fl]
        if len(keep) < 2:
            dead.append(pid)
        else:
            for (kf_id, _), fl in zip(pt.observations, flags):
                if not fl:
                    m.keyframes[kf_id].point_ids.discard(pid)
            pt.observations = keep
    for pid in dead:
        m.remove_point(pid)
    if dead:
        dead_set = set(dead)
        for tr in tracks:
            if tr.point_id in dead_set:
                tr.point_id = None


def _insert_keyframe(m: SparseMap, k: CameraIntrinsics, cfg: OdometryConfig,
                     tracks, pose: RigidTransform, frame: Frame):
    kf = m.add_keyframe(pose, frame.index, frame.timestamp)
    pending = {}
    for tr in tracks:
        tr.kf_obs.append((kf.id, tr.xy))
        if tr.point_id is not None and tr.point_id in m.points:
            m.add_observation(tr.point_id, kf.id, tr.xy)
        elif tr.point_id is None and len(tr.kf_obs) >= 2:
            prev_kf_id, prev_xy = tr.kf_obs[-2]
            if prev_kf_id in m.keyframes:
                pending.setdefault(prev_kf_id, []).append((tr, prev_xy))
    # all candidates against one earlier keyframe triangulate in one batch
    min_angle = math.radians(cfg.min_parallax_deg)
    for prev_kf_id, group in pending.items():
        pose_a = m.keyframes[prev_kf_id].pose
        baseline = np.linalg.norm(_camera_center(pose_a)
                                  - _camera_center(kf.pose))
        if baseline < 1e-12:
            continue
        xy_a = np.stack([prev_xy for _, prev_xy in group])
        xy_b = np.stack([tr.xy for tr, _ in group])
        pts, za, zb, ang, err = _triangulate_batch(pose_a, kf.pose,
                                                   xy_a, xy_b, k)
        good = ((za > geom.MIN_PROJECT_DEPTH)
                & (zb > geom.MIN_PROJECT_DEPTH)
                & (ang >= min_angle)
                & (err <= cfg.triangulation_reproj_px))
        for (tr, prev_xy), pos, accept in zip(group, pts, good):
            if not accept:
                continue
            pt = m.add_point(pos, tr.desc)
            m.add_observation(pt.id, prev_kf_id, prev_xy)
            m.add_observation(pt.id, kf.id, tr.xy)
            tr.point_id = pt.id
    local_bundle_adjust(m, k, cfg)
    _cull_points(m, k, cfg, tracks)
    return kf


def _camera_yaw(rot: Rotation) -> float:
    return geom.to_tait_bryan(rot).yaw


def run(video: FrameSequence, k: CameraIntrinsics = None,
        cfg: OdometryConfig = None) -> RunResult:
    """Track a frame sequence end to end.

    Bootstraps a two-view map within the first init_max_frames frames (else
    InitializationFailed), then refines a pose per frame, inserting keyframes
    and running local bundle adjustment as coverage drops. More than
    max_lost_frames consecutive tracking losses abort the run with
    partial=True; everything tracked so far is still returned.

    States are camera-in-world samples; actions are finite differences
    between consecutive tracked states, the last one zero.
    """
    if k is None:
        k = video.intrinsics
    if cfg is None:
        cfg = OdometryConfig()
    rng = np.random.default_rng(cfg.seed)
    m = None
    tracks: list = []
    ref_frame = None
    poses = []          # (timestamp, world->camera)
    last_pose = None
    prev_pose = None
    lost_streak = 0
    partial = False

    for idx in range(len(video.frames)):
        frame = Frame.extract(video.frames[idx], cfg, idx,
                              video.timestamp(idx))
        if cfg.measurement_noise_std_px > 0 and len(frame):
            frame.xy = frame.xy + rng.normal(
                0.0, cfg.measurement_noise_std_px, frame.xy.shape)
        tracks = _chain(tracks, frame, cfg)

        if m is None:
            if ref_frame is None:
                ref_frame = frame
                continue
            init_tracks = [tr for tr in tracks
                           if tr.start_frame == ref_frame.index]
            if len(init_tracks) >= cfg.init_min_matches:
                flow = np.median([np.linalg.norm(tr.xy - tr.start_xy)
                                  for tr in init_tracks])
                if flow >= cfg.init_min_flow_px:
                    ia = np.array([tr.start_kp for tr in init_tracks])
                    ib = np.array([tr.kp for tr in init_tracks])
                    try:
                        res = initialize(ref_frame, frame, k, cfg,
                                         matches=(ia, ib))
                    except (InsufficientMatches, InsufficientParallax,
                            DegenerateMotion):
                        res = None
                    if res is not None:
                        m = res.map
                        kf_a_id = m.first_keyframe_id()
                        kf_b_id = m.last_keyframe().id
                        for row, tr in enumerate(init_tracks):
                            pid = res.match_point_ids.get(row)
                            if pid is not None:
                                tr.point_id = pid
                            tr.kf_obs.append((kf_a_id, tr.start_xy))
                            tr.kf_obs.append((kf_b_id, tr.xy))
                        for tr in tracks:
                            if tr.start_frame != ref_frame.index:
                                tr.kf_obs.append((kf_b_id, tr.xy))
                        local_bundle_adjust(m, k, cfg)
                        poses.append((ref_frame.timestamp,
                                      m.keyframes[kf_a_id].pose))
                        poses.append((frame.timestamp,
                                      m.keyframes[kf_b_id].pose))
                        prev_pose = m.keyframes[kf_a_id].pose
                        last_pose = m.keyframes[kf_b_id].pose
                        continue
            if frame.index - ref_frame.index >= cfg.init_window_frames:
                ref_frame = frame
                for tr in tracks:
                    tr.start_frame = frame.index
                    tr.start_kp = tr.kp
                    tr.start_xy = tr.xy
            if m is None and frame.index + 1 >= cfg.init_max_frames:
                raise InitializationFailed(
                    f"no map after {frame.index + 1} frames")
            continue

        # --- tracking ---
        corr = [tr for tr in tracks
                if tr.point_id is not None and tr.point_id in m.points]
        tracked = False
        if len(corr) >= 4:
            pts3d = np.stack([m.points[tr.point_id].position for tr in corr])
            pix = np.stack([tr.xy for tr in corr])
            if prev_pose is not None:
                motion = geom.compose(last_pose, geom.invert(prev_pose))
                guess = geom.compose(motion, last_pose)
            else:
                guess = last_pose
            try:
                result = optimize_pose(guess, pts3d, pix, k, cfg)
            except (Diverged, TooFewCorrespondences):
                result = None
            if result is not None and result.status == "OK":
                tracked = True
                result.frame_index = frame.index
                inlier_ids = [tr.point_id for tr, bad
                              in zip(corr, result.outlier_mask) if not bad]
                result.point_ids = np.array(inlier_ids, dtype=int)
                for tr, bad in zip(corr, result.outlier_mask):
                    if bad:
                        tr.point_id = None
                poses.append((frame.timestamp, result.pose))
                prev_pose, last_pose = last_pose, result.pose
                lost_streak = 0
                if should_insert_keyframe(result, m, cfg):
                    _insert_keyframe(m, k, cfg, tracks, result.pose, frame)
        if not tracked:
            lost_streak += 1
            if lost_streak > cfg.max_lost_frames:
                partial = True
                break

    if m is None:
        raise InitializationFailed(
            f"no map after {len(video.frames)} frames")

    samples = []
    cam_in_world = []
    for ts, pose in poses:
        inv = geom.invert(pose)
        samples.append(TrajectorySample(ts, inv))
        cam_in_world.append((ts, inv))
    traj = Trajectory(samples, frame="cam0")
    states = []
    for i, (ts, pose) in enumerate(cam_in_world):
        if i + 1 < len(cam_in_world):
            ts2, pose2 = cam_in_world[i + 1]
            dt = ts2 - ts
            vel = (pose2.translation - pose.translation) / dt
            dyaw = geom.wrap_angle(_camera_yaw(pose2.rotation)
                                   - _camera_yaw(pose.rotation))
            yaw_rate = dyaw / dt
        else:
            vel = np.zeros(3)
            yaw_rate = 0.0
        states.append(StateActionPair(ts, pose.translation.copy(),
                                      pose.rotation, vel, yaw_rate))
    return RunResult(traj, states, partial, m, len(poses))
