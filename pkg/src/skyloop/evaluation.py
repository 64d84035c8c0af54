"""Trajectory accuracy metrics, small-sample statistics and report output.

Statistical helpers are self-contained: p-values come from the regularized
incomplete beta function evaluated with Lentz's continued fraction, so the
package needs no scipy at runtime (tests cross-check against scipy).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import geom
from .errors import SkyloopError
from .geom import Rotation
from .trajectory import (
    Trajectory,
    _associate_by_time,
    _median_period,
    align_umeyama,
)


class EmptySeries(SkyloopError):
    """No values to summarize."""


class DegenerateTable(SkyloopError):
    """ANOVA table too small or non-finite."""


class ZeroErrorVariance(SkyloopError):
    """Residual variance is zero; the F statistic is undefined."""


class ZeroVariance(SkyloopError):
    """Paired differences have no spread; the t statistic is undefined."""


class NoAssociations(SkyloopError):
    """The two trajectories share no timestamps within tolerance."""


# ------------------------------------------------------------- errors


def translation_error(pos_a, pos_b) -> float:
    """Euclidean distance between two positions."""
    return float(np.linalg.norm(np.asarray(pos_a, dtype=float)
                                - np.asarray(pos_b, dtype=float)))


def rotation_error(rot_a: Rotation, rot_b: Rotation) -> float:
    """Norm of the per-axis wrapped Tait-Bryan angle differences.

    Wrapping happens per component, so headings of 3.1 and -3.1 rad differ
    by about 0.083, not 6.2.
    """
    ta = geom.to_tait_bryan(rot_a)
    tb = geom.to_tait_bryan(rot_b)
    d = np.array([geom.wrap_angle(ta.roll - tb.roll),
                  geom.wrap_angle(ta.pitch - tb.pitch),
                  geom.wrap_angle(ta.yaw - tb.yaw)])
    return float(np.linalg.norm(d))


@dataclass(frozen=True)
class ErrorSummary:
    mean: float
    max: float
    rmse: float


def summarize(values) -> ErrorSummary:
    vals = np.asarray(list(values), dtype=float)
    if len(vals) == 0:
        raise EmptySeries("nothing to summarize")
    mean = float(vals.mean())
    rmse = float(np.sqrt(np.mean(vals * vals)))
    assert rmse >= mean - 1e-12  # quadratic mean dominates arithmetic mean
    return ErrorSummary(mean, float(vals.max()), rmse)


def associate(est: Trajectory, ref: Trajectory, max_dt: float = None):
    """Nearest-timestamp one-to-one association; default tolerance is half
    the smaller median sample period. Returns (est_indices, ref_indices)."""
    if max_dt is None:
        max_dt = 0.5 * min(_median_period(est), _median_period(ref))
        if not math.isfinite(max_dt):
            max_dt = 0.0
    return _associate_by_time(est, ref, max_dt)


def compare_trajectories(est: Trajectory, ref: Trajectory,
                         alignment: str = "sim3") -> dict:
    """Aligned per-sample errors of est against ref.

    alignment: "sim3" (similarity), "se3" (rigid) or "none". Returns a dict
    with per-pair error arrays, their summaries and the transform applied.
    """
    if alignment not in ("sim3", "se3", "none"):
        raise ValueError(f"unknown alignment {alignment!r}")
    if alignment == "none":
        from .geom import SimilarityTransform
        xform = SimilarityTransform(1.0, Rotation.identity(), np.zeros(3))
    else:
        xform, _ = align_umeyama(est, ref, with_scale=(alignment == "sim3"))
    aligned = est.transformed(xform)
    ei, ri = associate(aligned, ref)
    if len(ei) == 0:
        raise NoAssociations("no sample pairs within time tolerance")
    t_err = np.array([
        translation_error(aligned.samples[i].pose.translation,
                          ref.samples[j].pose.translation)
        for i, j in zip(ei, ri)])
    r_err = np.array([
        rotation_error(aligned.samples[i].pose.rotation,
                       ref.samples[j].pose.rotation)
        for i, j in zip(ei, ri)])
    return {
        "alignment": alignment,
        "transform": xform,
        "pairs": int(len(ei)),
        "translation_errors": t_err,
        "rotation_errors": r_err,
        "translation": summarize(t_err),
        "rotation": summarize(r_err),
    }


# ---------------------------------------------------------- statistics


def _beta_cont_frac(a: float, b: float, x: float) -> float:
    """Lentz's continued fraction for the incomplete beta integral."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 3e-16:
            break
    return h


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if not (a > 0 and b > 0):
        raise ValueError("shape parameters must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cont_frac(a, b, x) / a
    return 1.0 - front * _beta_cont_frac(b, a, 1.0 - x) / b


def f_survival(f: float, df1: int, df2: int) -> float:
    """P(F >= f) for an F distribution with (df1, df2) degrees of freedom."""
    if f <= 0.0:
        return 1.0
    x = df2 / (df2 + df1 * f)
    return regularized_incomplete_beta(df2 / 2.0, df1 / 2.0, x)


def t_two_sided(t: float, df: int) -> float:
    """Two-sided p-value of a t statistic."""
    x = df / (df + t * t)
    return regularized_incomplete_beta(df / 2.0, 0.5, x)


@dataclass(frozen=True)
class AnovaResult:
    f_rows: float
    p_rows: float
    f_cols: float
    p_cols: float
    df_rows: int
    df_cols: int
    df_resid: int
    ss_rows: float
    ss_cols: float
    ss_resid: float


def anova_two_way_no_rep(table) -> AnovaResult:
    """Two-way ANOVA without replication (one observation per cell).

    Rows and columns are the two factors; the interaction cell residuals
    serve as the error term. Raises DegenerateTable for tables smaller than
    2x2 or with non-finite entries, ZeroErrorVariance when the residuals
    vanish (the F ratio would divide by zero).
    """
    x = np.asarray(table, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise DegenerateTable(f"need a 2-D table, at least 2x2, got {x.shape}")
    if not np.isfinite(x).all():
        raise DegenerateTable("table contains non-finite values")
    r, c = x.shape
    grand = x.mean()
    row_means = x.mean(axis=1)
    col_means = x.mean(axis=0)
    ss_rows = c * float(np.sum((row_means - grand) ** 2))
    ss_cols = r * float(np.sum((col_means - grand) ** 2))
    resid = x - row_means[:, None] - col_means[None, :] + grand
    ss_resid = float(np.sum(resid * resid))
    ss_total = float(np.sum((x - grand) ** 2))
    df_rows, df_cols = r - 1, c - 1
    df_resid = (r - 1) * (c - 1)
    if ss_resid <= 1e-12 * max(1.0, ss_total):
        raise ZeroErrorVariance("residual sum of squares is zero")
    ms_resid = ss_resid / df_resid
    f_rows = (ss_rows / df_rows) / ms_resid
    f_cols = (ss_cols / df_cols) / ms_resid
    return AnovaResult(
        f_rows=f_rows, p_rows=f_survival(f_rows, df_rows, df_resid),
        f_cols=f_cols, p_cols=f_survival(f_cols, df_cols, df_resid),
        df_rows=df_rows, df_cols=df_cols, df_resid=df_resid,
        ss_rows=ss_rows, ss_cols=ss_cols, ss_resid=ss_resid)


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    df: int


def paired_t_test(a, b) -> TTestResult:
    """Two-sided paired t-test on matched samples."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and the same length")
    if len(a) < 2:
        raise DegenerateTable("need at least two pairs")
    d = a - b
    n = len(d)
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        raise ZeroVariance("all paired differences are identical")
    t = float(mean / (sd / math.sqrt(n)))
    return TTestResult(t=t, p=t_two_sided(t, n - 1), df=n - 1)


# -------------------------------------------------------------- reports


def report_dict(comparison: dict) -> dict:
    """JSON-ready view of a compare_trajectories result."""
    tr = comparison["translation"]
    ro = comparison["rotation"]
    return {
        "translation": {"mean": tr.mean, "max": tr.max, "rmse": tr.rmse},
        "rotation": {"mean": ro.mean, "max": ro.max, "rmse": ro.rmse},
        "samples": comparison["pairs"],
        "alignment": comparison["alignment"],
    }


def emit_report(comparison: dict, kind: str = "text") -> str:
    """Render a comparison as a text table or a JSON document."""
    if kind == "json":
        return json.dumps(report_dict(comparison), indent=2,
                          sort_keys=True) + "\n"
    if kind != "text":
        raise ValueError(f"unknown report kind {kind!r}")
    tr = comparison["translation"]
    ro = comparison["rotation"]
    rows = [
        ("Mean Error", tr.mean, ro.mean),
        ("Max Error", tr.max, ro.max),
        ("RMSE", tr.rmse, ro.rmse),
    ]
    lines = [
        f"Alignment: {comparison['alignment']}   "
        f"Samples: {comparison['pairs']}",
        f"{'':<12}{'Translation (m)':>18}{'Rotation (rad)':>18}",
    ]
    for label, tv, rv in rows:
        lines.append(f"{label:<12}{tv:>18.2f}{rv:>18.2f}")
    return "\n".join(lines) + "\n"


def _svg_escape(s: str) -> str:
    return (s.replace("&", "&amp;").replace("<", "&lt;")
            .replace(">", "&gt;"))


_PLOT_COLORS = ["#1f6fb2", "#d1495b", "#3a8a5f", "#8a5fb0", "#b07a2a"]


def emit_trajectory_plot(named_trajectories, width: int = 640,
                         height: int = 480) -> str:
    """Top-down (x, y) SVG plot of one or more trajectories.

    named_trajectories is a list of (label, Trajectory). With no samples at
    all the axes still render, just empty.
    """
    margin = 50.0
    pts_by_label = []
    all_xy = []
    for label, traj in named_trajectories:
        xy = traj.positions[:, :2] if len(traj.samples) else np.zeros((0, 2))
        pts_by_label.append((label, xy))
        if len(xy):
            all_xy.append(xy)
    if all_xy:
        stacked = np.vstack(all_xy)
        lo = stacked.min(axis=0)
        hi = stacked.max(axis=0)
    else:
        lo = np.array([0.0, 0.0])
        hi = np.array([1.0, 1.0])
    span = np.maximum(hi - lo, 1e-9)
    pad = 0.05 * span
    lo = lo - pad
    hi = hi + pad
    span = hi - lo
    iw = width - 2 * margin
    ih = height - 2 * margin

    def sx(x):
        return margin + (x - lo[0]) / span[0] * iw

    def sy(y):
        # y grows upward on the page
        return height - margin - (y - lo[1]) / span[1] * ih

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" '
        f'y2="{height - margin}" stroke="black"/>',
    ]
    for frac in (0.0, 0.5, 1.0):
        xv = lo[0] + frac * span[0]
        yv = lo[1] + frac * span[1]
        parts.append(
            f'<text x="{sx(xv):.1f}" y="{height - margin + 18:.1f}" '
            f'font-size="11" text-anchor="middle">{xv:.2f}</text>')
        parts.append(
            f'<text x="{margin - 8:.1f}" y="{sy(yv) + 4:.1f}" '
            f'font-size="11" text-anchor="end">{yv:.2f}</text>')
    parts.append(
        f'<text x="{width / 2:.1f}" y="{height - 10}" font-size="12" '
        f'text-anchor="middle">x (m)</text>')
    parts.append(
        f'<text x="14" y="{height / 2:.1f}" font-size="12" '
        f'text-anchor="middle" transform="rotate(-90 14 {height / 2:.1f})">'
        f'y (m)</text>')
    for idx, (label, xy) in enumerate(pts_by_label):
        color = _PLOT_COLORS[idx % len(_PLOT_COLORS)]
        if len(xy) >= 2:
            coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in xy)
            parts.append(f'<polyline points="{coords}" fill="none" '
                         f'stroke="{color}" stroke-width="1.5"/>')
        elif len(xy) == 1:
            parts.append(f'<circle cx="{sx(xy[0, 0]):.2f}" '
                         f'cy="{sy(xy[0, 1]):.2f}" r="3" fill="{color}"/>')
        ly = margin + 16 * idx + 4
        parts.append(f'<rect x="{width - margin - 110:.1f}" y="{ly - 9:.1f}" '
                     f'width="14" height="4" fill="{color}"/>')
        parts.append(f'<text x="{width - margin - 90:.1f}" y="{ly:.1f}" '
                     f'font-size="11">{_svg_escape(str(label))}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# --------------------------------------------------------- success table


class SuccessTable:
    """Success rates laid out as maneuvers (rows) by environments (cols)."""

    def __init__(self, environments):
        self.environments = list(environments)
        self.rows = {}          # maneuver -> list of rates

    def add_row(self, maneuver: str, rates) -> None:
        rates = [float(v) for v in rates]
        if len(rates) != len(self.environments):
            raise ValueError(
                f"expected {len(self.environments)} rates, got {len(rates)}")
        self.rows[maneuver] = rates

    def as_array(self) -> np.ndarray:
        return np.array([self.rows[m] for m in self.rows], dtype=float)

    def to_csv(self) -> str:
        lines = ["maneuver," + ",".join(self.environments)]
        for maneuver, rates in self.rows.items():
            lines.append(maneuver + ","
                         + ",".join(f"{v:.3f}" for v in rates))
        return "\n".join(lines) + "\n"
