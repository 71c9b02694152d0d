"""Map-comparison metrics: RMSE, normalized pixel difference, SSIM.

SSIM uses a uniform square window at stride 1 over valid positions with
population (1/N) variances, ``C1 = (k1 L)^2`` and ``C2 = (k2 L)^2``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .fields import ScalarField

# transient-stage buckets over rollout step indices; the first one is closed on both ends
STAGE_BUCKETS = ((1, 5), (5, 10), (10, 20), (20, 50), (50, 100))


@dataclass(frozen=True)
class SsimConfig:
    window: int = 7
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 30.0

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 3")
        if not self.k1 > 0 or not self.k2 > 0:
            raise ValueError("k1 and k2 must be positive")
        if not self.dynamic_range > 0:
            raise ValueError("dynamic_range must be positive")


@dataclass(frozen=True)
class MetricReport:
    rmse: float
    npd: float
    ssim: float
    max_i: float

    def to_record(self) -> dict:
        return asdict(self)


def _values(a):
    return a.values if isinstance(a, ScalarField) else np.asarray(a, dtype=np.float64)


def _pair(pred, truth):
    if isinstance(pred, ScalarField) and isinstance(truth, ScalarField) and pred.spec != truth.spec:
        raise ValueError("fields have different grid specs")
    p, t = _values(pred), _values(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    return p, t


def rmse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    d = p - t
    return math.sqrt(float(np.mean(d * d)))


def npd(pred, truth, max_i: float) -> float:
    if not max_i > 0:
        raise ValueError("max_i must be positive")
    p, t = _pair(pred, truth)
    return float(np.mean(np.abs(t - p))) / max_i


def ssim_map(pred, truth, cfg: SsimConfig = SsimConfig()) -> np.ndarray:
    p, t = _pair(pred, truth)
    w = cfg.window
    if p.shape[0] < w or p.shape[1] < w:
        raise ValueError(f"field {p.shape} is smaller than the {w}x{w} window")
    wp = sliding_window_view(p, (w, w))
    wt = sliding_window_view(t, (w, w))
    mp = wp.mean(axis=(-2, -1))
    mt = wt.mean(axis=(-2, -1))
    dp = wp - mp[..., None, None]
    dt = wt - mt[..., None, None]
    vp = (dp * dp).mean(axis=(-2, -1))
    vt = (dt * dt).mean(axis=(-2, -1))
    cov = (dp * dt).mean(axis=(-2, -1))
    c1 = (cfg.k1 * cfg.dynamic_range) ** 2
    c2 = (cfg.k2 * cfg.dynamic_range) ** 2
    return ((2 * mp * mt + c1) * (2 * cov + c2)) / ((mp * mp + mt * mt + c1) * (vp + vt + c2))


def ssim(pred, truth, cfg: SsimConfig = SsimConfig()) -> float:
    return float(np.mean(ssim_map(pred, truth, cfg)))


def evaluate(pred, truth, max_i: float, ssim_cfg: SsimConfig = SsimConfig()) -> MetricReport:
    return MetricReport(rmse(pred, truth), npd(pred, truth, max_i), ssim(pred, truth, ssim_cfg), max_i)


def stage_of(step: int) -> int | None:
    """Index into STAGE_BUCKETS for a rollout step, or None when out of range."""
    for i, (lo, hi) in enumerate(STAGE_BUCKETS):
        if (lo <= step if i == 0 else lo < step) and step <= hi:
            return i
    return None


def bucket_reports(per_step) -> list[dict]:
    """Average per-step reports into the transient-stage buckets.

    ``per_step`` is a {step: MetricReport} dict or an iterable of
    (step, MetricReport) pairs (several sequences may share a step).
    Returns one row per bucket with the mean metrics and the number of frames
    it covers; empty buckets have ``n_frames == 0`` and NaN metrics.
    """
    items = sorted(per_step.items()) if isinstance(per_step, dict) else list(per_step)
    groups: list[list[MetricReport]] = [[] for _ in STAGE_BUCKETS]
    for k, rep in items:
        i = stage_of(k)
        if i is not None:
            groups[i].append(rep)
    rows = []
    for (lo, hi), g in zip(STAGE_BUCKETS, groups):
        row = {"start": lo, "end": hi, "n_frames": len(g)}
        for name in ("npd", "rmse", "ssim"):
            row[name] = float(np.mean([getattr(r, name) for r in g])) if g else float("nan")
        rows.append(row)
    return rows


def aggregate(per_step: list[MetricReport]) -> dict:
    """Mean and population std of each metric over all frames."""
    out = {"n_frames": len(per_step)}
    for name in ("npd", "rmse", "ssim"):
        v = np.array([getattr(r, name) for r in per_step])
        out[name] = float(v.mean()) if v.size else float("nan")
        out[name + "_std"] = float(v.std()) if v.size else float("nan")
    return out
