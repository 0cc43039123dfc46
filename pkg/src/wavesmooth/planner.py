"""Target speed profiles from coarse segment-average speed data.

A feed of segment averages is turned into a profile in two steps: linear
interpolation through the segment midpoints on a regular knot grid, then a
truncated Gaussian smoothing of the knot values. Outside the outermost
midpoints the profile is constant.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from wavesmooth.core import PlannerParams
from wavesmooth.data import LeaderTrajectory

DOWNSTREAM_OFFSETS = (0.0, 200.0, 500.0, 1000.0)


@dataclass(frozen=True)
class SegmentFeed:
    start_x: np.ndarray
    end_x: np.ndarray
    avg_speed: np.ndarray
    issued_at: float = 0.0
    delay: float = 180.0
    update_interval: float = 60.0

    def __post_init__(self):
        for name in ("start_x", "end_x", "avg_speed"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if len(self.start_x) == 0:
            raise ValueError("feed has no segments")
        if not (self.start_x.shape == self.end_x.shape == self.avg_speed.shape):
            raise ValueError("segment arrays differ in length")
        if np.any(self.end_x <= self.start_x) or np.any(np.abs(self.start_x[1:] - self.end_x[:-1]) > 1e-6):
            raise ValueError("segments must be ordered and contiguous")
        if np.any(self.avg_speed < 0) or np.any(self.avg_speed > 40):
            raise ValueError("segment speeds must lie in [0, 40]")
        if self.delay < 0:
            raise ValueError("delay must be non-negative")

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.start_x + self.end_x)


@dataclass(frozen=True)
class TargetSpeedProfile:
    x: np.ndarray
    v: np.ndarray
    valid_from: float = 0.0

    def query(self, x):
        return np.interp(x, self.x, self.v)

    def query_downstream(self, x):
        """Target speeds at 0, 200, 500 and 1000 m ahead of ``x`` (last axis)."""
        x = np.asarray(x, dtype=float)
        return np.interp(x[..., None] + np.array(DOWNSTREAM_OFFSETS), self.x, self.v)


def gaussian_weights(spacing: float, sigma: float, truncate: float = 4.0) -> np.ndarray:
    half = int(math.floor(truncate * sigma / spacing))
    offsets = np.arange(-half, half + 1) * spacing
    return np.exp(-0.5 * (offsets / sigma) ** 2)


def smooth(values: np.ndarray, spacing: float, sigma: float) -> np.ndarray:
    """Gaussian smoothing truncated at 4 sigma, renormalised near the ends."""
    w = gaussian_weights(spacing, sigma)
    half = len(w) // 2
    n = len(values)
    num = np.convolve(values, w, mode="full")[half:half + n]
    den = np.convolve(np.ones(n), w, mode="full")[half:half + n]
    return num / den


def build_profile(feed: SegmentFeed, bandwidth: float = 300.0, knot_spacing: float = 10.0) -> TargetSpeedProfile:
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    mids = feed.midpoints
    n = max(1, int(math.floor((mids[-1] - mids[0]) / knot_spacing + 1e-9)) + 1)
    xk = mids[0] + np.arange(n) * knot_spacing
    raw = np.interp(xk, mids, feed.avg_speed)
    vk = np.clip(smooth(raw, knot_spacing, bandwidth), 0.0, 40.0)
    return TargetSpeedProfile(xk, vk, feed.issued_at)


def query(profile: TargetSpeedProfile, x: float) -> float:
    return float(profile.query(x))


def query_downstream(profile: TargetSpeedProfile, x: float) -> tuple[float, float, float, float]:
    return tuple(float(v) for v in profile.query_downstream(x))


def synth_feed(traj: LeaderTrajectory, t: float, params: PlannerParams | None = None,
               leader_positions: np.ndarray | None = None) -> SegmentFeed:
    """Segment averages a delayed traffic feed would report at time ``t``.

    Space covered by the leader is cut into fixed-length segments. A segment
    visited during the window of one update interval ending at
    ``refresh - delay`` reports the time-mean leader speed in that window;
    older visits keep their historical mean; segments not yet reached carry
    the furthest known value. Before any data is available every segment
    reports ``cold_start_speed``.
    """
    p = params or PlannerParams()
    x = traj.positions if leader_positions is None else np.asarray(leader_positions, dtype=float)
    seg_len = p.segment_length
    n_seg = max(1, int(math.ceil(x[-1] / seg_len)))
    edges = np.arange(n_seg + 1) * seg_len
    refresh = math.floor(t / p.update_interval + 1e-9) * p.update_interval
    cutoff = refresh - p.delay
    speeds = np.full(n_seg, p.cold_start_speed)
    if refresh >= p.delay:
        known = traj.t <= cutoff + 1e-9
        seg = np.minimum((x[known] / seg_len).astype(int), n_seg - 1)
        v = traj.v[known]
        recent = traj.t[known] > cutoff - p.update_interval + 1e-9
        cnt_w = np.bincount(seg[recent], minlength=n_seg)
        sum_w = np.bincount(seg[recent], weights=v[recent], minlength=n_seg)
        cnt_all = np.bincount(seg, minlength=n_seg)
        sum_all = np.bincount(seg, weights=v, minlength=n_seg)
        have = cnt_all > 0
        with np.errstate(invalid="ignore", divide="ignore"):
            speeds = np.where(cnt_w > 0, sum_w / np.maximum(cnt_w, 1), sum_all / np.maximum(cnt_all, 1))
        if have.any():
            # unvisited segments carry the furthest known value
            speeds[~have] = speeds[int(np.flatnonzero(have)[-1])]
        else:
            speeds = np.full(n_seg, p.cold_start_speed)
    return SegmentFeed(edges[:-1], edges[1:], np.clip(speeds, 0.0, 40.0), refresh, p.delay, p.update_interval)


class ProfileSchedule:
    """Profiles of a synthetic feed, rebuilt once per update interval and cached."""

    def __init__(self, traj: LeaderTrajectory, params: PlannerParams | None = None):
        self.traj = traj
        self.params = params or PlannerParams()
        self._cache: dict[int, TargetSpeedProfile] = {}

    def index(self, t: float) -> int:
        return int(math.floor(t / self.params.update_interval + 1e-9))

    def at(self, t: float) -> TargetSpeedProfile:
        k = self.index(t)
        prof = self._cache.get(k)
        if prof is None:
            feed = synth_feed(self.traj, k * self.params.update_interval, self.params)
            prof = self._cache[k] = build_profile(feed, self.params.bandwidth, self.params.knot_spacing)
        return prof


def load_feeds(path: str | Path, delay: float = 180.0, update_interval: float = 60.0) -> list[SegmentFeed]:
    """Read a recorded feed CSV (``issued_at,start_x,end_x,avg_speed``), one feed per issue time."""
    rows: dict[float, list[tuple[float, float, float]]] = {}
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["issued_at", "start_x", "end_x", "avg_speed"]:
            raise ValueError(f"{path}: expected header issued_at,start_x,end_x,avg_speed")
        for row in reader:
            rows.setdefault(float(row["issued_at"]), []).append(
                (float(row["start_x"]), float(row["end_x"]), float(row["avg_speed"])))
    feeds = []
    for issued, segs in sorted(rows.items()):
        segs.sort()
        s, e, v = (np.array(c) for c in zip(*segs))
        feeds.append(SegmentFeed(s, e, v, issued, delay, update_interval))
    return feeds


def save_feeds(feeds, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        fh.write("issued_at,start_x,end_x,avg_speed\n")
        for f in feeds:
            for s, e, v in zip(f.start_x, f.end_x, f.avg_speed):
                fh.write(f"{f.issued_at:g},{s:g},{e:g},{v:.10g}\n")
