"""Scoring and realism analysis: driving score, trajectory features, 1-D Wasserstein
distance, k-NN style separability, brake-reaction latency and top-down rasters."""

from __future__ import annotations

import math
from collections import Counter
from typing import Mapping, NamedTuple, Optional, Sequence

import numpy as np

from .scene import BevView, Route, route_completion

DEFAULT_PENALTIES = {
    "collision_pedestrian": 0.50,
    "collision_vehicle": 0.60,
    "collision_static": 0.65,
    "red_light": 0.70,
}
FEATURES = (
    "mean_speed",
    "std_speed",
    "mean_abs_acc",
    "max_abs_acc",
    "heading_change_rate",
    "mean_time_headway",
    "lateral_offset_rms",
)
# headway is undefined below this speed or above this gap
HEADWAY_MIN_SPEED = 1.0
HEADWAY_MAX_GAP = 60.0


class InsufficientData(ValueError):
    pass


# ---------------------------------------------------------------- scoring


class DrivingScoreReport(NamedTuple):
    rc: float
    infractions: dict
    penalty_product: float
    ds: float


def penalty_product(infractions: Mapping[str, int], penalties: Optional[Mapping[str, float]] = None) -> float:
    pen = dict(DEFAULT_PENALTIES if penalties is None else penalties)
    out = 1.0
    for kind, n in sorted(infractions.items()):
        if n < 0:
            raise ValueError("infraction counts must be >= 0")
        if kind not in pen:
            raise ValueError(f"no penalty coefficient for {kind!r}")
        out *= pen[kind] ** n
    return out


def score(rc: float, infractions: Mapping[str, int], penalties=None) -> DrivingScoreReport:
    if not 0.0 <= rc <= 100.0:
        raise ValueError("rc must lie in [0, 100]")
    p = penalty_product(infractions, penalties)
    return DrivingScoreReport(float(rc), dict(sorted(infractions.items())), p, float(rc) * p)


def _event_fields(ev):
    if isinstance(ev, Mapping):
        return ev["step"], tuple(ev["agents"]), ev["kind"]
    return ev.step, tuple(ev.agents), ev.kind


def compute_ds_rc(trajectory: Sequence, events: Sequence, route: Route, agent_id: Optional[str] = None,
                  penalties: Optional[Mapping[str, float]] = None) -> DrivingScoreReport:
    """Score one agent. ``trajectory[i]`` is its (x, y, ...) at step i.

    A ``route_deviation`` event ends scoring: later progress and infractions are ignored.
    ``agent_id=None`` counts every event.
    """
    evs = [_event_fields(e) for e in events]
    mine = [e for e in evs if agent_id is None or agent_id in e[1]]
    stop = min((s for s, _, k in mine if k == "route_deviation"), default=None)
    traj = list(trajectory)
    if stop is not None:
        traj = traj[: stop + 1]
    if not traj:
        raise InsufficientData("empty trajectory")
    counts = Counter(k for s, _, k in mine if k != "route_deviation" and (stop is None or s <= stop))
    return score(route_completion(route, traj), dict(counts), penalties)


# --------------------------------------------------------------- features


class FeatureVector(NamedTuple):
    mean_speed: float
    std_speed: float
    mean_abs_acc: float
    max_abs_acc: float
    heading_change_rate: float
    mean_time_headway: float
    lateral_offset_rms: float

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=float)


class TrajectorySlice(NamedTuple):
    """Logged poses at a fixed step; ``gap`` is the bumper gap to the lead (NaN if none)."""

    dt: float
    x: np.ndarray
    y: np.ndarray
    heading: np.ndarray
    offset: np.ndarray
    gap: np.ndarray

    @classmethod
    def from_tracks(cls, tracks: Mapping, dt: float, start: int = 0, stop: Optional[int] = None) -> "TrajectorySlice":
        sl = slice(start, stop)

        def col(k):
            return np.asarray(tracks[k][sl], dtype=float)

        return cls(dt, col("x"), col("y"), col("h"), col("off"), col("gap"))

    def __len__(self):
        return len(self.x)


def extract_features(tr: TrajectorySlice) -> FeatureVector:
    """Features from central differences of logged poses."""
    n = len(tr.x)
    if n < 3:
        raise InsufficientData(f"need at least 3 samples, got {n}")
    if not tr.dt > 0:
        raise ValueError("dt must be > 0")
    vx = np.gradient(tr.x, tr.dt)
    vy = np.gradient(tr.y, tr.dt)
    speed = np.hypot(vx, vy)
    acc = np.gradient(speed, tr.dt)
    yaw_rate = np.gradient(np.unwrap(tr.heading), tr.dt)
    gap = np.asarray(tr.gap, dtype=float)
    ok = np.isfinite(gap) & (speed > HEADWAY_MIN_SPEED) & (gap < HEADWAY_MAX_GAP)
    headway = float(np.mean(gap[ok] / speed[ok])) if ok.any() else HEADWAY_MAX_GAP / HEADWAY_MIN_SPEED
    fv = FeatureVector(
        float(speed.mean()),
        float(speed.std()),
        float(np.abs(acc).mean()),
        float(np.abs(acc).max()),
        float(np.abs(yaw_rate).mean()),
        headway,
        float(np.sqrt(np.mean(np.square(tr.offset)))),
    )
    if not all(math.isfinite(v) for v in fv):
        raise InsufficientData("non-finite feature")
    return fv


def windows(tr: TrajectorySlice, size: int, stride: Optional[int] = None):
    """Consecutive fixed-size sub-slices."""
    stride = stride or size
    for a in range(0, len(tr) - size + 1, stride):
        yield TrajectorySlice(tr.dt, *(arr[a : a + size] for arr in tr[1:]))


# ------------------------------------------------------------ wasserstein


def wasserstein_1d(a: Sequence[float], b: Sequence[float]) -> float:
    """Order-1 distance between empirical distributions: integral of |F_a - F_b|."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("both sample sets must be non-empty")
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    grid = np.concatenate((a, b))
    grid.sort(kind="mergesort")
    widths = np.diff(grid)
    fa = np.searchsorted(a, grid[:-1], side="right") / a.size
    fb = np.searchsorted(b, grid[:-1], side="right") / b.size
    return float(np.sum(np.abs(fa - fb) * widths))


def wasserstein_table(groups: Mapping[str, Sequence[float]]) -> tuple:
    """(labels, symmetric matrix) of pairwise distances."""
    labels = sorted(groups)
    m = np.zeros((len(labels), len(labels)))
    for i, la in enumerate(labels):
        for j in range(i + 1, len(labels)):
            m[i, j] = m[j, i] = wasserstein_1d(groups[la], groups[labels[j]])
    return labels, m


# ------------------------------------------------------------------ k-NN


class StyleSample(NamedTuple):
    label: str
    features: FeatureVector


class ClassificationReport(NamedTuple):
    predicted: list
    macro_f1: float
    per_label_f1: dict


def macro_f1(truth: Sequence[str], pred: Sequence[str]) -> tuple:
    labels = sorted(set(truth) | set(pred))
    per = {}
    for lab in labels:
        tp = sum(1 for t, p in zip(truth, pred) if t == lab and p == lab)
        fp = sum(1 for t, p in zip(truth, pred) if t != lab and p == lab)
        fn = sum(1 for t, p in zip(truth, pred) if t == lab and p != lab)
        denom = 2 * tp + fp + fn
        per[lab] = 2 * tp / denom if denom else 0.0
    # only labels present in the truth are averaged
    present = sorted(set(truth))
    return (sum(per[l] for l in present) / len(present) if present else 0.0), per


def knn_style_classify(train: Sequence[StyleSample], test: Sequence[StyleSample], k: int = 5) -> ClassificationReport:
    """z-scored Euclidean k-NN; vote ties go to the label of the nearest tied neighbour."""
    if k < 1 or k % 2 == 0:
        raise ValueError("k must be a positive odd integer")
    if not train:
        raise ValueError("empty training set")
    train_labels = {s.label for s in train}
    unseen = sorted({s.label for s in test} - train_labels)
    if unseen:
        raise ValueError(f"test labels not covered by training set: {unseen}")
    X = np.array([np.asarray(s.features, dtype=float) for s in train])
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    Z = (X - mu) / sd
    ylab = [s.label for s in train]
    k = min(k, len(train))
    pred = []
    for s in test:
        q = (np.asarray(s.features, dtype=float) - mu) / sd
        d = np.sum((Z - q) ** 2, axis=1)
        order = np.lexsort((np.arange(len(d)), d))[:k]
        votes = Counter(ylab[i] for i in order)
        top = max(votes.values())
        tied = {l for l, c in votes.items() if c == top}
        pred.append(next(ylab[i] for i in order if ylab[i] in tied))
    f1, per = macro_f1([s.label for s in test], pred)
    return ClassificationReport(pred, f1, per)


# -------------------------------------------------------- reaction latency


def brake_latency(accel: Sequence[float], onset: int, threshold: float = -0.5,
                  horizon: Optional[int] = None) -> Optional[int]:
    """Steps from ``onset`` to the first accel below ``threshold``; None if never within ``horizon``."""
    a = np.asarray(accel, dtype=float)
    end = len(a) if horizon is None else min(len(a), onset + horizon + 1)
    if onset < 0 or onset >= len(a):
        raise ValueError("onset outside the series")
    hit = np.flatnonzero(a[onset:end] < threshold)
    return int(hit[0]) if hit.size else None


def follower_latencies(tracks: Mapping[str, Mapping], lead_id: str, onset: int, threshold: float = -0.5,
                       horizon: Optional[int] = None) -> dict:
    """Brake latency of every agent whose objective lead at ``onset`` is ``lead_id``.

    ``tracks[agent]`` holds per-step columns ``t``, ``a`` and ``lead``. Agents that never
    brake within ``horizon`` map to None.
    """
    out = {}
    for aid in sorted(tracks):
        tr = tracks[aid]
        ts = tr["t"]
        if not ts or onset < ts[0] or onset > ts[-1]:
            continue
        i = onset - ts[0]
        if tr["lead"][i] != lead_id:
            continue
        out[aid] = brake_latency(tr["a"], i, threshold, horizon)
    return out


# ----------------------------------------------------------------- raster

BACKGROUND = 0
LANE_DASHED = 96
LANE_SOLID = 160
OBJECT = 255


def rasterize_view(view: BevView, resolution: float = 0.5) -> np.ndarray:
    """Top-down uint8 grid; row 0 is the +y edge, the centre pixel is the ego.

    Pixel (r, c) has its centre at x = (c - h) * res, y = (h - r) * res with h = n // 2.
    An object fills the pixels whose centres fall in its half-open footprint
    [-L/2, L/2) x [-W/2, W/2) measured in the object's own frame.
    """
    if not resolution > 0:
        raise ValueError("resolution must be > 0")
    h = int(math.ceil(view.radius / resolution))
    n = 2 * h + 1
    grid = np.full((n, n), BACKGROUND, dtype=np.uint8)
    cx = (np.arange(n) - h) * resolution
    cy = (h - np.arange(n)) * resolution
    for lid in sorted(view.lanes):
        ln = view.lanes[lid]
        pts = np.asarray(ln.points, dtype=float)
        if len(pts) < 2:
            continue
        seg = np.hypot(*np.diff(pts, axis=0).T)
        samples = [pts[:1]]
        for (p, q), L in zip(zip(pts[:-1], pts[1:]), seg):
            m = max(1, int(math.ceil(L / (0.5 * resolution))))
            u = np.arange(1, m + 1)[:, None] / m
            samples.append(p + u * (q - p))
        s = np.vstack(samples)
        c = np.rint(s[:, 0] / resolution).astype(int) + h
        r = h - np.rint(s[:, 1] / resolution).astype(int)
        ok = (c >= 0) & (c < n) & (r >= 0) & (r < n)
        val = LANE_SOLID if ln.marking == "solid" else LANE_DASHED
        grid[r[ok], c[ok]] = np.maximum(grid[r[ok], c[ok]], val)
    gx, gy = np.meshgrid(cx, cy)
    for o in view.objects:
        L, W = o.extent
        c, s = math.cos(o.pose.heading), math.sin(o.pose.heading)
        dx = gx - o.pose.x
        dy = gy - o.pose.y
        u = c * dx + s * dy
        w = -s * dx + c * dy
        m = (u >= -0.5 * L) & (u < 0.5 * L) & (w >= -0.5 * W) & (w < 0.5 * W)
        grid[m] = OBJECT
    return grid


def write_pgm(grid: np.ndarray, path) -> None:
    g = np.asarray(grid, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{g.shape[1]} {g.shape[0]}\n255\n".encode())
        f.write(g.tobytes())


# --------------------------------------------------------------- figures


def plot_feature_distributions(groups: Mapping[str, Sequence[FeatureVector]], path, bins: int = 30) -> None:
    """One histogram panel per feature, one series per label."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(2, 4, figsize=(16, 7))
    labels = sorted(groups)
    for i, name in enumerate(FEATURES):
        ax = axes.flat[i]
        for lab in labels:
            vals = [getattr(f, name) for f in groups[lab]]
            if vals:
                ax.hist(vals, bins=bins, histtype="step", density=True, label=lab)
        ax.set_title(name)
    axes.flat[-1].axis("off")
    if labels:
        axes.flat[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_wasserstein(labels: Sequence[str], matrix: np.ndarray, feature: str, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(1.2 * len(labels) + 2, 1.2 * len(labels) + 1.5))
    im = ax.imshow(matrix, cmap="viridis")
    ax.set_xticks(range(len(labels)), labels, rotation=45, ha="right")
    ax.set_yticks(range(len(labels)), labels)
    for i in range(len(labels)):
        for j in range(len(labels)):
            ax.text(j, i, f"{matrix[i, j]:.3g}", ha="center", va="center", color="w", fontsize=8)
    ax.set_title(f"W1 of {feature}")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_view_pair(objective: np.ndarray, subjective: np.ndarray, path, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 5))
    for ax, img, name in zip(axes, (objective, subjective), ("objective", "subjective")):
        ax.imshow(img, cmap="gray", vmin=0, vmax=255)
        ax.set_title(name)
        ax.axis("off")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
