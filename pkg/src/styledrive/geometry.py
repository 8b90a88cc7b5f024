"""Planar geometry helpers: frames, polylines, oriented rectangles."""

import math

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(a: float) -> float:
    """Normalize an angle to [-pi, pi)."""
    w = (a + math.pi) % TWO_PI - math.pi
    # float modulo can land exactly on +pi after rounding
    return -math.pi if w >= math.pi else w


def to_frame(x, y, ox, oy, oh):
    """World -> frame rooted at (ox, oy) with heading oh. Works on scalars or arrays."""
    c, s = math.cos(oh), math.sin(oh)
    dx = x - ox
    dy = y - oy
    return c * dx + s * dy, -s * dx + c * dy


def from_frame(x, y, ox, oy, oh):
    """Inverse of :func:`to_frame`."""
    c, s = math.cos(oh), math.sin(oh)
    return ox + c * x - s * y, oy + s * x + c * y


def stations(points: np.ndarray) -> np.ndarray:
    """Cumulative arc length along a polyline."""
    seg = np.hypot(np.diff(points[:, 0]), np.diff(points[:, 1]))
    return np.concatenate(([0.0], np.cumsum(seg)))


def resample(points: np.ndarray, spacing: float) -> np.ndarray:
    """Resample a polyline so no segment exceeds ``spacing``; original vertices are kept."""
    out = [points[:1]]
    for a, b in zip(points[:-1], points[1:]):
        n = max(1, int(math.ceil(math.hypot(*(b - a)) / spacing - 1e-9)))
        t = np.arange(1, n + 1)[:, None] / n
        out.append(a + (b - a) * t)
    return np.vstack(out)


def project(points: np.ndarray, pts: np.ndarray):
    """Project query points onto a polyline.

    Args:
        points: (m, 2) polyline vertices, consecutive vertices distinct.
        pts: (n, 2) query points.

    Returns:
        (station, signed lateral offset, segment index), each of shape (n,).
        Positive offset is to the left of the direction of travel.
    """
    a = points[:-1]
    d = points[1:] - a
    seg_len2 = (d * d).sum(axis=1)
    rel = pts[:, None, :] - a[None, :, :]
    t = np.clip((rel * d[None]).sum(axis=2) / seg_len2[None], 0.0, 1.0)
    foot = a[None] + t[..., None] * d[None]
    diff = pts[:, None, :] - foot
    dist2 = (diff * diff).sum(axis=2)
    idx = dist2.argmin(axis=1)
    rows = np.arange(len(pts))
    seg_len = np.sqrt(seg_len2)
    cum = np.concatenate(([0.0], np.cumsum(seg_len)))
    st = cum[idx] + t[rows, idx] * seg_len[idx]
    dd = d[idx]
    rr = rel[rows, idx]
    cross = dd[:, 0] * rr[:, 1] - dd[:, 1] * rr[:, 0]
    lat = np.sign(cross) * np.sqrt(dist2[rows, idx])
    return st, lat, idx


def point_at(points: np.ndarray, st: np.ndarray, s: float):
    """Point and tangent heading at station ``s`` (clamped to the polyline)."""
    s = min(max(s, st[0]), st[-1])
    i = int(np.searchsorted(st, s, side="right")) - 1
    i = min(max(i, 0), len(points) - 2)
    seg = st[i + 1] - st[i]
    t = (s - st[i]) / seg if seg > 0 else 0.0
    p = points[i] + (points[i + 1] - points[i]) * t
    dx, dy = points[i + 1] - points[i]
    return float(p[0]), float(p[1]), math.atan2(dy, dx)


def rect_corners(x: float, y: float, heading: float, length: float, width: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    hl, hw = 0.5 * length, 0.5 * width
    local = ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw))
    return np.array([(x + c * u - s * v, y + s * u + c * v) for u, v in local])


def rects_overlap(r1: np.ndarray, r2: np.ndarray) -> bool:
    """Separating-axis test for two convex quadrilaterals given as (4, 2) corner arrays.

    Touching boundaries count as overlap.
    """
    for poly in (r1, r2):
        for i in range(2):  # rectangles have two distinct edge normals
            ex, ey = poly[i + 1] - poly[i]
            axis = np.array((-ey, ex))
            p1 = r1 @ axis
            p2 = r2 @ axis
            if p1.max() < p2.min() or p2.max() < p1.min():
                return False
    return True
