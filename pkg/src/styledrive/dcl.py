"""Rule-based driving controller: car following, signal stops, lane keeping and
gap-accepting lane changes, all computed from a (possibly distorted) view."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple, Optional

import numpy as np

from . import geometry as geo
from .scene import BevView

ACCEL_MIN = -8.0
ACCEL_MAX = 4.0
LANE_CHANGES = ("keep", "left", "right")


@dataclass(frozen=True)
class ControllerParams:
    desired_speed: float = 12.0
    time_headway: float = 1.5
    min_gap: float = 2.0
    max_accel: float = 2.0
    comfort_decel: float = 3.0
    gap_accept_front: float = 8.0
    gap_accept_rear: float = 6.0
    signal_stop_margin: float = 2.0
    wheelbase: float = 2.7
    lookahead_min: float = 5.0
    lookahead_time: float = 0.6
    max_steer: float = 0.6
    lane_change_threshold: float = 0.3
    lane_change_safe_decel: float = 4.0
    politeness: float = 0.3
    allow_lane_change: bool = True

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "allow_lane_change":
                continue
            if f.name == "politeness":
                if v < 0:
                    raise ValueError("politeness must be >= 0")
            elif not v > 0:
                raise ValueError(f"controller param {f.name} must be > 0")

    @classmethod
    def from_dict(cls, d) -> "ControllerParams":
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ValueError(f"unknown controller params: {sorted(bad)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


class DrivingDecision(NamedTuple):
    accel: float
    steer: float
    lateral_target: float  # offset to the perceived lane centre the steering aims to remove (m)
    heading_correction: float  # perceived lane heading at the ego (rad)
    lane_change: str = "keep"
    stop_for_signal: bool = False
    lead_id: Optional[str] = None
    lead_gap: Optional[float] = None


def braking_distance(v: float, b: float, margin: float = 2.0) -> float:
    if v < 0 or not b > 0:
        raise ValueError("need v >= 0 and b > 0")
    return v * v / (2.0 * b) + margin


def idm_accel(v: float, v0: float, gap: Optional[float], dv: float, p: ControllerParams) -> float:
    """Car-following acceleration; ``gap=None`` means free road."""
    free = 1.0 - (v / v0) ** 4
    if gap is None:
        return p.max_accel * free
    s_star = p.min_gap + max(0.0, v * p.time_headway + v * dv / (2.0 * math.sqrt(p.max_accel * p.comfort_decel)))
    s = max(gap, 0.1)
    return p.max_accel * (free - (s_star / s) ** 2)


def safe_stop(view: BevView, p: ControllerParams) -> DrivingDecision:
    return DrivingDecision(-p.comfort_decel, 0.0, 0.0, 0.0, "keep", False, None, None)


def _chain(view: BevView, lane_id: str, route_lanes) -> list:
    """Lane ids in travel order around ``lane_id``, restricted to the view."""
    lanes = view.lanes
    ids = [lane_id]
    cur = lanes[lane_id]
    seen = {lane_id}
    # one predecessor so the ego projects cleanly just after a lane boundary
    preds = [q for q in cur.predecessors if q in lanes and q not in seen]
    if preds:
        pick = next((q for q in preds if q in route_lanes), preds[0])
        ids.insert(0, pick)
        seen.add(pick)
    while True:
        nxt = [s for s in cur.successors if s in lanes and s not in seen]
        if not nxt:
            break
        pick = next((s for s in nxt if s in route_lanes), nxt[0])
        ids.append(pick)
        seen.add(pick)
        cur = lanes[pick]
    return ids


class _Path:
    __slots__ = ("x", "y", "width", "ids", "mono")

    def __init__(self, view: BevView, lane_id: str, route_lanes):
        ids = _chain(view, lane_id, route_lanes)
        parts = []
        last = None
        for i in ids:
            lp = view.lanes[i].points
            if last is not None and lp[0, 0] == last[0] and lp[0, 1] == last[1]:
                lp = lp[1:]
            if len(lp):
                parts.append(lp)
                last = lp[-1]
        pts = parts[0] if len(parts) == 1 else np.concatenate(parts)
        self.x = pts[:, 0]
        self.y = pts[:, 1]
        self.width = view.lanes[lane_id].width
        self.ids = frozenset(ids)
        dx = self.x[1:] - self.x[:-1]
        self.mono = len(pts) > 1 and bool(dx.min() > 0)
        if not self.mono and len(pts) > 1:
            keep = np.concatenate(([True], (np.abs(dx) + np.abs(self.y[1:] - self.y[:-1])) > 1e-9))
            self.x, self.y = self.x[keep], self.y[keep]

    def lateral(self, qx, qy):
        """Signed offsets of query points from the path (left positive)."""
        qx = np.asarray(qx, dtype=float)
        qy = np.asarray(qy, dtype=float)
        if self.mono:
            return qy - np.interp(qx, self.x, self.y)
        if len(self.x) < 2:
            return qy - self.y[0]
        _, lat, _ = geo.project(np.column_stack((self.x, self.y)), np.column_stack((np.atleast_1d(qx), np.atleast_1d(qy))))
        return lat if np.ndim(qx) else float(lat[0])

    def point_ahead(self, d: float):
        if self.mono:
            x = min(d, float(self.x[-1])) if self.x[-1] > 0 else d
            return x, float(np.interp(x, self.x, self.y))
        pts = np.column_stack((self.x, self.y))
        st = geo.stations(pts)
        s0, _, _ = geo.project(pts, np.zeros((1, 2)))
        x, y, _ = geo.point_at(pts, st, float(s0[0]) + d)
        return x, y

    def heading_at_origin(self) -> float:
        if self.mono and len(self.x) > 1:
            i = min(max(int(np.searchsorted(self.x, 0.0)), 1), len(self.x) - 1)
            return math.atan2(self.y[i] - self.y[i - 1], self.x[i] - self.x[i - 1])
        return 0.0


def _lead_and_follower(path: _Path, ox, oy, ow, ol, ov, ids, ego_len, margin=0.3):
    """(lead_idx, lead_gap, follower_idx, follower_gap) of objects inside a path corridor."""
    if len(ox) == 0:
        return None, None, None, None
    lat = path.lateral(ox, oy)
    inside = np.abs(lat) < 0.5 * path.width + 0.5 * ow - margin
    lead = foll = None
    lgap = fgap = None
    for i in np.flatnonzero(inside):
        x = ox[i]
        if x > 0:
            g = x - 0.5 * ol[i] - 0.5 * ego_len
            if lgap is None or g < lgap or (g == lgap and ids[i] < ids[lead]):
                lead, lgap = i, g
        else:
            g = -x - 0.5 * ol[i] - 0.5 * ego_len
            if fgap is None or g < fgap or (g == fgap and ids[i] < ids[foll]):
                foll, fgap = i, g
    return lead, lgap, foll, fgap


def decide(view: BevView, route=None, params: Optional[ControllerParams] = None) -> DrivingDecision:
    """Pure decision from one view. Priority: signal stop, then car following, then lane keeping."""
    p = params or ControllerParams()
    lane_id = view.ego_lane_id
    if lane_id is None or lane_id not in view.lanes:
        return safe_stop(view, p)
    route_lanes = frozenset(route.lanes) if route is not None else frozenset()
    path = _Path(view, lane_id, route_lanes)
    v = view.ego_speed
    ego_len = view.ego_extent[0]

    objs = view.objects
    n = len(objs)
    if n:
        ox = np.fromiter((o.pose.x for o in objs), float, n)
        oy = np.fromiter((o.pose.y for o in objs), float, n)
        ow = np.fromiter((o.extent[1] for o in objs), float, n)
        ol = np.fromiter((o.extent[0] for o in objs), float, n)
        ov = np.fromiter((o.speed * math.cos(o.pose.heading) for o in objs), float, n)
        ids = [o.id for o in objs]
    else:
        ox = oy = ow = ol = ov = np.zeros(0)
        ids = []

    lead, gap, _, _ = _lead_and_follower(path, ox, oy, ow, ol, ov, ids, ego_len)
    if lead is None:
        acc_cur = idm_accel(v, p.desired_speed, None, 0.0, p)
    else:
        acc_cur = idm_accel(v, p.desired_speed, gap, v - ov[lead], p)
    accel = acc_cur

    # signals on the own path
    stop = False
    for sg in view.signals:
        if sg.state not in ("red", "yellow"):
            continue
        if not any(l in path.ids for l in sg.controlled_lanes):
            continue
        d_stop = sg.stop_point.x - 0.5 * ego_len
        if d_stop <= -0.5 * ego_len:
            continue  # already past the line
        if d_stop > braking_distance(v, p.comfort_decel, p.signal_stop_margin):
            continue
        if sg.state == "yellow" and d_stop < v * v / (2.0 * -ACCEL_MIN):
            continue  # cannot stop in time: clear the junction
        stop = True
        room = d_stop - p.signal_stop_margin
        if v <= 0.0:
            a_sig = 0.0
        elif room <= 0.0:
            a_sig = ACCEL_MIN
        else:
            a_sig = -v * v / (2.0 * room)
        accel = min(accel, a_sig)

    # lane keeping by pure pursuit on the perceived centreline
    ld = max(p.lookahead_min, p.lookahead_time * v)
    tx, ty = path.point_ahead(ld)
    l2 = tx * tx + ty * ty
    curv = 2.0 * ty / l2 if l2 > 1e-9 else 0.0
    steer = max(-p.max_steer, min(p.max_steer, math.atan(p.wheelbase * curv)))
    offset = -float(path.lateral(0.0, 0.0))
    heading = path.heading_at_origin()

    change = "keep"
    if p.allow_lane_change and not stop and v > 2.0 and abs(offset) < 0.5:
        change = _lane_change(view, lane_id, route_lanes, p, v, ego_len, acc_cur, ox, oy, ow, ol, ov, ids)

    accel = max(ACCEL_MIN, min(ACCEL_MAX, accel))
    return DrivingDecision(
        float(accel), float(steer), float(offset), float(heading), change, stop,
        ids[lead] if lead is not None else None, float(gap) if lead is not None else None,
    )


def _lane_change(view, lane_id, route_lanes, p, v, ego_len, acc_cur, ox, oy, ow, ol, ov, ids) -> str:
    # the free-road acceleration bounds any gain
    if idm_accel(v, p.desired_speed, None, 0.0, p) - acc_cur <= p.lane_change_threshold:
        return "keep"
    lane = view.lanes[lane_id]
    best, best_gain = "keep", p.lane_change_threshold
    for side in ("left", "right"):
        nid = getattr(lane, side)
        if nid is None or nid not in view.lanes:
            continue
        tp = _Path(view, nid, route_lanes)
        lead, lgap, foll, fgap = _lead_and_follower(tp, ox, oy, ow, ol, ov, ids, ego_len)
        if lead is not None and lgap < p.gap_accept_front:
            continue
        if foll is not None and fgap < p.gap_accept_rear:
            continue
        acc_new = (
            idm_accel(v, p.desired_speed, None, 0.0, p)
            if lead is None
            else idm_accel(v, p.desired_speed, lgap, v - ov[lead], p)
        )
        penalty = 0.0
        if foll is not None:
            vf = max(0.0, ov[foll])
            a_f = idm_accel(vf, p.desired_speed, fgap, vf - v, p)
            if a_f < -p.lane_change_safe_decel:
                continue
            penalty = p.politeness * max(0.0, -a_f)
        gain = acc_new - acc_cur - penalty
        if gain > best_gain:
            best, best_gain = side, gain
    return best
