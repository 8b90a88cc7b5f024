"""Objective world model and ego-centric structured BEV extraction."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, NamedTuple, Optional, Sequence

import numpy as np

from . import geometry as geo

KINDS = ("vehicle", "pedestrian", "static_obstacle")
MARKINGS = ("solid", "dashed")
SIGNAL_STATES = ("red", "green", "yellow")
_NEXT_STATE = {"red": "green", "green": "yellow", "yellow": "red"}

LANE_SPACING = 2.0  # m, resampling step for perceived lane geometry
DEFAULT_DT = 0.05
DEFAULT_RADIUS = 50.0
WHEELBASE = 2.7


class SceneError(ValueError):
    pass


class MissingAgentError(KeyError):
    pass


class Pose(NamedTuple):
    x: float
    y: float
    heading: float

    @classmethod
    def make(cls, x, y, heading=0.0):
        x, y, heading = float(x), float(y), float(heading)
        if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(heading)):
            raise SceneError(f"non-finite pose ({x}, {y}, {heading})")
        return cls(x, y, geo.wrap_angle(heading))


class ObjectState(NamedTuple):
    id: str
    kind: str
    pose: Pose
    speed: float
    extent: tuple  # (length, width)
    lane_id: Optional[str] = None


def make_object(id, kind, pose, speed=0.0, extent=(4.5, 2.0), lane_id=None) -> ObjectState:
    if kind not in KINDS:
        raise SceneError(f"object {id}: unknown kind {kind!r}")
    if speed < 0:
        raise SceneError(f"object {id}: negative speed {speed}")
    length, width = extent
    if not (length > 0 and width > 0):
        raise SceneError(f"object {id}: extent components must be > 0, got {extent}")
    if not isinstance(pose, Pose):
        pose = Pose.make(*pose)
    return ObjectState(str(id), kind, pose, float(speed), (float(length), float(width)), lane_id)


# --------------------------------------------------------------------------- map


@dataclass
class LaneGeometry:
    id: str
    centerline: np.ndarray
    width: float = 3.5
    marking: str = "dashed"
    successors: tuple = ()
    # derived by RoadMap
    predecessors: tuple = field(default=(), compare=False)
    left: Optional[str] = field(default=None, compare=False)
    right: Optional[str] = field(default=None, compare=False)
    chain_start: float = field(default=0.0, compare=False)

    def __post_init__(self):
        self.centerline = np.asarray(self.centerline, dtype=float)
        if self.centerline.ndim != 2 or self.centerline.shape[0] < 2 or self.centerline.shape[1] != 2:
            raise SceneError(f"lane {self.id}: centerline needs >= 2 points")
        steps = np.hypot(*np.diff(self.centerline, axis=0).T)
        if np.any(steps <= 0):
            raise SceneError(f"lane {self.id}: consecutive centerline points must be distinct")
        if not self.width > 0:
            raise SceneError(f"lane {self.id}: width must be > 0")
        if self.marking not in MARKINGS:
            raise SceneError(f"lane {self.id}: unknown marking {self.marking!r}")
        self.successors = tuple(self.successors)
        self.points = geo.resample(self.centerline, LANE_SPACING)
        self.station = geo.stations(self.points)
        self.length = float(self.station[-1])
        self.vertices = self.centerline.tolist()
        self.vertex_station = geo.stations(self.centerline).tolist()

    def locate(self, x: float, y: float):
        """(station, signed lateral offset) of a point relative to the centerline."""
        return project_py(self.vertices, self.vertex_station, x, y)

    def to_dict(self):
        return {
            "id": self.id,
            "centerline": self.centerline.tolist(),
            "width": self.width,
            "marking": self.marking,
            "successors": list(self.successors),
        }


def project_py(verts, vstat, x, y):
    """Scalar polyline projection for short polylines; returns (station, lateral)."""
    best = None
    for i in range(len(verts) - 1):
        ax, ay = verts[i]
        bx, by = verts[i + 1]
        dx, dy = bx - ax, by - ay
        l2 = dx * dx + dy * dy
        t = ((x - ax) * dx + (y - ay) * dy) / l2
        t = 0.0 if t < 0.0 else (1.0 if t > 1.0 else t)
        fx, fy = ax + t * dx, ay + t * dy
        d2 = (x - fx) ** 2 + (y - fy) ** 2
        if best is None or d2 < best[0]:
            cross = dx * (y - ay) - dy * (x - ax)
            lat = math.sqrt(d2)
            best = (d2, vstat[i] + t * math.sqrt(l2), lat if cross >= 0 else -lat)
    return best[1], best[2]


def phase_at(schedule, cycle_time: float):
    """(state, time_in_state) of a phase schedule at a position within the cycle."""
    period = sum(d for _, d in schedule)
    t = cycle_time % period
    for state, dur in schedule:
        if t < dur:
            return state, t
        t -= dur
    state, dur = schedule[-1]
    return state, dur


class SignalState(NamedTuple):
    id: str
    state: str
    stop_point: Pose
    controlled_lanes: tuple
    time_in_state: float
    schedule: tuple = ()
    cycle_time: float = 0.0


@dataclass(frozen=True)
class SignalSpec:
    id: str
    stop_point: Pose
    controlled_lanes: tuple
    schedule: tuple
    offset_s: float = 0.0

    def state_at(self, sim_time: float) -> SignalState:
        cyc = (sim_time + self.offset_s) % sum(d for _, d in self.schedule)
        st, tin = phase_at(self.schedule, cyc)
        return SignalState(self.id, st, self.stop_point, self.controlled_lanes, tin, self.schedule, cyc)

    def to_dict(self):
        return {
            "id": self.id,
            "stop_point": list(self.stop_point),
            "controlled_lanes": list(self.controlled_lanes),
            "phases": [[s, d] for s, d in self.schedule],
            "offset_s": self.offset_s,
        }


def check_schedule(sid, schedule):
    if not schedule:
        raise SceneError(f"signal {sid}: empty phase schedule")
    for s, d in schedule:
        if s not in SIGNAL_STATES:
            raise SceneError(f"signal {sid}: unknown state {s!r}")
        if not d > 0:
            raise SceneError(f"signal {sid}: phase durations must be > 0")
    n = len(schedule)
    for i in range(n):
        a, b = schedule[i][0], schedule[(i + 1) % n][0]
        if n > 1 and _NEXT_STATE[a] != b:
            raise SceneError(f"signal {sid}: transition {a}->{b} violates red->green->yellow->red")


class RoadMap:
    """Lane graph plus signal programs. Immutable after construction."""

    def __init__(self, lanes: Sequence[LaneGeometry], signals: Sequence[SignalSpec] = ()):
        self.lanes = {}
        for lane in lanes:
            if lane.id in self.lanes:
                raise SceneError(f"duplicate lane id {lane.id}")
            self.lanes[lane.id] = lane
        self.signals = {}
        for sig in signals:
            if sig.id in self.signals:
                raise SceneError(f"duplicate signal id {sig.id}")
            self.signals[sig.id] = sig
        self.problems = self._check()
        if self.problems:
            raise SceneError("; ".join(self.problems))
        self._derive()

    def _check(self):
        problems = []
        for lane in self.lanes.values():
            for s in lane.successors:
                if s not in self.lanes:
                    problems.append(f"lane {lane.id}: successor {s} does not resolve")
        for sig in self.signals.values():
            if not sig.controlled_lanes:
                problems.append(f"signal {sig.id}: controlled_lanes is empty")
            for lid in sig.controlled_lanes:
                if lid not in self.lanes:
                    problems.append(f"signal {sig.id}: controlled lane {lid} does not resolve")
            try:
                check_schedule(sig.id, sig.schedule)
            except SceneError as e:
                problems.append(str(e))
        return problems

    def _derive(self):
        preds = {lid: [] for lid in self.lanes}
        for lane in self.lanes.values():
            for s in lane.successors:
                preds[s].append(lane.id)
        for lid, p in preds.items():
            self.lanes[lid].predecessors = tuple(sorted(p))
        # chain stations: arc length from the root of each lane's predecessor chain
        for lid in sorted(self.lanes):
            lane = self.lanes[lid]
            total, cur, seen = 0.0, lane, {lid}
            while cur.predecessors:
                cur = self.lanes[cur.predecessors[0]]
                if cur.id in seen:
                    break
                seen.add(cur.id)
                total += cur.length
            lane.chain_start = total
            lane.chain_station = lane.station + total
        self._derive_neighbors()
        self._pack()

    def _derive_neighbors(self):
        ids = sorted(self.lanes)
        mids = {}
        for lid in ids:
            lane = self.lanes[lid]
            x, y, h = geo.point_at(lane.points, lane.station, 0.5 * lane.length)
            mids[lid] = (x, y, h)
        for lid in ids:
            lane = self.lanes[lid]
            x, y, h = mids[lid]
            best = {"left": None, "right": None}
            for oid in ids:
                if oid == lid:
                    continue
                other = self.lanes[oid]
                s, lat = other.locate(x, y)
                if s <= 0.0 or s >= other.length:
                    continue
                _, _, oh = geo.point_at(other.points, other.station, s)
                if abs(geo.wrap_angle(oh - h)) > 0.3:
                    continue
                gap = 0.5 * (lane.width + other.width)
                # other lane center sits at -lat relative to this lane's midpoint
                off = -lat
                if abs(abs(off) - gap) > 0.25 * gap:
                    continue
                side = "left" if off > 0 else "right"
                if best[side] is None or abs(off) < best[side][0]:
                    best[side] = (abs(off), oid)
            lane.left = best["left"][1] if best["left"] else None
            lane.right = best["right"][1] if best["right"] else None

    def _pack(self):
        ids = sorted(self.lanes)
        self.lane_ids = ids
        pts, offs = [], [0]
        centers, radii = [], []
        for lid in ids:
            p = self.lanes[lid].points
            pts.append(p)
            offs.append(offs[-1] + len(p))
            c = p.mean(axis=0)
            centers.append(c)
            radii.append(float(np.hypot(*(p - c).T).max()))
        self.all_points = np.vstack(pts)
        self.lane_offsets = np.array(offs)
        self.lane_centers = np.array(centers)
        self.lane_radii = np.array(radii)
        self._gather_cache = {}

    def gather(self, idx: tuple):
        """Point indices and segment bounds for a tuple of packed lane indices (cached)."""
        g = self._gather_cache.get(idx)
        if g is None:
            parts = [np.arange(self.lane_offsets[i], self.lane_offsets[i + 1]) for i in idx]
            sizes = [self.lane_offsets[i + 1] - self.lane_offsets[i] for i in idx]
            g = (np.concatenate(parts), np.concatenate(([0], np.cumsum(sizes))).astype(int))
            if len(self._gather_cache) < 4096:
                self._gather_cache[idx] = g
        return g

    # -- io
    @classmethod
    def from_dict(cls, data: Mapping) -> "RoadMap":
        lanes = [
            LaneGeometry(
                id=str(d["id"]),
                centerline=d["centerline"],
                width=float(d.get("width", 3.5)),
                marking=d.get("marking", "dashed"),
                successors=tuple(str(s) for s in d.get("successors", ())),
            )
            for d in data.get("lanes", ())
        ]
        sigs = [
            SignalSpec(
                id=str(d["id"]),
                stop_point=Pose.make(*d["stop_point"]),
                controlled_lanes=tuple(str(x) for x in d.get("controlled_lanes", ())),
                schedule=tuple((str(s), float(t)) for s, t in d.get("phases", ())),
                offset_s=float(d.get("offset_s", 0.0)),
            )
            for d in data.get("signals", ())
        ]
        return cls(lanes, sigs)

    @classmethod
    def load(cls, path) -> "RoadMap":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self):
        return {
            "schema_version": 1,
            "lanes": [self.lanes[i].to_dict() for i in sorted(self.lanes)],
            "signals": [self.signals[i].to_dict() for i in sorted(self.signals)],
        }

    def signal_states(self, sim_time: float) -> tuple:
        return tuple(self.signals[i].state_at(sim_time) for i in sorted(self.signals))


# ------------------------------------------------------------------- routes


@dataclass(frozen=True)
class Route:
    lanes: tuple
    destination: Pose
    total_length: float
    points: np.ndarray = field(compare=False, repr=False)

    @classmethod
    def from_lanes(cls, road: RoadMap, lane_ids: Sequence[str], start_s: float = 0.0) -> "Route":
        """Build a route over consecutive lanes, starting ``start_s`` metres into the first lane."""
        if not lane_ids:
            raise SceneError("route needs at least one lane")
        for lid in lane_ids:
            if lid not in road.lanes:
                raise SceneError(f"route references missing lane {lid}")
        for a, b in zip(lane_ids[:-1], lane_ids[1:]):
            if b not in road.lanes[a].successors:
                raise SceneError(f"route lanes {a} -> {b} are not connected")
        pts = []
        for lid in lane_ids:
            c = road.lanes[lid].centerline
            pts.extend(c.tolist() if not pts else c[1:].tolist() if np.allclose(c[0], pts[-1]) else c.tolist())
        pts = np.array(pts)
        if start_s > 0:
            st = geo.stations(pts)
            x0, y0, _ = geo.point_at(pts, st, start_s)
            keep = st > start_s + 1e-9
            pts = np.vstack(([x0, y0], pts[keep]))
        total = float(geo.stations(pts)[-1])
        if not total > 0:
            raise SceneError("route has zero length")
        dx, dy = pts[-1] - pts[-2]
        dest = Pose.make(pts[-1, 0], pts[-1, 1], math.atan2(dy, dx))
        return cls(tuple(lane_ids), dest, total, pts)

    @cached_property
    def vertices(self):
        return self.points.tolist()

    @cached_property
    def vertex_station(self):
        return geo.stations(self.points).tolist()


ROUTE_END_TOLERANCE = 0.5  # m short of the route end that still counts as complete


def route_completion(route: Route, trajectory: Sequence, tolerance: float = ROUTE_END_TOLERANCE) -> float:
    """Percentage of route arc length covered by the trajectory's projection.

    Progress is the furthest projected station reached, so the value never decreases
    as the trajectory grows. Reaching within ``tolerance`` of the end counts as 100.
    """
    if len(trajectory) == 0:
        raise ValueError("trajectory must be non-empty")
    pts = np.array([(p[0], p[1]) for p in trajectory], dtype=float)
    best = 0.0
    for chunk in range(0, len(pts), 2048):
        st, _, _ = geo.project(route.points, pts[chunk : chunk + 2048])
        best = max(best, float(st.max()))
    if best >= route.total_length - tolerance:
        return 100.0
    return float(min(100.0, max(0.0, 100.0 * best / route.total_length)))


# ------------------------------------------------------------- scripted motion


@dataclass(frozen=True)
class ScriptedMotion:
    """Object moving along a fixed path with a piecewise-linear speed profile.

    ``profile`` holds (time_s, speed) knots; speed is held constant past the last knot.
    The object stops at the end of its path.
    """

    id: str
    kind: str
    extent: tuple
    path: np.ndarray = field(repr=False)
    profile: tuple
    start_offset: float = 0.0
    lane_spans: tuple = ()  # ((lane_id, start_station, end_station), ...)

    @cached_property
    def _st(self):
        return geo.stations(self.path)

    @cached_property
    def _cum(self):
        # distance travelled at each knot
        ts = [t for t, _ in self.profile]
        vs = [v for _, v in self.profile]
        out = [0.0]
        for i in range(1, len(ts)):
            out.append(out[-1] + 0.5 * (vs[i] + vs[i - 1]) * (ts[i] - ts[i - 1]))
        return ts, vs, out

    def speed_at(self, t: float) -> float:
        ts, vs, _ = self._cum
        if t <= ts[0]:
            return vs[0]
        if t >= ts[-1]:
            return vs[-1]
        return float(np.interp(t, ts, vs))

    def distance_at(self, t: float) -> float:
        ts, vs, cum = self._cum
        if t <= ts[0]:
            return vs[0] * (t - ts[0]) if t > 0 else 0.0
        if t >= ts[-1]:
            return cum[-1] + vs[-1] * (t - ts[-1])
        i = int(np.searchsorted(ts, t, side="right")) - 1
        v = float(np.interp(t, ts, vs))
        return cum[i] + 0.5 * (vs[i] + v) * (t - ts[i])

    def state_at(self, t: float) -> ObjectState:
        s = self.start_offset + self.distance_at(t)
        end = float(self._st[-1])
        speed = self.speed_at(t)
        if s >= end:
            s, speed = end, 0.0
        x, y, h = geo.point_at(self.path, self._st, s)
        lane = None
        for lid, a, b in self.lane_spans:
            if a <= s <= b:
                lane = lid
                break
        return ObjectState(self.id, self.kind, Pose.make(x, y, h), max(0.0, speed), self.extent, lane)


def scripted_from_dict(road: RoadMap, d: Mapping) -> ScriptedMotion:
    kind = d.get("kind", "vehicle")
    if kind not in KINDS:
        raise SceneError(f"scripted object {d.get('id')}: unknown kind {kind!r}")
    extent = tuple(float(v) for v in d.get("extent", (4.5, 2.0)))
    spans = []
    if "lanes" in d:
        pts = []
        acc = 0.0
        for lid in d["lanes"]:
            if lid not in road.lanes:
                raise SceneError(f"scripted object {d['id']}: missing lane {lid}")
            c = road.lanes[lid].centerline
            spans.append((lid, acc, acc + road.lanes[lid].length))
            acc += road.lanes[lid].length
            pts.extend(c.tolist() if not pts else c[1:].tolist())
        path = np.array(pts)
    else:
        path = np.asarray(d["points"], dtype=float)
    profile = tuple((float(t), float(v)) for t, v in d.get("speed_profile", [[0.0, 0.0]]))
    if any(v < 0 for _, v in profile):
        raise SceneError(f"scripted object {d['id']}: negative speed in profile")
    return ScriptedMotion(str(d["id"]), kind, extent, path, profile, float(d.get("start_offset", 0.0)), tuple(spans))


# ------------------------------------------------------------------ scene graph


@dataclass(frozen=True)
class SceneGraph:
    step_index: int
    sim_time: float
    objects: tuple
    road: RoadMap = field(repr=False)
    signals: tuple = ()
    dt: float = DEFAULT_DT
    scripted: Mapping = field(default_factory=dict, repr=False)

    @property
    def lanes(self):
        return self.road.lanes

    @cached_property
    def index(self):
        return {o.id: o for o in self.objects}

    @cached_property
    def arrays(self):
        xs = np.array([o.pose.x for o in self.objects])
        ys = np.array([o.pose.y for o in self.objects])
        return xs, ys

    def validate(self):
        problems = []
        if self.step_index < 0:
            problems.append("step_index must be >= 0")
        if abs(self.sim_time - self.step_index * self.dt) > 1e-9 * max(1, self.step_index):
            problems.append("sim_time inconsistent with step_index * dt")
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            problems.append("object ids are not unique")
        for o in self.objects:
            if o.lane_id is not None and o.lane_id not in self.road.lanes:
                problems.append(f"object {o.id}: lane {o.lane_id} does not resolve")
            if o.speed < 0:
                problems.append(f"object {o.id}: negative speed")
        return problems


def make_scene(road, objects, step_index=0, dt=DEFAULT_DT, scripted=None) -> SceneGraph:
    objs = tuple(sorted(objects, key=lambda o: o.id))
    t = step_index * dt
    return SceneGraph(step_index, t, objs, road, road.signal_states(t), dt, dict(scripted or {}))


def scene_to_dict(scene: SceneGraph) -> dict:
    return {
        "step_index": scene.step_index,
        "sim_time": scene.sim_time,
        "objects": [
            {
                "id": o.id,
                "kind": o.kind,
                "pose": list(o.pose),
                "speed": o.speed,
                "extent": list(o.extent),
                "lane_id": o.lane_id,
            }
            for o in scene.objects
        ],
        "signals": [{"id": s.id, "state": s.state, "time_in_state": s.time_in_state} for s in scene.signals],
    }


def scene_digest(scene: SceneGraph) -> str:
    h = hashlib.blake2b(digest_size=16)
    h.update(struct.pack("<qd", scene.step_index, scene.sim_time))
    for o in scene.objects:
        h.update(o.id.encode())
        h.update(struct.pack("<5d", o.pose.x, o.pose.y, o.pose.heading, o.speed, o.extent[0]))
        h.update((o.lane_id or "").encode())
    for s in scene.signals:
        h.update(f"{s.id}:{s.state}:{s.time_in_state!r}".encode())
    return h.hexdigest()


# -------------------------------------------------------------------- BEV views


class ViewLane(NamedTuple):
    id: str
    points: np.ndarray  # ego frame
    station: np.ndarray  # chain arc length of each point
    width: float
    marking: str
    successors: tuple
    predecessors: tuple
    left: Optional[str]
    right: Optional[str]


@dataclass(frozen=True)
class BevView:
    ego_id: str
    step: int
    sim_time: float
    radius: float
    ego_pose: Pose  # world frame
    ego_speed: float
    ego_extent: tuple
    ego_lane_id: Optional[str]
    objects: tuple
    lanes: Mapping
    signals: tuple
    provenance: str = "objective"
    path_lane_ids: frozenset = frozenset()

    def replace(self, **kw) -> "BevView":
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(kw)
        return BevView(**d)


def _lane_path_ids(lanes: Mapping, ego_lane: Optional[str]) -> frozenset:
    if ego_lane is None or ego_lane not in lanes:
        return frozenset()
    out = {ego_lane}
    for attr in ("successors", "predecessors"):
        todo = [ego_lane]
        while todo:
            cur = todo.pop()
            for nxt in getattr(lanes[cur], attr):
                if nxt in lanes and nxt not in out:
                    out.add(nxt)
                    todo.append(nxt)
    return frozenset(out)


def extract_bev(scene: SceneGraph, ego_id: str, radius: float = DEFAULT_RADIUS) -> BevView:
    """Ego-centric objective view: ego at the origin, heading along +x."""
    if not radius > 0:
        raise ValueError("radius must be > 0")
    ego = scene.index.get(ego_id)
    if ego is None:
        raise MissingAgentError(ego_id)
    ex, ey, eh = ego.pose
    c, s = math.cos(eh), math.sin(eh)
    r2 = radius * radius

    xs, ys = scene.arrays
    dx = xs - ex
    dy = ys - ey
    near = np.flatnonzero(dx * dx + dy * dy <= r2)
    objs = []
    for i in near.tolist():
        o = scene.objects[i]
        if o.id == ego_id:
            continue
        ox, oy = dx[i], dy[i]
        pose = Pose(
            float(c * ox + s * oy), float(-s * ox + c * oy), geo.wrap_angle(o.pose.heading - eh)
        )
        objs.append(ObjectState(o.id, o.kind, pose, o.speed, o.extent, o.lane_id))

    road = scene.road
    cdx = road.lane_centers[:, 0] - ex
    cdy = road.lane_centers[:, 1] - ey
    cand = np.flatnonzero(cdx * cdx + cdy * cdy <= (radius + road.lane_radii) ** 2)
    lanes = {}
    if len(cand):
        gidx, bounds = road.gather(tuple(cand.tolist()))
        p = road.all_points[gidx]
        px = p[:, 0] - ex
        py = p[:, 1] - ey
        lx = c * px + s * py
        ly = -s * px + c * py
        inside = lx * lx + ly * ly <= r2
        counts = np.add.reduceat(inside, bounds[:-1], dtype=np.int64)
        pts = np.column_stack((lx, ly))
        for k, cnt in enumerate(counts.tolist()):
            if cnt < 2:
                continue
            a, b = bounds[k], bounds[k + 1]
            lane = road.lanes[road.lane_ids[cand[k]]]
            if cnt == b - a:
                lp, st = pts[a:b], lane.chain_station
            else:
                m = inside[a:b]
                lp, st = pts[a:b][m], lane.chain_station[m]
            lanes[lane.id] = ViewLane(
                lane.id, lp, st, lane.width, lane.marking, lane.successors, lane.predecessors, lane.left, lane.right
            )

    sigs = []
    for sg in scene.signals:
        sx, sy = sg.stop_point.x - ex, sg.stop_point.y - ey
        if sx * sx + sy * sy > r2:
            continue
        sp = Pose(c * sx + s * sy, -s * sx + c * sy, geo.wrap_angle(sg.stop_point.heading - eh))
        sigs.append(sg._replace(stop_point=sp))

    return BevView(
        ego_id=ego_id,
        step=scene.step_index,
        sim_time=scene.sim_time,
        radius=radius,
        ego_pose=ego.pose,
        ego_speed=ego.speed,
        ego_extent=ego.extent,
        ego_lane_id=ego.lane_id,
        objects=tuple(objs),
        lanes=lanes,
        signals=tuple(sigs),
        provenance="objective",
        path_lane_ids=_lane_path_ids(lanes, ego.lane_id),
    )


def identify_objects(view: BevView) -> list:
    """Objects ordered by (|longitudinal distance|, id)."""
    return sorted(view.objects, key=lambda o: (abs(o.pose.x), o.id))


def view_to_world(view: BevView, x: float, y: float):
    return geo.from_frame(x, y, *view.ego_pose)


def view_to_dict(view: BevView) -> dict:
    """JSON-ready view; lane points are rounded to millimetres."""
    return {
        "ego_id": view.ego_id,
        "step": view.step,
        "sim_time": view.sim_time,
        "provenance": view.provenance,
        "ego_pose": list(view.ego_pose),
        "ego_speed": view.ego_speed,
        "objects": [
            {"id": o.id, "kind": o.kind, "pose": list(o.pose), "speed": o.speed, "extent": list(o.extent),
             "lane_id": o.lane_id}
            for o in view.objects
        ],
        "lanes": [
            {"id": lid, "marking": view.lanes[lid].marking, "width": view.lanes[lid].width,
             "points": np.round(view.lanes[lid].points, 3).tolist()}
            for lid in sorted(view.lanes)
        ],
        "signals": [{"id": s.id, "state": s.state, "stop_point": list(s.stop_point)} for s in view.signals],
    }


def view_digest(view: BevView) -> str:
    h = hashlib.blake2b(digest_size=16)
    h.update(repr((view.ego_id, view.step, view.provenance, view.objects, view.signals)).encode())
    for lid in sorted(view.lanes):
        ln = view.lanes[lid]
        h.update(f"{lid}|{ln.width!r}|{ln.marking}".encode())
        h.update(np.ascontiguousarray(ln.points).tobytes())
    return h.hexdigest()


# ------------------------------------------------------------------ kinematics


def _next_lane(road: RoadMap, lane: LaneGeometry, route: Optional[Route]):
    if not lane.successors:
        return None
    if route is not None:
        lanes = route.lanes
        if lane.id in lanes:
            i = lanes.index(lane.id)
            if i + 1 < len(lanes) and lanes[i + 1] in lane.successors:
                return lanes[i + 1]
        for s in lane.successors:
            if s in lanes:
                return s
    return lane.successors[0]


def advance_kinematics(
    scene: SceneGraph,
    decisions: Mapping,
    dt: Optional[float] = None,
    routes: Optional[Mapping] = None,
    wheelbase: float = WHEELBASE,
) -> SceneGraph:
    """Integrate one step.

    Controlled vehicles use a kinematic bicycle update with semi-implicit Euler: speed
    (clamped at 0) and heading are updated first, then position with the new values.
    Scripted objects are placed from their motion scripts; everything else stays put.
    """
    dt = scene.dt if dt is None else dt
    if not dt > 0:
        raise ValueError("dt must be > 0")
    road = scene.road
    step = scene.step_index + 1
    t_new = step * dt
    out = []
    for o in scene.objects:
        dec = decisions.get(o.id)
        if dec is not None:
            if o.kind != "vehicle":
                raise SceneError(f"decision for non-vehicle {o.id}")
            v = o.speed + dec.accel * dt
            v = v if v > 0.0 else 0.0
            h = o.pose.heading
            if v > 0.0 and dec.steer:
                h = h + v / wheelbase * math.tan(dec.steer) * dt
            x = o.pose.x + v * math.cos(h) * dt
            y = o.pose.y + v * math.sin(h) * dt
            lane_id = o.lane_id
            if lane_id is not None:
                if dec.lane_change != "keep":
                    nb = getattr(road.lanes[lane_id], dec.lane_change)
                    if nb is not None:
                        lane_id = nb
                lane = road.lanes[lane_id]
                st, _ = lane.locate(x, y)
                route = routes.get(o.id) if routes else None
                while st >= lane.length - 1e-9:
                    nxt = _next_lane(road, lane, route)
                    if nxt is None:
                        break
                    lane = road.lanes[nxt]
                    st, _ = lane.locate(x, y)
                lane_id = lane.id
            out.append(ObjectState(o.id, o.kind, Pose(x, y, geo.wrap_angle(h)), v, o.extent, lane_id))
        elif o.id in scene.scripted:
            out.append(scene.scripted[o.id].state_at(t_new))
        else:
            out.append(o)
    return SceneGraph(step, t_new, tuple(out), road, road.signal_states(t_new), dt, scene.scripted)
