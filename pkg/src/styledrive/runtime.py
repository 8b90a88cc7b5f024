"""Simulation loop: per agent and step, view extraction, trigger polling, translation,
script application and decision; then one integration step and event detection."""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple, Optional, Sequence

import numpy as np

from . import dcl, maps, metrics, pmbi, rng
from . import geometry as geo
from .scene import (
    DEFAULT_RADIUS,
    BevView,
    ROUTE_END_TOLERANCE,
    MissingAgentError,
    ObjectState,
    Pose,
    RoadMap,
    Route,
    SceneError,
    SceneGraph,
    advance_kinematics,
    extract_bev,
    identify_objects,
    make_object,
    project_py,
    scripted_from_dict,
    view_digest,
)
from .style import (
    L2_UPDATE,
    L3_TRIGGER,
    LAYERS,
    BehaviorDescription,
    PolicySet,
    StyleError,
    StyleSchedule,
    StyleTriplet,
    TraitRegistry,
    default_registry,
    effective_intensity_l2,
    generate_description,
)
from .translator import HttpProvider, ProviderError, Translator, TranslationRequest

SCHEMA_VERSION = 1
ROLES = ("background_driver", "ego_under_test")
DEFAULT_PENALTIES = metrics.DEFAULT_PENALTIES
COLLISION_KIND = {"vehicle": "collision_vehicle", "pedestrian": "collision_pedestrian",
                  "static_obstacle": "collision_static"}
DATA_DIR = Path(__file__).parent / "data"


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class IntegrityError(RuntimeError):
    def __init__(self, step, message):
        self.step = step
        super().__init__(f"record {step}: {message}")


# --------------------------------------------------------------------- config


@dataclass(frozen=True)
class AgentConfig:
    id: str
    style: StyleTriplet
    route: Route
    spawn: Pose
    lane_id: str
    seed: int
    speed: float = 0.0
    extent: tuple = (4.5, 2.0)
    controller: dcl.ControllerParams = field(default_factory=dcl.ControllerParams)
    role: str = "background_driver"


@dataclass
class SimulationConfig:
    road: RoadMap
    agents: list
    dt: float = 0.05
    max_steps: int = 6000
    run_seed: int = 0
    bev_radius: float = DEFAULT_RADIUS
    l2_period: int = 2000
    l3_rate: float = 0.064
    ramp_steps: int = 4000
    pulse_amplitude: float = 0.2
    pulse_steps: int = 40
    delta: float = pmbi.DEFAULT_DELTA
    provider: dict = field(default_factory=lambda: {"enabled": False})
    scripted: dict = field(default_factory=dict)  # id -> ScriptedMotion
    static_objects: list = field(default_factory=list)
    penalties: dict = field(default_factory=lambda: dict(DEFAULT_PENALTIES))
    deviation_distance: float = 5.0
    deviation_steps: int = 100
    stop_when_done: bool = True
    raw: dict = field(default_factory=dict)  # normalized scenario document

    def digest(self) -> str:
        return config_digest(self.raw)


def config_digest(doc: Mapping) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.blake2b(blob, digest_size=16).hexdigest()


def _resolve_map(ref, base: Optional[Path], problems) -> Optional[dict]:
    if isinstance(ref, dict):
        if "generator" in ref:
            kw = {k: v for k, v in ref.items() if k != "generator"}
            gen = {"corridor": maps.corridor, "crossing": maps.crossing}.get(ref["generator"])
            if gen is None:
                problems.append(f"map: unknown generator {ref['generator']!r}")
                return None
            try:
                return gen(**kw)
            except TypeError as exc:
                problems.append(f"map: bad generator arguments: {exc}")
                return None
        return ref
    if isinstance(ref, str):
        cands = [Path(ref)]
        if base is not None:
            cands.insert(0, base / ref)
        cands.append(DATA_DIR / "scenarios" / ref)
        for c in cands:
            if c.is_file():
                try:
                    return json.loads(c.read_text())
                except (OSError, ValueError) as exc:
                    problems.append(f"map {ref}: unreadable ({exc})")
                    return None
        problems.append(f"map {ref!r} not found")
        return None
    problems.append("map reference missing")
    return None


def _expand_groups(doc: dict, run_seed: int) -> list:
    """Agent groups: ``count`` agents spawned back to back on a corridor lane."""
    out = []
    for g in doc.get("agent_groups", ()):
        lane = int(g["lane"])
        piece = float(g.get("piece", 50.0))
        for i in range(int(g["count"])):
            aid = f"{g['prefix']}{i:02d}"
            jitter = float(g.get("jitter", 0.0)) * (2.0 * rng.uniform(run_seed, "spawn", aid) - 1.0)
            x = float(g["front_x"]) - i * float(g["spacing"]) + jitter
            end_x = float(g["end_x"])
            out.append({
                "id": aid,
                "style": list(g.get("style", ["normal"] * 3)),
                "spawn": {"x": x, "lane": lane, "speed": float(g.get("speed", 0.0))},
                "route": {"corridor_lane": lane, "end_x": end_x, "piece": piece},
                "role": g.get("role", "background_driver"),
            })
    return out


def _agent_route_and_spawn(a: dict, road: RoadMap, problems) -> tuple:
    aid = a.get("id", "?")
    sp = a.get("spawn", {})
    r = a.get("route", {})
    lanes = None
    if isinstance(r, dict) and "corridor_lane" in r:
        piece = float(r.get("piece", 50.0))
        lanes = maps.corridor_lanes(int(r["corridor_lane"]), float(sp.get("x", 0.0)), float(r["end_x"]), piece)
    elif isinstance(r, dict):
        lanes = r.get("lanes")
    elif isinstance(r, list):
        lanes = r
    if not lanes:
        problems.append(f"agent {aid}: route has no lanes")
        return None, None, None
    missing = [l for l in lanes if l not in road.lanes]
    if missing:
        problems.append(f"agent {aid}: route references missing lane(s) {missing}")
        return None, None, None
    lane_id = lanes[0]
    lane = road.lanes[lane_id]
    if "pose" in sp:
        pose = Pose.make(*sp["pose"])
        s0, _ = lane.locate(pose.x, pose.y)
    else:
        if "x" in sp:
            s0, _ = lane.locate(float(sp["x"]), float(lane.centerline[0][1]))
        else:
            s0 = float(sp.get("s", 0.0))
        x, y, h = geo.point_at(lane.points, lane.station, s0)
        pose = Pose.make(x, y, h)
    try:
        route = Route.from_lanes(road, lanes, start_s=max(0.0, s0))
    except SceneError as exc:
        problems.append(f"agent {aid}: {exc}")
        return None, None, None
    return route, pose, lane_id


def load_config(source, overrides: Optional[Mapping] = None, registry: Optional[TraitRegistry] = None) -> SimulationConfig:
    """Parse and validate a scenario (path or dict). All problems are reported together."""
    base = None
    if isinstance(source, (str, os.PathLike)):
        p = Path(source)
        base = p.parent
        doc = json.loads(p.read_text())
    else:
        doc = copy.deepcopy(dict(source))
    if overrides:
        apply_overrides(doc, overrides)
    registry = registry or default_registry()
    problems = []
    if doc.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        problems.append(f"unsupported schema_version {doc.get('schema_version')}")
    dt = doc.get("dt", 0.05)
    max_steps = doc.get("max_steps", 6000)
    if not isinstance(dt, (int, float)) or not dt > 0:
        problems.append("dt must be > 0")
    if not isinstance(max_steps, int) or max_steps < 1:
        problems.append("max_steps must be an integer >= 1")
    sched = doc.get("schedule", {})
    if sched.get("l2_period", 2000) < 1:
        problems.append("schedule.l2_period must be >= 1")
    if sched.get("l3_rate", 0.064) < 0:
        problems.append("schedule.l3_rate must be >= 0")
    run_seed = int(doc.get("run_seed", 0))

    map_doc = _resolve_map(doc.get("map"), base, problems)
    road = None
    if map_doc is not None:
        try:
            road = RoadMap.from_dict(map_doc)
        except (SceneError, KeyError, TypeError, ValueError) as exc:
            problems.append(f"map: {exc}")

    try:
        ctrl_default = dcl.ControllerParams.from_dict(doc.get("controller", {}))
    except (ValueError, TypeError) as exc:
        problems.append(f"controller: {exc}")
        ctrl_default = dcl.ControllerParams()

    raw_agents = list(doc.get("agents", ())) + _expand_groups(doc, run_seed)
    agents = []
    seen = set()
    seeds = set()
    for a in raw_agents:
        aid = str(a.get("id", ""))
        if not aid:
            problems.append("agent without id")
            continue
        if aid in seen:
            problems.append(f"duplicate agent id {aid}")
        seen.add(aid)
        try:
            style = StyleTriplet.parse(a.get("style", ["normal"] * 3))
            for pr in style.problems(registry):
                problems.append(f"agent {aid}: {pr}")
        except StyleError as exc:
            problems.append(f"agent {aid}: {exc}")
            style = None
        role = a.get("role", "background_driver")
        if role not in ROLES:
            problems.append(f"agent {aid}: unknown role {role!r}")
        if role == "ego_under_test" and style is not None and not style.is_normal():
            problems.append(f"agent {aid}: the ego under test must be all-normal")
        seed = int(a["seed"]) if "seed" in a else rng.derive_seed(run_seed, "agent", aid)
        if seed in seeds:
            problems.append(f"agent {aid}: seed {seed} is not unique")
        seeds.add(seed)
        ctrl = ctrl_default
        if "controller" in a:
            try:
                ctrl = dcl.ControllerParams.from_dict({**ctrl_default.to_dict(), **a["controller"]})
            except (ValueError, TypeError) as exc:
                problems.append(f"agent {aid}: controller: {exc}")
        if road is None:
            continue
        route, pose, lane_id = _agent_route_and_spawn(a, road, problems)
        if route is None or style is None:
            continue
        speed = float(a.get("spawn", {}).get("speed", 0.0))
        if speed < 0:
            problems.append(f"agent {aid}: negative spawn speed")
        agents.append(AgentConfig(aid, style, route, pose, lane_id, seed, speed,
                                  tuple(a.get("extent", (4.5, 2.0))), ctrl, role))

    scripted = {}
    statics = []
    if road is not None:
        for s in doc.get("scripted", ()):
            try:
                sm = scripted_from_dict(road, s)
            except (SceneError, KeyError, TypeError, ValueError) as exc:
                problems.append(f"scripted {s.get('id', '?')}: {exc}")
                continue
            if sm.id in seen or sm.id in scripted:
                problems.append(f"duplicate object id {sm.id}")
            scripted[sm.id] = sm
        for s in doc.get("static_objects", ()):
            try:
                statics.append(make_object(s["id"], s.get("kind", "static_obstacle"), Pose.make(*s["pose"]), 0.0,
                                           tuple(s.get("extent", (2.0, 2.0))), s.get("lane")))
            except (SceneError, KeyError, TypeError, ValueError) as exc:
                problems.append(f"static object {s.get('id', '?')}: {exc}")

    pen = dict(DEFAULT_PENALTIES)
    for k, v in doc.get("penalties", {}).items():
        if k not in pen:
            problems.append(f"penalties: unknown infraction kind {k!r}")
        elif not 0 < v <= 1:
            problems.append(f"penalties: {k} must be in (0, 1]")
        else:
            pen[k] = float(v)

    if problems:
        raise ConfigError(problems)

    normalized = dict(doc)
    normalized["map"] = map_doc
    normalized["schema_version"] = SCHEMA_VERSION
    dev = doc.get("route_deviation", {})
    return SimulationConfig(
        road=road,
        agents=sorted(agents, key=lambda a: a.id),
        dt=float(dt),
        max_steps=int(max_steps),
        run_seed=run_seed,
        bev_radius=float(doc.get("bev_radius", DEFAULT_RADIUS)),
        l2_period=int(sched.get("l2_period", 2000)),
        l3_rate=float(sched.get("l3_rate", 0.064)),
        ramp_steps=int(sched.get("ramp_steps", 4000)),
        pulse_amplitude=float(sched.get("pulse_amplitude", 0.2)),
        pulse_steps=int(sched.get("pulse_steps", 40)),
        delta=float(doc.get("delta", pmbi.DEFAULT_DELTA)),
        provider=dict(doc.get("provider", {"enabled": False})),
        scripted=scripted,
        static_objects=statics,
        penalties=pen,
        deviation_distance=float(dev.get("distance", 5.0)),
        deviation_steps=int(dev.get("steps", 100)),
        stop_when_done=bool(doc.get("stop_when_done", True)),
        raw=normalized,
    )


ALIASES = {"l2_period": "schedule.l2_period", "l3_rate": "schedule.l3_rate", "seed": "run_seed",
           "ramp_steps": "schedule.ramp_steps"}


def apply_overrides(doc: dict, overrides: Mapping):
    """Set dotted keys in a scenario document; values are parsed as JSON when possible."""
    for key, val in overrides.items():
        key = ALIASES.get(key, key)
        if isinstance(val, str):
            try:
                val = json.loads(val)
            except ValueError:
                pass
        parts = key.split(".")
        cur = doc
        for p in parts[:-1]:
            if isinstance(cur, list):
                cur = cur[int(p)]
            else:
                cur = cur.setdefault(p, {})
        if isinstance(cur, list):
            cur[int(parts[-1])] = val
        else:
            cur[parts[-1]] = val
    return doc


# --------------------------------------------------------------------- events


class InfractionEvent(NamedTuple):
    step: int
    agents: tuple
    kind: str
    snapshot: dict

    def to_dict(self):
        return {"step": self.step, "agents": list(self.agents), "kind": self.kind, "snapshot": self.snapshot}


def _radius(o: ObjectState) -> float:
    return 0.5 * math.hypot(*o.extent)


def contact_pairs(scene: SceneGraph) -> list:
    """Overlapping object pairs (ids sorted within and across pairs)."""
    objs = scene.objects
    n = len(objs)
    if n < 2:
        return []
    xs, ys = scene.arrays
    rs = np.fromiter((_radius(o) for o in objs), float, n)
    dx = xs[:, None] - xs[None, :]
    dy = ys[:, None] - ys[None, :]
    near = dx * dx + dy * dy <= (rs[:, None] + rs[None, :]) ** 2
    ii, jj = np.nonzero(np.triu(near, 1))
    out = []
    for i, j in zip(ii.tolist(), jj.tolist()):
        a, b = objs[i], objs[j]
        ra = geo.rect_corners(a.pose.x, a.pose.y, a.pose.heading, *a.extent)
        rb = geo.rect_corners(b.pose.x, b.pose.y, b.pose.heading, *b.extent)
        if geo.rects_overlap(ra, rb):
            out.append(tuple(sorted((a.id, b.id))))
    return sorted(out)


def detect_collisions(scene: SceneGraph, previous: Optional[set] = None, agent_ids=None) -> list:
    """Collision events for pairs in contact now but not in ``previous``.

    With ``agent_ids`` given, only pairs involving at least one of them are reported.
    """
    idx = scene.index
    events = []
    for a, b in contact_pairs(scene):
        if previous is not None and (a, b) in previous:
            continue
        if agent_ids is not None and a not in agent_ids and b not in agent_ids:
            continue
        ka, kb = idx[a].kind, idx[b].kind
        other = kb if ka == "vehicle" else ka
        if ka != "vehicle" and kb != "vehicle":
            other = kb
        kind = COLLISION_KIND.get(other, "collision_static")
        snap = {o: [*idx[o].pose, idx[o].speed, *idx[o].extent] for o in (a, b)}
        events.append(InfractionEvent(scene.step_index, (a, b), kind, snap))
    return events


def red_light_crossings(prev: SceneGraph, cur: SceneGraph, agent_ids) -> list:
    """Agents whose front axle crossed a stop line of a red signal controlling their lane."""
    out = []
    for sg in prev.signals:
        if sg.state != "red":
            continue
        sx, sy, sh = sg.stop_point
        c, s = math.cos(sh), math.sin(sh)
        for aid in agent_ids:
            a0 = prev.index.get(aid)
            a1 = cur.index.get(aid)
            if a0 is None or a1 is None:
                continue
            if a0.lane_id not in sg.controlled_lanes and a1.lane_id not in sg.controlled_lanes:
                continue
            f0 = _front_axle(a0)
            f1 = _front_axle(a1)
            l0 = (f0[0] - sx) * c + (f0[1] - sy) * s
            l1 = (f1[0] - sx) * c + (f1[1] - sy) * s
            lat = -(f1[0] - sx) * s + (f1[1] - sy) * c
            if l0 < 0.0 <= l1 and abs(lat) < 10.0:
                out.append(InfractionEvent(cur.step_index, (aid,), "red_light",
                                           {"signal": sg.id, "pose": list(a1.pose)}))
    return out


def _front_axle(o: ObjectState):
    d = 0.5 * o.extent[0] - 0.9
    return o.pose.x + d * math.cos(o.pose.heading), o.pose.y + d * math.sin(o.pose.heading)


# -------------------------------------------------------------------- agents


class _RouteTracker:
    """Route station and lateral offset using a moving segment hint."""

    def __init__(self, route: Route):
        self.v = route.vertices
        self.s = route.vertex_station
        self.i = 0
        self.best = 0.0

    def update(self, x, y):
        v, s = self.v, self.s
        lo = max(0, self.i - 2)
        hi = min(len(v) - 1, self.i + 3)
        st, lat = project_py(v[lo : hi + 1], s[lo : hi + 1], x, y)
        while self.i + 1 < len(s) - 1 and st > s[self.i + 1]:
            self.i += 1
        while self.i > 0 and st < s[self.i]:
            self.i -= 1
        self.best = max(self.best, st)
        return st, lat


@dataclass
class AgentState:
    cfg: AgentConfig
    schedule: StyleSchedule
    consistency: pmbi.ConsistencyState
    tracker: _RouteTracker
    description: Optional[BehaviorDescription] = None
    policies: PolicySet = field(default_factory=PolicySet)
    init_count: int = 0
    l2_updates: int = 0
    l3_triggers: int = 0
    active: bool = True
    scoring: bool = True
    completed: bool = False
    deviation_run: int = 0
    last_script_digest: Optional[str] = None
    rc_final: Optional[float] = None
    infractions: dict = field(default_factory=dict)


def _fmt(x: float) -> float:
    return float(x)


@dataclass
class RunResult:
    config: SimulationConfig
    header: dict
    lines: list
    digest: str
    events: list
    agents: dict
    tracks: dict
    summary: dict
    translation_events: list
    transcripts: list

    def log_text(self) -> str:
        return "".join(l + "\n" for l in self.lines)


class Simulation:
    """One run. ``bypass_pmbi`` decides on objective views directly (baseline for
    non-intrusiveness checks); ``shuffle_seed`` permutes per-agent evaluation order."""

    def __init__(
        self,
        config: SimulationConfig,
        *,
        provider=None,
        bypass_pmbi: bool = False,
        shuffle_seed: Optional[int] = None,
        keep_lines: bool = True,
        sink=None,
        registry: Optional[TraitRegistry] = None,
    ):
        self.cfg = config
        self.registry = registry or default_registry()
        self.registry.freeze()
        self.provider_notice = None
        self.current_step = None
        if provider is None and config.provider.get("enabled"):
            try:
                provider = HttpProvider(config.provider.get("endpoint"), config.provider.get("model"))
            except ProviderError as exc:
                self.provider_notice = f"provider disabled: {exc}"
        self.translator = Translator(self.registry, provider=provider)
        self.bypass = bypass_pmbi
        self.shuffle = random.Random(shuffle_seed) if shuffle_seed is not None else None
        self.keep_lines = keep_lines
        self.sink = sink
        self.lines: list = []
        self.hash = hashlib.blake2b(digest_size=16)
        self.events: list = []
        self.translation_events: list = []
        self.routes = {a.id: a.route for a in config.agents}
        self.agents = {}
        for a in config.agents:
            self.agents[a.id] = AgentState(
                a,
                StyleSchedule(a.seed, config.l2_period, config.l3_rate, config.dt),
                pmbi.ConsistencyState(delta=config.delta),
                _RouteTracker(a.route),
            )
        objs = [make_object(a.id, "vehicle", a.spawn, a.speed, a.extent, a.lane_id) for a in config.agents]
        objs += [sm.state_at(0.0) for sm in config.scripted.values()]
        objs += list(config.static_objects)
        ids = [o.id for o in objs]
        if len(set(ids)) != len(ids):
            raise ConfigError(["object ids are not unique"])
        self.world = SceneGraph(0, 0.0, tuple(sorted(objs, key=lambda o: o.id)), config.road,
                                config.road.signal_states(0.0), config.dt, dict(config.scripted))
        self.contacts: set = set()
        self._step_events: list = []
        self._digests: dict = {}
        self.tracks = {a.id: {k: [] for k in ("t", "x", "y", "h", "v", "a", "off", "gap", "lead", "lane")}
                       for a in config.agents}
        self.header = {
            "schema_version": SCHEMA_VERSION,
            "record": "header",
            "config_digest": config.digest(),
            "config": config.raw,
            "bypass_pmbi": bypass_pmbi,
            "provider": "on" if provider is not None else "off",
        }
        if self.provider_notice:
            self.header["notice"] = self.provider_notice
        self._emit(self.header)

    # -- logging
    def _emit(self, rec: dict):
        line = json.dumps(rec, sort_keys=True, separators=(",", ":"))
        self.hash.update(line.encode())
        self.hash.update(b"\n")
        if self.keep_lines:
            self.lines.append(line)
        if self.sink is not None:
            self.sink.write(line + "\n")

    # -- translation
    def _translate(self, st: AgentState, mode: str, t: int) -> list:
        a = st.cfg
        tr_events = []
        before = len(self.translator.events)
        if mode == "Init":
            gen = self.translator.describe_with_provider()
            desc_events = []
            st.description = generate_description(a.style, gen, self.registry, desc_events)
            for e in desc_events:
                tr_events.append(dict(e, agent=a.id))
            pols = self.translator.translate(TranslationRequest("Init", st.description, a.id, None, a.seed, 1))
            st.policies = PolicySet(pols.get("L1"), pols.get("L2"), pols.get("L3"), versions=(1, 0, 0))
            st.init_count += 1
        elif mode == "Update":
            st.l2_updates += 1
            version = st.policies.version("L2") + 1
            p2 = st.policies.p2
            new = None
            if p2 is not None:
                new = self.translator.translate(TranslationRequest("Update", p2, a.id, "L2", a.seed, version))["L2"]
            st.policies = st.policies.with_policy("L2", new)
        else:
            st.l3_triggers += 1
            version = st.policies.version("L3") + 1
            new = None
            if a.style.l3 != "normal":
                new = self.translator.translate(
                    TranslationRequest("ReInterpret", st.description, a.id, "L3", a.seed, version))["L3"]
            st.policies = st.policies.with_policy("L3", new)
        tr_events.extend(self.translator.events[before:])
        rec = {"mode": mode, "step": t, "versions": list(st.policies.versions),
               "sources": {l: p.source for l, p in st.policies.policies()}}
        if tr_events:
            rec["events"] = tr_events
        return [rec]

    # -- script synthesis
    def _intensities(self, st: AgentState, t: int) -> dict:
        out = {}
        p2 = st.policies.p2
        if p2 is not None:
            out["L2"] = effective_intensity_l2(
                p2, t, p2.pattern, ramp_steps=self.cfg.ramp_steps, pulse_amplitude=self.cfg.pulse_amplitude,
                pulse_steps=self.cfg.pulse_steps, seed=st.cfg.seed)
        return out

    def build_script(self, st: AgentState, view: BevView, t: int) -> pmbi.Script:
        ints = self._intensities(st, t)
        calls = pmbi.script_calls_for_view(view, st.policies, ints, st.cfg.seed)
        calls = [pmbi.enforce_consistency(st.consistency, c) for c in calls]
        return pmbi.Script(st.cfg.id, tuple(calls))

    # -- main loop
    def order(self, ids: list) -> list:
        ids = sorted(ids)
        if self.shuffle is not None:
            self.shuffle.shuffle(ids)
        return ids

    def step(self, t: int):
        cfg = self.cfg
        world = self.world
        decisions = {}
        records = {}
        active = [aid for aid, st in self.agents.items() if st.active]
        for aid in self.order(active):
            st = self.agents[aid]
            a = st.cfg
            view = extract_bev(world, aid, cfg.bev_radius)
            fired = st.schedule.poll(t)
            trans = []
            if st.init_count == 0:
                trans += self._translate(st, "Init", t)
            if L2_UPDATE in fired:
                trans += self._translate(st, "Update", t)
            if L3_TRIGGER in fired:
                trans += self._translate(st, "ReInterpret", t)

            if self.bypass:
                script = pmbi.Script(aid)
                subj = view
            else:
                script = self.build_script(st, view, t)
                subj = pmbi.apply_script(view, script, st.consistency, cfg.dt)
            dec = dcl.decide(subj, a.route, a.controller)
            decisions[aid] = dec

            rec = {
                "v": list(st.policies.versions),
                "d": [_fmt(dec.accel), _fmt(dec.steer), dec.lane_change, dec.stop_for_signal, dec.lead_id,
                      dec.lead_gap],
            }
            if fired:
                rec["trg"] = sorted(fired)
            if trans:
                rec["tr"] = trans
            if script.calls:
                dg = self._digests.get(script.calls)
                if dg is None:
                    if len(self._digests) > 50000:
                        self._digests.clear()
                    dg = self._digests[script.calls] = script.digest()
                rec["sd"] = dg
                if dg != st.last_script_digest:
                    rec["s"] = script.to_wire()
                st.last_script_digest = dg
                rec["vd"] = view_digest(subj)
                rec["div"] = pmbi.perception_divergence(view, subj)
            else:
                st.last_script_digest = None
            if st.consistency.skipped:
                rec["skip"] = list(st.consistency.skipped)
                st.consistency.skipped.clear()
            # objective lead gap on the own lane path
            lead = pmbi.lead_object_id(view)
            if lead is not None:
                o = next(o for o in view.objects if o.id == lead)
                rec["og"] = [lead, _fmt(o.pose.x - 0.5 * o.extent[0] - 0.5 * a.extent[0]), _fmt(o.speed)]
            records[aid] = rec

        # the state that produced this step's decisions
        agent_rows = {}
        idx = world.index
        for aid in sorted(records):
            o = idx[aid]
            st = self.agents[aid]
            rec = records[aid]
            lane = cfg.road.lanes[o.lane_id] if o.lane_id else None
            off = lane.locate(o.pose.x, o.pose.y)[1] if lane is not None else 0.0
            rs, rl = st.tracker.update(o.pose.x, o.pose.y)
            rec.update(p=[o.pose.x, o.pose.y, o.pose.heading], sp=o.speed, ln=o.lane_id, off=off, rs=rs, rl=rl)
            agent_rows[aid] = rec
            tr = self.tracks[aid]
            tr["t"].append(t)
            tr["x"].append(o.pose.x)
            tr["y"].append(o.pose.y)
            tr["h"].append(o.pose.heading)
            tr["v"].append(o.speed)
            tr["a"].append(rec["d"][0])
            tr["off"].append(off)
            og = rec.get("og")
            tr["gap"].append(og[1] if og else float("nan"))
            tr["lead"].append(og[0] if og else None)
            tr["lane"].append(o.lane_id)

        scripted = {sid: [*idx[sid].pose, idx[sid].speed] for sid in cfg.scripted if sid in idx}
        step_events = [e.to_dict() for e in self._step_events]
        rec = {"record": "step", "t": t, "agents": agent_rows, "obj": scripted}
        if step_events:
            rec["ev"] = step_events
        self._emit(rec)

        # integrate and detect
        new = advance_kinematics(world, decisions, cfg.dt, self.routes)
        self._post_step(world, new, t)

    def _post_step(self, prev: SceneGraph, new: SceneGraph, t: int):
        cfg = self.cfg
        agent_ids = {aid for aid, st in self.agents.items() if st.active}
        events = []
        pairs = set(contact_pairs(new))
        for ev in detect_collisions(new, self.contacts, agent_ids):
            events.append(ev)
        self.contacts = pairs
        events += red_light_crossings(prev, new, sorted(agent_ids))
        remove = set()
        for aid in sorted(agent_ids):
            st = self.agents[aid]
            o = new.index[aid]
            rs, rl = st.tracker.update(o.pose.x, o.pose.y)
            if st.scoring:
                if abs(rl) > cfg.deviation_distance:
                    st.deviation_run += 1
                    if st.deviation_run >= cfg.deviation_steps:
                        st.scoring = False
                        st.rc_final = 100.0 * min(1.0, st.tracker.best / st.cfg.route.total_length)
                        events.append(InfractionEvent(new.step_index, (aid,), "route_deviation",
                                                      {"pose": list(o.pose), "lateral": rl}))
                else:
                    st.deviation_run = 0
            if st.tracker.best >= st.cfg.route.total_length - ROUTE_END_TOLERANCE:
                st.completed = True
                st.active = False
                remove.add(aid)
        for ev in events:
            for aid in ev.agents:
                if aid in self.agents and self.agents[aid].scoring and ev.kind != "route_deviation":
                    inf = self.agents[aid].infractions
                    inf[ev.kind] = inf.get(ev.kind, 0) + 1
        self.events.extend(events)
        self._step_events = events
        if remove:
            new = SceneGraph(new.step_index, new.sim_time, tuple(o for o in new.objects if o.id not in remove),
                             new.road, new.signals, new.dt, new.scripted)
        self.world = new

    def run(self) -> RunResult:
        self._step_events = []
        for t in range(self.cfg.max_steps + 1):
            if not any(st.active for st in self.agents.values()):
                break
            self.current_step = t
            self.step(t)
        summary = self.summary()
        tail = {"record": "summary", "summary": summary}
        self._emit(tail)
        return RunResult(self.cfg, self.header, self.lines, self.hash.hexdigest(), self.events,
                         self.agents, self.tracks, summary, self.translation_events,
                         list(self.translator.transcripts))

    def summary(self) -> dict:
        out = {}
        for aid, st in sorted(self.agents.items()):
            rc = st.rc_final
            if rc is None and st.completed:
                rc = 100.0
            elif rc is None:
                rc = 100.0 * min(1.0, st.tracker.best / st.cfg.route.total_length)
            pen = metrics.penalty_product(st.infractions, self.cfg.penalties)
            out[aid] = {
                "role": st.cfg.role,
                "style": list(st.cfg.style),
                "rc": rc,
                "ds": rc * pen,
                "penalty_product": pen,
                "infractions": dict(sorted(st.infractions.items())),
                "completed": st.completed,
                "init_translations": st.init_count,
                "l2_updates": st.l2_updates,
                "l3_triggers": st.l3_triggers,
                "versions": list(st.policies.versions),
            }
        return out


def run(config, **kw) -> RunResult:
    if not isinstance(config, SimulationConfig):
        config = load_config(config)
    return Simulation(config, **kw).run()


# --------------------------------------------------------------------- replay


def read_log(lines) -> tuple:
    """(header, step records, summary) from JSONL text lines; bad JSON raises IntegrityError."""
    header = None
    steps = []
    summary = None
    for i, line in enumerate(lines):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except ValueError as exc:
            raise IntegrityError(i, f"unparseable record ({exc})") from None
        kind = rec.get("record") if isinstance(rec, dict) else None
        if kind == "header":
            header = rec
        elif kind == "step":
            steps.append(rec)
        elif kind == "summary":
            summary = rec.get("summary")
        else:
            raise IntegrityError(i, "unknown record type")
    if header is None:
        raise IntegrityError(0, "missing header")
    if header.get("schema_version") != SCHEMA_VERSION:
        raise IntegrityError(0, f"unsupported schema_version {header.get('schema_version')}")
    if config_digest(header["config"]) != header.get("config_digest"):
        raise IntegrityError(0, "config digest mismatch")
    return header, steps, summary


@dataclass
class ReplayFrame:
    step: int
    agent: str
    objective: BevView
    subjective: BevView
    script: pmbi.Script
    decision: dcl.DrivingDecision


def _scene_from_record(cfg: SimulationConfig, rec: dict, statics) -> SceneGraph:
    objs = []
    for aid, r in rec["agents"].items():
        a = next(x for x in cfg.agents if x.id == aid)
        objs.append(ObjectState(aid, "vehicle", Pose(*r["p"]), r["sp"], a.extent, r["ln"]))
    for sid, (x, y, h, v) in rec.get("obj", {}).items():
        sm = cfg.scripted[sid]
        lane = sm.state_at(rec["t"] * cfg.dt).lane_id
        objs.append(ObjectState(sid, sm.kind, Pose(x, y, h), v, sm.extent, lane))
    objs += statics
    t = rec["t"]
    return SceneGraph(t, t * cfg.dt, tuple(sorted(objs, key=lambda o: o.id)), cfg.road,
                      cfg.road.signal_states(t * cfg.dt), cfg.dt, {})


def replay(lines, agents: Optional[Sequence[str]] = None, steps: Optional[range] = None, verify: bool = True):
    """Rebuild objective and subjective views from a log, step by step.

    Yields ``ReplayFrame`` for the requested agents and steps. Every step is still
    processed in order because stale-perception state carries across steps. With
    ``verify`` the script, subjective view and decision digests are checked against
    the log and the first mismatch raises IntegrityError.
    """
    header, recs, _ = read_log(lines)
    cfg = load_config(header["config"])
    statics = list(cfg.static_objects)
    states = {a.id: pmbi.ConsistencyState(delta=cfg.delta) for a in cfg.agents}
    scripts = {}
    by_id = {a.id: a for a in cfg.agents}
    prev_t = -1
    for rec in recs:
        t = rec.get("t")
        if not isinstance(t, int) or t != prev_t + 1:
            raise IntegrityError(t, "step sequence broken")
        prev_t = t
        try:
            scene = _scene_from_record(cfg, rec, statics)
        except (KeyError, TypeError, ValueError, StopIteration) as exc:
            raise IntegrityError(t, f"malformed step record ({exc})") from None
        for aid in sorted(rec["agents"]):
            r = rec["agents"][aid]
            view = extract_bev(scene, aid, cfg.bev_radius)
            if "sd" in r:
                if "s" in r:
                    try:
                        scripts[aid] = pmbi.Script.from_wire(aid, r["s"])
                    except (KeyError, TypeError, ValueError) as exc:
                        raise IntegrityError(t, f"agent {aid}: malformed script ({exc})") from None
                script = scripts.get(aid)
                if script is None:
                    raise IntegrityError(t, f"agent {aid}: script digest without script")
                if verify and script.digest() != r["sd"]:
                    raise IntegrityError(t, f"agent {aid}: script digest mismatch")
                subj = pmbi.apply_script(view, script, states[aid], cfg.dt)
                if verify and view_digest(subj) != r.get("vd"):
                    raise IntegrityError(t, f"agent {aid}: subjective view digest mismatch")
            else:
                script = pmbi.Script(aid)
                scripts.pop(aid, None)
                subj = pmbi.apply_script(view, script, states[aid], cfg.dt)
            states[aid].skipped.clear()
            want = agents is None or aid in agents
            want_step = steps is None or t in steps
            if verify or (want and want_step):
                dec = dcl.decide(subj, by_id[aid].route, by_id[aid].controller)
                if verify:
                    d = r["d"]
                    got = [dec.accel, dec.steer, dec.lane_change, dec.stop_for_signal, dec.lead_id, dec.lead_gap]
                    if got != d:
                        raise IntegrityError(t, f"agent {aid}: decision mismatch")
                if want and want_step:
                    yield ReplayFrame(t, aid, view, subj, script, dec)
        if steps is not None and not verify and t >= steps.stop - 1:
            return


def replay_digest(lines) -> str:
    """Digest over all reconstructed subjective views (raises on any mismatch)."""
    h = hashlib.blake2b(digest_size=16)
    for fr in replay(lines):
        h.update(f"{fr.step}|{fr.agent}|{view_digest(fr.subjective)}\n".encode())
    return h.hexdigest()
