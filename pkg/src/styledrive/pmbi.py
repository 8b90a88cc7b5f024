"""Perception modulation: API catalog, scripts, the script interpreter and the
log-ratio consistency guard."""

from __future__ import annotations

import functools
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Optional, Sequence

import numpy as np

from . import geometry as geo
from . import rng
from .scene import BevView, ObjectState, Pose, SignalState, ViewLane, phase_at
from .style import LAYERS, ContractViolation, PolicySet

DIMENSIONS = ("motion", "spatial", "temporal", "structural")
RELATIONS = ("lead", "same_lane", "oncoming", "any")
DEFAULT_DELTA = 0.1
OBJECT_KINDS = ("vehicle", "pedestrian", "static_obstacle")


class ScriptError(ValueError):
    pass


class ParamSpec(NamedTuple):
    lo: float
    hi: float
    neutral: float
    guarded: bool = False  # multiplicative: subject to the log-ratio bound
    scaled: bool = True  # value follows policy intensity


@dataclass(frozen=True)
class ModulationApiDescriptor:
    name: str
    dimension: str
    params: Mapping  # name -> ParamSpec
    target: str  # objects | signals | lanes
    kinds: tuple = ()
    monotone: bool = False
    doc: str = ""

    @property
    def parameter_schema(self):
        return {k: (v.lo, v.hi) for k, v in self.params.items()}

    @property
    def applicable_targets(self):
        return self.kinds if self.target == "objects" else (self.target,)

    def describe(self) -> str:
        ps = ", ".join(f"{k} in [{v.lo}, {v.hi}] (neutral {v.neutral})" for k, v in self.params.items())
        return f"{self.name} [{self.dimension}; targets {self.target}]: {self.doc} Params: {ps}."


def _api(name, dim, target, params, monotone=False, doc="", kinds=OBJECT_KINDS):
    return ModulationApiDescriptor(
        name, dim, {k: ParamSpec(*v) for k, v in params.items()}, target,
        kinds if target == "objects" else (), monotone, doc,
    )


_CATALOG = (
    _api("scale_perceived_speed", "motion", "objects", {"factor": (0.5, 2.0, 1.0, True)}, True,
         "Multiply the perceived speed of matched objects."),
    _api("bias_perceived_heading", "motion", "objects", {"angle": (-0.5, 0.5, 0.0)}, False,
         "Rotate the perceived heading of matched objects by a fixed angle (rad)."),
    _api("freeze_motion_update", "motion", "objects", {"hold_s": (0.05, 10.0, 0.05, True)}, False,
         "Refresh matched objects only every hold_s seconds; in between they are extrapolated "
         "at the speed and heading captured at the last refresh."),
    _api("drop_object_velocity", "motion", "objects", {"probability": (0.0, 1.0, 0.0)}, False,
         "With the given per-step probability, perceive a matched object as standing still."),
    _api("scale_perceived_distance", "spatial", "objects", {"factor": (0.5, 2.0, 1.0, True)}, True,
         "Scale matched object positions radially from the ego."),
    _api("offset_object_position", "spatial", "objects", {"dx": (-5.0, 5.0, 0.0), "dy": (-5.0, 5.0, 0.0)}, True,
         "Translate matched objects in the ego frame (m)."),
    _api("scale_object_size", "spatial", "objects", {"factor": (0.5, 2.0, 1.0, True)}, True,
         "Multiply the perceived footprint of matched objects."),
    _api("occlude_object", "spatial", "objects", {"probability": (0.0, 1.0, 0.0)}, False,
         "With the given per-step probability, a matched object is not perceived at all."),
    _api("shift_signal_phase", "temporal", "signals", {"offset_s": (-10.0, 10.0, 0.0)}, False,
         "Perceive matched signals as if their cycle were offset by offset_s seconds."),
    _api("delay_signal_perception", "temporal", "signals", {"delay_s": (0.0, 10.0, 0.0)}, False,
         "Perceive the state matched signals had delay_s seconds ago."),
    _api("stretch_perceived_yellow", "temporal", "signals", {"factor": (0.5, 3.0, 1.0, True)}, False,
         "Perceive yellow as lasting factor times its real duration (factor < 1 ends it early)."),
    _api("misread_signal_state", "temporal", "signals", {"probability": (0.0, 1.0, 0.0)}, False,
         "With the given per-step probability, perceive the next state of the cycle instead."),
    _api("curve_lane_marks", "structural", "lanes",
         {"amplitude": (0.0, 2.0, 0.0), "wavelength": (10.0, 200.0, 60.0, True, False)}, False,
         "Bend matched lane centerlines sideways by amplitude*sin(2*pi*s/wavelength) at arc length s."),
    _api("widen_perceived_lane", "structural", "lanes", {"factor": (0.5, 2.0, 1.0, True)}, True,
         "Multiply the perceived width of matched lanes."),
    _api("shift_lane_center", "structural", "lanes", {"offset": (-2.0, 2.0, 0.0)}, True,
         "Shift matched lane centerlines sideways (m, left positive)."),
    _api("erase_lane_marking", "structural", "lanes", {"probability": (0.0, 1.0, 0.0)}, False,
         "With the given per-step probability, a matched lane is not perceived."),
)
_BY_NAME = {d.name: d for d in _CATALOG}
_ORDER = {d.name: i for i, d in enumerate(_CATALOG)}


def catalog() -> list:
    return list(_CATALOG)


def descriptor(name: str) -> ModulationApiDescriptor:
    try:
        return _BY_NAME[name]
    except KeyError:
        raise ScriptError(f"unknown api {name!r}") from None


def is_api(name) -> bool:
    return name in _BY_NAME


# ------------------------------------------------------------------- scripts


class Selector(NamedTuple):
    kind: Optional[str] = None
    relation: str = "any"
    target_id: Optional[str] = None

    @classmethod
    def from_dict(cls, d) -> "Selector":
        d = d or {}
        return cls(d.get("kind"), d.get("relation", "any"), d.get("target_id"))

    def to_dict(self):
        out = {"relation": self.relation}
        if self.kind is not None:
            out["kind"] = self.kind
        if self.target_id is not None:
            out["target_id"] = self.target_id
        return out

    def key(self) -> str:
        return f"{self.kind or '*'}|{self.relation}|{self.target_id or '*'}"


class ApiCall(NamedTuple):
    api: str
    selector: Selector
    params: tuple  # sorted ((name, value), ...)
    layer: str
    call_seed: int = 0

    @classmethod
    def make(cls, api, selector, params: Mapping, layer, call_seed=0) -> "ApiCall":
        if not isinstance(selector, Selector):
            selector = Selector.from_dict(selector)
        return cls(api, selector, tuple(sorted((k, float(v)) for k, v in params.items())), layer, int(call_seed))

    @property
    def param_map(self) -> dict:
        return dict(self.params)

    def with_params(self, params: Mapping) -> "ApiCall":
        return self._replace(params=tuple(sorted((k, float(v)) for k, v in params.items())))

    def to_dict(self):
        return {
            "api": self.api,
            "selector": self.selector.to_dict(),
            "params": dict(self.params),
            "layer": self.layer,
            "call_seed": self.call_seed,
        }

    @classmethod
    def from_dict(cls, d) -> "ApiCall":
        return cls.make(d["api"], d.get("selector"), d.get("params", {}), d["layer"], d.get("call_seed", 0))


def call_sort_key(c: ApiCall):
    return (LAYERS.index(c.layer) if c.layer in LAYERS else 9, _ORDER.get(c.api, 99), c.selector.key())


@dataclass(frozen=True)
class Script:
    agent_id: str
    calls: tuple = ()

    def __post_init__(self):
        seen = set()
        for c in self.calls:
            k = (c.layer, c.api, c.selector)
            if k in seen:
                raise ScriptError(f"duplicate call {k}")
            seen.add(k)

    @classmethod
    def build(cls, agent_id, calls: Sequence[ApiCall]) -> "Script":
        """Order calls canonically, keeping the first of any duplicate (layer, api, selector)."""
        uniq = {}
        for c in calls:
            uniq.setdefault((c.layer, c.api, c.selector), c)
        return cls(agent_id, tuple(sorted(uniq.values(), key=call_sort_key)))

    def to_wire(self) -> list:
        return [c.to_dict() for c in self.calls]

    @classmethod
    def from_wire(cls, agent_id, data) -> "Script":
        return cls.build(agent_id, [ApiCall.from_dict(d) for d in data])

    def digest(self) -> str:
        return script_digest(self.to_wire())


def script_digest(wire: list) -> str:
    blob = json.dumps(wire, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.blake2b(blob, digest_size=16).hexdigest()


def check_call(call: ApiCall) -> list:
    """Schema errors for a single call (empty when valid)."""
    errs = []
    d = _BY_NAME.get(call.api)
    if d is None:
        return [f"unknown api {call.api!r}"]
    if call.layer not in LAYERS:
        errs.append(f"{call.api}: unknown layer {call.layer!r}")
    pm = call.param_map
    for k, spec in d.params.items():
        if k not in pm:
            errs.append(f"{call.api}: missing param {k}")
            continue
        v = pm[k]
        if not math.isfinite(v):
            errs.append(f"{call.api}.{k}: non-finite value")
        elif not spec.lo <= v <= spec.hi:
            errs.append(f"{call.api}.{k}={v} out of range [{spec.lo}, {spec.hi}]")
    for k in pm:
        if k not in d.params:
            errs.append(f"{call.api}: unknown param {k}")
    sel = call.selector
    if sel.relation not in RELATIONS:
        errs.append(f"{call.api}: unknown relation {sel.relation!r}")
    if d.target == "objects":
        if sel.kind is not None and sel.kind not in d.kinds:
            errs.append(f"{call.api}: selector kind {sel.kind!r} not applicable")
    else:
        if sel.kind is not None:
            errs.append(f"{call.api}: selector kind not applicable to {d.target}")
        if sel.relation not in ("same_lane", "any"):
            errs.append(f"{call.api}: relation {sel.relation!r} not applicable to {d.target}")
    return errs


# ---------------------------------------------------------------- consistency


@dataclass
class FrozenTrack:
    step: int
    x: float
    y: float
    heading: float
    speed: float


@dataclass
class ConsistencyState:
    """Per-agent memory: last applied guarded values and stale-perception captures."""

    delta: float = DEFAULT_DELTA
    last: dict = field(default_factory=dict)  # (layer, api, selector_key, param) -> value
    tracks: dict = field(default_factory=dict)  # (layer, api, object_id) -> FrozenTrack
    skipped: list = field(default_factory=list)  # scene-scope violations, drained by the caller

    def snapshot(self) -> dict:
        return {"|".join(k): v for k, v in sorted(self.last.items())}


def _clamp_log(v: float, prev: float, delta: float) -> float:
    hi = prev * math.exp(delta)
    lo = prev * math.exp(-delta)
    # keep the stored value strictly inside the bound after rounding
    while abs(math.log(hi / prev)) > delta:
        hi = math.nextafter(hi, prev)
    while abs(math.log(lo / prev)) > delta:
        lo = math.nextafter(lo, prev)
    return min(max(v, lo), hi)


def enforce_consistency(state: ConsistencyState, call: ApiCall) -> ApiCall:
    """Clamp guarded params so |ln v - ln v_prev| <= delta, then record them."""
    d = _BY_NAME[call.api]
    pm = call.param_map
    changed = False
    for k, spec in d.params.items():
        if not spec.guarded or k not in pm:
            continue
        key = (call.layer, call.api, call.selector.key(), k)
        v = pm[k]
        prev = state.last.get(key)
        if prev is not None and abs(math.log(v / prev)) > state.delta:
            v = min(max(_clamp_log(v, prev, state.delta), spec.lo), spec.hi)
            pm[k] = v
            changed = True
        state.last[key] = v
    return call.with_params(pm) if changed else call


def guarded_param(api: str, param: str) -> bool:
    d = _BY_NAME.get(api)
    return bool(d and param in d.params and d.params[param].guarded)


# ------------------------------------------------------------ policy mapping


def _target_type(obj):
    if isinstance(obj, ObjectState):
        return "objects"
    if isinstance(obj, SignalState):
        return "signals"
    if isinstance(obj, ViewLane):
        return "lanes"
    raise ScriptError(f"cannot map policies onto {type(obj).__name__}")


def scaled_value(spec: ParamSpec, full: float, intensity: float) -> float:
    if not spec.scaled:
        return float(full)
    v = spec.neutral + intensity * (full - spec.neutral)
    return float(min(max(v, spec.lo), spec.hi))


@functools.lru_cache(maxsize=65536)
def call_seed_for(agent_seed: int, layer: str, api: str, version: int) -> int:
    return rng.derive_seed(agent_seed, "call", layer, api, version)


def map_policy_to_calls(
    obj,
    policy_set: PolicySet,
    api_catalog=None,
    *,
    intensities: Optional[Mapping] = None,
    agent_seed: int = 0,
    view: Optional[BevView] = None,
) -> list:
    """Calls from the policy set that apply to one perceived object, lane or signal.

    Scaled params take ``neutral + intensity * (full - neutral)`` where ``full`` is the
    fragment's value at full expression. ``intensities`` overrides the policy intensity
    per layer (used for time-varying physiological effects). When ``view`` is given,
    relations are checked against it; otherwise only kind filters apply.
    """
    by_name = _BY_NAME if api_catalog is None else {d.name: d for d in api_catalog}
    ttype = _target_type(obj)
    out = []
    for layer, pol in policy_set.policies():
        inten = pol.intensity if intensities is None else intensities.get(layer, pol.intensity)
        for tmpl in pol.fragment:
            d = by_name.get(tmpl["api"])
            if d is None:
                raise ScriptError(f"policy {layer} references unregistered api {tmpl['api']!r}")
            if d.target != ttype:
                continue
            sel = Selector.from_dict(tmpl.get("selector"))
            if view is not None:
                if not selector_matches(sel, obj, view):
                    continue
            elif ttype == "objects" and sel.kind is not None and sel.kind != obj.kind:
                continue
            params = {k: scaled_value(d.params[k], v, inten) for k, v in tmpl.get("params", {}).items()}
            for k, spec in d.params.items():
                params.setdefault(k, spec.neutral)
            seed = call_seed_for(agent_seed, layer, d.name, policy_set.version(layer))
            out.append(ApiCall.make(d.name, sel, params, layer, seed))
    return sorted(out, key=call_sort_key)


def script_calls_for_view(
    view: BevView, policy_set: PolicySet, intensities: Optional[Mapping] = None, agent_seed: int = 0
) -> list:
    """Union of :func:`map_policy_to_calls` over every object, lane and signal in the view.

    Evaluated per call template rather than per target: a template contributes one call
    as soon as any target in the view matches its selector.
    """
    out = []
    lead_id = ...
    for layer, pol in policy_set.policies():
        inten = pol.intensity if intensities is None else intensities.get(layer, pol.intensity)
        for tmpl in pol.fragment:
            d = _BY_NAME[tmpl["api"]]
            sel = Selector.from_dict(tmpl.get("selector"))
            if d.target == "objects":
                if sel.relation == "lead" and lead_id is ...:
                    lead_id = lead_object_id(view)
                hit = any(selector_matches(sel, o, view, lead_id) for o in view.objects)
            elif d.target == "lanes":
                hit = any(selector_matches(sel, ln, view) for ln in view.lanes.values())
            else:
                hit = any(selector_matches(sel, s, view) for s in view.signals)
            if not hit:
                continue
            params = {k: scaled_value(d.params[k], v, inten) for k, v in tmpl.get("params", {}).items()}
            for k, spec in d.params.items():
                params.setdefault(k, spec.neutral)
            seed = call_seed_for(agent_seed, layer, d.name, policy_set.version(layer))
            out.append(ApiCall.make(d.name, sel, params, layer, seed))
    return Script.build("", out).calls


# ---------------------------------------------------------------- selectors


def lead_object_id(view: BevView) -> Optional[str]:
    best = None
    for o in view.objects:
        if o.pose.x > 0 and o.lane_id in view.path_lane_ids:
            if best is None or (o.pose.x, o.id) < (best.pose.x, best.id):
                best = o
    return best.id if best else None


def selector_matches(sel: Selector, obj, view: BevView, lead_id=...) -> bool:
    if sel.target_id is not None and getattr(obj, "id", None) != sel.target_id:
        return False
    if isinstance(obj, ObjectState):
        if sel.kind is not None and obj.kind != sel.kind:
            return False
        r = sel.relation
        if r == "any":
            return True
        if r == "same_lane":
            return obj.lane_id in view.path_lane_ids
        if r == "oncoming":
            return abs(obj.pose.heading) > 0.5 * math.pi
        if r == "lead":
            if lead_id is ...:
                lead_id = lead_object_id(view)
            return obj.id == lead_id
        return False
    if isinstance(obj, ViewLane):
        return sel.relation == "any" or obj.id in view.path_lane_ids
    if isinstance(obj, SignalState):
        return sel.relation == "any" or any(l in view.path_lane_ids for l in obj.controlled_lanes)
    return False


# ------------------------------------------------------------- interpreter


def _hit(seed, step, target_id, p) -> bool:
    return p > 0.0 and rng.uniform(seed, step, target_id) < p


def _signal_at(sig: SignalState, cycle_time: float) -> SignalState:
    st, tin = phase_at(sig.schedule, cycle_time)
    return sig._replace(state=st, time_in_state=tin, cycle_time=cycle_time % sum(d for _, d in sig.schedule))


def _yellow_duration(sig: SignalState) -> float:
    for s, d in sig.schedule:
        if s == "yellow":
            return d
    return 0.0


def _lane_normals(points: np.ndarray) -> np.ndarray:
    """Unit left normals from central-difference tangents (one-sided at the ends)."""
    m = len(points)
    if m < 2:
        return np.zeros_like(points)
    t = np.empty_like(points)
    t[0] = points[1] - points[0]
    t[-1] = points[-1] - points[-2]
    if m > 2:
        t[1:-1] = (points[2:] - points[:-2]) / 2.0
    n = np.hypot(t[:, 0], t[:, 1])
    n[n == 0] = 1.0
    out = np.empty_like(points)
    out[:, 0] = -t[:, 1] / n
    out[:, 1] = t[:, 0] / n
    return out


def apply_script(view: BevView, script: Script, state: Optional[ConsistencyState] = None, dt: float = 0.05) -> BevView:
    """Subjective view produced by running the script's calls in order.

    The input view is not modified. Calls whose selector targets an id absent from the
    view are skipped and reported in ``state.skipped`` when a state is given.
    """
    if state is None:
        state = ConsistencyState()
    if view.provenance != "objective":
        raise ScriptError("apply_script expects an objective view")
    if not script.calls:
        return view.replace(provenance="modulated")

    objs = list(view.objects)
    lanes = dict(view.lanes)
    sigs = list(view.signals)
    lead_id = lead_object_id(view)
    # selectors resolve against the objective view so calls do not interact through relations
    base_objs = {o.id: o for o in view.objects}
    base_lanes = view.lanes
    base_sigs = {s.id: s for s in view.signals}
    skipped = []
    ex, ey, eh = view.ego_pose
    step = view.step

    for call in script.calls:
        d = _BY_NAME[call.api]
        pm = call.param_map
        sel = call.selector
        if sel.target_id is not None:
            pool = base_objs if d.target == "objects" else base_sigs if d.target == "signals" else base_lanes
            if sel.target_id not in pool:
                skipped.append({"api": call.api, "layer": call.layer, "target_id": sel.target_id})
                continue

        if d.target == "objects":
            out = []
            seen = set()
            for o in objs:
                base = base_objs.get(o.id)
                if base is None or not selector_matches(sel, base, view, lead_id):
                    out.append(o)
                    continue
                seen.add(o.id)
                o2 = _apply_object(call, pm, o, state, step, dt, ex, ey, eh)
                if o2 is not None:
                    out.append(o2)
            objs = out
            if call.api == "freeze_motion_update":
                # forget objects that left the matched set
                for k in [k for k in state.tracks if k[0] == call.layer and k[1] == call.api and k[2] not in seen]:
                    del state.tracks[k]
        elif d.target == "signals":
            sigs = [
                _apply_signal(call, pm, s) if selector_matches(sel, base_sigs[s.id], view) else s
                for s in sigs
            ]
        else:
            new = {}
            for lid, ln in lanes.items():
                if not selector_matches(sel, base_lanes[lid], view):
                    new[lid] = ln
                    continue
                ln2 = _apply_lane(call, pm, ln, step)
                if ln2 is not None:
                    new[lid] = ln2
            lanes = new

    state.skipped.extend(skipped)
    return view.replace(objects=tuple(objs), lanes=lanes, signals=tuple(sigs), provenance="modulated")


def _apply_object(call, pm, o: ObjectState, state, step, dt, ex, ey, eh):
    api = call.api
    p = o.pose
    if api == "scale_perceived_speed":
        return o._replace(speed=o.speed * pm["factor"])
    if api == "bias_perceived_heading":
        return o._replace(pose=Pose(p.x, p.y, geo.wrap_angle(p.heading + pm["angle"])))
    if api == "freeze_motion_update":
        n = max(1, int(round(pm["hold_s"] / dt)))
        key = (call.layer, api, o.id)
        tr = state.tracks.get(key)
        if tr is None or step - tr.step >= n or step < tr.step:
            wx, wy = geo.from_frame(p.x, p.y, ex, ey, eh)
            state.tracks[key] = FrozenTrack(step, wx, wy, geo.wrap_angle(p.heading + eh), o.speed)
            return o
        el = (step - tr.step) * dt
        wx = tr.x + tr.speed * math.cos(tr.heading) * el
        wy = tr.y + tr.speed * math.sin(tr.heading) * el
        x, y = geo.to_frame(wx, wy, ex, ey, eh)
        return o._replace(pose=Pose(float(x), float(y), geo.wrap_angle(tr.heading - eh)), speed=tr.speed)
    if api == "drop_object_velocity":
        return o._replace(speed=0.0) if _hit(call.call_seed, step, o.id, pm["probability"]) else o
    if api == "scale_perceived_distance":
        f = pm["factor"]
        return o._replace(pose=Pose(p.x * f, p.y * f, p.heading))
    if api == "offset_object_position":
        return o._replace(pose=Pose(p.x + pm["dx"], p.y + pm["dy"], p.heading))
    if api == "scale_object_size":
        f = pm["factor"]
        return o._replace(extent=(o.extent[0] * f, o.extent[1] * f))
    if api == "occlude_object":
        return None if _hit(call.call_seed, step, o.id, pm["probability"]) else o
    raise ScriptError(f"no object handler for {api}")


def _apply_signal(call, pm, s: SignalState) -> SignalState:
    api = call.api
    if not s.schedule:
        return s
    if api == "shift_signal_phase":
        return _signal_at(s, s.cycle_time + pm["offset_s"])
    if api == "delay_signal_perception":
        return _signal_at(s, s.cycle_time - pm["delay_s"])
    if api == "stretch_perceived_yellow":
        f = pm["factor"]
        yd = _yellow_duration(s)
        if f > 1.0 and s.state == "red" and s.time_in_state < (f - 1.0) * yd:
            return s._replace(state="yellow", time_in_state=yd + s.time_in_state)
        if f < 1.0 and s.state == "yellow" and s.time_in_state >= f * yd:
            return s._replace(state="red", time_in_state=s.time_in_state - f * yd)
        return s
    if api == "misread_signal_state":
        if _hit(call.call_seed, 0, f"{s.id}@{s.cycle_time!r}", pm["probability"]):
            nxt = {"red": "green", "green": "yellow", "yellow": "red"}[s.state]
            return s._replace(state=nxt, time_in_state=0.0)
        return s
    raise ScriptError(f"no signal handler for {api}")


def _apply_lane(call, pm, ln: ViewLane, step):
    api = call.api
    if api == "curve_lane_marks":
        a = pm["amplitude"]
        if a == 0.0:
            return ln
        off = a * np.sin(2.0 * math.pi * ln.station / pm["wavelength"])
        return ln._replace(points=ln.points + _lane_normals(ln.points) * off[:, None])
    if api == "widen_perceived_lane":
        return ln._replace(width=ln.width * pm["factor"])
    if api == "shift_lane_center":
        if pm["offset"] == 0.0:
            return ln
        return ln._replace(points=ln.points + _lane_normals(ln.points) * pm["offset"])
    if api == "erase_lane_marking":
        return None if _hit(call.call_seed, step, ln.id, pm["probability"]) else ln
    raise ScriptError(f"no lane handler for {api}")


# ---------------------------------------------------------------- divergence


def perception_divergence(objective: BevView, modulated: BevView) -> dict:
    """How far a subjective view departs from the objective one.

    Missing objects count with displacement equal to their objective range.
    """
    if objective.ego_id != modulated.ego_id or objective.step != modulated.step:
        raise ContractViolation("views must share ego and step")
    mod = {o.id: o for o in modulated.objects}
    disp = 0.0
    ratio_dev = 0.0
    n_ratio = 0
    size_dev = 0.0
    missing = 0
    for o in objective.objects:
        m = mod.get(o.id)
        if m is None:
            missing += 1
            disp += math.hypot(o.pose.x, o.pose.y)
            continue
        disp += math.hypot(m.pose.x - o.pose.x, m.pose.y - o.pose.y)
        size_dev += abs(m.extent[0] / o.extent[0] - 1.0)
        if o.speed > 1e-6:
            ratio_dev += abs(m.speed / o.speed - 1.0)
            n_ratio += 1
        elif m.speed != o.speed:
            ratio_dev = float("inf")
            n_ratio += 1
    n = len(objective.objects)
    msig = {s.id: s.state for s in modulated.signals}
    sig_dis = sum(1 for s in objective.signals if msig.get(s.id) != s.state)
    sq = 0.0
    cnt = 0
    for lid, ln in objective.lanes.items():
        m = modulated.lanes.get(lid)
        if m is None or m.points.shape != ln.points.shape:
            continue
        if m.points is ln.points:
            cnt += len(ln.points)
            continue
        d = m.points - ln.points
        sq += float((d * d).sum())
        cnt += len(d)
    return {
        "mean_displacement": disp / n if n else 0.0,
        "speed_ratio_dev": ratio_dev / n_ratio if n_ratio else 0.0,
        "size_ratio_dev": size_dev / (n - missing) if n > missing else 0.0,
        "missing_objects": missing,
        "signal_disagreements": sig_dis,
        "missing_lanes": sum(1 for lid in objective.lanes if lid not in modulated.lanes),
        "lane_lateral_rms": math.sqrt(sq / cnt) if cnt else 0.0,
    }
