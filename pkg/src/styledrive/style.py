"""Driver style model: trait registry, style triplets, policies and layer triggers."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Callable, Mapping, NamedTuple, Optional

import numpy as np

from . import rng

LAYERS = ("L1", "L2", "L3")
NORMAL = "normal"
PATTERNS = ("incremental", "episodic")

L2_UPDATE = "L2Update"
L3_TRIGGER = "L3Trigger"

DEFAULT_L2_PERIOD = 2000
DEFAULT_L3_RATE = 0.064  # events per second of simulated time
DEFAULT_RAMP_STEPS = 4000
DEFAULT_PULSE_AMPLITUDE = 0.2
DEFAULT_PULSE_STEPS = 40


class StyleError(ValueError):
    pass


class ContractViolation(RuntimeError):
    pass


# ------------------------------------------------------------------- registry


@dataclass(frozen=True)
class TraitSpec:
    name: str
    layer: str
    default_intensity: float
    description_template: str
    statement: str
    pattern: Optional[str] = None


class TraitRegistry:
    """Trait name -> spec. New traits may be registered until :meth:`freeze`."""

    def __init__(self, neutral_description: str, traits=()):
        self.neutral_description = neutral_description
        self._traits: dict[str, TraitSpec] = {}
        self.frozen = False
        for t in traits:
            self.register(t)

    def register(self, spec: TraitSpec):
        if self.frozen:
            raise StyleError("trait registry is closed once a simulation starts")
        if spec.layer not in LAYERS:
            raise StyleError(f"trait {spec.name}: unknown layer {spec.layer!r}")
        if spec.name == NORMAL or spec.name in self._traits:
            raise StyleError(f"trait {spec.name!r} already registered")
        if not 0.0 <= spec.default_intensity <= 1.0:
            raise StyleError(f"trait {spec.name}: default_intensity outside [0, 1]")
        if spec.layer == "L2" and spec.pattern not in PATTERNS:
            raise StyleError(f"trait {spec.name}: L2 traits need a pattern in {PATTERNS}")
        if spec.name not in spec.description_template.lower():
            raise StyleError(f"trait {spec.name}: description template must name the trait")
        self._traits[spec.name] = spec

    def freeze(self):
        self.frozen = True
        return self

    def __getitem__(self, name) -> TraitSpec:
        return self._traits[name]

    def __contains__(self, name):
        return name in self._traits

    def names(self, layer=None):
        return [n for n, t in self._traits.items() if layer is None or t.layer == layer]

    def layer_of(self, name):
        return self._traits[name].layer

    @classmethod
    def from_dict(cls, data: Mapping) -> "TraitRegistry":
        reg = cls(data.get("neutral_description", "A normal driver."))
        for name, d in data.get("traits", {}).items():
            reg.register(
                TraitSpec(
                    name=name,
                    layer=d["layer"],
                    default_intensity=float(d["default_intensity"]),
                    description_template=d["description_template"],
                    statement=d["policy_template"]["statement"],
                    pattern=d.get("pattern"),
                )
            )
        return reg

    @classmethod
    def load(cls, path=None) -> "TraitRegistry":
        if path is None:
            text = resources.files("styledrive.data").joinpath("traits.json").read_text()
        else:
            with open(path) as f:
                text = f.read()
        return cls.from_dict(json.loads(text))


_DEFAULT_REGISTRY: Optional[TraitRegistry] = None


def default_registry() -> TraitRegistry:
    global _DEFAULT_REGISTRY
    if _DEFAULT_REGISTRY is None:
        _DEFAULT_REGISTRY = TraitRegistry.load().freeze()
    return _DEFAULT_REGISTRY


# -------------------------------------------------------------------- triplets


class StyleTriplet(NamedTuple):
    l1: str = NORMAL
    l2: str = NORMAL
    l3: str = NORMAL

    @classmethod
    def parse(cls, value) -> "StyleTriplet":
        if isinstance(value, StyleTriplet):
            return value
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",")]
        vals = list(value)
        if len(vals) != 3:
            raise StyleError(f"style needs three entries (L1, L2, L3), got {vals!r}")
        return cls(*[str(v) for v in vals])

    def problems(self, registry: Optional[TraitRegistry] = None) -> list:
        registry = registry or default_registry()
        out = []
        for layer, trait in zip(LAYERS, self):
            if trait == NORMAL:
                continue
            if trait not in registry:
                out.append(f"unknown trait {trait!r} for layer {layer}")
            elif registry.layer_of(trait) != layer:
                out.append(f"trait {trait!r} belongs to {registry.layer_of(trait)}, not {layer}")
        return out

    def validate(self, registry=None) -> "StyleTriplet":
        p = self.problems(registry)
        if p:
            raise StyleError("; ".join(p))
        return self

    def tags(self) -> frozenset:
        return frozenset((layer, t) for layer, t in zip(LAYERS, self) if t != NORMAL)

    def is_normal(self) -> bool:
        return all(t == NORMAL for t in self)

    def label(self) -> str:
        return "/".join(self)


@dataclass(frozen=True)
class BehaviorDescription:
    text: str
    trait_tags: frozenset
    source: str = "template"


def extract_tags(text: str, registry: Optional[TraitRegistry] = None) -> frozenset:
    """Registered trait names that appear as whole words in the text."""
    registry = registry or default_registry()
    words = set(re.findall(r"[a-z]+", text.lower()))
    return frozenset((registry.layer_of(n), n) for n in registry.names() if n in words)


def template_description(style: StyleTriplet, registry: Optional[TraitRegistry] = None) -> str:
    registry = registry or default_registry()
    parts = [registry[t].description_template for t in style if t != NORMAL]
    return " ".join(parts) if parts else registry.neutral_description


def generate_description(
    style: StyleTriplet,
    generator: Optional[Callable[[StyleTriplet], Optional[str]]] = None,
    registry: Optional[TraitRegistry] = None,
    events: Optional[list] = None,
) -> BehaviorDescription:
    """Natural-language description of a style.

    ``generator`` may return free text (e.g. from a language model); the result is
    kept only if its extracted tags match the triplet exactly, otherwise the
    template text is substituted and an event is appended to ``events``.
    """
    registry = registry or default_registry()
    style.validate(registry)
    want = style.tags()
    if generator is not None:
        try:
            text = generator(style)
        except Exception as exc:  # provider failures never fail the run
            text = None
            if events is not None:
                events.append({"event": "description_fallback", "reason": f"{type(exc).__name__}: {exc}"})
        if isinstance(text, str) and text.strip():
            if extract_tags(text, registry) == want:
                return BehaviorDescription(text.strip(), want, "provider")
            if events is not None:
                events.append({"event": "description_fallback", "reason": "trait tags mismatch"})
    text = template_description(style, registry)
    return BehaviorDescription(text, extract_tags(text, registry), "template")


# -------------------------------------------------------------------- policies


@dataclass(frozen=True)
class Policy:
    """One layer's perception bias.

    ``fragment`` holds call templates whose scaled params are given at full
    expression (intensity 1); ``parameter_hints`` maps ``"api.param"`` to the
    sensitivity (full value minus neutral value).
    """

    layer: str
    statement: str
    intensity: float
    parameter_hints: Mapping = field(default_factory=dict)
    fragment: tuple = ()
    trait: str = ""
    pattern: Optional[str] = None
    source: str = "catalog"

    def __post_init__(self):
        if self.layer not in LAYERS:
            raise StyleError(f"unknown layer {self.layer!r}")
        if not (0.0 <= self.intensity <= 1.0) or math.isnan(self.intensity):
            raise StyleError(f"policy intensity {self.intensity} outside [0, 1]")

    def with_intensity(self, value: float) -> "Policy":
        return replace(self, intensity=float(min(1.0, max(0.0, value))))

    def to_dict(self):
        return {
            "layer": self.layer,
            "trait": self.trait,
            "pattern": self.pattern,
            "statement": self.statement,
            "intensity": self.intensity,
            "parameter_hints": dict(self.parameter_hints),
            "fragment": [dict(c) for c in self.fragment],
            "source": self.source,
        }


@dataclass(frozen=True)
class PolicySet:
    p1: Optional[Policy] = None
    p2: Optional[Policy] = None
    p3: Optional[Policy] = None
    versions: tuple = (0, 0, 0)

    def get(self, layer: str) -> Optional[Policy]:
        return (self.p1, self.p2, self.p3)[LAYERS.index(layer)]

    def version(self, layer: str) -> int:
        return self.versions[LAYERS.index(layer)]

    def with_policy(self, layer: str, policy: Optional[Policy]) -> "PolicySet":
        """Install a retranslated policy; the layer's version counter increments."""
        if policy is not None and policy.layer != layer:
            raise StyleError(f"policy for {policy.layer} installed into {layer}")
        i = LAYERS.index(layer)
        vers = list(self.versions)
        vers[i] += 1
        slots = [self.p1, self.p2, self.p3]
        slots[i] = policy
        return PolicySet(*slots, versions=tuple(vers))

    def policies(self):
        return [(layer, p) for layer, p in zip(LAYERS, (self.p1, self.p2, self.p3)) if p is not None]

    def is_empty(self) -> bool:
        return self.p1 is None and self.p2 is None and self.p3 is None


# -------------------------------------------------------------------- triggers


@dataclass
class StyleSchedule:
    """Per-agent trigger clock for the physiological and attentional layers."""

    seed: int
    l2_period: int = DEFAULT_L2_PERIOD
    l3_rate: float = DEFAULT_L3_RATE
    dt: float = 0.05
    next_l3_step: Optional[int] = field(default=None, init=False)
    last_t: Optional[int] = field(default=None, init=False)

    def __post_init__(self):
        if self.l2_period < 1:
            raise StyleError("l2_period must be >= 1")
        if not self.l3_rate >= 0:
            raise StyleError("l3_rate must be >= 0")
        if not self.dt > 0:
            raise StyleError("dt must be > 0")
        self.rng_stream = rng.stream(self.seed, "l3_triggers")
        self._arrival = 0.0
        self._advance()

    def _advance(self):
        if self.l3_rate == 0:
            self.next_l3_step = None
            return
        self._arrival += float(self.rng_stream.exponential(1.0 / self.l3_rate))
        self.next_l3_step = max(1, math.ceil(self._arrival / self.dt - 1e-9))

    def poll(self, t: int) -> frozenset:
        if self.last_t is not None and t <= self.last_t:
            raise ContractViolation(f"poll_triggers: step {t} not after {self.last_t}")
        self.last_t = t
        fired = set()
        if t > 0 and t % self.l2_period == 0:
            fired.add(L2_UPDATE)
        if self.next_l3_step is not None and t >= self.next_l3_step:
            fired.add(L3_TRIGGER)
            # arrivals sharing a step merge into one trigger
            while self.next_l3_step is not None and self.next_l3_step <= t:
                self._advance()
        return frozenset(fired)


def poll_triggers(schedule: StyleSchedule, t: int) -> frozenset:
    return schedule.poll(t)


def trigger_steps(seed: int, horizon: int, l3_rate=DEFAULT_L3_RATE, dt=0.05, l2_period=DEFAULT_L2_PERIOD):
    """L3 trigger steps in [1, horizon] without polling every step."""
    sch = StyleSchedule(seed, l2_period, l3_rate, dt)
    out = []
    while sch.next_l3_step is not None and sch.next_l3_step <= horizon:
        out.append(sch.next_l3_step)
        sch._advance()
        while sch.next_l3_step is not None and sch.next_l3_step == out[-1]:
            sch._advance()
    return out


def effective_intensity_l2(
    policy: Policy,
    steps_since_activation: int,
    pattern: Optional[str] = None,
    *,
    ramp_steps: int = DEFAULT_RAMP_STEPS,
    pulse_amplitude: float = DEFAULT_PULSE_AMPLITUDE,
    pulse_steps: int = DEFAULT_PULSE_STEPS,
    seed: int = 0,
) -> float:
    """Intensity of a physiological policy after it has been active for a while.

    incremental: linear ramp from 0 reaching ``policy.intensity`` after ``ramp_steps``.
    episodic: ``policy.intensity`` plus pulses of ``pulse_steps`` steps; each pulse is
    present with probability 1/2 and has amplitude uniform in [-A, A]. Pulses are a
    counter-based function of ``seed`` so they do not depend on polling order.
    """
    if steps_since_activation < 0:
        raise ValueError("steps_since_activation must be >= 0")
    pattern = pattern or policy.pattern
    base = policy.intensity
    if pattern == "incremental":
        if ramp_steps <= 0:
            return base
        return base * min(1.0, steps_since_activation / ramp_steps)
    if pattern == "episodic":
        block = steps_since_activation // pulse_steps
        if rng.uniform(seed, "pulse_on", block) < 0.5:
            u = 2.0 * rng.uniform(seed, "pulse_amp", block) - 1.0
            base = base + pulse_amplitude * u
        return min(1.0, max(0.0, base))
    raise StyleError(f"unknown L2 pattern {pattern!r}")


def jittered_intensity(default: float, *keys, spread: float = 0.1) -> float:
    """Default intensity scaled by a seeded factor in [1 - spread, 1 + spread]."""
    u = rng.uniform(*keys)
    return float(min(1.0, max(0.0, default * (1.0 + spread * (2.0 * u - 1.0)))))


def draw_stream(seed: int, purpose: str) -> np.random.Generator:
    return rng.stream(seed, purpose)
