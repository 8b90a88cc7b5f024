"""Description -> policy -> script translation with validation and repair.

The catalog translator is deterministic and always available. An optional
text-completion provider can stand in for it; its output must be a JSON array of
calls in the script wire format, and anything it gets wrong is repaired or replaced
by the catalog result.
"""

from __future__ import annotations

import json
import math
import os
import re
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Mapping, Optional, Sequence

from . import pmbi, rng
from .style import (
    LAYERS,
    BehaviorDescription,
    Policy,
    StyleError,
    TraitRegistry,
    default_registry,
    jittered_intensity,
)

MODES = ("Init", "Update", "ReInterpret")
PROMPT_VERSION = "v1"
UPDATE_LOG_SPREAD = 0.1
REINTERPRET_SPREAD = 0.25

_WORD = re.compile(r"[a-z]+")


def tokens(text) -> frozenset:
    return frozenset(_WORD.findall(str(text).lower()))


# -------------------------------------------------------------------- catalog


@dataclass(frozen=True)
class CatalogEntry:
    id: str
    trait: Optional[str]
    keywords: frozenset
    policy: str
    fragment: tuple  # call templates (dicts without layer)


class ScriptCatalog:
    def __init__(self, entries: Sequence[CatalogEntry]):
        self.entries = list(entries)
        for e in self.entries:
            for tmpl in e.fragment:
                errs = pmbi.check_call(pmbi.ApiCall.make(tmpl["api"], tmpl.get("selector"), tmpl.get("params", {}), "L1"))
                if errs:
                    raise ValueError(f"catalog entry {e.id}: {'; '.join(errs)}")

    @classmethod
    def load(cls, path=None) -> "ScriptCatalog":
        if path is None:
            text = resources.files("styledrive.data").joinpath("script_catalog.json").read_text()
        else:
            with open(path) as f:
                text = f.read()
        data = json.loads(text)
        return cls(
            CatalogEntry(
                d["id"], d.get("trait"), frozenset(k.lower() for k in d.get("keywords", ())),
                d.get("policy", ""), tuple(d.get("fragment", ())),
            )
            for d in data["entries"]
        )

    def for_trait(self, trait: str) -> list:
        return [e for e in self.entries if e.trait == trait]

    def retrieve(self, words, k: int = 3, min_score: int = 1) -> list:
        """Entries ranked by keyword overlap (ties keep catalog order)."""
        words = frozenset(words)
        scored = [(len(e.keywords & words), -i, e) for i, e in enumerate(self.entries)]
        scored = [s for s in scored if s[0] >= min_score]
        scored.sort(key=lambda s: (s[0], s[1]), reverse=True)
        return [e for _, _, e in scored[:k]]

    def best_for_keywords(self, words) -> Optional[CatalogEntry]:
        """Best entry among those tied to a trait named in ``words``."""
        words = frozenset(words)
        cands = [e for e in self.entries if e.trait is not None and e.trait in words]
        if not cands:
            return None
        return max(enumerate(cands), key=lambda ie: (len(ie[1].keywords & words), -ie[0]))[1]


_DEFAULT_CATALOG: Optional[ScriptCatalog] = None


def default_catalog() -> ScriptCatalog:
    global _DEFAULT_CATALOG
    if _DEFAULT_CATALOG is None:
        _DEFAULT_CATALOG = ScriptCatalog.load()
    return _DEFAULT_CATALOG


def sensitivities(fragment) -> dict:
    out = {}
    for tmpl in fragment:
        d = pmbi.descriptor(tmpl["api"])
        for k, v in tmpl.get("params", {}).items():
            spec = d.params[k]
            if spec.scaled:
                out[f"{d.name}.{k}"] = float(v) - spec.neutral
    return out


# ----------------------------------------------------------------- validation


@dataclass
class ValidationReport:
    schema_errors: list = field(default_factory=list)
    semantic_errors: list = field(default_factory=list)
    verdict: str = "accept"

    @property
    def ok(self):
        return self.verdict == "accept"


def _as_wire(script) -> object:
    if isinstance(script, pmbi.Script):
        return script.to_wire()
    return script


def validate_script(script, api_catalog=None, scope: Optional[Mapping] = None) -> ValidationReport:
    """Schema and semantic check of a script (Script object or raw wire list).

    ``scope`` may hold ``object_ids``, ``lane_ids`` and ``signal_ids`` present in the
    current scene; selectors naming anything else are scope violations.
    """
    wire = _as_wire(script)
    rep = ValidationReport()
    if not isinstance(wire, list):
        rep.schema_errors.append((None, "schema", "script must be a JSON array of calls"))
        rep.verdict = "reject"
        return rep
    names = {d.name for d in (api_catalog or pmbi.catalog())}
    seen = set()
    for i, c in enumerate(wire):
        if not isinstance(c, dict):
            rep.schema_errors.append((i, "schema", "call must be an object"))
            continue
        api = c.get("api")
        if not isinstance(api, str):
            rep.schema_errors.append((i, "schema", "call needs a string 'api'"))
            continue
        if api not in names:
            rep.semantic_errors.append((i, "unknown_api", f"unknown api {api!r}"))
            continue
        d = pmbi.descriptor(api)
        layer = c.get("layer")
        if layer not in LAYERS:
            rep.schema_errors.append((i, "bad_layer", f"{api}: layer must be one of {LAYERS}"))
        sel = c.get("selector", {})
        if sel is None:
            sel = {}
        if not isinstance(sel, dict):
            rep.schema_errors.append((i, "schema", f"{api}: selector must be an object"))
            sel = {}
        params = c.get("params", {})
        if not isinstance(params, dict):
            rep.schema_errors.append((i, "schema", f"{api}: params must be an object"))
            params = {}
        for k, v in params.items():
            if k not in d.params:
                rep.schema_errors.append((i, "unknown_param", f"{api}: unknown param {k!r}"))
            elif isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                rep.schema_errors.append((i, "bad_value", f"{api}.{k}: not a finite number"))
            elif not d.params[k].lo <= v <= d.params[k].hi:
                rep.semantic_errors.append(
                    (i, "out_of_range", f"{api}.{k}={v} out of range [{d.params[k].lo}, {d.params[k].hi}]")
                )
        for k in d.params:
            if k not in params:
                rep.schema_errors.append((i, "missing_param", f"{api}: missing param {k!r}"))
        kind, rel, tid = sel.get("kind"), sel.get("relation", "any"), sel.get("target_id")
        bad_sel = False
        if rel not in pmbi.RELATIONS:
            bad_sel = True
        elif d.target == "objects":
            bad_sel = kind is not None and kind not in d.kinds
        else:
            bad_sel = kind is not None or rel not in ("same_lane", "any")
        if tid is not None and not isinstance(tid, str):
            bad_sel = True
        if bad_sel:
            rep.semantic_errors.append((i, "inapplicable_selector", f"{api}: selector {sel!r} not applicable"))
        elif tid is not None and scope is not None:
            pool = {"objects": "object_ids", "lanes": "lane_ids", "signals": "signal_ids"}[d.target]
            if tid not in scope.get(pool, ()):
                rep.semantic_errors.append((i, "scope", f"{api}: target {tid!r} not in scene"))
        key = (layer, api, json.dumps(sel, sort_keys=True, default=str))
        if key in seen:
            rep.semantic_errors.append((i, "duplicate", f"{api}: duplicate call for selector"))
        seen.add(key)
    if rep.schema_errors or rep.semantic_errors:
        rep.verdict = "repairable"
    return rep


def repair_or_fallback(
    script,
    report: ValidationReport,
    catalog: Optional[ScriptCatalog] = None,
    *,
    agent_id: str = "",
    layer: Optional[str] = None,
    keywords=(),
    scope: Optional[Mapping] = None,
    events: Optional[list] = None,
) -> pmbi.Script:
    """Best-effort repair of a script into one that validates.

    Params are clamped into range and missing ones take neutral values. Unknown APIs
    are replaced by the catalog entry best matching any trait keyword found in the
    call or in ``keywords``; without one the call is dropped.
    """
    catalog = catalog or default_catalog()
    wire = _as_wire(script)
    if not isinstance(wire, list):
        wire = []
    calls = []
    context = tokens(" ".join(map(str, keywords)))
    for c in wire:
        if not isinstance(c, dict):
            continue
        lay = c.get("layer") if c.get("layer") in LAYERS else layer
        api = c.get("api")
        if not (isinstance(api, str) and pmbi.is_api(api)):
            words = context | tokens(" ".join(str(v) for v in c.values() if isinstance(v, str)))
            entry = catalog.best_for_keywords(words)
            if entry is None or lay is None:
                continue
            for tmpl in entry.fragment:
                calls.append(pmbi.ApiCall.make(tmpl["api"], tmpl.get("selector"), tmpl.get("params", {}), lay))
            continue
        if lay is None:
            continue
        d = pmbi.descriptor(api)
        raw = c.get("params") if isinstance(c.get("params"), dict) else {}
        params = {}
        for k, spec in d.params.items():
            v = raw.get(k)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                v = spec.neutral
            params[k] = min(max(float(v), spec.lo), spec.hi)
        sel = c.get("selector") if isinstance(c.get("selector"), dict) else {}
        kind, rel, tid = sel.get("kind"), sel.get("relation", "any"), sel.get("target_id")
        if d.target == "objects":
            kind = kind if kind in d.kinds else None
            rel = rel if rel in pmbi.RELATIONS else "any"
        else:
            kind = None
            rel = rel if rel in ("same_lane", "any") else "any"
        if tid is not None:
            pool = {"objects": "object_ids", "lanes": "lane_ids", "signals": "signal_ids"}[d.target]
            if not isinstance(tid, str) or (scope is not None and tid not in scope.get(pool, ())):
                continue  # scope violation: drop the call
        calls.append(pmbi.ApiCall.make(api, pmbi.Selector(kind, rel, tid), params, lay))
    out = pmbi.Script.build(agent_id, calls)
    if not out.calls and events is not None:
        events.append({"event": "repair_empty", "agent": agent_id, "layer": layer})
    return out


# ------------------------------------------------------------------- provider


class ProviderError(RuntimeError):
    pass


class HttpProvider:
    """Chat-completion style HTTP endpoint.

    Configured from STYLEDRIVE_PROVIDER_URL, STYLEDRIVE_PROVIDER_MODEL and
    STYLEDRIVE_PROVIDER_KEY unless given explicitly.
    """

    def __init__(self, base_url=None, model=None, key=None, timeout=10.0, retries=2):
        self.base_url = base_url or os.environ.get("STYLEDRIVE_PROVIDER_URL")
        self.model = model or os.environ.get("STYLEDRIVE_PROVIDER_MODEL", "")
        self.key = key or os.environ.get("STYLEDRIVE_PROVIDER_KEY", "")
        self.timeout = timeout
        self.retries = retries
        if not self.base_url:
            raise ProviderError("no provider endpoint configured")

    def complete(self, system: str, user: str) -> str:
        body = json.dumps({
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "system", "content": system}, {"role": "user", "content": user}],
        }).encode()
        headers = {"Content-Type": "application/json"}
        if self.key:
            headers["Authorization"] = f"Bearer {self.key}"
        url = self.base_url.rstrip("/") + "/chat/completions"
        last = None
        for attempt in range(self.retries + 1):
            try:
                req = urllib.request.Request(url, data=body, headers=headers, method="POST")
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    data = json.loads(resp.read().decode())
                choice = data["choices"][0]
                return choice.get("message", {}).get("content") or choice.get("text", "")
            except (urllib.error.URLError, TimeoutError, OSError, KeyError, IndexError, ValueError) as exc:
                last = exc
                if attempt < self.retries:
                    time.sleep(0.5 * (attempt + 1))
        raise ProviderError(f"provider failed after {self.retries + 1} attempts: {last}")


class CallableProvider:
    """Adapter for any ``fn(system, user) -> str``; used for tests and local models."""

    def __init__(self, fn: Callable[[str, str], str]):
        self.fn = fn

    def complete(self, system: str, user: str) -> str:
        return self.fn(system, user)


def load_prompt(name: str, version: str = PROMPT_VERSION) -> str:
    return resources.files("styledrive.data").joinpath("prompts", f"{version}_{name}.txt").read_text()


def parse_provider_output(text) -> object:
    """Extract the first JSON array from provider text; None when there is none."""
    if not isinstance(text, str):
        return None
    s = text.strip()
    if s.startswith("```"):
        s = s.strip("`")
        s = s[s.find("\n") + 1 :] if "\n" in s else s
    start, end = s.find("["), s.rfind("]")
    if start < 0 or end <= start:
        return None
    try:
        return json.loads(s[start : end + 1])
    except (ValueError, RecursionError):
        return None


# ------------------------------------------------------------------ translate


@dataclass(frozen=True)
class TranslationRequest:
    mode: str
    payload: object  # BehaviorDescription for Init/ReInterpret, Policy for Update
    agent_id: str
    layer: Optional[str] = None
    agent_seed: int = 0
    version: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown translation mode {self.mode!r}")
        if self.mode == "Update":
            if not isinstance(self.payload, Policy) or self.layer not in (None, "L2"):
                raise ValueError("Update requests carry an L2 policy")
        else:
            if not isinstance(self.payload, BehaviorDescription):
                raise ValueError(f"{self.mode} requests carry a behavior description")
            if self.mode == "ReInterpret" and self.layer not in (None, "L3"):
                raise ValueError("ReInterpret requests are scoped to L3")

    @property
    def scope(self) -> tuple:
        if self.mode == "Update":
            return ("L2",)
        if self.mode == "ReInterpret":
            return ("L3",)
        return LAYERS if self.layer is None else (self.layer,)


class Translator:
    """Turns translation requests into per-layer policies.

    With no provider every result comes from the catalog. With a provider the
    fragment it returns is validated and repaired; empty or failing results fall back
    to the catalog and an event is recorded.
    """

    def __init__(
        self,
        registry: Optional[TraitRegistry] = None,
        catalog: Optional[ScriptCatalog] = None,
        provider=None,
        prompt_version: str = PROMPT_VERSION,
    ):
        self.registry = registry or default_registry()
        self.catalog = catalog or default_catalog()
        self.provider = provider
        self.prompt_version = prompt_version
        self.events: list = []
        self.transcripts: list = []
        self._api_docs = "\n".join(d.describe() for d in pmbi.catalog())

    # -- policy construction
    def catalog_policy(self, trait: str, intensity: float) -> Policy:
        spec = self.registry[trait]
        frag = []
        for e in self.catalog.for_trait(trait):
            frag.extend(e.fragment)
        if not frag:
            best = self.catalog.best_for_keywords(tokens(spec.statement) | {trait})
            frag = list(best.fragment) if best else []
        frag = tuple(dict(t) for t in frag)
        return Policy(
            layer=spec.layer,
            statement=spec.statement,
            intensity=intensity,
            parameter_hints=sensitivities(frag),
            fragment=frag,
            trait=trait,
            pattern=spec.pattern,
            source="catalog",
        )

    def _intensity(self, req: TranslationRequest, layer: str, trait: str, prior: Optional[Policy]) -> float:
        default = self.registry[trait].default_intensity
        if req.mode == "Init":
            return jittered_intensity(default, req.agent_seed, "init", layer)
        if req.mode == "Update":
            u = rng.uniform(req.agent_seed, "update", req.version)
            return float(min(1.0, max(0.0, prior.intensity * math.exp(UPDATE_LOG_SPREAD * (2 * u - 1)))))
        u = rng.uniform(req.agent_seed, "reinterpret", req.version)
        return float(min(1.0, max(0.0, default * (1.0 + REINTERPRET_SPREAD * (2 * u - 1)))))

    def translate(self, req: TranslationRequest) -> dict:
        """Policies for the request's layers; layers without a trait map to None."""
        out = {}
        if req.mode == "Update":
            prior = req.payload
            targets = [("L2", prior.trait)]
        else:
            tags = dict(req.payload.trait_tags)
            targets = [(layer, tags.get(layer)) for layer in req.scope]
            prior = None
        for layer, trait in targets:
            if not trait:
                out[layer] = None
                continue
            if trait not in self.registry:
                raise StyleError(f"unknown trait {trait!r}")
            pol = self.catalog_policy(trait, self._intensity(req, layer, trait, prior))
            if self.provider is not None:
                pol = self._provider_policy(req, layer, pol)
            out[layer] = pol
        return out

    # -- provider path
    def _prompt(self, req, layer, pol):
        system = load_prompt("system", self.prompt_version).replace("{api_docs}", self._api_docs)
        ex = self.catalog.retrieve(tokens(pol.statement) | {pol.trait}, k=3)
        examples = "\n".join(
            json.dumps([dict(t, layer=layer) for t in e.fragment]) + f"  # {e.policy}" for e in ex
        )
        desc = req.payload.text if isinstance(req.payload, BehaviorDescription) else req.payload.statement
        user = (
            load_prompt("user", self.prompt_version)
            .replace("{mode}", req.mode)
            .replace("{layer}", layer)
            .replace("{description}", desc)
            .replace("{policy}", pol.statement)
            .replace("{examples}", examples)
        )
        return system, user

    def _provider_policy(self, req, layer, pol: Policy) -> Policy:
        system, user = self._prompt(req, layer, pol)
        rec = {"agent": req.agent_id, "mode": req.mode, "layer": layer, "version": req.version,
               "prompt_version": self.prompt_version, "system": system, "user": user}
        try:
            text = self.provider.complete(system, user)
        except Exception as exc:  # any provider failure falls back
            rec.update(response=None, outcome="fallback", reason=f"{type(exc).__name__}: {exc}")
            self.transcripts.append(rec)
            self.events.append({"event": "provider_fallback", "agent": req.agent_id, "mode": req.mode,
                                "layer": layer, "reason": rec["reason"]})
            return pol
        rec["response"] = text if isinstance(text, str) else repr(text)
        wire = parse_provider_output(text)
        report = validate_script(wire)
        if report.verdict == "reject":
            script = pmbi.Script(req.agent_id)
        elif report.ok:
            script = pmbi.Script.from_wire(req.agent_id, wire)
        else:
            script = repair_or_fallback(wire, report, self.catalog, agent_id=req.agent_id, layer=layer,
                                        keywords=(pol.trait,), events=self.events)
        calls = [c for c in script.calls if c.layer == layer]
        if not calls:
            rec["outcome"] = "fallback"
            self.transcripts.append(rec)
            self.events.append({"event": "provider_fallback", "agent": req.agent_id, "mode": req.mode,
                                "layer": layer, "reason": f"unusable output ({report.verdict})"})
            return pol
        rec["outcome"] = "accepted" if report.ok else "repaired"
        self.transcripts.append(rec)
        frag = tuple({"api": c.api, "selector": c.selector.to_dict(), "params": c.param_map} for c in calls)
        return Policy(layer, pol.statement, pol.intensity, sensitivities(frag), frag, pol.trait, pol.pattern,
                      "provider")

    def describe_with_provider(self):
        """Description generator backed by the provider, for ``generate_description``."""
        if self.provider is None:
            return None
        reg = self.registry

        def gen(style):
            traits = ", ".join(t for t in style if t != "normal") or "none (an ordinary driver)"
            prompt = (load_prompt("description", self.prompt_version)
                      .replace("{traits}", traits).replace("{all_traits}", ", ".join(reg.names())))
            return self.provider.complete("You describe drivers.", prompt)

        return gen


def translate(request: TranslationRequest, source: Optional[Translator] = None) -> dict:
    return (source or Translator()).translate(request)
