import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from styledrive import style
from styledrive.style import (
    L2_UPDATE,
    L3_TRIGGER,
    ContractViolation,
    Policy,
    PolicySet,
    StyleError,
    StyleSchedule,
    StyleTriplet,
    TraitRegistry,
    TraitSpec,
)


def test_default_registry_ships_five_traits():
    reg = style.default_registry()
    assert sorted(reg.names()) == ["aggressive", "cautious", "distracted", "drunk", "fatigued"]
    assert sorted(reg.names("L1")) == ["aggressive", "cautious"]
    assert sorted(reg.names("L2")) == ["drunk", "fatigued"]
    assert reg.names("L3") == ["distracted"]
    assert reg["drunk"].pattern == "episodic"
    assert reg["fatigued"].pattern == "incremental"


def test_registry_closed_after_freeze():
    reg = style.default_registry()
    spec = TraitSpec("sleepy", "L2", 0.5, "A sleepy driver.", "x", "incremental")
    with pytest.raises(StyleError, match="closed"):
        reg.register(spec)


def test_registry_extension_and_rejections():
    reg = TraitRegistry("A normal driver.")
    reg.register(TraitSpec("sleepy", "L2", 0.5, "A sleepy driver.", "x", "incremental"))
    assert reg.layer_of("sleepy") == "L2"
    bad = [
        TraitSpec("sleepy", "L2", 0.5, "A sleepy driver.", "x", "incremental"),
        TraitSpec("normal", "L1", 0.5, "A normal driver.", "x"),
        TraitSpec("odd", "L4", 0.5, "An odd driver.", "x"),
        TraitSpec("odd", "L1", 1.5, "An odd driver.", "x"),
        TraitSpec("odd", "L2", 0.5, "An odd driver.", "x", None),
        TraitSpec("odd", "L1", 0.5, "A strange driver.", "x"),
    ]
    for spec in bad:
        with pytest.raises(StyleError):
            reg.register(spec)


def test_triplet_parse_and_label():
    t = StyleTriplet.parse("aggressive, drunk, distracted")
    assert t == ("aggressive", "drunk", "distracted")
    assert t.label() == "aggressive/drunk/distracted"
    assert StyleTriplet().is_normal()
    assert t.tags() == {("L1", "aggressive"), ("L2", "drunk"), ("L3", "distracted")}
    with pytest.raises(StyleError):
        StyleTriplet.parse(["aggressive", "normal"])


def test_triplet_problems_name_trait_and_layer():
    probs = StyleTriplet("reckless", "normal", "normal").problems()
    assert len(probs) == 1 and "reckless" in probs[0] and "L1" in probs[0]
    probs = StyleTriplet("drunk", "normal", "normal").problems()
    assert "belongs to L2" in probs[0]
    with pytest.raises(StyleError):
        StyleTriplet("normal", "normal", "aggressive").validate()


def test_description_single_trait():
    d = style.generate_description(StyleTriplet("aggressive", "normal", "normal"))
    assert "aggressive" in d.text.lower()
    assert d.trait_tags == {("L1", "aggressive")}


def test_description_normal_is_neutral():
    d = style.generate_description(StyleTriplet())
    assert d.trait_tags == frozenset()
    assert d.text == style.default_registry().neutral_description


def test_description_three_layers():
    d = style.generate_description(StyleTriplet("aggressive", "drunk", "distracted"))
    assert len(d.trait_tags) == 3
    assert {layer for layer, _ in d.trait_tags} == {"L1", "L2", "L3"}


def test_description_provider_checked_and_fallback():
    trip = StyleTriplet("cautious", "normal", "normal")
    ok = style.generate_description(trip, lambda s: "A very cautious motorist.")
    assert ok.source == "provider"
    events = []
    wrong = style.generate_description(trip, lambda s: "An aggressive motorist.", events=events)
    assert wrong.source == "template" and events[0]["reason"] == "trait tags mismatch"

    def boom(s):
        raise TimeoutError("slow")

    events = []
    failed = style.generate_description(trip, boom, events=events)
    assert failed.source == "template" and "TimeoutError" in events[0]["reason"]


triplets = st.builds(
    StyleTriplet,
    st.sampled_from(["normal", "aggressive", "cautious"]),
    st.sampled_from(["normal", "drunk", "fatigued"]),
    st.sampled_from(["normal", "distracted"]),
)


@given(triplets)
def test_template_description_is_pure_and_tags_match(trip):
    a = style.generate_description(trip)
    b = style.generate_description(trip)
    assert a == b
    assert a.trait_tags == trip.tags()
    for _, trait in trip.tags():
        assert trait in a.text.lower()


def test_policy_intensity_bounds():
    with pytest.raises(StyleError):
        Policy("L1", "s", 1.2)
    with pytest.raises(StyleError):
        Policy("L1", "s", float("nan"))
    with pytest.raises(StyleError):
        Policy("L5", "s", 0.5)
    assert Policy("L1", "s", 0.5).with_intensity(3.0).intensity == 1.0


def test_policy_set_versions():
    ps = PolicySet()
    assert ps.is_empty()
    ps = ps.with_policy("L3", Policy("L3", "s", 0.5))
    ps = ps.with_policy("L3", Policy("L3", "t", 0.5))
    assert ps.version("L3") == 2 and ps.version("L1") == 0
    assert ps.get("L3").statement == "t"
    with pytest.raises(StyleError):
        ps.with_policy("L1", Policy("L2", "s", 0.5, pattern="episodic"))


def test_l2_update_on_period():
    sch = StyleSchedule(seed=1, l2_period=2000, l3_rate=0.0)
    assert sch.poll(0) == frozenset()
    assert sch.poll(1999) == frozenset()
    assert L2_UPDATE in sch.poll(2000)
    assert sch.poll(2001) == frozenset()
    assert L2_UPDATE in sch.poll(4000)


def test_zero_rate_never_triggers():
    sch = StyleSchedule(seed=3, l3_rate=0.0)
    assert sch.next_l3_step is None
    assert all(L3_TRIGGER not in sch.poll(t) for t in range(0, 20000, 7))
    assert style.trigger_steps(3, 10**6, l3_rate=0.0) == []


def test_non_monotone_poll_is_contract_violation():
    sch = StyleSchedule(seed=0)
    sch.poll(5)
    with pytest.raises(ContractViolation):
        sch.poll(5)
    with pytest.raises(ContractViolation):
        sch.poll(4)


def test_schedule_rejects_bad_config():
    for kw in ({"l2_period": 0}, {"l3_rate": -1.0}, {"dt": 0.0}):
        with pytest.raises(StyleError):
            StyleSchedule(seed=0, **kw)


def test_poll_matches_trigger_steps():
    sch = StyleSchedule(seed=9)
    polled = [t for t in range(0, 30001) if L3_TRIGGER in sch.poll(t)]
    assert polled == style.trigger_steps(9, 30000)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**40))
def test_trigger_sequence_pure_in_seed(seed):
    assert style.trigger_steps(seed, 50000) == style.trigger_steps(seed, 50000)


def test_poisson_count_over_horizon():
    # expected arrivals: rate * steps * dt = 0.064 * 1e6 * 0.05
    expected = 0.064 * 10**6 * 0.05
    counts = [len(style.trigger_steps(s, 10**6)) for s in range(20)]
    assert abs(np.mean(counts) - expected) / expected < 0.05


def test_incremental_ramp():
    p = Policy("L2", "s", 0.8, pattern="incremental")
    assert style.effective_intensity_l2(p, 0) == 0.0
    assert style.effective_intensity_l2(p, 2000, ramp_steps=4000) == pytest.approx(0.4)
    assert style.effective_intensity_l2(p, 4000) == pytest.approx(0.8)
    assert style.effective_intensity_l2(p, 10**6) == pytest.approx(0.8)
    with pytest.raises(ValueError):
        style.effective_intensity_l2(p, -1)


def test_episodic_bounded_pulses():
    p = Policy("L2", "s", 0.6, pattern="episodic")
    vals = np.array([style.effective_intensity_l2(p, k, seed=4) for k in range(10**4)])
    assert vals.min() >= 0.4 - 1e-12 and vals.max() <= 0.8 + 1e-12
    # pulses actually occur and are constant within a pulse block
    assert np.any(np.abs(vals - 0.6) > 1e-6)
    assert np.all(vals[:40] == vals[0])


def test_unknown_pattern():
    with pytest.raises(StyleError):
        style.effective_intensity_l2(Policy("L2", "s", 0.5), 10, pattern="chronic")


@given(st.floats(0, 1), st.integers(0, 1000))
def test_jittered_intensity_in_range(d, k):
    v = style.jittered_intensity(d, "k", k)
    assert 0.0 <= v <= 1.0
    assert abs(v - d) <= 0.1 * d + 1e-12
    assert math.isfinite(v)
