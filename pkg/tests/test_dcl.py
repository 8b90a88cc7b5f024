import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from styledrive import dcl, maps, scene
from styledrive.dcl import ACCEL_MAX, ACCEL_MIN, ControllerParams

from conftest import vehicle

P = ControllerParams()


def idm_oracle(v, v0, s, dv, a=2.0, b=3.0, s0=2.0, T=1.5):
    s_star = s0 + max(0.0, v * T + v * dv / (2 * math.sqrt(a * b)))
    return a * (1 - (v / v0) ** 4 - (s_star / s) ** 2)


def view_for(road, ego_x, ego_v, others=(), ego_y=0.0, lane="c0_000", step=0):
    s = scene.make_scene(road, [vehicle("ego", ego_x, ego_y, v=ego_v, lane=lane)] + list(others), step_index=step)
    return scene.extract_bev(s, "ego", 60.0)


def test_braking_distance():
    assert dcl.braking_distance(0.0, 3.0) == 2.0
    assert dcl.braking_distance(10.0, 3.0) == pytest.approx(18.67, abs=5e-3)
    for v in (0.5, 3.0, 7.0, 12.5):
        d1 = dcl.braking_distance(v, 3.0) - 2.0
        d2 = dcl.braking_distance(2 * v, 3.0) - 2.0
        assert d2 == pytest.approx(4 * d1)
    with pytest.raises(ValueError):
        dcl.braking_distance(-1.0, 3.0)


def test_free_road_from_rest(straight_road):
    d = dcl.decide(view_for(straight_road, 10.0, 0.0), params=ControllerParams(desired_speed=12.0))
    assert d.accel == pytest.approx(2.0)
    assert d.lead_id is None and d.lane_change == "keep"


def test_idm_matches_oracle():
    for v, s, dv in ((5.0, 20.0, 0.0), (10.0, 15.0, 2.0), (12.0, 40.0, -3.0), (0.0, 3.0, 0.0)):
        assert dcl.idm_accel(v, 12.0, s, dv, P) == pytest.approx(idm_oracle(v, 12.0, s, dv))


def test_equilibrium_gap_at_desired_speed_brakes():
    v = v0 = 12.0
    s_star = 2.0 + v * 1.5
    a = dcl.idm_accel(v, v0, s_star, 0.0, P)
    assert a <= 0.0
    assert a == pytest.approx(idm_oracle(v, v0, s_star, 0.0))


def test_lead_detected_in_view(straight_road):
    lead = vehicle("a", 40.0, 0.0, v=8.0, lane="c0_000")
    d = dcl.decide(view_for(straight_road, 10.0, 10.0, [lead]), params=ControllerParams(allow_lane_change=False))
    # bumper gap: centre distance minus half lengths
    assert d.lead_id == "a"
    assert d.lead_gap == pytest.approx(30.0 - 4.5, abs=1e-6)
    assert d.accel == pytest.approx(idm_oracle(10.0, 12.0, 25.5, 2.0), abs=1e-9)


def test_red_signal_ahead_stops():
    road = scene.RoadMap.from_dict(maps.corridor(100, 1, signals=[("s", 50.0, [["red", 30], ["green", 20], ["yellow", 3]], 0.0)]))
    v = view_for(road, 45.0, 10.0)
    assert v.signals[0].state == "red" and v.signals[0].stop_point.x == pytest.approx(5.0)
    d = dcl.decide(v)
    assert d.stop_for_signal and d.accel < 0


def test_green_signal_ignored():
    road = scene.RoadMap.from_dict(maps.corridor(100, 1, signals=[("s", 50.0, [["red", 30], ["green", 20], ["yellow", 3]], 35.0)]))
    v = view_for(road, 45.0, 10.0)
    assert v.signals[0].state == "green"
    assert not dcl.decide(v).stop_for_signal


def test_missing_lane_is_safe_stop(straight_road):
    v = view_for(straight_road, 10.0, 8.0)
    blind = v.replace(lanes={})
    d = dcl.decide(blind)
    assert d.accel == -P.comfort_decel and d.lane_change == "keep" and d.steer == 0.0


def test_overtakes_slow_lead_when_left_is_free(straight_road):
    lead = vehicle("a", 30.0, 0.0, v=2.0, lane="c0_000")
    d = dcl.decide(view_for(straight_road, 10.0, 10.0, [lead]))
    assert d.lane_change == "left"


def test_no_change_into_occupied_gap(straight_road):
    lead = vehicle("a", 30.0, 0.0, v=2.0, lane="c0_000")
    beside = vehicle("b", 12.0, 3.5, v=10.0, lane="c1_000")
    d = dcl.decide(view_for(straight_road, 10.0, 10.0, [lead, beside]))
    assert d.lane_change == "keep"


def test_steers_back_to_centre(straight_road):
    d = dcl.decide(view_for(straight_road, 10.0, 8.0, ego_y=0.5))
    assert d.steer < 0 and d.lateral_target == pytest.approx(-0.5)


def test_params_validation():
    with pytest.raises(ValueError):
        ControllerParams(min_gap=0.0)
    with pytest.raises(ValueError):
        ControllerParams.from_dict({"reaction_time": 1.0})
    assert ControllerParams.from_dict(P.to_dict()) == P


others = st.lists(
    st.tuples(st.floats(0, 100), st.floats(-2, 6), st.floats(-math.pi, math.pi), st.floats(0, 25)),
    max_size=6,
)


@settings(max_examples=150, deadline=None)
@given(st.floats(0, 95), st.floats(-1.5, 5), st.floats(0, 25), others)
def test_accel_bounded_and_pure(ex, ey, ev, objs):
    road = scene.RoadMap.from_dict(maps.corridor(length=100.0, lanes=2))
    lane = "c0_000" if ex < 50 else "c0_001"
    vs = [vehicle(f"o{i}", x, y, h, v) for i, (x, y, h, v) in enumerate(objs)]
    view = view_for(road, ex, ev, vs, ego_y=ey, lane=lane)
    a = dcl.decide(view)
    b = dcl.decide(view)
    assert a == b
    assert ACCEL_MIN <= a.accel <= ACCEL_MAX
    assert abs(a.steer) <= P.max_steer
    assert a.lane_change in dcl.LANE_CHANGES
    # equal views give equal decisions even when rebuilt
    assert dcl.decide(view_for(road, ex, ev, vs, ego_y=ey, lane=lane)) == a
