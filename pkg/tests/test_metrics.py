import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import wasserstein_distance
from sklearn.metrics import f1_score
from sklearn.neighbors import KNeighborsClassifier

from styledrive import metrics, scene
from styledrive.metrics import FeatureVector, StyleSample, TrajectorySlice

from conftest import vehicle

DT = 0.05


def straight_slice(x, y=None, offset=None, gap=None):
    x = np.asarray(x, float)
    n = len(x)
    y = np.zeros(n) if y is None else np.asarray(y, float)
    h = np.arctan2(np.gradient(y), np.gradient(x))
    off = np.zeros(n) if offset is None else np.asarray(offset, float)
    g = np.full(n, np.nan) if gap is None else np.asarray(gap, float)
    return TrajectorySlice(DT, x, y, h, off, g)


# ------------------------------------------------------------------ scoring


def test_ds_examples():
    assert metrics.score(100.0, {}).ds == 100.0
    assert metrics.score(100.0, {"collision_vehicle": 1}).ds == pytest.approx(60.0)
    assert metrics.score(50.0, {}).ds == 50.0


DS_TABLE = [
    # rc, infractions, hand-computed ds
    (100.0, {"collision_pedestrian": 1}, 50.0),
    (100.0, {"collision_static": 1}, 65.0),
    (100.0, {"red_light": 2}, 49.0),
    (80.0, {"collision_vehicle": 1, "red_light": 1}, 33.6),
    (90.0, {"collision_pedestrian": 1, "collision_vehicle": 1, "collision_static": 1, "red_light": 1}, 12.285),
    (40.0, {"collision_vehicle": 3}, 8.64),
    (0.0, {"red_light": 1}, 0.0),
]


@pytest.mark.parametrize("rc,inf,ds", DS_TABLE)
def test_ds_table(rc, inf, ds):
    assert metrics.score(rc, inf).ds == pytest.approx(ds, abs=1e-9)


def test_ds_errors():
    with pytest.raises(ValueError):
        metrics.score(120.0, {})
    with pytest.raises(ValueError):
        metrics.penalty_product({"speeding": 1})


kinds = st.sampled_from(sorted(metrics.DEFAULT_PENALTIES))


@given(st.floats(0, 100), st.dictionaries(kinds, st.integers(0, 4)), kinds)
def test_ds_monotone_in_infractions(rc, inf, extra):
    more = dict(inf)
    more[extra] = more.get(extra, 0) + 1
    assert metrics.score(rc, more).ds <= metrics.score(rc, inf).ds


def test_compute_ds_rc_truncates_at_deviation(straight_road):
    route = scene.Route.from_lanes(straight_road, ["c0_000", "c0_001"])
    traj = [(x, 0.0) for x in np.linspace(0, 100, 201)]
    full = metrics.compute_ds_rc(traj, [], route)
    assert full.rc == 100.0 and full.ds == 100.0
    events = [
        {"step": 10, "agents": ["a", "b"], "kind": "collision_vehicle"},
        {"step": 100, "agents": ["a"], "kind": "route_deviation"},
        {"step": 150, "agents": ["a"], "kind": "red_light"},
        {"step": 20, "agents": ["b"], "kind": "red_light"},
    ]
    rep = metrics.compute_ds_rc(traj, events, route, agent_id="a")
    assert rep.infractions == {"collision_vehicle": 1}
    assert rep.rc == pytest.approx(50.0)
    assert rep.ds == pytest.approx(30.0)


# ----------------------------------------------------------------- features


def test_constant_speed_features():
    x = 10.0 * DT * np.arange(200)
    f = metrics.extract_features(straight_slice(x))
    assert f.mean_speed == pytest.approx(10.0)
    assert f.mean_abs_acc == pytest.approx(0.0, abs=1e-9)
    assert f.heading_change_rate == pytest.approx(0.0, abs=1e-12)


def test_constant_accel_features():
    t = DT * np.arange(201)
    f = metrics.extract_features(straight_slice(0.5 * t * t))
    # central differences are exact for quadratics away from the ends
    assert f.mean_abs_acc == pytest.approx(1.0, abs=0.02)
    assert f.mean_speed == pytest.approx(5.0, abs=0.01)


def test_sinusoidal_offset_rms():
    t = DT * np.arange(4000)
    off = 0.5 * np.sin(2 * np.pi * t / 4.0)
    f = metrics.extract_features(straight_slice(10 * t, offset=off))
    assert f.lateral_offset_rms == pytest.approx(0.5 / math.sqrt(2), abs=1e-3)
    assert f.lateral_offset_rms == pytest.approx(0.354, abs=1e-3)


def test_headway_only_where_defined():
    t = DT * np.arange(100)
    gap = np.where(t < 2.5, 20.0, np.nan)
    f = metrics.extract_features(straight_slice(10 * t, gap=gap))
    assert f.mean_time_headway == pytest.approx(2.0)
    empty = metrics.extract_features(straight_slice(10 * t))
    assert empty.mean_time_headway == metrics.HEADWAY_MAX_GAP / metrics.HEADWAY_MIN_SPEED


def test_too_short_slice():
    with pytest.raises(metrics.InsufficientData):
        metrics.extract_features(straight_slice([0.0, 1.0]))


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.integers(0, 2**31))
def test_features_translation_invariant(dx, dy, seed):
    r = np.random.default_rng(seed)
    n = 80
    h = np.cumsum(r.normal(0, 0.02, n))
    v = 8 + np.cumsum(r.normal(0, 0.1, n))
    x = np.cumsum(v * np.cos(h) * DT)
    y = np.cumsum(v * np.sin(h) * DT)
    off = r.normal(0, 0.3, n)
    a = TrajectorySlice(DT, x, y, h, off, np.full(n, 15.0))
    b = TrajectorySlice(DT, x + dx, y + dy, h, off, np.full(n, 15.0))
    fa, fb = metrics.extract_features(a), metrics.extract_features(b)
    for name in ("mean_speed", "std_speed", "mean_abs_acc", "heading_change_rate"):
        assert getattr(fa, name) == pytest.approx(getattr(fb, name), rel=1e-6, abs=1e-6)


def test_windows_cover_slice():
    s = straight_slice(np.arange(1000.0))
    ws = list(metrics.windows(s, 200))
    assert len(ws) == 5 and all(len(w) == 200 for w in ws)
    assert ws[1].x[0] == 200.0


# --------------------------------------------------------------- wasserstein


def test_wasserstein_examples():
    assert metrics.wasserstein_1d([1, 2, 3], [3, 1, 2]) == 0.0
    assert metrics.wasserstein_1d([0], [1]) == 1.0
    assert metrics.wasserstein_1d([0, 1], [0, 3]) == 1.0
    with pytest.raises(ValueError):
        metrics.wasserstein_1d([], [1])


def test_wasserstein_unequal_sizes_match_scipy(rng):
    for _ in range(200):
        a = rng.normal(size=rng.integers(1, 40))
        b = rng.normal(1, 2, size=rng.integers(1, 40))
        assert metrics.wasserstein_1d(a, b) == pytest.approx(wasserstein_distance(a, b), abs=1e-12)


def test_wasserstein_equal_sizes_sorted_pairing(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        a, b = rng.normal(size=n), rng.exponential(size=n)
        oracle = sum(abs(p - q) for p, q in zip(sorted(a), sorted(b))) / n
        assert abs(metrics.wasserstein_1d(a, b) - oracle) <= 1e-12


samples = st.lists(st.floats(-100, 100), min_size=1, max_size=20)


@given(samples, samples, samples)
def test_wasserstein_triangle_and_symmetry(a, b, c):
    ab = metrics.wasserstein_1d(a, b)
    assert ab == pytest.approx(metrics.wasserstein_1d(b, a), abs=1e-9)
    assert ab <= metrics.wasserstein_1d(a, c) + metrics.wasserstein_1d(c, b) + 1e-9


def test_wasserstein_table():
    labels, m = metrics.wasserstein_table({"b": [0, 1], "a": [0, 3], "c": [0, 1]})
    assert labels == ["a", "b", "c"]
    assert m[0, 1] == 1.0 and m[1, 2] == 0.0 and np.allclose(m, m.T)


# ---------------------------------------------------------------------- kNN


def samples_from(X, y):
    return [StyleSample(l, FeatureVector(*row)) for row, l in zip(X, y)]


def test_knn_self_match():
    r = np.random.default_rng(1)
    X = r.normal(size=(30, 7))
    y = ["a"] * 10 + ["b"] * 10 + ["c"] * 10
    rep = metrics.knn_style_classify(samples_from(X, y), samples_from(X, y), k=1)
    assert rep.macro_f1 == 1.0


def test_knn_separated_clusters():
    r = np.random.default_rng(2)
    X = np.vstack((r.normal(0, 1, (100, 7)), r.normal(20, 1, (100, 7))))
    y = ["n"] * 100 + ["s"] * 100
    idx = r.permutation(200)
    tr, te = idx[:120], idx[120:]
    rep = metrics.knn_style_classify(samples_from(X[tr], [y[i] for i in tr]),
                                     samples_from(X[te], [y[i] for i in te]), k=3)
    assert rep.macro_f1 >= 0.99


def test_knn_matches_sklearn():
    r = np.random.default_rng(3)
    X = np.vstack((r.normal(0, 1, (150, 7)), r.normal(0.7, 1.3, (150, 7))))
    X[:, 2] *= 50.0  # scale differences exercise the normalisation
    y = np.array(["n"] * 150 + ["s"] * 150)
    idx = r.permutation(300)
    tr, te = idx[:200], idx[200:]
    mu, sd = X[tr].mean(axis=0), X[tr].std(axis=0)
    clf = KNeighborsClassifier(n_neighbors=5).fit((X[tr] - mu) / sd, y[tr])
    want = clf.predict((X[te] - mu) / sd)
    rep = metrics.knn_style_classify(samples_from(X[tr], y[tr]), samples_from(X[te], y[te]), k=5)
    assert rep.predicted == list(want)
    assert rep.macro_f1 == pytest.approx(f1_score(y[te], want, average="macro"))


def test_macro_f1_matches_sklearn(rng):
    labs = np.array(["a", "b", "c"])
    for _ in range(50):
        t = labs[rng.integers(0, 3, 40)]
        p = labs[rng.integers(0, 3, 40)]
        got, _ = metrics.macro_f1(list(t), list(p))
        assert got == pytest.approx(f1_score(t, p, average="macro", labels=sorted(set(t))))


def test_knn_errors():
    one = samples_from(np.zeros((5, 7)), ["a"] * 5)
    mixed = samples_from(np.zeros((2, 7)), ["a", "b"])
    with pytest.raises(ValueError, match="not covered"):
        metrics.knn_style_classify(one, mixed)
    with pytest.raises(ValueError):
        metrics.knn_style_classify(one, one, k=4)
    with pytest.raises(ValueError):
        metrics.knn_style_classify([], one)


# ------------------------------------------------------------------ latency


def test_brake_latency():
    a = [0.0] * 10 + [-0.2, -0.6, -1.0]
    assert metrics.brake_latency(a, 5) == 6
    assert metrics.brake_latency(a, 5, horizon=3) is None
    with pytest.raises(ValueError):
        metrics.brake_latency(a, 20)


def test_follower_latencies():
    tracks = {
        "f": {"t": [10, 11, 12, 13], "a": [0, 0, -1, -1], "lead": ["L", "L", "L", "L"]},
        "g": {"t": [10, 11, 12, 13], "a": [0, -1, -1, -1], "lead": ["f", "f", "f", "f"]},
        "h": {"t": [12, 13], "a": [0, 0], "lead": ["L", "L"]},
    }
    assert metrics.follower_latencies(tracks, "L", 11) == {"f": 1}
    assert metrics.follower_latencies(tracks, "L", 12) == {"f": 0, "h": None}


# ------------------------------------------------------------------- raster


def bare_view(objs=()):
    road = scene.RoadMap.from_dict({"schema_version": 1, "lanes": [
        {"id": "far", "centerline": [[500, 500], [600, 500]]}], "signals": []})
    s = scene.make_scene(road, [vehicle("ego", 0, 0)] + list(objs))
    v = scene.extract_bev(s, "ego", 10.0)
    return v


def test_raster_empty():
    g = metrics.rasterize_view(bare_view())
    assert g.shape == (41, 41) and g.dtype == np.uint8
    assert not g.any()


def test_raster_vehicle_block():
    v = bare_view()
    v = v.replace(objects=(scene.ObjectState("o", "vehicle", scene.Pose(0.0, 0.0, 0.0), 0.0, (4.5, 2.0)),))
    g = metrics.rasterize_view(v, 0.5)
    rows, cols = np.nonzero(g == metrics.OBJECT)
    assert cols.max() - cols.min() + 1 == 9
    assert rows.max() - rows.min() + 1 == 4
    assert len(rows) == 36
    assert rows.min() <= 20 <= rows.max() and cols.min() <= 20 <= cols.max()


def test_raster_diff_localised():
    base = bare_view([vehicle("a", 5, 0)])
    moved = base.replace(objects=(base.objects[0]._replace(pose=scene.Pose(5.0, 3.0, 0.0)),))
    g0 = metrics.rasterize_view(base)
    g1 = metrics.rasterize_view(moved)
    diff = g0 != g1
    only0 = g0 == metrics.OBJECT
    only1 = g1 == metrics.OBJECT
    assert diff.any()
    assert np.array_equal(diff, only0 ^ only1)


def test_lane_drawn(straight_road):
    s = scene.make_scene(straight_road, [vehicle("ego", 20, 0, lane="c0_000")])
    g = metrics.rasterize_view(scene.extract_bev(s, "ego", 10.0))
    assert (g[20, :] == metrics.LANE_DASHED).all()


def test_pgm_roundtrip(tmp_path):
    g = np.arange(12, dtype=np.uint8).reshape(3, 4)
    p = tmp_path / "x.pgm"
    metrics.write_pgm(g, p)
    raw = p.read_bytes()
    assert raw.startswith(b"P5\n4 3\n255\n")
    assert np.array_equal(np.frombuffer(raw[-12:], np.uint8).reshape(3, 4), g)


def test_figures_render(tmp_path):
    r = np.random.default_rng(0)
    groups = {"normal": [FeatureVector(*r.normal(size=7)) for _ in range(20)],
              "drunk": [FeatureVector(*r.normal(1, 1, size=7)) for _ in range(20)]}
    metrics.plot_feature_distributions(groups, tmp_path / "f.png")
    labels, m = metrics.wasserstein_table({k: [f.mean_speed for f in v] for k, v in groups.items()})
    metrics.plot_wasserstein(labels, m, "mean_speed", tmp_path / "w.png")
    g = metrics.rasterize_view(bare_view([vehicle("a", 5, 0)]))
    metrics.plot_view_pair(g, g, tmp_path / "v.png")
    for n in ("f.png", "w.png", "v.png"):
        assert (tmp_path / n).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
