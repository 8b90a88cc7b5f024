"""Synthetic map generators. Outputs are plain map documents (see RoadMap.from_dict)."""

from __future__ import annotations


def lane_id(lane: int, piece: int) -> str:
    return f"c{lane}_{piece:03d}"


def corridor(length: float = 4000.0, lanes: int = 2, piece: float = 50.0, width: float = 3.5,
             signals=(), marking="dashed") -> dict:
    """Straight multi-lane road along +x cut into ``piece``-metre lanes.

    Lane ``k`` sits at y = k * width (k = 0 is the rightmost). ``signals`` is a list of
    (id, x, phases, offset_s) tuples; each signal's stop line controls the piece that
    ends at ``x`` on every lane.
    """
    n = int(round(length / piece))
    out = {"schema_version": 1, "lanes": [], "signals": []}
    for k in range(lanes):
        y = k * width
        for i in range(n):
            out["lanes"].append({
                "id": lane_id(k, i),
                "centerline": [[i * piece, y], [(i + 1) * piece, y]],
                "width": width,
                "marking": marking,
                "successors": [lane_id(k, i + 1)] if i + 1 < n else [],
            })
    for sid, x, phases, offset in signals:
        i = int(round(x / piece)) - 1
        out["signals"].append({
            "id": sid,
            "stop_point": [x, 0.5 * (lanes - 1) * width, 0.0],
            "controlled_lanes": [lane_id(k, i) for k in range(lanes)],
            "phases": [list(p) for p in phases],
            "offset_s": offset,
        })
    return out


def corridor_lanes(lane: int, start_x: float, end_x: float, piece: float = 50.0) -> list:
    """Lane ids covering [start_x, end_x] on one corridor lane."""
    a = int(start_x // piece)
    b = int(-(-end_x // piece))
    return [lane_id(lane, i) for i in range(a, b)]


def crossing(arm: float = 150.0, width: float = 3.5, phases=(("red", 28.0), ("green", 17.0), ("yellow", 3.0))) -> dict:
    """Two straight roads crossing at the origin with one signal per approach.

    East-west approaches run on opposite sides of y = 0, north-south on opposite
    sides of x = 0. The north-south program is shifted by half a cycle, which with
    the default phases never gives both roads green at once.
    """
    h = 0.5 * width
    cyc = sum(d for _, d in phases)
    lanes = [
        {"id": "e_in", "centerline": [[-arm, -h], [-2 * width, -h]], "successors": ["e_mid"]},
        {"id": "e_mid", "centerline": [[-2 * width, -h], [2 * width, -h]], "successors": ["e_out"]},
        {"id": "e_out", "centerline": [[2 * width, -h], [arm, -h]], "successors": []},
        {"id": "w_in", "centerline": [[arm, h], [2 * width, h]], "successors": ["w_mid"]},
        {"id": "w_mid", "centerline": [[2 * width, h], [-2 * width, h]], "successors": ["w_out"]},
        {"id": "w_out", "centerline": [[-2 * width, h], [-arm, h]], "successors": []},
        {"id": "n_in", "centerline": [[h, -arm], [h, -2 * width]], "successors": ["n_mid"]},
        {"id": "n_mid", "centerline": [[h, -2 * width], [h, 2 * width]], "successors": ["n_out"]},
        {"id": "n_out", "centerline": [[h, 2 * width], [h, arm]], "successors": []},
        {"id": "s_in", "centerline": [[-h, arm], [-h, 2 * width]], "successors": ["s_mid"]},
        {"id": "s_mid", "centerline": [[-h, 2 * width], [-h, -2 * width]], "successors": ["s_out"]},
        {"id": "s_out", "centerline": [[-h, -2 * width], [-h, -arm]], "successors": []},
    ]
    for ln in lanes:
        ln.update(width=width, marking="solid" if ln["id"].endswith("mid") else "dashed")
    sig = [list(p) for p in phases]
    signals = [
        {"id": "sig_e", "stop_point": [-2 * width, -h, 0.0], "controlled_lanes": ["e_in"], "phases": sig, "offset_s": 0.0},
        {"id": "sig_w", "stop_point": [2 * width, h, 3.141592653589793 - 1e-12], "controlled_lanes": ["w_in"], "phases": sig, "offset_s": 0.0},
        {"id": "sig_n", "stop_point": [h, -2 * width, 1.5707963267948966], "controlled_lanes": ["n_in"], "phases": sig, "offset_s": cyc / 2},
        {"id": "sig_s", "stop_point": [-h, 2 * width, -1.5707963267948966], "controlled_lanes": ["s_in"], "phases": sig, "offset_s": cyc / 2},
    ]
    return {"schema_version": 1, "lanes": lanes, "signals": signals}


EVENT_SHAPES = {
    # (time offset s, speed as a fraction of the cruise speed)
    "brake": ((0.0, 1.0), (2.0, 0.4), (5.0, 0.4), (11.0, 1.0)),
    "stop": ((0.0, 1.0), (1.6, 0.0), (13.6, 0.0), (20.6, 1.0)),
}


def lead_speed_profile(events=(), cruise: float = 10.0, amplitude: float = 1.5, period: float = 20.0,
                       horizon: float = 400.0) -> list:
    """(time, speed) knots: a sinusoid sampled at quarter periods, overridden around events.

    ``events`` holds (start_s, kind) with kind in EVENT_SHAPES. Oscillation knots within a
    quarter period of an event window are dropped so every event starts from cruise speed.
    """
    windows = []
    knots = []
    for start, kind in sorted(events):
        shape = EVENT_SHAPES[kind]
        windows.append((start - period / 4, start + shape[-1][0] + period / 4))
        knots += [(start + dt, cruise * f) for dt, f in shape]
    q = period / 4
    for k in range(int(horizon / q) + 1):
        t = k * q
        if any(a < t < b for a, b in windows):
            continue
        knots.append((t, cruise + amplitude * (0.0, 1.0, 0.0, -1.0)[k % 4]))
    knots.sort()
    out = []
    for t, v in knots:
        if out and t - out[-1][0] < 1e-9:
            continue
        out.append((round(t, 6), round(v, 6)))
    return out
