import json
from pathlib import Path

import numpy as np
import pytest

from styledrive import cli

SCEN = Path(cli.__file__).parent / "data" / "scenarios"
EXAMPLE = str(SCEN / "example.json")
SHORT = ["--override", "max_steps=150"]


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


def only_manifest(out: Path) -> dict:
    ms = sorted(out.glob("*/manifest.json"))
    assert len(ms) == 1
    return json.loads(ms[0].read_text()) | {"_path": ms[0]}


def write(tmp_path, name, doc):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


def small_doc(**kw):
    doc = {
        "schema_version": 1,
        "map": {"generator": "corridor", "length": 300, "lanes": 1},
        "max_steps": 120,
        "agents": [
            {"id": "n", "style": ["normal", "normal", "normal"], "spawn": {"x": 60, "lane": 0, "speed": 10},
             "route": {"corridor_lane": 0, "end_x": 290}},
            {"id": "d", "style": ["normal", "drunk", "normal"], "spawn": {"x": 20, "lane": 0, "speed": 10},
             "route": {"corridor_lane": 0, "end_x": 290}},
        ],
    }
    doc.update(kw)
    return doc


# ----------------------------------------------------------------- validate


@pytest.mark.parametrize("name", sorted(p.name for p in SCEN.glob("*.json")))
def test_validate_shipped(name, capsys):
    assert run_cli("validate", SCEN / name) == cli.EXIT_OK
    assert "ok" in capsys.readouterr().out


def test_validate_unknown_trait(tmp_path, capsys):
    doc = small_doc()
    doc["agents"][0]["style"] = ["reckless", "normal", "normal"]
    assert run_cli("validate", write(tmp_path, "s.json", doc)) == cli.EXIT_DOMAIN
    out = capsys.readouterr().out
    assert "reckless" in out and "L1" in out


def test_validate_missing_lane(tmp_path, capsys):
    doc = small_doc()
    doc["agents"][1]["route"] = {"lanes": ["c0_000", "c9_999"]}
    assert run_cli("validate", write(tmp_path, "s.json", doc)) == cli.EXIT_DOMAIN
    assert "c9_999" in capsys.readouterr().out


def test_validate_lists_all_problems(tmp_path, capsys):
    doc = small_doc(max_steps=-1)
    doc["agents"][0]["style"] = ["normal", "normal", "sleepy"]
    doc["agents"][1]["route"] = {"lanes": ["nope"]}
    assert run_cli("validate", write(tmp_path, "s.json", doc)) == cli.EXIT_DOMAIN
    assert "3 problem(s)" in capsys.readouterr().out


def test_validate_unreadable(tmp_path, capsys):
    assert run_cli("validate", tmp_path / "absent.json") == cli.EXIT_IO
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run_cli("validate", bad) == cli.EXIT_DOMAIN


# ---------------------------------------------------------------------- run


def test_run_twice_same_digest(tmp_path, capsys):
    assert run_cli("run", EXAMPLE, "--seed", 7, *SHORT, "--out", tmp_path / "a") == 0
    assert run_cli("run", EXAMPLE, "--seed", 7, *SHORT, "--out", tmp_path / "b") == 0
    ma, mb = only_manifest(tmp_path / "a"), only_manifest(tmp_path / "b")
    assert ma["status"] == "ok" and ma["log_digest"] == mb["log_digest"]
    root = ma["_path"].parent
    for f in ("config.json", "log.jsonl", "metrics.json", "transcripts.jsonl"):
        assert (root / f).is_file()
    assert "RC" in capsys.readouterr().out


def test_run_without_l3(tmp_path):
    assert run_cli("run", EXAMPLE, *SHORT, "--override", "l3_rate=0", "--out", tmp_path) == 0
    m = only_manifest(tmp_path)
    log = (m["_path"].parent / "log.jsonl").read_text()
    assert "L3Trigger" not in log
    summary = json.loads((m["_path"].parent / "metrics.json").read_text())["summary"]
    assert all(s["l3_triggers"] == 0 for s in summary.values())


def test_run_provider_off_catalog_only(tmp_path):
    assert run_cli("run", EXAMPLE, *SHORT, "--provider", "off", "--out", tmp_path) == 0
    m = only_manifest(tmp_path)
    assert m["provider"] == "off"
    assert set(m["translation_sources"]) == {"catalog"}


def test_run_provider_on_without_endpoint(tmp_path, monkeypatch):
    monkeypatch.delenv("STYLEDRIVE_PROVIDER_URL", raising=False)
    assert run_cli("run", write(tmp_path, "s.json", small_doc()), "--provider", "on", "--out", tmp_path / "o") == 0
    m = only_manifest(tmp_path / "o")
    assert "notice" in m and set(m["translation_sources"]) == {"catalog"}


def test_run_bad_override(tmp_path, capsys):
    assert run_cli("run", EXAMPLE, "--override", "max_steps", "--out", tmp_path) == cli.EXIT_DOMAIN


def test_run_invalid_config(tmp_path, capsys):
    doc = small_doc()
    doc["agents"][0]["style"] = ["reckless", "normal", "normal"]
    assert run_cli("run", write(tmp_path, "s.json", doc), "--out", tmp_path / "o") == cli.EXIT_DOMAIN


# ------------------------------------------------------------------ analyze


@pytest.fixture(scope="module")
def small_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    p = root / "s.json"
    p.write_text(json.dumps(small_doc(max_steps=400)))
    assert run_cli("run", p, "--out", root / "mixed") == 0
    normal = small_doc(max_steps=400)
    normal["agents"] = normal["agents"][:1]
    q = root / "n.json"
    q.write_text(json.dumps(normal))
    assert run_cli("run", q, "--out", root / "normal") == 0
    return root


def test_analyze_single_label(small_runs, tmp_path, capsys):
    m = next((small_runs / "normal").glob("*/manifest.json"))
    assert run_cli("analyze", m, "--f1", "--window", 100, "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["wasserstein"]["mean_speed"]["matrix"] == [[0.0]]
    assert "insufficient labels" in rep["f1"]["notice"]
    assert "insufficient labels" in capsys.readouterr().out
    for f in ("features.csv", "features.png", "wasserstein_headway.png"):
        assert (tmp_path / f).is_file()


def test_analyze_two_groups(small_runs, tmp_path):
    m = next((small_runs / "mixed").glob("*/manifest.json"))
    assert run_cli("analyze", m, "--window", 100, "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["wasserstein"]["lateral_offset_rms"]["labels"] == ["drunk", "normal"]
    assert rep["wasserstein"]["lateral_offset_rms"]["matrix"][0][1] > 0


def test_analyze_mixed_schema(small_runs, tmp_path, capsys):
    src = next((small_runs / "normal").glob("*/manifest.json"))
    dup = tmp_path / "copy"
    dup.mkdir()
    m = json.loads(src.read_text())
    m["schema_version"] = 99
    (dup / "manifest.json").write_text(json.dumps(m))
    (dup / "log.jsonl").write_text((src.parent / "log.jsonl").read_text())
    assert run_cli("analyze", src, dup, "--out", tmp_path / "o") == cli.EXIT_DOMAIN
    assert "mixed schema versions" in capsys.readouterr().err


# ------------------------------------------------------------ export-replay


def test_export_identity_frames(small_runs, tmp_path):
    m = next((small_runs / "mixed").glob("*/manifest.json"))
    assert run_cli("export-replay", m, "--agent", "n", "--steps", "0:20", "--out", tmp_path) == 0
    frames = [json.loads(l) for l in (tmp_path / "n_0_20.jsonl").read_text().splitlines()]
    assert len(frames) == 20
    for fr in frames:
        assert fr["script"] == []
        sub = dict(fr["subjective"], provenance="objective")
        assert sub == fr["objective"]


def test_export_drunk_lane_curved(small_runs, tmp_path):
    m = next((small_runs / "mixed").glob("*/manifest.json"))
    assert run_cli("export-replay", m, "--agent", "d", "--steps", "100:101", "--out", tmp_path) == 0
    fr = json.loads((tmp_path / "d_100_101.jsonl").read_text())
    assert any(c["api"] == "curve_lane_marks" for c in fr["script"])
    obj = {l["id"]: l["points"] for l in fr["objective"]["lanes"]}
    sub = {l["id"]: l["points"] for l in fr["subjective"]["lanes"]}
    lid = sorted(obj)[0]

    def line_residual(pts):
        a = np.asarray(pts)
        coef = np.polyfit(a[:, 0], a[:, 1], 1)
        return float(np.abs(np.polyval(coef, a[:, 0]) - a[:, 1]).max())

    # the ego may be yawed, so straightness is collinearity in the ego frame
    assert line_residual(obj[lid]) < 5e-3
    assert line_residual(sub[lid]) > 0.1


def test_export_pgm_and_png(small_runs, tmp_path):
    m = next((small_runs / "mixed").glob("*/manifest.json"))
    assert run_cli("export-replay", m, "--agent", "d", "--steps", "50", "--format", "pgm", "--png",
                   "--out", tmp_path) == 0
    assert (tmp_path / "d_000050_objective.pgm").is_file()
    assert (tmp_path / "d_000050.png").is_file()


def test_export_out_of_range(small_runs, tmp_path, capsys):
    m = next((small_runs / "mixed").glob("*/manifest.json"))
    assert run_cli("export-replay", m, "--steps", "0:100000", "--out", tmp_path) == cli.EXIT_DOMAIN
    assert "outside the logged range 0:" in capsys.readouterr().err


def test_export_corrupt_log(small_runs, tmp_path, capsys):
    src = next((small_runs / "mixed").glob("*/manifest.json"))
    lines = (src.parent / "log.jsonl").read_text().splitlines()
    lines[3] = lines[3].replace('"sd":"', '"sd":"f', 1) if '"sd":"' in lines[3] else lines[3][:-3]
    (tmp_path / "manifest.json").write_text(src.read_text())
    (tmp_path / "log.jsonl").write_text("\n".join(lines) + "\n")
    code = run_cli("export-replay", tmp_path, "--agent", "d", "--steps", "0:10", "--out", tmp_path / "o")
    assert code == cli.EXIT_DOMAIN
    assert "record" in capsys.readouterr().err
