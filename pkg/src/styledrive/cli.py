"""Command-line entry points: validate, run, analyze, export-replay.

Exit codes: 0 success, 1 domain failure (invalid config, integrity error, bad
request), 2 I/O failure (unreadable or unwritable files).
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import os
import sys
from collections import Counter, defaultdict
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import metrics, rng, runtime
from .scene import view_to_dict

EXIT_OK, EXIT_DOMAIN, EXIT_IO = 0, 1, 2
MANIFEST_VERSION = 1


class CliError(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {path}: {exc.strerror or exc}") from None
    except ValueError as exc:
        raise CliError(EXIT_DOMAIN, f"{path} is not valid JSON: {exc}") from None


def _parse_overrides(items: Sequence[str]) -> dict:
    out = {}
    for it in items or ():
        if "=" not in it:
            raise CliError(EXIT_DOMAIN, f"override {it!r} is not key=value")
        k, v = it.split("=", 1)
        out[k.strip()] = v
    return out


def _load(path, overrides: Optional[dict] = None) -> runtime.SimulationConfig:
    doc = _read_json(path)
    if not isinstance(doc, dict):
        raise CliError(EXIT_DOMAIN, f"{path}: scenario must be a JSON object")
    base = Path(path).resolve().parent
    if isinstance(doc.get("map"), str) and (base / doc["map"]).is_file():
        doc["map"] = str(base / doc["map"])
    return runtime.load_config(doc, overrides)


# ----------------------------------------------------------------- validate


def cmd_validate(args) -> int:
    try:
        cfg = _load(args.config)
    except runtime.ConfigError as exc:
        print(f"{args.config}: {len(exc.problems)} problem(s)")
        for p in exc.problems:
            print(f"  - {p}")
        return EXIT_DOMAIN
    print(f"{args.config}: ok ({len(cfg.agents)} agents, {cfg.max_steps} steps, config {cfg.digest()})")
    return EXIT_OK


# ---------------------------------------------------------------------- run


def _dump(path: Path, text: str):
    try:
        path.write_text(text)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {path}: {exc.strerror or exc}") from None


def _translation_sources(lines) -> dict:
    counts = Counter()
    for line in lines:
        if '"tr":' not in line:
            continue
        rec = json.loads(line)
        for a in rec.get("agents", {}).values():
            for tr in a.get("tr", ()):
                for src in tr.get("sources", {}).values():
                    counts[src] += 1
    return dict(sorted(counts.items()))


def execute_run(config_path: str, overrides: dict, provider: str, out: str) -> dict:
    """One run into its own directory; returns the manifest."""
    ov = dict(overrides)
    ov["provider.enabled"] = "true" if provider == "on" else "false"
    cfg = _load(config_path, ov)
    digest = cfg.digest()
    stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    run_id = f"{stamp}-{digest[:12]}"
    root = Path(out) / run_id
    try:
        root.mkdir(parents=True, exist_ok=False)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create {root}: {exc.strerror or exc}") from None
    config_text = json.dumps(cfg.raw, sort_keys=True, separators=(",", ":"))
    _dump(root / "config.json", config_text)
    sim = runtime.Simulation(cfg)
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "schema_version": runtime.SCHEMA_VERSION,
        "run_id": run_id,
        "config_digest": digest,
        "run_seed": cfg.run_seed,
        "provider": sim.header["provider"],
        "paths": {"config": "config.json", "log": "log.jsonl", "metrics": "metrics.json",
                  "transcripts": "transcripts.jsonl"},
    }
    if sim.provider_notice:
        manifest["notice"] = sim.provider_notice
    try:
        res = sim.run()
    except Exception as exc:  # recorded, then reported as a failed run
        manifest.update(status="failed", failed_step=sim.current_step, error=f"{type(exc).__name__}: {exc}")
        _dump(root / "log.jsonl", "\n".join(sim.lines) + "\n")
        _dump(root / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        manifest["_dir"] = str(root)
        return manifest
    _dump(root / "log.jsonl", "\n".join(res.lines) + "\n")
    _dump(root / "metrics.json", json.dumps({
        "log_digest": res.digest,
        "summary": res.summary,
        "events": [e.to_dict() for e in res.events],
    }, indent=2, sort_keys=True))
    _dump(root / "transcripts.jsonl", "".join(json.dumps(t, sort_keys=True) + "\n" for t in res.transcripts))
    manifest.update(status="ok", log_digest=res.digest, translation_sources=_translation_sources(res.lines))
    _dump(root / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
    manifest["_dir"] = str(root)
    return manifest


def _run_worker(job):
    try:
        return execute_run(*job)
    except CliError as exc:
        return {"status": "error", "code": exc.code, "error": str(exc)}
    except runtime.ConfigError as exc:
        return {"status": "error", "code": EXIT_DOMAIN, "error": "; ".join(exc.problems)}


def _print_summary(manifest: dict):
    metrics_path = Path(manifest["_dir"]) / "metrics.json"
    summary = json.loads(metrics_path.read_text())["summary"]
    print(f"run {manifest['run_id']}  log {manifest['log_digest']}")
    print(f"  {'agent':<14}{'style':<32}{'RC':>8}{'DS':>8}  infractions")
    for aid, s in summary.items():
        inf = ", ".join(f"{k}x{v}" for k, v in s["infractions"].items()) or "-"
        print(f"  {aid:<14}{'/'.join(s['style']):<32}{s['rc']:>8.2f}{s['ds']:>8.2f}  {inf}")


def cmd_run(args) -> int:
    overrides = _parse_overrides(args.override)
    seeds = [None]
    if args.seed is not None or args.batch > 1:
        base = args.seed if args.seed is not None else int(_read_json(args.config).get("run_seed", 0))
        seeds = [base + i for i in range(max(1, args.batch))]
    jobs = []
    for s in seeds:
        ov = dict(overrides)
        if s is not None:
            ov["run_seed"] = str(s)
        jobs.append((args.config, ov, args.provider, args.out))
    if len(jobs) == 1:
        results = [_run_worker(jobs[0])]
    else:
        with ProcessPoolExecutor(max_workers=min(len(jobs), os.cpu_count() or 1)) as ex:
            results = list(ex.map(_run_worker, jobs))
    code = EXIT_OK
    for m in results:
        if m.get("status") == "ok":
            _print_summary(m)
            print(f"  manifest: {Path(m['_dir']) / 'manifest.json'}")
        elif m.get("status") == "failed":
            print(f"run {m['run_id']} failed at step {m['failed_step']}: {m['error']}", file=sys.stderr)
            code = max(code, EXIT_DOMAIN)
        else:
            print(f"error: {m['error']}", file=sys.stderr)
            code = max(code, m["code"])
    return code


# ------------------------------------------------------------------ analyze


def _open_manifest(path) -> tuple:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    m = _read_json(path)
    if not isinstance(m, dict) or "paths" not in m:
        raise CliError(EXIT_DOMAIN, f"{path} is not a run manifest")
    return m, path.parent


def _log_lines(manifest: dict, root: Path) -> list:
    try:
        return (root / manifest["paths"]["log"]).read_text().splitlines()
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read log of {manifest.get('run_id')}: {exc.strerror or exc}") from None


def tracks_from_log(lines) -> tuple:
    """(header, dt, {agent: track columns}, {agent: style label}) from log lines."""
    header, steps, summary = runtime.read_log(lines)
    dt = float(header["config"].get("dt", 0.05))
    tracks = defaultdict(lambda: {k: [] for k in ("t", "x", "y", "h", "v", "a", "off", "gap")})
    for rec in steps:
        for aid, r in rec["agents"].items():
            tr = tracks[aid]
            tr["t"].append(rec["t"])
            tr["x"].append(r["p"][0])
            tr["y"].append(r["p"][1])
            tr["h"].append(r["p"][2])
            tr["v"].append(r["sp"])
            tr["a"].append(r["d"][0])
            tr["off"].append(r["off"])
            og = r.get("og")
            tr["gap"].append(og[1] if og else float("nan"))
    labels = {aid: "/".join(s["style"]) for aid, s in (summary or {}).items()}
    return header, dt, dict(tracks), labels


def _style_name(label: str) -> str:
    parts = [p for p in label.split("/") if p != "normal"]
    return "+".join(parts) if parts else "normal"


def cmd_analyze(args) -> int:
    if not args.manifests:
        raise CliError(EXIT_DOMAIN, "at least one manifest is required")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create {out}: {exc.strerror or exc}") from None
    versions = set()
    rows = []
    for mp in args.manifests:
        m, root = _open_manifest(mp)
        versions.add(m.get("schema_version"))
        try:
            header, dt, tracks, labels = tracks_from_log(_log_lines(m, root))
        except runtime.IntegrityError as exc:
            raise CliError(EXIT_DOMAIN, f"{mp}: {exc}") from None
        versions.add(header.get("schema_version"))
        for aid in sorted(tracks):
            label = labels.get(aid, "unknown")
            group = _style_name(label) if args.group_by == "style" else label
            sl = metrics.TrajectorySlice.from_tracks(tracks[aid], dt)
            for wi, w in enumerate(metrics.windows(sl, args.window)):
                try:
                    fv = metrics.extract_features(w)
                except metrics.InsufficientData:
                    continue
                rows.append((m["run_id"], aid, wi, group, fv))
    if len(versions) > 1:
        raise CliError(EXIT_DOMAIN, f"mixed schema versions: {sorted(map(str, versions))}")
    if not rows:
        raise CliError(EXIT_DOMAIN, "no trajectory windows long enough to analyze")

    with open(out / "features.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["run_id", "agent", "window", "group", *metrics.FEATURES])
        for run_id, aid, wi, group, fv in rows:
            w.writerow([run_id, aid, wi, group, *(f"{v:.9g}" for v in fv)])

    groups = defaultdict(list)
    for *_, group, fv in rows:
        groups[group].append(fv)
    table = {}
    for feat in metrics.FEATURES:
        labs, mat = metrics.wasserstein_table({g: [getattr(f, feat) for f in fvs] for g, fvs in groups.items()})
        table[feat] = {"labels": labs, "matrix": mat.tolist()}
    report = {"windows": {g: len(v) for g, v in sorted(groups.items())}, "wasserstein": table}

    labels = sorted(groups)
    if args.f1:
        if len(labels) < 2:
            report["f1"] = {"notice": "insufficient labels: need at least 2 groups for separability"}
        else:
            train, test = [], []
            for run_id, aid, wi, group, fv in rows:
                unit = rng.derive_seed(run_id, aid)
                (test if unit % 2 else train).append(metrics.StyleSample(group, fv))
            missing = sorted({s.label for s in test} - {s.label for s in train})
            if missing or not test:
                report["f1"] = {"notice": f"insufficient labels: no training windows for {missing}"}
            else:
                res = metrics.knn_style_classify(train, test, k=args.k)
                report["f1"] = {"k": args.k, "macro_f1": res.macro_f1, "per_label": res.per_label_f1,
                                "train": len(train), "test": len(test)}
    _dump(out / "report.json", json.dumps(report, indent=2, sort_keys=True))
    metrics.plot_feature_distributions(groups, out / "features.png")
    labs, mat = metrics.wasserstein_table({g: [f.mean_time_headway for f in v] for g, v in groups.items()})
    metrics.plot_wasserstein(labs, mat, "mean_time_headway", out / "wasserstein_headway.png")

    print(f"{len(rows)} windows in {len(labels)} group(s): " + ", ".join(f"{g}={len(groups[g])}" for g in labels))
    print("W1 of mean_time_headway:")
    for i, a in enumerate(labs):
        print(f"  {a:<24}" + " ".join(f"{mat[i, j]:8.3f}" for j in range(len(labs))))
    if "f1" in report:
        f1 = report["f1"]
        print(f1["notice"] if "notice" in f1 else f"k-NN (k={f1['k']}) macro F1 = {f1['macro_f1']:.3f}")
    print(f"outputs in {out}")
    return EXIT_OK


# ------------------------------------------------------------ export-replay


def _parse_steps(text: str) -> tuple:
    try:
        if ":" in text:
            a, b = text.split(":", 1)
            return int(a), int(b)
        v = int(text)
        return v, v + 1
    except ValueError:
        raise CliError(EXIT_DOMAIN, f"bad step range {text!r}; use A:B or N") from None


def cmd_export_replay(args) -> int:
    m, root = _open_manifest(args.manifest)
    lines = _log_lines(m, root)
    try:
        header, steps, summary = runtime.read_log(lines)
    except runtime.IntegrityError as exc:
        raise CliError(EXIT_DOMAIN, str(exc)) from None
    n = len(steps)
    a, b = _parse_steps(args.steps)
    if not (0 <= a < b <= n):
        raise CliError(EXIT_DOMAIN, f"step range {a}:{b} outside the logged range 0:{n}")
    agents = sorted(summary or {})
    agent = args.agent or (agents[0] if agents else None)
    if agent not in agents:
        raise CliError(EXIT_DOMAIN, f"unknown agent {agent!r}; logged agents: {', '.join(agents)}")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create {out}: {exc.strerror or exc}") from None
    count = 0
    csv_rows = []
    jsonl = []
    try:
        for fr in runtime.replay(lines, agents=[agent], steps=range(a, b), verify=True):
            count += 1
            if args.format == "jsonl":
                jsonl.append(json.dumps({"step": fr.step, "agent": fr.agent, "script": fr.script.to_wire(),
                                         "objective": view_to_dict(fr.objective),
                                         "subjective": view_to_dict(fr.subjective)}, sort_keys=True))
            elif args.format == "csv":
                for name, view in (("objective", fr.objective), ("subjective", fr.subjective)):
                    for o in view.objects:
                        csv_rows.append([fr.step, fr.agent, name, o.id, o.kind, *o.pose, o.speed, *o.extent])
            else:
                go = metrics.rasterize_view(fr.objective, args.resolution)
                gs = metrics.rasterize_view(fr.subjective, args.resolution)
                metrics.write_pgm(go, out / f"{agent}_{fr.step:06d}_objective.pgm")
                metrics.write_pgm(gs, out / f"{agent}_{fr.step:06d}_subjective.pgm")
                if args.png:
                    metrics.plot_view_pair(go, gs, out / f"{agent}_{fr.step:06d}.png", f"{agent} step {fr.step}")
    except runtime.IntegrityError as exc:
        raise CliError(EXIT_DOMAIN, str(exc)) from None
    if args.format == "jsonl":
        _dump(out / f"{agent}_{a}_{b}.jsonl", "".join(l + "\n" for l in jsonl))
    elif args.format == "csv":
        with open(out / f"{agent}_{a}_{b}.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "agent", "view", "object", "kind", "x", "y", "heading", "speed", "length", "width"])
            w.writerows(csv_rows)
    print(f"exported {count} frame(s) of {agent} to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="styledrive", description="Perception-modulated driving style simulator")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a scenario without running it")
    v.add_argument("config")
    v.set_defaults(fn=cmd_validate)

    r = sub.add_parser("run", help="run a scenario and write log, metrics and manifest")
    r.add_argument("config")
    r.add_argument("--seed", type=int)
    r.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    r.add_argument("--provider", choices=("on", "off"), default="off")
    r.add_argument("--out", default="runs")
    r.add_argument("--batch", type=int, default=1, help="N runs with consecutive seeds")
    r.set_defaults(fn=cmd_run)

    a = sub.add_parser("analyze", help="features, Wasserstein table and k-NN separability over runs")
    a.add_argument("manifests", nargs="+")
    a.add_argument("--group-by", choices=("style", "triplet"), default="style")
    a.add_argument("--window", type=int, default=200, help="window length in steps")
    a.add_argument("--k", type=int, default=5)
    a.add_argument("--f1", action="store_true", help="report style separability")
    a.add_argument("--out", default="analysis")
    a.set_defaults(fn=cmd_analyze)

    e = sub.add_parser("export-replay", help="paired objective/subjective views of one agent")
    e.add_argument("manifest")
    e.add_argument("--agent")
    e.add_argument("--steps", default="0:1", help="A:B (half-open) or N")
    e.add_argument("--format", choices=("jsonl", "csv", "pgm"), default="jsonl")
    e.add_argument("--resolution", type=float, default=0.5, help="m/px for pgm")
    e.add_argument("--png", action="store_true", help="also write side-by-side PNG figures (pgm format)")
    e.add_argument("--out", default="replay")
    e.set_defaults(fn=cmd_export_replay)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except runtime.ConfigError as exc:
        print("error: invalid configuration", file=sys.stderr)
        for p in exc.problems:
            print(f"  - {p}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
