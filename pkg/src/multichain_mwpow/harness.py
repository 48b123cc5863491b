"""Command line front door: scenario runs, security sweeps and metric replay.

Configuration is a YAML file whose keys mirror :class:`ScenarioConfig`, plus ``scale``.
Any key can be overridden from the environment with the ``MCMW_`` prefix; nested keys are
joined with a double underscore, e.g. ``MCMW_ADVERSARY__POWERFRACTION=0.3``.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import yaml

from . import security as sec
from .simnet import (
    AdversaryPolicy,
    BandwidthModel,
    LatencyModel,
    MetricsRecord,
    ScenarioConfig,
    run as sim_run,
)

ENV_PREFIX = "MCMW_"
DEFAULT_SCALE = 1 / 20
# full experiment scale; desk runs multiply these by ``scale``
FULL_SCALE = {"nodes": 8000, "K": 2000, "loadRate": 50_000.0}
POWER_PRESET_NAMES = {"A": "uniformA", "B": "skewedB", "C": "balancedC"}
SECURITY_COLUMNS = ("n", "t", "m", "s", "T", "prob")
SUMMARY_KEYS = (
    "intervals", "mean_throughput", "total_processed", "mean_confirm_s",
    "max_chains", "final_chains", "reassignments", "halts",
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class ConfigError(Exception):
    """Bad or unreadable configuration; reported with exit status 2."""


# --- configuration ------------------------------------------------------------------------------

_SCENARIO_FIELDS = {f.name for f in dataclasses.fields(ScenarioConfig)}


def _parse_scalar(text: str) -> Any:
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def _match_key(mapping: Mapping, key: str) -> str:
    for k in mapping:
        if k.lower() == key.lower():
            return k
    return key


def env_overrides(environ: Mapping[str, str] | None = None, prefix: str = ENV_PREFIX) -> dict:
    """Nested dict of overrides taken from ``PREFIX_KEY__SUBKEY=value`` variables."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for name in sorted(environ):
        if not name.startswith(prefix):
            continue
        path = [p for p in name[len(prefix):].split("__") if p]
        if not path:
            continue
        node = out
        for p in path[:-1]:
            node = node.setdefault(p.lower(), {})
            if not isinstance(node, dict):
                raise ConfigError(f"environment override {name} conflicts with a scalar key")
        node[path[-1].lower()] = _parse_scalar(environ[name])
    return out


def merge_config(base: dict, over: Mapping) -> dict:
    """Deep merge; keys match case-insensitively so env overrides hit camelCase keys."""
    out = dict(base)
    for k, v in over.items():
        key = _match_key(out, k)
        if isinstance(v, Mapping) and isinstance(out.get(key), Mapping):
            out[key] = merge_config(dict(out[key]), v)
        else:
            out[key] = v
    return out


def load_yaml(path: str | os.PathLike | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {p} must be a mapping at top level")
    return data


def scaled_defaults(scale: float) -> dict:
    if not 0 < scale <= 1:
        raise ConfigError(f"scale must lie in (0, 1], got {scale}")
    return {
        "nodes": max(1, round(FULL_SCALE["nodes"] * scale)),
        "K": max(2, round(FULL_SCALE["K"] * scale)),
        "loadRate": FULL_SCALE["loadRate"] * scale,
    }


def _canonical(raw: Mapping) -> dict:
    out = {}
    for k, v in raw.items():
        key = next((f for f in _SCENARIO_FIELDS | {"scale"} if f.lower() == str(k).lower()), None)
        if key is None:
            raise ConfigError(f"unknown config key {k!r}")
        out[key] = v
    return out


def _sub(cls, value: Any, name: str):
    if value is None or isinstance(value, cls):
        return value
    if not isinstance(value, Mapping):
        raise ConfigError(f"{name} must be a mapping")
    fields = {f.name.lower(): f.name for f in dataclasses.fields(cls)}
    kw = {}
    for k, v in value.items():
        if str(k).lower() not in fields:
            raise ConfigError(f"unknown {name} key {k!r}")
        kw[fields[str(k).lower()]] = v
    if cls is LatencyModel and isinstance(kw.get("empirical"), Mapping):
        emp = kw["empirical"]
        kw["empirical"] = (tuple(int(x) for x in emp["values"]), tuple(float(x) for x in emp["weights"]))
    return cls(**kw)


def build_scenario(raw: Mapping, scale: float | None = None) -> ScenarioConfig:
    """ScenarioConfig from a (merged) config mapping, defaults scaled from full size."""
    cfg = _canonical(raw)
    sc = float(scale if scale is not None else cfg.pop("scale", DEFAULT_SCALE))
    cfg.pop("scale", None)
    kw = merge_config(scaled_defaults(sc), cfg)
    try:
        if "adversary" in kw:
            kw["adversary"] = _sub(AdversaryPolicy, kw["adversary"], "adversary")
        if "latency" in kw:
            kw["latency"] = _sub(LatencyModel, kw["latency"], "latency")
        if "bandwidth" in kw:
            kw["bandwidth"] = _sub(BandwidthModel, kw["bandwidth"], "bandwidth")
        if isinstance(kw.get("seedList"), int):
            kw["seedList"] = (kw["seedList"],)
        return ScenarioConfig(**kw)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid scenario: {exc}") from exc


def load_scenario(path=None, *, scale: float | None = None, preset: str | None = None,
                  seeds: Sequence[int] | None = None, environ: Mapping[str, str] | None = None) -> ScenarioConfig:
    """File, then environment, then explicit arguments; later sources win."""
    raw = merge_config(load_yaml(path), env_overrides(environ))
    if preset is not None:
        if preset.upper() not in POWER_PRESET_NAMES:
            raise ConfigError(f"unknown run preset {preset!r}; choose A, B or C")
        raw = merge_config(raw, {"powerDistribution": POWER_PRESET_NAMES[preset.upper()]})
    if seeds:
        raw = merge_config(raw, {"seedList": list(seeds)})
    return build_scenario(raw, scale)


def _plain(x: Any) -> Any:
    if isinstance(x, Enum):
        return x.value
    if isinstance(x, Mapping):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def scenario_dict(sc: ScenarioConfig) -> dict:
    return _plain(dataclasses.asdict(sc))


# --- run ----------------------------------------------------------------------------------------

def csv_name(seed: int) -> str:
    return f"seed_{seed}.csv"


def write_metrics_csv(path: Path, records: Iterable[MetricsRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MetricsRecord.CSV_COLUMNS)
        for r in records:
            w.writerow(r.csv_row())


def read_metrics_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = tuple(next(rd, ()))
        if header != MetricsRecord.CSV_COLUMNS:
            raise ConfigError(f"{path}: unexpected CSV header {header}")
        rows = []
        for line in rd:
            row = dict(zip(header, line))
            rows.append({k: float(v) if "confirm" in k else int(v) for k, v in row.items()})
    return rows


def summarize_rows(rows: Sequence[dict]) -> dict:
    """Run summary computed only from CSV rows, so replay can reproduce it exactly."""
    tput = [r["tx_processed"] for r in rows]
    conf = [r["confirm_mean_s"] for r in rows if r["tx_processed"]]
    return {
        "intervals": len(rows),
        "mean_throughput": round(float(np.mean(tput)), 6) if tput else 0.0,
        "total_processed": int(sum(tput)),
        "mean_confirm_s": round(float(np.mean(conf)), 6) if conf else 0.0,
        "max_chains": max((r["chains"] for r in rows), default=0),
        "final_chains": rows[-1]["chains"] if rows else 0,
        "reassignments": int(sum(r["reassignments"] for r in rows)),
        "halts": int(sum(r["halts"] for r in rows)),
    }


def _one_run(sc: ScenarioConfig, seed: int) -> tuple[list[MetricsRecord], dict]:
    res = sim_run(sc, seed)
    safety = {
        "corrupted_final": res.corruptedFinal,
        "forged_blocks": res.forgedBlocks,
        "duty_violations": res.dutyViolations,
        "double_spends": res.doubleSpends,
        "injected": res.injected,
        "accepted": res.accepted,
        "pending": res.pending,
        "rejected": res.rejected,
    }
    return res.records, safety


def run_batch(sc: ScenarioConfig, out: str | os.PathLike, jobs: int = 1) -> dict:
    """Run every seed of ``sc`` and write CSVs plus one JSON document; returns that document."""
    outdir = Path(out)
    outdir.mkdir(parents=True, exist_ok=True)
    seeds = list(sc.seedList)
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_one_run, [sc] * len(seeds), seeds))
    else:
        results = [_one_run(sc, s) for s in seeds]
    runs = []
    for seed, (records, safety) in zip(seeds, results):
        path = outdir / csv_name(seed)
        write_metrics_csv(path, records)
        runs.append({"seed": seed, "csv": path.name, "summary": summarize_rows(read_metrics_csv(path)),
                     "safety": safety})
    doc = {"scenario": scenario_dict(sc), "runs": runs}
    if len(runs) > 1:
        doc["aggregate"] = aggregate([r["summary"] for r in runs])
        name = "aggregate.json"
    else:
        name = "summary.json"
    (outdir / name).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def aggregate(summaries: Sequence[dict]) -> dict:
    return {k: round(float(np.mean([s[k] for s in summaries])), 6) for k in SUMMARY_KEYS}


# --- security sweeps ----------------------------------------------------------------------------

def _grid(v: Any) -> list[int]:
    if v is None:
        return [None]
    if isinstance(v, Mapping):
        return list(range(int(v["start"]), int(v["stop"]) + 1, int(v.get("step", 1))))
    if isinstance(v, (list, tuple)):
        return [int(x) for x in v]
    return [int(v)]


def _fig4_row(n: int, t: int, s: int, ratio: float) -> tuple:
    m = max(1, round(n / s))
    T = math.ceil(ratio * m)
    return (n, t, m, s, T, sec.class_attack_prob_max(t, T, s))


def sweep(grid: Mapping) -> list[tuple]:
    """Rows (n, t, m, s, T, prob) for a grid description.

    ``kind`` is one of ``hypergeom`` (random committee sampling), ``class`` (class based
    assignment, worst-case adversary spread) or ``flexible`` (colour categories; with
    ``minimal: true`` only the smallest T meeting ``threshold`` per m).
    """
    kind = grid.get("kind")
    rows: list[tuple] = []
    try:
        if kind == "hypergeom":
            for n in _grid(grid["n"]):
                for t in _grid(grid["t"]):
                    for m in _grid(grid["m"]):
                        s = n // m
                        rows.append((n, t, m, s, m // 2 + 1, float(sec.hypergeom_tail(n, t, m))))
        elif kind == "class":
            ratio = float(grid.get("T_ratio", 0.7))
            for n in _grid(grid["n"]):
                for t in _grid(grid["t"]):
                    for s in _grid(grid["s"]):
                        if "T" in grid:
                            m = round(n / s)
                            for T in _grid(grid["T"]):
                                rows.append((n, t, m, s, T, sec.class_attack_prob_max(t, T, s)))
                        else:
                            rows.append(_fig4_row(n, t, s, ratio))
        elif kind == "flexible":
            th = float(grid.get("threshold", sec.DEFAULT_THRESHOLD))
            for m in _grid(grid["m"]):
                if grid.get("minimal"):
                    T = sec.min_flexible_threshold(m, th)
                    rows.append(("", "", m, "", T, sec.flexible_attack_prob(m, T)))
                else:
                    for T in _grid(grid.get("T", {"start": m // 2 + 1, "stop": m})):
                        rows.append(("", "", m, "", T, sec.flexible_attack_prob(m, T)))
        else:
            raise ConfigError(f"unknown sweep kind {kind!r}; use hypergeom, class or flexible")
    except KeyError as exc:
        raise ConfigError(f"sweep of kind {kind!r} needs key {exc}") from exc
    except sec.DomainError as exc:
        raise ConfigError(f"sweep outside the calculator's domain: {exc}") from exc
    return rows


SECURITY_PRESETS: dict[str, dict] = {
    # random sampling into shards: adversary majority in a sampled committee
    "fig2": {"kind": "hypergeom", "n": [2000], "t": [400, 600, 800, 1000],
             "m": {"start": 10, "stop": 400, "step": 10}},
    # class based assignment, T = 0.7 m, m = n / s
    "fig4": {"kind": "class", "n": [2000], "t": [1000], "s": {"start": 2, "stop": 200}, "T_ratio": 0.7},
    # colour categories: smallest T holding the threshold for each m
    "fig6": {"kind": "flexible", "m": {"start": 50, "stop": 1000, "step": 50}, "minimal": True,
             "threshold": sec.DEFAULT_THRESHOLD},
}


def write_security_csv(path: str | os.PathLike | None, rows: Sequence[tuple]) -> None:
    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SECURITY_COLUMNS)
        for r in rows:
            w.writerow(r[:5] + (repr(float(r[5])),))
    finally:
        if path:
            fh.close()


# --- replay -------------------------------------------------------------------------------------

def replay(metrics_dir: str | os.PathLike) -> dict:
    """Recompute summaries from emitted CSVs and group them by adversary level."""
    root = Path(metrics_dir)
    if not root.is_dir():
        raise ConfigError(f"metrics directory not found: {root}")
    docs = sorted(list(root.rglob("summary.json")) + list(root.rglob("aggregate.json")))
    if not docs:
        raise ConfigError(f"no run output under {root}")
    runs = []
    for doc_path in docs:
        doc = json.loads(doc_path.read_text())
        adv = doc["scenario"]["adversary"]
        for entry in doc["runs"]:
            rows = read_metrics_csv(doc_path.parent / entry["csv"])
            summary = summarize_rows(rows)
            runs.append({
                "dir": str(doc_path.parent.relative_to(root)) if doc_path.parent != root else ".",
                "seed": entry["seed"], "mode": adv["mode"], "fraction": float(adv["powerFraction"]),
                "summary": summary, "matches": summary == entry["summary"],
                "confirm_curve": [r["confirm_mean_s"] for r in rows],
            })
    levels: dict[tuple, list] = {}
    for r in runs:
        levels.setdefault((r["mode"], r["fraction"]), []).append(r)
    by_level = []
    for (mode, frac), rs in sorted(levels.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        curves = [r["confirm_curve"] for r in rs]
        width = min(len(c) for c in curves)
        by_level.append({
            "mode": mode, "fraction": frac, "runs": len(rs),
            "mean_throughput": round(float(np.mean([r["summary"]["mean_throughput"] for r in rs])), 6),
            "mean_confirm_s": round(float(np.mean([r["summary"]["mean_confirm_s"] for r in rs])), 6),
            "confirm_curve": [round(float(np.mean([c[i] for c in curves])), 6) for i in range(width)],
        })
    return {"runs": runs, "levels": by_level}


def format_replay(result: dict, curve: bool = False) -> str:
    lines = [f"{'dir':<16} {'seed':>6} {'adversary':>10} {'mode':<20} {'tput':>12} {'confirm_s':>12} "
             f"{'chains':>7} {'halts':>6} {'match':>6}"]
    for r in result["runs"]:
        s = r["summary"]
        lines.append(f"{r['dir']:<16} {r['seed']:>6} {r['fraction']:>10.3f} {r['mode']:<20} "
                     f"{s['mean_throughput']:>12.3f} {s['mean_confirm_s']:>12.3f} {s['max_chains']:>7} "
                     f"{s['halts']:>6} {'yes' if r['matches'] else 'NO':>6}")
    lines.append("")
    lines.append(f"{'adversary':>10} {'mode':<20} {'runs':>5} {'tput':>12} {'confirm_s':>12}")
    for lv in result["levels"]:
        lines.append(f"{lv['fraction']:>10.3f} {lv['mode']:<20} {lv['runs']:>5} "
                     f"{lv['mean_throughput']:>12.3f} {lv['mean_confirm_s']:>12.3f}")
    if curve:
        for lv in result["levels"]:
            lines.append("")
            lines.append(f"confirmation curve, adversary {lv['fraction']:.3f} {lv['mode']}")
            for i, v in enumerate(lv["confirm_curve"]):
                lines.append(f"{i:>6} {v:>12.3f}")
    return "\n".join(lines)


# --- entry point --------------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multichain-mwpow", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="simulate a scenario for each seed")
    r.add_argument("--config", help="YAML scenario file")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--seed", type=int, action="append", help="seed (repeatable); replaces seedList")
    r.add_argument("--scale", type=float, help=f"fraction of full experiment size (default {DEFAULT_SCALE})")
    r.add_argument("--preset", help="power distribution preset: A, B or C")
    r.add_argument("--jobs", type=int, default=1, help="parallel runs")

    s = sub.add_parser("security", help="security probability sweep")
    s.add_argument("--config", help="YAML sweep description")
    s.add_argument("--preset", choices=sorted(SECURITY_PRESETS), help="built-in sweep")
    s.add_argument("--out", help="CSV path (stdout when omitted)")

    y = sub.add_parser("replay", help="summarize emitted metrics")
    y.add_argument("metrics_dir", nargs="?", help="directory holding run output")
    y.add_argument("--out", dest="out", help="directory holding run output (alternative to positional)")
    y.add_argument("--json", dest="json_out", help="also write the aggregate as JSON here")
    y.add_argument("--curve", action="store_true", help="print the confirmation-time curve")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.cmd == "run":
            sc = load_scenario(args.config, scale=args.scale, preset=args.preset, seeds=args.seed)
            doc = run_batch(sc, args.out, jobs=max(1, args.jobs))
            for r in doc["runs"]:
                print(f"seed {r['seed']}: {json.dumps(r['summary'], sort_keys=True)}")
            return EXIT_OK
        if args.cmd == "security":
            if (args.config is None) == (args.preset is None):
                raise ConfigError("give exactly one of --config or --preset")
            grid = SECURITY_PRESETS[args.preset] if args.preset else merge_config(
                load_yaml(args.config), env_overrides())
            write_security_csv(args.out, sweep(grid))
            return EXIT_OK
        if args.cmd == "replay":
            target = args.metrics_dir or args.out
            if target is None:
                raise ConfigError("replay needs a metrics directory")
            res = replay(target)
            print(format_replay(res, curve=args.curve))
            if args.json_out:
                Path(args.json_out).write_text(json.dumps(res, indent=2, sort_keys=True) + "\n")
            return EXIT_OK if all(r["matches"] for r in res["runs"]) else EXIT_FAIL
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
