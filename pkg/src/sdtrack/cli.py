"""Command-line entry point: ``sdtrack {simulate,run,compare,report}``.

Campaigns are described by one JSON file::

    {
      "schema_version": 1,
      "scenario": "ex3",                      # or an inline scenario object
      "methods": ["cdt", {"name": "sdt", "config": {"p_fa_trunc": 1e-6}}],
      "n_runs": 100,
      "master_seed": 0,
      "output_dir": "out",
      "window": [10, 35]                      # optional, defaults to presence
    }

Unknown keys anywhere are rejected.  ``SDTRACK_OUTPUT_DIR`` overrides the
config's ``output_dir``; ``--out`` overrides both.  Exit status is 0 on
success, 1 for usage or configuration errors and 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .evaluation import (
    METHODS,
    compare,
    compute_metrics,
    method_config,
    method_config_to_dict,
    read_metrics_csv,
    run_monte_carlo,
    run_streams,
    write_comparison_csv,
    write_metrics_csv,
)
from .scenario import (
    PRESETS,
    ConfigError,
    ScenarioConfig,
    load_scenario,
    scenario_from_dict,
    scenario_to_dict,
    simulate,
    write_frames_csv,
    write_truth_csv,
)

SCHEMA_VERSION = 1
OUTPUT_ENV = "SDTRACK_OUTPUT_DIR"
_CAMPAIGN_KEYS = {"schema_version", "scenario", "methods", "n_runs", "master_seed", "output_dir", "window"}
_METHOD_KEYS = {"name", "config"}


@dataclass
class CampaignConfig:
    scenario: ScenarioConfig
    methods: list  # [(name, method config object)]
    n_runs: int = 100
    master_seed: int = 0
    output_dir: str = "sdtrack_out"
    window: Optional[tuple] = None

    def __post_init__(self):
        if not self.methods:
            raise ConfigError("methods: at least one method is required")
        if int(self.n_runs) < 1:
            raise ConfigError("n_runs: must be >= 1")
        if int(self.master_seed) < 0:
            raise ConfigError("master_seed: must be a non-negative integer")
        if self.window is not None:
            lo, hi = (int(v) for v in self.window)
            if lo > hi:
                raise ConfigError("window: start after end")
            self.window = (lo, hi)

    @property
    def effective_window(self) -> tuple:
        if self.window is not None:
            return self.window
        return (self.scenario.birth_frame, self.scenario.death_frame)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "scenario": scenario_to_dict(self.scenario),
            "methods": [{"name": n, "config": method_config_to_dict(c)} for n, c in self.methods],
            "n_runs": self.n_runs,
            "master_seed": self.master_seed,
            "output_dir": self.output_dir,
            "window": list(self.window) if self.window is not None else None,
        }

    def __eq__(self, other):
        return isinstance(other, CampaignConfig) and self.to_dict() == other.to_dict()


def parse_campaign(d: dict) -> CampaignConfig:
    if not isinstance(d, dict):
        raise ConfigError("config: top level must be a JSON object")
    unknown = set(d) - _CAMPAIGN_KEYS
    if unknown:
        raise ConfigError(f"unknown key(s) in config: {', '.join(sorted(unknown))}")
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {d.get('schema_version')!r}")
    if "scenario" not in d:
        raise ConfigError("scenario: missing")
    sc = d["scenario"]
    if isinstance(sc, str):
        if sc not in PRESETS:
            raise ConfigError(f"scenario: unknown preset {sc!r}; presets are {sorted(PRESETS)}")
        scenario = load_scenario(sc)
    elif isinstance(sc, dict):
        scenario = scenario_from_dict(sc)
    else:
        raise ConfigError("scenario: must be a preset name or an object")
    if "methods" not in d or not isinstance(d["methods"], list):
        raise ConfigError("methods: must be a list")
    methods = []
    for i, m in enumerate(d["methods"]):
        if isinstance(m, str):
            name, overrides = m, {}
        elif isinstance(m, dict):
            bad = set(m) - _METHOD_KEYS
            if bad:
                raise ConfigError(f"unknown key(s) in methods[{i}]: {', '.join(sorted(bad))}")
            name, overrides = m.get("name"), m.get("config") or {}
        else:
            raise ConfigError(f"methods[{i}]: must be a name or an object")
        methods.append((name, method_config(name, overrides)))
    try:
        return CampaignConfig(
            scenario=scenario,
            methods=methods,
            n_runs=int(d.get("n_runs", 100)),
            master_seed=int(d.get("master_seed", 0)),
            output_dir=str(d.get("output_dir", "sdtrack_out")),
            window=d.get("window"),
        )
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"config: {e}") from None


def serialize_campaign(cfg: CampaignConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def load_campaign(path) -> CampaignConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return parse_campaign(d)


# ------------------------------------------------------------ commands


def _snr_tag(snr: float) -> str:
    return f"{snr:g}dB"


def _resolve(args) -> tuple[CampaignConfig, Path]:
    cfg = load_campaign(args.config)
    if args.seed is not None:
        cfg = replace(cfg, master_seed=args.seed)
    if args.runs is not None:
        cfg = replace(cfg, n_runs=args.runs)
    out = args.out or os.environ.get(OUTPUT_ENV) or cfg.output_dir
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def cmd_simulate(args) -> int:
    cfg, out = _resolve(args)
    sc = cfg.scenario
    for snr in sc.snr_variants:
        scen = sc.with_snr(snr)
        d = out / "frames" / _snr_tag(snr)
        d.mkdir(parents=True, exist_ok=True)
        for i in range(cfg.n_runs):
            scene_rng, _ = run_streams(cfg.master_seed, i)
            truth, frames = simulate(scen, scene_rng)
            write_frames_csv(frames, d / f"run{i:04d}_frames.csv")
            write_truth_csv(truth, d / f"run{i:04d}_truth.csv")
    print(f"wrote {cfg.n_runs} run(s) x {len(sc.snr_variants)} SNR(s) of {sc.n_frames} frames to {out / 'frames'}")
    return 0


def _summary(series, window) -> tuple[float, float, float, float]:
    mask = series.window_mask(window)
    pd_in = float(series.pd[mask].mean()) if mask.any() else float("nan")
    pd_out = float(series.pd[~mask].mean()) if (~mask).any() else float("nan")
    rp = series.rmse_pos[mask]
    rv = series.rmse_vel[mask]
    rp_m = float(np.nanmean(rp)) if np.isfinite(rp).any() else float("nan")
    rv_m = float(np.nanmean(rv)) if np.isfinite(rv).any() else float("nan")
    return pd_in, pd_out, rp_m, rv_m


def cmd_run(args) -> int:
    cfg, out = _resolve(args)
    sc = cfg.scenario
    window = cfg.effective_window
    results = []
    for name, mcfg in cfg.methods:
        for snr in sc.snr_variants:
            scen = sc.with_snr(snr)
            recs = run_monte_carlo(scen, name, mcfg, cfg.n_runs, cfg.master_seed, jobs=args.jobs)
            results.append((name, snr, compute_metrics(recs, scen)))
    # writes happen after every campaign has finished
    for name, snr, series in results:
        write_metrics_csv(series, sc.name, name, snr, out / f"metrics_{name}_{_snr_tag(snr)}.csv")
    (out / "campaign.json").write_text(serialize_campaign(cfg))
    for name, snr, series in results:
        pd_in, pd_out, rp, rv = _summary(series, window)
        print(
            f"{name:7s} snr={snr:g}dB  mean_pd[{window[0]}-{window[1]}]={pd_in:.4f}  "
            f"outside={pd_out:.4f}  rmse_pos={rp:.4f}  rmse_vel={rv:.4f}"
        )
    return 0


def cmd_compare(args) -> int:
    a, meta_a = read_metrics_csv(args.metrics_a)
    b, meta_b = read_metrics_csv(args.metrics_b)
    if len(a.frames) != len(b.frames):
        raise ValueError(f"frame-count mismatch: {len(a.frames)} vs {len(b.frames)}")
    window = tuple(args.window) if args.window else (int(a.frames[0]), int(a.frames[-1]))
    report = compare(a, b, window)
    out = Path(args.out) if args.out else Path(args.metrics_a).with_name(
        f"compare_{Path(args.metrics_a).stem}_vs_{Path(args.metrics_b).stem}.csv"
    )
    out.parent.mkdir(parents=True, exist_ok=True)
    write_comparison_csv(report, out)
    la = f"{meta_a['method']}@{meta_a['snr_db']:g}dB"
    lb = f"{meta_b['method']}@{meta_b['snr_db']:g}dB"
    print(f"window {window[0]}-{window[1]}: a={la} b={lb}")
    print(f"{'metric':10s} {'mean_a':>10s} {'mean_b':>10s} {'delta':>10s}  a_dominates")
    for r in report.rows:
        print(f"{r.metric:10s} {r.mean_a:10.4f} {r.mean_b:10.4f} {r.delta:10.4f}  {'yes' if r.dominates else 'no'}")
    print(f"wrote {out}")
    return 0


REPORT_COLUMNS = ["scenario", "method", "snr_db", "window", "mean_pd", "mean_pd_outside", "mean_rmse_pos", "mean_rmse_vel"]


def cmd_report(args) -> int:
    if args.config:
        cfg, out = _resolve(args)
        window = cfg.effective_window
    else:
        out = Path(args.out or os.environ.get(OUTPUT_ENV) or "sdtrack_out")
        window = None
    if args.window:
        window = tuple(args.window)
    files = sorted(out.glob("metrics_*.csv"))
    if not files:
        raise FileNotFoundError(f"no metrics_*.csv files in {out}")
    rows = []
    for f in files:
        series, meta = read_metrics_csv(f)
        win = window or (int(series.frames[0]), int(series.frames[-1]))
        rows.append((meta, win, _summary(series, win)))
    rows.sort(key=lambda r: (r[0]["method"], r[0]["snr_db"]))
    path = out / "summary.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for meta, win, vals in rows:
            w.writerow([meta["scenario"], meta["method"], f"{meta['snr_db']:g}", f"{win[0]}-{win[1]}",
                        *(f"{v:.6f}" if np.isfinite(v) else "" for v in vals)])
    lines = [f"{'method':8s} {'snr':>6s} {'window':>7s} {'pd':>8s} {'pd_out':>8s} {'rmse_p':>8s} {'rmse_v':>8s}"]
    for meta, win, vals in rows:
        cells = " ".join(f"{v:8.4f}" if np.isfinite(v) else f"{'-':>8s}" for v in vals)
        lines.append(f"{meta['method']:8s} {meta['snr_db']:6g} {win[0]:>3d}-{win[1]:<3d} {cells}")
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text)
    sys.stdout.write(text)
    return 0


# ------------------------------------------------------------ argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, config_required: bool = True):
    p.add_argument("--config", required=config_required, help="campaign JSON file")
    p.add_argument("--seed", type=int, help="master seed (overrides config)")
    p.add_argument("--runs", type=int, help="Monte Carlo runs (overrides config)")
    p.add_argument("--out", help=f"output directory (overrides config and ${OUTPUT_ENV})")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="sdtrack", description="Low-SNR detection and tracking campaigns.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("simulate", help="write truth and frame CSVs")
    _common(p)
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("run", help="run methods and write metric CSVs")
    _common(p)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("compare", help="compare two metric CSVs over a window")
    p.add_argument("metrics_a")
    p.add_argument("metrics_b")
    p.add_argument("--window", type=int, nargs=2, metavar=("START", "END"))
    p.add_argument("--out", help="comparison CSV path")
    p.set_defaults(func=cmd_compare)
    p = sub.add_parser("report", help="summarise the metric CSVs of an output directory")
    _common(p, config_required=False)
    p.add_argument("--window", type=int, nargs=2, metavar=("START", "END"))
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # usage errors and --help
        return int(e.code or 0)
    if getattr(args, "runs", None) is not None and args.runs < 1:
        print("sdtrack: error: --runs must be >= 1", file=sys.stderr)
        return 1
    if getattr(args, "jobs", 1) < 1:
        print("sdtrack: error: --jobs must be >= 1", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"sdtrack: config error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        name = f" {e.filename}" if getattr(e, "filename", None) else ""
        print(f"sdtrack: I/O error:{name} {e.strerror or e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        print(f"sdtrack: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
