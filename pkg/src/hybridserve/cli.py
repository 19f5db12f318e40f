"""Command-line front end: traces, calibration, runs, ablations, planning, reports."""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from typing import Optional

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, dumps, load_config
from .costmodel import CalibrationError, calibrate, load_profile, residuals
from .predictor import InsufficientHistory, bound_from_series
from .simengine import (
    RUNGS,
    EngineConfigError,
    ExhaustedLadder,
    default_ladder,
    estimate_offline_throughput,
    plan_capacity,
    run,
)
from .workload import GenerationError, dump_trace, summarize

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_INFEASIBLE = 0, 2, 3, 4


class InputError(ValueError):
    """Bad input file other than the config (exit status 2)."""


# --------------------------------------------------------------------------
# io helpers


def write_atomic(path: str, text: str) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(x) for x in row])
    return buf.getvalue()


def _cell(x):
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(round(x, 9))
    return x


def _out_dir(args, default: Optional[str] = None) -> Optional[str]:
    return args.out if args.out is not None else default


def _load(args) -> ExperimentConfig:
    return load_config(args.config, tuple(args.set or ()), args.seed)


# --------------------------------------------------------------------------
# simulation runs


def simulate(cfg: ExperimentConfig):
    return run(cfg.online.events(), cfg.offline.events(), cfg.engine)


def admissions_csv(metrics) -> str:
    return _csv(metrics.offline_admissions, ["clock_s", "hit_tokens", "prompt_len"])


def write_run(out: str, cfg: ExperimentConfig, metrics) -> None:
    write_atomic(os.path.join(out, "iterations.csv"), metrics.iterations_csv())
    write_atomic(os.path.join(out, "requests.jsonl"), metrics.requests_jsonl())
    write_atomic(os.path.join(out, "admissions.csv"), admissions_csv(metrics))
    write_atomic(os.path.join(out, "config.json"), dumps(cfg.document))
    write_atomic(
        os.path.join(out, "summary.json"),
        metrics.summary_json({"rung": cfg.rung, "config": cfg.document}),
    )


def summary_line(label: str, metrics) -> str:
    s = metrics.summary()
    return (
        f"{label}: throughput={s['throughput_tok_s']:.1f} tok/s "
        f"hit_ratio={s['hit_ratio']:.3f} attainment={s['attainment']:.3f} "
        f"objective={s['eq3_value']:.1f} online={s['online_requests']} "
        f"offline={s['offline_requests']} iterations={s['iterations']}"
    )


def cmd_run(args) -> int:
    cfg = _load(args)
    metrics = simulate(cfg)
    out = _out_dir(args)
    if out is not None:
        write_run(out, cfg, metrics)
    print(summary_line(cfg.rung or "custom", metrics))
    return EXIT_OK


def _ablation_job(doc: dict) -> tuple:
    cfg = ExperimentConfig.from_document(doc)
    m = simulate(cfg)
    return cfg.rung, m.summary()


def ablation_rows(results: dict) -> list:
    base = results["BS"]["throughput_tok_s"]
    rows = []
    for rung in RUNGS:
        s = results[rung]
        speedup = s["throughput_tok_s"] / base if base > 0 else math.nan
        rows.append((rung, s["throughput_tok_s"], speedup, s["attainment"], s["hit_ratio"]))
    return rows


def cmd_ablation(args) -> int:
    cfg = _load(args)
    docs = [cfg.with_rung(r).document for r in RUNGS]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = dict(pool.map(_ablation_job, docs))
    else:
        results = dict(map(_ablation_job, docs))
    rows = ablation_rows(results)
    print(f"{'rung':<8} {'throughput':>12} {'speedup':>8} {'attainment':>10} {'hit_ratio':>9}")
    for rung, tput, speedup, att, hit in rows:
        print(f"{rung:<8} {tput:>12.1f} {speedup:>8.3f} {att:>10.3f} {hit:>9.3f}")
    out = _out_dir(args)
    if out is not None:
        header = ["rung", "throughput_tok_s", "speedup_vs_bs", "attainment", "hit_ratio"]
        write_atomic(os.path.join(out, "ablation.csv"), _csv(rows, header))
        body = {"config": cfg.document, "rungs": {r: results[r] for r in RUNGS}}
        write_atomic(os.path.join(out, "ablation.json"), dumps(body))
    return EXIT_OK


# --------------------------------------------------------------------------
# planning


def cmd_plan(args) -> int:
    overrides = list(args.set or ())
    if args.trace is not None:
        overrides.append(("workload.online", {"trace": os.path.abspath(args.trace)}))
    for flag, key in (("ttft", "slo.ttft"), ("tpot", "slo.tpot"), ("target", "slo.attainment_target")):
        if getattr(args, flag) is not None:
            overrides.append((key, getattr(args, flag)))
    cfg = load_config(args.config, tuple(overrides), args.seed)
    p = cfg.document["plan"]
    ladder = default_ladder(p["capacities"], p["base_capacity"], tuple(p["speeds"]))
    online = cfg.online.events()
    report = {"config": cfg.document}
    try:
        plan = plan_capacity(online, cfg.engine.slo, cfg.engine, ladder, p["window_s"])
    except ExhaustedLadder as exc:
        best = exc.best
        print(f"infeasible: {exc}")
        if best is not None:
            print(
                f"best-effort rung {best.index}: capacity={best.capacity_tokens} "
                f"speed={best.speed} attainment={best.attainment:.3f}"
            )
            report["best_effort"] = vars(best)
        report["feasible"] = False
        if args.out is not None:
            write_atomic(os.path.join(args.out, "plan.json"), dumps(report))
        return EXIT_INFEASIBLE
    ch = plan.chosen
    eng = cfg.engine
    at_rung = replace(
        eng,
        capacity_tokens=ch.capacity_tokens,
        params_true=eng.params_true.scaled(ch.speed),
        params_est=eng.estimator.scaled(ch.speed),
    )
    tput = estimate_offline_throughput(at_rung, online, cfg.offline.events())
    print(
        f"chosen rung {ch.index}: capacity={ch.capacity_tokens} speed={ch.speed} "
        f"attainment={ch.attainment:.3f} peak_window_start={plan.window_start_s:.1f}s "
        f"peak_requests={plan.window_requests} offline_throughput={tput:.1f} tok/s"
    )
    report.update(
        feasible=True,
        chosen=vars(ch),
        tried=[vars(r) for r in plan.tried],
        window_start_s=plan.window_start_s,
        window_requests=plan.window_requests,
        offline_throughput_tok_s=tput,
    )
    if args.out is not None:
        write_atomic(os.path.join(args.out, "plan.json"), dumps(report))
    return EXIT_OK


# --------------------------------------------------------------------------
# traces and calibration


def cmd_generate(args) -> int:
    cfg = _load(args)
    which = ("online", "offline") if args.which == "both" else (args.which,)
    out = _out_dir(args, ".")
    for name in which:
        try:
            events = getattr(cfg, name).events()
        except GenerationError as exc:
            raise ConfigError(f"workload.{name}: {exc}") from None
        path = os.path.join(out, f"{name}.jsonl")
        write_atomic(path, dump_trace(events))
        s = summarize(events)
        print(
            f"{name}: {path} count={s['count']} rate={s['rate']:.3f}/s "
            f"mean_prompt={s['mean_prompt']:.1f} share_rate={s['share_rate']:.3f}"
        )
    return EXIT_OK


def cmd_calibrate(args) -> int:
    try:
        with open(args.profile, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise InputError(f"cannot read profile {args.profile}: {exc.strerror}") from None
    try:
        samples = load_profile(text)
        params = calibrate(samples)
    except CalibrationError as exc:
        raise InputError(f"{args.profile}: {exc}") from None
    for regime, rms in sorted(residuals(samples, params).items()):
        print(f"{regime}: rms_relative_residual={rms:.5f}")
    body = json.dumps(params.to_json(), sort_keys=True, indent=2) + "\n"
    out = _out_dir(args)
    if out is not None:
        path = os.path.join(out, "params.json")
        write_atomic(path, body)
        print(f"wrote {path}")
    else:
        sys.stdout.write(body)
    return EXIT_OK


# --------------------------------------------------------------------------
# reports


def _read_run(run_dir: str) -> tuple:
    def need(name):
        path = os.path.join(run_dir, name)
        if not os.path.exists(path):
            raise InputError(f"run directory {run_dir} lacks {name}")
        with open(path, "r", encoding="utf-8") as fh:
            return fh.read()

    iters = list(csv.DictReader(io.StringIO(need("iterations.csv"))))
    reqs = [json.loads(line) for line in need("requests.jsonl").splitlines() if line.strip()]
    adm = list(csv.DictReader(io.StringIO(need("admissions.csv"))))
    summary = json.loads(need("summary.json"))
    return iters, reqs, adm, summary


def _bins(end: float, width: float) -> int:
    return max(int(math.ceil(end / width)), 1)


def memory_rows(iters) -> list:
    rows = []
    for it in iters:
        occ, onf, off = int(it["occupied"]), int(it["online_free"]), int(it["offline_free"])
        rows.append((float(it["clock_s"]), occ, onf, off))
    return rows


def activity_rows(iters, width: float) -> list:
    """Time-weighted mean active counts per bin."""
    if not iters:
        return []
    clock = np.array([float(it["clock_s"]) for it in iters])
    dt = np.array([float(it["time_s"]) for it in iters])
    on = np.array([float(it["active_online"]) for it in iters])
    off = np.array([float(it["active_offline"]) for it in iters])
    idx = np.floor(clock / width).astype(int)
    rows = []
    for b in range(idx.max() + 1):
        k = idx == b
        w = dt[k].sum()
        if not k.any() or w <= 0:
            continue
        rows.append((b * width, float(on[k] @ dt[k] / w), float(off[k] @ dt[k] / w)))
    return rows


def hit_rows(adm, width: float) -> list:
    acc = {}
    for a in adm:
        b = int(float(a["clock_s"]) // width)
        h, n = acc.get(b, (0, 0))
        acc[b] = (h + min(int(a["hit_tokens"]), int(a["prompt_len"])), n + int(a["prompt_len"]))
    return [(b * width, h / n if n else math.nan, n) for b, (h, n) in sorted(acc.items())]


def latency_rows(reqs) -> list:
    rows = []
    for metric in ("ttft_s", "mean_tpot_s"):
        vals = sorted(r[metric] for r in reqs if r["kind"] == "online" and r[metric] is not None)
        n = len(vals)
        rows.extend((metric, v, (i + 1) / n) for i, v in enumerate(vals))
    return rows


def predicted_rows(reqs, width: float, history: int, k: float) -> list:
    """Per-bin online arrival rate against the mean + k*std forecast from prior bins."""
    ts = [r["arrival_s"] for r in reqs if r["kind"] == "online"]
    if not ts:
        return []
    counts = np.bincount(np.floor(np.array(ts) / width).astype(int), minlength=_bins(max(ts), width))
    rates = counts / width
    rows = []
    for b, rate in enumerate(rates):
        past = rates[max(0, b - history) : b]
        try:
            fc = bound_from_series(past, k)
            mu, sigma, bound = fc.mu, fc.sigma, fc.bound
        except InsufficientHistory:
            mu = sigma = bound = math.nan
        rows.append((b * width, float(rate), mu, sigma, bound))
    return rows


def cmd_report(args) -> int:
    iters, reqs, adm, summary = _read_run(args.run_dir)
    rep = summary.get("config", {}).get("report", {})
    width = args.bin_s if args.bin_s is not None else rep.get("bin_s", 60.0)
    history = rep.get("history_bins", 15)
    k = rep.get("k", 2.0)
    if not width > 0:
        raise ConfigError("report.bin_s: must be positive")
    out = _out_dir(args, os.path.join(args.run_dir, "report"))
    files = {
        "memory.csv": (memory_rows(iters), ["clock_s", "occupied", "online_free", "offline_free"]),
        "activity.csv": (activity_rows(iters, width), ["bin_start_s", "active_online", "active_offline"]),
        "hit_ratio.csv": (hit_rows(adm, width), ["bin_start_s", "hit_ratio", "prompt_tokens"]),
        "latency_cdf.csv": (latency_rows(reqs), ["metric", "value_s", "quantile"]),
        "predicted_trace.csv": (
            predicted_rows(reqs, width, history, k),
            ["bin_start_s", "arrival_rate", "mu", "sigma", "bound"],
        ),
    }
    for name, (rows, header) in files.items():
        write_atomic(os.path.join(out, name), _csv(rows, header))
        print(f"wrote {os.path.join(out, name)} ({len(rows)} rows)")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument(
        "--set", action="append", metavar="KEY=VALUE", help="dotted override, value parsed as JSON"
    )

    parser = argparse.ArgumentParser(
        prog="hybridserve", description="Online/offline LLM co-scheduling simulator."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write synthetic traces")
    p.add_argument("--which", choices=("online", "offline", "both"), default="both")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("calibrate", parents=[common], help="fit cost-model coefficients")
    p.add_argument("profile", help="JSON Lines profile samples")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("run", parents=[common], help="simulate one configuration")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablation", parents=[common], help="run the four-rung ladder")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("plan", parents=[common], help="capacity planning")
    p.add_argument("trace", nargs="?", help="online trace; defaults to the config workload")
    p.add_argument("--ttft", type=float)
    p.add_argument("--tpot", type=float)
    p.add_argument("--target", type=float, help="attainment target")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("report", parents=[common], help="plot-ready CSVs from a run directory")
    p.add_argument("run_dir")
    p.add_argument("--bin-s", type=float, dest="bin_s")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InputError, EngineConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ExhaustedLadder as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (RuntimeError, ValueError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
