"""Command-line entry point: train, eval, sweep, gradcheck, gen-data, report.

Exit codes: 0 success, 1 partial sweep failure, 2 config or input error,
3 numeric divergence, 4 gradient-check failure.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .config import ConfigError, build_parts, load_config
from .data import DataFormatError, generate_synthetic, save_csv, write_sidecar
from .encoder import EncoderSpec, load_checkpoint, save_checkpoint, spec_to_dict
from .gradcheck import run_suite
from .train import Divergence, evaluate_model, load_splits, train

log = logging.getLogger("introspective")

EXIT_OK, EXIT_SWEEP, EXIT_CONFIG, EXIT_DIVERGED, EXIT_GRADCHECK = 0, 1, 2, 3, 4

CHECKPOINT = "checkpoint.bin"
TRAIN_LOG = "train_log.jsonl"
METRICS = "metrics.txt"
SWEEP_GRID = "sweep_grid.csv"
HISTOGRAM = "uncertainty_hist.csv"
GRADCHECK = "gradcheck.txt"


def _fmt(v) -> str:
    # repr round-trips every float exactly
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="introspective",
                                 description="Uncertainty-aware metric learning toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=_seed, help="overrides the config seed")
        p.add_argument("--out", default=".", help="output directory (default: .)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted config override, value parsed as JSON; repeatable")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("train", help="train an encoder, log per-epoch records"))
    ev = common(sub.add_parser("eval", help="evaluate a checkpoint on the test split"))
    ev.add_argument("--checkpoint", help=f"checkpoint path (default: OUT/{CHECKPOINT})")
    ev.add_argument("--mode", choices=("euclidean", "ism"), help="overrides eval.mode")
    sw = common(sub.add_parser("sweep", help="train+eval over a (gamma, tau) grid"))
    sw.add_argument("--gammas", help="comma-separated gamma values")
    sw.add_argument("--taus", help="comma-separated tau values")
    sw.add_argument("--workers", type=int, help="parallel cell processes")
    gc = common(sub.add_parser("gradcheck", help="finite-difference gradient suite"))
    gc.add_argument("--metric-cases", type=int, default=400)
    gc.add_argument("--loss-cases", type=int, default=40)
    gc.add_argument("--encoder-cases", type=int, default=8)
    gc.add_argument("--tol", type=float, default=1e-5)
    gc.add_argument("--inject-sign-bug", action="store_true", help=argparse.SUPPRESS)
    common(sub.add_parser("gen-data", help="write the configured synthetic set as CSV"))
    rp = common(sub.add_parser("report", help="summarize a training log and metrics"))
    rp.add_argument("--every", type=int, default=10, help="epoch stride of the curve table")
    return ap


def _load(args, extra=()):
    return load_config(args.config, list(args.set) + list(extra), args.seed)


def _write_lines(path, lines):
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _checkpoint_meta(cfg, result, epoch):
    meta = {"encoder": spec_to_dict(result.spec), "config": cfg, "epoch": epoch}
    if result.proxy_labels is not None:
        meta["proxy_labels"] = [ls.to_text() for ls in result.proxy_labels]
    return meta


def run_train(cfg, out) -> int:
    os.makedirs(out, exist_ok=True)
    ckpt = os.path.join(out, CHECKPOINT)
    tmp = ckpt + ".tmp"
    log_path = os.path.join(out, TRAIN_LOG)

    def save(result, epoch):
        save_checkpoint(tmp, result.params, _checkpoint_meta(cfg, result, epoch), result.state)
        os.replace(tmp, ckpt)

    with open(log_path, "w", encoding="utf-8") as fh:
        def on_epoch(record, result):
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()
            save(result, record["epoch"])

        try:
            train(cfg, on_epoch=on_epoch, on_start=lambda r: save(r, 0))
        except (Divergence, FloatingPointError) as exc:
            print(f"error: training diverged ({exc}); last good checkpoint kept at {ckpt}",
                  file=sys.stderr)
            return EXIT_DIVERGED
    print(f"wrote {ckpt} and {log_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _metric_lines(mode, metrics, report):
    lines = [f"mode={mode}"]
    lines += [f"{k}={_fmt(v)}" for k, v in metrics.items()]
    for group in ("original", "mixed"):
        g = report[group]
        lines += [f"u_{group}_count={g['count']}", f"u_{group}_mean={_fmt(g['mean'])}",
                  f"u_{group}_median={_fmt(g['median'])}"]
    return lines


def _histogram_lines(report):
    edges = report["edges"]
    lines = ["bin_lo,bin_hi,original,mixed"]
    for k in range(len(edges) - 1):
        hi = "inf" if k == len(edges) - 2 else _fmt(edges[k + 1])
        lines.append(f"{_fmt(edges[k])},{hi},{report['original']['histogram'][k]},"
                     f"{report['mixed']['histogram'][k]}")
    return lines


def run_eval(cfg, out, checkpoint=None, mode=None) -> int:
    path = checkpoint or os.path.join(out, CHECKPOINT)
    if not os.path.isfile(path):
        print(f"error: checkpoint {path} not found", file=sys.stderr)
        return EXIT_CONFIG
    try:
        params, meta, _ = load_checkpoint(path)
        spec = EncoderSpec(**meta["encoder"])
    except (ValueError, KeyError, TypeError) as exc:
        print(f"error: cannot load checkpoint {path}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _, test_set = load_splits(cfg)
    if len(test_set) < 2:
        print("error: test split needs at least 2 samples", file=sys.stderr)
        return EXIT_CONFIG
    if test_set.features.shape[1] != spec.input_dim:
        print(f"error: checkpoint expects {spec.input_dim} features, data has "
              f"{test_set.features.shape[1]}", file=sys.stderr)
        return EXIT_CONFIG
    mode = mode or cfg["eval"]["mode"]
    try:
        metrics, report, _ = evaluate_model(cfg, spec, params, test_set, mode)
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    os.makedirs(out, exist_ok=True)
    lines = _metric_lines(mode, metrics, report)
    _write_lines(os.path.join(out, METRICS), lines)
    _write_lines(os.path.join(out, HISTOGRAM), _histogram_lines(report))
    print("\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def sweep_cell(cfg, gamma, tau):
    """Train and evaluate one grid cell; returns a result row dict."""
    cell = copy.deepcopy(cfg)
    cell["metric"]["gamma"] = float(gamma)
    cell["metric"]["tau"] = float(tau)
    row = {"gamma": float(gamma), "tau": float(tau)}
    try:
        train_set, test_set = load_splits(cell)
        result = train(cell, train_set)
        metrics, _, _ = evaluate_model(cell, result.spec, result.params, test_set)
    except Exception as exc:  # a failed cell is recorded, the sweep goes on
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        return row
    row.update(status="ok", error="", **metrics)
    return row


def run_sweep(cfg, out, workers=1) -> int:
    cells = [(g, t) for g in cfg["sweep"]["gammas"] for t in cfg["sweep"]["taus"]]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(sweep_cell, [cfg] * len(cells), *zip(*cells)))
    else:
        rows = [sweep_cell(cfg, g, t) for g, t in cells]
    keys = [f"recall@{k}" for k in cfg["eval"]["ks"]] + ["nmi", "r_precision", "map_at_r"]
    lines = [",".join(["gamma", "tau", "status"] + keys + ["error"])]
    for row in rows:
        vals = [_fmt(row[k]) if row["status"] == "ok" else "" for k in keys]
        err = row["error"].replace(",", ";").replace("\n", " ")
        lines.append(",".join([_fmt(row["gamma"]), _fmt(row["tau"]), row["status"]] + vals + [err]))
    os.makedirs(out, exist_ok=True)
    _write_lines(os.path.join(out, SWEEP_GRID), lines)
    print("\n".join(lines))
    failed = sum(r["status"] != "ok" for r in rows)
    if failed:
        print(f"error: {failed} of {len(rows)} sweep cells failed", file=sys.stderr)
        return EXIT_SWEEP
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck, gen-data, report
# ---------------------------------------------------------------------------

def run_gradcheck(cfg, out, metric_cases=400, loss_cases=40, encoder_cases=8, tol=1e-5,
                  inject_sign_bug=False) -> int:
    results, seconds = run_suite(int(cfg["seed"]), metric_cases, loss_cases, encoder_cases,
                                 inject_sign_bug=inject_sign_bug, tol=tol)
    lines = []
    section = None
    for r in results:
        head = r.name.split("/")[0]
        if head != section:
            section = head
            lines.append(f"[{section}]")
        flag = "ok" if r.passed else "FAIL"
        lines.append(f"{r.name} cases={r.cases} max_rel_error={r.max_rel_error:.3e} "
                     f"tol={r.tol:.0e} {flag}")
    total = sum(r.cases for r in results)
    lines.append(f"total_cases={total} seconds={seconds:.1f}")
    os.makedirs(out, exist_ok=True)
    _write_lines(os.path.join(out, GRADCHECK), lines)
    print("\n".join(lines))
    bad = [r for r in results if not r.passed]
    if bad:
        worst = max(bad, key=lambda r: r.max_rel_error / r.tol)
        print(f"error: gradient check failed; worst {worst.name} case {worst.worst_case} "
              f"rel error {worst.max_rel_error:.3e} > {worst.tol:.0e}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def run_gen_data(cfg, out) -> int:
    ds = generate_synthetic(build_parts(cfg)["synthetic"])
    os.makedirs(out, exist_ok=True)
    csv_path = os.path.join(out, "data.csv")
    save_csv(ds, csv_path)
    write_sidecar(ds, os.path.join(out, "data.json"))
    print(f"wrote {len(ds)} rows to {csv_path}")
    return EXIT_OK


def run_report(out, every=10) -> int:
    log_path = os.path.join(out, TRAIN_LOG)
    if not os.path.isfile(log_path):
        print(f"error: no training log at {log_path}", file=sys.stderr)
        return EXIT_CONFIG
    with open(log_path, encoding="utf-8") as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    if not records:
        print(f"error: training log {log_path} is empty", file=sys.stderr)
        return EXIT_CONFIG
    print(f"{'epoch':>5} {'loss':>10} {'u_orig':>8} {'u_mixed':>8} {'u_blend':>8} {'clamps':>6}")
    for r in records:
        if r["epoch"] % every == 0 or r is records[0] or r is records[-1]:
            print(f"{r['epoch']:>5} {r['loss']:>10.5f} {r['u_norm_original']:>8.4f} "
                  f"{r['u_norm_mixed']:>8.4f} {r['u_norm_blended']:>8.4f} {r['clamp_events']:>6}")
    metrics_path = os.path.join(out, METRICS)
    if os.path.isfile(metrics_path):
        with open(metrics_path, encoding="utf-8") as fh:
            print(fh.read().rstrip())
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        extra = []
        if args.command == "sweep":
            if args.gammas is not None:
                extra.append(f"sweep.gammas={json.dumps(_floats(args.gammas))}")
            if args.taus is not None:
                extra.append(f"sweep.taus={json.dumps(_floats(args.taus))}")
            if args.workers is not None:
                extra.append(f"sweep.workers={args.workers}")
        cfg = _load(args, extra)
        if args.command == "train":
            return run_train(cfg, args.out)
        if args.command == "eval":
            return run_eval(cfg, args.out, args.checkpoint, args.mode)
        if args.command == "sweep":
            return run_sweep(cfg, args.out, int(cfg["sweep"]["workers"]))
        if args.command == "gradcheck":
            return run_gradcheck(cfg, args.out, args.metric_cases, args.loss_cases,
                                 args.encoder_cases, args.tol, args.inject_sign_bug)
        if args.command == "gen-data":
            return run_gen_data(cfg, args.out)
        return run_report(args.out, args.every)
    except (ConfigError, DataFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
