"""Command-line entry point: ``run``, ``gradcheck``, ``cost`` and ``bias-lab``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 failed check.  ``UBSMOE_OUT`` sets the default output directory of ``run``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import biaslab, costmodel, gradcheck
from .config import RunConfig, override, parse_config
from .federation import NumericalError, run_federated
from .metrics import RoundMetrics
from .numerics import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4
GRADCHECK_TOL = 1e-5
OUT_ENV = "UBSMOE_OUT"

log = logging.getLogger("ubsmoe")


def _fmt(v: float) -> str:
    """Shortest round-tripping decimal; ``nan`` for undefined values."""
    v = float(v)
    return "nan" if np.isnan(v) else repr(v)


def metrics_header(cfg: RunConfig) -> list[str]:
    tiers = sorted(set(cfg.client_budgets()))
    return (
        ["round"]
        + [f"loss_b{_fmt(b)}" for b in tiers]
        + ["train_loss"]
        + [f"entropy_l{j}" for j in range(cfg.dims.layers)]
        + ["entropy_mean", "gini_mean", "pearson_r"]
    )


def metrics_row(m: RoundMetrics) -> list[str]:
    return (
        [str(m.round)]
        + [_fmt(m.tier_loss[b]) for b in sorted(m.tier_loss)]
        + [_fmt(m.train_loss)]
        + [_fmt(e) for e in m.layer_entropy]
        + [_fmt(m.entropy_mean), _fmt(m.gini_mean), _fmt(m.pearson_r)]
    )


def write_metrics(path: Path, cfg: RunConfig, rows: list[RoundMetrics]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(metrics_header(cfg))
        for m in rows:
            w.writerow(metrics_row(m))


def _json_float(v: float):
    return None if np.isnan(v) else float(v)


def _load_config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else parse_config("{}")
    if args.set:
        cfg = override(cfg, args.set)
    return cfg


def cmd_run(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out or cfg.out_dir or os.environ.get(OUT_ENV) or "runs/latest")
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    with np.errstate(over="ignore", invalid="ignore"):  # non-finite losses are caught explicitly
        result = run_federated(cfg)
    wall = time.perf_counter() - t0
    write_metrics(out / "metrics.csv", cfg, result.metrics)
    final = result.metrics[-1] if result.metrics else None
    summary = {
        "seed": cfg.seed,
        "wall_time_s": wall,
        "config": cfg.to_dict(),
        "final": None
        if final is None
        else {
            "round": final.round,
            "train_loss": final.train_loss,
            "tier_loss": {_fmt(b): v for b, v in final.tier_loss.items()},
            "layer_entropy": final.layer_entropy,
            "entropy_mean": final.entropy_mean,
            "layer_gini": final.layer_gini,
            "gini_mean": final.gini_mean,
            "pearson_r": _json_float(final.pearson_r),
        },
        "k_bar": result.state.k_bar,
        "max_gate_sum_error": result.gate_sum_error,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {out / 'metrics.csv'} and {out / 'summary.json'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    max_dim, max_experts, max_rank = 8, 6, 3
    if args.config:
        cfg = parse_config(args.config)
        max_dim = max(cfg.dims.d, cfg.dims.l)
        max_experts, max_rank = cfg.dims.experts, cfg.dims.rank
    worst = {k: 0.0 for k in gradcheck.GROUPS}
    for p, x, up, k_c, n_p in gradcheck.random_suite(args.cases, args.seed, max_dim, max_experts, max_rank):
        for k, v in gradcheck.check_layer(p, x, up, k_c, n_p, h=args.step).items():
            worst[k] = max(worst[k], v)
    failed = False
    for k, v in worst.items():
        ok = v < GRADCHECK_TOL
        failed |= not ok
        print(f"{k:<10} max_rel_err={v:.3e} {'ok' if ok else 'FAIL'}")
    return EXIT_CHECK if failed else EXIT_OK


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t]


def _float_list(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t]


def cmd_cost(args) -> int:
    dims = costmodel.ModelDims(
        d=args.d, l=args.l, L_layers=args.layers, M=args.experts, r=args.rank, gamma=args.gamma,
        batch=args.batch, clients=args.clients, seq_len=args.seq_len,
    )
    budgets, ks, ranks = _float_list(args.budgets), _int_list(args.k_values), _int_list(args.ranks)
    if not len(budgets) == len(ks) == len(ranks):
        raise ConfigError("--budgets, --k-values and --ranks need the same length")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "budget", "client_flops", "server_flops", "upload_params", "download_params"])
    for row in costmodel.report(dims, budgets, ks, ranks):
        w.writerow([row.method, _fmt(row.budget), _fmt(row.client_flops), _fmt(row.server_flops),
                    _fmt(row.upload_params), _fmt(row.download_params)])
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_bias_lab(args) -> int:
    ks = _int_list(args.k_values)
    if any(not 1 <= k <= args.experts for k in ks):
        raise ConfigError(f"every K must lie in [1, {args.experts}]")
    obj = biaslab.floor_objective(args.experts, args.dim, args.seed)
    floors = biaslab.run_floor_experiment(obj, ks, steps=args.steps, seed=args.seed, imbalanced=args.imbalanced)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["K", "p_hash", "lower_bound", "exact_bias", "upper_bound", "plateau_gap"])
    diverged = False
    for k in ks:
        o = biaslab.with_probe_sparsity(obj, k, args.imbalanced)
        # bias of the sparse probe client, measured at the global optimum
        rep = biaslab.bias_report(o, o.optimum())
        res = floors[k]
        diverged |= res["diverged"]
        w.writerow([k, biaslab.probs_hash(o.probs), _fmt(rep.lower[1]), _fmt(rep.client_bias_sq[1]),
                    _fmt(rep.upper[1]), _fmt(res["plateau_gap"])])
    sys.stdout.write(buf.getvalue())
    if diverged:
        log.error("biased SGD diverged for at least one K")
        return EXIT_NUMERIC
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ubsmoe", description="Federated SMoE simulator with modulated routing and pseudo-gradients.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-round progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a federated simulation and write metrics.csv and summary.json")
    p.add_argument("--config", help="JSON file or inline JSON object (omitted fields take defaults)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a scalar field, e.g. dims.experts=16")
    p.add_argument("--out", help=f"output directory (default: config out_dir, ${OUT_ENV}, or runs/latest)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gradcheck", help="finite-difference check of the SMoE backward pass")
    p.add_argument("--config", help="take the size limits from this config's dims")
    p.add_argument("--cases", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-6)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("cost", help="print the analytic cost table as CSV")
    p.add_argument("--d", type=int, default=2048)
    p.add_argument("--l", type=int, default=2048)
    p.add_argument("--layers", type=int, default=16)
    p.add_argument("--experts", type=int, default=64)
    p.add_argument("--rank", type=int, default=20)
    p.add_argument("--gamma", type=int, default=1)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--clients", type=int, default=8)
    p.add_argument("--seq-len", type=int, default=256)
    p.add_argument("--budgets", default="0.125,0.25,0.5,1.0")
    p.add_argument("--k-values", default="1,2,4,8")
    p.add_argument("--ranks", default="6,8,12,20")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("bias-lab", help="sparse-gradient bias and error-floor table as CSV")
    p.add_argument("--experts", type=int, default=4)
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--k-values", default="1,2,4")
    p.add_argument("--steps", type=int, default=4000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--imbalanced", action="store_true", help="use the maximally imbalanced activation profile")
    p.set_defaults(func=cmd_bias_lab)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"invalid argument: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
