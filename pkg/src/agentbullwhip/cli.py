"""``agentbullwhip`` command-line entry point.

Exit codes: 0 success, 2 config error, 3 runtime error, 4 remote-agent
failure budget exceeded.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from .config import ConfigError
from .grpo import (CategoricalOrderPolicy, evaluate, load_checkpoint, save_checkpoint, train,
                   write_train_log)
from .lab import (FailureBudgetExceeded, InsufficientSamples, bullwhip_metrics, check_bounds,
                  decompose_variance, run_ensemble, run_to_run_variance, simulate,
                  stationary_run_variance, write_bound_checks, write_boxplot, write_classical,
                  write_decomposition, write_demand, write_manifest, write_metrics, write_trajectories,
                  write_window)
from .linear import GainProfile, bound_table, bound_table_csv

log = logging.getLogger("agentbullwhip")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_REMOTE = 0, 2, 3, 4


def _outdir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(out: Path, command: str, cfg: dict, seed: int, **extra) -> None:
    write_manifest(out / "manifest.json", schema=cfgmod.MANIFEST_SCHEMA, command=command, version=__version__,
                   config_hash=cfgmod.config_hash(cfg), seed=seed, config=cfg, **extra)


def _load(args) -> tuple[dict, Path]:
    cfg = cfgmod.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "horizon", None) is not None:
        cfg["horizon"] = args.horizon
    # re-validate after scalar overrides
    cfg = cfgmod.normalize(cfg)
    return cfg, Path(args.config).resolve().parent


def _ensemble_outputs(out: Path, rec, burn_in: int, tau: float) -> None:
    write_trajectories(rec, out / "trajectories.csv")
    write_demand(rec, out / "demand.csv")
    write_boxplot(rec.orders, out / "boxplot.csv")
    if rec.R >= 2:
        sigma2 = run_to_run_variance(rec)
        m = bullwhip_metrics(sigma2, tau, rec.orders)
        write_metrics(m, out / "metrics.csv")
        write_classical(m, rec.run_ids, out / "classical.csv")
        burn = min(burn_in, rec.horizon - 1)
        if rec.R >= 3:
            rows = [("window", "tier", "start", "stop", "sigma2", "se")]
            for label, start in (("whole", 0), ("post_burn_in", burn)):
                w = stationary_run_variance(rec, start)
                rows += [(label, k, w.start + 1, w.stop, repr(float(w.estimate[k])), repr(float(w.se[k])))
                         for k in range(len(w.estimate))]
            with open(out / "window_variance.csv", "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerows(rows)


def cmd_simulate(args) -> int:
    cfg, base = _load(args)
    scenario = cfgmod.build_scenario(cfg, base)
    rec = simulate(scenario, cfg["seed"])
    out = _outdir(args.output)
    write_trajectories(rec, out / "trajectories.csv")
    write_demand(rec, out / "demand.csv")
    _manifest(out, "simulate", cfg, cfg["seed"], runs=1, protocol_failures=rec.protocol_failures)
    print(f"simulated {rec.n_tiers} tiers x {rec.horizon} periods; total cost {rec.total_costs[0]:.2f}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    chunks = []
    first = True
    for theta in args.theta:
        for lam in args.lam:
            try:
                gains = GainProfile.uniform(theta, lam, args.tiers)
            except ValueError as err:
                raise ConfigError(str(err), "<flags>", field="theta/lam") from None
            rows = bound_table(gains, args.demand_var, [args.shock_var] * args.tiers)
            text = bound_table_csv(rows, {"theta": theta, "lam": lam})
            chunks.append(text if first else text.split("\n", 1)[1])
            first = False
    table = "".join(chunks)
    if args.output:
        out = _outdir(args.output)
        (out / "bounds.csv").write_text(table)
        write_manifest(out / "manifest.json", schema=cfgmod.MANIFEST_SCHEMA, command="analyze", version=__version__,
                       theta=args.theta, lam=args.lam, tiers=args.tiers, demand_var=args.demand_var,
                       shock_var=args.shock_var)
    else:
        sys.stdout.write(table)
    return EXIT_OK


def cmd_ensemble(args) -> int:
    cfg, base = _load(args)
    if args.runs < 2:
        raise InsufficientSamples(f"an ensemble needs --runs >= 2, got {args.runs}")
    scenario = cfgmod.build_scenario(cfg, base)
    rec = run_ensemble(scenario, args.runs, cfg["seed"], args.workers)
    out = _outdir(args.output)
    _ensemble_outputs(out, rec, scenario.default_burn_in, args.tau)
    _manifest(out, "ensemble", cfg, cfg["seed"], runs=args.runs, kept_runs=list(rec.run_ids),
              excluded_runs=list(rec.excluded), protocol_failures=rec.protocol_failures, tau=args.tau)
    if rec.excluded:
        print(f"excluded {len(rec.excluded)} of {args.runs} runs after protocol failures", file=sys.stderr)
    print(f"ensemble of {rec.R} runs written to {out}")
    return EXIT_OK


def cmd_decompose(args) -> int:
    cfg, base = _load(args)
    scenario = cfgmod.build_scenario(cfg, base)
    res = decompose_variance(scenario, args.paths, args.runs, cfg["seed"], args.workers)
    out = _outdir(args.output)
    write_decomposition(res, out / "decomposition.csv")
    burn = min(scenario.default_burn_in, scenario.horizon - 1)
    write_window(res.window(0), out / "window_whole.csv")
    write_window(res.window(burn), out / "window_post_burn_in.csv")
    extra = {}
    if scenario.engine == "linear":
        checks = check_bounds(res, scenario.gains, scenario.demand.variance, scenario.shock_variances, burn)
        write_bound_checks(checks, out / "bounds.csv")
        extra["bounds_passed"] = all(c.passed for c in checks)
    _manifest(out, "decompose", cfg, cfg["seed"], paths=args.paths, runs=args.runs, burn_in=burn, **extra)
    if res.M == 1:
        print("single demand path: demand component unavailable", file=sys.stderr)
    print(f"decomposition over {res.M} paths x {res.R} runs written to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, base = _load(args)
    if args.steps is not None:
        cfg["train"]["steps"] = args.steps
    if args.group_size is not None:
        cfg["train"]["group_size"] = args.group_size
    cfg = cfgmod.normalize(cfg)
    tcfg = cfgmod.build_train_config(cfg)
    init = cfgmod.build_policy(cfg["train"]["init"], base)
    policy, rows = train(tcfg, init)
    out = _outdir(args.output)
    h = cfgmod.config_hash(cfg)
    save_checkpoint(policy, out / "checkpoint.json", h)
    save_checkpoint(init, out / "initial.json", h)
    write_train_log(rows, out / "train_log.csv")
    _manifest(out, "train", cfg, cfg["seed"], steps=tcfg.steps, group_size=tcfg.group_size)
    last = rows[-1].mean_cost if rows else float("nan")
    print(f"trained {tcfg.steps} steps; last mean episode cost {last:.2f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.config:
        cfg, base = _load(args)
    else:
        cfg, base = cfgmod.normalize({"seed": args.seed or 0}), Path.cwd()
    if args.checkpoint:
        policy, _ = load_checkpoint(Path(args.checkpoint))
    elif args.config and cfg["engine"] == "chain":
        policies = {json.dumps(p, sort_keys=True) for p in cfg["policies"]}
        if len(policies) != 1:
            raise ConfigError("eval deploys one shared policy; the config lists different policies per tier",
                              args.config, field="policies")
        policy = cfgmod.build_policy(cfg["policies"][0], base)
    else:
        policy = CategoricalOrderPolicy.order_up_to()
    if args.runs < 2:
        raise InsufficientSamples(f"evaluation needs --runs >= 2, got {args.runs}")
    env = cfgmod.env_config(cfg)
    report = evaluate(policy, args.runs, env, seed=cfg["seed"], tau=args.tau, workers=args.workers)
    out = _outdir(args.output)
    burn = cfg["burn_in"] if cfg["burn_in"] is not None else 5 * max(p.lead_time for p in env.tiers)
    _ensemble_outputs(out, report.record, burn, args.tau)
    with open(out / "costs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("run", "tier", "cost"))
        for i, run in enumerate(report.record.run_ids):
            for k in range(report.agent_costs.shape[1]):
                w.writerow((run, k + 1, repr(float(report.agent_costs[i, k]))))
    summary = report.summary()
    (out / "evaluation.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _manifest(out, "eval", cfg, cfg["seed"], runs=args.runs, checkpoint=args.checkpoint,
              demand=[float(x) for x in report.record.demand[0]])
    print(f"mean cost {summary['mean_cost']:.2f}  std {summary['std_cost']:.2f}  "
          f"max {summary['max_cost']:.2f}  cv {summary['cv']:.3f}")
    return EXIT_OK


def cmd_report(args) -> int:
    """Summarise an output directory as plain text."""
    root = Path(args.directory)
    manifest = root / "manifest.json"
    if not manifest.exists():
        raise ConfigError("no manifest.json in output directory", str(root))
    m = json.loads(manifest.read_text())
    lines = [f"command: {m.get('command')}", f"version: {m.get('version')}",
             f"config hash: {m.get('config_hash', '-')}", f"seed: {m.get('seed', '-')}"]
    if (root / "evaluation.json").exists():
        ev = json.loads((root / "evaluation.json").read_text())
        lines.append(f"evaluation: mean {ev['mean_cost']:.2f} std {ev['std_cost']:.2f} "
                     f"max {ev['max_cost']:.2f} cv {ev['cv']:.3f}")
    if (root / "metrics.csv").exists():
        med = _median_sigma(root / "metrics.csv")
        lines.append("median run-to-run variance by tier: " + ", ".join(f"{k}:{v:.4g}" for k, v in med))
    if (root / "bounds.csv").exists():
        rows = list(csv.DictReader(open(root / "bounds.csv")))
        if rows and "passed" in rows[0]:
            ok = sum(int(r["passed"]) for r in rows)
            lines.append(f"bound checks passed: {ok}/{len(rows)}")
    if (root / "window_post_burn_in.csv").exists():
        for r in csv.DictReader(open(root / "window_post_burn_in.csv")):
            lines.append(f"tier {r['tier']}: total {r['total']} demand {r['demand'] or 'n/a'} decision {r['decision']}")
    if (root / "train_log.csv").exists():
        rows = list(csv.DictReader(open(root / "train_log.csv")))
        if rows:
            lines.append(f"training: {len(rows)} steps, cost {float(rows[0]['mean_cost']):.2f} -> "
                         f"{float(rows[-1]['mean_cost']):.2f}")
    text = "\n".join(lines) + "\n"
    (root / "report.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def _median_sigma(path: Path):
    by_tier: dict[int, list[float]] = {}
    for r in csv.DictReader(open(path)):
        by_tier.setdefault(int(r["tier"]), []).append(float(r["sigma2"]) if r["sigma2"] else np.nan)
    return [(k, float(np.nanmedian(v))) for k, v in sorted(by_tier.items())]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="agentbullwhip", description="Supply-chain order variability toolkit.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, required=True):
        if required:
            sp.add_argument("config", help="YAML scenario config (or a manifest.json to reproduce a run)")
        else:
            sp.add_argument("config", nargs="?")
        sp.add_argument("-o", "--output", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--horizon", type=int, help="override the config horizon")

    def with_workers(sp):
        sp.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                        help="parallel worker processes (default: CPU count)")
        sp.add_argument("--tau", type=float, default=1e-9, help="ratio denominator floor")

    sp = sub.add_parser("simulate", help="one trajectory")
    with_config(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("analyze", help="average gains and variance bounds")
    sp.add_argument("--theta", type=float, nargs="+", default=[1.0])
    sp.add_argument("--lam", type=float, nargs="+", default=[1.0])
    sp.add_argument("--tiers", type=int, default=4)
    sp.add_argument("--demand-var", type=float, default=1.0)
    sp.add_argument("--shock-var", type=float, default=1.0)
    sp.add_argument("-o", "--output")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("ensemble", help="repeated runs and bullwhip metrics")
    with_config(sp)
    sp.add_argument("-R", "--runs", type=int, default=30)
    with_workers(sp)
    sp.set_defaults(func=cmd_ensemble)

    sp = sub.add_parser("decompose", help="nested demand/decision variance split")
    with_config(sp)
    sp.add_argument("-M", "--paths", type=int, default=100)
    sp.add_argument("-R", "--runs", type=int, default=10)
    with_workers(sp)
    sp.set_defaults(func=cmd_decompose)

    sp = sub.add_parser("train", help="group-relative policy optimisation")
    with_config(sp)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--group-size", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a policy on the step-up demand pattern")
    with_config(sp, required=False)
    sp.add_argument("--checkpoint")
    sp.add_argument("-R", "--runs", type=int, default=30)
    with_workers(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("report", help="summarise an output directory")
    sp.add_argument("directory")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except FailureBudgetExceeded as err:
        print(f"remote agent failure budget exceeded: {err}", file=sys.stderr)
        return EXIT_REMOTE
    except (InsufficientSamples, ValueError, RuntimeError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
