"""Command-line entry points for the experiment harness."""

from __future__ import annotations

import argparse
import csv
import json
import pathlib
import sys
from dataclasses import fields

from .data import DataError, load_digit_dataset, make_run_plan
from .growth import GrowthConfig
from .harness import (
    RunResult,
    aggregate_accuracies,
    compute_retention,
    run_continual,
    run_xor,
)
from .network import Network, NetworkError
from .preval import PrevalConfig


class UsageError(Exception):
    pass


def _load_config(path) -> dict:
    """Flat ``key = value`` text file; '#' starts a comment."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(pathlib.Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values

def _apply_config(cfg, values: dict, consumed: set) -> None:
    for f in fields(cfg):
        if f.name in values:
            setattr(cfg, f.name, _cast(f, values[f.name]))
            consumed.add(f.name)


def _cast(f, raw: str):
    current = f.default
    if isinstance(current, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def _configs(args) -> tuple[GrowthConfig, PrevalConfig]:
    growth_cfg, preval_cfg = GrowthConfig(), PrevalConfig()
    if getattr(args, "config", None):
        values = _load_config(args.config)
        consumed: set[str] = set()
        _apply_config(growth_cfg, values, consumed)
        _apply_config(preval_cfg, values, consumed)
        unknown = set(values) - consumed
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    if getattr(args, "tcp", None) is not None:
        preval_cfg.t_cp = args.tcp
    return growth_cfg, preval_cfg


def _out_dir(args, default: str) -> pathlib.Path:
    out = pathlib.Path(args.out if args.out else default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_xor(args) -> int:
    cfg, _ = _configs(args)
    out = _out_dir(args, "runs/xor")
    net, reports, converged = run_xor(args.seed, cfg, max_steps=args.max_steps)
    with open(out / "steps.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "cost", "nodes", "edges", "hidden"])
        for i, rep in enumerate(reports):
            writer.writerow([i, rep.cost, rep.n_nodes, rep.n_edges, rep.n_hidden])
    (out / "net.dot").write_text(net.export_dot())
    (out / "net.json").write_text(net.to_json())
    if converged is None:
        print(f"did not converge in {len(reports)} steps")
        return 1
    print(f"converged at step {converged}: {net.hidden_count()} hidden nodes, "
          f"{len(net.edges)} edges -> {out}")
    return 0


def _run_seeds(args, n_tasks: int, base: str):
    growth_cfg, preval_cfg = _configs(args)
    dataset = load_digit_dataset(args.data_dir, full_resolution=args.full_mnist)
    results: list[RunResult] = []
    for seed in range(args.seeds):
        plan = make_run_plan(seed, preval_cfg.t_cp, n_tasks=n_tasks)
        run_out = _out_dir(args, base) / f"seed_{seed}"
        results.append(
            run_continual(plan, dataset, growth_cfg, preval_cfg, out_dir=run_out)
        )
        last = results[-1].outcomes[-1]
        print(f"seed {seed}: tasks {plan.tasks} final net acc {last.net_acc:.3f}")
    return results


def cmd_single_task(args) -> int:
    args.full_mnist = getattr(args, "full_mnist", False)
    results = _run_seeds(args, n_tasks=1, base="runs/single-task")
    accs = [r.outcomes[0].net_acc for r in results]
    print(f"mean single-task accuracy over {len(accs)} seeds: "
          f"{sum(accs) / len(accs):.3f}")
    return 0


def cmd_continual(args) -> int:
    results = _run_seeds(args, n_tasks=3, base="runs/continual")
    acc_runs = [(r.stage_tables(), r.nd_any) for r in results]
    ret_runs = [(r.tasks, r.stage_tables(), r.nd_any) for r in results]
    summary = {
        "accuracy": aggregate_accuracies(acc_runs),
        "retention": compute_retention(ret_runs),
    }
    out = _out_dir(args, "runs/continual")
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    acc = summary["accuracy"]
    row = "  ".join(
        f"T{i + 1}={acc[f'T{i + 1}']:.2f}" for i in range(len(results[0].outcomes))
    )
    print(f"t_cp={results[0].t_cp}  {row}  (ND runs: {acc['nd_runs']}/{acc['n_runs']})")
    print(f"summary -> {out / 'summary.json'}")
    return 0


def cmd_export_dot(args) -> int:
    net = Network.from_json(pathlib.Path(args.network).read_text())
    dot = net.export_dot()
    if args.out:
        pathlib.Path(args.out).write_text(dot)
    else:
        print(dot)
    return 0


def cmd_replay_events(args) -> int:
    """Summarize a structural event log: counts and worst audit deviations."""
    counts: dict[str, int] = {}
    worst_probe = 0.0
    worst_transfer = 0.0
    with open(args.events) as fh:
        for line in fh:
            doc = json.loads(line)
            counts[doc["kind"]] = counts.get(doc["kind"], 0) + 1
            if doc.get("probe_dev") is not None:
                worst_probe = max(worst_probe, doc["probe_dev"])
            if doc.get("delta_transfer_dev") is not None:
                worst_transfer = max(worst_transfer, doc["delta_transfer_dev"])
    for kind in sorted(counts):
        print(f"{kind}: {counts[kind]}")
    print(f"max output deviation at generation: {worst_probe:.3e}")
    print(f"max conversion delta-transfer deviation: {worst_transfer:.3e}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dirad", description="Structural-adaptation experiment harness"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--out", help="output directory")
        if data:
            p.add_argument("--data-dir", required=True, help="IDX digit files")
            p.add_argument("--tcp", type=float, help="CP threshold override")
            p.add_argument("--seeds", type=int, default=8)

    p = sub.add_parser("xor", help="grow a network on signed XOR")
    common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-steps", type=int, default=2000)
    p.set_defaults(func=cmd_xor)

    p = sub.add_parser("single-task", help="one 2-class digit task per seed")
    common(p, data=True)
    p.set_defaults(func=cmd_single_task)

    p = sub.add_parser("continual", help="3-task continual sequence per seed")
    common(p, data=True)
    p.add_argument("--full-mnist", action="store_true",
                   help="use 784-pixel inputs instead of 14x14 downscaling")
    p.set_defaults(func=cmd_continual)

    p = sub.add_parser("export-dot", help="render a serialized network as DOT")
    p.add_argument("network", help="network JSON file")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_dot)

    p = sub.add_parser("replay-events", help="summarize an events.jsonl log")
    p.add_argument("events", help="events.jsonl file")
    p.set_defaults(func=cmd_replay_events)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, DataError, NetworkError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
