"""Experiment orchestration: XOR growth, single-task and continual runs,
accuracy/retention metrics, and result emission (JSON/CSV/JSONL/DOT)."""

from __future__ import annotations

import csv
import json
import logging
import pathlib
from dataclasses import dataclass, field

import numpy as np

from .data import (
    Dataset,
    RunPlan,
    Task,
    make_task,
    make_xor_task,
    sample_batch,
    sample_test_batch,
)
from .engine import forward_pass
from .growth import GenerativeEvent, GrowthConfig, StepReport, adaptation_step
from .network import Network
from .preval import (
    PHASE_L0,
    PHASE_L1,
    PHASE_STABLE,
    Model,
    PrevalConfig,
    PrevalSystem,
    stabilize_check,
)

log = logging.getLogger(__name__)


@dataclass
class ComplexityPoint:
    model: int
    phase: str
    step: int
    cost: float
    nodes: int
    edges: int
    hidden: int


@dataclass
class TaskOutcome:
    task_index: int
    classes: tuple[int, int]
    model_index: int
    nd: bool  # task switch did not create a new model
    per_class_acc: dict[int, float]
    net_acc: float


@dataclass
class RunResult:
    seed: int
    t_cp: float
    tasks: list[tuple[int, int]]
    outcomes: list[TaskOutcome] = field(default_factory=list)
    complexity: list[ComplexityPoint] = field(default_factory=list)
    events_path: str | None = None
    # model index -> list of output snapshots (raw bytes) on the probe batch,
    # one appended at the end of every task once the model has stabilized
    probe_records: dict[int, list[bytes]] = field(default_factory=dict)

    @property
    def nd_any(self) -> bool:
        return any(o.nd for o in self.outcomes)

    def stage_tables(self) -> list[dict[int, float]]:
        return [dict(o.per_class_acc) for o in self.outcomes]

    def to_json_dict(self) -> dict:
        return {
            "seed": self.seed,
            "t_cp": self.t_cp,
            "tasks": [list(t) for t in self.tasks],
            "outcomes": [
                {
                    "task_index": o.task_index,
                    "classes": list(o.classes),
                    "model_index": o.model_index,
                    "nd": o.nd,
                    "per_class_acc": {str(k): v for k, v in o.per_class_acc.items()},
                    "net_acc": o.net_acc,
                }
                for o in self.outcomes
            ],
        }


class _EventLog:
    def __init__(self, path: pathlib.Path | None):
        self.path = path
        self._fh = open(path, "w") if path is not None else None

    def write(self, events: list[GenerativeEvent], context: dict) -> None:
        if self._fh is None:
            return
        for ev in events:
            doc = ev.to_json_dict()
            doc.update(context)
            self._fh.write(json.dumps(doc) + "\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


# -- XOR -----------------------------------------------------------------------


def run_xor(seed: int, cfg: GrowthConfig | None = None, max_steps: int = 2000):
    """Grow a network on signed XOR until every sample's output error < 0.01.

    Returns (net, reports, converged_step_or_None).
    """
    cfg = cfg or GrowthConfig()
    cfg.rng_seed = seed
    rng = cfg.rng()
    batch, targets = make_xor_task()
    net = Network.fresh(2, 1)
    reports: list[StepReport] = []
    converged = None
    for step in range(max_steps):
        reports.append(adaptation_step(net, batch, targets, cfg, rng))
        outputs = forward_pass(net, batch).outputs()
        if np.max(np.abs(outputs - targets)) < 0.01:
            converged = step
            break
    return net, reports, converged


# -- single task ---------------------------------------------------------------


@dataclass
class SingleTaskResult:
    seed: int
    classes: tuple[int, int]
    l0_steps: int
    l1_steps: int
    test_acc: float
    hidden: int
    edges: int
    mean_pe: float  # mean prediction error over all L1 targets at stabilization
    model: object
    events: list[GenerativeEvent]


def run_single_task(
    dataset: Dataset,
    classes: tuple[int, int],
    seed: int,
    growth_cfg: GrowthConfig | None = None,
    preval_cfg=None,
    limits: StabilizationLimits | None = None,
    batch_size: int = 100,
) -> SingleTaskResult:
    """One model through L0 and L1 adaptation on a single 2-class task."""
    growth_cfg = growth_cfg or GrowthConfig()
    preval_cfg = preval_cfg or PrevalConfig()
    limits = limits or StabilizationLimits()
    growth_cfg.rng_seed = seed
    rng = growth_cfg.rng()
    task = make_task(dataset, classes)
    model = Model(dataset.n_features, dataset.n_classes, preval_cfg)
    events: list[GenerativeEvent] = []

    hist: list[float] = []
    while not (stabilize_check(hist, preval_cfg.stabilization_patience)
               or len(hist) >= limits.l0_max_steps):
        x, y = sample_batch(task, batch_size, rng)
        rep = adaptation_step(model.l0, x, y, growth_cfg, rng)
        hist.append(rep.cost)
        events.extend(rep.events)
    l0_steps = len(hist)

    test_x = np.concatenate([task.test_x[c] for c in classes])
    test_labels = np.concatenate(
        [np.full(task.test_x[c].shape[0], c) for c in classes]
    )
    predicted = np.argmax(forward_pass(model.l0, test_x).outputs(), axis=1)
    test_acc = float(np.mean(predicted == test_labels))
    hidden, edges = model.l0.hidden_count(), len(model.l0.edges)

    model.freeze_l0_build_l1()
    hist = []
    x = None
    while not (stabilize_check(hist, preval_cfg.stabilization_patience)
               or len(hist) >= limits.l1_max_steps):
        x, _ = sample_batch(task, batch_size, rng)
        rep = model.adapt_l1(x, growth_cfg, rng)
        hist.append(rep.cost)
        events.extend(rep.events)
    events.extend(model.finalize(x, preval_cfg))
    return SingleTaskResult(
        seed=seed, classes=classes, l0_steps=l0_steps, l1_steps=len(hist),
        test_acc=test_acc, hidden=hidden, edges=edges,
        mean_pe=float(model.cp.mean_pe.mean()), model=model, events=events,
    )


# -- continual driver ----------------------------------------------------------


@dataclass
class StabilizationLimits:
    """Hard per-phase step caps; stabilization normally triggers earlier
    via the no-improvement patience rule."""

    l0_max_steps: int = 1500
    l1_max_steps: int = 1500


def _adapt_model_to_task(
    system: PrevalSystem,
    model_index: int,
    task: Task,
    plan: RunPlan,
    growth_cfg: GrowthConfig,
    rng: np.random.Generator,
    limits: StabilizationLimits,
    result: RunResult,
    events: _EventLog,
) -> None:
    """Drive the adapting model through L0 then L1 until stabilization."""
    model = system.models[model_index]
    patience = system.cfg.stabilization_patience
    phase_steps = 0
    last_batch = None
    while model.phase != PHASE_STABLE:
        batch_x, batch_y = sample_batch(task, plan.batch_size, rng)
        routed, _ = system.route_batch(batch_x)
        assert routed == model_index  # an adapting model always wins routing
        if model.phase == PHASE_L0:
            rep = adaptation_step(model.l0, batch_x, batch_y, growth_cfg, rng)
            net = model.l0
        else:
            rep = model.adapt_l1(batch_x, growth_cfg, rng)
            net = model.l1
        last_batch = batch_x
        phase_steps += 1
        model.err_history.append(rep.cost)
        result.complexity.append(
            ComplexityPoint(
                model=model_index, phase=model.phase, step=net.step,
                cost=rep.cost, nodes=rep.n_nodes, edges=rep.n_edges,
                hidden=rep.n_hidden,
            )
        )
        events.write(rep.events, {"model": model_index, "phase": model.phase})
        cap = limits.l0_max_steps if model.phase == PHASE_L0 else limits.l1_max_steps
        done = stabilize_check(model.err_history, patience)
        if done or phase_steps >= cap:
            if not done:
                log.warning(
                    "phase %s hit step cap %d before stabilizing", model.phase, cap
                )
            if model.phase == PHASE_L0:
                model.freeze_l0_build_l1()
            else:
                prune_events = model.finalize(last_batch, system.cfg)
                events.write(prune_events, {"model": model_index, "phase": PHASE_L1})
            phase_steps = 0
            model.err_history = []


def _evaluate(
    system: PrevalSystem,
    tasks_seen: list[Task],
    plan: RunPlan,
    rng: np.random.Generator,
):
    """Cumulative test accuracy: route each sample, classify by argmax."""
    x, labels = sample_test_batch(tasks_seen, plan.test_batch_size, rng)
    choice = system.route_samples(x)
    predicted = np.empty(labels.shape[0], dtype=np.int64)
    for mi in np.unique(choice):
        rows = np.flatnonzero(choice == mi)
        outputs = forward_pass(system.models[mi].l0, x[rows]).outputs()
        predicted[rows] = np.argmax(outputs, axis=1)
    correct = predicted == labels
    per_class = {
        int(c): float(np.mean(correct[labels == c])) for c in np.unique(labels)
    }
    return per_class, float(np.mean(correct))


def run_continual(
    plan: RunPlan,
    dataset: Dataset,
    growth_cfg: GrowthConfig | None = None,
    preval_cfg: PrevalConfig | None = None,
    limits: StabilizationLimits | None = None,
    out_dir=None,
    probe: np.ndarray | None = None,
) -> RunResult:
    """Adapt through the plan's task sequence with PREVAL routing, testing on
    the cumulative class set after every task.

    When `probe` is given, every stabilized model's outputs on it are
    snapshotted after each task, exposing any drift in frozen models.
    """
    growth_cfg = growth_cfg or GrowthConfig()
    preval_cfg = preval_cfg or PrevalConfig()
    preval_cfg.t_cp = plan.t_cp
    limits = limits or StabilizationLimits()
    growth_cfg.rng_seed = plan.seed
    rng = growth_cfg.rng()

    out_dir = pathlib.Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    events = _EventLog(out_dir / "events.jsonl" if out_dir is not None else None)

    system = PrevalSystem(dataset.n_features, dataset.n_classes, preval_cfg)
    result = RunResult(seed=plan.seed, t_cp=plan.t_cp, tasks=list(plan.tasks))
    tasks_seen: list[Task] = []
    try:
        for task_index, classes in enumerate(plan.tasks):
            task = make_task(dataset, classes)
            tasks_seen.append(task)
            batch_x, _ = sample_batch(task, plan.batch_size, rng)
            model_index, created = system.route_batch(batch_x)
            nd = (not created) and task_index > 0
            if created or system.models[model_index].phase != PHASE_STABLE:
                _adapt_model_to_task(
                    system, model_index, task, plan, growth_cfg, rng, limits,
                    result, events,
                )
            if probe is not None:
                for mi, model in enumerate(system.models):
                    if model.phase == PHASE_STABLE:
                        snap = forward_pass(model.l0, probe).outputs().tobytes()
                        result.probe_records.setdefault(mi, []).append(snap)
            per_class, net_acc = _evaluate(system, tasks_seen, plan, rng)
            result.outcomes.append(
                TaskOutcome(
                    task_index=task_index, classes=classes,
                    model_index=model_index, nd=nd,
                    per_class_acc=per_class, net_acc=net_acc,
                )
            )
            if out_dir is not None:
                for mi, model in enumerate(system.models):
                    (out_dir / f"net_{mi}_l0.dot").write_text(model.l0.export_dot())
                    if model.l1 is not None:
                        (out_dir / f"net_{mi}_l1.dot").write_text(model.l1.export_dot())
    finally:
        events.close()
    if out_dir is not None:
        result.events_path = str(out_dir / "events.jsonl")
        (out_dir / "result.json").write_text(json.dumps(result.to_json_dict(), indent=1))
        write_metrics_csv(out_dir / "metrics.csv", result)
        system.save(out_dir / "registry")
    return result


def write_metrics_csv(path, result: RunResult) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "phase", "step", "cost", "nodes", "edges", "hidden"])
        for p in result.complexity:
            writer.writerow([p.model, p.phase, p.step, p.cost, p.nodes, p.edges, p.hidden])


# -- aggregate metrics ---------------------------------------------------------


def _stage_mean(stage: dict[int, float]) -> float:
    return float(np.mean(list(stage.values())))


def aggregate_accuracies(runs: list[tuple[list[dict[int, float]], bool]]) -> dict:
    """Mean net accuracy per task stage, plain and ND-run-excluded.

    `runs` holds (stage_tables, nd_any) pairs; stage table X maps every
    class seen through stage X to its accuracy.
    """
    n_stages = len(runs[0][0])
    out: dict = {"nd_runs": sum(1 for _, nd in runs if nd), "n_runs": len(runs)}
    for x in range(n_stages):
        vals = [_stage_mean(stages[x]) for stages, _ in runs]
        out[f"T{x + 1}"] = float(np.mean(vals))
        detected = [_stage_mean(stages[x]) for stages, nd in runs if not nd]
        out[f"T{x + 1}_detected"] = float(np.mean(detected)) if detected else None
    return out


def compute_retention(
    runs: list[tuple[list[tuple[int, int]], list[dict[int, float]], bool]]
) -> dict:
    """Before/after accuracy ratios per new-task introduction.

    `runs` holds (task_class_pairs, stage_tables, nd_any).  ALL+X is the
    net-accuracy ratio stage X vs stage X-1 (plain and ND-excluded);
    TX+Y is the same ratio restricted to task X's classes, with runs
    whose denominator is 0 excluded.
    """
    n_stages = len(runs[0][1])
    out: dict = {}
    for x in range(1, n_stages):
        ratios, detected = [], []
        for _, stages, nd in runs:
            before = _stage_mean(stages[x - 1])
            after = _stage_mean(stages[x])
            if before == 0:
                continue
            ratios.append(after / before)
            if not nd:
                detected.append(after / before)
        out[f"ALL+{x + 1}"] = float(np.mean(ratios)) if ratios else None
        out[f"ALL+{x + 1}_detected"] = float(np.mean(detected)) if detected else None
    for tx in range(n_stages - 1):
        for ty in range(tx + 1, n_stages):
            ratios = []
            for pairs, stages, _ in runs:
                cls = pairs[tx]
                before = float(np.mean([stages[ty - 1][c] for c in cls]))
                after = float(np.mean([stages[ty][c] for c in cls]))
                if before == 0:
                    continue
                ratios.append(after / before)
            out[f"T{tx + 1}+{ty + 1}"] = float(np.mean(ratios)) if ratios else None
    return out
