"""Prediction-validation continual learning: L1 predictor networks over a
frozen L0, confidently-predicted-node statistics, sample/batch validation,
and routing across a growing registry of models.
"""

from __future__ import annotations

import json
import logging
import pathlib
from dataclasses import dataclass, field

import numpy as np

from .engine import forward_pass
from .growth import GenerativeEvent, GrowthConfig, StepReport, adaptation_step
from .network import INPUT, MODULATORY, OUTPUT, Network, NetworkError

log = logging.getLogger(__name__)

PHASE_L0 = "AdaptingL0"
PHASE_L1 = "AdaptingL1"
PHASE_STABLE = "Stabilized"

REGISTRY_FORMAT_VERSION = 1


@dataclass
class PrevalConfig:
    t_cp: float = 0.05
    t_conf: float = 1.5
    t_sv: float = 0.01
    eps_is: float = 0.2
    stabilization_patience: int = 50


@dataclass
class CPStats:
    """Per-target confident-prediction statistics at stabilization time."""

    target_ids: list[int]  # L0 node ids, aligned with l1 output order
    mean_pe: np.ndarray
    sigma: np.ndarray
    is_cp: np.ndarray  # bool

    @property
    def n_cp(self) -> int:
        return int(self.is_cp.sum())


def stabilize_check(history, patience: int, tol: float = 1e-12) -> bool:
    """True once the running minimum has not improved for `patience` steps."""
    best = np.inf
    since = 0
    for value in history:
        if value < best - tol:
            best = value
            since = 0
        else:
            since += 1
    return since >= patience


class Model:
    """One (L0, L1) pair with CP statistics and an invalid-sample baseline."""

    def __init__(self, n_inputs: int, n_outputs: int, preval_cfg: PrevalConfig | None = None):
        self._preval_cfg = preval_cfg or PrevalConfig()
        self.l0 = Network.fresh(n_inputs, n_outputs)
        self.l1: Network | None = None
        self.phase = PHASE_L0
        self.cp: CPStats | None = None
        self.r_is: float | None = None
        self.err_history: list[float] = []
        # filled when L1 is built
        self.l1_input_of: dict[int, int] = {}  # L0 id -> L1 input id
        self.l0_of_mirror: dict[int, int] = {}  # L1 input id -> L0 id
        self.target_ids: list[int] = []  # L0 ids predicted by L1, l1-output order
        self.l1_output_of: dict[int, int] = {}  # L0 target id -> L1 output id
        self._l0_desc: dict[int, frozenset[int]] = {}
        self._l0_source_cache: tuple | None = None

    # -- L1 construction ----------------------------------------------------

    def freeze_l0_build_l1(self) -> None:
        """Freeze L0 and create the mirror-input predictor network.

        L1 gets one input node per L0 node (in L0 topological order) and
        one output node per non-output L0 node; the outputs' task is to
        reproduce the corresponding L0 states.
        """
        if self.phase != PHASE_L0:
            raise NetworkError(f"cannot build L1 in phase {self.phase}")
        order = self.l0.topo_order()
        l1 = Network()
        for l0_id in order:
            mirror = l1.insert_node(INPUT)
            self.l1_input_of[l0_id] = mirror
            self.l0_of_mirror[mirror] = l0_id
        for l0_id in order:
            if self.l0.nodes[l0_id].kind != OUTPUT:
                out = l1.insert_node(OUTPUT)
                self.target_ids.append(l0_id)
                self.l1_output_of[l0_id] = out
        self.l1 = l1
        self._l0_anc = {
            nid: frozenset(self.l0.ancestors_or_self(nid)) for nid in self.l0.nodes
        }
        self._target_cols = np.asarray(
            [order.index(t) for t in self.target_ids], dtype=np.int64
        )
        self.phase = PHASE_L1
        self.err_history = []

    def l0_states(self, batch: np.ndarray) -> np.ndarray:
        """L0 node states for a batch, columns in L0 topological order."""
        return forward_pass(self.l0, batch).a

    # -- L1 admissibility ----------------------------------------------------

    def _l1_memo(self) -> dict:
        """Per-topology memo for admissibility lookups, dropped on mutation."""
        topo = self.l1.topo_order()
        if self._l0_source_cache is None or self._l0_source_cache[0] is not topo:
            self._l0_source_cache = (topo, {})
        return self._l0_source_cache[1]

    def _l0_sources(self, l1_node: int) -> frozenset[int]:
        """L0 nodes feeding `l1_node`, transitively through L1 edges."""
        memo = self._l1_memo()
        key = ("src", l1_node)
        if key not in memo:
            if l1_node in self.l0_of_mirror:
                memo[key] = frozenset((self.l0_of_mirror[l1_node],))
            else:
                srcs: set[int] = set()
                for mirror in self.l1.ancestors_or_self(l1_node):
                    if mirror in self.l0_of_mirror:
                        srcs.add(self.l0_of_mirror[mirror])
                memo[key] = frozenset(srcs)
        return memo[key]

    def _forbidden_l0(self, target: int) -> frozenset[int]:
        """L0 nodes that may not feed `target`, directly or through L1.

        For an L1 output predicting n0, these are all L0 nodes with an L0
        path to n0, n0 itself included.  For an L1 hidden node, the union
        over every prediction it feeds into.
        """
        memo = self._l1_memo()
        key = ("forbid", target)
        if key not in memo:
            predicted = [
                n0 for n0, out in self.l1_output_of.items()
                if out == target or out in self.l1.descendants_or_self(target)
            ]
            forbidden: set[int] = set()
            for n0 in predicted:
                forbidden |= self._l0_anc[n0]
            memo[key] = frozenset(forbidden)
        return memo[key]

    def l1_source_admissible(self, candidate: int, target: int) -> bool:
        """Edge-generation filter enforcing the abstraction direction.

        The candidate is inadmissible if any L0 node feeding it through L1
        has an L0 path (self-paths included) to an L0 node whose
        prediction the target participates in: no node may help predict
        its own state or that of anything downstream of it.
        """
        if target not in self.l1.nodes or candidate not in self.l1.nodes:
            raise NetworkError("unknown L1 node in admissibility check")
        return not (self._l0_sources(candidate) & self._forbidden_l0(target))

    def adapt_l1(
        self, batch: np.ndarray, cfg: GrowthConfig, rng: np.random.Generator
    ) -> StepReport:
        """One DIRAD step on L1 with L0 states as both inputs and targets."""
        if self.phase != PHASE_L1:
            raise NetworkError(f"cannot adapt L1 in phase {self.phase}")
        states = self.l0_states(batch)
        targets = states[:, self._target_cols]
        return adaptation_step(
            self.l1, states, targets, cfg, rng,
            source_filter=self.l1_source_admissible,
        )

    # -- stabilization -------------------------------------------------------

    def prediction_errors(self, batch: np.ndarray) -> np.ndarray:
        """(m, n_targets) absolute prediction error |predicted - actual|."""
        states = self.l0_states(batch)
        preds = forward_pass(self.l1, states).outputs()
        return np.abs(preds - states[:, self._target_cols])

    def finalize(self, last_batch: np.ndarray, cfg: PrevalConfig) -> list[GenerativeEvent]:
        """Record CP statistics, prune non-CP pathways, fix the R_IS baseline."""
        if self.phase != PHASE_L1:
            raise NetworkError(f"cannot finalize in phase {self.phase}")
        self._preval_cfg = cfg
        pe = self.prediction_errors(last_batch)
        mean_pe = pe.mean(axis=0)
        sigma = pe.std(axis=0)
        is_cp = mean_pe < cfg.t_cp
        self.cp = CPStats(
            target_ids=list(self.target_ids), mean_pe=mean_pe, sigma=sigma, is_cp=is_cp
        )
        events = self._prune_non_cp()
        self.phase = PHASE_STABLE
        if self.cp.n_cp == 0:
            log.warning("model stabilized with no confidently predicted nodes")
            self.r_is = 1.0
        else:
            validated, _ = self.validate_samples(last_batch)
            self.r_is = float(np.mean(~validated))
        return events

    def _prune_non_cp(self) -> list[GenerativeEvent]:
        """Drop L1 pathways that exclusively serve non-CP targets."""
        keep: set[int] = set()
        for l0_id, flag in zip(self.target_ids, self.cp.is_cp):
            if flag:
                keep |= self.l1.ancestors_or_self(self.l1_output_of[l0_id])
        events: list[GenerativeEvent] = []
        removed_edges = 0
        for key in sorted(self.l1.edges):
            if key[1] not in keep:
                self.l1.remove_edge(key)
                removed_edges += 1
        removed_nodes = 0
        for nid in reversed(self.l1.topo_order()):
            node = self.l1.nodes.get(nid)
            if node is not None and node.kind == MODULATORY and nid not in keep:
                self.l1.remove_node(nid)
                removed_nodes += 1
        if removed_edges or removed_nodes:
            events.append(
                GenerativeEvent(
                    "L1Prune",
                    self.l1.step,
                    {"removed_edges": removed_edges, "removed_nodes": removed_nodes},
                )
            )
        return events

    # -- validation ----------------------------------------------------------

    def validate_samples(self, batch: np.ndarray):
        """Per-sample (validated, conflict_ratio) against the CP statistics.

        A CP node conflicts on a sample when its prediction error exceeds
        mu + t_conf * sigma (strict); the sample is validated when the
        conflicted fraction of CP nodes stays below t_sv (strict).
        """
        batch = np.atleast_2d(batch)
        m = batch.shape[0]
        if self.phase != PHASE_STABLE:
            raise NetworkError("validation requires a stabilized model")
        if self.cp.n_cp == 0:
            return np.zeros(m, dtype=bool), np.ones(m)
        cfg = self._preval_cfg
        mask = self.cp.is_cp
        pe = self.prediction_errors(batch)[:, mask]
        bound = self.cp.mean_pe[mask] + cfg.t_conf * self.cp.sigma[mask]
        conflicts = (pe > bound).sum(axis=1)
        ratio = conflicts / self.cp.n_cp
        return ratio < cfg.t_sv, ratio

    def validate_sample(self, sample: np.ndarray):
        validated, ratio = self.validate_samples(np.atleast_2d(sample))
        return bool(validated[0]), float(ratio[0])

    def validate_batch(self, batch: np.ndarray):
        """(validated, invalid_ratio): batch-level check against the R_IS baseline."""
        validated, _ = self.validate_samples(batch)
        invalid_ratio = float(np.mean(~validated))
        bound = (1.0 + self._preval_cfg.eps_is) * self.r_is
        return invalid_ratio <= bound, invalid_ratio


class PrevalSystem:
    """Ordered model registry with batch/sample routing."""

    def __init__(self, n_inputs: int, n_outputs: int, cfg: PrevalConfig):
        self.n_inputs = n_inputs
        self.n_outputs = n_outputs
        self.cfg = cfg
        self.models: list[Model] = []

    @property
    def adapting_index(self) -> int | None:
        for i, model in enumerate(self.models):
            if model.phase != PHASE_STABLE:
                return i
        return None

    def _new_model(self) -> int:
        model = Model(self.n_inputs, self.n_outputs)
        model._preval_cfg = self.cfg
        self.models.append(model)
        return len(self.models) - 1

    def route_batch(self, batch: np.ndarray) -> tuple[int, bool]:
        """Adapting model if any; else best validated model; else a new one."""
        idx = self.adapting_index
        if idx is not None:
            return idx, False
        best, best_ratio = None, None
        for i, model in enumerate(self.models):
            ok, ratio = model.validate_batch(batch)
            if ok and (best is None or ratio < best_ratio):
                best, best_ratio = i, ratio
        if best is not None:
            return best, False
        return self._new_model(), True

    def route_sample(self, sample: np.ndarray) -> int:
        idx = self.route_samples(np.atleast_2d(sample))
        return int(idx[0])

    def route_samples(self, batch: np.ndarray) -> np.ndarray:
        """Deployment routing: per sample, the validated model with the least
        conflict ratio; if none validates, the least-conflicted model overall.
        Never creates models."""
        if not self.models:
            raise NetworkError("cannot route samples in an empty system")
        batch = np.atleast_2d(batch)
        m = batch.shape[0]
        ratios = np.empty((len(self.models), m))
        valid = np.empty((len(self.models), m), dtype=bool)
        for i, model in enumerate(self.models):
            valid[i], ratios[i] = model.validate_samples(batch)
        choice = np.empty(m, dtype=np.int64)
        for s in range(m):
            if valid[:, s].any():
                pool = np.flatnonzero(valid[:, s])
            else:
                pool = np.arange(len(self.models))
            choice[s] = pool[int(np.argmin(ratios[pool, s]))]
        return choice

    # -- persistence ---------------------------------------------------------

    def save(self, directory) -> None:
        directory = pathlib.Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {
            "format_version": REGISTRY_FORMAT_VERSION,
            "n_inputs": self.n_inputs,
            "n_outputs": self.n_outputs,
            "thresholds": {
                "t_cp": self.cfg.t_cp,
                "t_conf": self.cfg.t_conf,
                "t_sv": self.cfg.t_sv,
                "eps_is": self.cfg.eps_is,
            },
            "models": [],
        }
        for i, model in enumerate(self.models):
            (directory / f"model_{i}_l0.json").write_text(model.l0.to_json())
            entry = {"phase": model.phase, "r_is": model.r_is}
            if model.l1 is not None:
                (directory / f"model_{i}_l1.json").write_text(model.l1.to_json())
                entry["l1_input_of"] = {str(k): v for k, v in model.l1_input_of.items()}
                entry["target_ids"] = model.target_ids
                entry["l1_output_of"] = {str(k): v for k, v in model.l1_output_of.items()}
            if model.cp is not None:
                entry["cp"] = {
                    "target_ids": model.cp.target_ids,
                    "mean_pe": model.cp.mean_pe.tolist(),
                    "sigma": model.cp.sigma.tolist(),
                    "is_cp": model.cp.is_cp.tolist(),
                }
            manifest["models"].append(entry)
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))

    @classmethod
    def load(cls, directory) -> "PrevalSystem":
        directory = pathlib.Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        if manifest.get("format_version") != REGISTRY_FORMAT_VERSION:
            raise NetworkError("unsupported registry format")
        thresholds = manifest["thresholds"]
        cfg = PrevalConfig(
            t_cp=thresholds["t_cp"], t_conf=thresholds["t_conf"],
            t_sv=thresholds["t_sv"], eps_is=thresholds["eps_is"],
        )
        system = cls(manifest["n_inputs"], manifest["n_outputs"], cfg)
        for i, entry in enumerate(manifest["models"]):
            model = Model.__new__(Model)
            model.l0 = Network.from_json((directory / f"model_{i}_l0.json").read_text())
            model.l1 = None
            model.phase = entry["phase"]
            model.r_is = entry["r_is"]
            model.cp = None
            model.err_history = []
            model.l1_input_of = {}
            model.l0_of_mirror = {}
            model.target_ids = []
            model.l1_output_of = {}
            model._l0_source_cache = None
            model._preval_cfg = cfg
            l1_path = directory / f"model_{i}_l1.json"
            if l1_path.exists():
                model.l1 = Network.from_json(l1_path.read_text())
                model.l1_input_of = {int(k): v for k, v in entry["l1_input_of"].items()}
                model.l0_of_mirror = {v: k for k, v in model.l1_input_of.items()}
                model.target_ids = list(entry["target_ids"])
                model.l1_output_of = {int(k): v for k, v in entry["l1_output_of"].items()}
                order = model.l0.topo_order()
                model._target_cols = np.asarray(
                    [order.index(t) for t in model.target_ids], dtype=np.int64
                )
                model._l0_anc = {
                    nid: frozenset(model.l0.ancestors_or_self(nid))
                    for nid in model.l0.nodes
                }
            if "cp" in entry:
                cp = entry["cp"]
                model.cp = CPStats(
                    target_ids=list(cp["target_ids"]),
                    mean_pe=np.asarray(cp["mean_pe"]),
                    sigma=np.asarray(cp["sigma"]),
                    is_cp=np.asarray(cp["is_cp"], dtype=bool),
                )
            system.models.append(model)
        return system
