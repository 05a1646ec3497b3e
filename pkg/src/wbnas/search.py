"""Budget-constrained architecture search with automatic compute allocation.

Sub-networks are sampled uniformly from the space and kept when their total
MAC cost fits the budget (rejection sampling); the accepted trials are
scored by a pluggable evaluator and the argmax wins.  A proportional
baseline additionally pins each sub-module's share of the total cost to a
reference allocation, which is the ablation the automatic mode is compared
against.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .cost import CostReport, allocation_report, subnetwork_cost
from .space import (
    SearchSpace,
    SpaceError,
    SubNetworkSpec,
    enumerate_specs,
    reference_spec,
    sample_extreme,
    sample_random,
)

TRIAL_LOG_SCHEMA = "trial-log/1"

MODULE_FRACTION_KEYS = ("bodynet", "facehead", "handhead")


class SearchError(ValueError):
    """Raised for malformed search configurations."""


class InfeasibleBudgetError(SearchError):
    """The smallest legal sub-network already exceeds the budget."""


@dataclass
class TrialRecord:
    index: int
    spec: SubNetworkSpec
    cost: CostReport
    score: float
    seed: int
    accepted: bool = True

    def fractions(self) -> dict[str, float]:
        return allocation_report(self.cost)

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "spec": self.spec.to_dict(),
            "cost": self.cost.to_dict(),
            "score": self.score,
            "seed": self.seed,
            "accepted": self.accepted,
        }


@dataclass
class SearchConfig:
    budget: float  # total MACs
    n_samples: int = 500
    evaluator: str | Callable = "neg_total_cost"
    allocation_mode: str = "automatic"  # automatic | proportional
    fraction_tolerance: float = 0.02
    exhaustive: bool = False
    jobs: int = 1
    max_attempt_factor: int = 1000  # attempts allowed per requested sample

    def __post_init__(self):
        if self.budget <= 0:
            raise SearchError(f"budget must be positive, got {self.budget}")
        if self.n_samples < 1:
            raise SearchError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.allocation_mode not in ("automatic", "proportional"):
            raise SearchError(f"unknown allocation_mode {self.allocation_mode!r}")
        if self.jobs < 1:
            raise SearchError("jobs must be >= 1")


@dataclass
class SearchResult:
    best: TrialRecord
    trials: list[TrialRecord]
    n_rejected: int
    n_fraction_rejected: int = 0

    @property
    def rejection_rate(self) -> float:
        total = len(self.trials) + self.n_rejected + self.n_fraction_rejected
        return (self.n_rejected + self.n_fraction_rejected) / total if total else 0.0


# --------------------------------------------------------------------------
# Evaluators
# --------------------------------------------------------------------------

_EVALUATORS: dict[str, Callable] = {}


def register_evaluator(name: str, fn: Callable) -> None:
    """Register a scorer with signature (spec, cost_report) -> float."""
    _EVALUATORS[name] = fn


def get_evaluator(evaluator) -> Callable:
    if callable(evaluator):
        return evaluator
    try:
        return _EVALUATORS[evaluator]
    except KeyError:
        raise SearchError(
            f"unknown evaluator {evaluator!r}; available: {sorted(_EVALUATORS)}"
        ) from None


def evaluator_names() -> list[str]:
    return sorted(_EVALUATORS)


def _neg_total_cost(spec, report):
    return -float(report.total_macs)


def _bodynet_affinity(spec, report):
    # Concave reward over the per-module compute fractions: almost all of
    # the gain comes from compute placed in the body network, so the optimum
    # under a fixed budget shifts allocation toward it.
    f = allocation_report(report)
    return float(
        np.sqrt(f["bodynet"]) + 0.1 * np.sqrt(f["facehead"]) + 0.1 * np.sqrt(f["handhead"])
    )


register_evaluator("neg_total_cost", _neg_total_cost)
register_evaluator("bodynet_affinity", _bodynet_affinity)


def make_supernet_evaluator(params, space, n_samples: int = 4, rng_seed: int = 0) -> Callable:
    """Score a spec by mean keypoint similarity of its decoded predictions
    on a fixed synthetic validation set, using a trained supernet snapshot.
    """
    from . import supernet as SN
    from .geometry import HeatmapStack, decode_quarter_offset
    from .metrics import OksParams, PoseResult, oks

    batches = SN.make_synthetic_task(rng_seed, n_samples, space=space)
    strides = SN.output_strides(space)

    def evaluate(spec, report):
        sims = []
        for batch in batches:
            outputs, _ = SN.forward_subnet(params, space, spec, batch.images)
            for part in SN.PARTS:
                mod = SN.PART_TO_MODULE[part]
                pred = outputs[mod].value
                n, k, hh, ww = pred.shape
                full_h = hh * strides[mod]
                full_w = ww * strides[mod]
                sigmas = np.full(k, 0.1)
                oks_params = OksParams(sigmas=tuple(sigmas), scale=1.0)
                for s in range(n):
                    decoded = decode_quarter_offset(
                        HeatmapStack(values=pred[s], stride=strides[mod])
                    )
                    pred_norm = decoded[:, :2] / np.array(
                        [max(full_w - 1, 1), max(full_h - 1, 1)]
                    )
                    gt = PoseResult(
                        keypoints=batch.keypoints[part][s],
                        visibility=batch.visibility[part][s].astype(int),
                    )
                    pr = PoseResult(keypoints=pred_norm, visibility=gt.visibility)
                    sims.append(oks(pr, gt, oks_params))
        return float(np.mean(sims))

    return evaluate


# --------------------------------------------------------------------------
# Search drivers
# --------------------------------------------------------------------------


def _check_feasible(space: SearchSpace, budget: float) -> None:
    smallest = sample_extreme(space, "smallest")
    floor = subnetwork_cost(space, smallest).total_macs
    if floor > budget:
        raise InfeasibleBudgetError(
            f"budget {budget:.3g} MACs is below the smallest sub-network "
            f"({floor:.3g} MACs); no legal sample exists"
        )


def _fraction_filter(report: CostReport, reference: dict, tolerance: float) -> bool:
    f = allocation_report(report)
    return all(abs(f[m] - reference[m]) <= tolerance for m in MODULE_FRACTION_KEYS)


def _score_all(candidates, evaluator, jobs):
    """Score (index, spec, report, seed) tuples; output ordered by index."""
    if jobs == 1:
        return [evaluator(spec, report) for _, spec, report, _ in candidates]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(evaluator, spec, report) for _, spec, report, _ in candidates]
        return [f.result() for f in futures]


def _pick_best(trials: list[TrialRecord]) -> TrialRecord:
    return min(trials, key=lambda t: (-t.score, t.cost.total_macs, t.index))


def _run(space, config, rng_seed, fraction_reference=None) -> SearchResult:
    evaluator = get_evaluator(config.evaluator)
    _check_feasible(space, config.budget)
    tol = config.fraction_tolerance if fraction_reference is not None else None

    candidates = []
    n_rejected = 0
    n_fraction_rejected = 0
    if config.exhaustive:
        for i, spec in enumerate(enumerate_specs(space)):
            report = subnetwork_cost(space, spec)
            if report.total_macs > config.budget:
                n_rejected += 1
                continue
            if tol is not None and not _fraction_filter(report, fraction_reference, tol):
                n_fraction_rejected += 1
                continue
            candidates.append((len(candidates), spec, report, int(rng_seed)))
    else:
        attempt = 0
        max_attempts = config.max_attempt_factor * config.n_samples
        while len(candidates) < config.n_samples:
            if attempt >= max_attempts:
                raise SearchError(
                    f"gave up after {attempt} attempts with only "
                    f"{len(candidates)} / {config.n_samples} accepted samples"
                )
            trial_seed = np.random.SeedSequence([int(rng_seed), attempt])
            spec = sample_random(space, trial_seed)
            attempt += 1
            report = subnetwork_cost(space, spec)
            if report.total_macs > config.budget:
                n_rejected += 1
                continue
            if tol is not None and not _fraction_filter(report, fraction_reference, tol):
                n_fraction_rejected += 1
                continue
            candidates.append((len(candidates), spec, report, attempt - 1))
    if not candidates:
        raise InfeasibleBudgetError(
            "no sub-network satisfied the budget and allocation constraints"
        )

    scores = _score_all(candidates, evaluator, config.jobs)
    trials = [
        TrialRecord(index=i, spec=spec, cost=report, score=float(score), seed=seed)
        for (i, spec, report, seed), score in zip(candidates, scores)
    ]
    return SearchResult(
        best=_pick_best(trials),
        trials=trials,
        n_rejected=n_rejected,
        n_fraction_rejected=n_fraction_rejected,
    )


def run_constrained_search(space: SearchSpace, config: SearchConfig, rng_seed) -> SearchResult:
    """Sample until ``n_samples`` trials fit the budget, score them, and
    return the argmax (ties: lower cost, then earlier index).

    Deterministic per seed: trial i uses a seed derived from
    (rng_seed, attempt index), so the log is bit-identical across runs and
    across ``jobs`` settings.
    """
    return _run(space, config, rng_seed)


def run_proportional_baseline(
    space: SearchSpace,
    config: SearchConfig,
    rng_seed,
    reference: SubNetworkSpec | dict | None = None,
) -> SearchResult:
    """Constrained search restricted to trials whose per-module cost
    fractions match a reference allocation within ``fraction_tolerance``.

    ``reference`` is a spec (its cost fractions are used), an explicit
    fraction dict, or None for the space's hand-designed reference shape.
    """
    if reference is None:
        reference = reference_spec(space)
    if isinstance(reference, SubNetworkSpec):
        fractions = allocation_report(subnetwork_cost(space, reference))
    else:
        fractions = dict(reference)
        missing = [m for m in MODULE_FRACTION_KEYS if m not in fractions]
        if missing:
            raise SearchError(f"reference fractions missing {missing}")
    return _run(space, config, rng_seed, fraction_reference=fractions)


# --------------------------------------------------------------------------
# Reporting
# --------------------------------------------------------------------------


def pareto_report(trials: Sequence[TrialRecord]) -> list[TrialRecord]:
    """Maximal non-dominated set (lower cost, higher score), sorted by cost.

    A trial is dominated when another is no worse on both axes and strictly
    better on at least one.
    """
    if not trials:
        raise SearchError("need at least one trial")
    frontier = []
    for t in trials:
        dominated = any(
            (o.cost.total_macs <= t.cost.total_macs and o.score >= t.score)
            and (o.cost.total_macs < t.cost.total_macs or o.score > t.score)
            for o in trials
        )
        if not dominated:
            frontier.append(t)
    # drop duplicates on the (cost, score) plane, keeping the earliest
    seen = set()
    unique = []
    for t in sorted(frontier, key=lambda t: (t.cost.total_macs, t.index)):
        key = (t.cost.total_macs, t.score)
        if key not in seen:
            seen.add(key)
            unique.append(t)
    return unique


def write_trial_log(result: SearchResult, path) -> None:
    """Line-delimited trial log: a schema header, then one trial per line."""
    with open(path, "w") as fh:
        header = {
            "schema": TRIAL_LOG_SCHEMA,
            "n_trials": len(result.trials),
            "n_rejected": result.n_rejected,
            "n_fraction_rejected": result.n_fraction_rejected,
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for t in result.trials:
            fh.write(json.dumps(t.to_dict(), sort_keys=True) + "\n")


def read_trial_log(path) -> tuple[dict, list[dict]]:
    with open(path) as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or lines[0].get("schema") != TRIAL_LOG_SCHEMA:
        raise SearchError(f"not a {TRIAL_LOG_SCHEMA} file: {path}")
    return lines[0], lines[1:]


def summary_lines(result: SearchResult) -> list[str]:
    """Cost-allocation summary of the best trial, one row per sub-module."""
    best = result.best
    f = best.fractions()
    lines = [
        f"{'module':<10} {'GMACs':>10} {'share':>7}",
    ]
    for mod in MODULE_FRACTION_KEYS:
        macs = best.cost.macs[mod]
        if mod == "handhead":
            macs *= best.cost.hand_multiplicity
            label = f"{mod} x{best.cost.hand_multiplicity}"
        else:
            label = mod
        lines.append(f"{label:<10} {macs / 1e9:>10.4f} {f[mod]:>6.1%}")
    lines.append(f"{'total':<10} {best.cost.total_macs / 1e9:>10.4f} {'100.0%':>7}")
    lines.append(f"best score {best.score:.6f} (trial {best.index})")
    lines.append(
        f"trials {len(result.trials)}, rejected {result.n_rejected} over budget"
        + (
            f", {result.n_fraction_rejected} off-allocation"
            if result.n_fraction_rejected
            else ""
        )
    )
    return lines
