"""Estimator-style front ends for supernet training and architecture search.

Both classes follow the fit/attribute convention: constructor arguments are
plain hyperparameters, ``fit`` does the work, and learned state lands in
trailing-underscore attributes.  They wrap the functional APIs in
:mod:`wbnas.supernet` and :mod:`wbnas.search`.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import search as _search
from . import supernet as _supernet
from .space import SearchSpace, get_preset, sample_extreme


def _resolve_space(space) -> SearchSpace:
    if isinstance(space, SearchSpace):
        return space
    if isinstance(space, str):
        return get_preset(space)
    raise TypeError(f"space must be a SearchSpace or preset name, got {type(space)}")


def _require_seed(random_state):
    if random_state is None:
        raise ValueError("random_state is required for reproducibility")
    return int(random_state)


class SupernetTrainer(BaseEstimator):
    """Weight-shared supernet trained with the sandwich rule.

    Parameters mirror the training loop: every step runs the biggest, the
    smallest, and ``n_random`` random sub-networks, distilling the smaller
    ones from the biggest's predictions.
    """

    def __init__(
        self,
        space="toy",
        steps=50,
        lr=0.05,
        n_random=2,
        random_state=None,
    ):
        self.space = space
        self.steps = steps
        self.lr = lr
        self.n_random = n_random
        self.random_state = random_state

    def fit(self, X=None, y=None):
        """Train on a list of :class:`wbnas.supernet.TrainBatch`.

        ``X=None`` builds the synthetic blob task from the seed.  ``y`` is
        ignored (targets live inside the batches).
        """
        seed = _require_seed(self.random_state)
        space = _resolve_space(self.space)
        if X is None:
            X = _supernet.make_synthetic_task(seed, 2 * max(1, self.steps // 10) or 2)
        batches = list(X)
        if not batches:
            raise ValueError("need at least one training batch")
        params = _supernet.init_params(space, seed)
        history = []
        for step in range(self.steps):
            batch = batches[step % len(batches)]
            step_seed = np.random.SeedSequence([seed, step])
            params, results = _supernet.train_step_sandwich(
                params, space, batch, step_seed, self.lr, n_random=self.n_random
            )
            history.append(
                {label: breakdown.total for label, breakdown in results}
            )
        self.space_ = space
        self.params_ = params
        self.history_ = history
        self.n_steps_ = self.steps
        return self

    def predict(self, images):
        """Heatmaps of the biggest sub-network for a batch of images."""
        if not hasattr(self, "params_"):
            raise RuntimeError("call fit before predict")
        spec = sample_extreme(self.space_, "biggest")
        outputs, _ = _supernet.forward_subnet(self.params_, self.space_, spec, images)
        return {name: node.value for name, node in outputs.items()}


class ConstrainedSearch(BaseEstimator):
    """Budget-constrained sub-network search over a declarative space."""

    def __init__(
        self,
        budget=1e9,
        n_samples=500,
        evaluator="neg_total_cost",
        allocation_mode="automatic",
        fraction_tolerance=0.02,
        exhaustive=False,
        jobs=1,
        random_state=None,
    ):
        self.budget = budget
        self.n_samples = n_samples
        self.evaluator = evaluator
        self.allocation_mode = allocation_mode
        self.fraction_tolerance = fraction_tolerance
        self.exhaustive = exhaustive
        self.jobs = jobs
        self.random_state = random_state

    def fit(self, X, y=None):
        """Search the space ``X`` (a SearchSpace or preset name)."""
        seed = _require_seed(self.random_state)
        space = _resolve_space(X)
        config = _search.SearchConfig(
            budget=self.budget,
            n_samples=self.n_samples,
            evaluator=self.evaluator,
            allocation_mode=self.allocation_mode,
            fraction_tolerance=self.fraction_tolerance,
            exhaustive=self.exhaustive,
            jobs=self.jobs,
        )
        if self.allocation_mode == "proportional":
            result = _search.run_proportional_baseline(space, config, seed)
        else:
            result = _search.run_constrained_search(space, config, seed)
        self.space_ = space
        self.result_ = result
        self.best_spec_ = result.best.spec
        self.best_score_ = result.best.score
        self.best_cost_ = result.best.cost
        self.trials_ = result.trials
        return self

    def pareto_front_(self):
        if not hasattr(self, "result_"):
            raise RuntimeError("call fit first")
        return _search.pareto_report(self.trials_)
