"""Exhaustive hyperparameter grid search with an inner 2-fold split.

The training split is shuffled once (substream (data_seed, 5)) and halved;
each grid cell trains on one half and validates on the other, both ways, and
is scored by the mean of the two fold scores under the configured selection
criterion. The per-cell table lists every cell, so the winner is auditable.
"""

from __future__ import annotations

import dataclasses
import itertools
import logging
from dataclasses import dataclass

import numpy as np

from ..data import DataSplit
from ..losses import _RELEVANT, _SHARED, LossSpec
from .config import ExperimentConfig
from .training import select_model, train

log_ = logging.getLogger(__name__)


@dataclass
class GridCell:
    values: dict           # grid key -> candidate value
    fold_scores: list[float]
    mean_score: float
    failed: bool = False


@dataclass
class GridResult:
    cells: list[GridCell]
    best: LossSpec
    criterion: str


def _fold_splits(split: DataSplit, data_seed: int) -> list[DataSplit]:
    order = np.random.default_rng((data_seed, 5)).permutation(len(split.train))
    half = len(split.train) // 2
    a = [split.train[i] for i in order[:half]]
    b = [split.train[i] for i in order[half:]]
    mk = lambda tr, va: DataSplit(train=tr, validation=va, test=split.test,
                                  seed=split.seed, params=split.params)
    return [mk(a, b), mk(b, a)]


def grid_search(config: ExperimentConfig, split: DataSplit) -> GridResult:
    if not config.grid:
        raise ValueError("grid search needs a nonempty grid")
    base = LossSpec.from_dict(dict(config.loss))
    relevant = _SHARED | _RELEVANT[base.strategy]
    for key in config.grid:
        if key not in relevant:
            log_.warning("grid key %r is not consumed by strategy %r; "
                         "cells will differ only in the recorded config", key, base.strategy)

    keys = sorted(config.grid)
    folds = _fold_splits(split, config.data_seed)
    seed = config.seeds[0]
    cells = []
    for combo in itertools.product(*(config.grid[k] for k in keys)):
        values = dict(zip(keys, combo))
        spec = dataclasses.replace(base, **values)
        fold_scores = []
        failed = False
        for fold in folds:
            history = train(config, fold, seed=seed, spec=spec)
            if history.failed or not history.entries:
                failed = True
                break
            entry, _ = select_model(history, config.criterion)
            fold_scores.append(entry.val_bacc if config.criterion == "max-val-bacc"
                               else entry.val_ece)
        if failed:
            cells.append(GridCell(values=values, fold_scores=fold_scores,
                                  mean_score=float("nan"), failed=True))
        else:
            cells.append(GridCell(values=values, fold_scores=fold_scores,
                                  mean_score=float(np.mean(fold_scores))))

    scored = [c for c in cells if not c.failed]
    if not scored:
        raise RuntimeError("every grid cell failed")
    if config.criterion == "max-val-bacc":
        winner = max(scored, key=lambda c: c.mean_score)
    else:
        winner = min(scored, key=lambda c: c.mean_score)
    best = dataclasses.replace(base, **winner.values)
    return GridResult(cells=cells, best=best, criterion=config.criterion)
