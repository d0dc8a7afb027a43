"""Mini-batch training loop with per-epoch validation tracking.

Randomness is split into named substreams of the run seed so strategies stay
trajectory-comparable: (seed, 0) parameter init, (seed, 1) batch shuffling
and latent draws, (seed, 2, epoch, batch) the epistemic votes consumed only
by the confidence-weight strategy. Substreams (seed, 3) and (seed, 4) are
reserved for test-time epistemic/aleatoric estimation.

The history keeps the full per-epoch metric curve; parameters are retained
only for the best epoch under each selection criterion (strict improvement,
so ties resolve to the earliest epoch).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from ..autodiff import Adam, NonFiniteGradient, backward
from ..data import DataSplit, FeatureScaler, features, labels
from ..losses import LossSpec, total_loss
from ..metrics import PredictionRecord, classification_metrics, ece, records_from_probs
from ..model import NonFiniteActivation, VaeClassifier
from ..uncertainty import epistemic_batch
from .config import CRITERIA, ExperimentConfig

AVUC_WARMUP_EPOCHS = 3


@dataclass
class EpochEntry:
    epoch: int
    train_loss: float
    val_bacc: float
    val_ece: float


@dataclass
class EpochHistory:
    entries: list[EpochEntry] = field(default_factory=list)
    # criterion -> {"epoch": int, "value": float, "params": {name: array}}
    best: dict = field(default_factory=dict)
    failed: bool = False
    failure: str | None = None

    def record(self, entry: EpochEntry, params_snapshot) -> None:
        self.entries.append(entry)
        for criterion in CRITERIA:
            value = entry.val_bacc if criterion == "max-val-bacc" else entry.val_ece
            cur = self.best.get(criterion)
            better = (cur is None
                      or (criterion == "max-val-bacc" and value > cur["value"])
                      or (criterion == "min-val-ece" and value < cur["value"]))
            if better:
                self.best[criterion] = {"epoch": entry.epoch, "value": value,
                                        "params": params_snapshot()}


def select_model(history: EpochHistory, criterion: str):
    """Pick the best epoch under the criterion; ties go to the earliest epoch.

    Returns (EpochEntry, params-or-None). Raises on an empty history.
    """
    if criterion not in CRITERIA:
        raise ValueError(f"criterion must be one of {CRITERIA}, got {criterion!r}")
    if not history.entries:
        raise ValueError("cannot select a model from an empty history")
    if criterion == "max-val-bacc":
        entry = max(history.entries, key=lambda e: (e.val_bacc, -e.epoch))
    else:
        entry = min(history.entries, key=lambda e: (e.val_ece, e.epoch))
    stored = history.best.get(criterion)
    params = stored["params"] if stored and stored["epoch"] == entry.epoch else None
    return entry, params


def evaluate_records(model: VaeClassifier, xs: np.ndarray,
                     gs: np.ndarray) -> list[PredictionRecord]:
    """Deterministic softmax records (z = mu) over already-scaled features."""
    return records_from_probs(model.predict_probs(xs), gs)


def _mean_accurate_entropy(probs: np.ndarray, correct: np.ndarray,
                           fallback: float) -> float:
    if not correct.any():
        return fallback
    p = np.clip(probs[correct], 1e-12, 1.0)
    ent = -(p * np.log(p)).sum(axis=1) / math.log(2.0)
    return float(min(ent.mean(), 1.0))


def train(config: ExperimentConfig, split: DataSplit, seed: int,
          spec: LossSpec | None = None) -> EpochHistory:
    """Run one training job; returns the epoch history with best checkpoints.

    A non-finite loss or gradient aborts the run, keeping the history built
    so far and the failure message.
    """
    spec = spec if spec is not None else LossSpec.from_dict(dict(config.loss))
    scaler = FeatureScaler().fit(features(split.train))
    x_train = scaler.transform(features(split.train))
    g_train = labels(split.train)
    x_val = scaler.transform(features(split.validation))
    g_val = labels(split.validation)

    model = VaeClassifier(d=config.d, hidden=config.hidden, latent=config.latent,
                          seed=seed)
    opt = Adam(model.params, lr=config.lr_vae,
               lr_overrides={"clf.": config.lr_classifier})
    rng = np.random.default_rng((seed, 1))
    history = EpochHistory()
    n = x_train.shape[0]
    threshold = 1.0

    for epoch in range(config.epochs):
        epoch_spec = spec
        if spec.strategy == "avuc":
            t = 1.0 if epoch < AVUC_WARMUP_EPOCHS else threshold
            epoch_spec = dataclasses.replace(spec, avuc_threshold=t)
        order = rng.permutation(n)
        batch_losses = []
        epoch_probs, epoch_correct = [], []
        try:
            for b, start in enumerate(range(0, n, config.batch_size)):
                idx = order[start:start + config.batch_size]
                xb, gb = x_train[idx], g_train[idx]
                out = model.forward(xb, rng=rng, sample_latent=True)
                conf = None
                if spec.strategy == "confidence_weight":
                    conf = epistemic_batch(model, xb, n=config.n_uncertainty,
                                           rng=np.random.default_rng((seed, 2, epoch, b)))
                loss, batch = total_loss(xb, out, gb, epoch_spec, epistemic_conf=conf)
                if not np.isfinite(loss.value):
                    raise NonFiniteGradient(f"non-finite loss at epoch {epoch} batch {b}")
                model.params.zero_grad()
                backward(loss)
                opt.step()
                batch_losses.append(float(loss.value))
                if spec.strategy == "avuc":
                    epoch_probs.append(out.probs.value)
                    epoch_correct.append(batch.correct)
        except (NonFiniteGradient, NonFiniteActivation) as err:
            history.failed = True
            history.failure = str(err)
            return history

        if spec.strategy == "avuc" and epoch_probs:
            threshold = _mean_accurate_entropy(np.concatenate(epoch_probs),
                                               np.concatenate(epoch_correct),
                                               fallback=threshold)

        val_records = evaluate_records(model, x_val, g_val)
        bacc = classification_metrics(val_records)["bacc"]
        entry = EpochEntry(epoch=epoch,
                           train_loss=float(np.mean(batch_losses)),
                           val_bacc=float(bacc) if bacc is not None else 0.0,
                           val_ece=ece(val_records, 15))
        history.record(entry, model.params.copy_values)
    return history
