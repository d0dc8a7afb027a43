"""Vote-proportion uncertainty estimators over the latent and input spaces.

Both estimators run n forward passes per sample and report c_positive, the
fraction of positive predictions. The first pass is always the deterministic
one (z = mu on the original input); the remaining n - 1 passes vary either
the latent draw (epistemic) or the input via additive Gaussian noise
(aleatoric, with the latent held at mu so only input noise contributes).

Records built from the votes use r = max(c, 1 - c) as confidence and the
majority vote as the label; an exact tie at 0.5 predicts positive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DataSplit, FeatureScaler, Sample, perturb
from .metrics import PredictionRecord
from .model import VaeClassifier

KINDS = ("epistemic", "aleatoric")


@dataclass
class UncertaintyEstimate:
    c_positive: float
    n_samples: int
    kind: str
    predictions: np.ndarray  # (n,) per-pass predicted labels

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError(f"need at least one pass, got {self.n_samples}")
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")


def _predict_labels(model: VaeClassifier, z: np.ndarray) -> np.ndarray:
    return np.argmax(model.classify_values(z), axis=1)


def epistemic(model: VaeClassifier, x: np.ndarray, n: int = 20,
              rng: np.random.Generator | None = None) -> UncertaintyEstimate:
    """Vote over one deterministic latent plus n - 1 reparameterized draws."""
    if n < 1:
        raise ValueError(f"need at least one pass, got n={n}")
    if n > 1 and rng is None:
        raise ValueError("latent sampling requires an rng")
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    mu, lv = model.encode_values(x)
    preds = [int(_predict_labels(model, mu)[0])]
    if n > 1:
        sigma = np.exp(lv / 2.0)
        eps = rng.standard_normal((n - 1, mu.shape[1]))
        z = mu + sigma * eps
        preds.extend(int(p) for p in _predict_labels(model, z))
    preds = np.array(preds, dtype=np.int64)
    return UncertaintyEstimate(c_positive=float(preds.mean()), n_samples=n,
                               kind="epistemic", predictions=preds)


def aleatoric(model: VaeClassifier, sample: Sample, n: int = 20,
              sigma: float = 0.2, rng: np.random.Generator | None = None,
              scaler: FeatureScaler | None = None) -> UncertaintyEstimate:
    """Vote over the original input plus n - 1 noisy copies, latent kept at mu.

    Noise is added in raw feature space; when a scaler is given, each copy is
    scaled after perturbation, matching how training inputs were prepared.
    """
    if n < 1:
        raise ValueError(f"need at least one pass, got n={n}")
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if n > 1 and sigma > 0 and rng is None:
        raise ValueError("input perturbation requires an rng")
    rows = [sample.x]
    for _ in range(n - 1):
        rows.append(perturb(sample, sigma, rng).x if sigma > 0 else sample.x.copy())
    xs = np.stack(rows)
    if scaler is not None:
        xs = scaler.transform(xs)
    mu, _ = model.encode_values(xs)
    preds = _predict_labels(model, mu).astype(np.int64)
    return UncertaintyEstimate(c_positive=float(preds.mean()), n_samples=n,
                               kind="aleatoric", predictions=preds)


def record_from_votes(est: UncertaintyEstimate, g: int) -> PredictionRecord:
    c = est.c_positive
    predicted = 1 if c >= 0.5 else 0   # tie predicts positive
    r = max(c, 1.0 - c)
    return PredictionRecord(probs=np.array([1.0 - c, c]), r=r,
                            predicted=predicted, g=int(g),
                            correct=predicted == int(g))


def uncertainty_records(model: VaeClassifier, split: DataSplit, kind: str,
                        scaler: FeatureScaler | None = None, n: int = 20,
                        sigma: float | None = None,
                        base_seed: tuple = (0,)) -> list[PredictionRecord]:
    """One vote-based record per test sample.

    Each sample gets its own rng substream keyed by (base_seed..., index), so
    results do not depend on evaluation order. Aleatoric sigma defaults to
    0.1x the generating class separation.
    """
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    if sigma is None:
        sigma = 0.1 * float(split.params.get("separation", 2.0))
    records = []
    for i, sample in enumerate(split.test):
        rng = np.random.default_rng(tuple(base_seed) + (i,))
        if kind == "epistemic":
            x = sample.x[None, :]
            if scaler is not None:
                x = scaler.transform(x)
            est = epistemic(model, x[0], n=n, rng=rng)
        else:
            est = aleatoric(model, sample, n=n, sigma=sigma, rng=rng, scaler=scaler)
        records.append(record_from_votes(est, sample.g))
    return records


def epistemic_batch(model: VaeClassifier, xs: np.ndarray, n: int = 20,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """c_positive per row of xs, sharing one rng across the batch.

    Used during confidence-weight training, where each batch draws its C_i
    from a dedicated substream. Consumes (n - 1) draws of shape xs.shape[0]
    x latent regardless of content, keeping the stream layout stable.
    """
    if n < 1:
        raise ValueError(f"need at least one pass, got n={n}")
    if n > 1 and rng is None:
        raise ValueError("latent sampling requires an rng")
    xs = np.asarray(xs, dtype=np.float64)
    mu, lv = model.encode_values(xs)
    counts = (_predict_labels(model, mu) == 1).astype(np.float64)
    if n > 1:
        sigma = np.exp(lv / 2.0)
        for _ in range(n - 1):
            z = mu + sigma * rng.standard_normal(mu.shape)
            counts += _predict_labels(model, z) == 1
    return counts / n
