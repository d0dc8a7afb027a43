"""Differentiable batch losses: baseline composite plus six uncertainty-aware
training strategies.

Every strategy produces a scalar graph node

    L = L_RE + lambda_kl * L_KL + lambda_c * L_C (+ lambda_n * L_N)

where L_N is the strategy-specific regularizer; the confidence-weight strategy
instead replaces L_C with a per-sample weighted cross-entropy and has no
lambda_n term. Coefficients that are exactly 0.0 short-circuit their term, so
the remaining graph (and its gradients) matches the reduced loss bitwise.

Confidence r_i is the probability of the arg-max class; the arg-max itself is
treated as locally constant, so gradients flow through the selected entries
only. Epistemic confidences C_i and the certain/uncertain partition are
stop-gradient constants.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    EPS,
    Node,
    absolute,
    constant,
    exp,
    log,
    mean,
    nsum,
    power,
    relu,
    softmax,
    tanh,
    transpose,
)
from .model import ForwardResult, kl_loss, reconstruction_loss

log_ = logging.getLogger(__name__)

STRATEGIES = (
    "baseline",
    "paired_confidence",
    "probability",
    "confidence_weight",
    "avuc",
    "soft_ece",
    "mmce",
)

# hyperparameters each strategy actually reads (beyond the shared lambdas)
_RELEVANT = {
    "baseline": set(),
    "paired_confidence": {"lambda_n", "margin"},
    "probability": {"lambda_n"},
    "confidence_weight": {"weight_floor"},
    "avuc": {"lambda_n", "avuc_threshold"},
    "soft_ece": {"lambda_n", "temperature", "n_bins", "norm_order"},
    "mmce": {"lambda_n", "kernel_width"},
}
_SHARED = {"strategy", "lambda_kl", "lambda_c"}


@dataclass
class LossSpec:
    """Strategy tag plus every tunable the strategies read.

    Defaults are single-task starting points; per-task sweeps are expected
    to re-tune them. weight_floor values above 1 are permitted: tuned optima
    have landed at w = 2 even though weights then exceed 1, and w = 1 makes
    the weighting constant (identical to baseline).
    """

    strategy: str
    lambda_kl: float = 0.001
    lambda_c: float = 3.0
    lambda_n: float = 1.0
    margin: float = 0.6
    weight_floor: float = 1.0
    temperature: float = 0.1
    n_bins: int = 15
    norm_order: float = 2.0
    kernel_width: float = 0.4
    avuc_threshold: float = 1.0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        for name in ("lambda_kl", "lambda_c", "lambda_n"):
            v = getattr(self, name)
            if v < 0:
                raise ValueError(f"{name} must be >= 0, got {v}")
        if not (0.0 <= self.margin <= 1.0):
            raise ValueError(f"margin must lie in [0, 1], got {self.margin}")
        if self.weight_floor < 0:
            raise ValueError(f"weight_floor must be >= 0, got {self.weight_floor}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.n_bins < 2:
            raise ValueError(f"n_bins must be >= 2, got {self.n_bins}")
        if self.norm_order < 1:
            raise ValueError(f"norm_order must be >= 1, got {self.norm_order}")
        if self.kernel_width <= 0:
            raise ValueError(f"kernel_width must be > 0, got {self.kernel_width}")
        if not (0.0 <= self.avuc_threshold <= 1.0):
            raise ValueError(f"avuc_threshold must lie in [0, 1], got {self.avuc_threshold}")

    @classmethod
    def from_dict(cls, d: dict) -> "LossSpec":
        """Parse a config mapping; irrelevant keys are ignored with a notice."""
        unknown = set(d) - _SHARED - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown loss config keys: {sorted(unknown)}")
        strategy = d.get("strategy")
        if strategy is None:
            raise ValueError("loss config must name a strategy")
        relevant = _SHARED | _RELEVANT.get(strategy, set())
        kept = {k: v for k, v in d.items() if k in relevant}
        ignored = sorted(set(d) - relevant)
        if ignored:
            log_.info("strategy %r ignores config keys %s", strategy, ignored)
        return cls(**kept)


@dataclass
class BatchView:
    """Per-batch classifier outputs with the derived constants the losses need."""

    probs: Node                       # (n, 2) graph node
    labels: np.ndarray                # (n,) ints in {0, 1}
    predicted: np.ndarray             # (n,) arg-max of probs
    correct: np.ndarray               # (n,) bools
    epistemic_conf: np.ndarray | None = None  # C_i, stop-gradient
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return len(self.labels)

    def _col(self, key: str, mask: np.ndarray) -> Node:
        if key not in self._cache:
            self._cache[key] = nsum(self.probs * constant(mask), axis=1)
        return self._cache[key]

    def r(self) -> Node:
        """(n, 1) confidence of the predicted class."""
        onehot = np.zeros((self.n, 2))
        onehot[np.arange(self.n), self.predicted] = 1.0
        return self._col("r", onehot)

    def prob_pos(self) -> Node:
        return self._col("pos", np.broadcast_to([0.0, 1.0], (self.n, 2)).copy())

    def prob_neg(self) -> Node:
        return self._col("neg", np.broadcast_to([1.0, 0.0], (self.n, 2)).copy())

    def true_prob(self) -> Node:
        """(n, 1) probability assigned to the true class."""
        onehot = np.zeros((self.n, 2))
        onehot[np.arange(self.n), self.labels] = 1.0
        return self._col("true", onehot)


def make_batch_view(probs: Node, labels: np.ndarray,
                    epistemic_conf: np.ndarray | None = None) -> BatchView:
    labels = np.asarray(labels, dtype=np.int64)
    if probs.value.ndim != 2 or probs.value.shape[1] != 2:
        raise ValueError(f"expected (n, 2) probabilities, got {probs.value.shape}")
    if labels.shape[0] != probs.value.shape[0]:
        raise ValueError("labels and probabilities disagree on batch size")
    predicted = np.argmax(probs.value, axis=1)
    if epistemic_conf is not None:
        epistemic_conf = np.asarray(epistemic_conf, dtype=np.float64)
        if epistemic_conf.shape != labels.shape:
            raise ValueError("epistemic confidences must be one scalar per sample")
    return BatchView(probs=probs, labels=labels, predicted=predicted,
                     correct=predicted == labels, epistemic_conf=epistemic_conf)


# ---------------------------------------------------------------------------
# classifier cross-entropy (the L_C term)
# ---------------------------------------------------------------------------

def classifier_bce(batch: BatchView) -> Node:
    return -mean(log(batch.true_prob()))


# ---------------------------------------------------------------------------
# strategy regularizers
# ---------------------------------------------------------------------------

def paired_confidence_loss(batch: BatchView, margin: float) -> Node:
    """Hinge on confidence gaps between incorrect and correct predictions,
    separately within the predicted-positive and predicted-negative sides.

    Each side sums max(P_i - P_j + margin, 0) over (i incorrect, j correct)
    pairs and divides by its incorrect count alone (not the pair count).
    A side with no incorrect or no correct members contributes 0.
    """
    total: Node | None = None
    for side_prob, side_mask in ((batch.prob_pos(), batch.predicted == 1),
                                 (batch.prob_neg(), batch.predicted == 0)):
        inc = (side_mask & ~batch.correct).astype(np.float64)[:, None]
        cor = (side_mask & batch.correct).astype(np.float64)[:, None]
        n_inc = inc.sum()
        if n_inc == 0 or cor.sum() == 0:
            continue
        diff = side_prob - transpose(side_prob)          # diff[i, j] = P_i - P_j
        hinge = relu(diff + margin)
        pair_mask = constant(inc @ cor.T)                # 1 where (i inc, j cor)
        side = nsum(hinge * pair_mask) * (1.0 / n_inc)
        total = side if total is None else total + side
    return total if total is not None else constant(0.0)


def probability_loss(batch: BatchView) -> Node:
    """Mean wrong-side probability, averaged per true class then summed."""
    pos = (batch.labels == 1).astype(np.float64)[:, None]
    neg = (batch.labels == 0).astype(np.float64)[:, None]
    total: Node | None = None
    if pos.sum() > 0:
        total = nsum(batch.prob_neg() * constant(pos)) * (1.0 / pos.sum())
    if neg.sum() > 0:
        term = nsum(batch.prob_pos() * constant(neg)) * (1.0 / neg.sum())
        total = term if total is None else total + term
    return total if total is not None else constant(0.0)


def confidence_weights(batch: BatchView, weight_floor: float) -> np.ndarray:
    """Per-sample floored weights from epistemic positive-vote fractions C_i.

    W_i = g_i (1 - C_i) + (1 - g_i) C_i, then W_S = (1 - w) W + w. Constants:
    no gradient flows back into the sampling that produced C_i.
    """
    if batch.epistemic_conf is None:
        raise ValueError("confidence weighting needs epistemic confidences on the batch")
    c = batch.epistemic_conf
    g = batch.labels.astype(np.float64)
    w_raw = g * (1.0 - c) + (1.0 - g) * c
    return (1.0 - weight_floor) * w_raw + weight_floor


def weighted_classifier_loss(batch: BatchView, weight_floor: float) -> Node:
    weights = confidence_weights(batch, weight_floor)[:, None]
    return -mean(constant(weights) * log(batch.true_prob()))


def avuc_loss(batch: BatchView, threshold: float) -> Node:
    """Log-ratio of miscalibrated to calibrated soft counts.

    u_i is the entropy of the predictive distribution normalized to [0, 1];
    u_i < threshold marks a sample certain. Counts pair correctness with
    certainty: accurate-certain r(1 - tanh u), accurate-uncertain r tanh u,
    inaccurate-certain (1 - r)(1 - tanh u), inaccurate-uncertain
    (1 - r) tanh u.
    """
    r = batch.r()
    ent = -nsum(batch.probs * log(batch.probs), axis=1)
    u = ent * (1.0 / math.log(2.0))
    tu = tanh(u)
    certain = (u.value < threshold).astype(np.float64)
    acc = batch.correct.astype(np.float64)[:, None]
    m_ac = constant(acc * certain)
    m_au = constant(acc * (1.0 - certain))
    m_ic = constant((1.0 - acc) * certain)
    m_iu = constant((1.0 - acc) * (1.0 - certain))
    one = constant(1.0)
    n_ac = nsum(m_ac * r * (one - tu))
    n_au = nsum(m_au * r * tu)
    n_ic = nsum(m_ic * (one - r) * (one - tu))
    n_iu = nsum(m_iu * (one - r) * tu)
    ratio = (n_au + n_ic) / (n_ac + n_iu + EPS)
    return log(one + ratio)


def soft_ece_loss(batch: BatchView, n_bins: int, temperature: float,
                  norm_order: float) -> Node:
    """Soft-binned expected calibration error.

    Membership of sample i in bin m is a softmax over -(r_i - c_m)^2 / T with
    centers c_m = (m + 0.5)/M; as T -> 0 membership hardens to the nearest
    center, which coincides with equal-width binning away from boundaries.
    """
    r = batch.r()
    centers = (np.arange(n_bins) + 0.5) / n_bins
    diff = r - constant(centers[None, :])                # (n, M)
    membership = softmax(diff * diff * (-1.0 / temperature))
    acc = constant(batch.correct.astype(np.float64)[:, None])
    b = nsum(membership, axis=0)                         # (1, M) soft counts
    denom = b + EPS
    a_m = nsum(membership * acc, axis=0) / denom
    r_m = nsum(membership * r, axis=0) / denom
    weights = b * (1.0 / batch.n)
    inner = nsum(weights * power(absolute(a_m - r_m), norm_order))
    return power(inner, 1.0 / norm_order)


def mmce_loss(batch: BatchView, kernel_width: float) -> Node:
    """Kernel-embedding calibration error with a Laplacian kernel.

    Quadratic forms over the kernel matrix: incorrect pairs weighted r_i r_j,
    correct pairs weighted (1 - r_i)(1 - r_j), minus twice the cross term,
    each normalized by its own pair count. Missing sides contribute 0.
    """
    r = batch.r()
    k = exp(absolute(r - transpose(r)) * (-1.0 / kernel_width))   # (n, n)
    cor = batch.correct.astype(np.float64)[:, None]
    inc = 1.0 - cor
    m = cor.sum()
    n_inc = inc.sum()
    total: Node | None = None
    if n_inc > 0:
        u = r * constant(inc)
        total = nsum(u * (k @ u)) * (1.0 / n_inc ** 2)
    if m > 0:
        v = (constant(1.0) - r) * constant(cor)
        term = nsum(v * (k @ v)) * (1.0 / m ** 2)
        total = term if total is None else total + term
    if m > 0 and n_inc > 0:
        u = r * constant(inc)
        v = (constant(1.0) - r) * constant(cor)
        total = total + nsum(v * (k @ u)) * (-2.0 / (m * n_inc))
    assert total is not None
    return power(relu(total), 0.5)


# ---------------------------------------------------------------------------
# composite dispatch
# ---------------------------------------------------------------------------

def strategy_regularizer(batch: BatchView, spec: LossSpec) -> Node | None:
    if spec.strategy == "paired_confidence":
        return paired_confidence_loss(batch, spec.margin)
    if spec.strategy == "probability":
        return probability_loss(batch)
    if spec.strategy == "avuc":
        return avuc_loss(batch, spec.avuc_threshold)
    if spec.strategy == "soft_ece":
        return soft_ece_loss(batch, spec.n_bins, spec.temperature, spec.norm_order)
    if spec.strategy == "mmce":
        return mmce_loss(batch, spec.kernel_width)
    return None


def total_loss(x: np.ndarray, result: ForwardResult, labels: np.ndarray,
               spec: LossSpec,
               epistemic_conf: np.ndarray | None = None) -> tuple[Node, BatchView]:
    """Assemble the full training loss for one batch.

    Terms with a coefficient of exactly 0.0 are omitted from the graph, so
    dropping a term and zeroing its coefficient are indistinguishable, down
    to the gradients.
    """
    batch = make_batch_view(result.probs, labels, epistemic_conf)
    loss = reconstruction_loss(x, result.xhat)
    if spec.lambda_kl != 0.0:
        loss = loss + kl_loss(result.mu_z, result.logvar_z) * spec.lambda_kl
    if spec.lambda_c != 0.0:
        if spec.strategy == "confidence_weight":
            loss = loss + weighted_classifier_loss(batch, spec.weight_floor) * spec.lambda_c
        else:
            loss = loss + classifier_bce(batch) * spec.lambda_c
    if spec.strategy not in ("baseline", "confidence_weight") and spec.lambda_n != 0.0:
        loss = loss + strategy_regularizer(batch, spec) * spec.lambda_n
    return loss, batch
