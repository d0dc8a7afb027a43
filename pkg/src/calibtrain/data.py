"""Seeded synthetic binary-classification data with analytic posteriors.

The generator draws two class-conditional unit-covariance Gaussians whose
means sit at +/- separation/2 along the first coordinate. P(g=1 | x) is then
a logistic function of x[0] (shifted by the log prior ratio when classes are
imbalanced), which gives an exact calibration target. Label noise flips each
label with a fixed rate and adjusts the stored posterior accordingly, so the
recorded posterior always matches the label-generating process.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class Sample:
    x: np.ndarray
    g: int
    true_posterior: float


@dataclass
class DataSplit:
    train: list[Sample]
    validation: list[Sample]
    test: list[Sample]
    seed: int
    params: dict = field(default_factory=dict)

    def class_counts(self) -> dict[str, tuple[int, int]]:
        out = {}
        for name in ("train", "validation", "test"):
            samples = getattr(self, name)
            pos = sum(s.g for s in samples)
            out[name] = (len(samples) - pos, pos)
        return out


def features(samples: list[Sample]) -> np.ndarray:
    return np.stack([s.x for s in samples])


def labels(samples: list[Sample]) -> np.ndarray:
    return np.array([s.g for s in samples], dtype=np.int64)


def posteriors(samples: list[Sample]) -> np.ndarray:
    return np.array([s.true_posterior for s in samples])


def _stable_logistic(t: np.ndarray) -> np.ndarray:
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def generate_gaussian_mixture(
    sizes: tuple[int, int, int],
    d: int = 8,
    separation: float = 2.0,
    noise_rate: float = 0.0,
    positive_fraction: float = 0.5,
    seed: int = 0,
) -> DataSplit:
    """Draw disjoint train/validation/test splits from the mixture.

    ``sizes`` gives the three split sizes; their sum must be at least 40.
    ``noise_rate`` in [0, 0.5) flips labels after the Bernoulli draw, and the
    stored posterior is adjusted to p*(1-rho) + (1-p)*rho. Both classes must
    land in every split, otherwise the draw is rejected.
    """
    n = int(sum(sizes))
    if n < 40:
        raise ValueError(f"need at least 40 samples in total, got {n}")
    if any(s <= 0 for s in sizes):
        raise ValueError(f"every split must be nonempty, got sizes {sizes}")
    if separation <= 0:
        raise ValueError(f"separation must be positive, got {separation}")
    if not (0.0 <= noise_rate < 0.5):
        raise ValueError(f"noise_rate must lie in [0, 0.5), got {noise_rate}")
    if not (0.0 < positive_fraction < 1.0):
        raise ValueError(f"positive_fraction must lie in (0, 1), got {positive_fraction}")
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")

    rng = np.random.default_rng(seed)
    component = rng.random(n) < positive_fraction
    x = rng.standard_normal((n, d))
    x[:, 0] += np.where(component, separation / 2.0, -separation / 2.0)

    prior_logit = np.log(positive_fraction / (1.0 - positive_fraction))
    p_clean = _stable_logistic(separation * x[:, 0] + prior_logit)
    g = (rng.random(n) < p_clean).astype(np.int64)
    flips = rng.random(n) < noise_rate
    g = np.where(flips, 1 - g, g)
    p_noisy = p_clean * (1.0 - noise_rate) + (1.0 - p_clean) * noise_rate

    samples = [Sample(x[i], int(g[i]), float(p_noisy[i])) for i in range(n)]
    n_train, n_val, n_test = (int(s) for s in sizes)
    split = DataSplit(
        train=samples[:n_train],
        validation=samples[n_train:n_train + n_val],
        test=samples[n_train + n_val:n_train + n_val + n_test],
        seed=int(seed),
        params={
            "sizes": [n_train, n_val, n_test],
            "d": int(d),
            "separation": float(separation),
            "noise_rate": float(noise_rate),
            "positive_fraction": float(positive_fraction),
        },
    )
    for name, samples_ in (("train", split.train), ("validation", split.validation),
                           ("test", split.test)):
        present = {s.g for s in samples_}
        if present != {0, 1}:
            raise ValueError(
                f"split {name!r} is missing a class (seed {seed}); "
                "enlarge the split or change the seed"
            )
    return split


def perturb(sample: Sample, sigma: float, rng: np.random.Generator) -> Sample:
    """Additive Gaussian input noise; label and recorded posterior unchanged."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return Sample(sample.x.copy(), sample.g, sample.true_posterior)
    return Sample(sample.x + rng.standard_normal(sample.x.shape) * sigma,
                  sample.g, sample.true_posterior)


class FeatureScaler:
    """Min-max scaling to [0, 1], fitted on the training split.

    Transformed values are clipped into [0, 1] so validation/test features
    outside the training range stay valid reconstruction targets. Degenerate
    coordinates (max == min) map to 0.5.
    """

    def __init__(self):
        self.lo: np.ndarray | None = None
        self.hi: np.ndarray | None = None

    def fit(self, x: np.ndarray) -> "FeatureScaler":
        self.lo = x.min(axis=0)
        self.hi = x.max(axis=0)
        return self

    def transform(self, x: np.ndarray) -> np.ndarray:
        if self.lo is None:
            raise RuntimeError("scaler must be fitted before transform")
        span = self.hi - self.lo
        safe = np.where(span > 0, span, 1.0)
        scaled = (x - self.lo) / safe
        scaled = np.where(span > 0, scaled, 0.5)
        return np.clip(scaled, 0.0, 1.0)

    def fit_transform(self, x: np.ndarray) -> np.ndarray:
        return self.fit(x).transform(x)


# ---------------------------------------------------------------------------
# CSV serialization (header: x0..x{d-1},label,posterior) plus a JSON manifest
# ---------------------------------------------------------------------------

def _fmt(value: float) -> str:
    return repr(float(value))


def write_split(split: DataSplit, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    d = split.params.get("d", len(split.train[0].x))
    header = ",".join([f"x{i}" for i in range(d)] + ["label", "posterior"])
    for name, samples in (("train", split.train), ("validation", split.validation),
                          ("test", split.test)):
        lines = [header]
        for s in samples:
            cells = [_fmt(v) for v in s.x] + [str(s.g), _fmt(s.true_posterior)]
            lines.append(",".join(cells))
        (out / f"{name}.csv").write_text("\n".join(lines) + "\n")
    manifest = {
        "seed": split.seed,
        "params": split.params,
        "class_counts": {k: list(v) for k, v in split.class_counts().items()},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_split(in_dir: str | Path) -> DataSplit:
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())

    def load(name: str) -> list[Sample]:
        lines = (src / f"{name}.csv").read_text().strip().split("\n")
        samples = []
        for line in lines[1:]:
            cells = line.split(",")
            x = np.array([float(c) for c in cells[:-2]])
            samples.append(Sample(x, int(cells[-2]), float(cells[-1])))
        return samples

    return DataSplit(train=load("train"), validation=load("validation"),
                     test=load("test"), seed=manifest["seed"],
                     params=manifest["params"])
