"""Label histograms and the calibrated Laplace mechanism.

Every histogram that leaves a node is noised here. The mechanism is the
plain Laplace one for counting queries: sensitivity 1, scale 1/epsilon,
location 0. Noised counts are kept raw (negative and fractional values
included) — clamping would bias the mean and is extra post-processing we
deliberately avoid.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

COUNT_SENSITIVITY = 1.0  # one data point moves one bin count by at most 1


class PrivacyError(ValueError):
    """Misuse of the privacy machinery (double noising, bad parameters)."""


@dataclass(frozen=True)
class BinSpec:
    """Equal-width binning of a label range."""

    lower: float
    upper: float
    bin_count: int

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"lower {self.lower} must be < upper {self.upper}")
        if self.bin_count < 1:
            raise ValueError(f"bin_count must be >= 1, got {self.bin_count}")

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.lower, self.upper, self.bin_count + 1)


@dataclass(frozen=True)
class NoisyHistogram:
    """Per-window label counts for one node/channel.

    ``epsilon`` is None for raw counts and the privacy parameter once
    noised. Raw counts are non-negative integers summing to the window
    size; noised counts are whatever the mechanism produced.
    """

    counts: np.ndarray
    epsilon: Optional[float]
    window_index: int
    channel: str
    origin: object

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=float)
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def bin_count(self) -> int:
        return self.counts.shape[0]

    @property
    def is_noised(self) -> bool:
        return self.epsilon is not None


@dataclass(frozen=True)
class LaplaceParams:
    """Scale/location of the mechanism, calibrated as scale = sensitivity/epsilon."""

    scale: float
    location: float = 0.0
    sensitivity: float = COUNT_SENSITIVITY

    def __post_init__(self):
        if self.scale <= 0:
            raise PrivacyError(f"Laplace scale must be positive, got {self.scale}")

    @classmethod
    def for_epsilon(cls, epsilon: float, sensitivity: float = COUNT_SENSITIVITY):
        if epsilon <= 0:
            raise PrivacyError(f"epsilon must be positive, got {epsilon}")
        return cls(scale=sensitivity / epsilon, sensitivity=sensitivity)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.exp(-np.abs(x - self.location) / self.scale) / (2.0 * self.scale)


def laplace_sample(params: LaplaceParams, rng: np.random.Generator, size=None):
    """Draw from Laplace(location, scale); deterministic under a seeded rng."""
    return rng.laplace(loc=params.location, scale=params.scale, size=size)


def build_histogram(
    window: np.ndarray,
    spec: BinSpec,
    *,
    window_index: int = 0,
    channel: str = "",
    origin=None,
) -> NoisyHistogram:
    """Count window values into the bins of ``spec``.

    Out-of-range values are clamped into the boundary bins so the counts
    always sum to the window length.
    """
    values = np.asarray(window, dtype=float)
    if values.size == 0:
        raise ValueError("cannot build a histogram from an empty window")
    nan_idx = np.flatnonzero(np.isnan(values))
    if nan_idx.size:
        raise ValueError(f"NaN label value at window position {nan_idx[0]}")
    width = (spec.upper - spec.lower) / spec.bin_count
    idx = np.floor((values - spec.lower) / width).astype(int)
    idx = np.clip(idx, 0, spec.bin_count - 1)
    counts = np.bincount(idx, minlength=spec.bin_count).astype(float)
    return NoisyHistogram(
        counts=counts,
        epsilon=None,
        window_index=window_index,
        channel=channel,
        origin=origin,
    )


def privatize(
    hist: NoisyHistogram, eps: float, rng: np.random.Generator
) -> NoisyHistogram:
    """Add independent Laplace(0, 1/eps) noise to every bin.

    Refuses already-noised input: noising twice would silently change the
    privacy budget.
    """
    if hist.is_noised:
        raise PrivacyError(
            f"histogram already noised with epsilon={hist.epsilon}; "
            "refusing to noise again"
        )
    params = LaplaceParams.for_epsilon(eps)
    noise = laplace_sample(params, rng, size=hist.counts.shape)
    return replace(hist, counts=hist.counts + noise, epsilon=float(eps))


def average_histograms(hists) -> np.ndarray:
    """Elementwise mean of histogram counts sharing one spec/channel/window."""
    hists = list(hists)
    if not hists:
        raise ValueError(
            "cannot average an empty histogram list; apply the fallback rule"
        )
    bins = hists[0].bin_count
    for h in hists:
        if h.bin_count != bins:
            raise ValueError(
                f"mismatched bin counts: {bins} vs {h.bin_count}"
            )
    return np.mean([h.counts for h in hists], axis=0)
