"""Measurements behind the gradient-masking analysis.

All reductions run over images in dataset order, chunk by chunk, so every
report is a deterministic function of (model, dataset, settings).
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .attacks import AttackConfig, AttackMode, run_attack, input_gradients
from .data import Dataset
from .model import Activation, MlpModel, forward, surrogate_gain
from .numerics import (
    HistogramSpec,
    MagnitudeHistogram,
    kurtosis,
    magnitude_histogram,
    median_abs_nonzero,
    pearson,
)

DEFAULT_GAINS = tuple(10.0 ** (-k / 2) for k in range(11))  # 1, 10^-0.5, ..., 10^-5
SATURATION_DELTA = 1e-3


@dataclass
class GradientStatsReport:
    n_images: int
    n_elements: int
    exact_zero_elements: int
    all_zero_images: int
    zero_element_ratio: float
    all_zero_image_ratio: float
    median_nonzero_abs: float
    histogram: MagnitudeHistogram = field(repr=False)
    reference_median_nonzero_abs: float | None = None

    @property
    def nonzero_element_ratio(self) -> float:
        return 1.0 - self.zero_element_ratio

    @property
    def nonzero_image_ratio(self) -> float:
        return 1.0 - self.all_zero_image_ratio

    @property
    def median_ratio_to_reference(self) -> float | None:
        if self.reference_median_nonzero_abs is None:
            return None
        return self.median_nonzero_abs / self.reference_median_nonzero_abs

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "histogram"}
        d["median_ratio_to_reference"] = self.median_ratio_to_reference
        d["histogram"] = histogram_dict(self.histogram)
        return d

    def write_histogram_csv(self, path) -> None:
        write_histogram_csv(self.histogram, path)


def histogram_dict(h: MagnitudeHistogram) -> dict:
    nz = np.flatnonzero(h.counts)
    return {
        "exact_zero": h.exact_zero_count,
        "bins": [[h.edges[i], h.edges[i + 1], int(h.counts[i])] for i in nz],
    }


def write_histogram_csv(h: MagnitudeHistogram, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo_log10", "bin_hi_log10", "count"])
        for lo, hi, c in h.rows():
            w.writerow([lo, hi, c])
        w.writerow(["exact_zero", "exact_zero", h.exact_zero_count])


def collect_gradients(model: MlpModel, dataset: Dataset, chunk: int = 1000):
    """Yield input-gradient records over ``dataset`` in order."""
    for i in range(0, len(dataset), chunk):
        yield input_gradients(model, dataset.images[i:i + chunk], dataset.labels[i:i + chunk])


def gradient_stats(model: MlpModel, dataset: Dataset, spec: HistogramSpec | None = None,
                   reference: MlpModel | None = None, chunk: int = 1000) -> GradientStatsReport:
    """Exact-zero statistics of input gradients over every image in ``dataset``."""
    spec = spec or HistogramSpec()
    hist = None
    zeros = all_zero = 0
    nonzero_abs = []
    for rec in collect_gradients(model, dataset, chunk):
        g = rec.input_gradient
        h = magnitude_histogram(g, spec)
        hist = h if hist is None else hist.merged(h)
        zeros += int(rec.exact_zero_count.sum())
        all_zero += int(rec.all_zero.sum())
        nonzero_abs.append(np.abs(g[g != 0]).astype(np.float64))
    n_el = len(dataset) * model.dims[0]
    flat = np.concatenate(nonzero_abs) if nonzero_abs else np.zeros(0)
    ref_median = None
    if reference is not None:
        ref_median = gradient_stats(reference, dataset, spec, chunk=chunk).median_nonzero_abs
    return GradientStatsReport(
        n_images=len(dataset),
        n_elements=n_el,
        exact_zero_elements=zeros,
        all_zero_images=all_zero,
        zero_element_ratio=zeros / n_el,
        all_zero_image_ratio=all_zero / len(dataset),
        median_nonzero_abs=median_abs_nonzero(flat),
        histogram=hist,
        reference_median_nonzero_abs=ref_median,
    )


@dataclass
class ConditionalSuccess:
    """Naive-FGSM success restricted to attacked images with a nonzero gradient."""

    qualifying: int
    successes: int
    attacked: int

    @property
    def empty(self) -> bool:
        return self.qualifying == 0

    @property
    def rate(self) -> float | None:
        return None if self.empty else self.successes / self.qualifying


def conditional_success(model: MlpModel, dataset: Dataset, epsilon: float) -> ConditionalSuccess:
    res = run_attack(model, AttackConfig.naive(epsilon), dataset)
    qualifying = res.attacked & ~res.zero_gradient
    return ConditionalSuccess(int(qualifying.sum()), int((res.success & qualifying).sum()),
                              int(res.attacked.sum()))


@dataclass
class SweepPoint:
    gain: float
    nonzero_gradient_ratio: float
    nonzero_image_ratio: float
    accuracy: float

    @property
    def fooling_rate(self) -> float:
        return 1.0 - self.accuracy


def gain_sweep(target: MlpModel, dataset: Dataset, gains=DEFAULT_GAINS,
               epsilon: float = 0.25) -> list[SweepPoint]:
    """Attack ``target`` with FGSM directions taken from reduced-gain copies.

    Nonzero-gradient ratios are pooled per element over the dataset; the
    per-image ratio counts images with at least one nonzero element.
    """
    if target.activation is not Activation.SIGMOID:
        raise ValueError("gain sweep needs a sigmoid network")
    gains = [float(g) for g in gains]
    if any(not g > 0 for g in gains):
        raise ValueError("gains must be positive")
    points = []
    for g in gains:
        sur = surrogate_gain(target, g * target.gain)
        stats = gradient_stats(sur, dataset)
        cfg = AttackConfig(epsilon, AttackMode.NAIVE if g == 1 else AttackMode.STABLE_GAIN,
                           surrogate_gain=g)
        res = run_attack(target, cfg, dataset)
        points.append(SweepPoint(g, stats.nonzero_element_ratio, stats.nonzero_image_ratio,
                                 res.accuracy))
    return points


def sweep_correlation(points: list[SweepPoint]) -> float:
    """Pearson correlation between fooling rate and nonzero-gradient ratio."""
    return pearson([p.fooling_rate for p in points], [p.nonzero_gradient_ratio for p in points])


def write_sweep_csv(points: list[SweepPoint], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["gain", "nonzero_gradient_ratio", "nonzero_image_ratio", "accuracy", "fooling_rate"])
        for p in points:
            w.writerow([repr(p.gain), repr(p.nonzero_gradient_ratio), repr(p.nonzero_image_ratio),
                        repr(p.accuracy), repr(p.fooling_rate)])


@dataclass
class LayerDistribution:
    weight_kurtosis: float
    weight_histogram: list[tuple[float, float, float]]
    activation_kurtosis: float | None = None
    activation_histogram: list[tuple[float, float, float]] | None = None
    mass_near_zero: float | None = None
    mass_near_one: float | None = None

    @property
    def saturated_mass(self) -> float | None:
        if self.mass_near_zero is None:
            return None
        return self.mass_near_zero + (self.mass_near_one or 0.0)


@dataclass
class DistributionReport:
    activation: str
    layers: list[LayerDistribution]
    saturated_activation_mass: float
    activation_kurtosis: float
    delta: float = SATURATION_DELTA

    def to_dict(self) -> dict:
        return asdict(self)


def _mass_histogram(values: np.ndarray, bins: int = 50) -> list[tuple[float, float, float]]:
    v = values.astype(np.float64).ravel()
    lo, hi = float(v.min()), float(v.max())
    if lo == hi:
        return [(lo, hi, 1.0)]
    counts, edges = np.histogram(v, bins=bins, range=(lo, hi))
    mass = counts / counts.sum()
    return [(float(a), float(b), float(m)) for a, b, m in zip(edges, edges[1:], mass)]


def distribution_report(model: MlpModel, dataset: Dataset, delta: float = SATURATION_DELTA,
                        bins: int = 50, chunk: int = 2000) -> DistributionReport:
    """Weight kurtosis per layer and hidden-activation saturation over ``dataset``.

    Saturated mass is the share of activations within ``delta`` of 0 or 1
    (sigmoid) or within ``delta`` of 0 (ReLU).
    """
    sig = model.activation is Activation.SIGMOID
    n_hidden = model.n_layers - 1
    acts = [[] for _ in range(n_hidden)]
    for i in range(0, len(dataset), chunk):
        trace = forward(model, dataset.images[i:i + chunk])
        for k, a in enumerate(trace.activations):
            acts[k].append(a)
    acts = [np.concatenate(a) for a in acts]
    layers = []
    near_total = 0
    for k, w in enumerate(model.weights):
        ld = LayerDistribution(kurtosis(w), _mass_histogram(w, bins))
        if k < n_hidden:
            a = acts[k]
            near0 = float(np.mean(a <= delta))
            near1 = float(np.mean(a >= 1 - delta)) if sig else 0.0
            ld.mass_near_zero, ld.mass_near_one = near0, near1
            ld.activation_histogram = _mass_histogram(a, bins)
            ld.activation_kurtosis = _safe_kurtosis(a)
            near_total += int(np.count_nonzero(a <= delta)) + (int(np.count_nonzero(a >= 1 - delta)) if sig else 0)
        layers.append(ld)
    all_acts = np.concatenate([a.ravel() for a in acts])
    return DistributionReport(model.activation.value, layers, near_total / all_acts.size,
                              _safe_kurtosis(all_acts), delta)


def _safe_kurtosis(values) -> float:
    try:
        return kurtosis(values)
    except ValueError:
        return math.nan
