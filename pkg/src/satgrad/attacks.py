"""FGSM with optional desaturated surrogates.

The gradient may come from a surrogate (reduced sigmoid gain or reduced
logit scale) but every success decision is made by the original target
model.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .model import (
    Activation,
    GradientRecord,
    MlpModel,
    backward,
    forward,
    predict,
    surrogate_gain,
    surrogate_logit_scale,
)
from .numerics import sign

DEFAULT_EPSILON = 0.25
DEFAULT_SURROGATE_GAIN = 0.5
DEFAULT_SURROGATE_SCALE = 0.01
EPSILON_GRID = (0.05, 0.1, 0.15, 0.2, 0.25, 0.3)


class AttackMode(enum.Enum):
    NAIVE = "naive"
    STABLE_GAIN = "stable-gain"
    STABLE_LOGIT = "stable-logit"


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = DEFAULT_EPSILON
    mode: AttackMode = AttackMode.NAIVE
    surrogate_gain: float = DEFAULT_SURROGATE_GAIN
    surrogate_scale: float = DEFAULT_SURROGATE_SCALE
    clip: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mode", AttackMode(self.mode))
        # epsilon == 0 is accepted as the degenerate no-op attack
        if not 0 <= self.epsilon <= 1:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if not 0 < self.surrogate_gain <= 1:
            raise ValueError(f"surrogate gain must lie in (0, 1], got {self.surrogate_gain}")
        if not 0 < self.surrogate_scale <= 1:
            raise ValueError(f"surrogate scale must lie in (0, 1], got {self.surrogate_scale}")

    @property
    def label(self) -> str:
        if self.mode is AttackMode.STABLE_GAIN:
            return f"{self.mode.value}({self.surrogate_gain:g})"
        if self.mode is AttackMode.STABLE_LOGIT:
            return f"{self.mode.value}({self.surrogate_scale:g})"
        return self.mode.value

    @classmethod
    def naive(cls, epsilon=DEFAULT_EPSILON):
        return cls(epsilon, AttackMode.NAIVE)

    @classmethod
    def stable_gain(cls, gain=DEFAULT_SURROGATE_GAIN, epsilon=DEFAULT_EPSILON):
        return cls(epsilon, AttackMode.STABLE_GAIN, surrogate_gain=gain)

    @classmethod
    def stable_logit(cls, scale=DEFAULT_SURROGATE_SCALE, epsilon=DEFAULT_EPSILON):
        return cls(epsilon, AttackMode.STABLE_LOGIT, surrogate_scale=scale)


@dataclass
class AttackOutcome:
    adversarial: np.ndarray
    zero_perturbation: bool
    pre_label: int
    post_label: int
    success: bool


@dataclass
class AttackResults:
    """Per-image results of one attack over a dataset (arrays in image order)."""

    config: AttackConfig
    labels: np.ndarray
    pre_labels: np.ndarray
    post_labels: np.ndarray
    zero_gradient: np.ndarray
    attacked: np.ndarray
    success: np.ndarray

    @property
    def clean_accuracy(self) -> float:
        return float(np.mean(self.pre_labels == self.labels))

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.post_labels == self.labels))

    @property
    def success_rate(self) -> float:
        n = int(self.attacked.sum())
        return float(self.success.sum() / n) if n else float("nan")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image_index", "mode", "epsilon", "zero_grad_flag",
                        "pre_label", "post_label", "success"])
            for i in range(len(self.labels)):
                w.writerow([i, self.config.label, repr(self.config.epsilon),
                            int(self.zero_gradient[i]), int(self.pre_labels[i]),
                            int(self.post_labels[i]), int(self.success[i])])


def surrogate_for(target: MlpModel, config: AttackConfig) -> MlpModel:
    if config.mode is AttackMode.NAIVE:
        return target
    if config.mode is AttackMode.STABLE_GAIN:
        if target.activation is not Activation.SIGMOID:
            raise ValueError("stable-gain FGSM needs a sigmoid network; use stable-logit for ReLU")
        return surrogate_gain(target, config.surrogate_gain * target.gain)
    return surrogate_logit_scale(target, config.surrogate_scale * target.logit_scale)


def input_gradients(model: MlpModel, x, labels) -> GradientRecord:
    return backward(model, forward(model, x, labels), labels)


def fgsm_direction(surrogate: MlpModel, x, labels) -> np.ndarray:
    """Elementwise sign of the raw input gradient; exact zeros stay 0."""
    return sign(input_gradients(surrogate, x, labels).input_gradient)


def perturb(x: np.ndarray, direction: np.ndarray, epsilon: float, clip: bool = True) -> np.ndarray:
    eps = x.dtype.type(epsilon)
    x_adv = x + eps * direction.astype(x.dtype)
    if clip:
        x_adv = np.clip(x_adv, 0, 1)
    return x_adv


def attack(target: MlpModel, config: AttackConfig, x, label) -> AttackOutcome:
    """Attack a single image; see :func:`run_attack` for datasets."""
    x = np.asarray(x, dtype=target.precision.dtype).reshape(1, -1)
    res, x_adv = _attack_chunk(target, config, x, np.array([int(label)]), attack_all=True)
    return AttackOutcome(adversarial=x_adv[0], zero_perturbation=bool(res["zero"][0]),
                         pre_label=int(res["pre"][0]), post_label=int(res["post"][0]),
                         success=bool(res["success"][0]))


def _attack_chunk(target, config, x, y, attack_all=False):
    pre = predict(target, x)
    mask = np.ones(len(y), bool) if attack_all else pre == y
    x_adv = x.copy()
    zero = np.zeros(len(y), bool)
    if mask.any():
        surrogate = surrogate_for(target, config)
        direction = fgsm_direction(surrogate, x[mask], y[mask])
        zero[mask] = ~direction.any(axis=1)
        x_adv[mask] = perturb(x[mask], direction, config.epsilon, config.clip)
    post = pre.copy()
    if mask.any():
        post[mask] = predict(target, x_adv[mask])
    success = (pre == y) & (post != y)
    return dict(pre=pre, post=post, zero=zero, attacked=mask, success=success), x_adv


def run_attack(target: MlpModel, config: AttackConfig, dataset: Dataset,
               chunk: int = 1000) -> AttackResults:
    """Attack every originally-correct image; wrong ones are left untouched.

    Accuracy under attack is measured over the full set, so originally
    misclassified images count as errors either way.
    """
    parts = []
    for i in range(0, len(dataset), chunk):
        res, _ = _attack_chunk(target, config, dataset.images[i:i + chunk],
                               dataset.labels[i:i + chunk])
        parts.append(res)
    cat = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}
    return AttackResults(config, np.asarray(dataset.labels), cat["pre"], cat["post"],
                         cat["zero"], cat["attacked"], cat["success"])


def attack_accuracy(target: MlpModel, config: AttackConfig, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise ValueError("cannot attack an empty dataset")
    return run_attack(target, config, dataset).accuracy


def best_epsilon(target: MlpModel, config: AttackConfig, dataset: Dataset,
                 grid=EPSILON_GRID) -> tuple[float, AttackResults]:
    """Epsilon from ``grid`` giving the lowest accuracy under attack."""
    best = None
    for eps in grid:
        res = run_attack(target, AttackConfig(eps, config.mode, config.surrogate_gain,
                                              config.surrogate_scale, config.clip), dataset)
        if best is None or res.accuracy < best[1].accuracy:
            best = (eps, res)
    return best
