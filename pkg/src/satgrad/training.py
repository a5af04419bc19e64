"""Cross-entropy plus saturation-penalty training loop and evaluation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, batches
from .model import (
    Activation,
    ForwardTrace,
    MlpModel,
    backward,
    forward,
    init_model,
    predict,
    saturation_penalty_terms,
    stable_losses,
)
from .numerics import PrecisionMode

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "momentum", "adam", "adamax")
SCHEDULES = ("constant", "linear_ramp")


# Settings that reach the saturated regime with each activation.  Values in
# a config file or on the command line take precedence.
SATURATED_RECIPES = {
    "sigmoid": dict(penalty_weight=0.1, sharpen_gain=16.0, sharpen_start_epoch=22.0,
                    sharpen_epochs=3.0, harden_gain=256.0),
    "relu": dict(penalty_weight=1e-3, harden_logit_scale=1024.0),
}


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, batch: int, what: str):
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}: {what}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainingConfig:
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    penalty_weight: float = 0.0
    schedule: str = "linear_ramp"
    ramp_start_epoch: float = 0.0
    ramp_epochs: int | None = None  # None: first half of training
    # Sharpening: the hidden sigmoid gain (or readout logit scale) used while
    # training grows geometrically from 1 to a power of two and is folded
    # into the weights at the end, so the exported model has gain 1, scale 1.
    sharpen_gain: float = 1.0
    sharpen_logit_scale: float = 1.0
    sharpen_start_epoch: float = 0.0
    sharpen_epochs: float | None = None  # None: until the end of training
    # Hardening: extra power-of-two factors folded in after the last update
    # only.  They never touch an optimizer step.
    harden_gain: float = 1.0
    harden_logit_scale: float = 1.0
    seed: int = 0
    precision: str = "binary64"
    dims: tuple[int, ...] = (784, 256, 128, 10)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be nonnegative")
        if not self.penalty_weight >= 0:
            raise ValueError("penalty_weight must be nonnegative")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        PrecisionMode.parse(self.precision)
        for name in ("sharpen_gain", "sharpen_logit_scale", "harden_gain", "harden_logit_scale"):
            value = getattr(self, name)
            if not value >= 1 or math.frexp(value)[0] != 0.5:
                raise ValueError(f"{name} must be a power of two >= 1, got {value}")

    def sharpening_at(self, epoch: float) -> tuple[float, float]:
        """(gain, logit_scale) multipliers in effect at a fractional epoch."""
        span = self.sharpen_epochs if self.sharpen_epochs is not None else self.epochs - self.sharpen_start_epoch
        frac = 1.0 if span <= 0 else min(1.0, max(0.0, (epoch - self.sharpen_start_epoch) / span))
        return self.sharpen_gain ** frac, self.sharpen_logit_scale ** frac

    def penalty_at(self, epoch: float) -> float:
        """Penalty weight at a (possibly fractional) epoch position.

        The linear ramp rises from 0 at ``ramp_start_epoch`` to the full weight
        ``ramp_epochs`` later and is evaluated per batch.
        """
        if self.schedule == "constant" or self.penalty_weight == 0:
            return self.penalty_weight
        ramp = self.ramp_epochs if self.ramp_epochs is not None else max(1, self.epochs // 2)
        frac = (epoch - self.ramp_start_epoch) / ramp
        return self.penalty_weight * min(1.0, max(0.0, frac))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        return d


def recipe_config(activation, saturated: bool, **overrides) -> TrainingConfig:
    """Default vanilla or saturated configuration, with ``overrides`` applied last."""
    base = dict(SATURATED_RECIPES[Activation.parse(activation).value]) if saturated else {}
    base.update(overrides)
    return TrainingConfig(**base)


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    penalty: float
    penalty_weight: float
    accuracy: float
    saturation_fraction: float


@dataclass
class TrainingMetrics:
    history: list[EpochMetrics] = field(default_factory=list)

    @property
    def final(self) -> EpochMetrics:
        return self.history[-1]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "penalty", "penalty_weight", "accuracy", "saturation_fraction"])
            for m in self.history:
                w.writerow([m.epoch, repr(m.loss), repr(m.penalty), repr(m.penalty_weight),
                            repr(m.accuracy), repr(m.saturation_fraction)])


def saturation_penalty(trace: ForwardTrace, activation) -> float:
    """Batch mean of the per-example hidden-unit penalty."""
    activation = Activation.parse(activation)
    total = 0.0
    for a in trace.activations:
        per_unit = a * (1 - a) if activation is Activation.SIGMOID else a
        total += float(per_unit.sum(axis=1).mean())
    return total


def total_loss(trace: ForwardTrace, labels, penalty_weight: float, activation) -> float:
    """Mean cross-entropy plus ``penalty_weight`` times the saturation penalty."""
    if not penalty_weight >= 0:
        raise ValueError("penalty_weight must be nonnegative")
    if labels is not None and trace.labels is None:
        raise ValueError("trace carries no labels")
    ce = float(np.mean(trace.losses))
    if penalty_weight == 0:
        return ce
    return ce + penalty_weight * saturation_penalty(trace, activation)


def saturated_mask(activations: np.ndarray, activation) -> np.ndarray:
    if Activation.parse(activation) is Activation.SIGMOID:
        return (activations == 0) | (activations == 1)
    return activations == 0


def hidden_saturation_fraction(model: MlpModel, images: np.ndarray, chunk: int = 2048) -> float:
    """Share of hidden activations that are bitwise saturated over ``images``."""
    hits = total = 0
    for i in range(0, images.shape[0], chunk):
        trace = forward(model, images[i:i + chunk])
        for a in trace.activations:
            hits += int(np.count_nonzero(saturated_mask(a, model.activation)))
            total += a.size
    return hits / total


def evaluate_accuracy(model: MlpModel, images, labels) -> float:
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.ndim == 1:
        images = images.reshape(1, -1)
    labels = np.atleast_1d(labels)
    if images.shape[0] == 0:
        raise ValueError("cannot evaluate on an empty set")
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return float(np.mean(predict(model, images) == labels))


class _Optimizer:
    def __init__(self, cfg: TrainingConfig, params: list[np.ndarray]):
        self.cfg = cfg
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params] if cfg.optimizer.startswith("adam") else None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        cfg = self.cfg
        lr = params[0].dtype.type(cfg.learning_rate)
        if lr == 0:
            return
        self.t += 1
        if cfg.optimizer == "sgd":
            for p, g in zip(params, grads):
                p -= lr * g
        elif cfg.optimizer == "momentum":
            mu = params[0].dtype.type(cfg.momentum)
            for p, g, m in zip(params, grads, self.m):
                m *= mu
                m += g
                p -= lr * m
        elif cfg.optimizer == "adamax":
            # infinity-norm Adam: no squared gradients, so nothing underflows
            # until the gradients themselves do
            dt = params[0].dtype.type
            b1, b2 = dt(cfg.beta1), dt(cfg.beta2)
            step = lr / dt(1 - cfg.beta1 ** self.t)
            for p, g, m, u in zip(params, grads, self.m, self.v):
                m *= b1
                m += (1 - b1) * g
                np.maximum(b2 * u, np.abs(g), out=u)
                nz = u > 0
                p[nz] -= step * (m[nz] / u[nz])
        else:
            dt = params[0].dtype.type
            b1, b2, eps = dt(cfg.beta1), dt(cfg.beta2), dt(cfg.adam_eps)
            c1 = dt(1 - cfg.beta1 ** self.t)
            c2 = dt(1 - cfg.beta2 ** self.t)
            for p, g, m, v in zip(params, grads, self.m, self.v):
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * (g * g)
                p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def fold_sharpening(model: MlpModel, gain: float, scale: float) -> MlpModel:
    """Absorb a hidden gain and a logit scale into the weights.

    Exact (bitwise) when both factors are powers of two.
    """
    dt = model.precision.dtype.type
    weights, biases = list(model.weights), list(model.biases)
    if gain != 1 and model.activation is Activation.SIGMOID:
        for k in range(model.n_layers - 1):
            weights[k] = weights[k] * dt(gain)
            biases[k] = biases[k] * dt(gain)
    if scale != 1:
        weights[-1] = weights[-1] * dt(scale)
        biases[-1] = biases[-1] * dt(scale)
    return model.with_params(weights, biases)


def train(config: TrainingConfig, dataset: Dataset, activation="sigmoid",
          test: Dataset | None = None, progress=None) -> tuple[MlpModel, TrainingMetrics]:
    """Train from a seeded initialization; deterministic for a fixed config.

    ``test`` feeds the per-epoch accuracy and saturation metrics (defaults
    to ``dataset``).  ``progress`` is called with each :class:`EpochMetrics`.
    """
    precision = PrecisionMode.parse(config.precision)
    model = init_model(config.dims, activation, config.seed, precision)
    if model.activation is Activation.RELU and (config.sharpen_gain != 1 or config.harden_gain != 1):
        raise ValueError("ReLU networks have no gain to sharpen; use sharpen_logit_scale")
    params = [np.array(w) for w in model.weights] + [np.array(b) for b in model.biases]
    nl = model.n_layers
    opt = _Optimizer(config, params)
    images = dataset.images.astype(precision.dtype, copy=False)
    evalset = test if test is not None else dataset
    metrics = TrainingMetrics()

    for epoch in range(config.epochs):
        loss_sum = pen_sum = 0.0
        seen = 0
        n_batches = -(-len(dataset) // config.batch_size)
        for bi, (xb, yb) in enumerate(batches(Dataset(images, dataset.labels, dataset.split),
                                              config.batch_size, config.seed, epoch)):
            pos = epoch + bi / n_batches
            lam = config.penalty_at(pos)
            gain, scale = config.sharpening_at(pos)
            current = model.with_params(params[:nl], params[nl:]).replace(gain=gain, logit_scale=scale)
            trace = forward(current, xb, yb)
            rec = backward(current, trace, yb, penalty_weight=lam, params=True)
            ce = stable_losses(trace)
            if not np.all(np.isfinite(ce)):
                raise TrainingDivergedError(epoch, bi, "non-finite cross-entropy")
            grads = list(rec.weight_gradients) + list(rec.bias_gradients)
            if not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDivergedError(epoch, bi, "non-finite gradient")
            opt.step(params, grads)
            if not all(np.all(np.isfinite(p)) for p in params):
                raise TrainingDivergedError(epoch, bi, "non-finite parameters after update")
            loss_sum += float(ce.sum())
            pen_sum += float(saturation_penalty_terms(current, trace).sum())
            seen += len(yb)
        gain, scale = config.sharpening_at(epoch + 1)
        if epoch == config.epochs - 1:
            gain, scale = gain * config.harden_gain, scale * config.harden_logit_scale
        model = fold_sharpening(model.with_params(params[:nl], params[nl:]), gain, scale)
        m = EpochMetrics(
            epoch=epoch,
            loss=loss_sum / seen,
            penalty=pen_sum / seen,
            penalty_weight=lam,
            accuracy=evaluate_accuracy(model, evalset.images, evalset.labels),
            saturation_fraction=hidden_saturation_fraction(model, evalset.images),
        )
        metrics.history.append(m)
        log.info("epoch %d loss %.4f penalty %.4g lambda %.3g acc %.4f sat %.4f",
                 epoch, m.loss, m.penalty, lam, m.accuracy, m.saturation_fraction)
        if progress is not None:
            progress(m)
    return model, metrics


def auto_penalty_search(config: TrainingConfig, dataset: Dataset, activation, test: Dataset,
                        reference_accuracy: float, target_saturation: float = 0.95,
                        max_accuracy_drop: float = 0.02, max_doublings: int = 6,
                        progress=None):
    """Double ``penalty_weight`` until saturation reaches the target.

    Stops at the first weight whose model reaches ``target_saturation`` while
    staying within ``max_accuracy_drop`` of ``reference_accuracy``.  Returns
    ``(model, metrics, penalty_weight)`` of the last attempt.
    """
    lam = config.penalty_weight if config.penalty_weight > 0 else 1.0
    result = None
    for _ in range(max_doublings + 1):
        cfg = TrainingConfig(**{**config.to_dict(), "penalty_weight": lam})
        model, metrics = train(cfg, dataset, activation, test, progress)
        result = (model, metrics, lam)
        fin = metrics.final
        log.info("auto search: lambda %.3g -> acc %.4f sat %.4f", lam, fin.accuracy, fin.saturation_fraction)
        if fin.accuracy < reference_accuracy - max_accuracy_drop:
            break
        if fin.saturation_fraction >= target_saturation:
            break
        lam *= 2
    return result


def parameter_count(dims) -> int:
    return sum(a * b + b for a, b in zip(dims, dims[1:]))

