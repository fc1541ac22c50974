"""Losses, initialization, Adam and the training loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .morphology import BinarySet
from .network import PARAM_NAMES, BimonnModel, BiselLayer, threshold

logger = logging.getLogger(__name__)

LOSSES = ("dice", "bce", "mse")
INIT_RAW_BIAS = -2.0
_BCE_EPS = 1e-12


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient becomes non-finite.

    ``last_good`` holds a copy of the model before the failing step.
    """

    def __init__(self, message: str, last_good: BimonnModel | None = None, step: int = -1):
        super().__init__(message)
        self.last_good = last_good
        self.step = step


def _interior(arr: np.ndarray, border: int) -> np.ndarray:
    if border == 0:
        return arr
    return arr[..., border:arr.shape[-2] - border, border:arr.shape[-1] - border]


def loss(kind: str, prediction, target, border: int = 0) -> tuple[float, np.ndarray]:
    """Loss over interior pixels and its gradient w.r.t. ``prediction``.

    The gradient is zero on the excluded border.
    """
    pred = np.asarray(prediction, dtype=np.float64)
    tgt = target.to_array() if isinstance(target, BinarySet) else np.asarray(target)
    tgt = tgt.astype(np.float64)
    if pred.shape != tgt.shape:
        raise ValueError(f"prediction {pred.shape} and target {tgt.shape} differ")
    h, w = pred.shape[-2:]
    if border < 0 or 2 * border >= min(h, w):
        raise ValueError(f"border {border} leaves no interior in a {h}x{w} grid")
    p = _interior(pred, border)
    t = _interior(tgt, border)
    n = p.size
    grad = np.zeros_like(pred)
    g = _interior(grad, border)
    if kind == "dice":
        inter = float(np.sum(p * t))
        denom = float(p.sum() + t.sum()) + 1.0
        num = 2.0 * inter + 1.0
        value = 1.0 - num / denom
        g[...] = -(2.0 * t * denom - num) / denom**2
    elif kind == "bce":
        pc = np.clip(p, _BCE_EPS, 1.0 - _BCE_EPS)
        value = float(-np.mean(t * np.log(pc) + (1.0 - t) * np.log1p(-pc)))
        g[...] = (pc - t) / (pc * (1.0 - pc)) / n
    elif kind == "mse":
        diff = p - t
        value = float(np.mean(diff * diff))
        g[...] = 2.0 * diff / n
    else:
        raise ValueError(f"loss must be one of {LOSSES}, got {kind!r}")
    return value, grad


def dice_score(prediction, target, border: int = 0) -> float:
    """``2|P & T| / (|P| + |T|)`` on the interior; 1.0 when both are empty."""
    p = prediction.to_array() if isinstance(prediction, BinarySet) else np.asarray(prediction, bool)
    t = target.to_array() if isinstance(target, BinarySet) else np.asarray(target, bool)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    p, t = _interior(p, border), _interior(t, border)
    total = int(p.sum()) + int(t.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / total


def mean_dice(predictions: np.ndarray, targets: np.ndarray, border: int = 0) -> float:
    """Mean per-image, per-channel DICE over ``(B, K, H, W)`` boolean stacks."""
    p = _interior(np.asarray(predictions, bool), border)
    t = _interior(np.asarray(targets, bool), border)
    inter = np.logical_and(p, t).sum(axis=(-2, -1))
    total = p.sum(axis=(-2, -1)) + t.sum(axis=(-2, -1))
    scores = np.where(total == 0, 1.0, 2.0 * inter / np.maximum(total, 1))
    return float(scores.mean())


# --- initialization --------------------------------------------------------------

def init_model(architecture, seed: int = 0, dtype=np.float32) -> BimonnModel:
    """Kaiming-uniform weights, raw biases at -2, all scales at 0.

    ``architecture`` is a list of ``(in_channels, out_channels, kernel_side)``.
    """
    rng = np.random.default_rng(seed)
    layers = []
    for n_in, n_out, side in architecture:
        layer = BiselLayer(n_in, n_out, side, dtype=dtype)
        bound_w = np.sqrt(6.0 / (side * side))
        bound_beta = np.sqrt(6.0 / n_in)
        layer.params["W"][...] = rng.uniform(-bound_w, bound_w, size=layer.params["W"].shape)
        layer.params["beta"][...] = rng.uniform(-bound_beta, bound_beta,
                                                size=layer.params["beta"].shape)
        layer.params["b"][...] = INIT_RAW_BIAS
        layer.params["lui_b"][...] = INIT_RAW_BIAS
        layers.append(layer)
    return BimonnModel(layers)


# --- optimizer -----------------------------------------------------------------

class Adam:
    """Bias-corrected Adam over every raw parameter of a model."""

    def __init__(self, lr: float = 1e-2, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, model: BimonnModel, grads: list[dict]) -> None:
        for i, name, _ in model.parameters():
            if not np.all(np.isfinite(grads[i][name])):
                raise TrainingDiverged(f"non-finite gradient for layer {i} parameter {name}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, name, param in model.parameters():
            g = np.asarray(grads[i][name], dtype=np.float64)
            key = (i, name)
            m = self.m.get(key)
            if m is None:
                m = self.m[key] = np.zeros_like(g)
                self.v[key] = np.zeros_like(g)
            v = self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            param[...] = (param.astype(np.float64) - update).astype(param.dtype)


def adam_step(optimizer: Adam, model: BimonnModel, grads: list[dict]) -> BimonnModel:
    optimizer.step(model, grads)
    return model


# --- training loop ----------------------------------------------------------------

@dataclass
class TrainConfig:
    loss: str = "bce"
    learning_rate: float = 1e-2
    batch_size: int = 32
    max_steps: int = 3000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # stop once the batch DICE stayed >= early_stop_dice for `patience` steps
    early_stop_dice: float | None = None
    patience: int = 100

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")


@dataclass
class TrainReport:
    config: dict
    seed: int
    steps: int = 0
    losses: list = field(default_factory=list)
    batch_dice: list = field(default_factory=list)
    epoch_dice: list = field(default_factory=list)
    wall_time: float = 0.0
    stopped_early: bool = False
    model: BimonnModel | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("model")
        return out

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def _check_pairs(model: BimonnModel, inputs: np.ndarray, targets: np.ndarray):
    inputs = np.asarray(inputs)
    targets = np.asarray(targets)
    if inputs.ndim != 4 or targets.ndim != 4:
        raise ValueError("inputs and targets must be (M, C, H, W) arrays")
    if inputs.shape[0] != targets.shape[0] or inputs.shape[2:] != targets.shape[2:]:
        raise ValueError(f"inconsistent pairs: {inputs.shape} vs {targets.shape}")
    if inputs.shape[1] != model.in_channels or targets.shape[1] != model.out_channels:
        raise ValueError(
            f"model maps {model.in_channels} -> {model.out_channels} channels, "
            f"data has {inputs.shape[1]} -> {targets.shape[1]}"
        )
    return inputs, targets


def train(model: BimonnModel, inputs, targets, config: TrainConfig | None = None,
          log_every: int = 0) -> TrainReport:
    """Mini-batch Adam on the border-excluded loss; updates ``model`` in place.

    Batches are drawn from per-epoch permutations seeded by ``config.seed``.
    """
    config = config or TrainConfig()
    inputs, targets = _check_pairs(model, inputs, targets)
    border = model.border
    rng = np.random.default_rng(config.seed)
    opt = Adam(config.learning_rate, config.beta1, config.beta2, config.eps)
    report = TrainReport(config=asdict(config), seed=config.seed, model=model)
    n = inputs.shape[0]
    dtype = model.dtype
    perm = rng.permutation(n)
    cursor = 0
    epoch_scores: list[float] = []
    streak = 0
    start = time.perf_counter()
    for step in range(config.max_steps):
        if cursor + config.batch_size > n:
            if epoch_scores:
                report.epoch_dice.append(float(np.mean(epoch_scores)))
            epoch_scores = []
            perm = rng.permutation(n)
            cursor = 0
        idx = np.sort(perm[cursor:cursor + config.batch_size])
        cursor += config.batch_size
        x = inputs[idx].astype(dtype)
        y = targets[idx]
        out, caches = model.forward(x, keep=True)
        value, grad = loss(config.loss, out, y, border)
        if not np.isfinite(value):
            raise TrainingDiverged(f"loss became {value} at step {step}", model.copy(), step)
        grads, _ = model.backward(caches, grad.astype(dtype))
        last_good = model.copy()
        try:
            opt.step(model, grads)
        except TrainingDiverged as exc:
            raise TrainingDiverged(str(exc), last_good, step) from None
        score = mean_dice(threshold(out), y, border)
        report.losses.append(value)
        report.batch_dice.append(score)
        epoch_scores.append(score)
        report.steps = step + 1
        if log_every and (step + 1) % log_every == 0:
            logger.info("step %d loss %.5f dice %.4f", step + 1, value, score)
        if config.early_stop_dice is not None:
            streak = streak + 1 if score >= config.early_stop_dice else 0
            if streak >= config.patience:
                report.stopped_early = True
                break
    if epoch_scores:
        report.epoch_dice.append(float(np.mean(epoch_scores)))
    report.wall_time = time.perf_counter() - start
    return report


def predict(model: BimonnModel, inputs: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Float forward over ``(M, N, H, W)`` inputs in batches."""
    outs = []
    for start in range(0, inputs.shape[0], batch_size):
        outs.append(model.forward(inputs[start:start + batch_size].astype(model.dtype)))
    return np.concatenate(outs)


# --- gradient check --------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    max_abs_error: float
    worst: str
    passed: bool


def grad_check(model: BimonnModel, inputs, target, loss_kind: str = "bce", h: float = 1e-5,
               rel_tol: float = 1e-4, abs_tol: float = 1e-6,
               max_entries: int | None = None, seed: int = 0) -> GradCheckResult:
    """Compare analytic parameter gradients with central differences in float64.

    An entry passes when its absolute error is below ``abs_tol`` (saturated
    neurons) or its relative error is below ``rel_tol``.
    """
    m = model.astype(np.float64)
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(target)
    border = m.border

    def objective() -> float:
        return loss(loss_kind, m.forward(x), y, border)[0]

    out, caches = m.forward(x, keep=True)
    _, g = loss(loss_kind, out, y, border)
    grads, _ = m.backward(caches, g)
    rng = np.random.default_rng(seed)
    worst_rel, worst_abs, worst = 0.0, 0.0, ""
    passed = True
    for i, name, param in m.parameters():
        flat = param.reshape(-1)
        analytic = grads[i][name].reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, max_entries, replace=False))
        for j in entries:
            orig = flat[j]
            flat[j] = orig + h
            up = objective()
            flat[j] = orig - h
            down = objective()
            flat[j] = orig
            numeric = (up - down) / (2 * h)
            err = abs(numeric - analytic[j])
            scale = max(abs(numeric), abs(analytic[j]))
            rel = err / scale if scale > 0 else 0.0
            if err > abs_tol:
                if rel > rel_tol:
                    passed = False
                if rel > worst_rel:
                    worst_rel, worst = rel, f"layer{i}.{name}[{j}]"
            worst_abs = max(worst_abs, err)
    return GradCheckResult(worst_rel, worst_abs, worst, passed)


__all__ = [
    "LOSSES", "PARAM_NAMES", "Adam", "GradCheckResult", "TrainConfig", "TrainReport",
    "TrainingDiverged", "adam_step", "dice_score", "grad_check", "init_model", "loss",
    "mean_dice", "predict", "train",
]
