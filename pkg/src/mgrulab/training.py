"""Synthetic tasks, the optimizer loop, gate tracing, and gradient checks.

Both tasks are built so their solvability is known by construction: the
lookahead task's labels are the class of a future frame (useless to any
model that cannot see d frames ahead), and the slow task's labels follow
a low-pass-filtered signal that only history can reconstruct, so a
trained update gate learns to hold on to its state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cells import (
    BNConfig,
    init_mgru_params,
    init_mgruip_params,
    mgru_backward,
    mgru_step,
    mgruip_backward,
    mgruip_ctx_step,
    mgruip_step,
    named_params,
    set_bn_mode,
)
from .network import Model, backward_from_logits, forward, named_parameters

TASK_KINDS = ("lookahead-classify", "slow-signal")


class NonFiniteError(FloatingPointError):
    """Training hit a NaN/Inf; the message names the first bad tensor."""


@dataclass(frozen=True)
class TaskSpec:
    """Generator settings for one synthetic dataset."""

    kind: str
    frames: int
    feature_dim: int
    classes: int
    sequences: int = 128
    lookahead: int | None = None  # lookahead-classify only
    window: int | None = None  # slow-signal only
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in TASK_KINDS:
            raise ValueError(f"task kind must be one of {TASK_KINDS}, got {self.kind!r}")
        for name in ("frames", "feature_dim", "sequences"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.classes < 2:
            raise ValueError(f"classes must be >= 2, got {self.classes}")
        if self.kind == "lookahead-classify":
            if self.lookahead is None or self.lookahead < 1:
                raise ValueError("lookahead-classify needs lookahead >= 1")
        if self.kind == "slow-signal":
            if self.window is None or self.window < 2:
                raise ValueError("slow-signal needs window >= 2")


@dataclass
class Dataset:
    """(sequences, frames, features) inputs with integer frame labels."""

    inputs: np.ndarray
    labels: np.ndarray

    @property
    def sequences(self) -> int:
        return self.inputs.shape[0]

    @property
    def frames(self) -> int:
        return self.inputs.shape[1]


def gen_task(spec: TaskSpec) -> Dataset:
    """Deterministically generate a dataset from the task seed."""
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "lookahead-classify":
        return _gen_lookahead(spec, rng)
    return _gen_slow_signal(spec, rng)


def _gen_lookahead(spec: TaskSpec, rng: np.random.Generator) -> Dataset:
    # class-conditioned Gaussian frames; label t is the class of frame t+d
    # (clamped at the end), so only future reach >= d can beat chance
    means = _class_means(spec.classes, spec.feature_dim, rng)
    classes = rng.integers(0, spec.classes, size=(spec.sequences, spec.frames))
    noise = 0.3 * rng.normal(size=(spec.sequences, spec.frames, spec.feature_dim))
    inputs = means[classes] + noise
    shifted = np.minimum(np.arange(spec.frames) + spec.lookahead, spec.frames - 1)
    labels = classes[:, shifted]
    return Dataset(inputs=inputs, labels=labels.astype(np.int64))


def _class_means(classes: int, feature_dim: int, rng: np.random.Generator) -> np.ndarray:
    # orthonormal class directions (scale 2) give uniform separation, so
    # every frame is reliably classifiable from its own features
    draws = rng.normal(size=(feature_dim, max(classes, 2)))
    if classes <= feature_dim:
        q, _ = np.linalg.qr(draws[:, :classes])
        return 2.0 * q.T
    return 2.0 * draws[:, :classes].T / np.sqrt(feature_dim)


def _gen_slow_signal(spec: TaskSpec, rng: np.random.Generator) -> Dataset:
    # white-noise inputs whose channel 0, low-pass filtered with a trailing
    # window, drives the labels: balanced quantile bins of the filtered
    # value. Reading the label back therefore requires integrating the
    # last `window` frames of history (and no future at all).
    white = rng.normal(size=(spec.sequences, spec.frames, spec.feature_dim))
    channel0 = white[:, :, 0]
    cumsum = np.cumsum(channel0, axis=1)
    widths = np.minimum(np.arange(spec.frames) + 1, spec.window).astype(np.float64)
    tails = np.zeros_like(cumsum)
    tails[:, spec.window :] = cumsum[:, : -spec.window]
    filtered = (cumsum - tails) / widths[None, :]
    edges = np.quantile(filtered, [i / spec.classes for i in range(1, spec.classes)])
    labels = np.searchsorted(edges, filtered)
    return Dataset(inputs=white, labels=labels.astype(np.int64))


# ---------------------------------------------------------------------------
# loss and metrics


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood over all frames of a (T, B, C) batch."""
    t_idx, b_idx = np.meshgrid(
        np.arange(probs.shape[0]), np.arange(probs.shape[1]), indexing="ij"
    )
    picked = probs[t_idx, b_idx, labels]
    return float(-np.log(np.maximum(picked, 1e-300)).mean())


def cross_entropy_grad_logits(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of mean cross entropy with respect to the logits."""
    grad = probs.copy()
    t_idx, b_idx = np.meshgrid(
        np.arange(probs.shape[0]), np.arange(probs.shape[1]), indexing="ij"
    )
    grad[t_idx, b_idx, labels] -= 1.0
    return grad / (probs.shape[0] * probs.shape[1])


def frame_accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    return float((probs.argmax(axis=2) == labels).mean())


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings; the seed drives init and batch shuffling."""

    learning_rate: float
    momentum: float = 0.9
    batch_size: int = 8
    epochs: int = 10
    clip_norm: float = 5.0
    eval_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        # 0 is allowed so a frozen-parameter epoch stays expressible
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 2:
            raise ValueError(
                f"batch_size must be >= 2 (train-mode batch norm), got {self.batch_size}"
            )
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")
        if not 0.0 < self.eval_fraction < 1.0:
            raise ValueError(f"eval_fraction must be in (0, 1), got {self.eval_fraction}")


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    split: str
    loss: float
    accuracy: float


def split_dataset(dataset: Dataset, eval_fraction: float):
    """Deterministic tail split: the last ceil(fraction * n) sequences."""
    n_eval = max(1, math.ceil(dataset.sequences * eval_fraction))
    if n_eval >= dataset.sequences:
        raise ValueError("eval split would consume the whole dataset")
    split = dataset.sequences - n_eval
    train = Dataset(inputs=dataset.inputs[:split], labels=dataset.labels[:split])
    evalset = Dataset(inputs=dataset.inputs[split:], labels=dataset.labels[split:])
    return train, evalset


def _batch(dataset: Dataset, idx: np.ndarray):
    inputs = np.ascontiguousarray(dataset.inputs[idx].transpose(1, 0, 2))
    labels = np.ascontiguousarray(dataset.labels[idx].T)
    return inputs, labels


def _first_non_finite(model: Model) -> str:
    for name, value in named_parameters(model).items():
        if not np.all(np.isfinite(value)):
            return name
    return "loss"


def evaluate(model: Model, dataset: Dataset) -> tuple[float, float]:
    """Loss/accuracy on a dataset with eval-mode batch norm (pure)."""
    model.set_mode("eval")
    inputs, labels = _batch(dataset, np.arange(dataset.sequences))
    probs, _ = forward(model, inputs)
    return cross_entropy(probs, labels), frame_accuracy(probs, labels)


def train(model: Model, dataset: Dataset, cfg: TrainConfig):
    """Minibatch SGD with momentum and global-norm gradient clipping.

    Batch norm runs in train mode during updates and eval mode for the
    per-epoch metrics. Deterministic given the model, dataset and seed.
    Returns the trained model and one metrics row per (epoch, split).
    """
    train_set, eval_set = split_dataset(dataset, cfg.eval_fraction)
    rng = np.random.default_rng(cfg.seed)
    params = named_parameters(model)
    velocity = {name: np.zeros_like(value) for name, value in params.items()}
    metrics: list[EpochMetrics] = []

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(train_set.sequences)
        model.set_mode("train")
        for start in range(0, train_set.sequences - cfg.batch_size + 1, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            inputs, labels = _batch(train_set, idx)
            probs, caches = forward(model, inputs)
            loss = cross_entropy(probs, labels)
            if not np.isfinite(loss):
                raise NonFiniteError(
                    f"non-finite loss at epoch {epoch}; first bad tensor: {_first_non_finite(model)}"
                )
            grads, _ = backward_from_logits(model, caches, cross_entropy_grad_logits(probs, labels))
            _clip_global_norm(grads, cfg.clip_norm)
            for name, value in params.items():
                velocity[name] *= cfg.momentum
                velocity[name] += grads[name]
                value -= cfg.learning_rate * velocity[name]
        train_loss, train_acc = evaluate(model, train_set)
        eval_loss, eval_acc = evaluate(model, eval_set)
        metrics.append(EpochMetrics(epoch, "train", train_loss, train_acc))
        metrics.append(EpochMetrics(epoch, "eval", eval_loss, eval_acc))
    return model, metrics


def _clip_global_norm(grads: dict[str, np.ndarray], clip_norm: float) -> None:
    # factor out the largest magnitude so squaring cannot overflow
    peak = max((float(np.max(np.abs(g))) for g in grads.values()), default=0.0)
    if peak == 0.0 or not np.isfinite(peak):
        return
    total = peak * math.sqrt(sum(float(np.sum((g / peak) ** 2)) for g in grads.values()))
    if total > clip_norm:
        scale = clip_norm / total
        for g in grads.values():
            g *= scale


# ---------------------------------------------------------------------------
# gate tracing


@dataclass(frozen=True)
class TraceRecord:
    """Mean update-gate activation over cells and batch at one frame."""

    t: int
    layer: int
    mean_gate: float


def trace_gate(model: Model, inputs: np.ndarray, layer: int) -> list[TraceRecord]:
    """Per-frame mean gate activation at one layer, eval-mode batch norm.

    Restores the model's BN modes afterwards; running statistics are
    never touched.
    """
    if not 1 <= layer <= model.config.layer_count:
        raise ValueError(
            f"layer {layer} out of range [1, {model.config.layer_count}]"
        )
    saved_modes = model.bn_modes()
    model.set_mode("eval")
    try:
        _, caches = forward(model, inputs)
    finally:
        for state, mode in zip(
            (s for lp in model.layers for s in lp.bn.values()), saved_modes
        ):
            state.mode = mode
    steps = caches.layers[layer - 1].steps
    return [
        TraceRecord(t=t, layer=layer, mean_gate=float(cache.z.mean()))
        for t, cache in enumerate(steps)
    ]


def trace_to_csv(records) -> str:
    lines = ["t,layer,mean_gate"]
    lines += [f"{r.t},{r.layer},{r.mean_gate!r}" for r in records]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass(frozen=True)
class GradCheckReport:
    """Worst analytic-vs-central-difference disagreement over a sweep."""

    max_rel_err: float
    worst_name: str
    worst_index: tuple
    coords_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (
            f"max_rel_err={self.max_rel_err:.3e} at {self.worst_name}{list(self.worst_index)} "
            f"({self.coords_checked} coords, tol={self.tolerance:g}) {status}"
        )


def grad_check(
    loss_fn,
    tensors: dict[str, np.ndarray],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    max_coords: int = 10000,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    loss_fn() -> (loss, grads) must be deterministic and read the arrays
    in ``tensors`` live (they are perturbed in place and restored). When
    the total coordinate count exceeds max_coords, a seeded subsample is
    checked instead.
    """
    _, grads = loss_fn()
    coords: list[tuple[str, tuple]] = []
    for name, arr in tensors.items():
        coords.extend((name, idx) for idx in np.ndindex(arr.shape))
    if len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(picks)]

    worst = (-1.0, "", ())
    for name, idx in coords:
        arr = tensors[name]
        orig = arr[idx]
        arr[idx] = orig + step
        up, _ = loss_fn()
        arr[idx] = orig - step
        down, _ = loss_fn()
        arr[idx] = orig
        fd = (up - down) / (2.0 * step)
        analytic = grads[name][idx]
        rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-6)
        if rel > worst[0]:
            worst = (rel, name, idx)
    return GradCheckReport(
        max_rel_err=worst[0],
        worst_name=worst[1],
        worst_index=worst[2],
        coords_checked=len(coords),
        tolerance=tolerance,
    )


def grad_check_cell(
    cell_kind: str,
    cfg: BNConfig,
    batch: int = 4,
    d_in: int = 3,
    n: int = 5,
    p: int = 3,
    seed: int = 0,
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Finite-difference check of one cell step, including input and state.

    The loss is a fixed random projection of h_t, so every output
    coordinate contributes.
    """
    rng = np.random.default_rng(seed)
    if cell_kind == "mgru":
        params = init_mgru_params(d_in, n, cfg, rng)
        step_fn, back_fn = mgru_step, mgru_backward
    elif cell_kind == "mgruip":
        params = init_mgruip_params(d_in, n, p, cfg, rng)
        step_fn, back_fn = mgruip_step, mgruip_backward
    elif cell_kind == "mgruip-ctx":
        d_in = 3 * d_in  # stands in for a {1xs; 1xs} splice width
        params = init_mgruip_params(d_in, n, p, cfg, rng)
        step_fn, back_fn = mgruip_ctx_step, mgruip_backward
    else:
        raise ValueError(f"unknown cell kind {cell_kind!r}")
    set_bn_mode(params, "train")

    x = rng.normal(size=(batch, d_in))
    h_prev = rng.normal(size=(batch, n))
    probe = rng.normal(size=(batch, n))

    tensors = dict(named_params(params))
    tensors["input/x"] = x
    tensors["input/h_prev"] = h_prev

    def loss_fn():
        h, cache = step_fn(x, h_prev, params, cfg)
        loss = float((h * probe).sum())
        dx, dh_prev, grads = back_fn(probe, cache, params, cfg)
        grads = dict(grads)
        grads["input/x"] = dx
        grads["input/h_prev"] = dh_prev
        return loss, grads

    return grad_check(loss_fn, tensors, step=step, tolerance=tolerance)


def grad_check_model(
    model: Model,
    inputs: np.ndarray,
    labels: np.ndarray,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    max_coords: int = 10000,
) -> GradCheckReport:
    """Finite-difference check of the full stack under cross entropy."""
    model.set_mode("train")
    tensors = dict(named_parameters(model))
    tensors["input/frames"] = inputs

    def loss_fn():
        probs, caches = forward(model, inputs)
        loss = cross_entropy(probs, labels)
        grads, grad_inputs = backward_from_logits(
            model, caches, cross_entropy_grad_logits(probs, labels)
        )
        grads = dict(grads)
        grads["input/frames"] = grad_inputs
        return loss, grads

    return grad_check(loss_fn, tensors, step=step, tolerance=tolerance, max_coords=max_coords)
