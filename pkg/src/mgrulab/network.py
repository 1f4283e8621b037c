"""Stacked sequence model: recurrent layers, per-layer splicing, an
affine+softmax head, latency arithmetic, and checkpoint round-tripping.

Layers are evaluated sequence-at-a-time (a layer finishes the whole
sequence before the next one starts) because splicing reads future frames
of the layer below. Latency is the audio the model must wait for before a
frame's output is final: a fixed base plus one frame duration per spliced
future frame, summed over layers.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cells import (
    BNConfig,
    CellBNMode,
    GateBNMode,
    glorot,
    init_mgru_params,
    init_mgruip_params,
    mgru_backward,
    mgru_step,
    mgruip_backward,
    mgruip_ctx_step,
    mgruip_step,
    named_bn_stats,
    named_params,
    set_bn_mode,
)
from .context import ContextSpec, parse_context_setting, splice, splice_backward
from .numerics import ShapeError, softmax, softmax_backward

CELL_KINDS = ("mgru", "mgruip", "mgruip-ctx")


class ConfigError(ValueError):
    """A model or run configuration violates its contract."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description: cell kind, widths, BN placement, splice plan.

    context_plan holds one ContextSpec per layer from layer 2 upward;
    layer 1 never splices.
    """

    cell_kind: str
    layer_count: int
    cells_per_layer: int
    input_dim: int
    output_dim: int
    projection_dim: int | None = None
    bn: BNConfig = field(default_factory=BNConfig)
    context_plan: tuple[ContextSpec, ...] = ()
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5

    def __post_init__(self) -> None:
        if self.cell_kind not in CELL_KINDS:
            raise ConfigError(f"cell_kind must be one of {CELL_KINDS}, got {self.cell_kind!r}")
        for name in ("layer_count", "cells_per_layer", "input_dim", "output_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.cell_kind == "mgru":
            if self.projection_dim is not None:
                raise ConfigError("mgru takes no projection_dim")
        elif self.projection_dim is None or self.projection_dim < 1:
            raise ConfigError(f"{self.cell_kind} needs a positive projection_dim")
        if self.cell_kind == "mgruip-ctx":
            if len(self.context_plan) != self.layer_count - 1:
                raise ConfigError(
                    f"mgruip-ctx needs one context setting per layer above the first "
                    f"({self.layer_count - 1}), got {len(self.context_plan)}"
                )
        elif self.context_plan:
            raise ConfigError(f"{self.cell_kind} takes no context_plan")

    def layer_input_dim(self, index: int) -> int:
        """Input width of layer ``index`` (0-based), splice included."""
        if index == 0:
            return self.input_dim
        width = self.cells_per_layer
        if self.cell_kind == "mgruip-ctx":
            width *= self.context_plan[index - 1].width_multiplier
        return width


@dataclass(frozen=True)
class LatencyModel:
    """Fixed output delay plus per-future-frame cost, in milliseconds."""

    base_latency_ms: float = 70.0
    frame_ms: float = 10.0

    def __post_init__(self) -> None:
        if not np.isfinite(self.base_latency_ms) or self.base_latency_ms < 0:
            raise ValueError(f"base_latency_ms must be finite and >= 0, got {self.base_latency_ms}")
        if not np.isfinite(self.frame_ms) or self.frame_ms <= 0:
            raise ValueError(f"frame_ms must be finite and positive, got {self.frame_ms}")


def future_frames(plan) -> int:
    """Total spliced future reach of a plan, in frames."""
    return sum(spec.future_reach for spec in plan)


def model_latency_ms(plan, lat: LatencyModel = LatencyModel()) -> float:
    """base + frame_ms * (future frames summed over layers)."""
    return lat.base_latency_ms + lat.frame_ms * future_frames(plan)


@dataclass(frozen=True)
class ReceptiveField:
    """Input frames that can influence an output frame.

    The recurrence makes the past reach unbounded; splice_past_frames is
    the splice contribution alone.
    """

    splice_past_frames: int
    future_frames: int
    unbounded_past: bool = True


def receptive_field(plan) -> ReceptiveField:
    return ReceptiveField(
        splice_past_frames=sum(spec.past_reach for spec in plan),
        future_frames=future_frames(plan),
    )


# ---------------------------------------------------------------------------
# model


@dataclass
class Model:
    config: ModelConfig
    layers: list
    W_out: np.ndarray
    b_out: np.ndarray

    def set_mode(self, mode: str) -> None:
        for layer in self.layers:
            set_bn_mode(layer, mode)

    def bn_modes(self) -> list[str]:
        return [state.mode for layer in self.layers for state in layer.bn.values()]


def init_model(config: ModelConfig, seed: int) -> Model:
    """Build a model with Glorot weights; all randomness comes from seed."""
    rng = np.random.default_rng(seed)
    layers = []
    for i in range(config.layer_count):
        d_in = config.layer_input_dim(i)
        if config.cell_kind == "mgru":
            layers.append(
                init_mgru_params(d_in, config.cells_per_layer, config.bn, rng,
                                 config.bn_momentum, config.bn_epsilon)
            )
        else:
            layers.append(
                init_mgruip_params(d_in, config.cells_per_layer, config.projection_dim,
                                   config.bn, rng, config.bn_momentum, config.bn_epsilon)
            )
    W_out = glorot(rng, config.cells_per_layer, config.output_dim)
    b_out = np.zeros(config.output_dim)
    return Model(config=config, layers=layers, W_out=W_out, b_out=b_out)


def named_parameters(model: Model) -> dict[str, np.ndarray]:
    """Trainable tensors keyed layer1/..., layer2/..., head/W, head/b."""
    out: dict[str, np.ndarray] = {}
    for i, layer in enumerate(model.layers, start=1):
        for name, value in named_params(layer).items():
            out[f"layer{i}/{name}"] = value
    out["head/W"] = model.W_out
    out["head/b"] = model.b_out
    return out


def named_running_stats(model: Model) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for i, layer in enumerate(model.layers, start=1):
        for name, value in named_bn_stats(layer).items():
            out[f"layer{i}/{name}"] = value
    return out


@dataclass
class LayerCache:
    spec: ContextSpec | None
    steps: list


@dataclass
class ForwardCaches:
    """Everything backward needs: per-layer step caches, final states, probs."""

    layers: list[LayerCache]
    states: np.ndarray  # top-layer output sequence, T x B x N
    probs: np.ndarray
    input_shape: tuple


def _step_fns(cell_kind: str):
    if cell_kind == "mgru":
        return mgru_step, mgru_backward
    if cell_kind == "mgruip":
        return mgruip_step, mgruip_backward
    return mgruip_ctx_step, mgruip_backward


def forward(model: Model, inputs: np.ndarray):
    """Run the full stack over a (T, B, D) batch.

    Returns per-frame class probabilities (T, B, C) and the caches
    backward needs. Rows of the probability tensor sum to 1.
    """
    cfg = model.config
    if inputs.ndim != 3 or inputs.shape[2] != cfg.input_dim:
        raise ShapeError(f"forward expects (T, B, {cfg.input_dim}) inputs, got {inputs.shape}")
    seq_len, batch, _ = inputs.shape
    step_fn, _ = _step_fns(cfg.cell_kind)

    below = inputs
    layer_caches: list[LayerCache] = []
    for i, layer in enumerate(model.layers):
        spec = cfg.context_plan[i - 1] if cfg.cell_kind == "mgruip-ctx" and i > 0 else None
        x_seq = splice(below, below, spec) if spec is not None else below
        h = np.zeros((batch, cfg.cells_per_layer))
        states = np.empty((seq_len, batch, cfg.cells_per_layer))
        steps = []
        for t in range(seq_len):
            h, cache = step_fn(x_seq[t], h, layer, cfg.bn)
            states[t] = h
            steps.append(cache)
        layer_caches.append(LayerCache(spec=spec, steps=steps))
        below = states

    logits = below @ model.W_out + model.b_out
    probs = softmax(logits)
    return probs, ForwardCaches(
        layers=layer_caches, states=below, probs=probs, input_shape=inputs.shape
    )


def backward_from_logits(model: Model, caches: ForwardCaches, grad_logits: np.ndarray):
    """Backpropagate a (T, B, C) logit gradient through head, layers, splices.

    Returns (grad_params, grad_inputs); grad_params covers every trainable
    tensor including BN affine parameters.
    """
    cfg = model.config
    _, step_backward = _step_fns(cfg.cell_kind)

    grads = {name: np.zeros_like(value) for name, value in named_parameters(model).items()}
    grads["head/W"] += np.einsum("tbn,tbc->nc", caches.states, grad_logits)
    grads["head/b"] += grad_logits.sum(axis=(0, 1))
    dstates = grad_logits @ model.W_out.T

    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        layer_cache = caches.layers[i]
        seq_len = len(layer_cache.steps)
        dx_seq = None
        carry = np.zeros_like(dstates[0])
        for t in range(seq_len - 1, -1, -1):
            dx_t, carry, step_grads = step_backward(
                dstates[t] + carry, layer_cache.steps[t], layer, cfg.bn
            )
            if dx_seq is None:
                dx_seq = np.empty((seq_len,) + dx_t.shape)
            dx_seq[t] = dx_t
            for name, value in step_grads.items():
                grads[f"layer{i + 1}/{name}"] += value
        if layer_cache.spec is not None:
            grad_h_below, grad_x_layer = splice_backward(dx_seq, layer_cache.spec)
            dstates = grad_h_below + grad_x_layer  # both views of the same tensor below
        else:
            dstates = dx_seq

    return grads, dstates


def backward(model: Model, caches: ForwardCaches, grad_outputs: np.ndarray):
    """Backpropagate a gradient with respect to the output probabilities."""
    grad_logits = softmax_backward(grad_outputs, caches.probs)
    return backward_from_logits(model, caches, grad_logits)


# ---------------------------------------------------------------------------
# checkpoint i/o


CHECKPOINT_FORMAT = "mgrulab-checkpoint-v1"


def _encode_array(arr: np.ndarray) -> dict:
    data = np.ascontiguousarray(arr, dtype=np.float64)
    return {
        "shape": list(data.shape),
        "dtype": "float64",
        "data": base64.b64encode(data.tobytes()).decode("ascii"),
    }


def _decode_array(entry: dict) -> np.ndarray:
    raw = base64.b64decode(entry["data"])
    arr = np.frombuffer(raw, dtype=np.float64).reshape(entry["shape"])
    return arr.copy()


def config_to_dict(config: ModelConfig) -> dict:
    return {
        "cell_kind": config.cell_kind,
        "layer_count": config.layer_count,
        "cells_per_layer": config.cells_per_layer,
        "input_dim": config.input_dim,
        "output_dim": config.output_dim,
        "projection_dim": config.projection_dim,
        "gate_bn": config.bn.gate.value,
        "cell_bn": config.bn.cell.value,
        "context_plan": [str(spec) for spec in config.context_plan],
        "bn_momentum": config.bn_momentum,
        "bn_epsilon": config.bn_epsilon,
    }


def config_from_dict(raw: dict) -> ModelConfig:
    known = {
        "cell_kind", "layer_count", "cells_per_layer", "input_dim", "output_dim",
        "projection_dim", "gate_bn", "cell_bn", "context_plan", "bn_momentum", "bn_epsilon",
    }
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    try:
        gate = GateBNMode(raw.get("gate_bn", "itoh"))
    except ValueError:
        raise ConfigError(
            f"gate_bn must be one of {[m.value for m in GateBNMode]}, got {raw.get('gate_bn')!r}"
        ) from None
    try:
        cell = CellBNMode(raw.get("cell_bn", "both"))
    except ValueError:
        raise ConfigError(
            f"cell_bn must be one of {[m.value for m in CellBNMode]}, got {raw.get('cell_bn')!r}"
        ) from None
    plan = tuple(parse_context_setting(text) for text in raw.get("context_plan", []))
    return ModelConfig(
        cell_kind=raw["cell_kind"],
        layer_count=raw["layer_count"],
        cells_per_layer=raw["cells_per_layer"],
        input_dim=raw["input_dim"],
        output_dim=raw["output_dim"],
        projection_dim=raw.get("projection_dim"),
        bn=BNConfig(gate=gate, cell=cell),
        context_plan=plan,
        bn_momentum=raw.get("bn_momentum", 0.1),
        bn_epsilon=raw.get("bn_epsilon", 1e-5),
    )


def save_checkpoint(model: Model, path) -> None:
    """Write a self-describing JSON checkpoint; round-trips byte-identically."""
    tensors = {}
    for name, value in named_parameters(model).items():
        tensors[name] = _encode_array(value)
    for name, value in named_running_stats(model).items():
        tensors[name] = _encode_array(value)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": config_to_dict(model.config),
        "tensors": tensors,
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n")


def load_checkpoint(path) -> Model:
    """Rebuild a model from a checkpoint, strictly matching tensor names."""
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"not a {CHECKPOINT_FORMAT} file: {path}")
    config = config_from_dict(payload["config"])
    model = init_model(config, seed=0)
    stored = payload["tensors"]
    expected = dict(named_parameters(model))
    expected.update(named_running_stats(model))
    missing = sorted(set(expected) - set(stored))
    extra = sorted(set(stored) - set(expected))
    if missing or extra:
        raise ConfigError(f"checkpoint tensor mismatch: missing {missing}, unexpected {extra}")
    for name, target in expected.items():
        value = _decode_array(stored[name])
        if value.shape != target.shape:
            raise ConfigError(
                f"checkpoint tensor {name} has shape {value.shape}, expected {target.shape}"
            )
        target[...] = value
    return model
