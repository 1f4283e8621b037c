"""Temporal splicing: per-frame context windows gathered from the layer below.

A layer's context setting is written ``{K1xs1; K2xs2}``: K1 history frames
spaced s1 apart and K2 future frames spaced s2 apart, concatenated after
the current frame. ``0`` on either side disables that direction, and
out-of-range frame indices clamp to the sequence edges.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .numerics import ShapeError


class ContextParseError(ValueError):
    """A context setting does not match the {K1xs1; K2xs2} grammar."""


@dataclass(frozen=True)
class ContextSpec:
    """History/future order and stride for one layer's splice."""

    k1: int = 0
    s1: int = 1
    k2: int = 0
    s2: int = 1

    def __post_init__(self) -> None:
        if self.k1 < 0 or self.k2 < 0:
            raise ValueError(f"context orders must be nonnegative, got {self}")
        if self.k1 > 0 and self.s1 < 1:
            raise ValueError(f"history stride must be >= 1 when k1 > 0, got {self}")
        if self.k2 > 0 and self.s2 < 1:
            raise ValueError(f"future stride must be >= 1 when k2 > 0, got {self}")

    @property
    def width_multiplier(self) -> int:
        """Spliced width in multiples of the layer-below width."""
        return 1 + self.k1 + self.k2

    @property
    def past_reach(self) -> int:
        return self.k1 * self.s1

    @property
    def future_reach(self) -> int:
        return self.k2 * self.s2

    def __str__(self) -> str:
        hist = "0" if self.k1 == 0 else f"{self.k1}x{self.s1}"
        fut = "0" if self.k2 == 0 else f"{self.k2}x{self.s2}"
        return f"{{{hist}; {fut}}}"


_SIDE = re.compile(r"^(\d+)\s*[x×]\s*(\d+)$")


def _parse_side(part: str, full: str) -> tuple[int, int]:
    tok = part.strip()
    if tok == "0":
        return 0, 1
    m = _SIDE.match(tok)
    if m is None:
        raise ContextParseError(
            f"bad context token {tok!r} in {full!r}: expected '0' or 'KxS'"
        )
    k, s = int(m.group(1)), int(m.group(2))
    if k < 1:
        raise ContextParseError(f"bad context token {tok!r} in {full!r}: order must be positive")
    if s < 1:
        raise ContextParseError(f"bad context token {tok!r} in {full!r}: stride must be positive")
    return k, s


def parse_context_setting(text: str) -> ContextSpec:
    """Decode one ``{K1xs1; K2xs2}`` token (both 'x' and '×' are accepted)."""
    s = text.strip()
    if not (s.startswith("{") and s.endswith("}")):
        raise ContextParseError(f"context setting {text!r} must be brace-delimited")
    parts = s[1:-1].split(";")
    if len(parts) != 2:
        raise ContextParseError(
            f"context setting {text!r} must contain exactly one ';' separating history and future"
        )
    (k1, s1), (k2, s2) = (_parse_side(p, text) for p in parts)
    return ContextSpec(k1, s1, k2, s2)


_PLAN_TOKEN = re.compile(r"\{[^{}]*\}")


def parse_plan_string(text: str) -> tuple[ContextSpec, ...]:
    """Split a whitespace/comma separated list of {..} tokens into specs."""
    specs = []
    pos = 0
    for m in _PLAN_TOKEN.finditer(text):
        gap = text[pos : m.start()]
        if gap.strip(" ,\t\n"):
            raise ContextParseError(f"unexpected token {gap.strip()!r} in plan {text!r}")
        specs.append(parse_context_setting(m.group(0)))
        pos = m.end()
    tail = text[pos:]
    if tail.strip(" ,\t\n"):
        raise ContextParseError(f"unexpected token {tail.strip()!r} in plan {text!r}")
    return tuple(specs)


def splice_indices(t: int, length: int, spec: ContextSpec) -> list[int]:
    """Frame indices gathered around ``t``: history nearest-first, then
    future nearest-first, each clamped into [0, length-1].

    The current frame is not in the list; it enters the concatenation
    separately as the leading block.
    """
    if not 0 <= t < length:
        raise IndexError(f"frame {t} outside [0, {length})")
    hist = [max(t - spec.s1 * i, 0) for i in range(1, spec.k1 + 1)]
    fut = [min(t + spec.s2 * i, length - 1) for i in range(1, spec.k2 + 1)]
    return hist + fut


def splice_indices_future(t: int, length: int, k: int, s: int) -> list[int]:
    """Future-only index list: t+s, t+2s, ..., t+ks, clamped to the end."""
    if not 0 <= t < length:
        raise IndexError(f"frame {t} outside [0, {length})")
    return [min(t + s * i, length - 1) for i in range(1, k + 1)]


def _check_splice_args(h_below: np.ndarray, x_layer: np.ndarray) -> None:
    if h_below.ndim != 3 or x_layer.ndim != 3:
        raise ShapeError(
            f"splice expects (T, B, N) tensors, got {h_below.shape} and {x_layer.shape}"
        )
    if h_below.shape != x_layer.shape:
        raise ShapeError(
            f"splice operands must share a shape, got {h_below.shape} and {x_layer.shape}"
        )


def splice(h_below: np.ndarray, x_layer: np.ndarray, spec: ContextSpec) -> np.ndarray:
    """Concatenate [x_layer[t]; h_below at splice_indices(t)] per frame.

    Output width is N * (1 + k1 + k2). Layers above the first pass the
    same tensor for both arguments (their input is the layer below's
    output sequence).
    """
    _check_splice_args(h_below, x_layer)
    length = h_below.shape[0]
    blocks = [x_layer]
    for i in range(1, spec.k1 + 1):
        idx = np.maximum(np.arange(length) - spec.s1 * i, 0)
        blocks.append(h_below[idx])
    for i in range(1, spec.k2 + 1):
        idx = np.minimum(np.arange(length) + spec.s2 * i, length - 1)
        blocks.append(h_below[idx])
    if len(blocks) == 1:
        return x_layer.copy()
    return np.concatenate(blocks, axis=2)


def splice_future(h_below: np.ndarray, x_layer: np.ndarray, k: int, s: int) -> np.ndarray:
    """Future-only splice: [x_t; h(t+s); ...; h(t+ks)] per frame.

    Kept as an independent code path; the general splice with k1=0 must
    agree with it bit for bit.
    """
    _check_splice_args(h_below, x_layer)
    if k == 0:
        return x_layer.copy()
    length = h_below.shape[0]
    blocks = [x_layer]
    for i in range(1, k + 1):
        idx = np.minimum(np.arange(length) + s * i, length - 1)
        blocks.append(h_below[idx])
    return np.concatenate(blocks, axis=2)


def splice_backward(grad: np.ndarray, spec: ContextSpec):
    """Scatter the spliced gradient back onto (h_below, x_layer).

    Clamped frames received repeated reads in the forward pass, so their
    gradients accumulate.
    """
    length, _, width = grad.shape
    n = width // spec.width_multiplier
    if n * spec.width_multiplier != width:
        raise ShapeError(f"grad width {width} is not a multiple of {spec.width_multiplier}")
    grad_x = grad[:, :, :n].copy()
    grad_h = np.zeros_like(grad_x)
    col = 1
    for i in range(1, spec.k1 + 1):
        idx = np.maximum(np.arange(length) - spec.s1 * i, 0)
        np.add.at(grad_h, idx, grad[:, :, col * n : (col + 1) * n])
        col += 1
    for i in range(1, spec.k2 + 1):
        idx = np.minimum(np.arange(length) + spec.s2 * i, length - 1)
        np.add.at(grad_h, idx, grad[:, :, col * n : (col + 1) * n])
        col += 1
    return grad_h, grad_x
