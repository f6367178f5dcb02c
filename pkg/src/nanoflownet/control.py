"""Flow-balance obstacle avoidance: left/right flow error, PD yaw law, vertical oscillation.

Sign convention: a positive error (more flow on the left) gives a positive
yaw rate, which turns the vehicle right, away from the nearer surface.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

CONTROL_RATE_HZ = 5.57
CONTROL_DT = 1.0 / CONTROL_RATE_HZ


@dataclass(frozen=True)
class ControllerConfig:
    k_p: float = 0.0126
    k_d: float = 0.0018
    forward_velocity: float = 0.2  # m/s
    oscillation_amplitude: float = 0.1  # m
    oscillation_frequency: float = 0.5  # Hz
    center_weighting: str = "none"  # none | linear
    reduction: str = "sum"  # sum | mean
    derivative_alpha: float = 0.7  # low-pass memory of the derivative
    max_yaw_rate: float = 2.0  # rad/s

    def validate(self) -> None:
        if self.k_p < 0 or self.k_d < 0:
            raise ValueError("controller gains must be >= 0")
        if self.forward_velocity < 0:
            raise ValueError("forward_velocity must be >= 0")
        if self.oscillation_amplitude < 0 or self.oscillation_frequency < 0:
            raise ValueError("oscillation amplitude/frequency must be >= 0")
        if self.center_weighting not in ("none", "linear"):
            raise ValueError("center_weighting must be 'none' or 'linear'")
        if self.reduction not in ("sum", "mean"):
            raise ValueError("reduction must be 'sum' or 'mean'")
        if not 0.0 <= self.derivative_alpha < 1.0:
            raise ValueError("derivative_alpha must lie in [0, 1)")
        if self.max_yaw_rate <= 0:
            raise ValueError("max_yaw_rate must be positive")


@dataclass(frozen=True)
class ControllerState:
    prev_error: float = 0.0
    prev_time: float = 0.0
    filtered_derivative: float = 0.0
    samples: int = 0


def column_weights(width: int, weighting: str = "none") -> np.ndarray:
    """Per-column weights: ones, or linear from 1 at the center to 0 at the edges."""
    if weighting == "none":
        return np.ones(width)
    if weighting != "linear":
        raise ValueError(f"unknown weighting {weighting!r}")
    if width == 1:
        return np.ones(1)
    c = (width - 1) / 2.0
    return 1.0 - np.abs(np.arange(width) - c) / c


def flow_balance_error(flow: np.ndarray, weighting: str = "none", reduction: str = "sum") -> float:
    """Left-minus-right sum of flow magnitudes for an ``(H, W, 2)`` field.

    For odd widths the center column belongs to neither half. Per-column
    sums are combined with ``math.fsum`` so mirrored inputs give exactly
    negated errors.
    """
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"expected (H, W, 2) flow, got {flow.shape}")
    h, w, _ = flow.shape
    if h == 0 or w < 2:
        raise ValueError("flow field is empty or has no left/right halves")
    cols = np.sum(np.hypot(flow[..., 0], flow[..., 1]), axis=0) * column_weights(w, weighting)
    half = w // 2
    left = math.fsum(cols[:half])
    right = math.fsum(cols[w - half:])
    e = left - right
    if reduction == "mean":
        e /= h * half
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return e


def yaw_rate(e_rl: float, state: ControllerState, dt: float,
             cfg: ControllerConfig = ControllerConfig()) -> tuple[float, ControllerState]:
    """PD yaw-rate command with a low-passed derivative and output clamp."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if state.samples == 0:
        d = 0.0
    else:
        raw = (e_rl - state.prev_error) / dt
        a = cfg.derivative_alpha
        d = a * state.filtered_derivative + (1.0 - a) * raw
    cmd = cfg.k_p * e_rl + cfg.k_d * d
    cmd = min(max(cmd, -cfg.max_yaw_rate), cfg.max_yaw_rate)
    return cmd, ControllerState(e_rl, state.prev_time + dt, d, state.samples + 1)


def oscillation_setpoint(t: float, cfg: ControllerConfig = ControllerConfig()) -> float:
    """Vertical velocity for a sinusoidal altitude ``A sin(2 pi f t)`` about hover."""
    w = 2.0 * math.pi * cfg.oscillation_frequency
    return cfg.oscillation_amplitude * w * math.cos(w * t)


def oscillation_offset(t: float, cfg: ControllerConfig = ControllerConfig()) -> float:
    w = 2.0 * math.pi * cfg.oscillation_frequency
    return cfg.oscillation_amplitude * math.sin(w * t)

