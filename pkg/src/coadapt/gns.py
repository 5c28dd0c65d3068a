"""
Online gradient-noise-scale estimation from per-micro-batch gradient norms.

Gradient-accumulation micro-batches across all data-parallel ranks are the
independent samples, so the estimator works under any (d, t, p) layout: it
needs only each micro-batch's squared gradient norm and the synchronized mean
gradient. The cross-rank all-reduce is modeled as exact summation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import GnsUnavailable, InsufficientSamplesError, ValidationError

TRACE_HEADER = ("step", "tokens", "signal_raw", "noise_raw", "ema_signal", "ema_noise", "phi")


@dataclass(frozen=True)
class StepAccumulator:
    """Squared norms of every micro-batch gradient in one optimizer step.

    ``micro_squared_norms`` holds the values from all DP ranks; the estimator
    depends only on their multiset, so rank labels are not kept.
    """

    dp_size: int = 1
    global_batch: int = 1
    micro_squared_norms: tuple[float, ...] = ()

    def __post_init__(self):
        if self.dp_size < 1:
            raise ValidationError("dp_size must be >= 1")
        if self.global_batch < 1:
            raise ValidationError("global_batch must be >= 1")

    @property
    def micro_count(self) -> int:
        """Micro-batches per rank (M)."""
        return len(self.micro_squared_norms) // self.dp_size

    @property
    def n_samples(self) -> int:
        return len(self.micro_squared_norms)


def record_micro_batch(acc: StepAccumulator, squared_norm: float) -> StepAccumulator:
    if not squared_norm >= 0:
        raise ValidationError(f"squared norm must be nonnegative, got {squared_norm}")
    return replace(acc, micro_squared_norms=acc.micro_squared_norms + (float(squared_norm),))


@dataclass(frozen=True)
class StepStats:
    signal: float  # |G|^2 estimate, may be negative
    noise: float  # tr(Sigma) estimate, clamped at 0
    mean_grad_sq: float
    mean_squared_norm: float
    noise_raw: float


def finalize_step(acc: StepAccumulator, mean_gradient=None, mean_grad_sq: Optional[float] = None) -> StepStats:
    """Unbiased signal and noise estimates for one step.

    Pass either the full mean gradient vector or its squared norm.
    """
    n = acc.n_samples
    if n < 2:
        raise InsufficientSamplesError(f"need at least 2 micro-batch samples, got {n}")
    if (mean_gradient is None) == (mean_grad_sq is None):
        raise ValidationError("pass exactly one of mean_gradient or mean_grad_sq")
    if mean_grad_sq is None:
        g = np.asarray(mean_gradient, dtype=np.float64)
        mean_grad_sq = float(np.dot(g.ravel(), g.ravel()))
    s_bar = math.fsum(acc.micro_squared_norms) / n
    signal = (n * mean_grad_sq - s_bar) / (n - 1)
    noise_raw = (s_bar - mean_grad_sq) * acc.global_batch / (n - 1)
    return StepStats(signal, max(noise_raw, 0.0), mean_grad_sq, s_bar, noise_raw)


def stats_from_micro_gradients(micro_grads, dp_size: int, global_batch: int) -> StepStats:
    """Convenience path from an (N, dim) array of micro-batch gradients."""
    grads = np.asarray(micro_grads, dtype=np.float64)
    sq = np.einsum("ij,ij->i", grads, grads)
    acc = StepAccumulator(dp_size, global_batch, tuple(float(x) for x in sq))
    return finalize_step(acc, mean_gradient=grads.mean(axis=0))


@dataclass(frozen=True)
class GnsState:
    ema_signal: Optional[float] = None
    ema_noise: Optional[float] = None
    alpha_early: float = 0.95
    alpha_late: float = 0.99
    phase_boundary_tokens: float = 8e6
    tokens_seen: float = 0
    calibration: float = 2.0

    def __post_init__(self):
        if not 0 < self.alpha_early <= self.alpha_late < 1:
            raise ValidationError("need 0 < alpha_early <= alpha_late < 1")
        if self.calibration <= 0:
            raise ValidationError("calibration must be positive")

    @property
    def alpha(self) -> float:
        return self.alpha_early if self.tokens_seen < self.phase_boundary_tokens else self.alpha_late


def update_ema(state: GnsState, stats: StepStats, tokens_this_step: float) -> GnsState:
    if state.ema_signal is None:
        sig, noi = stats.signal, stats.noise
    else:
        a = state.alpha
        sig = a * state.ema_signal + (1 - a) * stats.signal
        noi = a * state.ema_noise + (1 - a) * stats.noise
    return replace(state, ema_signal=sig, ema_noise=max(noi, 0.0),
                   tokens_seen=state.tokens_seen + tokens_this_step)


def gns(state: GnsState) -> float:
    """Calibrated noise scale; raises GnsUnavailable until the smoothed signal is positive."""
    if state.ema_signal is None or not state.ema_signal > 0:
        raise GnsUnavailable(f"smoothed signal not positive ({state.ema_signal})")
    return state.calibration * state.ema_noise / state.ema_signal


def try_gns(state: GnsState) -> Optional[float]:
    try:
        return gns(state)
    except GnsUnavailable:
        return None


def simulate_micro_gradients(g_true, sigma_diag, micro_batch_samples: int, count: int,
                             rng_seed=None) -> np.ndarray:
    """Draw ``count`` micro-batch gradients ``g_true + noise``.

    Per-sample noise has diagonal covariance ``sigma_diag``; averaging over
    ``micro_batch_samples`` samples divides it by that count. ``rng_seed`` may
    be an int or a ``numpy.random.Generator``.
    """
    g = np.asarray(g_true, dtype=np.float64)
    var = np.asarray(sigma_diag, dtype=np.float64)
    if np.any(var < 0):
        raise ValidationError("sigma_diag must be nonnegative")
    if micro_batch_samples < 1:
        raise ValidationError("micro_batch_samples must be >= 1")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    std = np.sqrt(var / micro_batch_samples)
    return g + rng.standard_normal((count, g.size)) * std


def true_noise_scale(g_true, sigma_diag) -> float:
    g = np.asarray(g_true, dtype=np.float64)
    return float(np.sum(sigma_diag) / np.dot(g, g))


class GnsEstimator:
    """Stateful wrapper used by the simulator: feeds steps and keeps an optional trace."""

    def __init__(self, state: Optional[GnsState] = None, keep_trace: bool = False):
        self.state = state or GnsState()
        self.step = 0
        self.trace: Optional[list[tuple]] = [] if keep_trace else None

    def observe(self, stats: StepStats, tokens: float) -> Optional[float]:
        self.state = update_ema(self.state, stats, tokens)
        self.step += 1
        phi = try_gns(self.state)
        if self.trace is not None:
            self.trace.append((self.step, self.state.tokens_seen, stats.signal, stats.noise_raw,
                               self.state.ema_signal, self.state.ema_noise,
                               math.nan if phi is None else phi))
        return phi

    @property
    def phi(self) -> Optional[float]:
        return try_gns(self.state)


def write_gns_trace(rows: Iterable[Sequence], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for row in rows:
            w.writerow([row[0], repr(float(row[1]))] + [repr(float(x)) for x in row[2:]])
