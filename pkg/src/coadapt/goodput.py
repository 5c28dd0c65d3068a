"""
Statistical efficiency and (LR-aware) Goodput.

Goodput = throughput x per-sample statistical efficiency. Under square-root
learning-rate scaling a larger batch also earns a larger step size, which the
LR-aware variant credits with a sqrt(B_g / B_ref) factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .errors import ValidationError


@dataclass(frozen=True)
class EfficiencyContext:
    phi: float
    reference_batch: float = 16
    base_lr: float = 2e-4

    def __post_init__(self):
        if self.phi < 0 or self.reference_batch < 1 or self.base_lr <= 0:
            raise ValidationError(f"invalid efficiency context {self}")

    def lr_at(self, global_batch: float) -> float:
        return lr_rescale(self.base_lr, self.reference_batch, global_batch)


def stat_eff(global_batch: float, phi: float) -> float:
    """Per-sample efficiency (1 + phi) / (B_g + phi), in (0, 1] for B_g >= 1."""
    if global_batch < 1:
        raise ValidationError(f"global_batch must be >= 1, got {global_batch}")
    if phi < 0:
        raise ValidationError(f"phi must be >= 0, got {phi}")
    return (1.0 + phi) / (global_batch + phi)


def goodput(throughput: float, se: float) -> float:
    return throughput * se


def lr_factor(global_batch: float, reference_batch: float) -> float:
    return math.sqrt(global_batch / reference_batch)


def goodput_lr(throughput: float, global_batch: float, phi: float, reference_batch: float = 16) -> float:
    """T * SE(B_g) * sqrt(B_g / B_ref). The reference only rescales; rankings do not depend on it."""
    return throughput * stat_eff(global_batch, phi) * lr_factor(global_batch, reference_batch)


def lr_rescale(eta: float, old_batch: float, new_batch: float) -> float:
    """Square-root rule for Adam: eta' = eta * sqrt(B'/B)."""
    if eta <= 0 or old_batch <= 0 or new_batch <= 0:
        raise ValidationError("learning rate and batch sizes must be positive")
    return eta * math.sqrt(new_batch / old_batch)


def saturating_goodput_objective(global_batch: float, b_hw: float, scaled_crit: float) -> float:
    """B / ((B + B_hw)(B + c*B_crit)): Goodput under a saturating throughput curve, up to constants."""
    return global_batch / ((global_batch + b_hw) * (global_batch + scaled_crit))


def optimal_batch_continuous(b_hw: float, scaled_crit: float) -> float:
    """Maximizer of :func:`saturating_goodput_objective`: sqrt(B_hw * c*B_crit)."""
    if b_hw <= 0 or scaled_crit <= 0:
        raise ValidationError("B_hw and c*B_crit must be positive")
    return math.sqrt(b_hw * scaled_crit)


def cbs_target(phi: float, candidates: Sequence[int], metric: str = "log") -> int:
    """Candidate batch closest to the critical-batch estimate ``phi``.

    ``metric`` is ``"log"`` (default; suits geometric grids) or ``"linear"``.
    Ties go to the smaller candidate.
    """
    if not candidates:
        raise ValidationError("no candidate batch sizes")
    if phi < 0:
        raise ValidationError("phi must be >= 0")
    target = max(phi, 1.0)
    if metric == "log":
        dist = lambda b: abs(math.log(b) - math.log(target))  # noqa: E731
    elif metric == "linear":
        dist = lambda b: abs(b - target)  # noqa: E731
    else:
        raise ValidationError(f"unknown distance metric {metric!r}")
    best = None
    best_d = math.inf
    for b in sorted(candidates):
        d = dist(b)
        # float round-off at geometric midpoints must not flip the tie rule
        if best is None or d < best_d - 1e-12 * max(1.0, best_d):
            best, best_d = b, d
    return best
