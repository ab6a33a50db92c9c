"""Gradient sanitization and Renyi-DP accounting.

The accountant follows one closed form throughout: each of the B*N gradient
releases is a Gaussian mechanism on a function of L2 sensitivity 2*C*sqrt(s)
(every coordinate of a clipped per-example vector can flip from +C to -C in
the worst case), giving

    eps_rdp(q) = q * (2 C sqrt(s))^2 / (2 sigma^2) = 2 C^2 s q / sigma^2

per release, composed additively over B*N releases and converted to (eps,
delta)-DP at the best order on a fixed grid. Two caveats are deliberate and
documented rather than "fixed":

* the mechanism itself injects noise of std sigma*C per coordinate while the
  closed form uses sigma as the noise scale, and the diffusion-step count T
  divides the noise but does not enter the composition count; and
* the 2*C*sqrt(s) worst case exceeds what the L2 clip actually allows (2*C),
  so the budget is conservative.

All conversions use natural logarithms. A converted epsilon can be negative
in degenerate corners; reporting clamps at zero, the raw value is returned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np

from .nn import PerExampleGrads

__all__ = [
    "PrivacyParams",
    "RDPPoint",
    "PrivacySpend",
    "PrivacyInfeasibleError",
    "ORDER_GRID",
    "clip",
    "gaussian_perturb",
    "l2_sensitivity",
    "rdp_gaussian",
    "compose_rdp",
    "rdp_to_dp",
    "total_epsilon",
    "calibrate_sigma",
    "sanitize_per_example",
]

# Standard accountant practice: a few fractional orders, then integers.
ORDER_GRID: tuple[float, ...] = (1.25, 1.5, 1.75) + tuple(float(q) for q in range(2, 513))

SIGMA_LO = 1e-6
SIGMA_HI = 1e9


class PrivacyInfeasibleError(Exception):
    """Raised when no noise scale in range can meet the requested budget."""


@dataclass(frozen=True)
class PrivacyParams:
    """Everything the accountant needs: (C, sigma, B, N, T, s, delta)."""

    C: float
    sigma: float
    B: int
    N: int
    T: int
    s: int
    delta: float = 1e-5

    def __post_init__(self):
        if not self.C > 0:
            raise ValueError("clip bound C must be > 0")
        if not self.sigma > 0:
            raise ValueError("noise multiplier sigma must be > 0")
        for name in ("B", "N", "T", "s"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")

    def with_sigma(self, sigma: float) -> "PrivacyParams":
        return replace(self, sigma=sigma)

    def with_iterations(self, n: int) -> "PrivacyParams":
        return replace(self, N=n)


@dataclass(frozen=True)
class RDPPoint:
    """Renyi-DP guarantee at a single order: (q, epsilon) with epsilon in nats."""

    order: float
    epsilon: float

    def __post_init__(self):
        if not self.order > 1.0:
            raise ValueError("RDP order must be > 1")
        if self.epsilon < 0.0:
            raise ValueError("RDP epsilon must be >= 0")


@dataclass(frozen=True)
class PrivacySpend:
    """Converted budget at the best order, with the raw pieces kept around."""

    epsilon_dp: float
    best_order: float
    epsilon_rdp: float
    delta: float

    @property
    def reported_epsilon(self) -> float:
        return max(0.0, self.epsilon_dp)


def clip(v: np.ndarray, C: float) -> np.ndarray:
    """Rescale v to L2 norm at most C: v / max(1, ||v||_2 / C)."""
    if not C > 0:
        raise ValueError("clip bound C must be > 0")
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    return v / max(1.0, norm / C)


def gaussian_perturb(v: np.ndarray, sigma: float, C: float,
                     rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. Gaussian noise of per-coordinate std sigma*C."""
    if not sigma > 0 or not C > 0:
        raise ValueError("sigma and C must be > 0")
    v = np.asarray(v, dtype=np.float64)
    return v + rng.normal(0.0, sigma * C, size=v.shape)


def l2_sensitivity(C: float, s: int) -> float:
    """Worst-case L2 change when one clipped length-s vector is swapped."""
    if not C > 0:
        raise ValueError("clip bound C must be > 0")
    if int(s) < 1:
        raise ValueError("parameter count s must be >= 1")
    return 2.0 * C * math.sqrt(s)


def rdp_gaussian(q: float, S_f: float, sigma_abs: float) -> RDPPoint:
    """Gaussian mechanism with noise std sigma_abs: eps(q) = q S_f^2 / (2 sigma^2)."""
    if not q > 1.0:
        raise ValueError("RDP order must be > 1")
    if not sigma_abs > 0:
        raise ValueError("noise std must be > 0")
    if S_f < 0:
        raise ValueError("sensitivity must be >= 0")
    return RDPPoint(q, q * S_f * S_f / (2.0 * sigma_abs * sigma_abs))


def compose_rdp(point: RDPPoint, k: int) -> RDPPoint:
    """k-fold adaptive composition at fixed order: epsilon adds up."""
    if int(k) < 1:
        raise ValueError("composition count must be >= 1")
    return RDPPoint(point.order, point.epsilon * int(k))


def rdp_to_dp(point: RDPPoint, delta: float) -> float:
    """Convert (q, eps)-RDP to the eps of (eps, delta)-DP.

    eps_dp = eps + log((q-1)/q) - (log(delta) + log(q)) / (q - 1).
    The result may be negative for large delta; callers clamp for reporting.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    q = point.order
    return (point.epsilon + math.log((q - 1.0) / q)
            - (math.log(delta) + math.log(q)) / (q - 1.0))


def _spend_at_order(p: PrivacyParams, q: float) -> tuple[float, float]:
    point = compose_rdp(rdp_gaussian(q, l2_sensitivity(p.C, p.s), p.sigma),
                        p.B * p.N)
    return rdp_to_dp(point, p.delta), point.epsilon


def total_epsilon(p: PrivacyParams) -> PrivacySpend:
    """Full-run budget: eps_rdp(q) = 2 C^2 s B N q / sigma^2, minimized over
    the conversion at every order on the grid."""
    best: Optional[PrivacySpend] = None
    for q in ORDER_GRID:
        eps_dp, eps_rdp = _spend_at_order(p, q)
        if best is None or eps_dp < best.epsilon_dp:
            best = PrivacySpend(eps_dp, q, eps_rdp, p.delta)
    assert best is not None
    return best


def calibrate_sigma(target_epsilon: float, p: PrivacyParams) -> float:
    """Smallest sigma whose full-run budget stays within target_epsilon.

    Bisection over [1e-6, 1e9] to relative tolerance 1e-6; the budget is
    monotone nonincreasing in sigma. The sigma already present in p is
    ignored. Raises PrivacyInfeasibleError when even the largest noise scale
    cannot meet the target (the conversion overhead alone exceeds it).
    """
    if not target_epsilon > 0:
        raise ValueError("target epsilon must be > 0")
    if total_epsilon(p.with_sigma(SIGMA_HI)).epsilon_dp > target_epsilon:
        raise PrivacyInfeasibleError(
            f"target epsilon {target_epsilon} unreachable for any sigma <= {SIGMA_HI:g}")
    if total_epsilon(p.with_sigma(SIGMA_LO)).epsilon_dp <= target_epsilon:
        return SIGMA_LO
    lo, hi = SIGMA_LO, SIGMA_HI  # infeasible at lo, feasible at hi
    while (hi - lo) > 1e-6 * hi:
        mid = 0.5 * (lo + hi)
        if total_epsilon(p.with_sigma(mid)).epsilon_dp <= target_epsilon:
            hi = mid
        else:
            lo = mid
    return hi


def sanitize_per_example(grads: Union[PerExampleGrads, np.ndarray],
                         p: PrivacyParams, rng: np.random.Generator) -> np.ndarray:
    """Clip each row, sum, add Gaussian noise, divide by B*T.

    Returns (sum_i clip(row_i, C) + N(0, sigma^2 C^2 I)) / (B * T) with B the
    actual number of rows; the per-coordinate noise std after division is
    sigma * C / (B * T).
    """
    matrix = grads.matrix if isinstance(grads, PerExampleGrads) else np.asarray(grads, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] == 0:
        raise ValueError("need a nonempty (B, s) gradient matrix")
    B = matrix.shape[0]
    total = np.zeros(matrix.shape[1])
    for row in matrix:  # fixed order: deterministic reduction
        total += clip(row, p.C)
    noised = gaussian_perturb(total, p.sigma, p.C, rng)
    return noised / (B * p.T)
