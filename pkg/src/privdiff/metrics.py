"""Evaluation: kernel two-sample distance, downstream accuracy, convergence.

The generative quality proxy is the squared maximum mean discrepancy under a
Gaussian kernel with a median-heuristic bandwidth. Downstream utility is
measured the usual way for synthetic data: fit a small fixed classifier on
generated samples, score it on real held-out data.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.linear_model import LogisticRegression

from .data import LabeledDataset

__all__ = [
    "MetricReport",
    "ConvergenceTrace",
    "median_bandwidth",
    "mmd",
    "classifier_accuracy",
    "convergence_check",
    "make_metric_report",
    "write_ablation_table",
]


def _kernel(a: np.ndarray, b: np.ndarray, bw: float) -> np.ndarray:
    return np.exp(-cdist(a, b, "sqeuclidean") / (2.0 * bw * bw))


def median_bandwidth(a: np.ndarray, b: np.ndarray) -> float:
    """Median pairwise distance over the pooled sample (zero-distance safe)."""
    pooled = np.vstack([np.atleast_2d(a), np.atleast_2d(b)])
    d = cdist(pooled, pooled)
    vals = d[np.triu_indices_from(d, k=1)]
    med = float(np.median(vals)) if vals.size else 1.0
    return max(med, 1e-12)


def mmd(real: np.ndarray, synth: np.ndarray, bandwidth: float,
        unbiased: bool = True) -> float:
    """Squared MMD with a Gaussian kernel.

    The unbiased estimator drops diagonal terms and can go slightly negative;
    the biased one keeps them and is nonnegative by construction (use it for
    identical-set identity checks).
    """
    real = np.atleast_2d(np.asarray(real, dtype=np.float64))
    synth = np.atleast_2d(np.asarray(synth, dtype=np.float64))
    if real.shape[0] == 0 or synth.shape[0] == 0:
        raise ValueError("both sample sets must be nonempty")
    if bandwidth <= 0:
        raise ValueError("bandwidth must be > 0")
    m, n = real.shape[0], synth.shape[0]
    k_rr = _kernel(real, real, bandwidth)
    k_ss = _kernel(synth, synth, bandwidth)
    k_rs = _kernel(real, synth, bandwidth)
    if unbiased:
        if m < 2 or n < 2:
            raise ValueError("unbiased estimator needs at least 2 points per set")
        term_rr = (k_rr.sum() - np.trace(k_rr)) / (m * (m - 1))
        term_ss = (k_ss.sum() - np.trace(k_ss)) / (n * (n - 1))
    else:
        term_rr = k_rr.mean()
        term_ss = k_ss.mean()
    return float(term_rr + term_ss - 2.0 * k_rs.mean())


def classifier_accuracy(synth: LabeledDataset, real_test: LabeledDataset,
                        seed: int = 0, max_iter: int = 1000) -> float:
    """Train a fixed logistic classifier on synth, score on real test data."""
    if synth.n_classes != real_test.n_classes:
        raise ValueError(f"label spaces differ: {synth.n_classes} vs {real_test.n_classes}")
    present = np.unique(synth.y)
    if present.size < 2:
        # degenerate synthetic set: constant prediction
        return float(np.mean(real_test.y == (present[0] if present.size else 0)))
    clf = LogisticRegression(max_iter=max_iter, random_state=seed)
    clf.fit(synth.x, synth.y)
    return float(clf.score(real_test.x, real_test.y))


@dataclass
class MetricReport:
    """Evaluation summary; mmd is floored at -1e-12 (estimator noise only)."""

    mmd: float
    classifier_accuracy: Optional[float]
    n_real: int
    n_synth: int
    bandwidth: float

    def to_lines(self) -> list[str]:
        rows = [("mmd", "%.17g" % self.mmd),
                ("classifier_accuracy",
                 "" if self.classifier_accuracy is None else "%.17g" % self.classifier_accuracy),
                ("n_real", str(self.n_real)),
                ("n_synth", str(self.n_synth)),
                ("bandwidth", "%.17g" % self.bandwidth)]
        return [f"{k}={v}" for k, v in rows]


def make_metric_report(real: np.ndarray, synth: np.ndarray,
                       synth_labeled: Optional[LabeledDataset] = None,
                       real_labeled: Optional[LabeledDataset] = None,
                       bandwidth: Optional[float] = None,
                       seed: int = 0) -> MetricReport:
    bw = bandwidth if bandwidth is not None else median_bandwidth(real, synth)
    raw = mmd(real, synth, bw, unbiased=True)
    acc = None
    if synth_labeled is not None and real_labeled is not None:
        acc = classifier_accuracy(synth_labeled, real_labeled, seed=seed)
    return MetricReport(max(raw, -1e-12), acc, len(np.atleast_2d(real)),
                        len(np.atleast_2d(synth)), bw)


def write_ablation_table(path, rows: list[dict]) -> None:
    """Comparison table as tab-separated text with a header row."""
    lines = ["variant\tmean\tstd\taccuracies"]
    for r in rows:
        accs = ",".join("%.17g" % a for a in r["accuracies"])
        lines.append(f"{r['variant']}\t{'%.17g' % r['mean']}\t{'%.17g' % r['std']}\t{accs}")
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class ConvergenceTrace:
    """Empirical optimality-gap series against the geometric bound.

    verdict is one of "dominated", "not-dominated", "precondition-violated";
    the last means the contraction condition 0 < 2*tau2*gamma*mu < 1 failed
    and no domination claim is made.
    """

    verdict: str
    contraction: float
    floor: float
    d_series: np.ndarray
    envelope: np.ndarray
    plateau: float

    @property
    def plateau_ratio(self) -> float:
        return self.plateau / self.floor if self.floor > 0 else float("inf")


def _running_median(x: np.ndarray, window: int) -> np.ndarray:
    if window <= 1:
        return x
    half = window // 2
    out = np.empty_like(x)
    for i in range(x.size):
        out[i] = np.median(x[max(0, i - half):min(x.size, i + half + 1)])
    return out


def convergence_check(losses: Sequence[float], gamma: float, sigma: float,
                      C: float, noise_dim: int, tau1: float, tau2: float,
                      mu: float, loss_star: Optional[float] = None,
                      tol: float = 1.0, smooth_window: int = 1) -> ConvergenceTrace:
    """Compare the loss trace to d0*(1-2*tau2*gamma*mu)^k + floor.

    floor = tau1*gamma*C^2*(1+sigma^2*noise_dim) / (2*tau2*mu). The gap d_k
    is measured from loss_star when the optimum is known, otherwise from the
    trace minimum. tol scales the envelope before comparison and
    smooth_window (a running median width) damps per-step noise spikes, so a
    stochastic trace is judged by its level rather than its extremes.
    """
    if min(tau1, tau2, mu) <= 0 or gamma <= 0:
        raise ValueError("constants tau1, tau2, mu, gamma must be positive")
    losses = np.asarray(list(losses), dtype=np.float64)
    if losses.size == 0:
        raise ValueError("empty loss trace")
    rate = 2.0 * tau2 * gamma * mu
    floor = tau1 * gamma * C * C * (1.0 + sigma * sigma * noise_dim) / (2.0 * tau2 * mu)
    base = float(loss_star) if loss_star is not None else float(losses.min())
    d = losses - base
    plateau = float(d[-max(1, d.size // 4):].mean())
    if not 0.0 < rate < 1.0:
        return ConvergenceTrace("precondition-violated", 1.0 - rate, floor, d,
                                np.full_like(d, np.nan), plateau)
    k = np.arange(losses.size)
    envelope = d[0] * (1.0 - rate) ** k + floor
    smoothed = _running_median(d, smooth_window)
    dominated = bool(np.all(smoothed <= envelope * tol + 1e-12))
    return ConvergenceTrace("dominated" if dominated else "not-dominated",
                            1.0 - rate, floor, d, envelope, plateau)
