"""Variance schedules, forward noising, DDPM loss, guided reverse sampling.

Step indices are 1-based (t in 1..T) to match the usual Markov-chain
convention; index 0 denotes the clean data, with cumulative signal fraction
alpha_bar(0) == 1. Networks predict the injected noise; `predict_next`
converts a noise estimate into the posterior mean of the previous step, so
denoisers can equivalently be read as predicting the next-step sample.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .nn import MLPArch, ParamSet, bind_params, mlp_graph

__all__ = [
    "NoiseSchedule",
    "GuidanceConfig",
    "Denoiser",
    "build_schedule",
    "time_embedding",
    "forward_step",
    "forward_closed_form",
    "noise_to_prev_mean",
    "prev_mean_to_noise",
    "ddpm_loss",
    "ddpm_loss_graph",
    "predict_next",
    "cfg_noise",
    "cfg_predict",
    "sample_reverse",
]

TensorOrVar = Union[np.ndarray, Var]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances beta[1..T] with alpha and cumulative products."""

    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ValueError("beta must be a non-empty 1-D array")
        if np.any(beta <= 0.0) or np.any(beta >= 1.0):
            raise ValueError("beta values must lie strictly in (0, 1)")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", 1.0 - beta)
        object.__setattr__(self, "alpha_bar", np.cumprod(1.0 - beta))

    @property
    def T(self) -> int:
        return self.beta.size

    def _check_t(self, t: int, allow_zero: bool = False) -> int:
        t = int(t)
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.T:
            raise ValueError(f"step index {t} outside [{lo}, {self.T}]")
        return t

    def beta_at(self, t: int) -> float:
        return float(self.beta[self._check_t(t) - 1])

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[self._check_t(t) - 1])

    def alpha_bar_at(self, t: int) -> float:
        t = self._check_t(t, allow_zero=True)
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def posterior_var(self, t: int) -> float:
        """Variance of q(x_{t-1} | x_t, x_0); zero at t == 1."""
        t = self._check_t(t)
        return (1.0 - self.alpha_bar_at(t - 1)) / (1.0 - self.alpha_bar_at(t)) * self.beta_at(t)

    def content_hash(self) -> str:
        h = hashlib.sha256(self.beta.tobytes()).hexdigest()
        return h[:16]


def build_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule over T steps."""
    T = int(T)
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T))


@dataclass(frozen=True)
class GuidanceConfig:
    """Guidance weight plus sampler selector (only ancestral is provided)."""

    w: float = 0.0
    sampler: str = "ancestral"

    def __post_init__(self):
        if self.w < 0.0:
            raise ValueError("guidance weight must be >= 0")
        if self.sampler != "ancestral":
            raise ValueError(f"unknown sampler {self.sampler!r}")


def time_embedding(t: int, dim: int) -> np.ndarray:
    """Sinusoidal features of an integer step index (dim must be even)."""
    if dim % 2 != 0 or dim <= 0:
        raise ValueError("embedding dim must be positive and even")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = float(t) * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def forward_step(x_prev: np.ndarray, t: int, schedule: NoiseSchedule,
                 noise: np.ndarray) -> np.ndarray:
    """One Markov noising step: sqrt(a_t) x_{t-1} + sqrt(1-a_t) noise."""
    x_prev = np.asarray(x_prev, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    _check_same_shape(x_prev, noise, "forward_step")
    a = schedule.alpha_at(t)
    return math.sqrt(a) * x_prev + math.sqrt(1.0 - a) * noise


def forward_closed_form(x0: np.ndarray, t: int, schedule: NoiseSchedule,
                        noise: np.ndarray) -> np.ndarray:
    """Jump straight to step t: sqrt(ab_t) x_0 + sqrt(1-ab_t) noise."""
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    _check_same_shape(x0, noise, "forward_closed_form")
    ab = schedule.alpha_bar_at(t)  # t == 0 gives x0 back
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


def noise_to_prev_mean(x_t: TensorOrVar, eps_hat: TensorOrVar, t: int,
                       schedule: NoiseSchedule) -> TensorOrVar:
    """Posterior mean of x_{t-1} given x_t and a noise estimate.

    Affine in both arguments, so it works on raw arrays and on graph Vars.
    """
    a = schedule.alpha_at(t)
    ab = schedule.alpha_bar_at(t)
    coef = (1.0 - a) / math.sqrt(1.0 - ab)
    return (x_t - coef * eps_hat) * (1.0 / math.sqrt(a))


def prev_mean_to_noise(x_t: np.ndarray, mean: np.ndarray, t: int,
                       schedule: NoiseSchedule) -> np.ndarray:
    """Inverse of noise_to_prev_mean (algebraic round trip)."""
    a = schedule.alpha_at(t)
    ab = schedule.alpha_bar_at(t)
    coef = (1.0 - a) / math.sqrt(1.0 - ab)
    return (x_t - math.sqrt(a) * mean) / coef


@dataclass
class Denoiser:
    """A noise-prediction MLP together with its conditioning layout.

    The network input is the concatenation of the sample, a sinusoidal
    embedding of the step index, and (when n_classes > 0) a one-hot label.
    The all-zero label vector is the unconditional branch.
    """

    params: ParamSet
    data_dim: int
    hidden: tuple[int, ...]
    time_dim: int = 8
    n_classes: int = 0

    @property
    def arch(self) -> MLPArch:
        return MLPArch(self.data_dim + self.time_dim + self.n_classes,
                       self.hidden, self.data_dim)

    @staticmethod
    def create(data_dim: int, hidden: tuple[int, ...], seed: int,
               time_dim: int = 8, n_classes: int = 0) -> "Denoiser":
        from .nn import xavier_init
        arch = MLPArch(data_dim + time_dim + n_classes, hidden, data_dim)
        params = xavier_init(arch.layer_dims(), seed)
        if n_classes > 0:
            # label rows start at zero: an untrained (never-labelled) pathway
            # then leaves the conditional and unconditional branches identical
            params["w0"][data_dim + time_dim:, :] = 0.0
        return Denoiser(params, data_dim, tuple(hidden), time_dim, n_classes)

    def _labels_onehot(self, n: int, label) -> np.ndarray:
        onehot = np.zeros((n, self.n_classes))
        if label is None:
            return onehot
        lab = np.asarray(label)
        if lab.ndim == 0:
            lab = np.full(n, int(lab))
        if lab.shape != (n,):
            raise ValueError(f"label shape {lab.shape} does not match batch {n}")
        valid = lab >= 0  # negative label = unconditional row
        if np.any(lab >= self.n_classes):
            raise ValueError("label outside the conditioning range")
        onehot[np.arange(n)[valid], lab[valid]] = 1.0
        return onehot

    def model_input(self, x: np.ndarray, t: int, label) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = x.shape[0]
        emb = np.broadcast_to(time_embedding(t, self.time_dim), (n, self.time_dim))
        blocks = [x, emb]
        if self.n_classes > 0:
            blocks.append(self._labels_onehot(n, label))
        return np.concatenate(blocks, axis=1)

    def noise_graph(self, pvars, x: Var, t: int, label) -> Var:
        """Differentiable eps-prediction; conditioning enters as constants."""
        n = x.data.shape[0]
        emb = np.broadcast_to(time_embedding(t, self.time_dim), (n, self.time_dim))
        blocks = [x, Var(np.array(emb))]
        if self.n_classes > 0:
            blocks.append(Var(self._labels_onehot(n, label)))
        return mlp_graph(pvars, ad.concat(blocks, axis=1), self.arch)

    def predict_noise(self, x: np.ndarray, t: int, label=None) -> np.ndarray:
        from .nn import forward_mlp
        return forward_mlp(self.params, self.model_input(x, t, label), self.arch)


def predict_next(model: Denoiser, x_t: np.ndarray, t: int, schedule: NoiseSchedule,
                 label=None) -> np.ndarray:
    """Model's estimate of x_{t-1} (posterior mean, no sampling noise)."""
    if int(t) < 1:
        raise ValueError("predict_next needs t >= 1")
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    eps_hat = model.predict_noise(x_t, t, label)
    return noise_to_prev_mean(x_t, eps_hat, t, schedule)


def ddpm_loss_graph(model: Denoiser, batch: np.ndarray, schedule: NoiseSchedule,
                    rng: np.random.Generator, labels=None,
                    p_uncond: float = 0.0):
    """Simplified denoising loss as a graph: mean_i ||eps_i - eps_hat_i||^2.

    Each example gets its own uniform step draw and noise draw; with
    probability p_uncond a labelled row is trained on the unconditional
    (all-zero label) branch.
    Returns (loss Var, bound parameter Vars).
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    n, d = batch.shape
    ts = rng.integers(1, schedule.T + 1, size=n)
    eps = rng.standard_normal((n, d))
    lab = None
    if labels is not None and model.n_classes > 0:
        lab = np.asarray(labels).copy()
        if p_uncond > 0.0:
            lab[rng.random(n) < p_uncond] = -1  # drop to unconditional branch
    # rows differ in t, so the conditioning block is built row-by-row
    rows = []
    for i in range(n):
        x_t = forward_closed_form(batch[i], int(ts[i]), schedule, eps[i])
        row_lab = None if lab is None else int(lab[i])
        rows.append(model.model_input(x_t[None, :], int(ts[i]), row_lab)[0])
    net_in = Var(np.stack(rows))
    pvars = bind_params(model.params)
    eps_hat = mlp_graph(pvars, net_in, model.arch)
    sq = (eps_hat - Var(eps)) ** 2.0
    loss = ad.vmean(ad.vsum(sq, axis=1))
    return loss, pvars


def ddpm_loss(model: Denoiser, batch: np.ndarray, schedule: NoiseSchedule,
              rng: np.random.Generator, labels=None, p_uncond: float = 0.0) -> float:
    loss, _ = ddpm_loss_graph(model, batch, schedule, rng, labels, p_uncond)
    return loss.item()


def cfg_noise(model: Denoiser, x_t: np.ndarray, t: int, label, w: float) -> np.ndarray:
    """Guided noise estimate: (1+w) conditional - w unconditional."""
    if w < 0.0:
        raise ValueError("guidance weight must be >= 0")
    if w > 0.0 and label is None:
        raise ValueError("guided prediction needs a label when w > 0")
    cond = model.predict_noise(x_t, t, label)
    if w == 0.0:
        return cond
    uncond = model.predict_noise(x_t, t, None)
    return (1.0 + w) * cond - w * uncond


def cfg_predict(model: Denoiser, x_t: np.ndarray, t: int, label, w: float,
                schedule: NoiseSchedule,
                rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """One guided ancestral reverse step x_t -> x_{t-1}.

    Adds the posterior noise term except at the final step (t == 1), where
    the posterior variance is exactly zero.
    """
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    eps_hat = cfg_noise(model, x_t, t, label, w)
    mean = noise_to_prev_mean(x_t, eps_hat, t, schedule)
    if t == 1:
        return mean
    std = math.sqrt(schedule.posterior_var(t))
    z = rng.standard_normal(x_t.shape) if rng is not None else np.zeros_like(x_t)
    return mean + std * z


def sample_reverse(model: Denoiser, schedule: NoiseSchedule,
                   guidance: GuidanceConfig, n: int, label,
                   rng: np.random.Generator) -> np.ndarray:
    """Draw n samples by running the full guided reverse chain.

    Deterministic given the generator state. Output is clamped to [-1, 1]
    (the data domain); intermediate states are left untouched.
    """
    if n < 1:
        raise ValueError("need n >= 1 samples")
    x = rng.standard_normal((n, model.data_dim))
    for t in range(schedule.T, 0, -1):
        x = cfg_predict(model, x, t, label, guidance.w, schedule, rng)
    return np.clip(x, -1.0, 1.0)
