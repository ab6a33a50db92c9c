"""Teacher learning, adversarial distillation, and the sanitized student loop.

Phase 1 trains a label-conditional denoiser on the private data with label
dropout, so guided sampling has both a conditional and an unconditional
branch. Phase 2 freezes the teacher and trains a student against it: at each
iteration one step index r is drawn uniformly, the batch is pushed to x_r
through the closed-form forward process, teacher and student both predict
the previous step, and the student descends on

    per-example loss  L_i = mse(teacher_i, student_i)
                          [+ mse(true_prev_i, student_i)]
                          + lambda * log(1 - p_student(teacher_i, student_i))

with privacy enforced by clipping each example's loss gradient at the
student's output (not at the parameters), backpropagating the clipped
adjoint through the network, and adding Gaussian noise scaled by sigma*C and
divided by B*T. Noise enters exactly once per update; everything after it is
post-processing. The discriminator trains on both orderings of the
(teacher, student) pair with cross-entropy and is never released, so its
update takes no noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np
from sklearn.cluster import KMeans

from . import autodiff as ad
from .autodiff import Var
from .data import LabeledDataset
from .diffusion import (Denoiser, GuidanceConfig, NoiseSchedule, cfg_noise,
                        ddpm_loss, ddpm_loss_graph, forward_closed_form,
                        noise_to_prev_mean, sample_reverse, time_embedding)
from .nn import (MLPArch, OptState, ParamSet, backprop_through, bind_params,
                 flatten_grads, grad_wrt_intermediate, mlp_graph, sgd_step,
                 xavier_init)
from .privacy import PrivacyParams, PrivacySpend, calibrate_sigma, clip, total_epsilon

__all__ = [
    "TrainingFailureError",
    "BudgetExceededError",
    "Discriminator",
    "ModelTriple",
    "TrainPlan",
    "StepOutputs",
    "StudentState",
    "GaussianNoiseSource",
    "make_streams",
    "pseudo_label",
    "train_teacher",
    "eval_ddpm_loss",
    "mse_rows",
    "adv_loss_student",
    "adv_loss_discriminator",
    "dis_loss",
    "combined_loss",
    "discriminator_accuracy",
    "stochastic_step_grads",
    "sanitized_student_update",
    "discriminator_update",
    "init_student_state",
    "train_student",
    "sample_labeled",
    "ablation_suite",
    "ABLATION_VARIANTS",
]

PROB_EPS = 1e-7  # discriminator probabilities are clamped to [eps, 1-eps]

_SELECT_STUDENT = np.array([[0.0], [1.0]])  # picks the student-class column

# sentinel sigma meaning "calibrate from the target"; any real run replaces it
UNSET_SIGMA = 1e-300


class TrainingFailureError(Exception):
    """Raised when a training loss or gradient stops being finite."""


class BudgetExceededError(Exception):
    """Raised when the next iteration would pass the privacy target."""


def make_streams(seed: int, names: tuple[str, ...]) -> dict[str, np.random.Generator]:
    """Independent, restartable generators split from one root seed."""
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.Generator(np.random.PCG64(c)) for n, c in zip(names, children)}


class GaussianNoiseSource:
    """Draws the DP noise vector and counts how often it was asked to.

    The counter is the audit hook for the invariant that noise enters exactly
    once per student update.
    """

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.draws = 0

    def draw(self, std: float, size: int) -> np.ndarray:
        self.draws += 1
        return self.rng.normal(0.0, std, size=size)


@dataclass
class Discriminator:
    """Two-way softmax head over a concatenated (first, second) sample pair.

    Class 0 means "pair is in (teacher, student) order", class 1 the swap;
    the class-1 probability of the canonical ordering is the quantity the
    student attacks. Optional conditioning appends the step embedding and a
    one-hot label to the pair.
    """

    params: ParamSet
    data_dim: int
    hidden: tuple[int, ...]
    time_dim: int = 8
    n_classes: int = 0
    conditioned: bool = False
    eval_count: int = 0  # bumped on every forward; used by wiring tests

    @property
    def arch(self) -> MLPArch:
        extra = self.time_dim + self.n_classes if self.conditioned else 0
        return MLPArch(2 * self.data_dim + extra, self.hidden, 2)

    @staticmethod
    def create(data_dim: int, hidden: tuple[int, ...], seed: int, time_dim: int = 8,
               n_classes: int = 0, conditioned: bool = False) -> "Discriminator":
        arch_extra = time_dim + n_classes if conditioned else 0
        arch = MLPArch(2 * data_dim + arch_extra, hidden, 2)
        return Discriminator(xavier_init(arch.layer_dims(), seed), data_dim,
                             tuple(hidden), time_dim, n_classes, conditioned)

    def _cond_block(self, n: int, t: Optional[int], labels) -> np.ndarray:
        emb = np.broadcast_to(time_embedding(0 if t is None else t, self.time_dim),
                              (n, self.time_dim))
        onehot = np.zeros((n, self.n_classes))
        if labels is not None and self.n_classes > 0:
            lab = np.asarray(labels)
            if lab.ndim == 0:
                lab = np.full(n, int(lab))
            onehot[np.arange(n), lab] = 1.0
        return np.concatenate([emb, onehot], axis=1)

    def logits_graph(self, pvars, first, second, t: Optional[int] = None,
                     labels=None) -> Var:
        a = first if isinstance(first, Var) else Var(np.atleast_2d(first))
        b = second if isinstance(second, Var) else Var(np.atleast_2d(second))
        if a.data.shape != b.data.shape:
            raise ValueError(f"pair shape mismatch {a.data.shape} vs {b.data.shape}")
        self.eval_count += 1
        blocks = [a, b]
        if self.conditioned:
            blocks.append(Var(self._cond_block(a.data.shape[0], t, labels)))
        return mlp_graph(pvars, ad.concat(blocks, axis=1), self.arch)

    def pair_probs(self, first, second, t: Optional[int] = None, labels=None) -> np.ndarray:
        """Softmax class probabilities, (n, 2), no gradient tracking."""
        pvars = {k: Var(v) for k, v in self.params.items()}
        return ad.softmax(self.logits_graph(pvars, first, second, t, labels)).data


@dataclass
class ModelTriple:
    """Frozen teacher, trainable student, auxiliary discriminator."""

    teacher: Denoiser
    student: Denoiser
    discriminator: Discriminator


@dataclass
class TrainPlan:
    """Loop shape and weights for one training phase."""

    iterations: int
    batch_size: int
    lambda_adv: float = 1.0
    lr: float = 1e-4
    lr_disc: float = 1e-4
    guidance_w: float = 1.8
    p_uncond: float = 0.1
    use_data_mse: bool = True
    privacy: Optional[PrivacyParams] = None
    target_epsilon: Optional[float] = None
    seed: int = 0
    val_fraction: float = 0.1
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be >= 1")
        if self.lambda_adv < 0:
            raise ValueError("trade-off weight must be >= 0")


def pseudo_label(x: np.ndarray, K: int, seed: int) -> LabeledDataset:
    """Cluster whitened features with k-means and use indices as labels."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if K < 1:
        raise ValueError("cluster count must be >= 1")
    if K > x.shape[0]:
        raise ValueError(f"cannot form {K} clusters from {x.shape[0]} examples")
    if K == 1:
        return LabeledDataset(x, np.zeros(x.shape[0], dtype=np.int64), 1)
    mu = x.mean(axis=0)
    sd = np.maximum(x.std(axis=0), 1e-12)
    km = KMeans(n_clusters=K, init="k-means++", n_init=10, max_iter=300,
                tol=1e-6, random_state=seed)
    labels = km.fit_predict((x - mu) / sd)
    return LabeledDataset(x, labels.astype(np.int64), K)


def eval_ddpm_loss(model: Denoiser, data: LabeledDataset, schedule: NoiseSchedule,
                   seed: int = 9999) -> float:
    """Denoising loss on a fixed slice with frozen (t, eps) draws."""
    rng = np.random.default_rng(seed)
    return ddpm_loss(model, data.x, schedule, rng, labels=data.y, p_uncond=0.0)


def train_teacher(data: LabeledDataset, schedule: NoiseSchedule, plan: TrainPlan,
                  hidden: tuple[int, ...] = (64, 64), time_dim: int = 8,
                  eval_every: int = 0,
                  log_cb: Optional[Callable[[dict], None]] = None
                  ) -> tuple[Denoiser, list[dict]]:
    """Phase 1: fit the conditional denoiser on private data, no protection.

    Label dropout with probability plan.p_uncond trains the unconditional
    branch needed for guided sampling. Returns the model and the metric rows
    (iteration, loss, lr, and a deterministic held-out loss when eval_every
    is set).
    """
    if data.n < plan.batch_size:
        raise ValueError("dataset smaller than one batch")
    streams = make_streams(plan.seed, ("init", "batch", "noise", "holdout"))
    train, holdout = data.split(plan.val_fraction, int(streams["holdout"].integers(2 ** 31)))
    model = Denoiser.create(data.dim, hidden, seed=int(streams["init"].integers(2 ** 31)),
                            time_dim=time_dim, n_classes=data.n_classes)
    opt = OptState(plan.lr, plan.iterations)
    history: list[dict] = []
    for k in range(plan.iterations):
        idx = streams["batch"].integers(0, train.n, size=plan.batch_size)
        loss, pvars = ddpm_loss_graph(model, train.x[idx], schedule, streams["noise"],
                                      labels=train.y[idx], p_uncond=plan.p_uncond)
        val = loss.item()
        if not math.isfinite(val):
            raise TrainingFailureError(f"teacher loss diverged at iteration {k}")
        ad.backward(loss)
        model.params, opt = sgd_step(model.params, flatten_grads(pvars), opt)
        row = {"iteration": k, "loss": val, "lr": opt.lr}
        if eval_every and (k + 1) % eval_every == 0:
            row["holdout_loss"] = eval_ddpm_loss(model, holdout, schedule)
        history.append(row)
        if log_cb:
            log_cb(row)
    return model, history


def mse_rows(a, b) -> Var:
    """Per-example mean squared error over features: (B,) graph values."""
    av = a if isinstance(a, Var) else Var(np.atleast_2d(a))
    bv = b if isinstance(b, Var) else Var(np.atleast_2d(b))
    if av.data.shape != bv.data.shape:
        raise ValueError(f"shape mismatch {av.data.shape} vs {bv.data.shape}")
    d = av.data.shape[1]
    return ad.vsum((av - bv) ** 2.0, axis=1) * (1.0 / d)


def _student_prob_rows(disc: Discriminator, pvars, x_teacher, x_student,
                       t: Optional[int], labels) -> Var:
    """Clamped class-1 probability of the canonical pair, shape (B, 1)."""
    logits = disc.logits_graph(pvars, x_teacher, x_student, t, labels)
    probs = ad.softmax(logits, axis=-1)
    return ad.clamp(ad.matmul(probs, Var(_SELECT_STUDENT)), PROB_EPS, 1.0 - PROB_EPS)


def adv_loss_student(disc: Discriminator, x_student, x_teacher,
                     t: Optional[int] = None, labels=None) -> Var:
    """Fooling loss log(1 - p_student); gradient reaches only x_student.

    Discriminator parameters and the teacher output enter as constants, so a
    backward pass from the result touches nothing but the student branch.
    """
    pvars = {k: Var(v) for k, v in disc.params.items()}
    xt = x_teacher.data if isinstance(x_teacher, Var) else np.atleast_2d(x_teacher)
    p = _student_prob_rows(disc, pvars, Var(np.array(xt)), x_student, t, labels)
    return ad.vmean(ad.log(1.0 - p))


def adv_loss_discriminator(disc: Discriminator, x_teacher, x_student,
                           t: Optional[int] = None, labels=None,
                           pvars=None) -> Var:
    """The canonical-pair value log(1 - p_student), differentiable in phi.

    Pass bound parameter Vars to read gradients after a backward sweep; both
    sample arguments are treated as constants.
    """
    if pvars is None:
        pvars = bind_params(disc.params)
    xt = np.atleast_2d(x_teacher.data if isinstance(x_teacher, Var) else x_teacher)
    xs = np.atleast_2d(x_student.data if isinstance(x_student, Var) else x_student)
    p = _student_prob_rows(disc, pvars, Var(xt), Var(xs), t, labels)
    return ad.vmean(ad.log(1.0 - p))


def dis_loss(x_teacher, x_student, x_true_prev) -> Var:
    """Distillation pull: MSE to the teacher plus MSE to the true previous step."""
    return ad.vmean(mse_rows(x_teacher, x_student) + mse_rows(x_true_prev, x_student))


def combined_loss(dis, adv, lambda_adv: float):
    """Weighted objective: distillation plus lambda times adversarial."""
    if lambda_adv < 0:
        raise ValueError("trade-off weight must be >= 0")
    return dis + lambda_adv * adv


def discriminator_accuracy(disc: Discriminator, x_teacher: np.ndarray,
                           x_student: np.ndarray, t: Optional[int] = None,
                           labels=None) -> float:
    """Fraction of pairs whose ordering the discriminator calls correctly."""
    p_canon = disc.pair_probs(x_teacher, x_student, t, labels)
    p_swap = disc.pair_probs(x_student, x_teacher, t, labels)
    correct = (p_canon[:, 0] > 0.5).sum() + (p_swap[:, 1] > 0.5).sum()
    return float(correct) / (2 * len(x_teacher))


@dataclass
class StepOutputs:
    """Everything produced by one stochastic-step graph build."""

    r: int
    x_grads: np.ndarray          # (B, d): rows are dL_i/dx_{student,i}
    intermediate: Var            # the student's x_{r-1} prediction node
    pvars: dict                  # student parameters bound into the graph
    x_teacher: np.ndarray
    x_student: np.ndarray
    x_true_prev: np.ndarray
    labels: Optional[np.ndarray]
    dis_value: float
    adv_value: float


def stochastic_step_grads(models: ModelTriple, x0: np.ndarray,
                          labels: Optional[np.ndarray], schedule: NoiseSchedule,
                          plan: TrainPlan, rng_step: np.random.Generator,
                          rng_forward: np.random.Generator,
                          force_r: Optional[int] = None,
                          force_eps: Optional[np.ndarray] = None) -> StepOutputs:
    """Build the per-example losses at one uniformly drawn step r.

    x_r and the true x_{r-1} come from the closed-form forward process with a
    shared noise draw, so they form a consistent trajectory. The teacher's
    guided previous-step mean is a constant target; the student's prediction
    is the graph intermediate whose per-example adjoints are returned.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    B = x0.shape[0]
    if B < 1:
        raise ValueError("batch must be nonempty")
    r = int(force_r) if force_r is not None else int(rng_step.integers(1, schedule.T + 1))
    eps = force_eps if force_eps is not None else rng_forward.standard_normal(x0.shape)
    x_r = forward_closed_form(x0, r, schedule, eps)
    x_true_prev = forward_closed_form(x0, r - 1, schedule, eps)

    teacher, student, disc = models.teacher, models.student, models.discriminator
    t_lab = labels if teacher.n_classes > 0 else None
    w = plan.guidance_w if (teacher.n_classes > 0 and labels is not None) else 0.0
    eps_teacher = cfg_noise(teacher, x_r, r, t_lab, w)
    x_teacher = np.asarray(noise_to_prev_mean(x_r, eps_teacher, r, schedule))

    pvars = bind_params(student.params)
    s_lab = labels if student.n_classes > 0 else None
    if s_lab is not None and plan.p_uncond > 0.0:
        # train the student's unconditional branch as well, so its weak
        # conditioning can be amplified by guided sampling later
        s_lab = np.asarray(s_lab).copy()
        s_lab[rng_step.random(B) < plan.p_uncond] = -1
    eps_student = student.noise_graph(pvars, Var(x_r), r, s_lab)
    x_student = noise_to_prev_mean(Var(x_r), eps_student, r, schedule)

    rows = mse_rows(x_teacher, x_student)
    if plan.use_data_mse:
        rows = rows + mse_rows(x_true_prev, x_student)
    dis_value = float(rows.data.mean())
    adv_value = 0.0
    if plan.lambda_adv > 0.0:
        dpvars = {k: Var(v) for k, v in disc.params.items()}
        p = _student_prob_rows(disc, dpvars, Var(x_teacher), x_student, r, labels)
        adv_rows = ad.vsum(ad.log(1.0 - p), axis=1)
        adv_value = float(adv_rows.data.mean())
        rows = rows + plan.lambda_adv * adv_rows
    total = ad.vsum(rows)
    x_grads = grad_wrt_intermediate(total, x_student)
    return StepOutputs(r, x_grads, x_student, pvars, x_teacher,
                       np.array(x_student.data), x_true_prev, labels,
                       dis_value, adv_value)


def sanitized_student_update(models: ModelTriple, x0: np.ndarray,
                             labels: Optional[np.ndarray], schedule: NoiseSchedule,
                             plan: TrainPlan, opt: OptState,
                             rng_step: np.random.Generator,
                             rng_forward: np.random.Generator,
                             noise_source: GaussianNoiseSource,
                             privacy: Optional[PrivacyParams] = None
                             ) -> tuple[ParamSet, OptState, StepOutputs]:
    """One private step: clip at the output, backprop, noise once, descend.

    g_bar = (1/B) sum_i clip(dL_i/dx_i, C) . dx_i/dtheta
            + N(0, sigma^2 C^2 I) / (B T)

    The clipped adjoints are pushed through the network in a single batched
    sweep (backprop is linear in the adjoint, so this equals the per-example
    sum). Everything downstream of the single noise injection is
    post-processing.
    """
    p = privacy if privacy is not None else plan.privacy
    if p is None:
        raise ValueError("sanitized update needs privacy parameters")
    so = stochastic_step_grads(models, x0, labels, schedule, plan, rng_step, rng_forward)
    B = so.x_grads.shape[0]
    clipped = np.stack([clip(row, p.C) for row in so.x_grads])
    grad_sum = backprop_through(clipped, so.intermediate, so.pvars)
    noise = noise_source.draw(p.sigma * p.C, grad_sum.size)
    g_bar = grad_sum / B + noise / (B * p.T)
    if not np.all(np.isfinite(g_bar)):
        raise TrainingFailureError("student gradient is not finite")
    new_params, new_opt = sgd_step(models.student.params, g_bar, opt)
    return new_params, new_opt, so


def discriminator_update(models: ModelTriple, so: StepOutputs, plan: TrainPlan,
                         opt_d: OptState) -> tuple[ParamSet, OptState, float]:
    """Cross-entropy on both orderings of the step-r pair; plain SGD, no noise.

    The student values are detached constants here, mirroring how the teacher
    is fixed during the student's turn.
    """
    disc = models.discriminator
    pvars = bind_params(disc.params)
    p_canon = _student_prob_rows(disc, pvars, Var(so.x_teacher), Var(so.x_student),
                                 so.r, so.labels)
    p_swap = _student_prob_rows(disc, pvars, Var(so.x_student), Var(so.x_teacher),
                                so.r, so.labels)
    # canonical ordering is class 0, swapped is class 1
    loss = -(ad.vmean(ad.log(1.0 - p_canon)) + ad.vmean(ad.log(p_swap)))
    val = loss.item()
    if not math.isfinite(val):
        raise TrainingFailureError("discriminator loss is not finite")
    ad.backward(loss)
    new_params, new_opt = sgd_step(disc.params, flatten_grads(pvars), opt_d)
    return new_params, new_opt, val


STUDENT_STREAMS = ("init_student", "init_disc", "batch", "step", "forward", "dpnoise")


@dataclass
class StudentState:
    """Mutable phase-2 state; serializable for checkpoint/resume."""

    models: ModelTriple
    opt: OptState
    opt_d: OptState
    iteration: int
    streams: dict[str, np.random.Generator]
    noise_source: GaussianNoiseSource
    privacy: PrivacyParams

    def rng_states(self) -> dict:
        return {name: gen.bit_generator.state for name, gen in self.streams.items()}

    def restore_rng(self, states: dict) -> None:
        for name, st in states.items():
            self.streams[name].bit_generator.state = st


def init_student_state(teacher: Denoiser, data: LabeledDataset,
                       schedule: NoiseSchedule, plan: TrainPlan,
                       student_hidden: tuple[int, ...] = (32,),
                       disc_hidden: tuple[int, ...] = (32,),
                       student_conditioned: bool = True,
                       disc_conditioned: bool = True,
                       time_dim: int = 8) -> StudentState:
    """Xavier-initialize the student and discriminator and bind the budget.

    The effective PrivacyParams pick up the actual parameter count s, batch
    size, iteration count, and step count; when the plan carries a target
    epsilon and no explicit sigma, sigma is calibrated here.
    """
    if plan.privacy is None:
        raise ValueError("student training requires privacy parameters")
    streams = make_streams(plan.seed, STUDENT_STREAMS)
    n_classes = data.n_classes if student_conditioned else 0
    student = Denoiser.create(data.dim, student_hidden,
                              seed=int(streams["init_student"].integers(2 ** 31)),
                              time_dim=time_dim, n_classes=n_classes)
    disc = Discriminator.create(data.dim, disc_hidden,
                                seed=int(streams["init_disc"].integers(2 ** 31)),
                                time_dim=time_dim,
                                n_classes=data.n_classes if disc_conditioned else 0,
                                conditioned=disc_conditioned)
    base = replace(plan.privacy, B=plan.batch_size, N=plan.iterations,
                   T=schedule.T, s=student.params.size)
    if plan.target_epsilon is not None and plan.privacy.sigma == UNSET_SIGMA:
        base = base.with_sigma(calibrate_sigma(plan.target_epsilon, base))
    models = ModelTriple(teacher, student, disc)
    return StudentState(models, OptState(plan.lr, plan.iterations),
                        OptState(plan.lr_disc, plan.iterations), 0, streams,
                        GaussianNoiseSource(streams["dpnoise"]), base)


def train_student(teacher: Denoiser, data: LabeledDataset, schedule: NoiseSchedule,
                  plan: TrainPlan, state: Optional[StudentState] = None,
                  log_cb: Optional[Callable[[dict], None]] = None,
                  checkpoint_cb: Optional[Callable[[StudentState, list], None]] = None,
                  stop_iteration: Optional[int] = None,
                  **init_kwargs) -> tuple[StudentState, PrivacySpend, list[dict]]:
    """Phase 2 loop: sample batch, private student step, discriminator step.

    The teacher is never modified. The spend reported each iteration is the
    budget of the completed prefix; with a target epsilon the loop refuses to
    start an iteration whose completion would exceed it. stop_iteration
    bounds this invocation without touching the plan (an interrupted run to
    resume later); sigma calibration always covers the full plan.
    """
    if state is None:
        state = init_student_state(teacher, data, schedule, plan, **init_kwargs)
    if data.n < plan.batch_size:
        raise ValueError("dataset smaller than one batch")
    last = plan.iterations if stop_iteration is None else min(stop_iteration, plan.iterations)
    models = state.models
    history: list[dict] = []
    teacher_before = models.teacher.params.flatten()
    for k in range(state.iteration, last):
        spend_after = total_epsilon(state.privacy.with_iterations(k + 1))
        if plan.target_epsilon is not None and spend_after.epsilon_dp > plan.target_epsilon * (1 + 1e-9):
            raise BudgetExceededError(
                f"iteration {k} would spend eps={spend_after.epsilon_dp:.6g} "
                f"> target {plan.target_epsilon}")
        idx = state.streams["batch"].integers(0, data.n, size=plan.batch_size)
        labels = data.y[idx] if data.n_classes > 0 else None
        new_params, new_opt, so = sanitized_student_update(
            models, data.x[idx], labels, schedule, plan, state.opt,
            state.streams["step"], state.streams["forward"], state.noise_source,
            privacy=state.privacy)
        models.student.params, state.opt = new_params, new_opt
        if plan.lambda_adv > 0.0:
            d_params, d_opt, d_loss = discriminator_update(models, so, plan, state.opt_d)
            models.discriminator.params, state.opt_d = d_params, d_opt
        else:
            d_loss = float("nan")
            state.opt_d = state.opt_d.advanced()
        state.iteration = k + 1
        row = {"iteration": k, "dis_loss": so.dis_value, "adv_loss": so.adv_value,
               "disc_loss": d_loss, "lr": state.opt.lr,
               "eps_spent": spend_after.epsilon_dp, "r": so.r}
        history.append(row)
        if log_cb:
            log_cb(row)
        if checkpoint_cb and plan.checkpoint_every and (k + 1) % plan.checkpoint_every == 0:
            checkpoint_cb(state, history)
    if not np.array_equal(models.teacher.params.flatten(), teacher_before):
        raise TrainingFailureError("teacher parameters changed during distillation")
    spend = total_epsilon(state.privacy.with_iterations(max(state.iteration, 1)))
    return state, spend, history


def sample_labeled(model: Denoiser, schedule: NoiseSchedule, n_per_class: int,
                   rng: np.random.Generator, w: float = 0.0) -> LabeledDataset:
    """Class-by-class reverse sampling into a labelled dataset."""
    if model.n_classes < 1:
        raise ValueError("model is unconditional; cannot sample labelled data")
    xs, ys = [], []
    for k in range(model.n_classes):
        xs.append(sample_reverse(model, schedule, GuidanceConfig(w), n_per_class, k, rng))
        ys.append(np.full(n_per_class, k))
    return LabeledDataset(np.concatenate(xs), np.concatenate(ys), model.n_classes)


ABLATION_VARIANTS = ("mse_t", "mse_t+mse", "mse_t+mse+adv")


def ablation_suite(teacher: Denoiser, data: LabeledDataset, test: LabeledDataset,
                   schedule: NoiseSchedule, base_plan: TrainPlan,
                   variants: tuple[str, ...] = ABLATION_VARIANTS,
                   seeds: tuple[int, ...] = (0, 1, 2),
                   n_eval_per_class: int = 64, **init_kwargs) -> list[dict]:
    """Loss-term ablation: retrain the student per variant and seed, then
    score a classifier trained on its samples against real test data."""
    from .metrics import classifier_accuracy
    rows = []
    for variant in variants:
        if variant not in ABLATION_VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        accs = []
        for seed in seeds:
            plan = replace(base_plan, seed=seed,
                           use_data_mse=variant != "mse_t",
                           lambda_adv=base_plan.lambda_adv if variant.endswith("adv") else 0.0)
            st, _, _ = train_student(teacher, data, schedule, plan, **init_kwargs)
            synth = sample_labeled(st.models.student, schedule, n_eval_per_class,
                                   np.random.default_rng(10_000 + seed))
            accs.append(classifier_accuracy(synth, test, seed=0))
        accs_arr = np.array(accs)
        rows.append({"variant": variant, "accuracies": accs,
                     "mean": float(accs_arr.mean()),
                     "std": float(accs_arr.std(ddof=1)) if len(accs) > 1 else 0.0})
    return rows
