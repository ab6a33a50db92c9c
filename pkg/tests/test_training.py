"""Distillation losses, the stochastic-step private update, and both loops."""

import math

import numpy as np
import pytest

from privdiff import autodiff as ad
from privdiff.autodiff import Var
from privdiff.data import LabeledDataset, make_eight_gaussians
from privdiff.diffusion import Denoiser, build_schedule
from privdiff.nn import OptState, ParamSet, bind_params, flatten_grads
from privdiff.privacy import PrivacyParams, total_epsilon
from privdiff.training import (BudgetExceededError, Discriminator, GaussianNoiseSource,
                               ModelTriple, TrainPlan, TrainingFailureError,
                               UNSET_SIGMA, adv_loss_discriminator, adv_loss_student,
                               combined_loss, dis_loss, discriminator_accuracy,
                               discriminator_update, init_student_state, make_streams,
                               pseudo_label, sanitized_student_update,
                               stochastic_step_grads, StepOutputs, train_student,
                               train_teacher)

RNG = np.random.default_rng(77)


def small_models(seed=0, n_classes=0, lam_ready=True):
    teacher = Denoiser.create(2, (8,), seed=seed, time_dim=4, n_classes=n_classes)
    student = Denoiser.create(2, (6,), seed=seed + 1, time_dim=4, n_classes=n_classes)
    disc = Discriminator.create(2, (6,), seed=seed + 2, time_dim=4,
                                n_classes=n_classes, conditioned=n_classes > 0)
    return ModelTriple(teacher, student, disc)


def zero_logit_disc():
    # zero weights -> logits (0, 0) -> both class probabilities exactly 0.5
    d = Discriminator.create(2, (4,), seed=0)
    d.params = d.params.unflatten(np.zeros(d.params.size))
    return d


def biased_disc(b0, b1):
    d = zero_logit_disc()
    # final layer bias drives the softmax; hidden is zero
    params = {k: v.copy() for k, v in d.params.items()}
    params["b1"] = np.array([b0, b1])
    d.params = ParamSet(params)
    return d


# ---------------------------------------------------------------- labels


def test_pseudo_label_separated_clouds():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((40, 2)) * 0.05 + np.array([5.0, 5.0])
    b = rng.standard_normal((40, 2)) * 0.05 - np.array([5.0, 5.0])
    ds = pseudo_label(np.vstack([a, b]), 2, seed=0)
    assert len(set(ds.y[:40])) == 1 and len(set(ds.y[40:])) == 1
    assert ds.y[0] != ds.y[40]


def test_pseudo_label_k1_and_determinism_and_errors():
    x = np.random.default_rng(1).standard_normal((20, 3))
    ds = pseudo_label(x, 1, seed=5)
    assert np.array_equal(ds.y, np.zeros(20, dtype=np.int64))
    a = pseudo_label(x, 4, seed=5)
    b = pseudo_label(x, 4, seed=5)
    assert np.array_equal(a.y, b.y)
    with pytest.raises(ValueError):
        pseudo_label(x, 21, seed=0)
    with pytest.raises(ValueError):
        pseudo_label(x, 0, seed=0)


# ------------------------------------------------------------- adversarial


def test_adv_loss_student_half_probability():
    disc = zero_logit_disc()
    loss = adv_loss_student(disc, np.zeros((1, 2)), np.zeros((1, 2)))
    assert loss.item() == pytest.approx(math.log(0.5))
    # the discriminator-side value is the same canonical-pair expression
    d_loss = adv_loss_discriminator(disc, np.zeros((1, 2)), np.zeros((1, 2)))
    assert d_loss.item() == pytest.approx(math.log(0.5))


def test_adv_loss_limits_are_clamped():
    # discriminator sure of the canonical order: loss -> 0^-
    sure = biased_disc(40.0, -40.0)
    near_zero = adv_loss_student(sure, np.zeros((1, 2)), np.zeros((1, 2))).item()
    assert -1e-6 < near_zero < 0.0
    # perfect fooling: the clamp keeps the loss finite
    fooled = biased_disc(-40.0, 40.0)
    val = adv_loss_student(fooled, np.zeros((1, 2)), np.zeros((1, 2))).item()
    assert math.isfinite(val)
    assert val == pytest.approx(math.log(1e-7), rel=1e-6)


def test_adv_loss_student_gradient_matches_fd():
    disc = Discriminator.create(2, (5,), seed=3)
    x_t = RNG.standard_normal((3, 2))
    x_s0 = RNG.standard_normal((3, 2))
    xs = Var(x_s0, requires_grad=True)
    loss = adv_loss_student(disc, xs, x_t)
    ad.backward(loss)
    got = np.array(xs.grad)
    h = 1e-6
    for i in range(3):
        for j in range(2):
            e = np.zeros_like(x_s0)
            e[i, j] = h
            up = adv_loss_student(disc, Var(x_s0 + e), x_t).item()
            dn = adv_loss_student(disc, Var(x_s0 - e), x_t).item()
            fd = (up - dn) / (2 * h)
            assert abs(got[i, j] - fd) / max(abs(fd), 1e-8) < 1e-4


def test_adv_loss_discriminator_gradient_matches_fd():
    disc = Discriminator.create(2, (4,), seed=4)
    x_t = RNG.standard_normal((2, 2))
    x_s = RNG.standard_normal((2, 2))
    pvars = bind_params(disc.params)
    loss = adv_loss_discriminator(disc, x_t, x_s, pvars=pvars)
    ad.backward(loss)
    got = flatten_grads(pvars)
    flat = disc.params.flatten()
    for idx in RNG.choice(flat.size, size=10, replace=False):
        e = np.zeros_like(flat)
        e[idx] = 1e-6
        d_up = Discriminator(disc.params.unflatten(flat + e), 2, (4,))
        d_dn = Discriminator(disc.params.unflatten(flat - e), 2, (4,))
        fd = (adv_loss_discriminator(d_up, x_t, x_s).item()
              - adv_loss_discriminator(d_dn, x_t, x_s).item()) / 2e-6
        assert abs(got[idx] - fd) / max(abs(fd), 1e-8) < 1e-4


def test_dis_loss_contract():
    z = np.zeros((1, 1))
    assert dis_loss(z, z, z).item() == 0.0
    got = dis_loss(np.array([[1.0]]), np.array([[0.0]]), np.array([[1.0]])).item()
    assert got == pytest.approx(2.0)
    a, b, c = (RNG.standard_normal((4, 3)) for _ in range(3))
    assert dis_loss(a, c, b).item() == pytest.approx(dis_loss(b, c, a).item())
    with pytest.raises(ValueError):
        dis_loss(np.zeros((1, 2)), np.zeros((1, 3)), np.zeros((1, 2)))


def test_combined_loss():
    assert combined_loss(2.0, -0.5, 0.0) == 2.0
    assert combined_loss(2.0, -0.5, 1.0) == 1.5
    assert TrainPlan(iterations=1, batch_size=1).lambda_adv == 1.0
    with pytest.raises(ValueError):
        combined_loss(1.0, 1.0, -0.1)


# ------------------------------------------------------ stochastic stepping


def toy_batch(n=5, n_classes=0, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-0.8, 0.8, size=(n, 2))
    labels = rng.integers(0, n_classes, size=n) if n_classes else None
    return x, labels


def test_stochastic_step_t1_forces_r1():
    models = small_models()
    sched = build_schedule(1, 0.2, 0.2)
    plan = TrainPlan(iterations=1, batch_size=5)
    x, _ = toy_batch()
    so = stochastic_step_grads(models, x, None, sched, plan,
                               np.random.default_rng(0), np.random.default_rng(1))
    assert so.r == 1


def test_stochastic_step_deterministic():
    models = small_models()
    sched = build_schedule(6, 0.1, 0.3)
    plan = TrainPlan(iterations=1, batch_size=5)
    x, _ = toy_batch()
    a = stochastic_step_grads(models, x, None, sched, plan,
                              np.random.default_rng(3), np.random.default_rng(4))
    b = stochastic_step_grads(models, x, None, sched, plan,
                              np.random.default_rng(3), np.random.default_rng(4))
    assert a.r == b.r
    assert np.array_equal(a.x_grads, b.x_grads)


def test_lambda_zero_never_touches_discriminator():
    models = small_models()
    sched = build_schedule(4, 0.1, 0.3)
    plan = TrainPlan(iterations=1, batch_size=5, lambda_adv=0.0)
    x, _ = toy_batch()
    before = models.discriminator.eval_count
    stochastic_step_grads(models, x, None, sched, plan,
                          np.random.default_rng(0), np.random.default_rng(1))
    assert models.discriminator.eval_count == before


def _step_param_grad(models, x, labels, sched, plan, r, eps):
    """Parameter gradient of the summed per-example step-r loss (no clip)."""
    so = stochastic_step_grads(models, x, labels, sched, plan,
                               np.random.default_rng(0), np.random.default_rng(0),
                               force_r=r, force_eps=eps)
    ad.backward_from(so.intermediate, so.x_grads)
    return flatten_grads(so.pvars)


def test_stochastic_step_unbiased_over_r():
    # enumerating r reproduces the all-steps average exactly (no clip, no noise)
    models = small_models(seed=5)
    T = 4
    sched = build_schedule(T, 0.1, 0.3)
    plan = TrainPlan(iterations=1, batch_size=4, lambda_adv=1.0)
    x, _ = toy_batch(4, seed=2)
    eps = np.random.default_rng(9).standard_normal(x.shape)
    per_r = [_step_param_grad(models, x, None, sched, plan, r, eps) for r in range(1, T + 1)]
    mean_over_r = np.mean(per_r, axis=0)
    all_steps_avg = np.sum(per_r, axis=0) / T
    assert np.max(np.abs(mean_over_r - all_steps_avg)) < 1e-10


def test_sanitized_update_equals_plain_sgd_when_unclipped():
    models = small_models(seed=6)
    sched = build_schedule(5, 0.1, 0.3)
    priv = PrivacyParams(C=1e9, sigma=1e-300, B=4, N=1, T=5, s=models.student.params.size)
    plan = TrainPlan(iterations=1, batch_size=4, lr=0.1, privacy=priv)
    x, _ = toy_batch(4, seed=3)
    opt = OptState(0.1, 1)
    before = models.student.params.flatten()
    new_params, _, so = sanitized_student_update(
        models, x, None, sched, plan, opt,
        np.random.default_rng(5), np.random.default_rng(6),
        GaussianNoiseSource(np.random.default_rng(7)))
    # oracle: direct autodiff of the mean per-example loss at the same step
    so2 = stochastic_step_grads(models, x, None, sched, plan,
                                np.random.default_rng(5), np.random.default_rng(6))
    assert so2.r == so.r
    ad.backward_from(so2.intermediate, so2.x_grads)
    grad = flatten_grads(so2.pvars) / 4.0
    expect = before - 0.1 * grad
    assert np.max(np.abs(new_params.flatten() - expect)) < 1e-8


def test_sanitized_update_noise_magnitude():
    # two runs differing only in the DP-noise stream: the update difference is
    # gamma * (z1 - z2) * sigma * C / (B*T) with z std-normal
    models = small_models(seed=8)
    sched = build_schedule(5, 0.1, 0.3)
    s = models.student.params.size
    priv = PrivacyParams(C=0.5, sigma=4.0, B=6, N=1, T=5, s=s)
    plan = TrainPlan(iterations=1, batch_size=6, lr=0.2, privacy=priv)
    x, _ = toy_batch(6, seed=4)
    opt = OptState(0.2, 1)
    diffs = []
    for trial in range(30):
        outs = []
        for noise_seed in (100 + trial, 500 + trial):
            p, _, _ = sanitized_student_update(
                models, x, None, sched, plan, opt,
                np.random.default_rng(5), np.random.default_rng(6),
                GaussianNoiseSource(np.random.default_rng(noise_seed)))
            outs.append(p.flatten())
        diffs.append(outs[0] - outs[1])
    observed = np.concatenate(diffs).std()
    target = math.sqrt(2.0) * 0.2 * 4.0 * 0.5 / (6 * 5)
    assert abs(observed - target) / target < 0.05


def test_sanitized_update_clip_bound_respected():
    models = small_models(seed=9)
    sched = build_schedule(3, 0.1, 0.3)
    priv = PrivacyParams(C=1e-3, sigma=1e-300, B=5, N=1, T=3, s=models.student.params.size)
    plan = TrainPlan(iterations=1, batch_size=5, privacy=priv)
    x, _ = toy_batch(5, seed=5)
    so = stochastic_step_grads(models, x, None, sched, plan,
                               np.random.default_rng(0), np.random.default_rng(1))
    from privdiff.privacy import clip
    for row in so.x_grads:
        assert np.linalg.norm(clip(row, 1e-3)) <= 1e-3 + 1e-12


def test_noise_injected_exactly_once_per_update():
    models = small_models(seed=10)
    sched = build_schedule(4, 0.1, 0.3)
    priv = PrivacyParams(C=0.1, sigma=1.0, B=3, N=1, T=4, s=models.student.params.size)
    plan = TrainPlan(iterations=1, batch_size=3, privacy=priv)
    x, _ = toy_batch(3, seed=6)
    src = GaussianNoiseSource(np.random.default_rng(0))
    opt = OptState(0.1, 1)
    for k in range(3):
        _, opt, _ = sanitized_student_update(models, x, None, sched, plan, opt,
                                             np.random.default_rng(k),
                                             np.random.default_rng(k), src)
        assert src.draws == k + 1


# ------------------------------------------------------------ discriminator


def test_discriminator_update_zero_lr_is_identity():
    models = small_models(seed=11)
    so = StepOutputs(r=2, x_grads=np.zeros((3, 2)), intermediate=None, pvars={},
                     x_teacher=RNG.standard_normal((3, 2)),
                     x_student=RNG.standard_normal((3, 2)),
                     x_true_prev=RNG.standard_normal((3, 2)), labels=None,
                     dis_value=0.0, adv_value=0.0)
    plan = TrainPlan(iterations=1, batch_size=3)
    before = models.discriminator.params.flatten()
    new, _, _ = discriminator_update(models, so, plan, OptState(0.0, 1))
    assert np.array_equal(new.flatten(), before)


def test_discriminator_update_gradient_matches_fd():
    models = small_models(seed=12)
    disc = models.discriminator
    xt = RNG.standard_normal((3, 2))
    xs = RNG.standard_normal((3, 2))
    so = StepOutputs(r=1, x_grads=np.zeros((3, 2)), intermediate=None, pvars={},
                     x_teacher=xt, x_student=xs,
                     x_true_prev=xs, labels=None, dis_value=0.0, adv_value=0.0)
    plan = TrainPlan(iterations=1, batch_size=3)
    lr = 1e-3
    new, _, _ = discriminator_update(models, so, plan, OptState(lr, 1000000000))
    implied_grad = (disc.params.flatten() - new.flatten()) / OptState(lr, 1000000000).lr

    def disc_loss_at(flat):
        d = Discriminator(disc.params.unflatten(flat), 2, disc.hidden, disc.time_dim,
                          disc.n_classes, disc.conditioned)
        p_c = d.pair_probs(xt, xs, 1, None)
        p_s = d.pair_probs(xs, xt, 1, None)
        return float(-(np.log(1 - np.clip(p_c[:, 1], 1e-7, 1 - 1e-7)).mean()
                       + np.log(np.clip(p_s[:, 1], 1e-7, 1 - 1e-7)).mean()))

    flat = disc.params.flatten()
    for idx in RNG.choice(flat.size, size=8, replace=False):
        e = np.zeros_like(flat)
        e[idx] = 1e-6
        fd = (disc_loss_at(flat + e) - disc_loss_at(flat - e)) / 2e-6
        assert abs(implied_grad[idx] - fd) / max(abs(fd), 1e-8) < 1e-3


def test_discriminator_learns_separable_stub():
    models = small_models(seed=13)
    plan = TrainPlan(iterations=1, batch_size=32, lr_disc=0.5)
    rng = np.random.default_rng(0)
    opt_d = OptState(0.5, 400)
    for k in range(400):
        xt = rng.standard_normal((32, 2)) * 0.1 + 1.0
        xs = rng.standard_normal((32, 2)) * 0.1 - 1.0
        so = StepOutputs(r=1, x_grads=np.zeros((32, 2)), intermediate=None, pvars={},
                         x_teacher=xt, x_student=xs, x_true_prev=xs, labels=None,
                         dis_value=0.0, adv_value=0.0)
        new, opt_d, _ = discriminator_update(models, so, plan, opt_d)
        models.discriminator.params = new
    held_t = rng.standard_normal((64, 2)) * 0.1 + 1.0
    held_s = rng.standard_normal((64, 2)) * 0.1 - 1.0
    assert discriminator_accuracy(models.discriminator, held_t, held_s, 1) > 0.9


# ------------------------------------------------------------------- loops


def tiny_dataset(n=64, seed=0, n_classes=4):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-0.9, 0.9, size=(n, 2))
    return LabeledDataset(x, rng.integers(0, n_classes, size=n), n_classes)


def test_train_teacher_smoke_and_holdout_decrease():
    data = make_eight_gaussians(512, seed=1)
    sched = build_schedule(8, 0.05, 0.3)
    plan = TrainPlan(iterations=300, batch_size=64, lr=0.08, seed=0, p_uncond=0.1)
    model, history = train_teacher(data, sched, plan, hidden=(16,), eval_every=100)
    losses = [h["loss"] for h in history]
    assert all(math.isfinite(v) for v in losses)
    holdouts = [h["holdout_loss"] for h in history if "holdout_loss" in h]
    assert holdouts[-1] < holdouts[0]


def test_train_teacher_full_dropout_disables_conditioning():
    data = tiny_dataset(n=96)
    sched = build_schedule(5, 0.1, 0.3)
    plan = TrainPlan(iterations=40, batch_size=16, lr=0.05, seed=3, p_uncond=1.0)
    model, _ = train_teacher(data, sched, plan, hidden=(8,))
    x = np.random.default_rng(0).standard_normal((6, 2))
    assert np.array_equal(model.predict_noise(x, 2, 1), model.predict_noise(x, 2, None))


def test_train_teacher_divergence_raises():
    data = tiny_dataset(n=64)
    sched = build_schedule(5, 0.1, 0.3)
    plan = TrainPlan(iterations=300, batch_size=16, lr=1e9, seed=0)
    with np.errstate(over="ignore"), pytest.raises(TrainingFailureError):
        train_teacher(data, sched, plan, hidden=(8,))


def _student_setup(n_iters=3, target=None, sigma=None, n=64, lam=1.0):
    data = tiny_dataset(n=n)
    sched = build_schedule(6, 0.1, 0.3)
    teacher = Denoiser.create(2, (8,), seed=0, time_dim=4, n_classes=4)
    priv = PrivacyParams(C=0.05, sigma=sigma if sigma is not None else UNSET_SIGMA,
                         B=8, N=n_iters, T=6, s=1)
    plan = TrainPlan(iterations=n_iters, batch_size=8, lambda_adv=lam, lr=0.1,
                     lr_disc=0.1, privacy=priv, target_epsilon=target, seed=4,
                     p_uncond=0.1)
    return data, sched, teacher, plan


def test_train_student_single_iteration_smoke():
    data, sched, teacher, plan = _student_setup(n_iters=1, target=None, sigma=2.0)
    state, spend, history = train_student(teacher, data, sched, plan,
                                          student_hidden=(6,), disc_hidden=(6,),
                                          time_dim=4)
    assert len(history) == 1
    assert math.isfinite(history[0]["dis_loss"])
    assert state.noise_source.draws == 1
    expect = total_epsilon(state.privacy.with_iterations(1))
    assert spend.epsilon_dp == pytest.approx(expect.epsilon_dp)
    assert history[0]["eps_spent"] == pytest.approx(expect.epsilon_dp)


def test_train_student_teacher_frozen():
    data, sched, teacher, plan = _student_setup(n_iters=3, sigma=2.0)
    before = teacher.params.flatten().copy()
    train_student(teacher, data, sched, plan, student_hidden=(6,),
                  disc_hidden=(6,), time_dim=4)
    assert np.array_equal(teacher.params.flatten(), before)


def test_train_student_budget_exceeded():
    # explicit sigma too small for the target: refuse before starting
    data, sched, teacher, plan = _student_setup(n_iters=5, target=0.5, sigma=0.5)
    with pytest.raises(BudgetExceededError):
        train_student(teacher, data, sched, plan, student_hidden=(6,),
                      disc_hidden=(6,), time_dim=4)


def test_train_student_lambda_zero_skips_discriminator():
    data, sched, teacher, plan = _student_setup(n_iters=3, sigma=2.0, lam=0.0)
    state, _, history = train_student(teacher, data, sched, plan,
                                      student_hidden=(6,), disc_hidden=(6,),
                                      time_dim=4)
    assert state.models.discriminator.eval_count == 0
    assert all(math.isnan(h["disc_loss"]) for h in history)


def test_train_student_epsilon_monotone_in_sigma():
    # same run shape, bigger noise -> smaller reported budget
    outs = {}
    for sigma in (0.6, 1.9):
        data, sched, teacher, plan = _student_setup(n_iters=2, sigma=sigma)
        _, spend, _ = train_student(teacher, data, sched, plan,
                                    student_hidden=(6,), disc_hidden=(6,), time_dim=4)
        outs[sigma] = spend.epsilon_dp
    assert outs[1.9] < outs[0.6]


def test_train_student_deterministic_given_seed():
    results = []
    for _ in range(2):
        data, sched, teacher, plan = _student_setup(n_iters=4, sigma=2.0)
        state, _, history = train_student(teacher, data, sched, plan,
                                          student_hidden=(6,), disc_hidden=(6,),
                                          time_dim=4)
        results.append((state.models.student.params.flatten(),
                        [h["dis_loss"] for h in history]))
    assert np.array_equal(results[0][0], results[1][0])
    assert results[0][1] == results[1][1]


def test_streams_are_independent_and_restartable():
    s1 = make_streams(0, ("a", "b"))
    s2 = make_streams(0, ("a", "b"))
    assert s1["a"].integers(1 << 30) == s2["a"].integers(1 << 30)
    assert s1["a"].integers(1 << 30) != s1["b"].integers(1 << 30)


def test_ablation_single_variant_row_and_determinism():
    from privdiff.training import ablation_suite
    data = tiny_dataset(n=96)
    test = tiny_dataset(n=64, seed=9)
    sched = build_schedule(5, 0.1, 0.3)
    teacher = Denoiser.create(2, (8,), seed=0, time_dim=4, n_classes=4)
    priv = PrivacyParams(C=0.05, sigma=2.0, B=8, N=4, T=5, s=1)
    plan = TrainPlan(iterations=4, batch_size=8, lr=0.1, lr_disc=0.1,
                     privacy=priv, seed=0, p_uncond=0.1)
    kw = dict(student_hidden=(6,), disc_hidden=(6,), time_dim=4)
    rows = ablation_suite(teacher, data, test, sched, plan, variants=("mse_t",),
                          seeds=(0,), n_eval_per_class=4, **kw)
    assert len(rows) == 1 and rows[0]["variant"] == "mse_t"
    rows2 = ablation_suite(teacher, data, test, sched, plan, variants=("mse_t",),
                           seeds=(0,), n_eval_per_class=4, **kw)
    assert rows[0]["accuracies"] == rows2[0]["accuracies"]
    with pytest.raises(ValueError):
        ablation_suite(teacher, data, test, sched, plan, variants=("bogus",),
                       seeds=(0,), **kw)
