"""Shared fixtures: the toy mixture task and the trained teacher baseline.

The teacher run is the expensive piece (about a minute); it is session-scoped
and shared between the training tests and the acceptance gate, which also
reuses its guided-sample quality number as the baseline for the private
student criteria.
"""

from __future__ import annotations

import numpy as np
import pytest

from privdiff import (GuidanceConfig, TrainPlan, build_schedule,
                      median_bandwidth, mmd, sample_reverse, train_teacher)
from privdiff.data import make_eight_gaussians

TOY_T = 50
TOY_BETA = (1e-4, 0.25)
TEACHER_SAMPLE_W = 0.4


@pytest.fixture(scope="session")
def toy_data():
    full = make_eight_gaussians(4096 + 2048, seed=0)
    train = full.subset(np.arange(4096))
    held = full.subset(np.arange(4096, 4096 + 2048))
    return train, held


@pytest.fixture(scope="session")
def toy_schedule():
    return build_schedule(TOY_T, *TOY_BETA)


@pytest.fixture(scope="session")
def teacher(toy_data, toy_schedule):
    train, _ = toy_data
    plan = TrainPlan(iterations=3000, batch_size=256, lr=0.08, seed=1, p_uncond=0.1)
    model, history = train_teacher(train, toy_schedule, plan, hidden=(64, 64),
                                   eval_every=500)
    return model, history


@pytest.fixture(scope="session")
def teacher_samples(teacher, toy_schedule):
    model, _ = teacher
    rng = np.random.default_rng(7)
    parts = [sample_reverse(model, toy_schedule, GuidanceConfig(TEACHER_SAMPLE_W),
                            128, k, rng) for k in range(8)]
    return np.concatenate(parts)


@pytest.fixture(scope="session")
def teacher_mmd(teacher_samples, toy_data):
    _, held = toy_data
    bw = median_bandwidth(held.x[:1024], teacher_samples)
    return mmd(held.x[:1024], teacher_samples, bw)
