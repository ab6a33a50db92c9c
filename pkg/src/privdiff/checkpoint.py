"""Checkpoints, run manifests, metrics logs.

Checkpoints are a single JSON document with a magic/version pair. Parameter
tensors are stored as base64 of their little-endian float64 bytes, so a
save/load round trip is bit-identical. Student checkpoints additionally
carry the discriminator, both optimizer states, the iteration counter, the
privacy parameters in effect, and every RNG stream state, which is what
makes an interrupted run resumable with an unchanged trajectory.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path
from typing import Optional

import numpy as np

from .diffusion import Denoiser, NoiseSchedule
from .nn import OptState, ParamSet
from .privacy import PrivacyParams
from .training import (Discriminator, GaussianNoiseSource, ModelTriple,
                       StudentState, make_streams, STUDENT_STREAMS)

__all__ = [
    "save_teacher",
    "load_teacher",
    "save_student_state",
    "load_student_state",
    "write_manifest",
    "read_manifest",
    "MetricsLog",
    "CKPT_MAGIC",
]

CKPT_MAGIC = "privdiff-ckpt"
CKPT_VERSION = 1


def _enc_array(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape),
            "data": base64.b64encode(a.astype("<f8").tobytes()).decode("ascii")}


def _dec_array(d: dict) -> np.ndarray:
    raw = np.frombuffer(base64.b64decode(d["data"]), dtype="<f8")
    return raw.reshape(d["shape"]).astype(np.float64)


def _enc_params(ps: ParamSet) -> list:
    # a list survives json key sorting with the parameter order intact
    return [[name, _enc_array(t)] for name, t in ps.items()]


def _dec_params(items: list) -> ParamSet:
    return ParamSet({name: _dec_array(v) for name, v in items})


def _enc_opt(opt: OptState) -> dict:
    return {"base_lr": opt.base_lr, "total_steps": opt.total_steps, "step": opt.step}


def _dec_opt(d: dict) -> OptState:
    return OptState(float(d["base_lr"]), int(d["total_steps"]), int(d["step"]))


def _schedule_meta(schedule: NoiseSchedule) -> dict:
    return {"T": schedule.T, "beta_first": float(schedule.beta[0]),
            "beta_last": float(schedule.beta[-1]), "hash": schedule.content_hash()}


def _write(path, kind: str, payload: dict) -> None:
    doc = {"magic": CKPT_MAGIC, "version": CKPT_VERSION, "kind": kind, **payload}
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def _read(path, kind: Optional[str] = None) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ValueError(f"{path}: not a readable checkpoint ({e})") from e
    if doc.get("magic") != CKPT_MAGIC:
        raise ValueError(f"{path}: missing checkpoint magic")
    if doc.get("version") != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    if kind and doc.get("kind") != kind:
        raise ValueError(f"{path}: expected a {kind} checkpoint, found {doc.get('kind')}")
    return doc


def _enc_denoiser(m: Denoiser) -> dict:
    return {"params": _enc_params(m.params), "data_dim": m.data_dim,
            "hidden": list(m.hidden), "time_dim": m.time_dim,
            "n_classes": m.n_classes}


def _dec_denoiser(d: dict) -> Denoiser:
    return Denoiser(_dec_params(d["params"]), int(d["data_dim"]),
                    tuple(int(h) for h in d["hidden"]), int(d["time_dim"]),
                    int(d["n_classes"]))


def save_teacher(path, model: Denoiser, schedule: NoiseSchedule,
                 opt: Optional[OptState] = None, extra: Optional[dict] = None) -> None:
    _write(path, "teacher", {"model": _enc_denoiser(model),
                             "schedule": _schedule_meta(schedule),
                             "opt": _enc_opt(opt) if opt else None,
                             "extra": extra or {}})


def load_teacher(path) -> tuple[Denoiser, dict]:
    doc = _read(path, "teacher")
    return _dec_denoiser(doc["model"]), doc


def save_student_state(path, state: StudentState, schedule: NoiseSchedule,
                       extra: Optional[dict] = None) -> None:
    disc = state.models.discriminator
    _write(path, "student", {
        "schedule": _schedule_meta(schedule),
        "student": _enc_denoiser(state.models.student),
        "teacher": _enc_denoiser(state.models.teacher),
        "discriminator": {"params": _enc_params(disc.params),
                          "data_dim": disc.data_dim, "hidden": list(disc.hidden),
                          "time_dim": disc.time_dim, "n_classes": disc.n_classes,
                          "conditioned": disc.conditioned},
        "opt": _enc_opt(state.opt),
        "opt_d": _enc_opt(state.opt_d),
        "iteration": state.iteration,
        "noise_draws": state.noise_source.draws,
        "privacy": {"C": state.privacy.C, "sigma": state.privacy.sigma,
                    "B": state.privacy.B, "N": state.privacy.N,
                    "T": state.privacy.T, "s": state.privacy.s,
                    "delta": state.privacy.delta},
        "rng": state.rng_states(),
        "extra": extra or {},
    })


def load_student_state(path) -> tuple[StudentState, dict]:
    doc = _read(path, "student")
    dd = doc["discriminator"]
    disc = Discriminator(_dec_params(dd["params"]), int(dd["data_dim"]),
                         tuple(int(h) for h in dd["hidden"]), int(dd["time_dim"]),
                         int(dd["n_classes"]), bool(dd["conditioned"]))
    models = ModelTriple(_dec_denoiser(doc["teacher"]), _dec_denoiser(doc["student"]), disc)
    pp = doc["privacy"]
    privacy = PrivacyParams(float(pp["C"]), float(pp["sigma"]), int(pp["B"]),
                            int(pp["N"]), int(pp["T"]), int(pp["s"]), float(pp["delta"]))
    streams = make_streams(0, STUDENT_STREAMS)
    state = StudentState(models, _dec_opt(doc["opt"]), _dec_opt(doc["opt_d"]),
                         int(doc["iteration"]), streams,
                         GaussianNoiseSource(streams["dpnoise"]), privacy)
    # json round-trips PCG64 state dicts losslessly (python ints are unbounded)
    state.restore_rng(doc["rng"])
    state.noise_source.draws = int(doc.get("noise_draws", 0))
    return state, doc


def write_manifest(path, fields: dict) -> None:
    lines = [f"{k}={fields[k]}" for k in fields]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        k, v = line.split("=", 1)
        out[k] = v
    return out


class MetricsLog:
    """Append-only tab-separated log with a fixed column header."""

    def __init__(self, path, columns: list[str]):
        self.path = Path(path)
        self.columns = columns
        if not self.path.exists():
            self.path.write_text("\t".join(columns) + "\n")

    def append(self, row: dict) -> None:
        def fmt(v):
            if isinstance(v, float):
                return "%.17g" % v
            return str(v)
        with self.path.open("a") as f:
            f.write("\t".join(fmt(row.get(c, "")) for c in self.columns) + "\n")
