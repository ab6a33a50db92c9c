"""Datasets: the labelled container, toy generators, and the file format.

Files are plain text: a magic first line, '#'-prefixed key=value header
lines, then one row per example with values printed as %.17g (lossless for
float64), optionally followed by an integer label column. Writing the same
data twice produces identical bytes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

__all__ = [
    "LabeledDataset",
    "make_eight_gaussians",
    "write_dataset",
    "read_dataset",
    "file_sha256",
    "MAGIC",
]

MAGIC = "#privdiff-data v1"


@dataclass
class LabeledDataset:
    """Examples in [-1, 1]^d with integer labels in {0..n_classes-1}."""

    x: np.ndarray
    y: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.y.shape != (self.x.shape[0],):
            raise ValueError("one label per example required")
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ValueError("labels outside {0..n_classes-1}")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.x[idx], self.y[idx], self.n_classes)

    def split(self, holdout_fraction: float, seed: int) -> tuple["LabeledDataset", "LabeledDataset"]:
        """Deterministic shuffle, then (train, holdout)."""
        rng = np.random.default_rng(seed)
        perm = rng.permutation(self.n)
        n_hold = max(1, int(round(holdout_fraction * self.n)))
        return self.subset(perm[n_hold:]), self.subset(perm[:n_hold])


def make_eight_gaussians(n: int, seed: int, n_components: int = 8,
                         radius: float = 0.72, std: float = 0.04) -> LabeledDataset:
    """Mixture of small Gaussians on a circle, clamped into [-1, 1]^2."""
    if n < n_components:
        raise ValueError("need at least one point per component")
    rng = np.random.default_rng(seed)
    angles = 2.0 * np.pi * np.arange(n_components) / n_components
    centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    labels = rng.integers(0, n_components, size=n)
    pts = centers[labels] + std * rng.standard_normal((n, 2))
    return LabeledDataset(np.clip(pts, -1.0, 1.0), labels, n_components)


def _fmt(v: float) -> str:
    return "%.17g" % v


def write_dataset(path, x: np.ndarray, labels: Optional[np.ndarray] = None,
                  n_classes: int = 0, value_range: tuple[float, float] = (-1.0, 1.0),
                  header: Optional[dict] = None) -> None:
    """Write rows (and an optional label column) under a magic header."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, d = x.shape
    lines = [MAGIC]
    lines.append(f"#n={n} d={d} k={int(n_classes)} labeled={int(labels is not None)} "
                 f"range={_fmt(value_range[0])},{_fmt(value_range[1])}")
    for key in sorted(header or {}):
        lines.append(f"#{key}={header[key]}")
    for i in range(n):
        row = " ".join(_fmt(v) for v in x[i])
        if labels is not None:
            row += f" {int(labels[i])}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


def read_dataset(path) -> tuple[np.ndarray, Optional[np.ndarray], dict]:
    """Read a dataset file; returns (x, labels or None, header dict)."""
    text = Path(path).read_text().splitlines()
    if not text or text[0] != MAGIC:
        raise ValueError(f"{path}: not a dataset file (missing magic header)")
    meta: dict = {}
    body_start = len(text)
    for i, line in enumerate(text[1:], start=1):
        if not line.startswith("#"):
            body_start = i
            break
        # packed "#n=.. d=.." lines parse token-wise; other header lines are
        # one key=value pair whose value may contain spaces
        tokens = line[1:].split()
        if tokens and all("=" in t for t in tokens):
            for token in tokens:
                k, v = token.split("=", 1)
                meta[k] = v
        elif "=" in line[1:]:
            k, v = line[1:].split("=", 1)
            meta[k.strip()] = v.strip()
    n = int(meta.get("n", -1))
    d = int(meta.get("d", -1))
    labeled = meta.get("labeled", "0") == "1"
    rows = [ln.split() for ln in text[body_start:] if ln.strip()]
    if n >= 0 and len(rows) != n:
        raise ValueError(f"{path}: header promises {n} rows, found {len(rows)}")
    if not rows:
        x = np.zeros((0, max(d, 0)))
        labels = np.zeros(0, dtype=np.int64) if labeled else None
        return x, labels, meta
    data = np.array([[float(v) for v in r] for r in rows])
    if labeled:
        x, labels = data[:, :-1], data[:, -1].astype(np.int64)
    else:
        x, labels = data, None
    if d >= 0 and x.shape[1] != d:
        raise ValueError(f"{path}: header promises d={d}, rows have {x.shape[1]}")
    lo, hi = (float(v) for v in meta.get("range", "-1,1").split(","))
    if x.size and (x.min() < lo - 1e-9 or x.max() > hi + 1e-9):
        raise ValueError(f"{path}: values outside declared range [{lo}, {hi}]")
    return x, labels, meta


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
