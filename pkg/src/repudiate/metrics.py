"""Evaluation metrics: parameter distance, MI prediction/score differences, batch uniformity.

Probe indices refer to the attack pool.  The pool is laid out as the
training set (indices ``0..n-1``) followed by held-out samples, so training
index ``i`` is pool index ``i``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .attacks import Attack
from .data import MiniBatchSpec

SETTINGS = ("diff", "common", "validation")


def model_distance(theta_star, theta_minus) -> float:
    """``‖θ_* − θ_-‖² / dim``."""
    a = np.asarray(theta_star, dtype=np.float64)
    b = np.asarray(theta_minus, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"parameter length mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float(diff @ diff / a.size)


@dataclass(frozen=True)
class ProbePlan:
    """Per-pair probe sets for the three settings."""

    diff: tuple[tuple[int, ...], ...]
    common: tuple[tuple[int, ...], ...]
    validation: tuple[tuple[int, ...], ...]

    def for_setting(self, setting: str):
        if setting not in SETTINGS:
            raise ValueError(f"unknown setting {setting!r}")
        return getattr(self, setting)


def make_probe_plan(groups, n_train: int, holdout, seed: int, size: int = 5) -> ProbePlan:
    """Diff probes are the group itself; Common/Validation draw ``size`` seeded samples.

    Common samples come from the training set minus the group, Validation
    samples from ``holdout`` (pool indices of non-members).
    """
    rng = np.random.default_rng(seed)
    holdout = np.asarray(holdout, dtype=np.int64)
    if size < 1:
        raise ValueError("probe size must be >= 1")
    if holdout.size < size:
        raise ValueError("holdout smaller than the probe size")
    diff, common, val = [], [], []
    for g in groups:
        members = tuple(sorted(int(i) for i in g))
        if not members:
            raise ValueError("empty group")
        rest = np.setdiff1d(np.arange(n_train), members)
        if rest.size < size:
            raise ValueError("training set too small for common probes")
        diff.append(members)
        common.append(tuple(sorted(rng.choice(rest, size, replace=False).tolist())))
        val.append(tuple(sorted(rng.choice(holdout, size, replace=False).tolist())))
    return ProbePlan(tuple(diff), tuple(common), tuple(val))


def prediction_diff(attack: Attack, theta_star, theta_minus: list, probes) -> float:
    """Percentage of pairs with at least one probe whose prediction bit differs.

    ``theta_minus[j]`` is paired with ``probes[j]``.
    """
    if len(theta_minus) != len(probes):
        raise ValueError("one probe set per forged model required")
    if not probes:
        raise ValueError("no pairs")
    differing = 0
    for params, u in zip(theta_minus, probes):
        u = np.asarray(u, dtype=np.int64)
        if u.size == 0:
            raise ValueError("empty probe set")
        if np.any(attack.predict(theta_star, u) != attack.predict(params, u)):
            differing += 1
    return 100.0 * differing / len(probes)


def score_diff(attack: Attack, theta_star, theta_minus, indices) -> np.ndarray:
    """``|score(θ_-) − score(θ_*)|`` per sample."""
    idx = np.asarray(indices, dtype=np.int64)
    return np.abs(attack.scores(theta_minus, idx) - attack.scores(theta_star, idx))


def _counts(batches: list[MiniBatchSpec], n: int) -> np.ndarray:
    if not batches:
        raise ValueError("empty batch sequence")
    flat = np.concatenate([np.asarray(b.indices, dtype=np.int64) for b in batches])
    if flat.size and (flat.min() < 0 or flat.max() >= n):
        raise IndexError("batch index out of range")
    return np.bincount(flat, minlength=n)


def uniformity(batches: list[MiniBatchSpec], n: int) -> float:
    """``Σ_i |f_i − 1/n|`` where ``f_i`` is the share of batch slots holding sample ``i``."""
    counts = _counts(batches, n)
    return float(np.abs(counts / counts.sum() - 1.0 / n).sum())


def freq_profile(batches: list[MiniBatchSpec], n: int) -> np.ndarray:
    """Per-sample slot frequencies sorted descending (sums to 1)."""
    counts = _counts(batches, n)
    return np.sort(counts / counts.sum())[::-1]


def summarize(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return {"count": 0}
    q = np.quantile(v, [0.0, 0.25, 0.5, 0.75, 1.0])
    stderr = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return {"count": int(v.size), "mean": float(v.mean()), "stderr": stderr,
            "min": float(q[0]), "q25": float(q[1]), "median": float(q[2]), "q75": float(q[3]), "max": float(q[4])}


@dataclass
class MetricReport:
    d_theta: dict[int, float] = field(default_factory=dict)
    c_a: dict[str, dict[str, float]] = field(default_factory=dict)
    s_a: dict[str, list[float]] = field(default_factory=dict)
    uniformity: dict[int, float] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    inputs: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for per in self.c_a.values():
            for v in per.values():
                if not 0.0 <= v <= 100.0:
                    raise ValueError("percentage out of range")

    def to_json(self) -> dict:
        return {
            "d_theta": {"values": {str(k): v for k, v in sorted(self.d_theta.items())},
                        "summary": summarize(list(self.d_theta.values()))},
            "c_a": self.c_a,
            "s_a": {k: summarize(v) for k, v in sorted(self.s_a.items())},
            "uniformity": {"values": {str(k): v for k, v in sorted(self.uniformity.items())},
                           "summary": summarize(list(self.uniformity.values()))},
            "config": self.config,
            "inputs": self.inputs,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        """Long format: metric, key, setting, value."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "key", "setting", "value"])
        for g, v in sorted(self.d_theta.items()):
            w.writerow(["d_theta", g, "", repr(v)])
        for a in sorted(self.c_a):
            for s in sorted(self.c_a[a]):
                w.writerow(["c_a", a, s, repr(self.c_a[a][s])])
        for a in sorted(self.s_a):
            for stat, v in summarize(self.s_a[a]).items():
                w.writerow(["s_a", a, stat, repr(v)])
        for g, v in sorted(self.uniformity.items()):
            w.writerow(["uniformity", g, "", repr(v)])
        return buf.getvalue()


def profiles_tsv(profiles: dict[str, np.ndarray]) -> str:
    """Gnuplot-friendly columns: rank then one column per named profile."""
    names = sorted(profiles)
    length = max(len(p) for p in profiles.values())
    lines = ["# rank\t" + "\t".join(names)]
    for r in range(length):
        cells = [repr(float(profiles[k][r])) if r < len(profiles[k]) else "" for k in names]
        lines.append(f"{r}\t" + "\t".join(cells))
    return "\n".join(lines) + "\n"


__all__ = [
    "SETTINGS", "model_distance", "ProbePlan", "make_probe_plan", "prediction_diff", "score_diff",
    "uniformity", "freq_profile", "summarize", "MetricReport", "profiles_tsv",
]
