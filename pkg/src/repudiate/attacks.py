"""Membership-inference attacks: Xent, MEntr, LiRA (per-example Gaussians) and EnhancedMIA.

Every score is oriented so that higher means "more member-like"; a sample is
predicted a member when ``score >= threshold``.  Attacks address samples by
their index into an attacker-visible *pool* dataset, which contains the
target's training set together with held-out data.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .model import Hyperparams, ModelSpec, fit, forward, logit_confidence, per_sample_loss

VAR_FLOOR = 1e-6


@dataclass(frozen=True)
class AttackScore:
    sample: int
    score: float
    prediction: bool


@dataclass
class ShadowSet:
    spec: ModelSpec
    hp: Hyperparams
    params: list[np.ndarray]
    members: np.ndarray  # (s, pool_n) bool
    seed: int
    _phi: np.ndarray | None = field(default=None, repr=False)

    @property
    def count(self) -> int:
        return len(self.params)

    def phi(self, pool: Dataset) -> np.ndarray:
        """Logit-scaled confidence of every shadow on every pool sample, ``(s, pool_n)``."""
        if self._phi is None:
            self._phi = np.stack([logit_confidence(p, self.spec, pool.features, pool.labels) for p in self.params])
        return self._phi


def train_shadows(pool: Dataset, s: int, spec: ModelSpec, hp: Hyperparams, seed: int) -> ShadowSet:
    """Train ``s`` shadows; each pool sample is a member of exactly ``s // 2`` of them.

    Membership is drawn per sample (a random half of the shadows), so each
    shadow sees a random, roughly half-sized subset of the pool.
    """
    if s < 2:
        raise ValueError("need at least 2 shadow models")
    rng = np.random.default_rng(seed)
    ranks = np.argsort(rng.random((s, pool.n)), axis=0)
    members = ranks < s // 2
    seeds = rng.integers(0, 2**31, size=(s, 2))
    params = []
    for j in range(s):
        idx = np.flatnonzero(members[j])
        if len(idx) < hp.batch_size:
            raise ValueError("shadow training set smaller than the batch size")
        params.append(fit(spec, pool.subset(idx), hp, int(seeds[j, 0]), int(seeds[j, 1])))
    return ShadowSet(spec, hp, params, members, seed)


# ------------------------------------------------------------ calibration


@dataclass
class Calibration:
    method: str  # "max_accuracy" | "fixed_fpr" | "ratio"
    thresholds: dict[int, float]  # per label; key -1 is the global threshold
    rate: float | None = None
    shadow_seed: int | None = None

    def __post_init__(self):
        if self.method == "fixed_fpr" and not (self.rate is not None and 0 < self.rate < 1):
            raise ValueError("fixed FPR rate must be in (0, 1)")

    def threshold_for(self, labels) -> np.ndarray:
        labels = np.asarray(labels)
        if -1 in self.thresholds:
            return np.full(labels.shape, self.thresholds[-1])
        missing = set(np.unique(labels).tolist()) - set(self.thresholds)
        if missing:
            raise KeyError(f"no calibrated threshold for labels {sorted(missing)}")
        return np.array([self.thresholds[int(y)] for y in labels])

    def to_json(self) -> dict:
        return {"method": self.method, "rate": self.rate, "shadow_seed": self.shadow_seed,
                "thresholds": {str(k): v for k, v in sorted(self.thresholds.items())}}

    @classmethod
    def from_json(cls, obj: dict) -> Calibration:
        return cls(obj["method"], {int(k): float(v) for k, v in obj["thresholds"].items()},
                   obj.get("rate"), obj.get("shadow_seed"))


def max_accuracy_threshold(in_scores, out_scores) -> float:
    """Lowest threshold among those maximizing accuracy of ``score >= threshold``.

    Candidate thresholds are every observed score plus ``+inf`` (all non-member).
    """
    ins = np.sort(np.asarray(in_scores, dtype=np.float64))
    outs = np.sort(np.asarray(out_scores, dtype=np.float64))
    cands = np.append(np.unique(np.concatenate([ins, outs])), np.inf)
    in_ge = len(ins) - np.searchsorted(ins, cands, side="left")
    out_lt = np.searchsorted(outs, cands, side="left")
    return float(cands[int(np.argmax(in_ge + out_lt))])


def calibrate_per_label(shadow_scores: np.ndarray, members: np.ndarray, labels: np.ndarray,
                        shadow_seed: int | None = None) -> Calibration:
    """Per-label max-accuracy thresholds from shadow in/out score sets."""
    thresholds = {}
    for y in np.unique(labels):
        cols = labels == y
        s = shadow_scores[:, cols]
        mem = members[:, cols]
        thresholds[int(y)] = max_accuracy_threshold(s[mem], s[~mem])
    return Calibration("max_accuracy", thresholds, shadow_seed=shadow_seed)


# ---------------------------------------------------------- score formulas


def cross_entropy_scores(params, spec, x, y) -> np.ndarray:
    return -per_sample_loss(params, spec, x, y)


def mentr(probs: np.ndarray, labels) -> np.ndarray:
    """Modified entropy: −(1−p_y)log p_y − Σ_{i≠y} p_i log(1−p_i)."""
    labels = np.asarray(labels)
    rows = np.arange(len(probs))
    p = np.clip(probs, 0.0, 1.0)
    py = p[rows, labels]
    term_y = -(1.0 - py) * np.log(np.maximum(py, 1e-300))
    log_comp = np.log(np.maximum(1.0 - p, 1e-300))
    others = -(p * log_comp)
    others[rows, labels] = 0.0
    return term_y + others.sum(axis=1)


def mentr_scores(params, spec, x, y) -> np.ndarray:
    return -mentr(forward(params, spec, x), y)


def gaussian_llr(phi, mu_in, var_in, mu_out, var_out) -> np.ndarray:
    """``log N(phi; mu_in, var_in) − log N(phi; mu_out, var_out)``."""
    var_in = np.maximum(var_in, VAR_FLOOR)
    var_out = np.maximum(var_out, VAR_FLOOR)
    lin = -0.5 * (phi - mu_in) ** 2 / var_in - 0.5 * np.log(2 * np.pi * var_in)
    lout = -0.5 * (phi - mu_out) ** 2 / var_out - 0.5 * np.log(2 * np.pi * var_out)
    return lin - lout


def _masked_stats(phi: np.ndarray, mask: np.ndarray):
    cnt = mask.sum(axis=0)
    mean = np.where(mask, phi, 0.0).sum(axis=0) / np.maximum(cnt, 1)
    var = np.where(mask, (phi - mean) ** 2, 0.0).sum(axis=0) / np.maximum(cnt, 1)
    return mean, var, cnt


# ------------------------------------------------------------------ attacks


class Attack:
    """Base: score / predict samples of the pool on a given parameter vector."""

    name = "attack"

    def __init__(self, pool: Dataset, spec: ModelSpec):
        self.pool = pool
        self.spec = spec
        self.calibration: Calibration | None = None

    def scores(self, params: np.ndarray, indices) -> np.ndarray:
        raise NotImplementedError

    def predict(self, params: np.ndarray, indices) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.int64)
        if self.calibration is None:
            raise RuntimeError(f"{self.name} is not calibrated")
        return self.scores(params, idx) >= self.calibration.threshold_for(self.pool.labels[idx])

    def score_records(self, params: np.ndarray, indices) -> list[AttackScore]:
        idx = np.asarray(indices, dtype=np.int64)
        s = self.scores(params, idx)
        p = s >= self.calibration.threshold_for(self.pool.labels[idx])
        return [AttackScore(int(i), float(a), bool(b)) for i, a, b in zip(idx, s, p)]


class _ShadowThresholdAttack(Attack):
    score_fn = staticmethod(cross_entropy_scores)

    def calibrate(self, shadows: ShadowSet) -> Calibration:
        s = np.stack([self.score_fn(p, shadows.spec, self.pool.features, self.pool.labels)
                      for p in shadows.params])
        self.calibration = calibrate_per_label(s, shadows.members, self.pool.labels, shadows.seed)
        return self.calibration

    def scores(self, params, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return self.score_fn(params, self.spec, self.pool.features[idx], self.pool.labels[idx])


class XentAttack(_ShadowThresholdAttack):
    name = "xent"
    score_fn = staticmethod(cross_entropy_scores)


class MEntrAttack(_ShadowThresholdAttack):
    name = "mentr"
    score_fn = staticmethod(mentr_scores)


class LiRAAttack(Attack):
    """Per-example IN/OUT Gaussian likelihood ratio on logit-scaled confidence."""

    name = "lira"

    def __init__(self, pool: Dataset, spec: ModelSpec, shadows: ShadowSet):
        super().__init__(pool, spec)
        self.shadows = shadows
        phi = shadows.phi(pool)
        self.mu_in, self.var_in, n_in = _masked_stats(phi, shadows.members)
        self.mu_out, self.var_out, n_out = _masked_stats(phi, ~shadows.members)
        self._enough = (n_in >= 2) & (n_out >= 2)

    def scores(self, params, indices):
        idx = np.asarray(indices, dtype=np.int64)
        if not self._enough[idx].all():
            raise ValueError("LiRA needs >= 2 IN and >= 2 OUT shadows per sample")
        phi = logit_confidence(params, self.spec, self.pool.features[idx], self.pool.labels[idx])
        return gaussian_llr(phi, self.mu_in[idx], self.var_in[idx], self.mu_out[idx], self.var_out[idx])

    def calibrate(self, mode: str = "max_accuracy") -> Calibration:
        if mode == "ratio":
            self.calibration = Calibration("ratio", {-1: 0.0}, shadow_seed=self.shadows.seed)
            return self.calibration
        phi = self.shadows.phi(self.pool)
        mem = self.shadows.members
        ins, outs = [], []
        for j in range(self.shadows.count):
            keep = np.arange(self.shadows.count) != j
            mi, vi, ci = _masked_stats(phi[keep], mem[keep])
            mo, vo, co = _masked_stats(phi[keep], ~mem[keep])
            ok = (ci >= 2) & (co >= 2)
            s = gaussian_llr(phi[j], mi, vi, mo, vo)
            ins.append(s[ok & mem[j]])
            outs.append(s[ok & ~mem[j]])
        thr = max_accuracy_threshold(np.concatenate(ins), np.concatenate(outs))
        self.calibration = Calibration("max_accuracy", {-1: thr}, shadow_seed=self.shadows.seed)
        return self.calibration


class EnhancedMIA(Attack):
    """Loss attack with a threshold fixing the false-positive rate on population data."""

    name = "enhanced"

    def scores(self, params, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return cross_entropy_scores(params, self.spec, self.pool.features[idx], self.pool.labels[idx])

    def calibrate(self, params: np.ndarray, population, fpr: float = 0.1) -> Calibration:
        population = np.asarray(population, dtype=np.int64)
        if population.size == 0:
            raise ValueError("empty population set")
        thr = fpr_threshold(self.scores(params, population), fpr)
        self.calibration = Calibration("fixed_fpr", {-1: thr}, rate=fpr)
        return self.calibration


def fpr_threshold(population_scores, fpr: float) -> float:
    """The (1 − fpr)-quantile of non-member scores."""
    if not 0 < fpr < 1:
        raise ValueError("fpr must be in (0, 1)")
    return float(np.quantile(np.asarray(population_scores, dtype=np.float64), 1.0 - fpr))


ATTACKS = ("lira", "enhanced", "mentr", "xent")


def build_attacks(names, pool: Dataset, spec: ModelSpec, shadows: ShadowSet, target_params: np.ndarray,
                  population, fpr: float = 0.1, lira_mode: str = "max_accuracy") -> dict[str, Attack]:
    """Instantiate and calibrate the requested attacks (ψ fixed for all later comparisons)."""
    out: dict[str, Attack] = {}
    for name in names:
        if name == "xent":
            a = XentAttack(pool, spec)
            a.calibrate(shadows)
        elif name == "mentr":
            a = MEntrAttack(pool, spec)
            a.calibrate(shadows)
        elif name == "lira":
            a = LiRAAttack(pool, spec, shadows)
            a.calibrate(lira_mode)
        elif name == "enhanced":
            a = EnhancedMIA(pool, spec)
            a.calibrate(target_params, population, fpr)
        else:
            raise ValueError(f"unknown attack {name!r}")
        out[name] = a
    return out


# ------------------------------------------------------ single-sample API


def attack_xent(params, spec, x, y, calibration: Calibration, sample: int = -1) -> AttackScore:
    s = float(cross_entropy_scores(params, spec, np.atleast_2d(x), [y])[0])
    return AttackScore(sample, s, s >= float(calibration.threshold_for([y])[0]))


def attack_mentr(params, spec, x, y, calibration: Calibration, sample: int = -1) -> AttackScore:
    s = float(mentr_scores(params, spec, np.atleast_2d(x), [y])[0])
    return AttackScore(sample, s, s >= float(calibration.threshold_for([y])[0]))


def attack_lira(params, spec, pool: Dataset, index: int, shadows: ShadowSet, threshold: float = 0.0) -> AttackScore:
    s = float(LiRAAttack(pool, spec, shadows).scores(params, [index])[0])
    return AttackScore(index, s, s >= threshold)


def attack_enhanced_mia(params, spec, x, y, population_losses, fpr: float = 0.1, sample: int = -1) -> AttackScore:
    pop = np.asarray(population_losses, dtype=np.float64)
    if pop.size == 0:
        raise ValueError("empty population set")
    thr = fpr_threshold(-pop, fpr)
    s = float(cross_entropy_scores(params, spec, np.atleast_2d(x), [y])[0])
    return AttackScore(sample, s, s >= thr)


def mi_disagreement(attack: Attack, params_a, params_b, indices) -> set[int]:
    """Probe indices on which the attack's membership bits differ between two models."""
    idx = np.asarray(indices, dtype=np.int64)
    diff = attack.predict(params_a, idx) != attack.predict(params_b, idx)
    return set(idx[diff].tolist())


def scores_csv(rows: list[tuple[int, str, float, bool, str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "attack", "score", "prediction", "model_id"])
    for sample, attack, score, pred, model_id in rows:
        w.writerow([sample, attack, repr(float(score)), int(pred), model_id])
    return buf.getvalue()


def calibrations_json(attacks: dict[str, Attack]) -> str:
    return json.dumps({k: a.calibration.to_json() for k, a in attacks.items()}, indent=2, sort_keys=True) + "\n"
