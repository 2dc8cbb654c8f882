"""Forged mini-batch generation and proof-of-repudiation reconstruction.

Phase one (:func:`forge_all` / :func:`forge_all_full`) walks an honest C=1
log once.  At every step and for each of the κ splits it scores μ candidate
batches drawn from outside the split and keeps the one whose gradient is
closest to the logged batch's gradient.  Every λ-group inside that split
whose members touched the logged batch gets the kept batch as a substitute.

Phase two (:func:`reconstruct_por`) replays training for a single group on
its substituted batch sequence, producing the forged model and a genuine
log of that replay.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Dataset, MiniBatchSpec, SplitPlan, dist_to_subspace
from .model import ModelSpec, batch_grads, loss_and_grad, lr_at, sigmoid
from .pol import PoLLog, PoLManifest, StepRecord, record_log, run_steps, write_text_atomic

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ForgeConfig:
    mu: int
    kappa: int
    lam: int
    seed: int = 0
    augment: bool = False
    count_costs: bool = True
    debug: bool = False

    def __post_init__(self):
        if self.mu < 1 or self.kappa < 1 or self.lam < 1:
            raise ValueError("mu, kappa and lam must be >= 1")

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class CostCounter:
    phase1: int = 0
    phase2: int = 0


@dataclass
class ForgedBatchStore:
    """Substitute batches per (group, step); unreplaced entries fall back to the logged batch."""

    config: ForgeConfig
    plan: SplitPlan
    original: list[MiniBatchSpec]
    entries: dict[tuple[int, int], tuple[MiniBatchSpec, float]]
    costs: CostCounter = field(default_factory=CostCounter)
    split_distances: np.ndarray | None = None
    candidate_distances: np.ndarray | None = None

    @property
    def steps(self) -> int:
        return len(self.original)

    def entry(self, g: int, t: int) -> tuple[MiniBatchSpec, float, bool]:
        if not 1 <= t <= self.steps or not 0 <= g < self.plan.group_count:
            raise KeyError((g, t))
        hit = self.entries.get((g, t))
        if hit is None:
            return self.original[t - 1], 0.0, False
        return hit[0], hit[1], True

    def batches_for(self, g: int) -> list[MiniBatchSpec]:
        return [self.entry(g, t)[0] for t in range(1, self.steps + 1)]

    def replaced_steps(self, g: int) -> list[int]:
        return sorted(t for (gg, t) in self.entries if gg == g)

    def max_distance(self, g: int) -> float:
        return max((d for (gg, _), (_, d) in self.entries.items() if gg == g), default=0.0)

    def to_jsonl(self, path) -> None:
        """Header line, then one line per replaced (group, step) entry."""
        header = {
            "config": self.config.to_json(),
            "n": self.plan.n,
            "lam": self.plan.lam,
            "kappa": self.plan.kappa,
            "plan_seed": self.plan.seed,
            "steps": self.steps,
        }
        lines = [json.dumps(header, sort_keys=True)]
        for (g, t) in sorted(self.entries):
            batch, dist = self.entries[(g, t)]
            lines.append(json.dumps({"g": g, "t": t, **batch.to_json(), "replaced": True, "distance": dist},
                                    separators=(",", ":")))
        write_text_atomic(Path(path), "\n".join(lines) + "\n")

    @classmethod
    def from_jsonl(cls, path, plan: SplitPlan, original: list[MiniBatchSpec]) -> ForgedBatchStore:
        lines = Path(path).read_text().splitlines()
        header = json.loads(lines[0])
        if (header["n"], header["lam"], header["kappa"], header["plan_seed"]) != (plan.n, plan.lam, plan.kappa, plan.seed):
            raise ValueError("forge store does not match the split plan")
        if header["steps"] != len(original):
            raise ValueError("forge store does not match the log length")
        entries = {}
        for line in lines[1:]:
            rec = json.loads(line)
            entries[(rec["g"], rec["t"])] = (MiniBatchSpec.from_json(rec), rec["distance"])
        return cls(ForgeConfig(**header["config"]), plan, list(original), entries)


@dataclass
class PoR:
    group: tuple[int, ...]
    log: PoLLog
    params: np.ndarray
    max_distance: float
    replaced_steps: list[int] = field(default_factory=list)


@dataclass
class ForgedTrace:
    batches: list[MiniBatchSpec]
    distances: np.ndarray
    costs: CostCounter


# --------------------------------------------------------------- helpers


def sample_candidates(rng: np.random.Generator, pool: np.ndarray, b: int, mu: int,
                      augment: bool = False, forced: int | None = None) -> list[MiniBatchSpec]:
    """``mu`` batches of size ``b``, each drawn without replacement from ``pool``.

    With ``forced`` that index is put in every batch and ``b - 1`` others are drawn.
    When ``mu`` covers every possible batch, all of them are enumerated instead.
    """
    pool = np.asarray(pool)
    draw = b - (forced is not None)
    if draw > len(pool):
        raise ValueError(f"cannot draw {draw} distinct samples from a pool of {len(pool)}")
    if math.comb(len(pool), draw) <= mu:
        picks = np.array(list(itertools.combinations(pool.tolist(), draw)), dtype=np.int64).reshape(-1, draw)
        mu = len(picks)
    elif draw:
        keys = rng.random((mu, len(pool)))
        picks = pool[np.argpartition(keys, draw - 1, axis=1)[:, :draw]]
    else:
        picks = np.empty((mu, 0), dtype=np.int64)
    if forced is not None:
        picks = np.concatenate([picks, np.full((mu, 1), forced)], axis=1)
    picks = np.sort(picks, axis=1)
    flips = rng.integers(0, 2, size=(mu, b)) if augment else np.zeros((mu, b), dtype=int)
    return [MiniBatchSpec(tuple(p), tuple(f)) for p, f in zip(picks, flips)]


def candidate_distances(params: np.ndarray, spec: ModelSpec, orig_grad: np.ndarray,
                        candidates: list[MiniBatchSpec], dataset: Dataset,
                        weight_decay: float = 0.0) -> np.ndarray:
    grads = batch_grads(params, spec, candidates, dataset, weight_decay)
    diff = grads - orig_grad
    return np.einsum("ij,ij->i", diff, diff)


def candidate_argmin(params: np.ndarray, spec: ModelSpec, orig_grad: np.ndarray,
                     candidates: list[MiniBatchSpec], dataset: Dataset,
                     weight_decay: float = 0.0) -> tuple[int, float]:
    """Index and squared gradient distance of the best candidate (lowest index on ties)."""
    if not candidates:
        raise ValueError("no candidates")
    dists = candidate_distances(params, spec, orig_grad, candidates, dataset, weight_decay)
    best = int(np.argmin(dists))
    return best, float(dists[best])


def _require_c1(log_: PoLLog) -> None:
    if set(log_.checkpoints) != set(range(log_.manifest.steps + 1)):
        raise ValueError("forging needs a log with a checkpoint at every step (C=1)")


# ------------------------------------------------------------ algorithm 1


def forge_pointwise(log_: PoLLog, dataset: Dataset, x_minus: int, cfg: ForgeConfig) -> ForgedTrace:
    """Per-point forging: substitute every step with the best of μ batches avoiding ``x_minus``."""
    _require_c1(log_)
    m = log_.manifest
    if not 0 <= x_minus < m.n:
        raise IndexError("x_minus out of range")
    if m.b > m.n - 1:
        raise ValueError("batch size too large to avoid x_minus")
    rng = np.random.default_rng(cfg.seed)
    pool = np.delete(np.arange(m.n), x_minus)
    wd = m.hp.weight_decay
    costs = CostCounter()
    out, dists = [], np.empty(m.steps)
    for t in range(1, m.steps + 1):
        theta = log_.checkpoints[t - 1]
        _, g_orig = loss_and_grad(theta, m.spec, log_.steps[t - 1].batch, dataset, wd)
        cands = sample_candidates(rng, pool, m.b, cfg.mu, cfg.augment)
        best, dist = candidate_argmin(theta, m.spec, g_orig, cands, dataset, wd)
        costs.phase1 += 1 + len(cands)
        out.append(cands[best])
        dists[t - 1] = dist
    return ForgedTrace(out, dists, costs)


# ------------------------------------------------------- algorithms 2 / 3


def _phase_one(log_: PoLLog, dataset: Dataset, plan: SplitPlan, cfg: ForgeConfig, full: bool) -> ForgedBatchStore:
    _require_c1(log_)
    m = log_.manifest
    if plan.n != m.n or plan.lam != cfg.lam or plan.kappa != cfg.kappa:
        raise ValueError("split plan does not match the forge config / log")
    if plan.steps < m.steps:
        raise ValueError("split plan covers fewer steps than the log")
    if m.b > m.n - m.n // cfg.kappa:
        raise ValueError("batch size exceeds the candidate pool outside a split")
    rng = np.random.default_rng(cfg.seed)
    wd = m.hp.weight_decay if full else 0.0
    augment = cfg.augment if full else False
    costs = CostCounter()
    split_d = np.empty((m.steps, cfg.kappa))
    cand_d = np.full((m.steps, cfg.kappa, cfg.mu), np.inf) if cfg.debug else None
    entries: dict[tuple[int, int], tuple[MiniBatchSpec, float]] = {}
    original = log_.batches()
    for t in range(1, m.steps + 1):
        theta = log_.checkpoints[t - 1]
        orig = original[t - 1]
        _, g_orig = loss_and_grad(theta, m.spec, orig, dataset, wd)
        costs.phase1 += 1
        split_of_sample = plan.assignment[t - 1][plan.group_of]
        touched = np.unique(plan.group_of[list(orig.indices)])
        for k in range(cfg.kappa):
            pool = np.flatnonzero(split_of_sample != k)
            cands = sample_candidates(rng, pool, m.b, cfg.mu, augment)
            dists = candidate_distances(theta, m.spec, g_orig, cands, dataset, wd)
            costs.phase1 += len(cands)
            best = int(np.argmin(dists))
            split_d[t - 1, k] = dists[best]
            if cand_d is not None:
                cand_d[t - 1, k, :len(dists)] = dists
            for g in touched[plan.assignment[t - 1][touched] == k]:
                entries[(int(g), t)] = (cands[best], float(dists[best]))
        if t % 500 == 0:
            log.debug("phase one: step %d/%d", t, m.steps)
    return ForgedBatchStore(cfg, plan, original, entries, costs if cfg.count_costs else CostCounter(),
                            split_d, cand_d)


def forge_all(log_: PoLLog, dataset: Dataset, plan: SplitPlan, cfg: ForgeConfig) -> ForgedBatchStore:
    """Split-reuse forging for plain SGD logs without augmentation."""
    m = log_.manifest
    if m.augment or not m.hp.plain:
        raise ValueError("log uses augmentation or modified SGD; use forge_all_full")
    return _phase_one(log_, dataset, plan, cfg, full=False)


def forge_all_full(log_: PoLLog, dataset: Dataset, plan: SplitPlan, cfg: ForgeConfig) -> ForgedBatchStore:
    """Split-reuse forging with flip augmentation of candidates and the weight-decayed loss."""
    return _phase_one(log_, dataset, plan, cfg, full=True)


# ---------------------------------------------------------------- phase 2


def reconstruct_por(log_: PoLLog, dataset: Dataset, store: ForgedBatchStore, group: int,
                    checkpoint_interval: int = 1, shortcut: bool = False,
                    costs: CostCounter | None = None) -> PoR:
    """Replay training on the group's substituted batches.

    With ``shortcut`` the replay starts from the honest checkpoint just before
    the first substitution; the prefix is bitwise identical either way.
    """
    m = log_.manifest
    if store.steps != m.steps:
        raise ValueError("store and log cover different step counts")
    batches = store.batches_for(group)
    replaced = store.replaced_steps(group)
    manifest = replace(m, checkpoint_interval=checkpoint_interval)
    start = 0
    if shortcut:
        start = (replaced[0] - 1) if replaced else m.steps
        _require_c1(log_)
    if start == 0:
        forged = record_log(dataset, manifest, batches)
        replayed = m.steps
    else:
        forged = _resume_log(log_, dataset, manifest, batches, start)
        replayed = m.steps - start
    if costs is not None:
        costs.phase2 += replayed
    members = tuple(int(i) for i in store.plan.groups[group])
    return PoR(members, forged, forged.final, store.max_distance(group), replaced)


def _resume_log(log_: PoLLog, dataset: Dataset, manifest: PoLManifest, batches, start: int) -> PoLLog:
    wanted = set(manifest.checkpoint_steps())
    ckpts = {t: log_.checkpoints[t] for t in wanted if t <= start}
    vels = {t: log_.velocities[t] for t in wanted if t <= start and t in log_.velocities}
    velocity = log_.velocities[start] if manifest.uses_velocity else None
    params = log_.checkpoints[start]
    if start == manifest.steps:
        ckpts[start] = params
    for t, params, state in run_steps(params, manifest.spec, manifest.hp, dataset, batches[start:], start, velocity):
        if t in wanted:
            ckpts[t] = params
            if manifest.uses_velocity:
                vels[t] = state.velocity
    steps = [StepRecord(t, b, lr_at(t - 1, manifest.hp)) for t, b in enumerate(batches, 1)]
    return PoLLog(manifest, steps, ckpts, vels)


def substituted_log(log_: PoLLog, store: ForgedBatchStore, group: int) -> PoLLog:
    """Honest checkpoints paired with the group's forged batches (per-step error = lr·‖Δgrad‖)."""
    steps = [StepRecord(t, b, s.lr) for (t, b), s in zip(enumerate(store.batches_for(group), 1), log_.steps)]
    return PoLLog(log_.manifest, steps, dict(log_.checkpoints), dict(log_.velocities))


def exclusion_scan(por: PoR) -> int:
    """Number of batch slots in the forged log that hold a target index."""
    targets = set(por.group)
    return sum(1 for s in por.log.steps for i in s.batch.indices if i in targets)


# ---------------------------------------------------------- insertion forge


def forge_insert(log_: PoLLog, dataset: Dataset, x_star, y_star: int, cfg: ForgeConfig,
                 h: float | None = None) -> tuple[PoR, Dataset, np.ndarray]:
    """Forge a log in which an outside sample appears as a training member.

    ``x_star`` is appended as index ``n``.  A random ``ceil(h·τ)`` subset of
    steps is substituted by the best of μ candidates that each contain it.
    ``h`` defaults to ``b / n``, an honest member's per-step appearance rate.
    Returns ``(por, extended_dataset, per_step_distances)``; distances are 0
    on untouched steps.
    """
    _require_c1(log_)
    m = log_.manifest
    if m.b < 1:
        raise ValueError("batch size must be >= 1")
    h = m.b / m.n if h is None else h
    if not 0 <= h <= 1:
        raise ValueError("h must be in [0, 1]")
    ext = dataset.subset(np.arange(m.n)).append(x_star, y_star)
    rng = np.random.default_rng(cfg.seed)
    n_steps = math.ceil(h * m.steps)
    chosen = set((rng.choice(m.steps, size=n_steps, replace=False) + 1).tolist())
    wd = m.hp.weight_decay
    pool = np.arange(m.n)
    batches = log_.batches()
    dists = np.zeros(m.steps)
    for t in sorted(chosen):
        theta = log_.checkpoints[t - 1]
        _, g_orig = loss_and_grad(theta, m.spec, batches[t - 1], ext, wd)
        cands = sample_candidates(rng, pool, m.b, cfg.mu, cfg.augment, forced=m.n)
        best, dist = candidate_argmin(theta, m.spec, g_orig, cands, ext, wd)
        batches[t - 1] = cands[best]
        dists[t - 1] = dist
    manifest = replace(m, n=m.n + 1)
    forged = record_log(ext, manifest, batches, log_.checkpoints[0])
    por = PoR((m.n,), forged, forged.final, float(dists.max(initial=0.0)), sorted(chosen))
    return por, ext, dists


# ------------------------------------------------------------- theorem 1


def thm1_bound(dataset: Dataset, w: np.ndarray, basis: np.ndarray, outlier: int = 0) -> tuple[float, float]:
    """Smallest single-sample gradient gap to the outlier vs. its analytic lower bound.

    Model: binary logistic regression without bias, batch size 1.  The bound
    is ``|sigmoid(w·x_out) - y_out| * dist(x_out, span(basis))``.
    """
    w = np.asarray(w, dtype=np.float64)
    spec = ModelSpec.logreg(dataset.dim, 2, bias=False)
    x_out = dataset.features[outlier]
    dist = dist_to_subspace(x_out, basis)
    if dist <= 1e-12:
        raise ValueError("outlier lies in the subspace; premises violated")
    others = [i for i in range(dataset.n) if i != outlier]
    for i in others:
        if dist_to_subspace(dataset.features[i], basis) > 1e-9:
            raise ValueError(f"sample {i} is off the subspace; premises violated")
    singles = [MiniBatchSpec((i,)) for i in range(dataset.n)]
    grads = batch_grads(w, spec, singles, dataset)
    gaps = np.linalg.norm(grads[others] - grads[outlier], axis=1)
    min_gap = float(gaps.min())
    bound = abs(float(sigmoid(np.array(w @ x_out))) - dataset.labels[outlier]) * dist
    assert min_gap >= bound - 1e-12, (min_gap, bound)
    return min_gap, float(bound)


def naive_cost(n: int, mu: int, steps: int) -> int:
    return n * mu * steps


def efficient_cost(n: int, mu: int, kappa: int, lam: int, steps: int) -> int:
    return kappa * mu * steps + n * steps // lam


__all__ = [
    "ForgeConfig", "CostCounter", "ForgedBatchStore", "PoR", "ForgedTrace", "sample_candidates",
    "candidate_argmin", "candidate_distances", "forge_pointwise", "forge_all", "forge_all_full",
    "reconstruct_por", "substituted_log", "exclusion_scan", "forge_insert", "thm1_bound",
    "naive_cost", "efficient_cost",
]
