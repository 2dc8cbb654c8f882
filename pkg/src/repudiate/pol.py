"""Proof-of-learning logs: recording, replay verification and on-disk format.

Layout of a log directory (see FORMAT.md)::

    manifest.json
    steps.jsonl                  one record per step: t, indices, flips, lr
    checkpoints/ckpt_<t>.bin     parameter checkpoints (f32 payload, CRC32)
    checkpoints/vel_<t>.bin      velocity checkpoints, only with momentum > 0
"""

from __future__ import annotations

import json
import os
import shutil
import struct
import tempfile
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Dataset, MiniBatchSpec, schedule_for_steps
from .model import Hyperparams, ModelSpec, OptimizerState, init_params, lr_at, train_step

FORMAT_VERSION = 1
_CKPT_MAGIC = b"RPCK"
_CKPT_HEADER = struct.Struct("<4sIQQI")  # magic, version, t, length, crc32


class LogFormatError(ValueError):
    """Corrupt, truncated or incompatible log directory."""


@dataclass(frozen=True)
class PoLManifest:
    spec: ModelSpec
    hp: Hyperparams
    init_seed: int
    schedule_seed: int
    n: int
    augment: bool = False
    checkpoint_interval: int = 1
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be >= 1")
        if self.hp.batch_size > self.n:
            raise ValueError("batch size exceeds n")

    @property
    def b(self) -> int:
        return self.hp.batch_size

    @property
    def steps(self) -> int:
        return self.hp.total_steps

    @property
    def uses_velocity(self) -> bool:
        return self.hp.momentum > 0

    def checkpoint_steps(self) -> list[int]:
        c = self.checkpoint_interval
        ts = list(range(0, self.steps + 1, c))
        if ts[-1] != self.steps:
            ts.append(self.steps)
        return ts

    def to_json(self) -> dict:
        return {
            "format_version": self.format_version,
            "model": self.spec.to_json(),
            "hyperparams": self.hp.to_json(),
            "init_seed": self.init_seed,
            "schedule_seed": self.schedule_seed,
            "n": self.n,
            "augment": self.augment,
            "checkpoint_interval": self.checkpoint_interval,
        }

    @classmethod
    def from_json(cls, obj: dict) -> PoLManifest:
        version = obj.get("format_version")
        if version != FORMAT_VERSION:
            raise LogFormatError(f"unsupported log format version {version!r}")
        return cls(ModelSpec.from_json(obj["model"]), Hyperparams.from_json(obj["hyperparams"]),
                   obj["init_seed"], obj["schedule_seed"], obj["n"], obj["augment"],
                   obj["checkpoint_interval"], version)


@dataclass(frozen=True)
class StepRecord:
    t: int
    batch: MiniBatchSpec
    lr: float

    def to_json(self) -> dict:
        return {"t": self.t, **self.batch.to_json(), "lr": self.lr}

    @classmethod
    def from_json(cls, obj: dict) -> StepRecord:
        return cls(obj["t"], MiniBatchSpec.from_json(obj), obj["lr"])


@dataclass
class PoLLog:
    manifest: PoLManifest
    steps: list[StepRecord]
    checkpoints: dict[int, np.ndarray]
    velocities: dict[int, np.ndarray] = field(default_factory=dict)

    def validate(self) -> None:
        m = self.manifest
        if [s.t for s in self.steps] != list(range(1, m.steps + 1)):
            raise LogFormatError("step records must be contiguous from 1 to tau")
        for ts in (0, m.steps):
            if ts not in self.checkpoints:
                raise LogFormatError(f"missing checkpoint at t={ts}")
        for s in self.steps:
            s.batch.validate(m.n)
            if s.batch.size != m.b:
                raise LogFormatError(f"step {s.t} has batch size {s.batch.size}, expected {m.b}")

    def segments(self) -> list[tuple[int, int]]:
        ts = sorted(self.checkpoints)
        return list(zip(ts[:-1], ts[1:]))

    def batches(self) -> list[MiniBatchSpec]:
        return [s.batch for s in self.steps]

    @property
    def final(self) -> np.ndarray:
        return self.checkpoints[self.manifest.steps]


@dataclass
class VerificationReport:
    errors: dict[int, float]
    epsilon: float
    steps_checked: list[tuple[int, int]]
    partial: bool = False

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.epsilon

    def to_json(self) -> dict:
        return {
            "pass": self.passed,
            "max_error": self.max_error,
            "epsilon": self.epsilon,
            "partial": self.partial,
            "segments_checked": len(self.steps_checked),
            "errors": {str(k): v for k, v in sorted(self.errors.items())},
        }


# -------------------------------------------------------------- recording


def run_steps(params, spec, hp, dataset, batches, start_t, velocity=None):
    """Replay ``batches`` as steps ``start_t+1 ...``; yields (t, params, state) after each step."""
    state = OptimizerState(np.zeros(params.size) if velocity is None else velocity.copy(), start_t)
    for batch in batches:
        params, state, _, _ = train_step(params, spec, batch, dataset, state, hp)
        yield state.t, params, state


def record_log(dataset: Dataset, manifest: PoLManifest, batches: list[MiniBatchSpec],
               params0: np.ndarray | None = None) -> PoLLog:
    """Train on an explicit batch sequence, keeping the manifest's checkpoint cadence."""
    if dataset.n < manifest.n:
        raise ValueError(f"dataset has {dataset.n} samples, manifest declares n={manifest.n}")
    if len(batches) != manifest.steps:
        raise ValueError("batch sequence length must equal total_steps")
    spec, hp = manifest.spec, manifest.hp
    params = init_params(spec, manifest.init_seed) if params0 is None else np.array(params0, dtype=np.float64)
    wanted = set(manifest.checkpoint_steps())
    ckpts = {0: params.copy()}
    vels = {0: np.zeros(params.size)} if manifest.uses_velocity else {}
    steps = []
    for (t, params, state), batch in zip(run_steps(params, spec, hp, dataset, batches, 0), batches):
        steps.append(StepRecord(t, batch, lr_at(t - 1, hp)))
        if t in wanted:
            ckpts[t] = params
            if manifest.uses_velocity:
                vels[t] = state.velocity
    return PoLLog(manifest, steps, ckpts, vels)


def record_training(dataset: Dataset, manifest: PoLManifest) -> tuple[PoLLog, np.ndarray]:
    """Run the honest training loop and return its log and final parameters."""
    if dataset.n != manifest.n:
        raise ValueError(f"dataset has {dataset.n} samples, manifest declares n={manifest.n}")
    sched = schedule_for_steps(manifest.n, manifest.b, manifest.steps, manifest.schedule_seed,
                               manifest.augment)
    log = record_log(dataset, manifest, sched.batches)
    return log, log.final


# ------------------------------------------------------------ verification


def replay_segment(log: PoLLog, dataset: Dataset, t0: int, t1: int) -> np.ndarray:
    if t0 not in log.checkpoints:
        raise LogFormatError(f"missing checkpoint at t={t0}")
    m = log.manifest
    velocity = None
    if m.uses_velocity:
        if t0 not in log.velocities:
            raise LogFormatError(f"missing velocity checkpoint at t={t0}")
        velocity = log.velocities[t0]
    params = log.checkpoints[t0]
    batches = [log.steps[t - 1].batch for t in range(t0 + 1, t1 + 1)]
    for _, params, _ in run_steps(params, m.spec, m.hp, dataset, batches, t0, velocity):
        pass
    return params


def _segment_error(log, dataset, seg) -> float:
    t0, t1 = seg
    if t1 not in log.checkpoints:
        raise LogFormatError(f"missing checkpoint at t={t1}")
    return float(np.linalg.norm(replay_segment(log, dataset, t0, t1) - log.checkpoints[t1]))


def verify_full(log: PoLLog, dataset: Dataset, epsilon: float) -> VerificationReport:
    """Replay every checkpoint segment; error is the ℓ2 distance to the logged end point."""
    log.validate()
    segs = log.segments()
    return VerificationReport({s[1]: _segment_error(log, dataset, s) for s in segs}, epsilon, segs)


def verify_subset(log: PoLLog, dataset: Dataset, epsilon: float, k: int) -> VerificationReport:
    """Verify only the ``k`` segments with the largest logged parameter change."""
    log.validate()
    segs = log.segments()
    if not 1 <= k <= len(segs):
        raise ValueError(f"k must be in [1, {len(segs)}]")
    sizes = [np.linalg.norm(log.checkpoints[b] - log.checkpoints[a]) for a, b in segs]
    order = sorted(range(len(segs)), key=lambda i: (-sizes[i], i))[:k]
    chosen = [segs[i] for i in sorted(order)]
    errs = {s[1]: _segment_error(log, dataset, s) for s in chosen}
    return VerificationReport(errs, epsilon, chosen, partial=k < len(segs))


# ----------------------------------------------------------------- storage


def _write_blob(path: Path, t: int, values: np.ndarray) -> None:
    payload = np.asarray(values, dtype="<f4").tobytes()
    header = _CKPT_HEADER.pack(_CKPT_MAGIC, FORMAT_VERSION, t, len(values), zlib.crc32(payload))
    path.write_bytes(header + payload)


def _read_blob(path: Path) -> tuple[int, np.ndarray]:
    raw = path.read_bytes()
    if len(raw) < _CKPT_HEADER.size:
        raise LogFormatError(f"{path.name}: truncated header")
    magic, version, t, length, crc = _CKPT_HEADER.unpack_from(raw)
    if magic != _CKPT_MAGIC:
        raise LogFormatError(f"{path.name}: bad magic")
    if version != FORMAT_VERSION:
        raise LogFormatError(f"{path.name}: unsupported version {version}")
    payload = raw[_CKPT_HEADER.size:]
    if len(payload) != 4 * length:
        raise LogFormatError(f"{path.name}: truncated payload")
    if zlib.crc32(payload) != crc:
        raise LogFormatError(f"{path.name}: checksum mismatch")
    return t, np.frombuffer(payload, dtype="<f4").astype(np.float64)


def write_text_atomic(path: Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_log(log: PoLLog, directory) -> Path:
    """Write a log directory atomically (built in a temp dir, then renamed)."""
    directory = Path(directory)
    directory.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=directory.parent, prefix=f".{directory.name}."))
    try:
        (tmp / "manifest.json").write_text(json.dumps(log.manifest.to_json(), indent=2, sort_keys=True) + "\n")
        with open(tmp / "steps.jsonl", "w", encoding="utf-8") as fh:
            for s in log.steps:
                fh.write(json.dumps(s.to_json(), separators=(",", ":")) + "\n")
        ck = tmp / "checkpoints"
        ck.mkdir()
        for t, values in sorted(log.checkpoints.items()):
            _write_blob(ck / f"ckpt_{t}.bin", t, values)
        for t, values in sorted(log.velocities.items()):
            _write_blob(ck / f"vel_{t}.bin", t, values)
        if directory.exists():
            shutil.rmtree(directory)
        os.replace(tmp, directory)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return directory


def read_log(directory) -> PoLLog:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.is_file():
        raise LogFormatError(f"{directory}: no manifest.json")
    try:
        manifest = PoLManifest.from_json(json.loads(mpath.read_text()))
        lines = (directory / "steps.jsonl").read_text().splitlines()
        steps = [StepRecord.from_json(json.loads(line)) for line in lines if line.strip()]
    except (json.JSONDecodeError, KeyError, FileNotFoundError) as exc:
        raise LogFormatError(f"{directory}: {exc}") from exc
    ckpts, vels = {}, {}
    for path in sorted((directory / "checkpoints").glob("*.bin")):
        t, values = _read_blob(path)
        if values.size != manifest.spec.param_count:
            raise LogFormatError(f"{path.name}: wrong parameter count")
        (vels if path.name.startswith("vel_") else ckpts)[t] = values
    log = PoLLog(manifest, steps, ckpts, vels)
    log.validate()
    return log


def with_checkpoints(log: PoLLog, checkpoints: dict[int, np.ndarray]) -> PoLLog:
    return replace(log, checkpoints=dict(checkpoints))


__all__ = [
    "PoLManifest", "StepRecord", "PoLLog", "VerificationReport", "LogFormatError",
    "record_training", "record_log", "verify_full", "verify_subset", "replay_segment",
    "write_log", "read_log", "write_text_atomic", "with_checkpoints",
]
