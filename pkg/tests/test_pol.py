import dataclasses
import json
import struct

import numpy as np
import pytest

from repudiate.data import MiniBatchSpec
from repudiate.model import Hyperparams, ModelSpec
from repudiate.pol import (LogFormatError, PoLManifest, StepRecord, read_log, record_training, replay_segment,
                           verify_full, verify_subset, with_checkpoints, write_log)


def test_honest_log_replays_exactly(small_run):
    ds, log, final = small_run
    report = verify_full(log, ds, 0.0)
    assert report.max_error == 0.0 and report.passed
    assert len(report.errors) == log.manifest.steps
    assert np.array_equal(log.final, final)


def test_log_layout(small_run):
    _, log, _ = small_run
    assert [s.t for s in log.steps] == list(range(1, 41))
    assert sorted(log.checkpoints) == list(range(41))
    assert all(s.lr == 0.1 for s in log.steps)


def test_tampered_checkpoint_fails(small_run):
    ds, log, _ = small_run
    ck = dict(log.checkpoints)
    ck[7] = ck[7] + 1e-2
    report = verify_full(with_checkpoints(log, ck), ds, 1e-3)
    assert not report.passed
    assert report.errors[7] > 1e-3 and report.errors[8] > 1e-3
    assert report.errors[6] == 0.0


def test_tampered_batch_fails(small_run):
    ds, log, _ = small_run
    steps = list(log.steps)
    steps[3] = StepRecord(4, MiniBatchSpec(tuple(range(90, 100))), steps[3].lr)
    report = verify_full(dataclasses.replace(log, steps=steps), ds, 1e-6)
    assert not report.passed and report.errors[4] > 0


def test_round_trip_passes_with_small_error(tmp_path, small_run):
    ds, log, _ = small_run
    write_log(log, tmp_path / "log")
    back = read_log(tmp_path / "log")
    report = verify_full(back, ds, 1e-3)
    assert report.passed and report.max_error > 0
    assert back.manifest == log.manifest
    assert [s.batch for s in back.steps] == [s.batch for s in log.steps]


def test_checkpoint_interval_and_velocity(tmp_path, blobs):
    spec = ModelSpec.mlp((4, 5, 3))
    hp = Hyperparams(0.05, 10, 23, momentum=0.9, weight_decay=1e-3, lr_schedule="cosine")
    manifest = PoLManifest(spec, hp, 0, 1, blobs.n, checkpoint_interval=5)
    log, _ = record_training(blobs, manifest)
    assert sorted(log.checkpoints) == [0, 5, 10, 15, 20, 23]
    assert sorted(log.velocities) == [0, 5, 10, 15, 20, 23]
    assert verify_full(log, blobs, 0.0).max_error == 0.0
    write_log(log, tmp_path / "log")
    assert verify_full(read_log(tmp_path / "log"), blobs, 1e-3).passed


def test_replay_needs_velocity_for_momentum(blobs):
    spec = ModelSpec.logreg(4, 3)
    manifest = PoLManifest(spec, Hyperparams(0.05, 10, 4, momentum=0.5), 0, 1, blobs.n)
    log, _ = record_training(blobs, manifest)
    stripped = dataclasses.replace(log, velocities={})
    with pytest.raises(LogFormatError):
        replay_segment(stripped, blobs, 1, 2)


def test_subset_picks_largest_updates(small_run):
    ds, log, _ = small_run
    rep = verify_subset(log, ds, 0.0, 3)
    assert rep.partial and len(rep.errors) == 3 and rep.passed
    sizes = {b: np.linalg.norm(log.checkpoints[b] - log.checkpoints[a]) for a, b in log.segments()}
    top = sorted(sizes, key=lambda t: -sizes[t])[:3]
    assert sorted(rep.errors) == sorted(top)
    with pytest.raises(ValueError):
        verify_subset(log, ds, 0.0, 0)


def test_corrupt_checkpoint_is_detected(tmp_path, small_run):
    _, log, _ = small_run
    d = write_log(log, tmp_path / "log")
    blob = d / "checkpoints" / "ckpt_3.bin"
    raw = bytearray(blob.read_bytes())
    raw[-1] ^= 0xFF
    blob.write_bytes(bytes(raw))
    with pytest.raises(LogFormatError, match="checksum"):
        read_log(d)


def test_unknown_format_version_rejected(tmp_path, small_run):
    _, log, _ = small_run
    d = write_log(log, tmp_path / "log")
    m = json.loads((d / "manifest.json").read_text())
    m["format_version"] = 99
    (d / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(LogFormatError, match="version"):
        read_log(d)


def test_checkpoint_header_layout(tmp_path, small_run):
    _, log, _ = small_run
    d = write_log(log, tmp_path / "log")
    raw = (d / "checkpoints" / "ckpt_2.bin").read_bytes()
    magic, version, t, length, _ = struct.unpack("<4sIQQI", raw[:28])
    assert (magic, version, t, length) == (b"RPCK", 1, 2, log.manifest.spec.param_count)
    payload = np.frombuffer(raw[28:], dtype="<f4")
    np.testing.assert_allclose(payload, log.checkpoints[2], rtol=1e-6)


def test_steps_jsonl_is_deterministic(tmp_path, blobs):
    spec = ModelSpec.logreg(4, 3)
    manifest = PoLManifest(spec, Hyperparams(0.1, 10, 12), 0, 1, blobs.n)
    a = write_log(record_training(blobs, manifest)[0], tmp_path / "a")
    b = write_log(record_training(blobs, manifest)[0], tmp_path / "b")
    assert (a / "steps.jsonl").read_bytes() == (b / "steps.jsonl").read_bytes()
    first = json.loads((a / "steps.jsonl").read_text().splitlines()[0])
    assert set(first) == {"t", "indices", "flips", "lr"}


def test_manifest_rejects_bad_values(blobs):
    spec = ModelSpec.logreg(4, 3)
    with pytest.raises(ValueError):
        PoLManifest(spec, Hyperparams(0.1, 200, 2), 0, 1, blobs.n)
    with pytest.raises(ValueError):
        PoLManifest(spec, Hyperparams(0.1, 10, 2), 0, 1, blobs.n, checkpoint_interval=0)
