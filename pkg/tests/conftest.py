import numpy as np
import pytest

from repudiate.data import Dataset, synth_gaussian
from repudiate.model import Hyperparams, ModelSpec
from repudiate.pol import PoLManifest, record_training


@pytest.fixture
def blobs():
    return synth_gaussian(100, 4, 3, seed=0, class_separation=4.0)


@pytest.fixture
def images():
    rng = np.random.default_rng(1)
    return Dataset(rng.random((40, 8 * 7)), np.arange(40) % 2, 2, image_shape=(8, 7, 1))


@pytest.fixture
def small_run(blobs):
    spec = ModelSpec.mlp((4, 6, 3))
    manifest = PoLManifest(spec, Hyperparams(0.1, 10, 40), init_seed=0, schedule_seed=1, n=blobs.n)
    log, final = record_training(blobs, manifest)
    return blobs, log, final


def pytest_terminal_summary(terminalreporter):
    from tests import acceptance_registry

    if not acceptance_registry.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(acceptance_registry.RESULTS):
        ok, name, detail = acceptance_registry.RESULTS[num]
        terminalreporter.write_line(f"criterion {num:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
