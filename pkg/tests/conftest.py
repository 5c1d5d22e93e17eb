import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from mwgs.config import RunConfig
from mwgs.synth import SyntheticSceneSpec, load_dataset, synthesize

# filled by tests/test_acceptance.py, printed at the end of the session
ACCEPTANCE = {}


@pytest.fixture(scope="session", autouse=True)
def single_threaded_blas():
    with threadpool_limits(1):
        yield


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if passed else 'FAIL'}  {detail}")


def toy_spec(**kw):
    """About 20 anchors, 8 cameras at 64x64 and 2 appearance conditions."""
    base = dict(seed=0, points_per_blob=1)
    base.update(kw)
    return SyntheticSceneSpec(**base)


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    synthesize(toy_spec(), root)
    return load_dataset(root)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Four 32x32 views of a handful of blobs, for quick end-to-end checks."""
    root = tmp_path_factory.mktemp("tiny")
    synthesize(toy_spec(n_blobs=4, n_cameras=4, n_test=1, width=32, height=32), root)
    return load_dataset(root)


def tiny_config(ds, tmp_path, **kw):
    base = dict(dataset=str(ds.root), output=str(tmp_path / "out"), steps=5, k=4,
                n_v=8, n_r=8, n_g=4, L_pe=1)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
