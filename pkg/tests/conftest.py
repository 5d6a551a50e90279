import importlib

import pytest
import torch

_st = importlib.import_module("adfa.soft_topk")

# Every soft top-k call made anywhere in the suite is checked for mass
# conservation; the wrapper is installed before test modules import the name.
MASS_TOL = 1e-4
MASS_LOG = {"calls": 0, "worst": 0.0}

_original_soft_topk = _st.soft_topk


def _checked_soft_topk(d, cfg):
    z = _original_soft_topk(d, cfg)
    err = float((z.detach().double().sum(-1) - cfg.k).abs().max())
    MASS_LOG["calls"] += 1
    MASS_LOG["worst"] = max(MASS_LOG["worst"], err)
    assert err <= MASS_TOL, f"soft top-k mass off by {err:.3e}"
    return z


_st.soft_topk = _checked_soft_topk
importlib.import_module("adfa").soft_topk = _checked_soft_topk


@pytest.fixture
def mass_log():
    return MASS_LOG


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


def pytest_terminal_summary(terminalreporter):
    terminalreporter.write_line(
        f"soft top-k mass conservation: {MASS_LOG['calls']} calls, "
        f"worst |sum(z) - K| = {MASS_LOG['worst']:.3e} (limit {MASS_TOL:g})"
    )
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])


TINY_CONFIG = """
[backbone]
weights = "random"

[preprocess]
resize_edge = 64
crop_size = 64

[descriptor]
d_prime = 16

[train]
epochs = 2
batch_size = 4
"""


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    from adfa.data import generate_synthetic

    root = tmp_path_factory.mktemp("data") / "synth"
    generate_synthetic(root, 6, 3, 3, seed=1)
    return root


@pytest.fixture(scope="session")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.toml"
    path.write_text(TINY_CONFIG)
    return path


# --- acceptance bookkeeping ---------------------------------------------------------

ACCEPTANCE = {}


def pytest_collection_modifyitems(session, config, items):
    # acceptance criteria run last so the suite-wide mass check has seen every call
    def key(item):
        acceptance = item.nodeid.startswith("tests/test_acceptance.py")
        return (acceptance, acceptance and "criterion_2_" in item.nodeid)

    items.sort(key=key)


@pytest.fixture
def criterion(request):
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def record(number, ok, detail):
        status = "PASS" if ok else "FAIL"
        if ok is None:
            status = "SKIP"
        line = f"criterion {number}: {status}  {detail}"
        ACCEPTANCE[number] = line
        with capman.global_and_fixture_disabled():
            print(f"\n{line}")
        return ok

    return record
