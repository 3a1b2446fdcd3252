import numpy as np
import pytest
import torch

from advface.dataset import build_index, make_synthetic_corpus


def central_fd(fn, tensor, h=1e-6):
    """Central finite differences of scalar ``fn()`` w.r.t. every entry of ``tensor`` (in place)."""
    grad = torch.zeros_like(tensor)
    flat, gflat = tensor.data.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = float(fn())
        flat[i] = orig - h
        down = float(fn())
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def rel_error(a, b):
    a, b = torch.as_tensor(a).double(), torch.as_tensor(b).double()
    return float((a - b).norm() / max(a.norm(), b.norm(), 1e-12))


@pytest.fixture(scope="session")
def fixture_corpus(tmp_path_factory):
    """The 40 identities x 20 images, 64x64 synthetic corpus."""
    root = tmp_path_factory.mktemp("corpus")
    make_synthetic_corpus(root, n_identities=40, images_per_identity=20, size=64, seed=0)
    return root


@pytest.fixture(scope="session")
def fixture_index(fixture_corpus):
    return build_index(fixture_corpus, (64, 64, 3))


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    make_synthetic_corpus(root, n_identities=8, images_per_identity=4, size=32, seed=1)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance criterion reporting -----------------------------------------

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            item.user_properties.append(("criterion", mark.args[0]))


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    crit = props.get("criterion")
    if crit is None:
        return
    entry = _CRITERIA.setdefault(crit, {"ok": True, "details": []})
    if report.failed or report.skipped:
        entry["ok"] = False
    if report.when == "call":
        entry["details"] += [v for k, v in report.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if e['ok'] else 'FAIL'}  {'; '.join(e['details'])}")
