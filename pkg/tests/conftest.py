import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from drgw.datasets import synthetic_corpus
from drgw.graph import Graph
from drgw.models import ModelDims, build_models

settings.register_profile("drgw", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("drgw")

TINY = ModelDims(hidden_dim=8, latent_dim=8, gin_layers=2, flow_layers=2, flow_hidden=8, editor_hidden=8)


@pytest.fixture
def tiny_dims():
    return TINY


@pytest.fixture
def tiny_models():
    m = build_models("full", TINY, seed=0)
    m.flow.randomize_(torch.Generator().manual_seed(1), 0.2)
    return m


@pytest.fixture(scope="session")
def small_corpus():
    return synthetic_corpus(12, 20, 40, seed=5)


def triangle():
    return Graph(3, np.array([[0, 1], [1, 2], [0, 2]]))


def path3():
    return Graph(3, np.array([[0, 1], [1, 2]]))


def star(leaves=3):
    return Graph(leaves + 1, np.array([[0, i] for i in range(1, leaves + 1)]))


def cycle(n=4):
    return Graph(n, np.array([[i, (i + 1) % n] for i in range(n)]))


def finite_difference_check(loss_fn, params, eps=1e-6, count=None, seed=0):
    """Relative error between autograd and central differences.

    ``loss_fn`` is re-evaluated from scratch for every perturbation. When
    ``count`` is given only that many randomly chosen scalar entries are probed.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss_fn().backward()
    grads = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    entries = [(i, j) for i, p in enumerate(params) for j in range(p.numel())]
    if count is not None and count < len(entries):
        rng = np.random.default_rng(seed)
        entries = [entries[t] for t in rng.choice(len(entries), size=count, replace=False)]
    ad, fd = [], []
    with torch.no_grad():
        for i, j in entries:
            flat = params[i].view(-1)
            orig = flat[j].item()
            flat[j] = orig + eps
            up = loss_fn().item()
            flat[j] = orig - eps
            down = loss_fn().item()
            flat[j] = orig
            fd.append((up - down) / (2 * eps))
            ad.append(grads[i].view(-1)[j].item())
    ad, fd = np.array(ad), np.array(fd)
    scale = max(np.linalg.norm(ad), np.linalg.norm(fd), 1e-12)
    return float(np.linalg.norm(ad - fd) / scale), float(np.linalg.norm(ad))


# one summary line per acceptance criterion, printed after the run
_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    detail = dict(item.user_properties).get("detail", "")
    n = marker.args[0]
    if report.when == "call" or report.failed:
        status = "PASS" if report.passed else "FAIL"
        if report.when != "call":
            detail = f"{report.when} error"
        _CRITERIA[n] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
