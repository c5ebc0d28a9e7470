import numpy as np
import pytest

from manigrad import autodiff as ad
from manigrad.models import build_classifier, build_vae


def directional_fd(f, x, v, h=1e-5):
    """Central difference of scalar f along v (fourth order)."""
    return (-f(x + 2 * h * v) + 8 * f(x + h * v) - 8 * f(x - h * v) + f(x - 2 * h * v)) / (12 * h)


def rel_err(a, b, floor=1e-12):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def grad_fd_error(fn, xs, rng, h=1e-5):
    """Relative error of the reverse-mode directional derivative of sum(w * fn(*xs))."""
    tensors = [ad.Tensor(x, requires_grad=True) for x in xs]
    out = fn(*tensors)
    w = rng.standard_normal(out.shape)
    grads = ad.grad(ad.sum(ad.mul(out, ad.Tensor(w))), tensors)
    vs = [rng.standard_normal(np.shape(x)) for x in xs]
    analytic = sum(float(np.sum(g.data * v)) for g, v in zip(grads, vs))

    def scalar(t):
        with ad.no_grad():
            pts = [x + t * v for x, v in zip(xs, vs)]
            return float(np.sum(w * fn(*[ad.Tensor(p) for p in pts]).data))

    numeric = directional_fd(scalar, 0.0, 1.0, h)
    return rel_err(analytic, numeric)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_vae():
    vae = build_vae(data_dim=64, latent_dim=2, hidden=(16,), seed=3, n_features=8)
    vae.trained = True
    return vae


@pytest.fixture(scope="session")
def tiny_classifier():
    return build_classifier(data_dim=64, num_classes=3, hidden=(16,), seed=5)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
