import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def fd_gradient(loss_fn, param_data: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. one buffer.

    ``loss_fn`` re-runs the forward pass and returns a float; ``param_data``
    is mutated in place entry by entry and restored.
    """
    grad = np.zeros_like(param_data)
    flat = param_data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = loss_fn()
        flat[i] = orig - step
        down = loss_fn()
        flat[i] = orig
        out[i] = (up - down) / (2.0 * step)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Worst relative disagreement between two gradient estimates."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


def assert_grads_close(analytic, numeric, rtol: float = 1e-5, atol: float = 1e-8) -> None:
    """Gradient agreement at relative error ``rtol``; the absolute floor covers
    entries whose true gradient is (near) zero, where the central-difference
    oracle bottoms out at its own truncation noise."""
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)
