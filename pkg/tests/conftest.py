import numpy as np
import pytest

from envmix import autodiff as ad


def central_difference_grad(objective, params, step=1e-5):
    """Finite-difference gradient oracle, independent of the tape."""
    flat = params.values.copy()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        hi, lo = flat.copy(), flat.copy()
        hi[i] += step
        lo[i] -= step
        f_hi = ad.value_only(objective, params.with_values(hi))
        f_lo = ad.value_only(objective, params.with_values(lo))
        grad[i] = (f_hi - f_lo) / (2.0 * step)
    return grad


def assert_grad_matches(objective, params, rel_tol=1e-4, abs_tol=1e-6, step=1e-5):
    """Per-coordinate comparison of tape gradients against central differences."""
    _, grad = ad.forward_backward(objective, params)
    numeric = central_difference_grad(objective, params, step=step)
    analytic = grad.values
    for i in range(numeric.size):
        scale = abs(numeric[i])
        if scale < 1e-3:
            assert abs(analytic[i] - numeric[i]) < abs_tol, (
                f"coordinate {i}: analytic {analytic[i]!r} vs numeric {numeric[i]!r}"
            )
        else:
            rel = abs(analytic[i] - numeric[i]) / scale
            assert rel < rel_tol, (
                f"coordinate {i}: analytic {analytic[i]!r} vs numeric {numeric[i]!r} "
                f"(rel {rel:.2e})"
            )


@pytest.fixture
def fd_check():
    return assert_grad_matches
