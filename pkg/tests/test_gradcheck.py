"""Finite-difference utilities and the per-module gradient suites."""
import pytest
import torch

from scenesynth.gradcheck import (
    SUITES,
    check_gradients,
    finite_difference_grad,
    max_rel_error,
    run_suites,
)


def test_fd_gradient_of_quadratic():
    x = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
    grad = finite_difference_grad(lambda: (x**3).sum(), x)
    assert torch.allclose(grad, 3 * x**2, atol=1e-8)


def test_max_rel_error_scales():
    a = torch.tensor([1.0, 2.0])
    assert max_rel_error(a, a) == 0.0
    assert max_rel_error(a, a * 1.001) == pytest.approx(1e-3, rel=0.1)


def test_check_gradients_flags_wrong_autograd():
    # a function whose autograd path is deliberately detached must fail
    x = torch.tensor([0.3, 0.7], dtype=torch.float64)

    def broken():
        return (x.detach() * x).sum()  # autograd sees only one factor

    err = check_gradients(broken, {"x": x})
    assert err > 1e-2


def test_check_gradients_requires_float64():
    x = torch.tensor([1.0], dtype=torch.float32)
    with pytest.raises(ValueError):
        check_gradients(lambda: x.sum(), {"x": x})


def test_unknown_suite_rejected():
    with pytest.raises(KeyError):
        run_suites(["nonexistent"])


@pytest.mark.parametrize("suite", sorted(SUITES))
def test_suite_within_tolerance(suite):
    report, passed = run_suites([suite])
    assert passed, report
    assert all(err <= 1e-3 for err in report.values()), report
