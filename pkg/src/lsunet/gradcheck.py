"""Central finite-difference verification of analytic gradients.

All probing runs in float64 so the difference quotient is oracle-grade;
the discrepancy for coordinate i is |a_i - n_i| / max(|a_i|, |n_i|, 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import OracleInvalidError
from .tensor import Graph, Tensor

DEFAULT_STEP = 1e-3
DEFAULT_TOL = 1e-3


@dataclass
class GradCheckReport:
    name: str
    max_rel_err: float
    tol: float
    probes: int
    worst: str = ""

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"{status}  {self.name:<40s} max_rel_err={self.max_rel_err:.3e} (tol {self.tol:g}, {self.probes} probes)"


def _sample_indices(size: int, max_probes: int | None, rng: np.random.Generator):
    if max_probes is None or size <= max_probes:
        return np.arange(size)
    return np.sort(rng.choice(size, size=max_probes, replace=False))


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1.0)


def check_function(f, tensors: dict[str, Tensor], step: float = DEFAULT_STEP,
                   tol: float = DEFAULT_TOL, max_probes: int | None = None,
                   seed: int = 0, name: str = "f") -> GradCheckReport:
    """Compare analytic gradients of scalar-valued ``f()`` against central
    differences, probing each tensor in ``tensors`` (all must be float64).

    ``f`` must read the tensors by reference so in-place perturbation of
    ``t.data`` is visible; it must be deterministic and side-effect free.
    """
    for key, t in tensors.items():
        if t.data.dtype != np.float64:
            raise OracleInvalidError(f"finite differences require float64, {key} is {t.data.dtype}")

    y0 = f().item()
    if f().item() != y0:
        raise OracleInvalidError(f"{name}: function is not deterministic; oracle invalid")

    for t in tensors.values():
        t.grad = None
    graph = Graph()
    with graph:
        loss = f()
    graph.backward(loss)

    rng = np.random.default_rng(seed)
    worst = ("", 0.0)
    probes = 0
    for key, t in tensors.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        aflat = np.asarray(analytic).reshape(-1)
        for idx in _sample_indices(flat.size, max_probes, rng):
            orig = flat[idx]
            flat[idx] = orig + step
            f_plus = f().item()
            flat[idx] = orig - step
            f_minus = f().item()
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            err = _rel_err(float(aflat[idx]), numeric)
            probes += 1
            if err > worst[1]:
                worst = (f"{key}[{idx}] analytic={aflat[idx]:.6g} numeric={numeric:.6g}", err)
    return GradCheckReport(name=name, max_rel_err=worst[1], tol=tol, probes=probes, worst=worst[0])


def finite_diff_check(f, x: Tensor, step: float = DEFAULT_STEP, tol: float = DEFAULT_TOL,
                      max_probes: int | None = None, seed: int = 0,
                      name: str = "f") -> GradCheckReport:
    """Gradient check of scalar-valued ``f(x)`` with respect to ``x`` alone."""
    x64 = Tensor(np.asarray(x.data, dtype=np.float64), requires_grad=True)
    return check_function(lambda: f(x64), {"x": x64}, step=step, tol=tol,
                          max_probes=max_probes, seed=seed, name=name)


def check_module(module, make_input, forward, step: float = DEFAULT_STEP,
                 tol: float = DEFAULT_TOL, probes_per_tensor: int = 24,
                 seed: int = 0, name: str = "module",
                 check_input: bool = True) -> GradCheckReport:
    """Gradient check of a Module's scalar forward w.r.t. input and parameters.

    The module is cast to float64 in place. ``make_input()`` returns a fresh
    float64 input array; ``forward(module, x)`` returns a scalar Tensor.
    """
    module.cast_(np.float64)
    x = Tensor(np.asarray(make_input(), dtype=np.float64), requires_grad=True)
    tensors = {n: p for n, p in module.named_parameters()}
    if check_input:
        tensors = {"input": x, **tensors}
    module.zero_grads()
    return check_function(lambda: forward(module, x), tensors, step=step, tol=tol,
                          max_probes=probes_per_tensor, seed=seed, name=name)
