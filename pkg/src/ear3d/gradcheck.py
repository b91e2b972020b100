"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, backward, mul, no_grad, reduce_sum


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    max_abs_error: float
    tolerance: float
    points: int
    per_input: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error < self.tolerance

    def __str__(self):
        flag = "PASS" if self.passed else "FAIL"
        return (f"{flag} {self.name}: max rel err {self.max_rel_error:.3e} "
                f"(tol {self.tolerance:.0e}, {self.points} points)")


def grad_check(fn, inputs, tolerance=1e-6, eps=1e-5, seed=0, params=(), max_points=None,
               name=None) -> GradCheckReport:
    """Compare analytic gradients of ``fn(*inputs)`` with central differences.

    ``inputs`` may mix Tensors and shape tuples; shapes become random float64
    tensors drawn from ``seed``.  Tensors in ``params`` (typically layer
    weights that ``fn`` closes over) are checked too.  The output is contracted
    with a fixed random tensor so every output element contributes.  When
    ``max_points`` is set, at most that many randomly chosen entries per
    tensor are perturbed.  Failures are reported, never raised.
    """
    rng = np.random.default_rng(seed)
    tensors = []
    for item in inputs:
        if isinstance(item, Tensor):
            tensors.append(item)
        else:
            tensors.append(Tensor(rng.standard_normal(tuple(item)), requires_grad=True))
    checked = [t for t in tensors if t.requires_grad] + list(params)
    for t in checked:
        t.grad = None

    out = fn(*tensors)
    weights = Tensor(rng.standard_normal(out.shape), dtype=out.dtype)
    backward(reduce_sum(mul(out, weights)))

    def objective():
        with no_grad():
            return float(np.sum(fn(*tensors).data.astype(np.float64) * weights.data))

    pairs = []
    for t in checked:
        flat = t.data.reshape(-1)
        analytic = (np.zeros(flat.size) if t.grad is None else t.grad.reshape(-1)).astype(np.float64)
        idx = np.arange(flat.size)
        if max_points is not None and flat.size > max_points:
            idx = np.sort(rng.choice(flat.size, size=max_points, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            plus = objective()
            flat[i] = orig - eps
            minus = objective()
            flat[i] = orig
            numeric[j] = (plus - minus) / (2 * eps)
        pairs.append((analytic[idx], numeric))

    # errors are scaled by the largest gradient entry over all checked tensors,
    # so parameters with identically zero gradient do not divide noise by noise
    scale = max([1e-10] + [max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
                           for a, n in pairs])
    per_input = [float(np.abs(a - n).max(initial=0.0)) for a, n in pairs]
    worst_abs = max(per_input, default=0.0)
    per_input = [e / scale for e in per_input]
    worst_rel = worst_abs / scale
    points = sum(a.size for a, _ in pairs)
    return GradCheckReport(name or getattr(fn, "__name__", "op"), worst_rel, worst_abs,
                           tolerance, points, per_input)
