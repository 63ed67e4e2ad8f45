"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError
from .tensor import Tape, Tensor, backward, no_record


@dataclass
class GradcheckReport:
    passed: bool
    max_abs_error: float
    max_rel_error: float
    n_checked: int
    worst: tuple[int, tuple[int, ...]] | None = None  # (input index, element index)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"gradcheck {status}: {self.n_checked} entries, "
            f"max abs err {self.max_abs_error:.3e}, max rel err {self.max_rel_error:.3e}"
        )


def numerical_grad(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    which: int,
    indices: Sequence[tuple[int, ...]],
    eps: float = 1e-6,
) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. selected entries of one input."""
    x = inputs[which]
    out = np.empty(len(indices))
    with no_record():
        for k, idx in enumerate(indices):
            orig = x.data[idx]
            x.data[idx] = orig + eps
            fp = float(f(*inputs).data)
            x.data[idx] = orig - eps
            fm = float(f(*inputs).data)
            x.data[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite f near input {which} element {idx}")
            out[k] = (fp - fm) / (2.0 * eps)
    return out


def gradcheck(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor] | Tensor,
    rtol: float = 1e-4,
    atol: float = 1e-8,
    eps: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradcheckReport:
    """Compare tape gradients of scalar ``f(*inputs)`` against central differences.

    Every input with ``requires_grad`` is checked.  ``max_entries`` caps the
    number of probed elements per input (sampled without replacement) for
    large parameter sets.  An entry passes when
    ``|analytic - numeric| <= atol + rtol * |numeric|``.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != np.float64:
            raise ContractError("gradcheck requires float64 inputs")
        t.grad = None

    with Tape() as tape:
        y = f(*inputs)
    if y.size != 1:
        raise ContractError(f"gradcheck needs a scalar function, got shape {y.shape}")
    if not np.isfinite(y.data).all():
        raise NumericError("non-finite function value at the probe point")
    backward(y, tape)

    rng = np.random.default_rng(seed)
    max_abs = 0.0
    max_rel = 0.0
    n = 0
    passed = True
    worst = None
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.isfinite(analytic).all():
            bad = tuple(int(v) for v in np.argwhere(~np.isfinite(analytic))[0])
            raise NumericError(f"non-finite analytic gradient at input {i} element {bad}")
        flat = np.arange(t.size)
        if max_entries is not None and t.size > max_entries:
            flat = np.sort(rng.choice(t.size, size=max_entries, replace=False))
        indices = [np.unravel_index(k, t.shape) for k in flat]
        num = numerical_grad(f, inputs, i, indices, eps)
        ana = np.array([analytic[idx] for idx in indices])
        err = np.abs(ana - num)
        rel = err / np.maximum(np.maximum(np.abs(num), np.abs(ana)), atol)
        ok = err <= atol + rtol * np.abs(num)
        n += len(indices)
        if err.size:
            if err.max() >= max_abs:
                max_abs = float(err.max())
            if rel.max() >= max_rel:
                max_rel = float(rel.max())
                worst = (i, tuple(int(v) for v in indices[int(rel.argmax())]))
        passed &= bool(ok.all())
    return GradcheckReport(passed, max_abs, max_rel, n, worst)
