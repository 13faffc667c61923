"""Central-difference gradient verification."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import ops
from .autograd import Tensor, backward, no_grad


class NondeterministicFunctionError(RuntimeError):
    pass


def _scalar(out: Tensor) -> float:
    if out.size != 1:
        raise ValueError(f"checked function must return a scalar, got shape {out.shape}")
    return float(out.data.reshape(-1)[0])


def finite_diff_check(function: Callable[..., Tensor], point: Tensor | Sequence[Tensor],
                      epsilon: float = 1e-5, coords: Sequence[np.ndarray] | None = None) -> float:
    """Max over coordinates of |analytic - central difference| / max(|a|, |cd|, 1e-8).

    ``function`` is called with the point tensor(s) as positional arguments.
    It must be deterministic: it is evaluated twice at the unperturbed point
    and any difference raises.  ``coords`` optionally restricts the check to
    the given flat indices of each point.
    """
    points = [point] if isinstance(point, Tensor) else list(point)
    for p in points:
        p.requires_grad = True
        p.grad = None

    with no_grad():
        f0 = _scalar(function(*points))
        f0_again = _scalar(function(*points))
    if f0 != f0_again:
        raise NondeterministicFunctionError(
            f"function returned {f0!r} then {f0_again!r} at the same point")

    out = function(*points)
    grads = backward(out, wrt=points)

    worst = 0.0
    with no_grad():
        for k, p in enumerate(points):
            analytic = grads[p].reshape(-1)
            flat = p.data.reshape(-1)
            for i in (range(flat.size) if coords is None else coords[k]):
                orig = flat[i]
                flat[i] = orig + epsilon
                fp = _scalar(function(*points))
                flat[i] = orig - epsilon
                fm = _scalar(function(*points))
                flat[i] = orig
                cd = (fp - fm) / (2 * epsilon)
                a = float(analytic[i])
                err = abs(a - cd) / max(abs(a), abs(cd), 1e-8)
                worst = max(worst, err)
    return worst


def primitive_cases(rng: np.random.Generator) -> list[tuple[str, Callable, list[Tensor]]]:
    """One (name, scalar function, points) case per differentiable primitive, 64-bit."""
    def T(*shape, low=None):
        a = rng.standard_normal(shape)
        if low is not None:
            a = np.abs(a) + low
        return Tensor(a)

    W = {}

    def wt(key, out):
        if key not in W:
            W[key] = rng.standard_normal(out.shape)
        return ops.sum(ops.mul(out, W[key]))

    idx = rng.integers(0, 5, size=(3, 2))
    cases = [
        ("add", lambda a, b: wt("add", ops.add(a, b)), [T(3, 4), T(4)]),
        ("sub", lambda a, b: wt("sub", ops.sub(a, b)), [T(3, 4), T(3, 1)]),
        ("mul", lambda a, b: wt("mul", ops.mul(a, b)), [T(3, 4), T(1, 4)]),
        ("scale", lambda a: wt("scale", ops.scale(a, -1.7)), [T(5)]),
        ("where", lambda a: wt("where", ops.where(np.arange(6).reshape(2, 3) % 2 == 0, a, 0.3)), [T(2, 3)]),
        ("matmul", lambda a, b: wt("matmul", ops.matmul(a, b)), [T(2, 3, 4), T(4, 5)]),
        ("transpose", lambda a: wt("transpose", ops.transpose(a, (1, 2, 0))), [T(2, 3, 4)]),
        ("reshape", lambda a: wt("reshape", ops.reshape(a, (6, 2))), [T(3, 4)]),
        ("concat", lambda a, b: wt("concat", ops.concat([a, b], axis=1)), [T(2, 3), T(2, 2)]),
        ("gather_rows", lambda a: wt("gather", ops.gather_rows(a, idx)), [T(5, 3)]),
        ("sum", lambda a: wt("sum", ops.sum(a, axis=1)), [T(3, 4)]),
        ("mean", lambda a: wt("mean", ops.mean(a, axis=0, keepdims=True)), [T(3, 4)]),
        ("exp", lambda a: wt("exp", ops.exp(a)), [T(6)]),
        ("log", lambda a: wt("log", ops.log(a)), [T(6, low=0.5)]),
        ("sigmoid", lambda a: wt("sigmoid", ops.sigmoid(a)), [T(6)]),
        ("swish", lambda a: wt("swish", ops.swish(a)), [T(6)]),
        ("glu", lambda a: wt("glu", ops.glu(a)), [T(3, 8)]),
        ("softmax", lambda a: wt("softmax", ops.softmax(a, axis=-1)), [T(3, 5)]),
        ("log_softmax", lambda a: wt("log_softmax", ops.log_softmax(a, axis=0)), [T(4, 3)]),
        ("entropy", lambda a: wt("entropy", ops.entropy(ops.softmax(a))), [T(2, 6)]),
        ("layer_norm", lambda a, g, b: wt("ln", ops.layer_norm(a, g, b)), [T(3, 8), T(8), T(8)]),
        ("conv2d", lambda a, w, b: wt("conv2d", ops.conv2d(a, w, b)), [T(2, 2, 7, 6), T(3, 2, 3, 3), T(3)]),
        ("depthwise_conv1d", lambda a, w, b: wt("dw", ops.depthwise_conv1d(a, w, b)), [T(2, 7, 3), T(3, 5), T(3)]),
        ("dropout", lambda a: wt("dropout", ops.dropout(a, 0.3, np.random.default_rng(7), True)), [T(4, 5)]),
        ("cosine_similarity", lambda a, b: wt("cos", ops.cosine_similarity(a, b)), [T(4, 1, 6), T(4, 3, 6)]),
    ]
    return cases


def run_primitive_suite(seed: int = 0, n_points: int = 5, epsilon: float = 1e-5) -> dict[str, float]:
    """Max relative error per primitive over ``n_points`` random points."""
    results: dict[str, float] = {}
    for k in range(n_points):
        rng = np.random.default_rng([seed, k])
        for name, fn, pts in primitive_cases(rng):
            err = finite_diff_check(fn, pts, epsilon)
            results[name] = max(results.get(name, 0.0), err)
    return results
