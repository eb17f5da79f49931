"""Central finite-difference checks for every primitive and composed path.

Relative error is measured tensor-wise as ``max|a - n| / max(max|a|, max|n|)``
so near-zero entries do not blow up the ratio.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .rng import Rng

STEP = 1e-5
TOLERANCE = 1e-4
ABS_FLOOR = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    seconds: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ABS_FLOOR) -> float:
    """max |a - n| over the tensor, divided by the larger of the two max-norms.

    The denominator never drops below ``floor``: tensors whose exact gradient
    is zero (e.g. key biases under softmax, shifts removed by normalisation)
    would otherwise compare roundoff against roundoff.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max() / scale)


def check_params(
    loss_fn: Callable[[ad.Tape], ad.Node],
    params: Sequence[ad.Param],
    step: float = STEP,
    max_coords: int | None = None,
    rng: Rng | None = None,
) -> float:
    """Compare tape gradients of ``loss_fn`` against central differences.

    ``loss_fn`` builds the scalar loss on the tape it is given. At most
    ``max_coords`` randomly chosen coordinates per parameter are perturbed.
    """
    for p in params:
        p.zero_grad()
    tape = ad.Tape()
    loss = loss_fn(tape)
    tape.backward(loss)
    analytic = [p.grad.copy() for p in params]
    # central differences carry roundoff of order |L| * 1e-16 / step
    floor = max(ABS_FLOOR, ABS_FLOOR * abs(float(loss.value)))

    def value() -> float:
        return float(loss_fn(ad.Tape(record=False)).value)

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.value.reshape(-1)
        if max_coords is None or flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            rng = rng or Rng(0)
            coords = np.unique(rng.integers(max_coords, 0, flat.size))
        numeric = np.empty(coords.size)
        for k, i in enumerate(coords):
            old = flat[i]
            flat[i] = old + step
            up = value()
            flat[i] = old - step
            down = value()
            flat[i] = old
            numeric[k] = (up - down) / (2.0 * step)
        worst = max(worst, relative_error(a.reshape(-1)[coords], numeric, floor))
    return worst


def _weighted_sum(out: ad.Node, rng: Rng) -> ad.Node:
    r = rng.normal(out.value.size).reshape(out.shape)
    return ad.sum_all(ad.mul(out, r))


def _away_from_zero(v: np.ndarray, margin: float = 1e-2) -> np.ndarray:
    return np.where(np.abs(v) < margin, np.sign(v + 1e-300) * margin + v, v)


def _primitive_cases() -> dict[str, Callable[[Rng], tuple[Callable, list[ad.Param]]]]:
    def unary(op, shape, transform=None):
        def make(rng):
            v = rng.normal(int(np.prod(shape))).reshape(shape)
            if transform is not None:
                v = transform(v)
            x = ad.Param(v, "x")
            proj = rng.spawn("proj")

            def loss(tape):
                return _weighted_sum(op(tape.param(x)), Rng(proj.seed))

            return loss, [x]

        return make

    def nary(op, shapes):
        def make(rng):
            ps = [
                ad.Param(rng.normal(int(np.prod(s))).reshape(s), f"in{i}")
                for i, s in enumerate(shapes)
            ]
            proj = rng.spawn("proj")

            def loss(tape):
                return _weighted_sum(op(*[tape.param(p) for p in ps]), Rng(proj.seed))

            return loss, ps

        return make

    def scalar_reduce(op, shape):
        def make(rng):
            x = ad.Param(rng.normal(int(np.prod(shape))).reshape(shape), "x")
            return (lambda tape: op(ad.square(tape.param(x)))), [x]

        return make

    return {
        "add": nary(ad.add, [(3, 4), (3, 4)]),
        "sub": nary(ad.sub, [(3, 4), (3, 4)]),
        "mul": nary(ad.mul, [(3, 4), (3, 4)]),
        "scale": unary(lambda x: ad.scale(x, -1.7), (3, 4)),
        "add_bias": nary(ad.add_bias, [(2, 3, 4), (4,)]),
        "matmul": nary(ad.matmul, [(3, 5), (5, 2)]),
        "bmm": nary(ad.bmm, [(2, 3, 5), (2, 5, 4)]),
        "linear": nary(ad.linear, [(2, 3, 5), (5, 4), (4,)]),
        "reshape": unary(lambda x: ad.reshape(x, (6, 2)), (3, 4)),
        "transpose": unary(lambda x: ad.transpose(x, (2, 0, 1)), (2, 3, 4)),
        "concat": nary(lambda a, b: ad.concat([a, b], axis=1), [(2, 3), (2, 5)]),
        "stack": nary(lambda a, b, c: ad.stack([a, b, c], axis=1), [(4, 3)] * 3),
        "take": unary(lambda x: ad.take(x, 1, axis=1), (2, 3, 4)),
        "broadcast_rows": unary(lambda x: ad.broadcast_rows(x, 5), (4,)),
        "relu": unary(ad.relu, (4, 5), _away_from_zero),
        "softplus": unary(ad.softplus, (4, 5)),
        "square": unary(ad.square, (4, 5)),
        "abs": unary(ad.absolute, (4, 5), _away_from_zero),
        "softmax": unary(lambda x: ad.softmax(x, axis=-1), (3, 4, 5)),
        "attention": nary(lambda q, k, v: ad.attention(q, k, v, 2), [(2, 3, 6), (2, 4, 6), (2, 4, 6)]),
        "layer_norm": nary(lambda x, g, b: ad.layer_norm(x, g, b), [(3, 4, 6), (6,), (6,)]),
        "instance_normalize": unary(ad.instance_normalize, (2, 3, 4, 5)),
        "sum": scalar_reduce(ad.sum_all, (3, 4)),
        "mean": scalar_reduce(ad.mean, (3, 4)),
    }


PRIMITIVE_CASES = _primitive_cases()

# composed paths register themselves here (fusion, tracker, training losses)
COMPOSED_CASES: dict[str, tuple[str, Callable[[Rng], tuple[Callable, list[ad.Param]]]]] = {}


def jitter(params: Sequence[ad.Param], rng: Rng, scale: float = 0.2) -> None:
    """Move parameters to a generic point (zero-initialised biases are special)."""
    for p in params:
        p.value += scale * rng.spawn(p.name).normal(p.size).reshape(p.shape)


def register_composed(name: str, scope: str):
    def deco(make):
        COMPOSED_CASES[name] = (scope, make)
        return make

    return deco


def run_case(name: str, make, seed: int = 0, max_coords: int | None = 24) -> CheckResult:
    t0 = time.perf_counter()
    rng = Rng(seed).spawn(name)
    loss_fn, params = make(rng)
    jitter(params, rng.spawn("jitter"))
    err = check_params(loss_fn, params, max_coords=max_coords, rng=rng.spawn("coords"))
    return CheckResult(name, err, time.perf_counter() - t0)


def run(scope: str = "all", seed: int = 0) -> list[CheckResult]:
    """Run every check in ``scope`` ("primitives", "fusion", "tracker", "all")."""
    # importing registers the composed cases
    from . import fusion, tracker  # noqa: F401

    results = []
    if scope in ("primitives", "all"):
        for name, make in PRIMITIVE_CASES.items():
            results.append(run_case(name, make, seed, max_coords=None))
    for name, (case_scope, make) in COMPOSED_CASES.items():
        if scope == "all" or scope == case_scope:
            results.append(run_case(name, make, seed))
    return results
