"""Central finite-difference verification of the autodiff core, in float64.

Relative error per coordinate is ``|a - n| / (|a| + |n| + 1e-8)``.

Single-op checks re-run from a slightly nudged point whenever a perturbation
moves a relu/leaky_relu/abs input across zero. A whole network has too many
units for that to terminate, so the composed-loss check instead evaluates the
differences with the sign pattern of the base point held fixed: the same
smooth piece that backpropagation differentiates.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .image import gaussian_blur
from .nets import DiscriminatorSpec, GeneratorSpec, discriminator_forward, generator_forward, init_params
from .tensor import Tensor
from .trainer import generator_loss

STEP = 1e-3
TOLERANCE = 1e-3

# the default discriminator needs at least 32x32 input; the 16x16 check uses two stride-2 layers
GRADCHECK_DISC = DiscriminatorSpec(widths=(16, 32), strides=(2, 2))


def relative_error(analytic, numeric) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / (np.abs(a) + np.abs(n) + 1e-8)


@dataclass
class CheckResult:
    name: str
    max_error: float
    checked: int
    nudges: int = 0
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return self.max_error < TOLERANCE


def _eval(fn, arrays: List[np.ndarray], log_kinks: bool):
    tensors = [Tensor(a) for a in arrays]
    if log_kinks:
        with T.record_kinks() as kinks:
            val = fn(*tensors).item()
        return val, kinks
    return fn(*tensors).item(), None


def _same_kinks(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _analytic(fn, arrays):
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with T.record_kinks() as kinks:
        loss = fn(*tensors)
    T.backward(loss)
    grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    return grads, kinks


def check_function(
    fn: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    name: str = "fn",
    step: float = STEP,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    max_nudges: int = 20,
    nudge_scale: float = 1e-2,
) -> CheckResult:
    """Compare backward() against central differences for every (or a sample of) input coordinate."""
    rng = rng or np.random.default_rng(0)
    start = time.perf_counter()
    with T.precision(np.float64):
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        coords = []
        for k, a in enumerate(arrays):
            flat = np.arange(a.size)
            if max_coords is not None and a.size > max_coords:
                flat = np.sort(rng.choice(a.size, size=max_coords, replace=False))
            coords += [(k, int(i)) for i in flat]
        grads, base_kinks = _analytic(fn, arrays)
        worst, nudges = 0.0, 0
        for k, i in coords:
            point, g, kinks = arrays, grads, base_kinks
            for attempt in range(max_nudges + 1):
                plus = [a.copy() for a in point]
                minus = [a.copy() for a in point]
                plus[k].flat[i] += step
                minus[k].flat[i] -= step
                fp, kp = _eval(fn, plus, True)
                fm, km = _eval(fn, minus, True)
                if _same_kinks(kp, kinks) and _same_kinks(km, kinks):
                    break
                nudges += 1
                point = [a + rng.normal(0.0, nudge_scale, a.shape) for a in arrays]
                g, kinks = _analytic(fn, point)
            else:
                raise RuntimeError(f"{name}: could not find a kink-free point for coordinate {k}:{i}")
            numeric = (fp - fm) / (2 * step)
            worst = max(worst, float(relative_error(g[k].flat[i], numeric)))
    return CheckResult(name, worst, len(coords), nudges, time.perf_counter() - start)


# ---------------------------------------------------------------- op suite


def _weighted(op, shape_out, rng):
    """Reduce an op's output to a scalar with fixed random weights so every output counts."""
    w = rng.standard_normal(shape_out)

    def fn(*xs):
        y = op(*xs)
        return T.sum(T.mul(y, Tensor(w)))

    return fn


def _away_from_zero(a: np.ndarray, margin: float = 0.05) -> np.ndarray:
    return np.where(np.abs(a) < margin, np.sign(a + 1e-12) * margin + a, a)


def op_cases(rng: np.random.Generator):
    """(name, fn, inputs) for every differentiable op on small random shapes."""
    r = lambda *s: rng.standard_normal(s)  # noqa: E731
    cases = []

    def add_case(name, op, inputs):
        with T.precision(np.float64), T.no_grad():
            out_shape = op(*[Tensor(a) for a in inputs]).shape
        cases.append((name, _weighted(op, out_shape, rng), inputs))

    add_case("add", T.add, [r(2, 3), r(2, 3)])
    add_case("add_scalar", lambda a: T.add(a, 0.7), [r(2, 3)])
    add_case("sub", T.sub, [r(2, 3), r(2, 3)])
    add_case("mul", T.mul, [r(2, 3), r(2, 3)])
    add_case("mul_scalar", lambda a: T.mul(a, -1.3), [r(2, 3)])
    add_case("neg", T.neg, [r(4)])
    add_case("square", T.square, [r(2, 3)])
    add_case("relu", T.relu, [_away_from_zero(r(3, 4))])
    add_case("leaky_relu", lambda a: T.leaky_relu(a, 0.2), [_away_from_zero(r(3, 4))])
    add_case("tanh", T.tanh, [r(3, 4)])
    add_case("abs", T.abs, [_away_from_zero(r(3, 4))])
    cases.append(("mean", lambda a: T.mul(T.mean(a), 3.0), [r(2, 5)]))
    cases.append(("sum", lambda a: T.mul(T.sum(a), 0.5), [r(2, 5)]))
    add_case("conv2d", lambda x, w, b: T.conv2d(x, w, b, stride=1, padding=1), [r(2, 3, 5, 5), r(4, 3, 3, 3), r(4)])
    add_case("conv2d_stride2", lambda x, w: T.conv2d(x, w, stride=2, padding=(1, 0, 2, 1)), [r(1, 2, 7, 6), r(3, 2, 3, 3)])
    add_case("conv2d_fewer_out", lambda x, w: T.conv2d(x, w, stride=1, padding=2), [r(2, 4, 5, 5), r(1, 4, 5, 5)])
    add_case(
        "conv2d_transpose",
        lambda x, w, b: T.conv2d_transpose(x, w, b, stride=2, padding=(1, 0, 1, 0)),
        [r(2, 3, 4, 4), r(3, 2, 3, 3), r(2)],
    )
    add_case("conv2d_transpose_s1", lambda x, w: T.conv2d_transpose(x, w, stride=1, padding=1), [r(1, 2, 4, 3), r(2, 3, 3, 3)])
    add_case("instance_norm", lambda x: T.instance_norm(x), [r(2, 3, 4, 4)])
    add_case("pad_zero", lambda x: T.pad(x, (1, 2, 0, 1), "zero"), [r(1, 2, 3, 3)])
    add_case("pad_reflect", lambda x: T.pad(x, (2, 1, 1, 2), "reflect"), [r(1, 2, 4, 4)])
    add_case("pad_replicate", lambda x: T.pad(x, (3, 1, 2, 4), "replicate"), [r(1, 1, 3, 4)])
    add_case("gaussian_blur", lambda x: gaussian_blur(x), [r(2, 1, 6, 7)])
    return cases


def run_op_suite(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        return [check_function(fn, inputs, name, rng=rng) for name, fn, inputs in op_cases(rng)]


# ---------------------------------------------------------------- composed loss


def run_network_check(
    seed: int = 0,
    side: int = 16,
    gen_spec: GeneratorSpec = GeneratorSpec(),
    disc_spec: DiscriminatorSpec = GRADCHECK_DISC,
    coords_per_slot: int = 8,
    weight_scale: float = 0.05,
) -> CheckResult:
    """Full generator loss (L1 + adversarial + shape) w.r.t. every G and D slot.

    Parameters are drawn from N(0, weight_scale); a sample of
    ``coords_per_slot`` coordinates is checked in each slot. Instance norm
    makes the loss invariant to the scale of the weights feeding it, so its
    curvature grows like 1/|w|^2; at the 0.02 training init a 1e-3 step
    already sits close to the tolerance from truncation error alone.
    """
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        params = init_params(gen_spec, disc_spec, seed=seed)
    names = params.names()
    arrays = [rng.normal(0.0, weight_scale, params[n].shape) for n in names]
    plain = (rng.random((1, side, side)) > 0.8).astype(np.float64)
    styled = np.where(rng.random((1, side, side)) > 0.5, plain, 1.0)
    masks = np.array([[3, 0, 2, 4]])

    def fn(*slot_tensors):
        slots = dict(zip(names, slot_tensors))
        params.slots = slots
        G = lambda x: generator_forward(params, x)  # noqa: E731
        D = lambda x: discriminator_forward(params, x)  # noqa: E731
        loss, _ = generator_loss(G, D, plain, styled, masks, adversarial=True, shape=True)
        return loss

    start = time.perf_counter()
    with T.precision(np.float64):
        grads, kinks = _analytic(fn, arrays)
        worst, checked = 0.0, 0
        for k, a in enumerate(arrays):
            idx = rng.choice(a.size, size=min(coords_per_slot, a.size), replace=False)
            for i in idx:
                worst = max(worst, _check_coordinate(fn, arrays, grads, kinks, k, int(i)))
                checked += 1
    return CheckResult("generator_loss_16x16", worst, checked, 0, time.perf_counter() - start)


def _frozen_eval(fn, arrays, kinks) -> float:
    with T.replay_kinks(kinks):
        return fn(*[Tensor(a) for a in arrays]).item()


def _check_coordinate(fn, arrays, grads, kinks, k, i, step=STEP):
    plus = [a.copy() for a in arrays]
    minus = [a.copy() for a in arrays]
    plus[k].flat[i] += step
    minus[k].flat[i] -= step
    numeric = (_frozen_eval(fn, plus, kinks) - _frozen_eval(fn, minus, kinks)) / (2 * step)
    return float(relative_error(grads[k].flat[i], numeric))


@dataclass
class SuiteReport:
    results: List[CheckResult] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(r.max_error for r in self.results)

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.results)

    @property
    def seconds(self) -> float:
        return sum(r.seconds for r in self.results)


def run_all(seed: int = 0, coords_per_slot: int = 8) -> SuiteReport:
    report = SuiteReport(run_op_suite(seed))
    report.results.append(run_network_check(seed, coords_per_slot=coords_per_slot))
    return report
