"""Central finite-difference verification of every differentiable operation.

Each case draws random inputs, reduces the op's output to a scalar with a
random projection ``sum(out * R)`` and compares the backward pass against
``(f(x + h) - f(x - h)) / 2h`` for every input element. Inputs are drawn away
from kinks (ReLU at 0, max ties, pooling ties, BCE clamp edges) so that the
finite difference is meaningful.

The error per instance is ``max|a - n| / max(max|a|, max|n|, floor)`` over
all inputs jointly.
"""
from __future__ import annotations

import time
import zlib
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import layers
from . import tensor as T
from .model import ModelConfig, build_model, forward, joint_loss
from .rng import RngState

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4
DEFAULT_INSTANCES = 10
DENOMINATOR_FLOOR = 1e-6


@dataclass
class Instance:
    """One random problem: inputs plus value and gradient callables.

    ``value(arrays)`` returns the output array; ``grads(arrays, upstream)``
    returns d(sum(out * upstream))/d(array) for each array. The checker
    perturbs ``arrays`` in place and restores them.
    """

    arrays: list[np.ndarray]
    value: Callable[[list[np.ndarray]], np.ndarray]
    grads: Callable[[list[np.ndarray], np.ndarray], list[np.ndarray]]


def graph_instance(arrays: Sequence[np.ndarray], fn: Callable[..., T.Node]) -> Instance:
    """Wrap ``fn(*leaf_nodes) -> Node`` as an :class:`Instance`."""

    def value(arrs):
        g = T.Graph()
        out = fn(*[g.variable(a) for a in arrs]).value.copy()
        g.release()
        return out

    def grads(arrs, upstream):
        g = T.Graph()
        leaves = [g.variable(a) for a in arrs]
        out = fn(*leaves)
        loss = T.sum_all(T.mul(out, g.constant(upstream)))
        loss.backward()
        result = [leaf.grad.copy() for leaf in leaves]
        g.release()
        return result

    return Instance([np.array(a, dtype=np.float64) for a in arrays], value, grads)


@dataclass(frozen=True)
class GradCase:
    op: str
    make: Callable[[RngState, int], Instance]


def _away_from_zero(rng: RngState, shape, margin: float = 0.05) -> np.ndarray:
    mag = rng.uniform(shape, margin, 2.0)
    sign = np.where(rng.uniform(shape) < 0.5, -1.0, 1.0)
    return sign * mag


def _distinct(rng: RngState, shape) -> np.ndarray:
    """Values with pairwise gaps >= 0.05, so no pooling window has a near-tie."""
    n = int(np.prod(shape))
    return (rng.permutation(n).astype(np.float64) * 0.05 - 0.025 * n).reshape(shape)


def _probabilities(rng: RngState, shape) -> np.ndarray:
    return rng.uniform(shape, 0.05, 0.95)


def _binary(rng: RngState, shape) -> np.ndarray:
    return (rng.uniform(shape) < 0.5).astype(np.float64)


def _elementwise_case(kind: str) -> GradCase:
    def make(rng, i):
        a = rng.normal((3, 4))
        b = rng.normal((1,)) if i % 3 == 2 else rng.normal((3, 4))
        if kind == "max":
            # keep |a - b| >= 0.05 everywhere
            b = a - _away_from_zero(rng, a.shape) if b.shape == a.shape else b
            if b.shape == (1,):
                a = b + _away_from_zero(rng, a.shape)
        return graph_instance([a, b], lambda x, y: T.elementwise(kind, x, y))

    return GradCase({"max": "maximum"}.get(kind, kind), make)


def _conv_case(rng: RngState, i: int) -> Instance:
    # cycle through kernel size / stride / padding / bias variants
    k, stride, pad, bias = [(3, 1, 1, True), (1, 1, 0, True), (3, 2, 0, True), (5, 1, 2, False), (3, 2, 1, True)][i % 5]
    x = rng.normal((2, 3, 6, 7))
    w = rng.normal((4, 3, k, k), 0.0, 0.5)
    if bias:
        b = rng.normal((4,))
        return graph_instance([x, w, b], lambda xn, wn, bn: layers.conv2d(xn, layers.Conv2dParams(wn, bn, stride, pad)))
    return graph_instance([x, w], lambda xn, wn: layers.conv2d(xn, layers.Conv2dParams(wn, None, stride, pad)))


def _model_case(rng: RngState, i: int) -> Instance:
    """Whole forward pass plus joint loss of a tiny model, w.r.t. every parameter."""
    cfg = ModelConfig(
        input_size=(4, 4),
        base_channels=2,
        stages=1,
        inception_enabled=i % 2 == 0,
        seg_feeds_heads=i % 3 == 0,
        loss_weights=(1.0, float(rng.uniform(1, 0.5, 2.0)[0]), float(rng.uniform(1, 0.5, 2.0)[0])),
    )
    m = build_model(cfg, seed=int(rng.integers(0, 2**31)))
    names = list(m.params)
    # zero biases would leave all-zero patches sitting exactly on the ReLU kink
    for n in names:
        if n.endswith(".bias"):
            m.params[n][...] = _away_from_zero(rng, m.params[n].shape)
    images = rng.normal((2, 3, 4, 4))
    masks = _binary(rng, (2, 1, 4, 4))
    mel = np.array([1.0, 0.0])
    sk = np.array([0.0, 1.0])

    def loss_node():
        out = forward(m, images)
        return out.graph, joint_loss(out, masks, mel, sk, cfg.loss_weights, (1.5, 0.75))

    def value(arrs):
        g, loss = loss_node()
        v = loss.value.copy()
        g.release()
        return v

    def grads(arrs, upstream):
        m.zero_grad()
        g, loss = loss_node()
        T.scale(loss, float(upstream[0])).backward()
        g.release()
        return [m.grads[n].copy() for n in names]

    return Instance([m.params[n] for n in names], value, grads)


def default_cases() -> list[GradCase]:
    cases = [_elementwise_case(k) for k in T.ELEMENTWISE_KINDS]
    cases += [
        GradCase("scale", lambda r, i: graph_instance([r.normal((3, 5))], lambda a: T.scale(a, -1.75 + 0.5 * i))),
        GradCase("matmul", lambda r, i: graph_instance([r.normal((3, 4)), r.normal((4, 2 + i % 3))], T.matmul)),
        GradCase("sum_all", lambda r, i: graph_instance([r.normal((2, 3, 4))], T.sum_all)),
        GradCase("mean_all", lambda r, i: graph_instance([r.normal((2, 3, 4))], T.mean_all)),
        GradCase("reshape", lambda r, i: graph_instance([r.normal((2, 6))], lambda a: T.reshape(a, (3, 4)))),
        GradCase(
            "add_channel_bias",
            lambda r, i: graph_instance([r.normal((2, 3, 4, 5)), r.normal((3,))], T.add_channel_bias),
        ),
        GradCase("conv2d", _conv_case),
        GradCase("maxpool2d", lambda r, i: graph_instance([_distinct(r, (2, 2, 4, 6))], layers.maxpool2d)),
        GradCase("upsample2x_nearest", lambda r, i: graph_instance([r.normal((2, 2, 3, 4))], layers.upsample2x_nearest)),
        GradCase(
            "concat_channels",
            lambda r, i: graph_instance([r.normal((2, 2, 3, 3)), r.normal((2, 1 + i % 3, 3, 3))], layers.concat_channels),
        ),
        GradCase("relu", lambda r, i: graph_instance([_away_from_zero(r, (3, 4, 5))], layers.relu)),
        GradCase("sigmoid", lambda r, i: graph_instance([3.0 * r.normal((3, 4, 5))], layers.sigmoid)),
        GradCase("global_avg_pool", lambda r, i: graph_instance([r.normal((2, 3, 4, 5))], layers.global_avg_pool)),
        GradCase(
            "avg_pool",
            lambda r, i: graph_instance([r.normal((2, 2, 4, 8))], lambda a: layers.avg_pool(a, 2 + 2 * (i % 2))),
        ),
        GradCase(
            "linear",
            lambda r, i: graph_instance([r.normal((3, 4)), r.normal((4, 2)), r.normal((2,))], layers.linear),
        ),
        GradCase("bce_loss", _bce_case),
        GradCase("soft_dice_loss", _dice_case),
        GradCase("multitask_joint_loss", _model_case),
    ]
    return cases


def _bce_case(rng: RngState, i: int) -> Instance:
    target = _binary(rng, (2, 1, 3, 3) if i % 2 else (6,))
    pw = float(rng.uniform(1, 0.5, 3.0)[0])
    return graph_instance([_probabilities(rng, target.shape)], lambda p: layers.bce_loss(p, target, pos_weight=pw))


def _dice_case(rng: RngState, i: int) -> Instance:
    target = _binary(rng, (2, 1, 4, 4))
    return graph_instance([_probabilities(rng, target.shape)], lambda p: layers.soft_dice_loss(p, target))


def relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray], floor: float = DENOMINATOR_FLOOR) -> float:
    a = np.concatenate([np.ravel(x) for x in analytic])
    n = np.concatenate([np.ravel(x) for x in numeric])
    if not (np.isfinite(a).all() and np.isfinite(n).all()):
        return float("inf")
    scale = max(float(np.abs(a).max(initial=0.0)), float(np.abs(n).max(initial=0.0)), floor)
    return float(np.abs(a - n).max(initial=0.0)) / scale


def check_instance(inst: Instance, rng: RngState, step: float = DEFAULT_STEP) -> float:
    out = inst.value(inst.arrays)
    upstream = rng.normal(out.shape)
    analytic = inst.grads(inst.arrays, upstream)
    if len(analytic) != len(inst.arrays) or any(g.shape != a.shape for g, a in zip(analytic, inst.arrays)):
        return float("inf")
    numeric = []
    for arr in inst.arrays:
        num = np.empty_like(arr)
        flat, nflat = arr.reshape(-1), num.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = float(np.sum(inst.value(inst.arrays) * upstream))
            flat[j] = orig - step
            lo = float(np.sum(inst.value(inst.arrays) * upstream))
            flat[j] = orig
            nflat[j] = (hi - lo) / (2.0 * step)
        numeric.append(num)
    return relative_error(analytic, numeric)


@dataclass
class OpResult:
    op: str
    max_rel_error: float
    instances: int
    passed: bool
    seconds: float


@dataclass
class GradcheckReport:
    results: list[OpResult]
    tolerance: float
    step: float
    seed: int
    seconds: float = 0.0
    errors: dict[str, str] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.errors and all(r.passed for r in self.results)

    @property
    def failures(self) -> list[str]:
        return [r.op for r in self.results if not r.passed] + sorted(self.errors)

    def format(self) -> str:
        lines = [f"{'op':<22} {'instances':>9} {'max rel err':>12}  status"]
        for r in self.results:
            lines.append(f"{r.op:<22} {r.instances:>9} {r.max_rel_error:>12.3e}  {'ok' if r.passed else 'FAIL'}")
        for op, msg in sorted(self.errors.items()):
            lines.append(f"{op:<22} {'-':>9} {'-':>12}  ERROR {msg}")
        verdict = "PASS" if self.passed else "FAIL: " + ", ".join(self.failures)
        lines.append(f"step {self.step:g}, tolerance {self.tolerance:g}, seed {self.seed}: {verdict}")
        return "\n".join(lines)


def run_gradcheck(
    seed: int = 0,
    instances: int = DEFAULT_INSTANCES,
    step: float = DEFAULT_STEP,
    tolerance: float = DEFAULT_TOLERANCE,
    cases: Sequence[GradCase] | None = None,
    ops: Sequence[str] | None = None,
) -> GradcheckReport:
    """Check every case (or the named ``ops``) on ``instances`` random draws each."""
    cases = default_cases() if cases is None else list(cases)
    if ops is not None:
        known = {c.op for c in cases}
        unknown = sorted(set(ops) - known)
        if unknown:
            raise ValueError(f"unknown ops {unknown}; known: {sorted(known)}")
        cases = [c for c in cases if c.op in set(ops)]
    start = time.perf_counter()
    results, errors = [], {}
    for case in cases:
        # streams keyed by op name, so selecting a subset of ops changes nothing
        key = zlib.crc32(case.op.encode())
        t0 = time.perf_counter()
        worst = 0.0
        try:
            for i in range(instances):
                rng = RngState(seed, key, i)
                worst = max(worst, check_instance(case.make(rng, i), rng, step))
        except Exception as exc:  # a crashing op is a failed op, reported by name
            errors[case.op] = f"{type(exc).__name__}: {exc}"
            continue
        results.append(OpResult(case.op, worst, instances, worst <= tolerance, time.perf_counter() - t0))
    return GradcheckReport(results, tolerance, step, seed, time.perf_counter() - start, errors)
