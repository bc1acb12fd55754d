"""Release-gate checks: gradients, the reference layer table, flow oracles, fusion."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np
from scipy import ndimage

from . import tensor_autograd as ta
from .network import (AttentionParams, LstmParams, ModelConfig, build_model, golden_diff,
                      lstm_cell, self_attention)
from .optical_flow import FlowParams, estimate_flow
from .pipeline import fuse_inputs
from .tensor_autograd import Tensor, grad_check

LAYER_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3
# with thousands of ReLU/max units a 1e-4 probe crosses kinks, so the model probe is tiny;
# gradients cancelled by batch norm are then pure roundoff, hence the absolute floor
MODEL_STEP = 1e-7
MODEL_FLOOR = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}\t{self.name}\t{self.detail}\t{self.seconds:.2f}s"


def _randn(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def _distinct(rng, *shape):
    # values spaced 0.05 apart so a 1e-4 probe never changes which entry is the maximum
    n = int(np.prod(shape))
    return Tensor((rng.permutation(n) * 0.05 - n * 0.025).reshape(shape).astype(np.float64))


def _away_from_zero(rng, *shape, margin=0.1):
    x = rng.standard_normal(shape)
    return Tensor(np.where(x >= 0, x + margin, x - margin))


def layer_cases() -> dict[str, Callable[[np.random.Generator], tuple[Callable, list]]]:
    """Per-op factories returning (fn, inputs) for one random draw."""

    def conv(rng):
        stride = int(rng.integers(1, 3))
        return (lambda x, k, b: ta.conv2d(x, k, b, stride),
                [_randn(rng, 2, 6, 6, 2), _randn(rng, 3, 3, 2, 2), _randn(rng, 2)])

    def pool(rng):
        return (lambda x: ta.max_pool2d(x, 2), [_distinct(rng, 2, 5, 6, 3)])

    def bn(rng):
        moving = (Tensor(np.zeros(3)), Tensor(np.ones(3)))
        return (lambda x, g, b: ta.batch_norm(x, g, b, *moving, training=True),
                [_randn(rng, 4, 3), _randn(rng, 3), _randn(rng, 3)])

    def dense(rng):
        return (ta.dense, [_randn(rng, 3, 5), _randn(rng, 5, 4), _randn(rng, 4)])

    def lstm(candidate):
        def make(rng):
            params = LstmParams.create(3, 4, rng, dtype=np.float64)
            for p in params.tensors():
                p.data += 0.1 * rng.standard_normal(p.shape)

            def fn(x, h, s, *ps):
                h_t, s_t = lstm_cell(x, h, s, LstmParams(*ps), candidate)
                return ta.concat([h_t, s_t], axis=-1)

            return fn, [_randn(rng, 2, 3), _randn(rng, 2, 4), _randn(rng, 2, 4)] + params.tensors()
        return make

    def attention(mode):
        def make(rng):
            params = AttentionParams.create(5, mode, 3, rng, dtype=np.float64)
            for p in params.tensors():
                p.data += 0.1 * rng.standard_normal(p.shape)
            names = ("M", "bias") if mode == "table_count" else ("W_t", "W_x", "b_h", "W_a", "b_a")

            def fn(x, *ps):
                return self_attention(x, AttentionParams(mode, **dict(zip(names, ps))))

            return fn, [_randn(rng, 2, 3, 5)] + params.tensors()
        return make

    def activation(kind):
        def make(rng):
            return (lambda x: ta.activate(x, kind), [_away_from_zero(rng, 3, 4)])
        return make

    def softmax(rng):
        return (lambda x: ta.softmax(x, axis=-1), [_randn(rng, 3, 4)])

    return {
        "conv2d": conv,
        "max_pool2d": pool,
        "batch_norm": bn,
        "dense": dense,
        "lstm_cell[tanh]": lstm("tanh"),
        "lstm_cell[sigmoid]": lstm("sigmoid"),
        "self_attention[table_count]": attention("table_count"),
        "self_attention[additive]": attention("additive"),
        "relu": activation("relu"),
        "sigmoid": activation("sigmoid"),
        "tanh": activation("tanh"),
        "softmax": softmax,
    }


def check_layer(name: str, seeds: int = 20) -> CheckResult:
    start = time.perf_counter()
    make = layer_cases()[name]
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        fn, inputs = make(rng)
        report = grad_check(fn, inputs, LAYER_TOLERANCE, step=1e-4, seed=seed, name=name)
        worst = max(worst, report.max_rel_error)
    return CheckResult(f"grad {name}", worst < LAYER_TOLERANCE,
                       f"max rel err {worst:.2e} over {seeds} seeds (tol {LAYER_TOLERANCE:g})",
                       time.perf_counter() - start)


def check_model_gradient(seeds: int = 20, max_checks: int = 6,
                         config: Optional[ModelConfig] = None) -> CheckResult:
    """Loss gradient of a 2-sample batch through the shrunken model, train mode."""
    from .trainer import binary_cross_entropy

    start = time.perf_counter()
    worst = 0.0
    for seed in range(seeds):
        cfg = config or ModelConfig.shrunken(seed=seed)
        model = build_model(cfg).astype(np.float64)
        rng = np.random.default_rng(1000 + seed)
        # zero-initialised biases put ReLU units exactly on their kink; probe a generic point
        for p in model.trainable_parameters():
            p.data += 0.05 * rng.standard_normal(p.shape)
        x = Tensor(rng.random((2,) + tuple(cfg.input_shape)))
        y = np.array([0.0, 1.0])

        def loss_fn(*_):
            probs = model.forward(x, training=True, rng=np.random.default_rng(seed))
            return binary_cross_entropy(probs, y)

        report = grad_check(loss_fn, model.trainable_parameters() + [x], MODEL_TOLERANCE,
                            step=MODEL_STEP, seed=seed, max_checks=max_checks, name="model",
                            floor=MODEL_FLOOR)
        worst = max(worst, report.max_rel_error)
    return CheckResult("grad shrunken model", worst < MODEL_TOLERANCE,
                       f"max rel err {worst:.2e} over {seeds} seeds (tol {MODEL_TOLERANCE:g})",
                       time.perf_counter() - start)


def check_golden() -> CheckResult:
    start = time.perf_counter()
    diffs = golden_diff(build_model(ModelConfig()))
    detail = "all rows and totals match" if not diffs else "; ".join(diffs)
    return CheckResult("layer table", not diffs, detail, time.perf_counter() - start)


def smooth_texture(size: int, seed: int, sigma: float = 2.5, pad: int = 20) -> np.ndarray:
    rng = np.random.default_rng(seed)
    tex = ndimage.gaussian_filter(rng.random((size + 2 * pad, size + 2 * pad)), sigma)
    return (tex - tex.min()) / np.ptp(tex)


def shifted_pair(size: int, shift: tuple[int, int], seed: int, pad: int = 20):
    """Frames (prev, next) with next(p) = prev(p - shift); shift is (dx, dy)."""
    big = smooth_texture(size, seed, pad=pad)
    dx, dy = shift
    prev = big[pad:pad + size, pad:pad + size]
    nxt = big[pad - dy:pad - dy + size, pad - dx:pad - dx + size]
    return prev, nxt


FLOW_SHIFTS = ((1, 0), (3, 0), (5, 0), (0, -4), (-5, 5), (2, -3), (-3, -1), (4, 4), (0, 5), (-5, 0))


def flow_shift_error(shift, seed: int, size: int = 64, margin: int = 8,
                     params: FlowParams = FlowParams()) -> float:
    prev, nxt = shifted_pair(size, shift, seed)
    flow = estimate_flow(prev, nxt, params)
    inner = (slice(margin, size - margin),) * 2
    return float(np.hypot(flow.u[inner] - shift[0], flow.v[inner] - shift[1]).mean())


def check_flow() -> CheckResult:
    start = time.perf_counter()
    worst = max(flow_shift_error(s, seed) for seed in range(3) for s in FLOW_SHIFTS)
    still = smooth_texture(64, 99)[20:84, 20:84]
    zero = float(np.abs(estimate_flow(still, still).as_array()).max())
    ok = worst < 0.5 and zero < 1e-3
    return CheckResult("optical flow", ok,
                       f"worst mean shift error {worst:.3f}px (<0.5), identical frames max {zero:.1e} (<1e-3)",
                       time.perf_counter() - start)


def fusion_max_error(samples: int = 1000, shape=(24, 32, 3), seed: int = 0) -> float:
    """Largest deviation of the fused composite from the float64 reference, in float32 ulps."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        rgb = rng.random(shape, dtype=np.float32)
        flows = [rng.random(shape, dtype=np.float32) for _ in range(4)]
        fused = fuse_inputs(rgb, flows)
        ref = rgb.astype(np.float64) / 2 + sum(f.astype(np.float64) for f in flows) / 8
        ulp = np.spacing(np.float32(1.0)) * np.maximum(np.abs(ref), 1.0)
        worst = max(worst, float((np.abs(fused - ref) / ulp).max()))
    return worst


def check_fusion() -> CheckResult:
    start = time.perf_counter()
    worst = fusion_max_error()
    ones = np.ones((240, 320, 3), np.float32)
    identity = bool(np.array_equal(fuse_inputs(ones, [ones] * 4), ones))
    return CheckResult("fusion", worst <= 2.0 and identity,
                       f"max error {worst:.2f} ulp over 1000 samples; all-ones identity {identity}",
                       time.perf_counter() - start)


def run_selftest(perturb: Optional[str] = None, model_seeds: int = 20,
                 layer_seeds: int = 20) -> list[CheckResult]:
    """Run every check; ``perturb`` names an op whose gradient is deliberately scaled by 1.01."""
    checks: list[Callable[[], CheckResult]] = [check_golden]
    checks += [lambda n=name: check_layer(n, layer_seeds) for name in layer_cases()]
    checks += [lambda: check_model_gradient(model_seeds), check_flow, check_fusion]
    results = []
    if perturb:
        with ta.perturbed_gradient(perturb, 1.01):
            results = [c() for c in checks]
    else:
        results = [c() for c in checks]
    return results


def format_results(results: Iterable[CheckResult]) -> str:
    return "\n".join(r.line() for r in results)
