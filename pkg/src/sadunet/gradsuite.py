"""Op-level and whole-model gradient checks, shared by tests and the CLI.

Key-side attention biases shift every score in a row by the same amount, so
softmax cancels them and their exact gradient is zero.  Relative error is
meaningless there (it divides finite-difference round-off by the 1e-8
floor); those tensors are checked for a vanishing gradient instead.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .layers import concat_channels, conv2d, conv2d_transpose, linear, maxpool2x2
from .model import ModelConfig, attention_subnet_forward, cast_params, init_params, pad_magnitude, unet_forward
from .tensor import Tensor, backward, grad_check, mul, precision, sum_all

SHIFT_INVARIANT = (".key_conv.bias", ".key.bias")
OP_TOL = 1e-4
MODEL_TOL = 1e-3
ZERO_TOL = 1e-8

TINY_CONFIG = dict(channels=4, layers=2, levels=2, freq_bins=16, window_frames=8)
SMALL_CONFIG = dict(channels=6, layers=3, levels=3, freq_bins=32, window_frames=16)


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    zero_grad_max: float = 0.0
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance and self.zero_grad_max < ZERO_TOL


@dataclass
class SuiteReport:
    results: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def max_rel_error(self) -> float:
        return max(r.max_rel_error for r in self.results)


def _untied(rng, shape):
    n = int(np.prod(shape))
    return ((rng.permutation(n) + 1) * 1e-2 * rng.choice([-1, 1], size=n)).reshape(shape)


def _probe_check(rng, forward, inputs):
    probe = None

    def f(*xs):
        nonlocal probe
        out = forward(*xs)
        if probe is None:
            probe = Tensor(rng.standard_normal(out.shape))
        return sum_all(mul(out, probe))

    return grad_check(f, inputs)


def _attention_params(rng, C, Ca, E, F):
    shapes = {
        "a.query_conv.weight": (Ca, C, 1, 1), "a.query_conv.bias": (Ca,),
        "a.key_conv.weight": (Ca, C, 1, 1), "a.key_conv.bias": (Ca,),
        "a.value_conv.weight": (C, C, 1, 1), "a.value_conv.bias": (C,),
        "a.query.weight": (E, Ca * F), "a.query.bias": (E,),
        "a.key.weight": (E, Ca * F), "a.key.bias": (E,),
    }
    return {k: Tensor(rng.standard_normal(s) * 0.5) for k, s in shapes.items()}


def _zero_grad_check(f, tensors, h=1e-5) -> float:
    """Largest |analytic| or |central difference| over tensors whose true gradient is zero."""
    worst = 0.0
    for t in tensors:
        worst = max(worst, float(np.max(np.abs(t.grad))))
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            worst = max(worst, abs(fp - fm) / (2 * h))
    return worst


def check_ops(seeds=range(10)) -> list[CheckResult]:
    results = []
    cases = {
        "conv2d": lambda r: (lambda x, w, b: conv2d(x, w, b),
                             [r.standard_normal((2, 4, 5)), r.standard_normal((3, 2, 3, 3)), r.standard_normal(3)]),
        "conv2d_transpose": lambda r: (lambda x, w, b: conv2d_transpose(x, w, b),
                                       [r.standard_normal((3, 2, 3)), r.standard_normal((3, 2, 2, 2)), r.standard_normal(2)]),
        "maxpool2x2": lambda r: (maxpool2x2, [_untied(r, (2, 4, 6))]),
        "linear": lambda r: (lambda x, w, b: linear(x, w, b),
                             [r.standard_normal((4, 5)), r.standard_normal((3, 4)), r.standard_normal(3)]),
        "concat_channels": lambda r: (concat_channels, [r.standard_normal((1, 2, 3)), r.standard_normal((2, 2, 3))]),
    }
    with precision(np.float64):
        for name, make in cases.items():
            t0, worst = time.perf_counter(), 0.0
            for seed in seeds:
                rng = np.random.default_rng(seed)
                fn, arrays = make(rng)
                worst = max(worst, _probe_check(rng, fn, [Tensor(a) for a in arrays]))
            results.append(CheckResult(name, worst, OP_TOL, seconds=time.perf_counter() - t0))

        t0, worst, zero = time.perf_counter(), 0.0, 0.0
        for seed in seeds:
            rng = np.random.default_rng(seed)
            p = _attention_params(rng, C=2, Ca=1, E=2, F=4)
            x = Tensor(rng.standard_normal((2, 4, 3)))
            names = [k for k in p if not k.endswith(SHIFT_INVARIANT)]
            fixed = {k: v for k, v in p.items() if k.endswith(SHIFT_INVARIANT)}
            worst = max(worst, _probe_check(
                rng, lambda x, *ws: attention_subnet_forward(x, {**fixed, **dict(zip(names, ws))}, "a"),
                [x] + [p[k] for k in names]))
            for t in fixed.values():
                t.requires_grad = True
            probe = Tensor(rng.standard_normal((4, 4, 3)))

            def f():
                return sum_all(mul(attention_subnet_forward(x, p, "a"), probe))

            backward(f())
            zero = max(zero, _zero_grad_check(f, fixed.values()))
        results.append(CheckResult("attention_subnet", worst, OP_TOL, zero, time.perf_counter() - t0))
    return results


def check_model(seed: int = 7, coords: int = 12, config: dict | None = None) -> CheckResult:
    """Whole attention model (tiny by default), random coordinate subset per parameter tensor."""
    cfg = ModelConfig(**(config or TINY_CONFIG))
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    with precision(np.float64):
        p = cast_params(init_params(cfg, seed=seed), np.float64)
        mag = pad_magnitude(rng.uniform(0.1, 2.0, (cfg.freq_bins, cfg.window_frames)), cfg)
        target = Tensor(rng.uniform(0, 1, (cfg.freq_bins, cfg.window_frames)))
        checked = [k for k in p if not k.endswith(SHIFT_INVARIANT)]
        fixed = [k for k in p if k.endswith(SHIFT_INVARIANT)]

        def loss(params):
            m1, m2 = unet_forward(mag, params, cfg)
            return sum_all(mul(m1, target)) + sum_all(mul(m2, m2))

        err = grad_check(lambda *ws: loss({**p, **dict(zip(checked, ws))}),
                         [p[k] for k in checked], coords=coords, rng=np.random.default_rng(seed + 1))
        backward(loss(p))
        zero = _zero_grad_check(lambda: loss(p), [p[k] for k in fixed])
    name = "end_to_end_tiny" if config in (None, TINY_CONFIG) else "end_to_end_small"
    return CheckResult(name, err, MODEL_TOL, zero, time.perf_counter() - t0)


def run_suite(seeds=range(10), tiny: bool = True) -> SuiteReport:
    report = SuiteReport(check_ops(seeds))
    report.results.append(check_model(config=TINY_CONFIG if tiny else SMALL_CONFIG))
    return report
