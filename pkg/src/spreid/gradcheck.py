"""Central finite-difference checks for every differentiable layer.

Each suite draws random configurations, evaluates the scalar probe
``sum(layer(x) * r)`` for a fixed random ``r`` and compares the analytic
gradients (input and parameters) with central differences in float64.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .backbone import BackboneConfig
from .head import AggregationConfig, SPReIDModel, weighted_pool_batch, weighted_pool_backward
from .layers import (
    Conv2d,
    GlobalAvgPool,
    Linear,
    MaxPool2d,
    ReLU,
    Tape,
    pixel_softmax_cross_entropy,
    softmax_cross_entropy,
)
from .parsing import ASPP
from .tensor import bilinear_resize, bilinear_resize_backward

EPS = 1e-5
TOLERANCE = 1e-5


def numerical_grad(f, x: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest absolute deviation scaled by the largest gradient magnitude."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


@dataclass
class CheckResult:
    suite: str
    config: str
    max_error: float

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def _check_layer(layer, x, rng, eps=EPS) -> float:
    """Compare tape gradients of ``sum(layer(x) * r)`` with finite differences."""
    out = layer(x)
    r = rng.standard_normal(out.shape)
    params = layer.params()
    for p in params:
        p.zero_grad()
    tape = Tape()
    layer(x, tape)
    dx = tape.backward(r)

    def probe():
        return float(np.sum(layer(x) * r))

    errs = [relative_error(dx, numerical_grad(probe, x, eps))]
    for p in params:
        errs.append(relative_error(p.grad, numerical_grad(probe, p.value, eps)))
    return max(errs)


def conv_suite(rng) -> list[CheckResult]:
    results = []
    for stride, dilation, padding in itertools.product((1, 2), (1, 2, 3, 6), (0, 1, 2)):
        k = 3
        span = dilation * (k - 1) + 1
        h = int(rng.integers(max(span - 2 * padding, 1), span + 4))
        w = int(rng.integers(max(span - 2 * padding, 1), span + 4))
        layer = Conv2d("conv", 2, 3, kernel=k, stride=stride, dilation=dilation,
                       padding=padding, rng=rng)
        layer.bias.value = rng.standard_normal(3)
        x = rng.standard_normal((2, 2, h, w))
        cfg = f"stride={stride} dilation={dilation} padding={padding} in={h}x{w}"
        results.append(CheckResult("conv2d", cfg, _check_layer(layer, x, rng)))
    return results


def maxpool_suite(rng, n=20) -> list[CheckResult]:
    results = []
    for i in range(n):
        kernel = int(rng.choice([2, 3]))
        stride = int(rng.choice([1, 2]))
        padding = int(rng.integers(0, kernel // 2 + 1))
        h, w = (int(v) for v in rng.integers(kernel + 1, 9, size=2))
        size = 2 * 2 * h * w
        # well-separated values so a finite-difference probe never flips an argmax
        x = (rng.permutation(size) * 0.01 + rng.uniform(0, 1e-3, size)).reshape(2, 2, h, w)
        layer = MaxPool2d("pool", kernel=kernel, stride=stride, padding=padding)
        cfg = f"kernel={kernel} stride={stride} padding={padding} in={h}x{w}"
        results.append(CheckResult("max_pool2d", cfg, _check_layer(layer, x, rng)))
    return results


def relu_suite(rng, n=20) -> list[CheckResult]:
    results = []
    for i in range(n):
        shape = tuple(int(v) for v in rng.integers(1, 5, size=4))
        x = rng.standard_normal(shape)
        x = np.where(np.abs(x) < 1e-3, 1e-2, x)
        results.append(CheckResult("relu", f"shape={shape}", _check_layer(ReLU(), x, rng)))
    return results


def gap_suite(rng, n=20) -> list[CheckResult]:
    results = []
    for i in range(n):
        shape = tuple(int(v) for v in rng.integers(1, 6, size=4))
        x = rng.standard_normal(shape)
        results.append(CheckResult("global_avg_pool", f"shape={shape}",
                                   _check_layer(GlobalAvgPool(), x, rng)))
    return results


def weighted_pool_suite(rng, n=20) -> list[CheckResult]:
    """Activations resized onto the map grid, then pooled; checks both inputs."""
    results = []
    for i in range(n):
        b, c = (int(v) for v in rng.integers(1, 4, size=2))
        ha, wa = (int(v) for v in rng.integers(1, 5, size=2))
        hm, wm = (int(v) for v in rng.integers(1, 7, size=2))
        acts = rng.standard_normal((b, c, ha, wa))
        maps = rng.uniform(0, 1, (b, 5, hm, wm))
        maps /= maps.sum(axis=(2, 3), keepdims=True)

        def forward():
            return weighted_pool_batch(bilinear_resize(acts, hm, wm), maps)

        r = rng.standard_normal(forward().shape)
        g_aligned, g_maps = weighted_pool_backward(r, bilinear_resize(acts, hm, wm), maps)
        g_acts = bilinear_resize_backward(g_aligned, ha, wa)

        def probe():
            return float(np.sum(forward() * r))

        err = max(relative_error(g_acts, numerical_grad(probe, acts)),
                  relative_error(g_maps, numerical_grad(probe, maps)))
        cfg = f"acts={acts.shape} maps={maps.shape}"
        results.append(CheckResult("weighted_pool", cfg, err))
    return results


def aspp_suite(rng, n=20) -> list[CheckResult]:
    results = []
    for i in range(n):
        merge = "sum" if i % 2 == 0 else "concat"
        h, w = (int(v) for v in rng.integers(2, 9, size=2))
        layer = ASPP("aspp", 2, 2, merge=merge, rng=rng)
        for p in layer.params():
            if p.name.endswith("bias"):
                p.value = rng.standard_normal(p.shape)
        x = rng.standard_normal((1, 2, h, w))
        results.append(CheckResult("aspp", f"merge={merge} in={h}x{w}", _check_layer(layer, x, rng)))
    return results


def classifier_suite(rng, n=20) -> list[CheckResult]:
    """1x1 conv classifier, bilinear upsampling and per-pixel softmax cross-entropy."""
    results = []
    for i in range(n):
        c, k = 3, int(rng.integers(2, 6))
        h, w = (int(v) for v in rng.integers(1, 4, size=2))
        uh, uw = h * int(rng.integers(1, 3)), w * int(rng.integers(1, 3))
        layer = Conv2d("cls", c, k, kernel=1, rng=rng)
        x = rng.standard_normal((2, c, h, w))
        labels = rng.integers(0, k, size=(2, uh, uw))

        def loss():
            return pixel_softmax_cross_entropy(bilinear_resize(layer(x), uh, uw), labels)[0]

        for p in layer.params():
            p.zero_grad()
        tape = Tape()
        z = layer(x, tape)
        _, g = pixel_softmax_cross_entropy(bilinear_resize(z, uh, uw), labels)
        dx = tape.backward(bilinear_resize_backward(g, h, w))
        errs = [relative_error(dx, numerical_grad(loss, x))]
        errs += [relative_error(p.grad, numerical_grad(loss, p.value)) for p in layer.params()]
        cfg = f"classes={k} logits={h}x{w} labels={uh}x{uw}"
        results.append(CheckResult("pixel_classifier", cfg, max(errs)))
    return results


def softmax_ce_suite(rng, n=20) -> list[CheckResult]:
    results = []
    for i in range(n):
        b, k = int(rng.integers(1, 6)), int(rng.integers(2, 8))
        logits = rng.standard_normal((b, k)) * 3
        labels = rng.integers(0, k, size=b)
        _, g = softmax_cross_entropy(logits, labels)
        num = numerical_grad(lambda: softmax_cross_entropy(logits, labels)[0], logits)
        results.append(CheckResult("softmax_cross_entropy", f"batch={b} classes={k}",
                                   relative_error(g, num)))
    return results


def linear_suite(rng, n=20) -> list[CheckResult]:
    results = []
    for i in range(n):
        b, d, k = (int(v) for v in rng.integers(1, 6, size=3))
        layer = Linear("fc", d, k, rng=rng)
        layer.bias.value = rng.standard_normal(k)
        x = rng.standard_normal((b, d))
        results.append(CheckResult("linear", f"batch={b} in={d} out={k}", _check_layer(layer, x, rng)))
    return results


TINY_BACKBONE = BackboneConfig(stem_channels=(2, 3), block_channels=(3, 3, 4), convs_per_stage=1)


def spreid_suite(rng, n=2, max_draws=5) -> list[CheckResult]:
    """End-to-end loss gradient w.r.t. every re-id parameter, maps held constant.

    Biases are drawn away from zero: with zero biases, dead regions produce
    pre-activations of exactly 0, where ReLU has a kink. A draw is redrawn when
    it disagrees with central differences at step ``EPS`` while those in turn
    disagree with differences at ``EPS/10``, i.e. a kink lies within reach of
    the probe.
    """
    results = []
    variants = [("spreid_w_fg", True), ("spreid_wo_fg", True), ("spreid_w_fg", False), ("baseline", True)]
    for i in range(n):
        for variant, sharing in variants:
            for _ in range(max_draws):
                model = SPReIDModel(TINY_BACKBONE, AggregationConfig(variant, sharing), 3,
                                    seed=int(rng.integers(1 << 30)))
                for p in model.params():
                    if p.name.endswith("bias"):
                        p.value = rng.uniform(0.05, 0.2, p.shape) * rng.choice([-1, 1], p.shape)
                images = rng.uniform(0, 1, (2, 3, 64, 32))
                maps = rng.uniform(0, 1, (2, 5, 8, 4))
                maps /= maps.sum(axis=(2, 3), keepdims=True)
                labels = np.array([0, 2])

                def loss():
                    return softmax_cross_entropy(model.logits(images, maps), labels)[0]

                for p in model.params():
                    p.zero_grad()
                model.loss_and_grad(images, labels, maps)
                err, kinked = 0.0, False
                for p in model.params():
                    num = numerical_grad(loss, p.value)
                    e = relative_error(p.grad, num)
                    if e >= TOLERANCE and relative_error(num, numerical_grad(loss, p.value, EPS / 10)) > TOLERANCE:
                        kinked = True
                        break
                    err = max(err, e)
                if not kinked:
                    break
            else:
                err = float("inf")
            results.append(CheckResult("spreid_loss", f"variant={variant} sharing={sharing}", err))
    return results


SUITES = {
    "conv2d": conv_suite,
    "max_pool2d": maxpool_suite,
    "relu": relu_suite,
    "global_avg_pool": gap_suite,
    "weighted_pool": weighted_pool_suite,
    "aspp": aspp_suite,
    "pixel_classifier": classifier_suite,
    "softmax_cross_entropy": softmax_ce_suite,
    "linear": linear_suite,
}


def run_all(seed: int = 0, include_model: bool = False) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for suite in SUITES.values():
        results.extend(suite(rng))
    if include_model:
        results.extend(spreid_suite(rng))
    return results
