"""Registry of finite-difference checks covering every differentiable op.

Each entry builds one random 64-bit instance and checks the analytic
gradient of one target tensor (inputs, weights, and offsets rotate across
instances). Random values are kept away from non-differentiable points
(ReLU kinks, bilinear lattice lines, pooling ties, the smooth-L1 switch)
because central differences are not meaningful there; everywhere else the
instances are generic.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .blocks import DSEBlock, LocalAttention, SqueezeExcitation
from .gradcheck import GradCheckReport, finite_diff_check
from .losses import focal_loss, smooth_l1_loss
from .tensor import Tensor


def _t(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64), dtype=np.float64)


def _proj(rng, shape) -> np.ndarray:
    # Random projection to a scalar keeps upstream gradients generic.
    return rng.normal(0.5, 1.0, size=shape)


def _away_from_zero(rng, shape, margin=0.08) -> np.ndarray:
    vals = rng.normal(0.0, 1.0, size=shape)
    return vals + np.sign(vals) * margin


def _safe_fractional(rng, shape, lo=0.2, hi=0.8):
    # Integer part in [-2, 1], fractional part away from the lattice.
    return rng.integers(-2, 2, size=shape) + rng.uniform(lo, hi, size=shape)


def _check(f, x, h=1e-5, tol=1e-4) -> GradCheckReport:
    return finite_diff_check(f, _t(x), h=h, tol=tol)


# -- primitives ---------------------------------------------------------------

def _run_add(rng):
    b = rng.normal(size=(3, 4))
    p = _proj(rng, (3, 4))
    return _check(lambda t: ((t + _t(b)) * _t(p)).sum(), rng.normal(size=(3, 4)))


def _run_multiply(rng):
    b = rng.normal(size=(2, 3, 2))
    p = _proj(rng, (2, 3, 2))
    return _check(lambda t: ((t * _t(b)) * _t(p)).sum(), rng.normal(size=(2, 3, 2)))


def _run_subtract(rng):
    b = rng.normal(size=(4, 3))
    p = _proj(rng, (4, 3))
    return _check(lambda t: ((_t(b) - t) * _t(p)).sum(), rng.normal(size=(4, 3)))


def _run_negate(rng):
    p = _proj(rng, (5,))
    return _check(lambda t: ((-t) * _t(p)).sum(), rng.normal(size=(5,)))


def _run_matmul(rng):
    b = rng.normal(size=(4, 3))
    p = _proj(rng, (2, 3))
    if rng.integers(2):
        return _check(lambda t: ((t @ _t(b)) * _t(p)).sum(), rng.normal(size=(2, 4)))
    a = rng.normal(size=(2, 4))
    return _check(lambda t: ((_t(a) @ t) * _t(p)).sum(), b)


def _run_relu(rng):
    p = _proj(rng, (3, 5))
    return _check(lambda t: (t.relu() * _t(p)).sum(), _away_from_zero(rng, (3, 5)))


def _run_sigmoid(rng):
    p = _proj(rng, (4, 4))
    return _check(lambda t: (t.sigmoid() * _t(p)).sum(), rng.normal(size=(4, 4)) * 2)


def _run_exp(rng):
    p = _proj(rng, (6,))
    return _check(lambda t: (t.exp() * _t(p)).sum(), rng.normal(size=(6,)))


def _run_log(rng):
    p = _proj(rng, (6,))
    return _check(lambda t: (t.log() * _t(p)).sum(), rng.uniform(0.4, 2.5, size=(6,)))


def _run_power(rng):
    c = float(rng.choice([1.5, 2.0, 3.0]))
    p = _proj(rng, (5,))
    return _check(lambda t: ((t ** c) * _t(p)).sum(), rng.uniform(0.3, 2.0, size=(5,)))


def _run_sum(rng):
    axis = int(rng.integers(0, 3))
    x = rng.normal(size=(2, 3, 4))
    shape = tuple(s for i, s in enumerate(x.shape) if i != axis)
    p = _proj(rng, shape)
    return _check(lambda t: (t.sum(axis=axis) * _t(p)).sum(), x)


def _run_mean(rng):
    x = rng.normal(size=(3, 4))
    p = _proj(rng, (3,))
    return _check(lambda t: (t.mean(axis=1) * _t(p)).sum(), x)


def _run_reshape(rng):
    x = rng.normal(size=(2, 6))
    p = _proj(rng, (3, 4))
    return _check(lambda t: (t.reshape(3, 4) * _t(p)).sum(), x)


def _run_transpose(rng):
    x = rng.normal(size=(2, 3, 4))
    p = _proj(rng, (4, 2, 3))
    return _check(lambda t: (t.transpose(2, 0, 1) * _t(p)).sum(), x)


def _run_conv2d(rng):
    n, c, o = 1, int(rng.integers(1, 3)), int(rng.integers(1, 3))
    h = int(rng.integers(4, 7))
    k = int(rng.choice([1, 3]))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2)) if k == 3 else 0
    x = rng.normal(size=(n, c, h, h))
    w = rng.normal(size=(o, c, k, k)) * 0.7
    b = rng.normal(size=(o,))
    ho = (h + 2 * pad - k) // stride + 1
    p = _proj(rng, (n, o, ho, ho))
    target = int(rng.integers(0, 3))
    if target == 0:
        return _check(lambda t: (F.conv2d(t, _t(w), _t(b), stride, pad) * _t(p)).sum(), x)
    if target == 1:
        return _check(lambda t: (F.conv2d(_t(x), t, _t(b), stride, pad) * _t(p)).sum(), w)
    return _check(lambda t: (F.conv2d(_t(x), _t(w), t, stride, pad) * _t(p)).sum(), b)


def _run_max_pool2d(rng):
    h = int(rng.choice([4, 6]))
    k = int(rng.integers(2, 4))
    s = int(rng.integers(1, 3))
    pad = int(rng.integers(0, min(2, k)))
    x = rng.normal(size=(1, 2, h, h)) * 3
    ho = (h + 2 * pad - k) // s + 1
    p = _proj(rng, (1, 2, ho, ho))
    return _check(lambda t: (F.max_pool2d(t, k, s, pad) * _t(p)).sum(), x)


def _run_avg_pool2d(rng):
    h = int(rng.choice([4, 6]))
    k = int(rng.integers(2, 4))
    s = int(rng.integers(1, 3))
    x = rng.normal(size=(1, 2, h, h))
    ho = (h - k) // s + 1
    p = _proj(rng, (1, 2, ho, ho))
    return _check(lambda t: (F.avg_pool2d(t, k, s) * _t(p)).sum(), x)


def _run_global_avg_pool(rng):
    x = rng.normal(size=(2, 3, 4, 5))
    p = _proj(rng, (2, 3))
    return _check(lambda t: (F.global_avg_pool(t) * _t(p)).sum(), x)


def _run_upsample(rng):
    x = rng.normal(size=(1, 2, 3, 4))
    p = _proj(rng, (1, 2, 6, 8))
    return _check(lambda t: (F.upsample_nearest2x(t) * _t(p)).sum(), x)


def _run_concat(rng):
    a = rng.normal(size=(1, 2, 3, 3))
    b = rng.normal(size=(1, 3, 3, 3))
    p = _proj(rng, (1, 5, 3, 3))
    if rng.integers(2):
        return _check(lambda t: (F.concat([t, _t(b)]) * _t(p)).sum(), a)
    return _check(lambda t: (F.concat([_t(a), t]) * _t(p)).sum(), b)


def _run_batch_norm_train(rng):
    c = 3
    x = rng.normal(1.0, 2.0, size=(2, c, 3, 4))
    gamma = rng.uniform(0.5, 1.5, size=c)
    beta = rng.normal(size=c)
    p = _proj(rng, x.shape)
    target = int(rng.integers(0, 3))

    def run(xt, gt, bt):
        return (F.batch_norm2d(xt, gt, bt, np.zeros(c), np.ones(c), True) * _t(p)).sum()

    if target == 0:
        return _check(lambda t: run(t, _t(gamma), _t(beta)), x)
    if target == 1:
        return _check(lambda t: run(_t(x), t, _t(beta)), gamma)
    return _check(lambda t: run(_t(x), _t(gamma), t), beta)


def _run_batch_norm_eval(rng):
    c = 3
    x = rng.normal(size=(2, c, 3, 3))
    gamma = rng.uniform(0.5, 1.5, size=c)
    beta = rng.normal(size=c)
    rm = rng.normal(size=c)
    rv = rng.uniform(0.5, 2.0, size=c)
    p = _proj(rng, x.shape)
    return _check(lambda t: (F.batch_norm2d(t, _t(gamma), _t(beta), rm.copy(), rv.copy(), False) * _t(p)).sum(), x)


def _run_bilinear_sample(rng):
    c, h, w = 2, 5, 6
    fmap = rng.normal(size=(c, h, w))
    y = float(_safe_fractional(rng, ()) + 2)
    x = float(_safe_fractional(rng, ()) + 2)
    p = _proj(rng, (c,))
    target = int(rng.integers(0, 3))
    if target == 0:
        return _check(lambda t: (F.bilinear_sample(t, y, x) * _t(p)).sum(), fmap)
    if target == 1:
        return _check(lambda t: (F.bilinear_sample(_t(fmap), t, x) * _t(p)).sum(), np.asarray(y))
    return _check(lambda t: (F.bilinear_sample(_t(fmap), y, t) * _t(p)).sum(), np.asarray(x))


def _run_take_rows(rng):
    x = rng.normal(size=(6, 4))
    idx = rng.integers(0, 6, size=5)
    p = _proj(rng, (5, 4))
    return _check(lambda t: (F.take_rows(t, idx) * _t(p)).sum(), x)


# -- composites ----------------------------------------------------------------

def _run_deform_conv2d(rng):
    n, c, o, h = 1, 2, 2, 5
    x = rng.normal(size=(n, c, h, h))
    w = rng.normal(size=(o, c, 3, 3)) * 0.6
    b = rng.normal(size=(o,))
    off = _safe_fractional(rng, (n, 18, h, h)) * 0.9
    p = _proj(rng, (n, o, h, h))
    target = int(rng.integers(0, 4))
    if target == 0:
        return _check(lambda t: (F.deform_conv2d(t, _t(w), _t(off), _t(b)) * _t(p)).sum(), x)
    if target == 1:
        return _check(lambda t: (F.deform_conv2d(_t(x), t, _t(off), _t(b)) * _t(p)).sum(), w)
    if target == 2:
        return _check(lambda t: (F.deform_conv2d(_t(x), _t(w), t, _t(b)) * _t(p)).sum(), off)
    return _check(lambda t: (F.deform_conv2d(_t(x), _t(w), _t(off), t) * _t(p)).sum(), b)


def _run_deform_offsets(rng):
    # Dedicated offsets-gradient check on a larger instance.
    n, c, o, h = 1, 4, 2, 6
    x = rng.normal(size=(n, c, h, h))
    w = rng.normal(size=(o, c, 3, 3)) * 0.5
    off = _safe_fractional(rng, (n, 18, h, h))
    p = _proj(rng, (n, o, h, h))
    return _check(lambda t: (F.deform_conv2d(_t(x), _t(w), t) * _t(p)).sum(), off)


def _locate(block, dotted: str):
    parts = dotted.split(".")
    owner = block
    for part in parts[:-1]:
        owner = owner._modules[part]
    return owner, parts[-1]


def _randomize_gates(block, rng):
    # Zero-initialized gate layers get generic weights so the check runs off
    # the trivial point. Offset predictors keep zero weights but get
    # fractional-safe biases: samples stay clear of bilinear lattice kinks
    # while the whole offset pathway still carries gradient.
    for name, p in block.named_parameters():
        if "offset_conv.bias" in name:
            p.data = _safe_fractional(rng, p.data.shape) * 0.5
        elif "offset_conv" in name:
            continue
        elif p.data.size and not p.data.any():
            p.data = rng.normal(0.0, 0.3, size=p.data.shape)


def _run_module(rng, builder, in_shape):
    """Check d(output . proj)/d(target) for a random target: the input or any
    one parameter (the probe tensor is swapped into the module attribute so
    gradients flow into it directly)."""
    block = builder(np.random.default_rng(int(rng.integers(0, 2 ** 31))))
    block.to_dtype(np.float64)
    _randomize_gates(block, rng)
    x = rng.normal(size=in_shape)
    p = _proj(rng, in_shape)
    names = [n for n, _ in block.named_parameters()]
    pick = int(rng.integers(0, len(names) + 1))

    if pick == len(names):
        return _check(lambda t: (block(t) * _t(p)).sum(), x)

    owner, attr = _locate(block, names[pick])
    original = owner._parameters[attr]

    def f(t):
        object.__setattr__(owner, attr, t)
        try:
            return (block(_t(x)) * _t(p)).sum()
        finally:
            object.__setattr__(owner, attr, original)

    return _check(f, original.data.copy())


def _run_se_block(rng):
    return _run_module(rng, lambda r: SqueezeExcitation(6, 3, r), (2, 6, 3, 4))


def _run_local_attention(rng):
    return _run_module(rng, lambda r: LocalAttention(4, r), (1, 4, 5, 5))


def _run_dse_block(rng):
    return _run_module(rng, lambda r: DSEBlock(8, r, se_ratio=4), (1, 8, 6, 6))


def _run_focal_loss(rng):
    k, c = 6, 4
    labels = rng.integers(-1, c + 1, size=k)
    if not (labels > 0).any():
        labels[0] = 1
    x = rng.normal(size=(k, c)) * 2
    alpha = float(rng.uniform(0.1, 0.9))
    gamma = float(rng.choice([0.0, 1.0, 2.0]))
    return _check(lambda t: focal_loss(t, labels, alpha=alpha, gamma=gamma), x)


def _run_smooth_l1(rng):
    m = 5
    beta = 1.0 / 9.0
    target = rng.normal(size=(m, 4))
    d = rng.normal(size=(m, 4)) * 0.5
    # keep |d| clear of the quadratic/linear switch at beta
    near = np.abs(np.abs(d) - beta) < 1e-3
    d[near] = np.sign(d[near]) * (beta + 0.02)
    return _check(lambda t: smooth_l1_loss(t, target, beta=beta), target + d)


@dataclass
class SuiteResult:
    op: str
    instances: int
    failures: int
    max_rel_err: float
    max_abs_err: float

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return (f"{mark}  {self.op:<22} instances={self.instances:<4} "
                f"max_rel_err={self.max_rel_err:.3e}  max_abs_err={self.max_abs_err:.3e}")


SUITE = [
    ("add", _run_add),
    ("multiply", _run_multiply),
    ("subtract", _run_subtract),
    ("negate", _run_negate),
    ("matmul", _run_matmul),
    ("relu", _run_relu),
    ("sigmoid", _run_sigmoid),
    ("exp", _run_exp),
    ("log", _run_log),
    ("power", _run_power),
    ("sum", _run_sum),
    ("mean", _run_mean),
    ("reshape", _run_reshape),
    ("transpose", _run_transpose),
    ("conv2d", _run_conv2d),
    ("max_pool2d", _run_max_pool2d),
    ("avg_pool2d", _run_avg_pool2d),
    ("global_avg_pool", _run_global_avg_pool),
    ("upsample_nearest2x", _run_upsample),
    ("concat", _run_concat),
    ("batch_norm_train", _run_batch_norm_train),
    ("batch_norm_eval", _run_batch_norm_eval),
    ("bilinear_sample", _run_bilinear_sample),
    ("take_rows", _run_take_rows),
    ("deform_conv2d", _run_deform_conv2d),
    ("deform_conv2d_offsets", _run_deform_offsets),
    ("se_block", _run_se_block),
    ("local_attention", _run_local_attention),
    ("dse_block", _run_dse_block),
    ("focal_loss", _run_focal_loss),
    ("smooth_l1_loss", _run_smooth_l1),
]


def run_gradient_suite(instances: int = 100, seed: int = 20240, ops=None, progress=None) -> list:
    """Run every registered check ``instances`` times per op."""
    selected = [(n, r) for n, r in SUITE if ops is None or n in ops]
    results = []
    for name, runner in selected:
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        failures = 0
        max_rel = 0.0
        max_abs = 0.0
        for _ in range(instances):
            report = runner(rng)
            if not report.passed:
                failures += 1
            max_rel = max(max_rel, report.max_rel_err)
            max_abs = max(max_abs, report.max_abs_err)
        result = SuiteResult(name, instances, failures, max_rel, max_abs)
        results.append(result)
        if progress:
            progress(result)
    return results
