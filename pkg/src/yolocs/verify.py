"""Independent oracles and property harnesses.

Nothing here calls the optimized kernels it is meant to check; each oracle is
written as plainly as possible so it can be audited by eye.
"""

from dataclasses import dataclass
from fractions import Fraction
import math

import numpy as np

from yolocs import _backend
from yolocs import tensor as T
from yolocs.losses import (
    DetectionLoss,
    LossConfig,
    MatchedBatch,
    bce_with_logits,
    ciou_terms,
    ciou_with_grad,
    objectness_targets,
    total_loss,
)
from yolocs.nn.module import Module
from yolocs.tensor import _kernels
from yolocs.tensor.types import BatchNormParams, ConvParams, ConvSpec


def conv_oracle(x, spec: ConvSpec, params: ConvParams):
    """Direct six-loop convolution with flattened kernel index ``k``.

    Tap ``k`` reads row ``y*stride + k // side - pad`` and column
    ``x*stride + k % side - pad``; reads outside the map contribute zero.
    Per output element the sum runs over input channels, each channel's
    kernel-window sum is formed first, and the bias is added last.
    """
    n, ci, h, w = x.shape
    side = spec.kernel_size
    ks = side * side
    pad, stride = spec.padding, spec.stride
    ho, wo = spec.out_hw(h, w)
    zero = x.dtype.type(0)
    weights = params.weights.astype(x.dtype)
    out = np.zeros((n, spec.out_channels, ho, wo), dtype=x.dtype)
    for b in range(n):
        for o in range(spec.out_channels):
            for y in range(ho):
                for xx in range(wo):
                    acc = zero
                    for c in range(ci):
                        part = zero
                        for k in range(ks):
                            iy = y * stride + k // side - pad
                            ix = xx * stride + k % side - pad
                            v = x[b, c, iy, ix] if 0 <= iy < h and 0 <= ix < w else zero
                            part = part + v * weights[o, c, k // side, k % side]
                        acc = acc + part
                    if spec.has_bias:
                        acc = acc + x.dtype.type(params.bias[o])
                    out[b, o, y, xx] = acc
    return out


# ---- direct-loop oracles for the cheap primitives --------------------------


def concat_oracle(inputs):
    n, _, h, w = inputs[0].shape
    total = sum(t.shape[1] for t in inputs)
    out = np.zeros((n, total, h, w), dtype=inputs[0].dtype)
    base = 0
    for t in inputs:
        for b in range(n):
            for c in range(t.shape[1]):
                for y in range(h):
                    for x in range(w):
                        out[b, base + c, y, x] = t[b, c, y, x]
        base += t.shape[1]
    return out


def maxpool_oracle(x, k=5, pad=2):
    n, c, h, w = x.shape
    out = np.zeros_like(x)
    for b in range(n):
        for ch in range(c):
            for y in range(h):
                for xx in range(w):
                    vals = [x[b, ch, y + dy - pad, xx + dx - pad]
                            for dy in range(k) for dx in range(k)
                            if 0 <= y + dy - pad < h and 0 <= xx + dx - pad < w]
                    out[b, ch, y, xx] = max(vals)
    return out


def upsample_oracle(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, 2 * h, 2 * w), dtype=x.dtype)
    for b in range(n):
        for ch in range(c):
            for y in range(2 * h):
                for xx in range(2 * w):
                    out[b, ch, y, xx] = x[b, ch, y // 2, xx // 2]
    return out


def add_oracle(a, b):
    out = np.zeros_like(a)
    for idx in np.ndindex(a.shape):
        out[idx] = a[idx] + b[idx]
    return out


def ciou_reference(a, b) -> float:
    """Box CIoU from exact rational arithmetic.

    Boxes are ``(cx, cy, w, h)``. Everything except the aspect term is
    computed with :class:`fractions.Fraction`; the aspect term is exactly
    zero for equal aspect ratios and uses ``math.atan`` otherwise.
    """
    a = [Fraction(v) for v in a]
    b = [Fraction(v) for v in b]
    ax1, ax2, ay1, ay2 = a[0] - a[2] / 2, a[0] + a[2] / 2, a[1] - a[3] / 2, a[1] + a[3] / 2
    bx1, bx2, by1, by2 = b[0] - b[2] / 2, b[0] + b[2] / 2, b[1] - b[3] / 2, b[1] + b[3] / 2
    iw = max(Fraction(0), min(ax2, bx2) - max(ax1, bx1))
    ih = max(Fraction(0), min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    iou = inter / (a[2] * a[3] + b[2] * b[3] - inter)
    c2 = (max(ax2, bx2) - min(ax1, bx1)) ** 2 + (max(ay2, by2) - min(ay1, by1)) ** 2
    rho2 = (a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2
    exact = iou - rho2 / c2
    if a[2] * b[3] == b[2] * a[3]:
        return float(exact)
    v = 4 / math.pi**2 * (math.atan(b[2] / b[3]) - math.atan(a[2] / a[3])) ** 2
    alpha = v / ((1 - float(iou)) + v)
    return float(exact) - alpha * v


# ---- finite differences ----------------------------------------------------


def finite_diff_grad(f, theta, h=1e-4, indices=None):
    """Central-difference gradient of scalar ``f`` at ``theta`` (64-bit).

    The step for coordinate ``i`` is ``h * max(1, |theta_i|)``. ``theta`` is
    perturbed in place and restored. ``indices`` limits the estimate to some
    flat coordinates (the rest stay zero).
    """
    flat = theta.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size) if indices is None else indices:
        old = flat[i]
        step = h * max(1.0, abs(float(old)))
        flat[i] = old + step
        fp = float(f(theta))
        flat[i] = old - step
        fm = float(f(theta))
        flat[i] = old
        grad[i] = (fp - fm) / (2 * step)
    return grad.reshape(theta.shape)


def relative_error(analytic, numeric, floor=1e-4) -> float:
    """Largest ``|a - n| / max(|a|, |n|, floor)`` over the entries.

    The floor keeps gradients that are zero in exact arithmetic (a conv bias
    feeding a train-mode BatchNorm) from turning difference noise of order
    1e-10 into a large ratio; below it the check is effectively absolute.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def _sample(rng, size, k):
    return range(size) if size <= k else rng.choice(size, k, replace=False).tolist()


def check_function_grad(fwd, bwd, inputs, *, seed=0, samples=8) -> float:
    """Max relative error of ``bwd`` against finite differences of ``fwd``.

    ``fwd(*inputs)`` returns an array (or list of arrays); the scalar probed is
    its dot product with a fixed random projection. ``bwd(proj)`` returns the
    gradient for each entry of ``inputs``.
    """
    rng = np.random.default_rng(seed)
    out = fwd(*inputs)
    outs = out if isinstance(out, list) else [out]
    proj = [rng.standard_normal(np.shape(o)) for o in outs]

    def f(_):
        o = fwd(*inputs)
        return sum(float(np.sum(a * p)) for a, p in zip(o if isinstance(o, list) else [o], proj))

    grads = bwd(proj if isinstance(out, list) else proj[0])
    worst = 0.0
    for x, g in zip(inputs, grads):
        if g is None:
            continue
        idx = _sample(rng, x.size, samples)
        num = finite_diff_grad(f, x, indices=idx)
        worst = max(worst, relative_error(np.asarray(g).reshape(-1)[list(idx)], num.reshape(-1)[list(idx)]))
    return worst


def check_module_grad(module, inputs, *, seed=0, samples=4) -> dict:
    """Finite-difference check of a module's backward.

    Returns ``{tensor_name: max_rel_err}`` over every parameter tensor and
    every input. The module should hold 64-bit parameters.
    """
    rng = np.random.default_rng(seed)
    multi = isinstance(inputs, list)
    out = module(inputs)
    outs = out if isinstance(out, list) else [out]
    proj = [rng.standard_normal(o.shape) for o in outs]

    def f(_):
        o = module(inputs)
        return sum(float(np.sum(a * p)) for a, p in zip(o if isinstance(o, list) else [o], proj))

    module.zero_grad()
    module(inputs)
    gin = module.backward(proj if isinstance(out, list) else proj[0])
    grads = dict(module.named_grads())
    errors = {}
    for name, p in module.named_parameters():
        idx = _sample(rng, p.size, samples)
        num = finite_diff_grad(f, p, indices=idx)
        errors[name] = relative_error(grads[name].reshape(-1)[list(idx)], num.reshape(-1)[list(idx)])
    for i, (x, g) in enumerate(zip(inputs if multi else [inputs], gin if multi else [gin])):
        idx = _sample(rng, x.size, samples)
        num = finite_diff_grad(f, x, indices=idx)
        errors[f"input{i}"] = relative_error(g.reshape(-1)[list(idx)], num.reshape(-1)[list(idx)])
    return errors


# ---- receptive field -------------------------------------------------------


def receptive_field_probe(block, pixel, input_shape=(1, 8, 15, 15), eps=1.0, seed=0):
    """Output positions ``(y, x)`` that react to nudging one input pixel.

    ``block`` is a module (run in eval mode) or a plain callable. All
    channels at ``pixel`` move by ``eps``; a position counts when any channel
    changes by more than ``eps * 1e-3``.
    """
    if isinstance(block, Module):
        block.eval()
    x = np.random.default_rng(seed).standard_normal(input_shape)
    base = block(x)
    xp = x.copy()
    xp[:, :, pixel[0], pixel[1]] += eps
    diff = np.abs(block(xp) - base).max(axis=(0, 1))
    return {(int(y), int(x_)) for y, x_ in zip(*np.nonzero(diff > eps * 1e-3))}


def probe_radius(positions, pixel) -> int:
    return max(max(abs(y - pixel[0]), abs(x - pixel[1])) for y, x in positions) if positions else -1


# ---- toy training ----------------------------------------------------------


@dataclass
class SyntheticBatch:
    images: np.ndarray
    targets: list


def synthetic_batch(seed=0, n=8, size=96, num_classes=2, dtype=np.float32) -> SyntheticBatch:
    """Noise images with 1-3 solid rectangles each; class sets the color."""
    rng = np.random.default_rng(seed)
    colors = np.eye(3)[:num_classes] if num_classes <= 3 else rng.uniform(0, 1, (num_classes, 3))
    images = rng.normal(0.0, 0.1, (n, 3, size, size))
    targets = []
    for b in range(n):
        rows = []
        for _ in range(rng.integers(1, 4)):
            cls = int(rng.integers(num_classes))
            w, h = rng.uniform(0.12, 0.5, 2) * size
            cx, cy = rng.uniform(w / 2, size - w / 2), rng.uniform(h / 2, size - h / 2)
            x0, x1 = int(round(cx - w / 2)), int(round(cx + w / 2))
            y0, y1 = int(round(cy - h / 2)), int(round(cy + h / 2))
            images[b, :, y0:y1, x0:x1] = colors[cls][:, None, None]
            rows.append((cls, cx, cy, w, h))
        targets.append(np.asarray(rows))
    return SyntheticBatch(images.astype(dtype), targets)


@dataclass
class ToyResult:
    losses: list
    diverged_at: int | None = None

    @property
    def ok(self) -> bool:
        return self.diverged_at is None


def toy_overfit(graph, batch: SyntheticBatch, steps=200, lr=5e-3, cfg: LossConfig | None = None) -> ToyResult:
    """Plain gradient descent on one fixed batch.

    Returns the total loss before each update plus the final loss
    (``steps + 1`` values). A non-finite loss (or output, or a collapsed
    box) stops training and records the step index.
    """
    graph.train()
    loss_fn = DetectionLoss(graph.anchors_grid(), graph.strides, graph.head.nc, cfg)
    losses = []
    for step in range(steps + 1):
        graph.zero_grad()
        with np.errstate(over="ignore", invalid="ignore"):
            outs = graph.forward(batch.images)
            if not all(np.isfinite(o).all() for o in outs):
                return ToyResult(losses, step)
            try:
                res, grads = loss_fn(outs, batch.targets)
            except ValueError:  # decoded boxes collapsed to zero extent
                return ToyResult(losses, step)
        if not np.isfinite(res.total):
            return ToyResult(losses, step)
        losses.append(res.total)
        if step == steps:
            break
        graph.backward(grads)
        for (name, p), (_, g) in zip(graph.named_parameters(), graph.named_grads()):
            p -= (lr * g).astype(p.dtype)
    return ToyResult(losses)


# ---- suites -----------------------------------------------------------------


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str = ""


def _fuzz_conv_case(rng):
    k = int(rng.choice([1, 3, 5, 6]))
    s = int(rng.choice([1, 2]))
    pad = int(rng.integers(0, k // 2 + 1))
    n, ci, co = int(rng.integers(1, 3)), int(rng.integers(1, 9)), int(rng.integers(1, 9))
    h = int(rng.integers(max(1, k - 2 * pad), 17))
    w = int(rng.integers(max(1, k - 2 * pad), 17))
    dtype = np.float32 if rng.random() < 0.75 else np.float64
    spec = ConvSpec(ci, co, k, s, pad, bool(rng.random() < 0.5))
    params = ConvParams(rng.standard_normal(spec.weight_shape()).astype(dtype),
                        rng.standard_normal(co).astype(dtype) if spec.has_bias else None)
    x = rng.standard_normal((n, ci, h, w)).astype(dtype)
    return x, spec, params


def fuzz_conv(cases=200, seed=0):
    """Compare every available conv path to the oracle; returns failures."""
    rng = np.random.default_rng(seed)
    paths = [("numpy", False, False)]
    if _backend.NUMBA_AVAILABLE:
        paths += [("numba", True, False), ("numba-parallel", True, True)]
    failures = []
    for case in range(cases):
        x, spec, params = _fuzz_conv_case(rng)
        ref = conv_oracle(x, spec, params)
        ho, wo = spec.out_hw(x.shape[2], x.shape[3])
        for name, use_numba, parallel in paths:
            out = np.empty((x.shape[0], spec.out_channels, ho, wo), dtype=x.dtype)
            _kernels.conv_forward(x, params.weights, params.bias, spec.stride, spec.padding, spec.has_bias,
                                  out, use_numba=use_numba, parallel=parallel)
            if not np.array_equal(out, ref):
                failures.append(f"case {case} {name} {spec}")
        public = T.conv2d_forward(x, spec, params)
        if not np.array_equal(public, ref):
            failures.append(f"case {case} conv2d_forward {spec}")
    return failures


def run_kernels(seed=0, cases=200) -> list:
    rng = np.random.default_rng(seed)
    results = []
    fails = fuzz_conv(cases, seed)
    results.append(CheckResult("kernels", f"conv2d fuzz x{cases}", not fails, "; ".join(fails[:3])))
    a = rng.standard_normal((2, 3, 5, 4)).astype(np.float32)
    b = rng.standard_normal((2, 5, 5, 4)).astype(np.float32)
    results.append(CheckResult("kernels", "concat", np.array_equal(T.concat_channels([a, b]), concat_oracle([a, b]))))
    x = rng.standard_normal((2, 3, 9, 7)).astype(np.float32)
    x[0, 0, 2, 2] = x[0, 0, 2, 3]  # a tie
    results.append(CheckResult("kernels", "maxpool", np.array_equal(T.maxpool2d(x)[0], maxpool_oracle(x))))
    results.append(CheckResult("kernels", "upsample", np.array_equal(T.upsample_nearest_2x(x), upsample_oracle(x))))
    results.append(CheckResult("kernels", "add", np.array_equal(T.add(a, a[:, ::-1].copy()), add_oracle(a, a[:, ::-1]))))
    return results


def _bn_params(rng, c):
    return BatchNormParams(rng.uniform(0.5, 1.5, c), rng.uniform(-0.5, 0.5, c),
                           rng.uniform(-0.5, 0.5, c), rng.uniform(0.5, 2.0, c))


def primitive_grad_errors(seed=0) -> dict:
    """``{op_name: max_rel_err}`` for every primitive backward."""
    rng = np.random.default_rng(seed)
    errs = {}
    for k, s, bias in [(1, 1, True), (3, 1, False), (3, 2, True), (5, 1, False), (6, 2, True)]:
        spec = ConvSpec(3, 4, k, s, None if k != 6 else 2, bias)
        params = ConvParams(rng.standard_normal(spec.weight_shape()), rng.standard_normal(4) if bias else None)
        x = rng.standard_normal((2, 3, 8, 8))
        inputs = [x, params.weights] + ([params.bias] if bias else [])
        errs[f"conv2d k{k} s{s}{' bias' if bias else ''}"] = check_function_grad(
            lambda *_: T.conv2d_forward(x, spec, params),
            lambda g: T.conv2d_backward(x, spec, params, g),
            inputs, seed=seed)
    x = rng.standard_normal((3, 4, 5, 5))
    for mode in ("train", "eval"):
        bp = _bn_params(rng, 4)
        errs[f"batchnorm {mode}"] = check_function_grad(
            lambda *_: T.batchnorm_forward(x, bp, mode)[0],
            lambda g: T.batchnorm_backward(g, T.batchnorm_forward(x, bp, mode)[1]),
            [x, bp.gamma, bp.beta], seed=seed)
    errs["silu"] = check_function_grad(T.silu, lambda g: [T.silu_backward(x, g)], [x], seed=seed)
    y = rng.standard_normal((3, 2, 5, 5))
    errs["concat"] = check_function_grad(lambda a, b: T.concat_channels([a, b]),
                                         lambda g: T.split_channels(g, [4, 2]), [x, y], seed=seed)
    z = rng.standard_normal(x.shape)
    errs["add"] = check_function_grad(T.add, T.add_backward, [x, z], seed=seed)
    errs["maxpool"] = check_function_grad(lambda a: T.maxpool2d(a)[0],
                                          lambda g: [T.maxpool2d_backward(g, T.maxpool2d(x)[1])], [x], seed=seed)
    errs["upsample"] = check_function_grad(T.upsample_nearest_2x, lambda g: [T.upsample_nearest_2x_backward(g)],
                                           [x], seed=seed)
    return errs


def block_grad_errors(seed=0) -> dict:
    """``{block_name: max_rel_err}`` over parameters and inputs of each block."""
    from yolocs.nn import C3, CBS, DCFS, SPPF, Bottleneck, HeadADH, HeadConfig, HeadCoupled, HeadDH

    rng = np.random.default_rng(seed)
    d = np.float64
    x = rng.standard_normal((2, 8, 8, 8))
    blocks = {
        "CBS": CBS(8, 8, 3, rng=rng, dtype=d),
        "Bottleneck": Bottleneck(8, True, rng=rng, dtype=d),
        "C3": C3(8, 8, 2, rng=rng, dtype=d),
        "DCFS[OCJ]": DCFS(8, 8, 3, True, "OCJ", rng=rng, dtype=d),
        "DCFS[PerBranchBN3x3]": DCFS(8, 8, 3, True, "PerBranchBN3x3", rng=rng, dtype=d),
        "DCFS[Conv1x1]": DCFS(8, 8, 3, True, "Conv1x1", rng=rng, dtype=d),
        "SPPF": SPPF(8, 8, rng=rng, dtype=d),
    }
    errs = {name: max(check_module_grad(b, x.copy(), seed=seed).values()) for name, b in blocks.items()}
    levels = [rng.standard_normal((2, 4, 8, 8)), rng.standard_normal((2, 8, 4, 4)), rng.standard_normal((2, 16, 2, 2))]
    heads = {
        "Detect": HeadCoupled([4, 8, 16], 2, 3, rng=rng, dtype=d),
        "DH": HeadDH([4, 8, 16], 2, 3, 16, rng=rng, dtype=d),
        "ADH": HeadADH(HeadConfig(2, 3, [4, 8, 16], 16, [16, 8, 4]), rng=rng, dtype=d),
    }
    for name, h in heads.items():
        errs[name] = max(check_module_grad(h, [lv.copy() for lv in levels], seed=seed).values())
    return errs


def loss_grad_errors(seed=0) -> dict:
    rng = np.random.default_rng(seed)
    errs = {}
    p = np.c_[rng.uniform(0, 2, (6, 2)), rng.uniform(0.5, 2, (6, 2))]
    g = np.c_[rng.uniform(0, 2, (6, 2)), rng.uniform(0.5, 2, (6, 2))]
    alpha = ciou_terms(p, g)[2]
    errs["ciou"] = relative_error(ciou_with_grad(p, g)[1],
                                  finite_diff_grad(lambda t: ciou_with_grad(t, g, alpha=alpha)[0].sum(), p.copy()))
    x, t = rng.standard_normal(10), rng.uniform(0, 1, 10)
    errs["bce"] = relative_error(bce_with_logits(x, t, 1.7)[1],
                                 finite_diff_grad(lambda v: bce_with_logits(v, t, 1.7)[0], x.copy()))
    m = _random_matched(rng)
    tg = objectness_targets(m)
    res = total_loss(m, obj_targets=tg)
    frozen = ciou_terms(m.pred_boxes, m.gt_boxes)[2]

    def f(_):
        return total_loss(m, obj_targets=tg, alpha=frozen).total

    errs["total_loss"] = max(
        relative_error(res.grad_pred_boxes, finite_diff_grad(f, m.pred_boxes)),
        relative_error(res.grad_cls_logits, finite_diff_grad(f, m.pred_cls_logits)),
        *[relative_error(a, finite_diff_grad(f, o)) for a, o in zip(res.grad_obj_logits, m.obj_logits)])
    return errs


def _random_matched(rng, levels=((2, 3, 4, 4), (2, 3, 2, 2)), n_pos=4, nc=3) -> MatchedBatch:
    obj = [rng.standard_normal(s) for s in levels]
    idx = set()
    while len(idx) < n_pos:
        lvl = int(rng.integers(len(levels)))
        s = levels[lvl]
        idx.add((lvl, *(int(rng.integers(d)) for d in s)))
    idx = sorted(idx)
    pred = np.c_[rng.uniform(0, 2, (n_pos, 2)), rng.uniform(0.5, 2, (n_pos, 2))]
    gt = pred + np.c_[rng.uniform(-0.3, 0.3, (n_pos, 2)), rng.uniform(-0.2, 0.2, (n_pos, 2))]
    cls = np.eye(nc)[rng.integers(nc, size=n_pos)]
    return MatchedBatch(pred, gt, rng.standard_normal((n_pos, nc)), cls, obj, idx)


GRAD_TOL = 1e-4


def run_gradients(seed=0) -> list:
    results = []
    for group, errs in (("primitive", primitive_grad_errors(seed)), ("block", block_grad_errors(seed)),
                        ("loss", loss_grad_errors(seed))):
        for name, err in errs.items():
            results.append(CheckResult("gradients", f"{group} {name}", err <= GRAD_TOL, f"max rel err {err:.2e}"))
    return results


def run_receptive_field(seed=0) -> list:
    from yolocs.nn import DCFS, Bottleneck, Conv2d

    rng = np.random.default_rng(seed)
    d = np.float64
    px = (7, 7)
    results = []
    c1 = receptive_field_probe(Conv2d(8, 8, 1, rng=rng, dtype=d), px, seed=seed)
    results.append(CheckResult("receptive-field", "1x1 conv", c1 == {px}, f"{len(c1)} positions"))
    c3 = receptive_field_probe(Conv2d(8, 8, 3, rng=rng, dtype=d), px, seed=seed)
    hood = {(px[0] + dy, px[1] + dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)}
    results.append(CheckResult("receptive-field", "3x3 conv", c3 == hood, f"{len(c3)} positions"))
    bott = Bottleneck(8, True, rng=rng, dtype=d).eval()
    dcfs = DCFS(8, 8, 3, True, rng=rng, dtype=d).eval()
    rb = probe_radius(receptive_field_probe(bott, px, seed=seed), px)
    rd = probe_radius(receptive_field_probe(dcfs.forward_main_path, px, seed=seed), px)
    results.append(CheckResult("receptive-field", "DCFS main path vs bottleneck", rd > rb,
                               f"radius {rd} vs {rb}"))
    return results


SUITES = {
    "kernels": run_kernels,
    "gradients": run_gradients,
    "receptive-field": run_receptive_field,
}


def run_suite(name: str, seed=0) -> list:
    if name == "all":
        return [r for fn in SUITES.values() for r in fn(seed=seed)]
    if name not in SUITES:
        raise KeyError(name)
    return SUITES[name](seed=seed)
