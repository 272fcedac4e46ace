"""Detection losses: CIoU box regression, BCE classification and BCE objectness.

Box and class terms see matched positives only; the objectness term sees
every grid cell of every level, with CIoU-valued targets at positives and
zero elsewhere. Gradients are computed analytically. The CIoU trade-off
weight ``alpha`` and the objectness targets are treated as constants.
"""

import math
from dataclasses import dataclass, field

import numpy as np

_V_SCALE = 4.0 / math.pi**2


@dataclass(frozen=True)
class BoxXYWH:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive, got w={self.w}, h={self.h}")

    def as_array(self):
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


def _as_boxes(boxes) -> np.ndarray:
    if isinstance(boxes, BoxXYWH):
        return boxes.as_array()[None]
    if isinstance(boxes, (list, tuple)) and boxes and isinstance(boxes[0], BoxXYWH):
        return np.stack([b.as_array() for b in boxes])
    arr = np.asarray(boxes, dtype=np.float64)
    return arr.reshape(-1, 4)


def _rows(a, n):
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        return a.reshape(n, a.shape[-1] if a.ndim == 2 else 0)
    return a.reshape(n, -1)


@dataclass
class MatchedBatch:
    """Positives and the full objectness grids for one batch.

    ``pred_boxes``/``gt_boxes`` are ``(N, 4)`` cx,cy,w,h arrays (or lists of
    :class:`BoxXYWH`), ``pred_cls_logits``/``gt_cls`` are ``(N, nc)``,
    ``obj_logits`` is a list of per-level ``(n, na, h, w)`` arrays and
    ``positive_indices`` is ``(N, 5)`` rows of ``(level, image, anchor, gy, gx)``.
    """

    pred_boxes: np.ndarray
    gt_boxes: np.ndarray
    pred_cls_logits: np.ndarray
    gt_cls: np.ndarray
    obj_logits: list
    positive_indices: np.ndarray

    def __post_init__(self):
        self.pred_boxes = _as_boxes(self.pred_boxes)
        self.gt_boxes = _as_boxes(self.gt_boxes)
        n = len(self.pred_boxes)
        self.pred_cls_logits = _rows(self.pred_cls_logits, n)
        self.gt_cls = _rows(self.gt_cls, n)
        self.positive_indices = np.asarray(self.positive_indices, dtype=np.int64).reshape(-1, 5)
        if len(self.gt_boxes) != n or len(self.positive_indices) != n or self.gt_cls.shape != self.pred_cls_logits.shape:
            raise ValueError("matched predictions, targets and indices must be aligned")
        if len({tuple(r) for r in self.positive_indices.tolist()}) != n:
            raise ValueError("positive indices must be unique")

    @property
    def num_positives(self) -> int:
        return len(self.pred_boxes)


@dataclass
class LossConfig:
    w_cls: float = 1.0
    w_obj: float = 1.0
    box_gain: float = 0.05
    cls_gain: float = 0.5
    obj_gain: float = 1.0
    balance: tuple = (4.0, 1.0, 0.4)

    def __post_init__(self):
        vals = [self.w_cls, self.w_obj, self.box_gain, self.cls_gain, self.obj_gain, *self.balance]
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be non-negative")


def ciou_terms(pred, gt):
    """Vectorized CIoU over aligned ``(N, 4)`` box arrays.

    Returns ``(ciou, iou, alpha)``. ``alpha`` is 0 wherever ``v`` is 0.
    """
    p, g = _as_boxes(pred), _as_boxes(gt)
    if np.any(p[:, 2:] <= 0) or np.any(g[:, 2:] <= 0):
        raise ValueError("box extents must be positive")
    return _ciou_forward(p, g)[:3]


def _ciou_forward(p, g):
    px1, px2 = p[:, 0] - p[:, 2] / 2, p[:, 0] + p[:, 2] / 2
    py1, py2 = p[:, 1] - p[:, 3] / 2, p[:, 1] + p[:, 3] / 2
    gx1, gx2 = g[:, 0] - g[:, 2] / 2, g[:, 0] + g[:, 2] / 2
    gy1, gy2 = g[:, 1] - g[:, 3] / 2, g[:, 1] + g[:, 3] / 2
    ix = np.minimum(px2, gx2) - np.maximum(px1, gx1)
    iy = np.minimum(py2, gy2) - np.maximum(py1, gy1)
    iw, ih = np.maximum(ix, 0.0), np.maximum(iy, 0.0)
    inter = iw * ih
    # areas from the same corner differences as the overlap, so a box
    # compared with itself gives inter == union and IoU == 1 exactly
    union = (px2 - px1) * (py2 - py1) + (gx2 - gx1) * (gy2 - gy1) - inter
    iou = inter / union
    cw = np.maximum(px2, gx2) - np.minimum(px1, gx1)
    ch = np.maximum(py2, gy2) - np.minimum(py1, gy1)
    c2 = cw**2 + ch**2
    rho2 = (p[:, 0] - g[:, 0]) ** 2 + (p[:, 1] - g[:, 1]) ** 2
    dang = np.arctan(g[:, 2] / g[:, 3]) - np.arctan(p[:, 2] / p[:, 3])
    v = _V_SCALE * dang**2
    with np.errstate(invalid="ignore", divide="ignore"):
        alpha = np.where(v > 0, v / ((1.0 - iou) + v), 0.0)
    ciou = iou - rho2 / c2 - alpha * v
    cache = (px1, px2, py1, py2, gx1, gx2, gy1, gy2, ix, iy, iw, ih, inter, union, cw, ch, c2, rho2, dang)
    return ciou, iou, alpha, cache


def ciou(a, b) -> float:
    """CIoU of two boxes; ``1.0`` exactly for identical boxes."""
    return float(ciou_terms(a, b)[0][0])


def ciou_with_grad(pred, gt, alpha=None):
    """CIoU and its gradient w.r.t. the predicted ``(cx, cy, w, h)``.

    ``alpha`` is held constant; pass it explicitly to freeze it at a given
    value (finite-difference checks do this).
    """
    p, g = _as_boxes(pred), _as_boxes(gt)
    if np.any(p[:, 2:] <= 0) or np.any(g[:, 2:] <= 0):
        raise ValueError("box extents must be positive")
    c, iou, a, cache = _ciou_forward(p, g)
    if alpha is not None:
        a = np.broadcast_to(np.asarray(alpha, dtype=np.float64), c.shape)
        c = iou - cache[17] / cache[16] - a * _V_SCALE * cache[18] ** 2
    (px1, px2, py1, py2, gx1, gx2, gy1, gy2, ix, iy, iw, ih, inter, union, cw, ch, c2, rho2, dang) = cache
    pw, ph = p[:, 2], p[:, 3]

    # d inter / d corners
    ovx, ovy = ix > 0, iy > 0
    d_ix_px2, d_ix_px1 = np.where(ovx & (px2 < gx2), 1.0, 0.0), np.where(ovx & (px1 > gx1), -1.0, 0.0)
    d_iy_py2, d_iy_py1 = np.where(ovy & (py2 < gy2), 1.0, 0.0), np.where(ovy & (py1 > gy1), -1.0, 0.0)
    # IoU = I / U with U = Ap + Ag - I  =>  dIoU = dI (U + I) / U^2 - dAp I / U^2
    k_i = (union + inter) / union**2
    k_a = -inter / union**2
    g_px1 = k_i * ih * d_ix_px1
    g_px2 = k_i * ih * d_ix_px2
    g_py1 = k_i * iw * d_iy_py1
    g_py2 = k_i * iw * d_iy_py2
    g_w = k_a * (py2 - py1)
    g_h = k_a * (px2 - px1)

    # -rho2 / c2
    inv_c2 = 1.0 / c2
    g_cx = -2.0 * (p[:, 0] - g[:, 0]) * inv_c2
    g_cy = -2.0 * (p[:, 1] - g[:, 1]) * inv_c2
    k_c = rho2 * inv_c2**2 * 2.0  # d(-rho2/c2)/d c2 * d c2/d cw = rho2/c2^2 * 2cw
    g_px2 += k_c * cw * (px2 > gx2)
    g_px1 -= k_c * cw * (px1 < gx1)
    g_py2 += k_c * ch * (py2 > gy2)
    g_py1 -= k_c * ch * (py1 < gy1)

    # -alpha * v with alpha constant
    k_v = -a * _V_SCALE * 2.0 * dang * -1.0
    denom = pw**2 + ph**2
    g_w += k_v * ph / denom
    g_h += k_v * -pw / denom

    grad = np.stack([g_cx + g_px1 + g_px2, g_cy + g_py1 + g_py2,
                     g_w + (g_px2 - g_px1) / 2, g_h + (g_py2 - g_py1) / 2], axis=1)
    return c, grad


def bce_with_logits(logits, targets, pos_weight=1.0):
    """Mean binary cross-entropy on logits and its gradient.

    ``loss = -[w t log s(x) + (1 - t) log(1 - s(x))]`` evaluated with
    ``log(1 + e^x)`` in its overflow-safe form.
    """
    x = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if x.size == 0:
        return 0.0, np.zeros_like(x)
    sp_pos = np.logaddexp(0.0, x)  # -log(1 - s(x))
    sp_neg = np.logaddexp(0.0, -x)  # -log s(x)
    loss = float(np.mean(pos_weight * t * sp_neg + (1.0 - t) * sp_pos))
    s = np.exp(-sp_neg)
    grad = (pos_weight * t * (s - 1.0) + (1.0 - t) * s) / x.size
    return loss, grad


def objectness_targets(matched: MatchedBatch, pred_boxes=None) -> list:
    """Per-level target grids: clamped CIoU at positives, zero elsewhere."""
    grids = [np.zeros(np.shape(o), dtype=np.float64) for o in matched.obj_logits]
    if matched.num_positives == 0:
        return grids
    pb = matched.pred_boxes if pred_boxes is None else _as_boxes(pred_boxes)
    vals = np.clip(ciou_terms(pb, matched.gt_boxes)[0], 0.0, 1.0)
    for (lvl, b, a, y, x), v in zip(matched.positive_indices.tolist(), vals):
        if not 0 <= lvl < len(grids):
            raise IndexError(f"positive index level {lvl} out of range")
        grid = grids[lvl]
        if not (0 <= b < grid.shape[0] and 0 <= a < grid.shape[1] and 0 <= y < grid.shape[2] and 0 <= x < grid.shape[3]):
            raise IndexError(f"positive index {(lvl, b, a, y, x)} outside grid {grid.shape}")
        grid[b, a, y, x] = v
    return grids


@dataclass
class LossResult:
    total: float
    box: float
    cls: float
    obj: float
    grad_pred_boxes: np.ndarray
    grad_cls_logits: np.ndarray
    grad_obj_logits: list = field(default_factory=list)


def total_loss(matched: MatchedBatch, cfg: LossConfig | None = None, obj_targets=None, alpha=None) -> LossResult:
    """Weighted sum of box, class and objectness losses with gradients.

    ``obj_targets`` and ``alpha`` override the two detached quantities (the
    objectness targets and the CIoU trade-off weight); by default both are
    computed from the current predictions.
    """
    cfg = cfg or LossConfig()
    n = matched.num_positives
    if len(matched.obj_logits) > len(cfg.balance):
        raise ValueError(f"{len(matched.obj_logits)} levels but only {len(cfg.balance)} balance weights")
    if n:
        c, dc = ciou_with_grad(matched.pred_boxes, matched.gt_boxes, alpha=alpha)
        lbox = float(np.mean(1.0 - c))
        g_box = -dc / n * cfg.box_gain
        lcls, g_cls = bce_with_logits(matched.pred_cls_logits, matched.gt_cls, cfg.w_cls)
        g_cls = g_cls * cfg.cls_gain
    else:
        lbox, lcls = 0.0, 0.0
        g_box = np.zeros((0, 4))
        g_cls = np.zeros_like(matched.pred_cls_logits)
    targets = obj_targets if obj_targets is not None else objectness_targets(matched)
    lobj, g_obj = 0.0, []
    for logits, tgt, bal in zip(matched.obj_logits, targets, cfg.balance):
        l, g = bce_with_logits(logits, tgt, cfg.w_obj)
        lobj += bal * l
        g_obj.append(g * bal * cfg.obj_gain)
    total = cfg.box_gain * lbox + cfg.cls_gain * lcls + cfg.obj_gain * lobj
    return LossResult(total, lbox, lcls, lobj, g_box, g_cls, g_obj)


# ---- bridge between raw head maps and matched batches ---------------------


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def assign_targets(targets, anchors_grid, strides, shapes):
    """Nearest-cell assignment of ground-truth boxes to head cells.

    ``targets`` holds, per image, rows ``(cls, cx, cy, w, h)`` in pixels.
    Each box goes to the level/anchor pair whose anchor shape is closest in
    log-ratio, at the cell holding its center. Collisions keep the first box.
    Returns ``(indices (N,5), classes (N,), gt_boxes_grid (N,4))``.
    """
    idx, classes, boxes, seen = [], [], [], set()
    for b, rows in enumerate(targets):
        for row in np.asarray(rows, dtype=np.float64).reshape(-1, 5):
            cls_id, cx, cy, w, h = row
            best = None
            for lvl, (anc, s) in enumerate(zip(anchors_grid, strides)):
                for a, (aw, ah) in enumerate(anc):
                    score = max(abs(math.log(w / s / aw)), abs(math.log(h / s / ah)))
                    if best is None or score < best[0]:
                        best = (score, lvl, a)
            _, lvl, a = best
            s = strides[lvl]
            _, _, hh, ww = shapes[lvl]
            gx, gy = min(int(cx / s), ww - 1), min(int(cy / s), hh - 1)
            key = (lvl, b, a, gy, gx)
            if key in seen:
                continue
            seen.add(key)
            idx.append(key)
            classes.append(int(cls_id))
            boxes.append((cx / s, cy / s, w / s, h / s))
    return (np.asarray(idx, dtype=np.int64).reshape(-1, 5), np.asarray(classes, dtype=np.int64),
            np.asarray(boxes, dtype=np.float64).reshape(-1, 4))


class DetectionLoss:
    """Loss over raw head maps ``(n, na*(5+nc), h, w)`` per level.

    Boxes decode as ``xy = 2 sigmoid(t) - 0.5 + cell`` and
    ``wh = (2 sigmoid(t))^2 * anchor``, all in grid units of the level.
    """

    def __init__(self, anchors_grid, strides, num_classes, cfg: LossConfig | None = None):
        self.anchors = [np.asarray(a, dtype=np.float64).reshape(-1, 2) for a in anchors_grid]
        self.strides = list(strides)
        self.nc = num_classes
        self.cfg = cfg or LossConfig()

    def match(self, outputs, targets):
        na, no = len(self.anchors[0]), 5 + self.nc
        maps = [np.asarray(o, dtype=np.float64).reshape(o.shape[0], na, no, o.shape[2], o.shape[3]) for o in outputs]
        idx, classes, gt = assign_targets(targets, self.anchors, self.strides, [o.shape for o in outputs])
        raw = np.stack([maps[l][b, a, :, y, x] for l, b, a, y, x in idx.tolist()]) if len(idx) else np.zeros((0, no))
        sig = _sigmoid(raw[:, :4])
        grid_xy = idx[:, [4, 3]].astype(np.float64)
        anc = np.stack([self.anchors[l][a] for l, _, a, _, _ in idx.tolist()]) if len(idx) else np.zeros((0, 2))
        pred = np.concatenate([2 * sig[:, :2] - 0.5 + grid_xy, (2 * sig[:, 2:]) ** 2 * anc], axis=1)
        onehot = np.zeros((len(idx), self.nc))
        onehot[np.arange(len(idx)), classes] = 1.0
        matched = MatchedBatch(pred, gt, raw[:, 5:], onehot, [m[:, :, 4] for m in maps], idx)
        return matched, (maps, sig, anc)

    def __call__(self, outputs, targets):
        """Returns ``(LossResult, per-level gradients shaped like outputs)``."""
        matched, (maps, sig, anc) = self.match(outputs, targets)
        res = total_loss(matched, self.cfg)
        grads = [np.zeros_like(m) for m in maps]
        for lvl, g in enumerate(res.grad_obj_logits):
            grads[lvl][:, :, 4] = g
        if matched.num_positives:
            dsig = sig * (1 - sig)
            d_xy = res.grad_pred_boxes[:, :2] * 2 * dsig[:, :2]
            d_wh = res.grad_pred_boxes[:, 2:] * 8 * sig[:, 2:] * dsig[:, 2:] * anc
            for k, (l, b, a, y, x) in enumerate(matched.positive_indices.tolist()):
                grads[l][b, a, :2, y, x] += d_xy[k]
                grads[l][b, a, 2:4, y, x] += d_wh[k]
                grads[l][b, a, 5:, y, x] += res.grad_cls_logits[k]
        out_grads = [g.reshape(o.shape).astype(o.dtype) for g, o in zip(grads, outputs)]
        return res, out_grads
