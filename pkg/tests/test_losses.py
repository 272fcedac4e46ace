import math

from hypothesis import given, settings, strategies as st
import numpy as np
import pytest

from yolocs.losses import (
    BoxXYWH,
    DetectionLoss,
    LossConfig,
    MatchedBatch,
    bce_with_logits,
    ciou,
    ciou_terms,
    ciou_with_grad,
    objectness_targets,
    total_loss,
)
from yolocs.verify import ciou_reference, finite_diff_grad, loss_grad_errors, relative_error

box = st.tuples(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.1, 5), st.floats(0.1, 5))


def test_ciou_identical_is_one():
    assert ciou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert ciou(BoxXYWH(3.3, -1.7, 0.7, 4.1), BoxXYWH(3.3, -1.7, 0.7, 4.1)) == 1.0


def test_ciou_disjoint_against_reference():
    got = ciou((0, 0, 2, 2), (4, 0, 2, 2))
    assert abs(got - ciou_reference((0, 0, 2, 2), (4, 0, 2, 2))) <= 1e-9
    assert abs(got - (-0.4)) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(box, box)
def test_ciou_matches_reference_and_bounds(a, b):
    got = ciou(a, b)
    assert abs(got - ciou_reference(a, b)) <= 1e-9
    assert -1.0 < got <= 1.0
    assert 0.0 <= 1.0 - got < 2.0


@settings(max_examples=40, deadline=None)
@given(box, box, st.floats(0.1, 10))
def test_iou_symmetric_and_ciou_scale_invariant(a, b, s):
    iab, iba = ciou_terms(a, b)[1][0], ciou_terms(b, a)[1][0]
    assert iab == pytest.approx(iba, abs=1e-12)
    scaled = lambda t: tuple(v * s for v in t)
    assert ciou(scaled(a), scaled(b)) == pytest.approx(ciou(a, b), abs=1e-9)


def test_ciou_rejects_non_positive_extent():
    with pytest.raises(ValueError):
        ciou((0, 0, 0, 1), (0, 0, 1, 1))
    with pytest.raises(ValueError):
        BoxXYWH(0, 0, -1, 1)


def test_ciou_gradient_finite_difference():
    rng = np.random.default_rng(0)
    p = np.c_[rng.uniform(0, 2, (10, 2)), rng.uniform(0.5, 2, (10, 2))]
    g = np.c_[rng.uniform(0, 2, (10, 2)), rng.uniform(0.5, 2, (10, 2))]
    alpha = ciou_terms(p, g)[2]
    num = finite_diff_grad(lambda t: np.sum(1 - ciou_with_grad(t, g, alpha=alpha)[0]), p.copy())
    assert relative_error(-ciou_with_grad(p, g)[1], num) <= 1e-4
    # equal aspect ratios: v is flat there, so freezing alpha changes nothing
    q = np.array([[0.3, 0.1, 1.0, 2.0]])
    t = np.array([[0.5, -0.2, 1.5, 3.0]])
    num = finite_diff_grad(lambda z: ciou_with_grad(z, t)[0].sum(), q.copy())
    assert relative_error(ciou_with_grad(q, t)[1], num) <= 1e-4


def test_bce_values():
    assert abs(bce_with_logits(0.0, 0.5)[0] - math.log(2)) <= 1e-9
    assert bce_with_logits(1e4, 1.0)[0] < 1e-12
    assert math.isfinite(bce_with_logits(-1e4, 1.0)[0])
    rng = np.random.default_rng(1)
    x, t = rng.standard_normal(50), rng.uniform(0, 1, 50)
    w = 2.5
    s = 1 / (1 + np.exp(-x))
    direct = np.mean(-(t * np.log(s) * w + (1 - t) * np.log(1 - s)))
    assert bce_with_logits(x, t, w)[0] == pytest.approx(direct, rel=1e-12)


def _batch(n_pos=2):
    obj = [np.zeros((1, 3, 4, 4)), np.zeros((1, 3, 2, 2))]
    idx = [(0, 0, 1, 2, 3), (1, 0, 0, 1, 1)][:n_pos]
    pred = [(1.0, 1.0, 1.0, 1.0), (0.5, 0.5, 1.0, 2.0)][:n_pos]
    gt = [(1.2, 1.0, 1.0, 1.0), (0.5, 0.5, 1.0, 2.0)][:n_pos]
    return MatchedBatch(np.array(pred).reshape(-1, 4), np.array(gt).reshape(-1, 4),
                        np.zeros((n_pos, 2)), np.tile([1.0, 0.0], (n_pos, 1)), obj, idx)


def test_objectness_targets():
    zero = objectness_targets(_batch(0))
    assert all(not g.any() for g in zero)
    m = _batch()
    t = objectness_targets(m)
    assert t[1][0, 0, 1, 1] == 1.0
    assert t[0][0, 1, 2, 3] == pytest.approx(ciou_reference((1.0, 1.0, 1.0, 1.0), (1.2, 1.0, 1.0, 1.0)), abs=1e-12)
    assert np.count_nonzero(t[0]) + np.count_nonzero(t[1]) == 2


def test_objectness_targets_clamp_and_range():
    m = MatchedBatch([[0, 0, 1, 1]], [[9, 9, 1, 1]], [[0.0]], [[1.0]], [np.zeros((1, 1, 2, 2))], [(0, 0, 0, 1, 1)])
    assert objectness_targets(m)[0][0, 0, 1, 1] == 0.0  # negative CIoU clamps to 0
    bad = MatchedBatch([[0, 0, 1, 1]], [[0, 0, 1, 1]], [[0.0]], [[1.0]], [np.zeros((1, 1, 2, 2))], [(0, 0, 0, 5, 1)])
    with pytest.raises(IndexError):
        objectness_targets(bad)
    with pytest.raises(ValueError):
        MatchedBatch([[0, 0, 1, 1]] * 2, [[0, 0, 1, 1]] * 2, [[0.0]] * 2, [[1.0]] * 2,
                     [np.zeros((1, 1, 2, 2))], [(0, 0, 0, 1, 1)] * 2)


def test_total_loss_zero_positives_isolates_obj():
    m = _batch(0)
    m.obj_logits = [np.full((1, 3, 4, 4), 0.3), np.full((1, 3, 2, 2), -0.2)]
    cfg = LossConfig()
    res = total_loss(m, cfg)
    expect = cfg.obj_gain * (cfg.balance[0] * math.log1p(math.exp(0.3)) + cfg.balance[1] * math.log1p(math.exp(-0.2)))
    assert res.total == pytest.approx(expect, rel=1e-12)
    assert res.box == 0 and res.cls == 0
    assert res.grad_pred_boxes.size == 0 and not res.grad_cls_logits.any()
    assert all(g.any() for g in res.grad_obj_logits)


def test_total_loss_perfect_prediction():
    m = _batch()
    m.pred_cls_logits = np.array([[30.0, -30.0], [30.0, -30.0]])
    t = objectness_targets(m)
    # saturate toward the targets; the partial-overlap cell has target < 1 so match it exactly
    m.obj_logits = [np.where(g > 0, np.log(np.maximum(g, 1e-300) / np.maximum(1 - g, 1e-300)), -30.0) for g in t]
    m.obj_logits[1][0, 0, 1, 1] = 30.0
    m.pred_boxes = m.gt_boxes.copy()
    m.obj_logits[0][0, 1, 2, 3] = 30.0
    res = total_loss(m)
    assert res.total < 1e-3
    assert res.total >= 0


def test_total_loss_gradients():
    errs = loss_grad_errors(seed=4)
    assert max(errs.values()) <= 1e-4, errs


def test_detection_loss_gradients_through_decode():
    rng = np.random.default_rng(2)
    anchors = [np.array([[1.0, 1.5], [2.0, 1.0]]), np.array([[1.5, 1.5], [3.0, 2.0]])]
    loss = DetectionLoss(anchors, [8, 16], 2, LossConfig(balance=(4.0, 1.0)))
    outs = [rng.standard_normal((2, 14, 4, 4)), rng.standard_normal((2, 14, 2, 2))]
    targets = [np.array([[0, 12.0, 9.0, 10.0, 14.0], [1, 20.0, 20.0, 24.0, 16.0]]), np.array([[1, 5.0, 25.0, 8.0, 8.0]])]
    res, grads = loss(outs, targets)
    matched, _ = loss.match(outs, targets)
    frozen_t = objectness_targets(matched)
    frozen_a = ciou_terms(matched.pred_boxes, matched.gt_boxes)[2]

    def f(_):
        m, _ = loss.match(outs, targets)
        return total_loss(m, loss.cfg, obj_targets=frozen_t, alpha=frozen_a).total

    for o, g in zip(outs, grads):
        idx = np.flatnonzero(np.abs(g) > 0)
        pick = rng.choice(idx, min(12, idx.size), replace=False).tolist()
        num = finite_diff_grad(f, o, indices=pick)
        assert relative_error(g.reshape(-1)[pick], num.reshape(-1)[pick]) <= 1e-4


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(box_gain=-1)
