import json

import numpy as np
import pytest

from carflow.evaluation import (METRIC_NAMES, CameraIntrinsics, EmptyMaskError, MetricsAccumulator,
                                MetricsReport, metrics_2d, metrics_3d, multiscale_loss)
from carflow.network import PAPER_LOSS_WEIGHTS
from carflow.tensor import Tensor

LEVEL_SIZES = (4, 16, 64, 128)      # coarsest first, desk scale


def uniform_error_loss(eps, weights=PAPER_LOSS_WEIGHTS, n=512, seed=0, zero_gt=False):
    """Loss when every prediction at every level is off by exactly ``eps``."""
    rng = np.random.default_rng(seed)
    gt = np.zeros((1, n, 3)) if zero_gt else rng.normal(scale=0.2, size=(1, n, 3))
    idx = [np.sort(rng.choice(n, s, replace=False))[None] for s in LEVEL_SIZES]
    step = np.array([eps, 0.0, 0.0])
    preds = [Tensor(gt[0][i[0]][None] + step) for i in idx]
    return float(multiscale_loss(preds, gt, idx, tuple(reversed(weights))).data)


def ulps(a, b):
    return abs(a - b) / np.spacing(abs(b))


def test_paper_weights_sum_to_three():
    assert ulps(sum(PAPER_LOSS_WEIGHTS), 3.0) <= 1


@pytest.mark.parametrize("eps", [0.5, 0.25, 0.125, 0.0625])
def test_dyadic_weights_sum_exactly(eps):
    # binary-exact weights leave no rounding anywhere: the loss is the weight sum times eps
    assert uniform_error_loss(eps, weights=(0.125, 0.25, 0.5, 1.0), zero_gt=True) == 1.875 * eps


@pytest.mark.parametrize("eps", [0.5, 0.1, 0.037, 0.01, 0.3])
def test_uniform_error_gives_three_eps(eps):
    # 0.2, 0.4, 0.8, 1.6 are not binary fractions, so a few ulps of rounding remain
    assert ulps(uniform_error_loss(eps, zero_gt=True), 3.0 * eps) <= 4


@pytest.mark.parametrize("eps", [0.01, 0.037, 0.3])
def test_uniform_error_on_random_gt(eps):
    assert uniform_error_loss(eps) == pytest.approx(3.0 * eps, rel=1e-12)


def test_loss_level_count_mismatch_raises():
    with pytest.raises(ValueError):
        multiscale_loss([Tensor(np.zeros((1, 2, 3)))], np.zeros((1, 4, 3)), [np.array([[0, 1]])], (1.0, 2.0))


def test_loss_respects_mask():
    gt = np.zeros((1, 4, 3))
    pred = Tensor(np.array([[[1.0, 0, 0], [2.0, 0, 0], [0, 0, 0], [0, 0, 0]]]))
    mask = np.array([[True, False, True, True]])
    loss = multiscale_loss([pred], gt, [np.arange(4)[None]], (1.0,), mask=mask)
    assert float(loss.data) == pytest.approx(1.0 / 3.0)
    with pytest.raises(EmptyMaskError):
        multiscale_loss([pred], gt, [np.arange(4)[None]], (1.0,), mask=np.zeros((1, 4), bool))


def test_loss_gradient_is_unit_direction():
    gt = np.zeros((1, 1, 3))
    pred = Tensor(np.array([[[3.0, 4.0, 0.0]]]), requires_grad=True)
    multiscale_loss([pred], gt, [np.zeros((1, 1), int)], (2.0,)).backward()
    np.testing.assert_allclose(pred.grad, [[[1.2, 1.6, 0.0]]])


def _uniform(err, gt_norm=1.0, n=10):
    gt = np.tile([gt_norm, 0.0, 0.0], (n, 1))
    return gt + [0.0, err, 0.0], gt


def test_metrics_small_error():
    pred, gt = _uniform(0.04)
    epe, strict, relax, out = metrics_3d(pred, gt)
    assert epe == pytest.approx(0.04) and (strict, relax, out) == (1.0, 1.0, 0.0)


def test_metrics_large_error():
    pred, gt = _uniform(0.31)
    epe, strict, relax, out = metrics_3d(pred, gt)
    assert epe == pytest.approx(0.31) and (strict, relax, out) == (0.0, 0.0, 1.0)


def test_metrics_relative_branch():
    # 0.2 m error on a 5 m motion: relative error 4% passes strict despite the absolute miss
    pred, gt = _uniform(0.2, gt_norm=5.0)
    _, strict, relax, out = metrics_3d(pred, gt)
    assert (strict, relax, out) == (1.0, 1.0, 0.0)


def test_metrics_mask_and_shape_errors():
    pred, gt = _uniform(0.04)
    pred[0] += 10.0
    mask = np.ones(10, bool)
    mask[0] = False
    assert metrics_3d(pred, gt, mask)[0] == pytest.approx(0.04)
    with pytest.raises(EmptyMaskError):
        metrics_3d(pred, gt, np.zeros(10, bool))
    with pytest.raises(ValueError):
        metrics_3d(pred[:5], gt)


def test_pinhole_single_point():
    intr = CameraIntrinsics(100.0, 100.0, 0.0, 0.0)
    pc1 = np.array([[0.0, 0.0, 1.0]])
    gt = np.zeros((1, 3))
    assert metrics_2d(pc1, gt + [0.01, 0, 0], gt, intr) == pytest.approx((1.0, 1.0))


def test_2d_excludes_points_behind_camera():
    pc1 = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]])
    gt = np.zeros((2, 3))
    epe, acc, excluded = metrics_2d(pc1, gt, gt, return_excluded=True)
    assert (epe, acc, excluded) == (0.0, 1.0, 1)
    with pytest.raises(EmptyMaskError):
        metrics_2d(pc1[1:], gt[1:], gt[1:])


def test_intrinsics_parse():
    assert CameraIntrinsics.parse("1,2,3,4") == CameraIntrinsics(1, 2, 3, 4)
    with pytest.raises(ValueError):
        CameraIntrinsics.parse("1,2,3")
    with pytest.raises(ValueError):
        CameraIntrinsics(0, 1, 0, 0)


def test_report_keys_are_the_six_metrics():
    rep = MetricsReport(0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
    assert tuple(json.loads(rep.to_record())) == METRIC_NAMES
    assert [ln.split("=")[0] for ln in rep.to_lines().splitlines()] == list(METRIC_NAMES)


def test_accumulator_weights_by_points():
    acc = MetricsAccumulator(with_2d=False)
    p1, g1 = _uniform(0.04, n=10)
    p2, g2 = _uniform(0.31, n=30)
    acc.add(None, p1, g1)
    acc.add(None, p2, g2)
    rep = acc.report()
    assert rep.epe3d == pytest.approx((0.04 * 10 + 0.31 * 30) / 40)
    assert rep.acc3d_strict == pytest.approx(0.25)
    assert rep.epe2d is None and len(acc.records) == 2


def test_accumulator_empty_raises():
    with pytest.raises(EmptyMaskError):
        MetricsAccumulator().report()
