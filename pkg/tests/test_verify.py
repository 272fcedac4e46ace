import numpy as np
import pytest

from yolocs import tensor as T
from yolocs import verify
from yolocs.graph import build, load_config
from yolocs.nn import DCFS, Bottleneck, Conv2d


def test_finite_diff_quadratic_and_constant():
    a = np.array([[3.0, 1.0], [1.0, 2.0]])
    theta = np.array([0.5, -2.0])
    grad = verify.finite_diff_grad(lambda t: 0.5 * t @ a @ t, theta)
    assert np.allclose(grad, a @ theta, rtol=1e-9, atol=1e-9)
    assert not verify.finite_diff_grad(lambda t: 7.0, theta).any()
    assert np.array_equal(theta, [0.5, -2.0])  # restored


def test_relative_error_floor():
    assert verify.relative_error([1.0], [1.0]) == 0
    assert verify.relative_error([1.0], [1.1]) == pytest.approx(0.1 / 1.1)
    assert verify.relative_error([1e-12], [3e-12]) < 1e-7


def test_primitive_gradients():
    errs = verify.primitive_grad_errors(seed=11)
    assert max(errs.values()) <= verify.GRAD_TOL, errs


def test_receptive_field_conv():
    rng = np.random.default_rng(0)
    px = (5, 6)
    assert verify.receptive_field_probe(Conv2d(8, 8, 1, rng=rng, dtype=np.float64), px) == {px}
    hood = verify.receptive_field_probe(Conv2d(8, 8, 3, rng=rng, dtype=np.float64), px)
    assert hood == {(px[0] + dy, px[1] + dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)}


def test_receptive_field_grows_with_depth():
    rng = np.random.default_rng(0)
    px = (7, 7)
    radii = []
    for n in (1, 2, 3):
        block = DCFS(8, 8, n, rng=rng, dtype=np.float64).eval()
        radii.append(verify.probe_radius(verify.receptive_field_probe(block.forward_main_path, px), px))
    single = verify.probe_radius(verify.receptive_field_probe(Bottleneck(8, rng=rng, dtype=np.float64), px), px)
    assert radii == sorted(radii) and radii[0] < radii[-1]
    assert radii[-1] > single == 1


def test_suites_pass_and_report():
    results = verify.run_suite("kernels") + verify.run_suite("receptive-field")
    assert results and all(r.passed for r in results)
    with pytest.raises(KeyError):
        verify.run_suite("nope")


@pytest.fixture
def wrong_sign_bias_grad(monkeypatch):
    """Mutation: conv backward returns the bias gradient with flipped sign."""
    real = T.conv2d_backward

    def broken(*args, **kwargs):
        gi, gw, gb = real(*args, **kwargs)
        return gi, gw, None if gb is None else -gb

    monkeypatch.setattr(T, "conv2d_backward", broken)
    return broken


def test_mutation_is_caught_and_named(wrong_sign_bias_grad):
    errs = verify.primitive_grad_errors(seed=0)
    failing = [k for k, v in errs.items() if v > verify.GRAD_TOL]
    assert failing and all(k.startswith("conv2d") and "bias" in k for k in failing)


def test_synthetic_batch_layout():
    b = verify.synthetic_batch(0)
    assert b.images.shape == (8, 3, 96, 96) and b.images.dtype == np.float32
    assert all(1 <= len(t) <= 3 for t in b.targets)
    assert {int(c) for t in b.targets for c in t[:, 0]} <= {0, 1}
    again = verify.synthetic_batch(0)
    assert np.array_equal(b.images, again.images)


@pytest.fixture(scope="module")
def micro_cfg(config_dir):
    return load_config(config_dir / "micro.yaml")


def test_toy_lr_zero_is_flat(micro_cfg):
    g = build(micro_cfg, img_size=96, seed=0)
    res = verify.toy_overfit(g, verify.synthetic_batch(0), steps=3, lr=0.0)
    assert len(res.losses) == 4 and len(set(res.losses)) == 1


def test_toy_is_deterministic(micro_cfg):
    runs = [verify.toy_overfit(build(micro_cfg, img_size=96, seed=0), verify.synthetic_batch(0), 4, 5e-3).losses
            for _ in range(2)]
    assert runs[0] == runs[1]
    assert runs[0][-1] < runs[0][0]


def test_toy_reports_divergence(micro_cfg):
    g = build(micro_cfg, img_size=96, seed=0)
    res = verify.toy_overfit(g, verify.synthetic_batch(0), steps=20, lr=1e6)
    assert not res.ok and res.diverged_at is not None and res.diverged_at <= 20
    assert len(res.losses) == res.diverged_at
