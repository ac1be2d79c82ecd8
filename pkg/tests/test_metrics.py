import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import uniform_filter

from bptinpaint.imageio import write_png
from bptinpaint.metrics import (
    eval_masks,
    eval_split,
    evaluate,
    identity_predictor,
    l1_error,
    l2_error,
    masked_l1,
    ssim,
)

from oracles import rel_err


def ssim_direct(a, b):
    """SSIM from its definition with an explicit window loop."""
    w = np.array([0.299, 0.587, 0.114])
    x, y = a @ w, b @ w
    r = np.arange(11) - 5
    g1 = np.exp(-(r**2) / (2 * 1.5**2))
    win = np.outer(g1, g1)
    win /= win.sum()
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for i in range(x.shape[0] - 10):
        for j in range(x.shape[1] - 10):
            px, py = x[i:i + 11, j:j + 11], y[i:i + 11, j:j + 11]
            mx, my = (win * px).sum(), (win * py).sum()
            vx = (win * (px - mx) ** 2).sum()
            vy = (win * (py - my) ** 2).sum()
            cxy = (win * (px - mx) * (py - my)).sum()
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_sums_zeros_vs_ones():
    z, o = np.zeros((256, 256, 3)), np.ones((256, 256, 3))
    assert l1_error(z, o) == 196_608
    assert l2_error(z, o) == 196_608
    assert l1_error(z, z) == 0 and l2_error(o, o) == 0


def test_sums_match_loop():
    rng = np.random.default_rng(0)
    a, b = rng.random((5, 4, 3)), rng.random((5, 4, 3))
    l1 = l2 = 0.0
    for v, u in zip(a.ravel(), b.ravel()):
        l1 += abs(v - u)
        l2 += (v - u) ** 2
    assert rel_err(l1_error(a, b), l1) < 1e-12 and rel_err(l2_error(a, b), l2) < 1e-12
    assert l1_error(a, b) == l1_error(b, a) and l2_error(a, b) == l2_error(b, a)


def test_range_and_shape_errors():
    with pytest.raises(ValueError):
        l1_error(np.full((2, 2, 3), 1.5), np.zeros((2, 2, 3)))
    with pytest.raises(ValueError):
        l2_error(np.zeros((2, 2, 3)), np.zeros((3, 2, 3)))
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 30, 3)), np.zeros((10, 30, 3)))


def test_ssim_identity_and_negative():
    rng = np.random.default_rng(1)
    a = rng.random((32, 32, 3))
    assert abs(ssim(a, a) - 1.0) < 1e-9
    assert ssim(a, 1.0 - a) < 0


def test_ssim_blur_degrades_and_symmetric():
    rng = np.random.default_rng(2)
    a = rng.random((40, 40, 3))
    blurred = uniform_filter(a, size=(3, 3, 1))
    assert ssim(a, blurred) < 1.0
    assert ssim(a, blurred) == pytest.approx(ssim(blurred, a), abs=1e-15)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_ssim_matches_direct_definition(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((20, 23, 3))
    b = np.clip(a + rng.normal(0, 0.2, a.shape), 0, 1)
    assert abs(ssim(a, b) - ssim_direct(a, b)) < 1e-6


def test_ssim_matches_scikit_image():
    metrics = pytest.importorskip("skimage.metrics")
    rng = np.random.default_rng(3)
    for _ in range(5):
        a, b = rng.random((48, 48)), rng.random((48, 48))
        ref = metrics.structural_similarity(a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                            data_range=1.0)
        assert abs(ssim(np.repeat(a[..., None], 3, -1), np.repeat(b[..., None], 3, -1)) - ref) < 1e-6


def test_hole_only_errors_equal_full_image_errors():
    rng = np.random.default_rng(4)
    truth = rng.random((2, 32, 32, 3))
    masks = eval_masks(2, 32, seed=0)
    pred = np.where(masks[..., None] == 1, rng.random(truth.shape), truth)
    full = sum(l1_error(p, t) for p, t in zip(pred, truth))
    hole = np.abs(pred - truth)[masks.astype(bool)].sum()
    assert full == pytest.approx(hole, rel=1e-12)
    assert masked_l1(pred, truth, masks) == pytest.approx(hole / (masks.sum() * 3), rel=1e-12)


def test_identity_baseline_is_perfect():
    rng = np.random.default_rng(5)
    imgs = rng.random((3, 32, 32, 3))
    rows, mean = evaluate(identity_predictor, ["a", "b", "c"], imgs, eval_masks(3, 32, 1))
    assert mean.l1 == 0 and mean.l2 == 0 and abs(mean.ssim - 1) < 1e-9


def test_eval_split_csv_and_skips(tmp_path):
    rng = np.random.default_rng(6)
    for i in range(3):
        write_png(tmp_path / f"im{i}.png", rng.random((32, 32, 3)))
    (tmp_path / "broken.png").write_bytes(b"not a png")
    out = tmp_path / "out" / "m.csv"
    rows, mean, skipped = eval_split(identity_predictor, tmp_path, 0, out)
    assert skipped == 1 and len(rows) == 3
    lines = out.read_text().splitlines()
    assert lines[0] == "id,l1,l2,ssim" and lines[-1].startswith("MEAN,") and len(lines) == 5


def test_eval_split_empty_dir(tmp_path):
    out = tmp_path / "m.csv"
    with pytest.raises(ValueError):
        eval_split(identity_predictor, tmp_path, 0, out)
    assert not out.exists()


def test_eval_masks_fixed_by_seed():
    assert np.array_equal(eval_masks(4, 64, 3), eval_masks(4, 64, 3))
    assert not np.array_equal(eval_masks(4, 64, 3), eval_masks(4, 64, 4))
