import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bptinpaint.engine import ConvSpec, Tensor
from bptinpaint.engine import ops
from bptinpaint.masking import Box, HoleMask, sample_mask
from bptinpaint.models import DiscriminatorConfig, build_discriminators
from bptinpaint.receptive import FAKE, REAL, patch_labels, rf_geometry, rf_map, rf_rects


def support_oracle(specs, extent):
    """Receptive rectangles from gradient support of an all-positive conv stack."""
    x = Tensor(np.zeros((1, 1, extent, extent)), requires_grad=True)
    h = x
    weights = []
    for s in specs:
        w = Tensor(np.ones((1, 1, *s.kernel_hw)))
        weights.append(w)
    one = [ConvSpec(1, 1, s.kernel, s.stride, s.padding, s.dilation) for s in specs]
    for s, w in zip(one, weights):
        h = ops.conv2d(h, w, None, s)
    ho, wo = h.shape[2:]
    out = np.zeros((ho, wo, 4), dtype=int)
    for i in range(ho):
        for j in range(wo):
            x.grad = None
            sel = np.zeros(h.shape)
            sel[0, 0, i, j] = 1
            # rebuild so each probe has a fresh graph
            y = x
            for s, w in zip(one, weights):
                y = ops.conv2d(y, w, None, s)
            ops.sum(y * sel).backward()
            rows, cols = np.nonzero(x.grad[0, 0])
            out[i, j] = rows.min(), cols.min(), rows.max(), cols.max()
    return out


def brute_labels(rf, bits):
    ho, wo = rf.shape[:2]
    out = np.ones((ho, wo), dtype=np.uint8)
    for i in range(ho):
        for j in range(wo):
            t, l, b, r = rf[i, j]
            hit = False
            for y in range(t, b + 1):
                for x in range(l, r + 1):
                    if bits[y, x]:
                        hit = True
            out[i, j] = FAKE if hit else REAL
    return out


def test_single_conv_neighbourhood():
    rf = rf_map([ConvSpec(1, 1, 3, 1, 1)], 8)
    assert tuple(rf[0, 0]) == (0, 0, 1, 1)
    assert tuple(rf[4, 5]) == (3, 4, 5, 6)
    assert tuple(rf[7, 7]) == (6, 6, 7, 7)


def test_two_stride_two_convs_geometry():
    specs = [ConvSpec(1, 1, 4, 2, 1), ConvSpec(1, 1, 4, 2, 1)]
    geo = rf_geometry(specs)
    assert geo.size == (10, 10) and geo.jump == (4, 4)
    np.testing.assert_array_equal(rf_map(specs, 32), support_oracle(specs, 32))


@pytest.mark.parametrize(
    "specs",
    [
        [ConvSpec(1, 1, 3, 1, 1), ConvSpec(1, 1, 3, 2, 0)],
        [ConvSpec(1, 1, 5, 2, 2), ConvSpec(1, 1, 3, 1, 1), ConvSpec(1, 1, 4, 2, 1)],
    ],
)
def test_rf_map_matches_support_oracle(specs):
    np.testing.assert_array_equal(rf_map(specs, 24), support_oracle(specs, 24))


def test_dilated_rf_bounds_gradient_support():
    # dilation leaves gaps, so clipped rects are a bounding box of the support
    specs = [ConvSpec(1, 1, 3, 1, 2, 2), ConvSpec(1, 1, 3, 1, 2, 2)]
    rf, sup = rf_map(specs, 24), support_oracle(specs, 24)
    assert np.all(rf[..., :2] <= sup[..., :2]) and np.all(rf[..., 2:] >= sup[..., 2:])
    np.testing.assert_array_equal(rf[4:-4, 4:-4], sup[4:-4, 4:-4])


def test_rf_rejects_non_conv():
    with pytest.raises(TypeError):
        rf_map(["relu"], 8)


def test_default_discriminator_rf_cell_count():
    d = build_discriminators(DiscriminatorConfig())[0]
    rects = rf_rects(d.conv_specs(), 64)
    assert len(rects) == 8 and len(rects[0]) == 8
    assert rects[0][0].top == 0


def test_labels_extremes():
    d = build_discriminators(DiscriminatorConfig())[0]
    rf = rf_map(d.conv_specs(), 64)
    assert (patch_labels(rf, np.ones((64, 64))) == FAKE).all()
    assert (patch_labels(rf, np.zeros((64, 64))) == REAL).all()


def test_labels_offcentre_hole_match_bruteforce():
    specs = [ConvSpec(1, 1, 4, 2, 1), ConvSpec(1, 1, 3, 1, 1)]
    m = HoleMask.from_rects(64, [Box(5, 37, 16, 16)])
    rf = rf_map(specs, 64)
    np.testing.assert_array_equal(patch_labels(rf, m.bits), brute_labels(rf, m.bits))
    d = build_discriminators(DiscriminatorConfig())[0]
    rf = rf_map(d.conv_specs(), 64)
    np.testing.assert_array_equal(patch_labels(rf, m.bits), brute_labels(rf, m.bits))


def test_labels_batched_and_scale_mismatch():
    specs = [ConvSpec(1, 1, 4, 2, 1)]
    rf = rf_map(specs, 16)
    masks = np.zeros((2, 1, 16, 16))
    masks[1, 0, 0, 0] = 1
    labels = patch_labels(rf, masks)
    assert labels.shape == (2, 1, 8, 8)
    assert labels[0].all() and labels[1, 0, 0, 0] == FAKE
    with pytest.raises(ValueError):
        patch_labels(rf, np.zeros((8, 8)))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), grow=st.integers(1, 6))
def test_labels_monotone_in_hole_size(seed, grow):
    rng = np.random.default_rng(seed)
    specs = [ConvSpec(1, 1, 4, 2, 1), ConvSpec(1, 1, 4, 2, 1), ConvSpec(1, 1, 3, 1, 1)]
    rf = rf_map(specs, 64)
    m = sample_mask(rng, 64)
    bigger = np.zeros_like(m.bits)
    for r in m.rects:
        t, l = max(r.top - grow, 0), max(r.left - grow, 0)
        bigger[t:r.top + r.height + grow, l:r.left + r.width + grow] = 1
    small, large = patch_labels(rf, m.bits), patch_labels(rf, bigger)
    assert not np.any((small == FAKE) & (large == REAL))


def test_labels_translate_with_jump():
    specs = [ConvSpec(1, 1, 4, 2, 1), ConvSpec(1, 1, 4, 2, 1)]
    jump = rf_geometry(specs).jump[0]
    rf = rf_map(specs, 64)
    a = HoleMask.from_rects(64, [Box(24, 24, 6, 6)]).bits
    b = HoleMask.from_rects(64, [Box(24 + jump, 24 + jump, 6, 6)]).bits
    la, lb = patch_labels(rf, a), patch_labels(rf, b)
    assert np.array_equal(la[2:-3, 2:-3], lb[3:-2, 3:-2])
