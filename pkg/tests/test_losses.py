import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bptinpaint.engine import Tensor
from bptinpaint.losses import (
    LossReport,
    LossWeights,
    adv_g,
    ala_weight,
    decade_scale,
    l2_recon,
    mspal_d,
    ppl,
    ppl_batch,
    total_g,
)
from bptinpaint.masking import Box, HoleMask, PatchPair
from bptinpaint.models import FeatureStack

from oracles import adv_g_ref, mspal_d_ref, ppl_ref, rel_err

E = 16


@pytest.fixture(scope="module")
def fs():
    return FeatureStack(seed=1, input_extent=E, dtype=np.float64)


def pair(rng):
    box = Box(0, 0, E, E)
    return PatchPair(box, box, Tensor(rng.uniform(-1, 1, (1, 3, E, E))), Tensor(rng.uniform(-1, 1, (1, 3, E, E))))


def maps(rng, shapes=((1, 1, 8, 8), (1, 1, 4, 4), (1, 1, 2, 2)), scale=3.0):
    return [rng.normal(0, scale, s) for s in shapes]


def labels_for(rng, shapes=((1, 1, 8, 8), (1, 1, 4, 4), (1, 1, 2, 2))):
    return [(rng.random(s) > 0.5).astype(np.float64) for s in shapes]


def test_ppl_identical_is_exactly_zero(fs):
    p = pair(np.random.default_rng(0))
    assert ppl(fs, p, p).item() == 0.0


def test_ppl_zero_weights(fs):
    rng = np.random.default_rng(1)
    fs2 = FeatureStack(seed=1, input_extent=E, dtype=np.float64)
    fs2.set_layer_weights([np.zeros_like(w) for w in fs.layer_weights])
    assert ppl(fs2, pair(rng), pair(rng)).item() == 0.0


@pytest.mark.parametrize("seed", range(4))
def test_ppl_matches_loop_oracle(fs, seed):
    rng = np.random.default_rng(seed)
    a, b = pair(rng), pair(rng)
    got = ppl(fs, a, b).item()
    want = ppl_ref(fs, [a.local.data[0], a.global_.data[0]], [b.local.data[0], b.global_.data[0]])
    assert got > 0 and rel_err(got, want) < 1e-6


def test_ppl_custom_channel_weights(fs):
    rng = np.random.default_rng(7)
    fs2 = FeatureStack(seed=1, input_extent=E, dtype=np.float64)
    fs2.set_layer_weights([rng.random(w.shape) for w in fs.layer_weights])
    a, b = pair(rng), pair(rng)
    want = ppl_ref(fs2, [a.local.data[0], a.global_.data[0]], [b.local.data[0], b.global_.data[0]])
    assert rel_err(ppl(fs2, a, b).item(), want) < 1e-6


def test_ppl_layer_count_mismatch(fs):
    fs2 = FeatureStack(seed=1, input_extent=E, dtype=np.float64)
    fs2.layer_weights = fs2.layer_weights[:3]
    p = pair(np.random.default_rng(0))
    with pytest.raises(ValueError):
        ppl(fs2, p, p)


def test_ppl_batch_resizes_and_averages(fs):
    rng = np.random.default_rng(3)
    truth = Tensor(rng.uniform(-1, 1, (2, 3, 32, 32)))
    pred = Tensor(rng.uniform(-1, 1, (2, 3, 32, 32)), requires_grad=True)
    masks = [HoleMask.from_rects(32, [Box(4, 4, 8, 8), Box(18, 16, 10, 12)]),
             HoleMask.from_rects(32, [Box(10, 12, 12, 8)])]
    loc, glob = ppl_batch(fs, pred, truth, masks)
    assert loc.item() > 0 and glob.item() > 0
    same = ppl_batch(fs, Tensor(truth.data), truth, masks)
    assert same[0].item() == 0.0 and same[1].item() == 0.0
    (loc + glob).backward()
    # pixels outside every zoomed-out box get no gradient
    assert np.all(pred.grad[1, :, 28:, :] == 0)


def test_l2_recon_counts_hole_pixels():
    pred = Tensor(np.ones((1, 3, 4, 4)))
    truth = Tensor(np.zeros((1, 3, 4, 4)))
    m = np.zeros((1, 1, 4, 4))
    m[..., :2, :2] = 1
    assert l2_recon(pred, truth, m).item() == pytest.approx(1.0)


def test_mspal_d_at_zero_logits_is_ln2():
    rng = np.random.default_rng(0)
    zeros = [Tensor(np.zeros(s)) for s in ((1, 1, 8, 8), (1, 1, 4, 4), (1, 1, 2, 2))]
    assert mspal_d(zeros, zeros, labels_for(rng)).item() == pytest.approx(math.log(2), abs=1e-15)


def test_mspal_d_perfect_discriminator():
    rng = np.random.default_rng(1)
    q = labels_for(rng)
    real = [Tensor(np.full(l.shape, 1e3)) for l in q]
    fake = [Tensor(np.where(l == 1, 1e3, -1e3)) for l in q]
    val = mspal_d(real, fake, q).item()
    assert 0 < val < 1e-12
    assert math.isfinite(val)


def test_mspal_d_shape_mismatch():
    rng = np.random.default_rng(0)
    q = labels_for(rng)
    bad = [Tensor(np.zeros((1, 1, 8, 8)))] * 3
    with pytest.raises(ValueError):
        mspal_d(bad, bad, q)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_mspal_d_matches_direct_sum(seed):
    rng = np.random.default_rng(seed)
    real, fake, q = maps(rng), maps(rng, scale=40.0), labels_for(rng)
    got = mspal_d([Tensor(r) for r in real], [Tensor(f) for f in fake], q).item()
    assert rel_err(got, mspal_d_ref(real, fake, q)) < 1e-6


def test_adv_g_no_fake_cells_is_zero(caplog):
    ones = [np.ones(s) for s in ((1, 1, 8, 8), (1, 1, 4, 4), (1, 1, 2, 2))]
    val = adv_g([Tensor(np.full(o.shape, 5.0)) for o in ones], ones)
    assert val.item() == 0.0
    assert "no hole-overlapping" in caplog.text


def test_adv_g_zero_logits_ln2():
    rng = np.random.default_rng(2)
    q = labels_for(rng)
    q[2][:] = 1  # a scale without fake cells is skipped
    zeros = [Tensor(np.zeros(l.shape)) for l in q]
    assert adv_g(zeros, q).item() == pytest.approx(math.log(2), abs=1e-15)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_adv_g_matches_direct_sum(seed):
    rng = np.random.default_rng(seed)
    fake, q = maps(rng), labels_for(rng)
    got = adv_g([Tensor(f) for f in fake], q).item()
    assert rel_err(got, adv_g_ref(fake, q)) < 1e-6


def test_adv_g_only_fake_cells_get_gradient():
    rng = np.random.default_rng(5)
    q = labels_for(rng)
    fake = [Tensor(f, requires_grad=True) for f in maps(rng)]
    adv_g(fake, q).backward()
    for f, l in zip(fake, q):
        assert np.all(f.grad[l == 1] == 0)
        assert np.all(f.grad[l == 0] < 0)


@pytest.mark.parametrize(
    "stage,ala,want",
    [(0, True, 5.2), (2, True, 5.002), (2, False, 5.2)],
)
def test_total_g_examples(stage, ala, want):
    w = LossWeights(stage=stage, ala_enabled=ala)
    assert total_g(0.5, 0.2, w) == pytest.approx(want, abs=1e-12)


@pytest.mark.parametrize(
    "initial,stage,enabled,want",
    [(1, 0, True, 1.0), (1, 3, True, 0.001), (1, 3, False, 1.0), (2e-4, 1, True, 2e-5),
     (2e-4, 2, True, 2e-6), (2e-4, 3, True, 2e-7)],
)
def test_ala_weight_exact(initial, stage, enabled, want):
    assert ala_weight(initial, stage, enabled) == want


def test_ala_negative_stage():
    with pytest.raises(ValueError):
        ala_weight(1.0, -1)
    with pytest.raises(ValueError):
        decade_scale(1.0, -2)


@given(c=st.floats(0.01, 100), p=st.floats(0, 10), a=st.floats(0, 10))
def test_total_g_scaling(c, p, a):
    w = LossWeights()
    w2 = LossWeights(lambda_ppl=w.lambda_ppl * c, lambda_adv_initial=w.lambda_adv_initial * c)
    assert total_g(p, a, w2) == pytest.approx(c * total_g(p, a, w), rel=1e-12, abs=1e-300)


def test_loss_report_row_and_finite():
    r = LossReport(3, 1, 0.5, 0.1, 0.2, 0.3, [0.4, 0.5, 0.6], 1.5, 0.1, 2e-5)
    row = r.row()
    assert len(row) == 12 and row[-1] == "2e-05"
    r.check_finite()
    r.ppl_local = float("nan")
    with pytest.raises(FloatingPointError):
        r.check_finite()
