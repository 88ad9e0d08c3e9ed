import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from oracles import NUM_CLASSES, Y_GRID, brute_assign, prediction_from_lanes, random_lane
from temporal_lanes.config import LossSettings
from temporal_lanes.decoder import LanePrediction
from temporal_lanes.losses import (assign, category_targets, compute_losses, downsample_seg, focal_loss, loss_cate,
                                   loss_seg, loss_vis, loss_xz, match, match_cost, total_loss)

N = len(Y_GRID)


# ---------------------------------------------------------------- matching

def test_assign_against_enumeration_200_instances():
    rng = np.random.default_rng(0)
    for _ in range(200):
        M, G = int(rng.integers(1, 7)), int(rng.integers(0, 7))
        if G == 0:
            assert assign(np.zeros((M, 0))).pairs == []
            continue
        C = rng.uniform(0, 10, size=(M, G))
        if rng.uniform() < 0.3:
            C = np.round(C)   # integer costs: many tied optima exercise the tie-break
        best, pairs = brute_assign(C)
        got = assign(C)
        assert sum(C[i, j] for i, j in got.pairs) == pytest.approx(best, abs=1e-9)
        assert got.pairs == pairs
        assert sorted(got.unmatched_preds + [i for i, _ in got.pairs]) == list(range(M))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_assign_permutation_equivariant_cost(M, G, seed):
    rng = np.random.default_rng(seed)
    C = rng.uniform(size=(M, G))
    rp, cp = rng.permutation(M), rng.permutation(G)
    a = sum(C[i, j] for i, j in assign(C).pairs)
    b = sum(C[rp][:, cp][i, j] for i, j in assign(C[rp][:, cp]).pairs)
    assert a == pytest.approx(b, abs=1e-9)


def test_assign_tie_break_lexicographic():
    C = np.zeros((3, 3))
    assert assign(C).pairs == [(0, 0), (1, 1), (2, 2)]
    C = np.array([[1.0, 1.0], [1.0, 1.0], [0.0, 5.0]])
    assert assign(C).pairs == [(0, 1), (2, 0)]


def test_match_cost_example():
    gt = random_lane(np.random.default_rng(1))
    gt.visibility[:] = True
    x = np.stack([gt.x, gt.x + 1.0])
    z = np.stack([gt.z, gt.z + 0.5])
    logits = np.zeros((2, NUM_CLASSES + 1))
    C = match_cost(x, z, logits, [gt])
    np.testing.assert_allclose(C[:, 0], [10 * 0.75, 10 * 0.75 + 2 * 1.0 + 10 * 0.5])


def test_match_warns_when_gt_exceeds_queries():
    rng = np.random.default_rng(2)
    gts = [random_lane(rng) for _ in range(4)]
    pred = prediction_from_lanes(gts[:2], M=2)
    with pytest.warns(UserWarning):
        mr = match(pred, gts)
    assert len(mr.pairs) == 2


# ---------------------------------------------------------------- loss terms

def test_zero_loss_fixed_point():
    rng = np.random.default_rng(3)
    gts = [random_lane(rng) for _ in range(3)]
    pred = prediction_from_lanes(gts, M=6)
    mr = match(pred, gts)
    assert sorted(mr.pairs) == [(0, 0), (1, 1), (2, 2)]
    lx, lz = loss_xz(pred, [gts], [mr])
    assert float(lx) == 0.0 and float(lz) == 0.0
    assert float(loss_vis(pred, [gts], [mr])) < 1e-8
    assert float(loss_cate(pred, [gts], [mr])) < 1e-8


def test_loss_xz_example():
    lane = random_lane(np.random.default_rng(4))
    lane.visibility[:] = False
    lane.visibility[:4] = True
    pred = prediction_from_lanes([lane], M=1)
    pred.x[0, 0, :2] += 1.0     # two of four visible points off by 1 m
    pred.x[0, 0, 10] += 100.0   # invisible points do not count
    pred.z[0, 0, 3] -= 0.4
    mr = match(pred, [lane])
    lx, lz = loss_xz(pred, [[lane]], [mr])
    assert float(lx) == pytest.approx(0.5)
    assert float(lz) == pytest.approx(0.1)


def test_loss_vis_is_mean_bce():
    lane = random_lane(np.random.default_rng(5))
    pred = prediction_from_lanes([lane], M=2)
    pred.vis_logits[0, 0] = 0.0
    mr = match(pred, [lane])
    assert float(loss_vis(pred, [[lane]], [mr])) == pytest.approx(np.log(2.0))


def test_focal_reduces_to_cross_entropy():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(30, 4, generator=g, dtype=torch.float64)
    target = torch.randint(0, 4, (30,), generator=g)
    ce = F.cross_entropy(logits, target)
    assert float(focal_loss(logits, target, alpha=1.0, gamma=0.0)) == pytest.approx(float(ce), rel=1e-12)
    # gamma > 0 down-weights easy examples
    assert float(focal_loss(logits, target, alpha=1.0, gamma=2.0)) < float(ce)


def test_unmatched_queries_target_no_object():
    rng = np.random.default_rng(6)
    gts = [random_lane(rng, category=1)]
    pred = prediction_from_lanes(gts, M=4)
    tgt = category_targets(pred, [gts], [match(pred, gts)])
    assert tgt.tolist() == [[1, NUM_CLASSES, NUM_CLASSES, NUM_CLASSES]]


def test_no_gt_losses_are_zero_and_differentiable():
    pred = prediction_from_lanes([], M=3)
    for t in (pred.x, pred.z, pred.vis_logits, pred.cat_logits):
        t.requires_grad_()
    mr = match(pred, [])
    lx, lz = loss_xz(pred, [[]], [mr])
    lv = loss_vis(pred, [[]], [mr])
    assert lx.item() == lz.item() == lv.item() == 0.0
    (lx + lz + lv).backward()


def test_downsample_seg_windows():
    seg = torch.zeros(1, 16, 24)
    seg[0, 3, 3] = 1      # rows/cols [-4, 4): cell (0, 0)
    seg[0, 15, 23] = 1    # border pixel folds into the last cell
    out = downsample_seg(seg)
    assert out.shape == (1, 2, 3)
    assert out[0].tolist() == [[1, 0, 0], [0, 0, 1]]
    seg = torch.zeros(1, 16, 24)
    seg[0, 4, 12] = 1     # first pixel of cell (1, 2)'s window
    assert downsample_seg(seg)[0].tolist() == [[0, 0, 0], [0, 0, 1]]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_downsample_seg_matches_cell_loop(seed):
    rng = np.random.default_rng(seed)
    seg = rng.uniform(size=(2, 16, 24)) < 0.02
    out = downsample_seg(torch.as_tensor(seg)).numpy()
    for b in range(2):
        for i in range(2):
            for j in range(3):
                r0, r1 = max(8 * i - 4, 0), 16 if i == 1 else 8 * i + 4
                c0, c1 = max(8 * j - 4, 0), 24 if j == 2 else 8 * j + 4
                assert out[b, i, j] == float(seg[b, r0:r1, c0:c1].any())


def test_loss_seg_shape_check():
    with pytest.raises(ValueError):
        loss_seg(torch.zeros(1, 1, 2, 3), torch.zeros(1, 3, 2))
    assert float(loss_seg(torch.zeros(1, 1, 2, 3), torch.zeros(1, 2, 3))) == pytest.approx(np.log(2))


def test_total_loss_weights():
    one = torch.tensor(1.0)
    assert float(total_loss(one, one, one, one, one).total) == 28.0
    with pytest.raises(ValueError):
        total_loss(one, one, one, one, one, w_x=-1.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_losses_invariant_to_gt_order(seed):
    rng = np.random.default_rng(seed)
    gts = [random_lane(rng) for _ in range(int(rng.integers(1, 5)))]
    g = torch.Generator().manual_seed(seed % 2**31)
    pred = LanePrediction(torch.randn(1, 6, N, generator=g, dtype=torch.float64) * 5,
                          torch.randn(1, 6, N, generator=g, dtype=torch.float64),
                          torch.randn(1, 6, N, generator=g, dtype=torch.float64),
                          torch.randn(1, 6, NUM_CLASSES + 1, generator=g, dtype=torch.float64))
    seg = torch.zeros(1, 16, 24)
    seg_logits = torch.zeros(1, 1, 2, 3, dtype=torch.float64)
    a, _ = compute_losses(pred, seg_logits, [gts], seg, LossSettings())
    b, _ = compute_losses(pred, seg_logits, [gts[::-1]], seg, LossSettings())
    assert a.as_floats() == pytest.approx(b.as_floats(), rel=1e-12, abs=1e-12)
