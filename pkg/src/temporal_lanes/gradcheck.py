"""Float64 central finite-difference checks of every differentiable operation on tiny shapes.

For each operation a scalar probe L = sum(w * f(inputs)) with fixed random w is
differentiated analytically (autograd) and numerically; the reported error is
||g_auto - g_num||_inf / max(||g_auto||_inf, ||g_num||_inf) over the concatenated
gradient of every checked tensor.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .decoder import DecoderLayer, LaneDecoder, LaneHead, LanePrediction, Projection, ReferenceInit
from .backbone import Backbone
from .geometry import CameraRig, Intrinsics, Pose, CAM_AXES_IN_EGO
from .lanes import Lane3D
from .losses import (MatchResult, downsample_seg, loss_cate, loss_seg, loss_vis, loss_xz, match,
                     total_loss)
from .tgem import TGEM, cost_volume, expand_repeat, sweep_grids, warp_expanded
from .tiqg import Aggregate, CrossAttend, InstanceEmbed, TIQG, compose_queries

TOLERANCE = 1e-4
EPS = 1e-6
MAX_COORDS = 64       # coordinates probed per tensor (all of them when smaller)


class _Corrupt(torch.autograd.Function):
    """Identity forward, scaled backward: a deliberately wrong gradient path."""

    @staticmethod
    def forward(ctx, x):
        return x.view_as(x)

    @staticmethod
    def backward(ctx, g):
        return 0.5 * g


def _maybe_corrupt(out, corrupt: bool):
    if not corrupt:
        return out
    if isinstance(out, LanePrediction):
        return LanePrediction(_Corrupt.apply(out.x), out.z, out.vis_logits, out.cat_logits)
    if isinstance(out, (tuple, list)):
        return type(out)(_Corrupt.apply(o) for o in out)
    return _Corrupt.apply(out)


def _flatten(out) -> list[torch.Tensor]:
    if isinstance(out, LanePrediction):
        return [out.x, out.z, out.vis_logits, out.cat_logits]
    if isinstance(out, (tuple, list)):
        return [t for o in out for t in _flatten(o)]
    return [out]


def max_relative_error(fn, tensors: list[torch.Tensor], seed: int = 0, eps: float = EPS,
                       max_coords: int = MAX_COORDS) -> float:
    """Compare autograd and central differences of a random linear probe of fn()."""
    gen = torch.Generator().manual_seed(seed)
    outs = _flatten(fn())
    weights = [torch.randn(o.shape, generator=gen, dtype=torch.float64) for o in outs]

    def probe():
        return sum((w * o).sum() for w, o in zip(weights, _flatten(fn())))

    grads = torch.autograd.grad(probe(), tensors, allow_unused=True)
    rng = np.random.default_rng(seed)
    ana_all, num_all = [], []
    for t, g in zip(tensors, grads):
        g = torch.zeros_like(t) if g is None else g
        flat = t.data.view(-1)
        n = flat.numel()
        coords = np.arange(n) if n <= max_coords else np.sort(rng.choice(n, max_coords, replace=False))
        num = np.zeros(len(coords))
        with torch.no_grad():
            for k, c in enumerate(coords):
                orig = flat[c].item()
                flat[c] = orig + eps
                up = probe().item()
                flat[c] = orig - eps
                down = probe().item()
                flat[c] = orig
                num[k] = (up - down) / (2 * eps)
        ana_all.append(g.reshape(-1)[torch.as_tensor(coords)].numpy())
        num_all.append(num)
    ana, num = np.concatenate(ana_all), np.concatenate(num_all)
    # one gradient vector per operation: exactly-zero blocks (e.g. softmax shift
    # directions) are judged against the scale of the whole gradient
    scale = max(np.abs(ana).max(initial=0.0), np.abs(num).max(initial=0.0), 1e-300)
    return float(np.abs(ana - num).max(initial=0.0) / scale)


@dataclass
class ModuleReport:
    module: str
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def _params(m: nn.Module) -> list[torch.Tensor]:
    return [p for p in m.parameters() if p.requires_grad]


def _rand(*shape, gen, scale=1.0, grad=True):
    t = torch.randn(*shape, generator=gen, dtype=torch.float64) * scale
    return t.requires_grad_(grad)


def _tiny_rigs():
    K = Intrinsics(8.0, 8.0, 8.0, 4.0, 16, 16)
    c2e = Pose(CAM_AXES_IN_EGO, np.array([0.0, 0.0, 1.5]))
    rig_t = CameraRig(K, c2e, Pose.identity())
    rig_s = CameraRig(K, c2e, Pose.from_yaw(0.01, (0.4, -1.0, 0.0)))
    return rig_t, rig_s


def check_backbone(corrupt=False, seed=0) -> ModuleReport:
    gen = torch.Generator().manual_seed(seed)
    net = Backbone(1, 8).double().eval()
    x = _rand(1, 1, 8, 8, gen=gen)
    rep = ModuleReport("backbone")
    rep.errors["extract_features"] = max_relative_error(
        lambda: _maybe_corrupt(net(x), corrupt), [x] + _params(net.blocks), seed)
    rep.errors["seg_head"] = max_relative_error(
        lambda: _maybe_corrupt(net.seg_head(net(x)), corrupt), [x] + _params(net.seg), seed)
    return rep


def check_tgem(corrupt=False, seed=0) -> ModuleReport:
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    rig_t, rig_s = _tiny_rigs()
    bins = [2.0, 4.0, 8.0]
    g, v = sweep_grids(rig_t, rig_s, bins, 4)
    grids = torch.as_tensor(g)[None]
    valid = torch.as_tensor(v)[None]
    C, H, W = 3, 4, 4
    F_t, F_s = _rand(1, C, H, W, gen=gen), _rand(1, C, H, W, gen=gen)
    mod = TGEM(C, len(bins), geo_channels=4).double().eval()
    rep = ModuleReport("tgem")
    rep.errors["expand_repeat"] = max_relative_error(
        lambda: _maybe_corrupt(expand_repeat(F_s, len(bins)), corrupt), [F_s], seed)
    rep.errors["warp_expanded"] = max_relative_error(
        lambda: _maybe_corrupt(warp_expanded(expand_repeat(F_s, len(bins)), grids, valid)[0], corrupt), [F_s], seed)
    E_hat, E_t = _rand(1, 2, C, H, W, gen=gen), _rand(1, 2, C, H, W, gen=gen)
    cv_valid = torch.rand(1, 2, H, W, generator=gen) > 0.3
    rep.errors["cost_volume"] = max_relative_error(
        lambda: _maybe_corrupt(cost_volume(E_hat, E_t, cv_valid).values, corrupt), [E_hat, E_t], seed)
    vol = _rand(1, 2 * len(bins), H, W, gen=gen)
    rep.errors["geometric_features"] = max_relative_error(
        lambda: _maybe_corrupt(mod.geometric_features(vol), corrupt), [vol] + _params(mod.geo), seed)
    F_g = _rand(1, 4, H, W, gen=gen)
    rep.errors["alpha_beta"] = max_relative_error(
        lambda: _maybe_corrupt(mod.alpha_beta(F_g), corrupt), [F_g] + _params(mod.alpha) + _params(mod.beta), seed)
    a, b = torch.rand(1, C, H, W, generator=gen, dtype=torch.float64).requires_grad_(), _rand(1, C, H, W, gen=gen)
    rep.errors["enhance"] = max_relative_error(
        lambda: _maybe_corrupt(mod.enhance(F_t, a, b), corrupt), [F_t, a, b], seed)
    rep.errors["tgem_end_to_end"] = max_relative_error(
        lambda: _maybe_corrupt(mod(F_t, F_s, grids, valid), corrupt), [F_t, F_s] + _params(mod), seed)
    return rep


def check_tiqg(corrupt=False, seed=0) -> ModuleReport:
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    C, M, N, d = 8, 2, 3, 8
    F = _rand(1, C, 4, 4, gen=gen)
    emb = InstanceEmbed(C, M, d).double()
    rep = ModuleReport("tiqg")
    rep.errors["instance_embed"] = max_relative_error(
        lambda: _maybe_corrupt(emb(F), corrupt), [F] + _params(emb), seed)
    Q_l, Q_p = _rand(1, M, d, gen=gen), _rand(N, d, gen=gen)
    rep.errors["compose_queries"] = max_relative_error(
        lambda: _maybe_corrupt(compose_queries(Q_l, Q_p), corrupt), [Q_l, Q_p], seed)
    ca = CrossAttend(d, 2, 16).double()
    q, kv = _rand(1, M, N, d, gen=gen), _rand(1, M, N, d, gen=gen)
    rep.errors["cross_attend"] = max_relative_error(
        lambda: _maybe_corrupt(ca(q, kv), corrupt), [q, kv] + _params(ca), seed)
    agg = Aggregate(d).double()
    q3 = [_rand(1, M, N, d, gen=gen) for _ in range(3)]
    rep.errors["aggregate"] = max_relative_error(
        lambda: _maybe_corrupt(agg(*q3), corrupt), q3 + _params(agg), seed)
    full = TIQG(C, M, N, d, heads=2, ffn_dim=16).double()
    Fs = [_rand(1, C, 4, 4, gen=gen) for _ in range(3)]
    rep.errors["tiqg_end_to_end"] = max_relative_error(
        lambda: _maybe_corrupt(full(*Fs).values, corrupt), Fs + _params(full), seed)
    return rep


def _tiny_projection():
    rig_t, _ = _tiny_rigs()
    return Projection.from_rigs([rig_t], 4, torch.float64)


def check_decoder(corrupt=False, seed=0) -> ModuleReport:
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    M, N, d, C = 2, 4, 8, 4
    y_grid = [3.0, 6.0, 9.0, 12.0]
    proj = _tiny_projection()
    Q = _rand(1, M, N, d, gen=gen)
    F_ge = _rand(1, C, 4, 4, gen=gen)
    rep = ModuleReport("lane_decoder")
    init = ReferenceInit(d, y_grid).double()
    rep.errors["init_reference_points"] = max_relative_error(
        lambda: _maybe_corrupt(init(Q), corrupt), [Q] + _params(init), seed)
    layer = DecoderLayer(d, C, heads=2, points=2, ffn_dim=16).double()
    with torch.no_grad():
        # non-degenerate offsets so samples land off the integer lattice
        layer.offsets.weight.normal_(0.0, 0.05, generator=gen)
        for p in layer.refine.parameters():
            p.normal_(0.0, 0.3, generator=gen)
    ref = torch.stack([torch.rand(1, M, N, generator=gen, dtype=torch.float64) * 2 - 1,
                       torch.tensor(y_grid, dtype=torch.float64).expand(1, M, N),
                       torch.rand(1, M, N, generator=gen, dtype=torch.float64) * 0.4 - 0.2], -1).requires_grad_()
    rep.errors["decode_layer"] = max_relative_error(
        lambda: _maybe_corrupt(layer(Q, F_ge, ref, proj), corrupt), [Q, F_ge, ref] + _params(layer), seed)
    head = LaneHead(d, 3).double()
    ref2 = ref.detach().clone().requires_grad_()
    rep.errors["head"] = max_relative_error(
        lambda: _maybe_corrupt(head(Q, ref2), corrupt), [Q, ref2] + _params(head), seed)
    dec = LaneDecoder(d, C, y_grid, 3, layers=2, heads=2, points=2, ffn_dim=16).double()
    with torch.no_grad():
        for lyr in dec.layers:
            lyr.offsets.weight.normal_(0.0, 0.05, generator=gen)
    rep.errors["decoder_end_to_end"] = max_relative_error(
        lambda: _maybe_corrupt(dec(Q, F_ge, proj), corrupt), [Q, F_ge] + _params(dec), seed)
    return rep


def check_losses(corrupt=False, seed=0) -> ModuleReport:
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    M, N, ncat = 3, 5, 3
    y = np.linspace(3, 15, N)
    gts = [Lane3D(np.stack([rng.normal(size=N), y, rng.normal(size=N) * 0.2], -1), rng.random(N) > 0.3,
                  int(rng.integers(ncat))) for _ in range(2)]
    x, z = _rand(1, M, N, gen=gen), _rand(1, M, N, gen=gen, scale=0.3)
    vis, cat = _rand(1, M, N, gen=gen), _rand(1, M, ncat + 1, gen=gen)
    pred = lambda: LanePrediction(x, z, vis, cat)
    matches = [match(pred(), gts)]
    rep = ModuleReport("losses_matching")
    rep.errors["loss_xz"] = max_relative_error(
        lambda: _maybe_corrupt(loss_xz(pred(), [gts], matches), corrupt), [x, z], seed)
    rep.errors["loss_vis"] = max_relative_error(
        lambda: _maybe_corrupt(loss_vis(pred(), [gts], matches), corrupt), [vis], seed)
    rep.errors["loss_cate"] = max_relative_error(
        lambda: _maybe_corrupt(loss_cate(pred(), [gts], matches), corrupt), [cat], seed)
    seg_logits = _rand(1, 1, 2, 3, gen=gen)
    target = downsample_seg(torch.as_tensor(rng.random((1, 16, 24)) > 0.8), 8).double()
    rep.errors["loss_seg"] = max_relative_error(
        lambda: _maybe_corrupt(loss_seg(seg_logits, target), corrupt), [seg_logits], seed)

    def total():
        lx, lz = loss_xz(pred(), [gts], matches)
        return _maybe_corrupt(total_loss(loss_vis(pred(), [gts], matches), lx, lz,
                                         loss_cate(pred(), [gts], matches), loss_seg(seg_logits, target)).total,
                              corrupt)
    rep.errors["total_loss"] = max_relative_error(total, [x, z, vis, cat, seg_logits], seed)
    return rep


CHECKS = {
    "backbone": check_backbone,
    "tgem": check_tgem,
    "tiqg": check_tiqg,
    "lane_decoder": check_decoder,
    "losses_matching": check_losses,
}


def run_gradcheck(modules=None, corrupt: str | None = None, seed: int = 0) -> list[ModuleReport]:
    """Run the named module checks; `corrupt` names one module whose backward is deliberately broken."""
    names = list(CHECKS) if modules is None else list(modules)
    unknown = set(names) - set(CHECKS)
    if unknown:
        raise ValueError(f"unknown modules {sorted(unknown)}")
    return [CHECKS[n](corrupt=(n == corrupt), seed=seed) for n in names]
