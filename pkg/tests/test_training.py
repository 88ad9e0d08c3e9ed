import itertools
import json

import numpy as np
import pytest
import torch

from temporal_lanes import io
from temporal_lanes.config import load_config
from temporal_lanes.model import LaneNet, make_batch
from temporal_lanes.training import (NumericalAbort, derived_seed, evaluate_model, frame_pairs, gen_dataset,
                                     load_dataset, load_model, render_scenes, train)

TINY = {"model": {"num_queries": 4, "query_dim": 16, "feat_channels": 16, "geo_channels": 8, "ffn_dim": 32,
                  "decoder_layers": 1, "sampling_points": 2},
        "optim": {"steps": 5, "batch_size": 2}, "log_every": 1000, "checkpoint_every": 0}


def tiny(**over):
    data = json.loads(json.dumps(TINY))
    for k, v in over.items():
        if isinstance(v, dict):
            data.setdefault(k, {}).update(v)
        else:
            data[k] = v
    return load_config(overrides=data, environ={})


@pytest.fixture(scope="module")
def scenes():
    return render_scenes(tiny(), 2)


def manifest(path):
    return [json.loads(l) for l in open(path)]


def test_derived_seeds_split_by_concern():
    s = {derived_seed(0, c) for c in ("data", "init", "sampling")}
    assert len(s) == 3
    assert derived_seed(0, "data", 1) == derived_seed(0, "data", 1) != derived_seed(1, "data", 1)


def test_frame_pairs(scenes):
    pairs = frame_pairs(scenes, 1)
    assert len(pairs) == 4
    assert pairs[0][0].timestamp + 1 == pairs[0][1].timestamp


@pytest.mark.parametrize("tgem,tiqg,cv", list(itertools.product([True, False], repeat=3)))
def test_every_ablation_combination_trains(tmp_path, scenes, tgem, tiqg, cv):
    cfg = tiny(ablation={"use_tgem": tgem, "use_tiqg_temporal": tiqg, "use_cost_volume": cv})
    r = train(cfg, scenes, tmp_path)
    assert r.steps == 5 and np.isfinite(r.final_loss)
    m = manifest(r.manifest_path)
    assert m[0]["type"] == "header" and m[0]["ablation"] == cfg.ablation.model_dump()
    assert [x["step"] for x in m if x["type"] == "step"] == list(range(5))
    assert m[-1]["type"] == "summary"
    assert (r.model.tgem is None) == (not tgem)


def test_deterministic_reruns_are_bitwise_identical(tmp_path, scenes):
    cfg = tiny(deterministic=True)
    a = train(cfg, scenes, tmp_path / "a")
    b = train(cfg, scenes, tmp_path / "b")
    assert a.manifest_path.read_bytes() == b.manifest_path.read_bytes()
    assert a.final_loss == b.final_loss


def test_seed_changes_the_run(tmp_path, scenes):
    a = train(tiny(deterministic=True), scenes, tmp_path / "a")
    b = train(tiny(deterministic=True, seed=1), scenes, tmp_path / "b")
    assert a.final_loss != b.final_loss


def test_nan_abort_keeps_last_good_checkpoint(tmp_path, scenes):
    with pytest.raises(NumericalAbort):
        train(tiny(), scenes, tmp_path, nan_at_step=3)
    m = manifest(tmp_path / "manifest.jsonl")
    assert m[-1] == {"type": "abort", "step": 3, "reason": "non-finite loss"}
    model, cfg = load_model(tmp_path / "checkpoint.ckpt")
    _, meta = io.load_checkpoint(tmp_path / "checkpoint.ckpt")
    assert meta["step"] == 2
    for p in model.parameters():
        assert torch.isfinite(p).all()


def test_checkpoint_roundtrip_predictions(tmp_path, scenes):
    cfg = tiny()
    r = train(cfg, scenes, tmp_path)
    model, saved = load_model(tmp_path / "checkpoint.ckpt", cfg)
    assert saved == cfg
    a = evaluate_model(r.model, cfg, scenes)
    b = evaluate_model(model, cfg, scenes)
    assert a.to_dict() == b.to_dict()
    with pytest.raises(ValueError):
        load_model(tmp_path / "checkpoint.ckpt", tiny(model={"num_queries": 5}))


def test_model_forward_shapes(scenes):
    cfg = tiny()
    torch.manual_seed(0)
    model = LaneNet(cfg)
    pred, seg = model(make_batch(frame_pairs(scenes, 1)[:3], cfg))
    assert pred.x.shape == (3, 4, len(cfg.y_grid)) and pred.cat_logits.shape == (3, 4, cfg.num_categories + 1)
    assert seg.shape == (3, 1, 9, 12)


def test_gen_dataset_byte_identical_and_index(tmp_path):
    cfg = tiny()
    ia = gen_dataset(cfg, tmp_path / "a", count=2)
    ib = gen_dataset(cfg, tmp_path / "b", count=2)
    assert ia == ib
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for f in files_a:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert ia["lanes_total"] == sum(sum(e["lane_counts"]) for e in ia["scenes"])
    loaded = load_dataset(tmp_path / "a")
    assert ia["lanes_total"] == sum(len(f.lanes_gt) for s in loaded for f in s)
    fresh = render_scenes(cfg, 2)
    assert np.array_equal(loaded[1][2].image, fresh[1][2].image)
    assert all(a.allclose(b, 0.0) for a, b in zip(loaded[0][1].lanes_gt, fresh[0][1].lanes_gt))


def test_load_dataset_missing_index(tmp_path):
    with pytest.raises(io.ContainerError):
        load_dataset(tmp_path)


def test_train_needs_pairs(tmp_path, scenes):
    with pytest.raises(ValueError):
        train(tiny(), [s[:1] for s in scenes], tmp_path)
