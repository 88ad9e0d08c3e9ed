"""Dataset generation, training loop with JSON-lines manifest, and inference."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import io
from .config import RunConfig
from .decoder import Projection
from .lanes import prediction_to_lanes
from .losses import NORMALIZATION, compute_losses
from .metrics import evaluate_frames
from .model import Batch, LaneNet, make_batch
from .scene_sim import generate_scene, render_frame

log = logging.getLogger(__name__)

SEED_OFFSETS = {"data": 0, "init": 1, "sampling": 2}
MANIFEST = "manifest.jsonl"
TIMING = "timing.json"


class NumericalAbort(RuntimeError):
    pass


def derived_seed(master: int, concern: str, index: int = 0) -> int:
    ss = np.random.SeedSequence([int(master), SEED_OFFSETS[concern], int(index)])
    return int(ss.generate_state(1)[0] & 0x7FFFFFFF)


def scene_seeds(cfg: RunConfig, count: int, offset: int | None = None) -> list[int]:
    start = cfg.data.scene_seed_offset if offset is None else offset
    return [derived_seed(cfg.seed, "data", start + i) for i in range(count)]


def content_version() -> str:
    """Hash of the package sources, in the spirit of a git tree id."""
    h = hashlib.sha1()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        data = p.read_bytes()
        h.update(f"blob {p.name} {len(data)}\0".encode() + data)
    return h.hexdigest()


def set_determinism(enabled: bool) -> None:
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.set_num_threads(1)


# ---------------------------------------------------------------- data

def gen_dataset(cfg: RunConfig, out_dir, count: int | None = None, offset: int | None = None) -> dict:
    """Render scenes into out_dir/scene_%04d/... and write out_dir/index.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sim = cfg.sim_config()
    count = cfg.data.num_scenes if count is None else count
    entries = []
    for i, seed in enumerate(scene_seeds(cfg, count, offset)):
        scene = generate_scene(seed, sim)
        sdir = out / f"scene_{i:04d}"
        sdir.mkdir(exist_ok=True)
        io.write_json(sdir / "scene.json", {"seed": seed, **scene.to_dict()})
        lane_counts = []
        for t in range(scene.frame_count):
            frame = render_frame(scene, t)
            io.save_frame(sdir / f"frame_{t:04d}", frame)
            lane_counts.append(len(frame.lanes_gt))
        entries.append({"dir": sdir.name, "seed": seed, "frames": scene.frame_count,
                        "lane_counts": lane_counts, "lanes_total": sum(lane_counts)})
    index = {"version": 1, "config_hash": cfg.config_hash(), "scenes": entries,
             "lanes_total": sum(e["lanes_total"] for e in entries)}
    io.write_json(out / "index.json", index)
    return index


def load_dataset(data_dir) -> list[list]:
    """List of scenes, each a list of FrameSample in time order."""
    root = Path(data_dir)
    try:
        index = io.read_json(root / "index.json")
    except OSError as exc:
        raise io.ContainerError(f"{root}: no dataset index ({exc})") from exc
    return [[io.load_frame(root / e["dir"] / f"frame_{t:04d}") for t in range(e["frames"])]
            for e in index["scenes"]]


def render_scenes(cfg: RunConfig, count: int, offset: int | None = None) -> list[list]:
    sim = cfg.sim_config()
    scenes = [generate_scene(s, sim) for s in scene_seeds(cfg, count, offset)]
    return [[render_frame(sc, t) for t in range(sc.frame_count)] for sc in scenes]


def frame_pairs(scenes, gap: int) -> list[tuple]:
    return [(frames[t - gap], frames[t]) for frames in scenes for t in range(gap, len(frames))]


def index_batch(b: Batch, idx) -> Batch:
    idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
    p = b.proj
    return Batch(b.images_t[idx], b.images_src[idx], b.grids[idx], b.grid_valid[idx],
                 Projection(p.R[idx], p.t[idx], p.fxy[idx], p.cxy[idx]),
                 None if b.seg_gt is None else b.seg_gt[idx],
                 None if b.lanes is None else [b.lanes[i] for i in idx.tolist()])


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: LaneNet
    steps: int
    final_loss: float
    manifest_path: Path
    metrics: dict | None = None


def _lr_lambda(cfg: RunConfig, total_steps: int):
    if cfg.optim.schedule == "constant":
        return lambda s: 1.0
    return lambda s: 0.5 * (1.0 + math.cos(math.pi * min(s, total_steps) / max(total_steps, 1)))


def total_steps(cfg: RunConfig, num_samples: int) -> int:
    if cfg.optim.epochs is not None:
        return cfg.optim.epochs * math.ceil(num_samples / cfg.optim.batch_size)
    return cfg.optim.steps


def train(cfg: RunConfig, scenes, out_dir, eval_scenes=None, eval_threshold: float | None = None,
          nan_at_step: int | None = None) -> TrainResult:
    """Train on `scenes` (lists of FrameSample). Writes manifest, timing and checkpoints to out_dir.

    `nan_at_step` injects a non-finite loss at that step (fault-injection for tests).
    Raises NumericalAbort on a non-finite loss after saving the last good checkpoint.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    set_determinism(cfg.deterministic)
    torch.manual_seed(derived_seed(cfg.seed, "init"))
    rng = np.random.default_rng(derived_seed(cfg.seed, "sampling"))

    pairs = frame_pairs(scenes, cfg.model.temporal_gap)
    if not pairs:
        raise ValueError("no (t-n, t) frame pairs in the training scenes")
    data = make_batch(pairs, cfg)
    n = len(pairs)
    steps = total_steps(cfg, n)

    model = LaneNet(cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, _lr_lambda(cfg, steps))

    manifest_path = out / MANIFEST
    started = time.time()
    with open(manifest_path, "w") as mf:
        header = {"type": "header", "config_hash": cfg.config_hash(), "content_version": content_version(),
                  "seed": cfg.seed, "normalization": NORMALIZATION, "samples": n, "steps": steps,
                  "ablation": cfg.ablation.model_dump(), "config": cfg.model_dump(mode="json")}
        mf.write(json.dumps(header, sort_keys=True) + "\n")
        order = np.zeros(0, dtype=np.int64)
        last = float("nan")
        good = None
        model.train()
        for step in range(steps):
            if len(order) < cfg.optim.batch_size:
                order = np.concatenate([order, rng.permutation(n)])
            idx, order = order[:cfg.optim.batch_size], order[cfg.optim.batch_size:]
            b = index_batch(data, idx)
            pred, seg = model(b)
            lb, _ = compute_losses(pred, seg, b.lanes, b.seg_gt, cfg.loss, cfg.model.stride)
            total = lb.total
            if nan_at_step is not None and step == nan_at_step:
                total = total * float("nan")
            if not torch.isfinite(total):
                mf.write(json.dumps({"type": "abort", "step": step, "reason": "non-finite loss"}) + "\n")
                if good is not None:
                    io.save_checkpoint(out / "checkpoint.ckpt", good, {"config": cfg.model_dump(mode="json"),
                                                                       "step": step - 1})
                raise NumericalAbort(f"non-finite loss at step {step}; last good checkpoint kept in {out}")
            good = {k: v.detach().clone() for k, v in model.state_dict().items()}
            opt.zero_grad(set_to_none=True)
            total.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.optim.grad_clip)
            opt.step()
            sched.step()
            last = float(total.detach())
            rec = {"type": "step", "step": step, "lr": sched.get_last_lr()[0], **lb.as_floats()}
            mf.write(json.dumps(rec) + "\n")
            if step % cfg.log_every == 0:
                log.info("step %d total %.4f", step, last)
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_model(model, cfg, out / "checkpoint.ckpt", step + 1)
        save_model(model, cfg, out / "checkpoint.ckpt", steps)
        threshold = cfg.eval_match_threshold if eval_threshold is None else eval_threshold
        summary = {"type": "summary", "steps": steps, "final_loss": last,
                   "train_metrics": evaluate_model(model, cfg, scenes, threshold).to_dict()}
        if eval_scenes:
            summary["eval_metrics"] = evaluate_model(model, cfg, eval_scenes, threshold).to_dict()
        if not cfg.deterministic:
            summary["wall_clock_s"] = time.time() - started
        mf.write(json.dumps(summary, sort_keys=True) + "\n")
    io.write_json(out / TIMING, {"wall_clock_s": time.time() - started})
    return TrainResult(model, steps, last, manifest_path, summary.get("eval_metrics", summary["train_metrics"]))


def save_model(model: LaneNet, cfg: RunConfig, path, step: int) -> None:
    io.save_checkpoint(path, model.state_dict(), {"config": cfg.model_dump(mode="json"), "step": step})


def load_model(path, cfg: RunConfig | None = None) -> tuple[LaneNet, RunConfig]:
    state, meta = io.load_checkpoint(path)
    saved = RunConfig.model_validate(meta["config"])
    if cfg is not None and saved.model_dump(exclude={"optim", "data", "seed", "deterministic", "log_every",
                                                     "checkpoint_every"}) != \
            cfg.model_dump(exclude={"optim", "data", "seed", "deterministic", "log_every", "checkpoint_every"}):
        raise ValueError("checkpoint was trained with a different model/data configuration")
    model = LaneNet(saved)
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise ValueError(f"checkpoint does not fit the model (missing {missing}, unexpected {unexpected})")
    return model, saved


@torch.no_grad()
def predict(model: LaneNet, batch: Batch, y_grid) -> list[list]:
    model.eval()
    pred, _ = model(batch)
    return [prediction_to_lanes(pred.x[b].numpy(), pred.z[b].numpy(), pred.vis_logits[b].numpy(),
                                pred.cat_logits[b].numpy(), y_grid) for b in range(pred.x.shape[0])]


def evaluate_model(model: LaneNet, cfg: RunConfig, scenes, threshold: float = 1.5, batch_size: int = 32):
    was_training = model.training
    pairs = frame_pairs(scenes, cfg.model.temporal_gap)
    frames = []
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i:i + batch_size]
        preds = predict(model, make_batch(chunk, cfg), cfg.y_grid)
        frames.extend((p, f_t.lanes_gt) for p, (_, f_t) in zip(preds, chunk))
    model.train(was_training)
    return evaluate_frames(frames, threshold)
