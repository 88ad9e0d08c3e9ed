"""On-disk containers: `.npyish` arrays, scene/frame dumps and parameter checkpoints.

`.npyish` layout (all integers little-endian):

    8 bytes   magic  b"NPYISH01"
    2 bytes   dtype code, ASCII: "f4", "f8", "u1", "i2", "i4"
    4 bytes   uint32 ndim
    8*ndim    uint64 shape
    rest      raw little-endian element data, C order

Checkpoint layout:

    8 bytes   magic  b"TLCKPT01"
    8 bytes   uint64 header length
    header    UTF-8 JSON {"version", "meta", "tensors": [{"name", "shape", "offset", "count"}]}
    rest      float32 little-endian payloads at the listed element offsets
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .geometry import CameraRig
from .lanes import Lane3D

NPYISH_MAGIC = b"NPYISH01"
_DTYPES = {"f4": "<f4", "f8": "<f8", "u1": "u1", "i2": "<i2", "i4": "<i4"}
_CODES = {np.dtype(v).str.lstrip("<|"): k for k, v in _DTYPES.items()}

CKPT_MAGIC = b"TLCKPT01"
CKPT_VERSION = 1


class ContainerError(ValueError):
    pass


def save_npyish(path, arr: np.ndarray) -> None:
    # asarray rather than ascontiguousarray, which promotes 0-d arrays to 1-d
    arr = np.asarray(arr)
    key = arr.dtype.str.lstrip("<|=")
    if key not in _CODES:
        raise ContainerError(f"{path}: unsupported dtype {arr.dtype}")
    code = _CODES[key]
    data = arr.astype(_DTYPES[code], copy=False).tobytes(order="C")
    header = NPYISH_MAGIC + code.encode("ascii") + struct.pack("<I", arr.ndim) + \
        struct.pack(f"<{arr.ndim}Q", *arr.shape)
    Path(path).write_bytes(header + data)


def load_npyish(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != NPYISH_MAGIC:
        raise ContainerError(f"{path}: bad magic")
    code = raw[8:10].decode("ascii")
    if code not in _DTYPES:
        raise ContainerError(f"{path}: unknown dtype code {code!r}")
    (ndim,) = struct.unpack("<I", raw[10:14])
    shape = struct.unpack(f"<{ndim}Q", raw[14:14 + 8 * ndim])
    body = raw[14 + 8 * ndim:]
    dtype = np.dtype(_DTYPES[code])
    if len(body) != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
        raise ContainerError(f"{path}: payload size does not match shape {shape}")
    return np.frombuffer(body, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def save_frame(frame_dir, frame) -> None:
    """Write one FrameSample in the frame_%04d layout."""
    d = Path(frame_dir)
    d.mkdir(parents=True, exist_ok=True)
    save_npyish(d / "image.npyish", frame.image.astype(np.float32))
    save_npyish(d / "depth.npyish", frame.depth_gt.astype(np.float32))
    save_npyish(d / "seg.npyish", frame.seg_gt.astype(np.uint8))
    if frame.instance_gt is not None:
        save_npyish(d / "instance.npyish", frame.instance_gt.astype(np.int16))
    write_json(d / "rig.json", frame.rig.to_dict())
    write_json(d / "lanes.json", {"timestamp": int(frame.timestamp),
                                  "lanes": [lane.to_dict() for lane in frame.lanes_gt]})


def load_frame(frame_dir):
    """Read one frame; missing image/depth/seg arrays (metadata-only frames) load as None."""
    from .scene_sim import FrameSample

    d = Path(frame_dir)
    opt = lambda name: load_npyish(d / name) if (d / name).exists() else None
    try:
        lanes = read_json(d / "lanes.json")
        return FrameSample(
            image=opt("image.npyish"),
            depth_gt=opt("depth.npyish"),
            rig=CameraRig.from_dict(read_json(d / "rig.json")),
            lanes_gt=[Lane3D.from_dict(x) for x in lanes["lanes"]],
            seg_gt=opt("seg.npyish"),
            timestamp=int(lanes["timestamp"]),
            instance_gt=opt("instance.npyish"),
        )
    except (OSError, KeyError) as exc:
        raise ContainerError(f"{d}: cannot load frame ({exc})") from exc


def save_checkpoint(path, state: dict[str, torch.Tensor], meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(state):
        arr = state[name].detach().cpu().to(torch.float32).numpy().astype("<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(arr.tobytes(order="C"))
        offset += arr.size
    header = json.dumps({"version": CKPT_VERSION, "meta": meta or {}, "tensors": entries},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<Q", len(header)) + header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ContainerError(f"{path}: not a checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    if header.get("version") != CKPT_VERSION:
        raise ContainerError(f"{path}: unsupported checkpoint version {header.get('version')}")
    payload = np.frombuffer(raw[16 + hlen:], dtype="<f4")
    state = {}
    for e in header["tensors"]:
        chunk = payload[e["offset"]:e["offset"] + e["count"]]
        if chunk.size != e["count"]:
            raise ContainerError(f"{path}: truncated tensor {e['name']}")
        state[e["name"]] = torch.from_numpy(chunk.astype(np.float32).reshape(e["shape"]))
    return state, header["meta"]
