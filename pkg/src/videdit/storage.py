"""Archives and image files: weights, trajectories, videos, masks, reports."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .model import ModelConfig, UNet, inflate


# -- weights -----------------------------------------------------------------

def save_weights(model: UNet, path: str | Path, extra: Optional[dict] = None) -> Path:
    """Named-array archive plus ``<path>.json`` manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    manifest = {
        "video": model.video,
        "config": model.config.__dict__,
        "config_hash": model.config.hash(),
        "layers": {k: list(v.shape) for k, v in arrays.items()},
    }
    if extra:
        manifest.update(extra)
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def manifest_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def load_weights(path: str | Path, dtype=torch.float64) -> UNet:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    manifest = json.loads(manifest_path(path).read_text())
    config = ModelConfig(**manifest["config"])
    if config.hash() != manifest["config_hash"]:
        raise ValueError(f"{path}: manifest config hash mismatch")
    model = UNet(config).to(dtype)
    if manifest["video"]:
        model = inflate(model)
    with np.load(path) as data:
        state = {k: torch.from_numpy(data[k]) for k in data.files}
    shapes = {k: list(v.shape) for k, v in state.items()}
    if shapes != manifest["layers"]:
        raise ValueError(f"{path}: arrays do not match manifest")
    model.load_state_dict(state)
    return model.to(dtype)


# -- trajectories ------------------------------------------------------------

def save_trajectory(path: str | Path, arrays: dict[str, np.ndarray], schedule_meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = dict(arrays)
    payload["schedule_json"] = np.frombuffer(json.dumps(schedule_meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_trajectory(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files if k != "schedule_json"}
        meta = json.loads(bytes(data["schedule_json"]).decode()) if "schedule_json" in data.files else {}
    return arrays, meta


# -- videos ------------------------------------------------------------------

_MODES = {1: "L", 3: "RGB", 4: "RGBA"}


def save_video(path: str | Path, frames: np.ndarray) -> Path:
    """Write frames (F, C, H, W) in [0, 1].

    ``*.npz`` stores the exact array; a directory path stores one PNG per
    frame plus ``index.json``.
    """
    frames = np.asarray(frames)
    if frames.ndim != 4:
        raise ValueError(f"expected (F, C, H, W), got {frames.shape}")
    path = Path(path)
    if path.suffix == ".npz":
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            np.savez(fh, frames=frames)
        return path
    if frames.shape[1] not in _MODES:
        raise ValueError(f"PNG export needs 1, 3 or 4 channels, got {frames.shape[1]}")
    path.mkdir(parents=True, exist_ok=True)
    names = []
    for f, frame in enumerate(frames):
        name = f"frame_{f:04d}.png"
        arr = np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(arr[..., 0] if arr.shape[-1] == 1 else arr, mode=_MODES[frames.shape[1]]).save(path / name)
        names.append(name)
    (path / "index.json").write_text(json.dumps({"frames": names, "channels": int(frames.shape[1])}, indent=2))
    return path


def load_video(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if path.suffix == ".npz":
        try:
            with np.load(path) as data:
                return data["frames"]
        except (KeyError, ValueError, OSError) as exc:
            raise ValueError(f"corrupt video archive {path}: {exc}") from exc
    index = json.loads((path / "index.json").read_text())
    frames = []
    for name in index["frames"]:
        arr = np.asarray(Image.open(path / name), dtype=np.float64) / 255.0
        if arr.ndim == 2:
            arr = arr[..., None]
        frames.append(arr.transpose(2, 0, 1))
    return np.stack(frames)


# -- masks -------------------------------------------------------------------

def save_masks(path: str | Path, masks: dict[int, np.ndarray]) -> Path:
    """``masks[step]`` is (F, H, W) bool; entries are named ``mask_{step}_{frame}``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"mask_{step}_{f}": np.asarray(m[f], dtype=bool) for step, m in masks.items() for f in range(len(m))}
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def export_mask_images(directory: str | Path, masks: np.ndarray, fmt: str = "png") -> list[Path]:
    """One grey image per frame (PGM or PNG)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for f, m in enumerate(np.asarray(masks, dtype=bool)):
        p = directory / f"mask_{f:04d}.{fmt}"
        Image.fromarray((m * 255).astype(np.uint8), mode="L").save(p)
        out.append(p)
    return out


# -- reports -----------------------------------------------------------------

def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(row)
    return path


def save_grid(path: str | Path, videos: Sequence[np.ndarray], scale: int = 4) -> tuple[int, int]:
    """Frames left to right, one video per row. Returns (rows, columns)."""
    if not videos:
        raise ValueError("no videos for the grid")
    nf = max(v.shape[0] for v in videos)
    h, w = videos[0].shape[-2:]
    canvas = np.ones((len(videos) * h, nf * w, 3))
    for r, v in enumerate(videos):
        rgb = v[:, :3] if v.shape[1] >= 3 else np.repeat(v[:, :1], 3, axis=1)
        for f in range(v.shape[0]):
            canvas[r * h:(r + 1) * h, f * w:(f + 1) * w] = np.clip(rgb[f], 0, 1).transpose(1, 2, 0)
    img = np.round(canvas * 255).astype(np.uint8).repeat(scale, axis=0).repeat(scale, axis=1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img, mode="RGB").save(path)
    return len(videos), nf
