"""Frame collections for training and evaluation, from disk or generated in memory."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rten
from .synth_scene import DifficultyParams, render_frame, split_for


@dataclass
class FrameSet:
    x: np.ndarray      # [N, H, W, C] float32 log-power input
    y: np.ndarray      # [N, H, W] uint8 open-space labels
    seeds: np.ndarray  # generator seed per frame
    input_kind: str = "RA"

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "FrameSet":
        idx = np.asarray(idx)
        return FrameSet(self.x[idx], self.y[idx], self.seeds[idx], self.input_kind)


def synth_frames(seeds, params: DifficultyParams = DifficultyParams(), input_kind: str = "RA",
                 ra_mode: str = "max") -> FrameSet:
    xs, ys = [], []
    for s in seeds:
        fr = render_frame(int(s), params, ra_mode)
        xs.append(fr.ra[..., None] if input_kind == "RA" else fr.rad)
        ys.append(fr.mask)
    return FrameSet(np.stack(xs).astype(np.float32), np.stack(ys),
                    np.asarray(seeds, dtype=np.int64), input_kind)


def synth_split(n_frames: int, base_seed: int, params: DifficultyParams = DifficultyParams(),
                input_kind: str = "RA", ra_mode: str = "max", n_sequences: int = 10,
                test_fraction: float = 0.2) -> tuple[FrameSet, FrameSet]:
    """In-memory train/test sets split by contiguous seed blocks."""
    splits = np.array(split_for(n_frames, n_sequences, test_fraction))
    seeds = base_seed + np.arange(n_frames)
    return (synth_frames(seeds[splits == "train"], params, input_kind, ra_mode),
            synth_frames(seeds[splits == "test"], params, input_kind, ra_mode))


def load_manifest(data_dir: str | Path) -> dict:
    path = Path(data_dir) / "manifest.json"
    return json.loads(path.read_text())


def load_split(data_dir: str | Path, split: str | None = "train", input_kind: str = "RA") -> FrameSet:
    """Read frames of one split (``None`` for all) listed in ``manifest.json``."""
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir)
    key = {"RA": "ra", "RAD": "rad"}[input_kind]
    frames = [f for f in manifest["frames"] if split is None or f["split"] == split]
    if not frames:
        raise ValueError(f"no frames in split {split!r} of {data_dir}")
    xs, ys = [], []
    for f in frames:
        x = rten.read(data_dir / f[key]).astype(np.float32)
        xs.append(x[..., None] if x.ndim == 2 else x)
        ys.append((rten.read_pgm(data_dir / f["mask"]) > 127).astype(np.uint8))
    return FrameSet(np.stack(xs), np.stack(ys),
                    np.array([f["seed"] for f in frames], dtype=np.int64), input_kind)
