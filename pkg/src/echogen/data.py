"""Dataset on disk: one .npy file of raw [0,1] frames per video plus a
line-delimited JSON manifest.

Each video carries two EF values: `ef` is the generator's exact area-length
value, `ef_proxy` is the one measured by the segmentation oracle on the
rendered ED/ES frames. Conditioning and evaluation use ef_proxy, matching the
convention that every video is labeled by its mask-derived EF.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from .config import DataConfig
from .toyecho import (
    EllipseVideoSpec,
    SegmentationError,
    generate_toy_video,
    proxy_ef,
    segment_threshold,
)

__all__ = [
    "DatasetItem",
    "generate_dataset",
    "load_dataset",
    "to_model_space",
    "to_intensity",
]

log = logging.getLogger("echogen.data")

MANIFEST = "manifest.jsonl"
_MAX_RETRIES = 8


@dataclass(frozen=True)
class DatasetItem:
    item_id: str
    ef: float
    ef_proxy: float
    f: int
    seed: int
    frames: np.ndarray  # (f, C, H, W) in [0, 1]


def to_model_space(frames: np.ndarray) -> np.ndarray:
    """[0,1] intensities -> [-1,1] model space."""
    return frames * 2.0 - 1.0


def to_intensity(frames: np.ndarray) -> np.ndarray:
    """Model space back to clipped [0,1] intensities."""
    return np.clip((frames + 1.0) / 2.0, 0.0, 1.0)


def _measure_proxy(frames: np.ndarray, tau: float) -> float:
    # clamped into [0,1]: the raw proxy can stray slightly outside on noisy
    # masks, but the label doubles as the conditioning value
    ed = segment_threshold(frames[0, 0], tau)
    es = segment_threshold(frames[-1, 0], tau)
    return float(np.clip(proxy_ef(ed, es), 0.0, 1.0))


def generate_dataset(cfg: DataConfig, out_dir, seed: int) -> list[DatasetItem]:
    """Render n_videos pulsating-ellipse videos into out_dir, deterministically
    derived from `seed`. Returns the manifest as DatasetItems."""
    os.makedirs(out_dir, exist_ok=True)
    items = []
    lines = []
    for i in range(cfg.n_videos):
        draw = np.random.default_rng(np.random.SeedSequence([seed, i]))
        ef = float(draw.uniform(cfg.ef_min, cfg.ef_max))
        f = int(draw.integers(cfg.f_min, cfg.f_max + 1))
        base_seed = int(draw.integers(2**31 - 1))
        for attempt in range(_MAX_RETRIES):
            vid_seed = base_seed + attempt
            spec = EllipseVideoSpec(
                ef=ef,
                f=f,
                H=cfg.height,
                W=cfg.width,
                a=cfg.a,
                b_ed=cfg.b_ed,
                ring=cfg.ring,
                noise_sigma=cfg.noise_sigma,
                seed=vid_seed,
            )
            frames, true_ef = generate_toy_video(spec)
            try:
                ef_meas = _measure_proxy(frames, cfg.tau)
            except SegmentationError:
                log.warning("video %d seed %d failed segmentation; retrying", i, vid_seed)
                continue
            break
        else:
            raise RuntimeError(f"video {i}: segmentation failed {_MAX_RETRIES} times")
        item_id = f"vid_{i:05d}"
        np.save(os.path.join(out_dir, f"{item_id}.npy"), frames)
        items.append(
            DatasetItem(
                item_id=item_id, ef=true_ef, ef_proxy=ef_meas, f=f,
                seed=vid_seed, frames=frames,
            )
        )
        lines.append(
            json.dumps(
                {
                    "id": item_id,
                    "ef": true_ef,
                    "ef_proxy": ef_meas,
                    "f": f,
                    "seed": vid_seed,
                },
                sort_keys=True,
            )
        )
    with open(os.path.join(out_dir, MANIFEST), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    log.info("wrote %d videos to %s", len(items), out_dir)
    return items


def load_dataset(data_dir) -> list[DatasetItem]:
    path = os.path.join(data_dir, MANIFEST)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no manifest at {path}")
    items = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            meta = json.loads(line)
            frames = np.load(os.path.join(data_dir, f"{meta['id']}.npy"))
            items.append(
                DatasetItem(
                    item_id=meta["id"],
                    ef=float(meta["ef"]),
                    ef_proxy=float(meta["ef_proxy"]),
                    f=int(meta["f"]),
                    seed=int(meta["seed"]),
                    frames=frames,
                )
            )
    return items
