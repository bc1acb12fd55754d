"""Synthetic clips: a bright square drifting over a smooth textured background.

A frame is labelled 1 while the square overlaps the central region of the
frame, so labels depend on both position and motion through the clip.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from .imaging import write_image
from .pipeline import ClipManifest, write_manifest


def smooth_texture(height: int, width: int, rng: np.random.Generator, sigma: float = 2.0) -> np.ndarray:
    noise = ndimage.gaussian_filter(rng.random((height, width)), sigma, mode="wrap")
    noise = (noise - noise.min()) / max(np.ptp(noise), 1e-12)
    return noise


def center_region(height: int, width: int) -> tuple[slice, slice]:
    return (slice(height // 3, height - height // 3), slice(width // 3, width - width // 3))


def square_clip(height: int, width: int, frames: int, rng: np.random.Generator,
                side: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Frames (T, H, W, 3) uint8 and labels (T,) for one clip."""
    background = 0.15 + 0.35 * smooth_texture(height, width, rng)
    rows, cols = center_region(height, width)
    speed = rng.choice([-3, -2, 2, 3])
    y = int(rng.integers(0, height - side + 1))
    span = abs(speed) * (frames - 1)
    x0 = int(rng.integers(0, max(1, width - side - span + 1)))
    if speed < 0:
        x0 = width - side - x0
    video, labels = [], []
    for t in range(frames):
        x = int(np.clip(x0 + speed * t, 0, width - side))
        frame = background.copy()
        frame[y:y + side, x:x + side] = 1.0
        video.append(np.repeat(frame[..., None], 3, axis=-1))
        overlap = (y < rows.stop and y + side > rows.start and x < cols.stop and x + side > cols.start)
        labels.append(int(overlap))
    return (np.clip(np.stack(video), 0, 1) * 255).round().astype(np.uint8), np.array(labels)


def generate_corpus(root, n_clips: int = 8, frames: int = 8, size: tuple[int, int] = (24, 32),
                    seed: int = 0, val_clips: int = 0, test_clips: int = 0,
                    balance: bool = True) -> Path:
    """Write frame directories plus ``manifest.txt`` under ``root``; returns the manifest path.

    With ``balance`` the clip draws are repeated (deterministically) until the
    training clips hold between 35% and 65% positive usable samples.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    height, width = size
    total = n_clips + val_clips + test_clips
    for _ in range(200):
        clips = [square_clip(height, width, frames, rng) for _ in range(total)]
        usable = np.concatenate([labels[4:] for _, labels in clips[:n_clips]])
        if not balance or usable.size == 0 or 0.35 <= usable.mean() <= 0.65:
            break
    manifests = []
    for k, (video, labels) in enumerate(clips):
        split = "train" if k < n_clips else "val" if k < n_clips + val_clips else "test"
        clip_id = f"{split}{k:03d}"
        directory = root / "frames" / clip_id
        directory.mkdir(parents=True, exist_ok=True)
        for t, frame in enumerate(video):
            write_image(directory / f"{t:06d}.png", frame)
        manifests.append(ClipManifest(clip_id, directory, frames, labels, split))
    path = root / "manifest.txt"
    write_manifest(path, manifests)
    return path
