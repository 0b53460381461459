"""Clip containers, key-frame sampling and the two per-frame input views.

Frames are ``H x W x 3`` uint8 numpy arrays. Both views return float32
arrays scaled to [-1, 1], which is what the encoders consume.
"""

from __future__ import annotations

import logging
import math
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .config import ConfigError, MediaConfig

log = logging.getLogger(__name__)


class MediaError(ValueError):
    """Bad or unreadable media input."""


@dataclass
class VideoClip:
    frames: list[np.ndarray]
    source_id: str
    variant: Any = "original"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.frames:
            raise MediaError(f"clip {self.source_id!r} has no frames")
        shape = self.frames[0].shape
        if len(shape) != 3 or shape[2] != 3:
            raise MediaError(f"frames must be HxWx3, got {shape}")
        for fr in self.frames:
            if fr.shape != shape:
                raise MediaError("all frames of a clip must share the same size")

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    @property
    def height(self) -> int:
        return self.frames[0].shape[0]

    @property
    def width(self) -> int:
        return self.frames[0].shape[1]


@dataclass
class FrameBundle:
    key_frames: list[np.ndarray]
    high_view: list[np.ndarray]
    patch_view: list[list[np.ndarray]]

    @property
    def m(self) -> int:
        return len(self.key_frames)

    def tensors(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(M, 3, Hh, Wh)`` and ``(M, K, 3, P, P)`` float32 tensors."""
        high = torch.from_numpy(np.stack(self.high_view)).permute(0, 3, 1, 2)
        low = torch.from_numpy(np.stack([np.stack(p) for p in self.patch_view]))
        return high.contiguous(), low.permute(0, 1, 4, 2, 3).contiguous()


def key_frame_indices(n: int, m: int) -> list[int]:
    if n < 1:
        raise MediaError("cannot sample key frames from an empty clip")
    if m < 1:
        raise MediaError("number of key frames must be >= 1")
    return [(i * n) // m for i in range(m)]


def sample_key_frames(clip: VideoClip, m: int) -> list[np.ndarray]:
    return [clip.frames[i] for i in key_frame_indices(clip.frame_count, m)]


def normalize(img: np.ndarray) -> np.ndarray:
    return (img.astype(np.float32) / 127.5 - 1.0).astype(np.float32)


def _resize(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize of an HxWxC array (any dtype) to float32 ``h x w x C``."""
    src = img.astype(np.float32)
    if src.shape[:2] == (h, w):
        return src.copy()
    t = torch.from_numpy(src).permute(2, 0, 1)[None]
    down = h < src.shape[0] or w < src.shape[1]
    out = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False, antialias=down)
    return out[0].permute(1, 2, 0).numpy()


def high_level_view(frame: np.ndarray, h_h: int, w_h: int) -> np.ndarray:
    """Resize to exactly ``h_h x w_h`` ignoring aspect ratio, scaled to [-1, 1]."""
    if h_h <= 0 or w_h <= 0:
        raise ConfigError(f"high-level view size must be positive, got {h_h}x{w_h}")
    if frame.size == 0:
        raise MediaError("empty frame")
    out = _resize(frame, h_h, w_h)
    return normalize(np.clip(out, 0.0, 255.0))


def choose_grid(k: int, height: int, width: int) -> tuple[int, int]:
    """Rows x cols with ``rows * cols == k`` closest to the frame's aspect ratio."""
    target = height / width
    best = None
    for rows in range(1, k + 1):
        if k % rows:
            continue
        cols = k // rows
        # ties go to more columns
        key = (abs(rows / cols - target), -cols)
        if best is None or key < best[0]:
            best = (key, (rows, cols))
    return best[1]


def fit_size(height: int, width: int, box_h: int, box_w: int) -> tuple[int, int]:
    """Largest aspect-preserving size inside the box (frame may be upscaled)."""
    scale = min(box_h / height, box_w / width)
    out_h = max(1, math.floor(height * scale + 1e-9))
    out_w = max(1, min(box_w, round(out_h * width / height)))
    return out_h, out_w


def _grid_starts(length: int, n: int, patch: int) -> list[int]:
    if n == 1:
        return [(length - patch) // 2]
    step = (length - patch) / (n - 1)
    return [round(i * step) for i in range(n)]


def patch_layout(height: int, width: int, box_h: int, box_w: int, patch: int, k: int):
    """Resolve resized size, grid and patch rectangles for :func:`patch_view`.

    Returns ``((out_h, out_w), (rows, cols), [(top, left), ...], upscaled)``.
    """
    if patch > box_h or patch > box_w:
        raise ConfigError(f"patch {patch} does not fit box {box_h}x{box_w}")
    if k < 1:
        raise ConfigError("k must be >= 1")
    out_h, out_w = fit_size(height, width, box_h, box_w)
    rows, cols = choose_grid(k, out_h, out_w)
    upscaled = False
    if out_h < rows * patch or out_w < cols * patch:
        upscaled = True
        need = max(rows * patch / out_h, cols * patch / out_w)
        out_h = math.ceil(out_h * need)
        out_w = round(out_h * width / height)
        while out_h < rows * patch or out_w < cols * patch:
            out_h += 1
            out_w = round(out_h * width / height)
    tops = _grid_starts(out_h, rows, patch)
    lefts = _grid_starts(out_w, cols, patch)
    boxes = [(t, l) for t in tops for l in lefts]
    return (out_h, out_w), (rows, cols), boxes, upscaled


def patch_view(frame: np.ndarray, box_h: int, box_w: int, patch: int, k: int) -> list[np.ndarray]:
    """Aspect-preserving resize into the box, then ``k`` disjoint patches on a grid."""
    if frame.size == 0:
        raise MediaError("empty frame")
    h, w = frame.shape[:2]
    (out_h, out_w), grid, boxes, upscaled = patch_layout(h, w, box_h, box_w, patch, k)
    if upscaled:
        log.info(
            "frame %dx%d too small for a %dx%d grid of %d px patches; upscaled to %dx%d",
            h, w, grid[0], grid[1], patch, out_h, out_w,
        )
    resized = normalize(np.clip(_resize(frame, out_h, out_w), 0.0, 255.0))
    return [resized[t : t + patch, l : l + patch].copy() for t, l in boxes]


def make_bundle(clip: VideoClip, cfg: MediaConfig) -> FrameBundle:
    keys = sample_key_frames(clip, cfg.key_frames)
    h_h, w_h = cfg.high_size
    box_h, box_w = cfg.box
    return FrameBundle(
        key_frames=keys,
        high_view=[high_level_view(f, h_h, w_h) for f in keys],
        patch_view=[patch_view(f, box_h, box_w, cfg.patch, cfg.num_patches) for f in keys],
    )


# -- storage -----------------------------------------------------------------


def save_frames(frames: list[np.ndarray], directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, fr in enumerate(frames):
        Image.fromarray(fr).save(directory / f"{i:05d}.png", optimize=False)


def load_clip(path: str | Path, source_id: str | None = None, variant: Any = "original") -> VideoClip:
    """Load a clip from a directory of frame images or, via ffmpeg, a video file."""
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".png", ".bmp", ".jpg", ".jpeg"))
        if not files:
            raise MediaError(f"no frame images in {path}")
        frames = [np.asarray(Image.open(p).convert("RGB")) for p in files]
    elif path.is_file():
        if path.suffix.lower() in (".png", ".bmp", ".jpg", ".jpeg"):
            frames = [np.asarray(Image.open(path).convert("RGB"))]
        else:
            frames = decode_video(path)
    else:
        raise MediaError(f"media not found: {path}")
    return VideoClip(frames=frames, source_id=source_id or path.stem, variant=variant)


def decode_video(path: str | Path, ffmpeg: str = "ffmpeg") -> list[np.ndarray]:
    """Decode a video file to RGB frames with an external ffmpeg binary."""
    exe = shutil.which(ffmpeg)
    if exe is None:
        raise MediaError(f"cannot decode {path}: '{ffmpeg}' not found on PATH")
    with tempfile.TemporaryDirectory() as tmp:
        cmd = [exe, "-loglevel", "error", "-i", str(path), str(Path(tmp) / "%05d.png")]
        proc = subprocess.run(cmd, capture_output=True, text=True)
        if proc.returncode != 0:
            raise MediaError(f"ffmpeg failed on {path}: {proc.stderr.strip()}")
        files = sorted(Path(tmp).glob("*.png"))
        if not files:
            raise MediaError(f"ffmpeg produced no frames for {path}")
        return [np.asarray(Image.open(p).convert("RGB")) for p in files]
