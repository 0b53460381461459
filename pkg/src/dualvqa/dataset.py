"""Manifest-backed clip access with a preprocessed tensor cache."""

from __future__ import annotations

import logging
from pathlib import Path

import torch

from .config import MediaConfig
from .datagen import DatasetManifest, Record
from .media import MediaError, load_clip, make_bundle

log = logging.getLogger(__name__)


class ClipStore:
    """Loads clips listed in a manifest and caches their two encoder views."""

    def __init__(self, manifest: DatasetManifest, media: MediaConfig):
        self.manifest = manifest
        self.media = media
        self._cache: dict[str, tuple[torch.Tensor, torch.Tensor]] = {}

    @classmethod
    def open(cls, path: str | Path, media: MediaConfig) -> "ClipStore":
        return cls(DatasetManifest.read(path), media)

    @property
    def records(self) -> list[Record]:
        return self.manifest.records

    def views(self, rec: Record) -> tuple[torch.Tensor, torch.Tensor]:
        """``(M, 3, Hh, Wh)`` and ``(M, K, 3, P, P)`` tensors for ``rec``."""
        key = rec.clip_path
        if key not in self._cache:
            clip = load_clip(self.manifest.path_of(rec), rec.source_id)
            self._cache[key] = make_bundle(clip, self.media).tensors()
        return self._cache[key]

    def stack(self, recs: list[Record], dtype=torch.float32):
        highs, lows = zip(*(self.views(r) for r in recs))
        return torch.stack(highs).to(dtype), torch.stack(lows).to(dtype)

    def available(self, recs: list[Record]) -> tuple[list[Record], int]:
        """Records whose media loads, plus the number skipped."""
        ok, skipped = [], 0
        for r in recs:
            try:
                self.views(r)
            except (MediaError, OSError) as exc:
                log.warning("skipping %s: %s", r.clip_path, exc)
                skipped += 1
            else:
                ok.append(r)
        return ok, skipped
