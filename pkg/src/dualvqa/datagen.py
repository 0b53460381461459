"""Synthetic corpus: procedural sources, a monotone distortion ladder, pseudo-MOS
and templated three-sentence captions.

A source's MOS is drawn first. The rendered source is then degraded with
the same distortion kind as its ladder, as far as a flawless source would
have to fall to reach that MOS, so absolute quality is visible in the pixels.
"""

from __future__ import annotations

import json
import logging
import math
import shlex
import shutil
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage
from scipy.fft import dctn, idctn

from .config import ConfigError
from .media import VideoClip, load_clip, save_frames

log = logging.getLogger(__name__)

KINDS = ("BLOCK_QUANT", "GAUSS_BLUR", "ADD_NOISE")
EXTERNAL = "EXTERNAL_CRF"
MOS_RANGE = (1.5, 4.8)
BANDS = ("bad", "poor", "fair", "good", "excellent")


@dataclass(frozen=True)
class DistortionTag:
    kind: str
    severity: int
    levels: int = 20

    def __post_init__(self):
        if self.kind not in KINDS and self.kind != EXTERNAL:
            raise ConfigError(f"unknown distortion kind {self.kind!r}")
        if not 0 <= self.severity <= self.levels:
            raise ConfigError(f"severity {self.severity} outside [0, {self.levels}]")

    @property
    def params(self) -> dict:
        return distortion_params(self.kind, self.severity, self.levels)


def distortion_params(kind: str, severity: int, levels: int = 20) -> dict:
    """Kind-specific strength; every value is non-decreasing in severity.

    The quantizer step grows geometrically (doubling every 4 levels), like a
    codec's quantizer across CRF steps. Ladders are normalized to 20 levels.
    """
    if severity == 0:
        return {_param_name(kind): 0.0}
    if kind == EXTERNAL:
        return {"crf": 15.0 + 38.0 * (severity - 1) / max(levels - 1, 1)}
    return strength(kind, severity * 20.0 / levels)


def strength(kind: str, s: float) -> dict:
    """Parameters at a (possibly fractional) severity on the 20-level scale."""
    if kind == "BLOCK_QUANT":
        return {"step": 3.0 * 2.0 ** (s / 4.0)}
    if kind == "GAUSS_BLUR":
        return {"sigma": 0.6 + 0.2 * (s - 1)}
    if kind == "ADD_NOISE":
        return {"std": 2.5 * s}
    raise ConfigError(f"unknown distortion kind {kind!r}")


def _param_name(kind: str) -> str:
    return {"BLOCK_QUANT": "step", "GAUSS_BLUR": "sigma", "ADD_NOISE": "std", EXTERNAL: "crf"}[kind]


# -- distortions -------------------------------------------------------------


def _block_quant(frame: np.ndarray, step: float) -> np.ndarray:
    h, w, c = frame.shape
    ph, pw = (-h) % 8, (-w) % 8
    x = np.pad(frame.astype(np.float64), ((0, ph), (0, pw), (0, 0)), mode="edge")
    hb, wb = x.shape[0] // 8, x.shape[1] // 8
    blocks = x.reshape(hb, 8, wb, 8, c).transpose(0, 2, 4, 1, 3)
    coef = dctn(blocks, axes=(-2, -1), norm="ortho")
    u = np.arange(8)
    qmat = step * (1.0 + (u[:, None] + u[None, :]) / 4.0)
    coef = np.round(coef / qmat) * qmat
    out = idctn(coef, axes=(-2, -1), norm="ortho").transpose(0, 3, 1, 4, 2).reshape(x.shape)
    return out[:h, :w]


def _blur(frame: np.ndarray, sigma: float) -> np.ndarray:
    return ndimage.gaussian_filter(frame.astype(np.float64), sigma=(sigma, sigma, 0), mode="reflect")


def _noise_field(shape, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(shape)


def apply_distortion(clip: VideoClip, tag: DistortionTag, noise_seed: int = 0) -> VideoClip:
    """Distort every frame; severity 0 returns a pixel-identical copy.

    Noise uses one fixed field per frame scaled by the severity's std, so
    the per-pixel error magnitude never shrinks as severity rises.
    """
    if tag.kind == EXTERNAL:
        raise ConfigError("external-encoder variants are produced by run_encoder_hook")
    frames = []
    for i, fr in enumerate(clip.frames):
        if tag.severity == 0:
            frames.append(fr.copy())
        else:
            frames.append(_quantize(_distort(fr, tag.kind, tag.params, noise_seed * 1009 + i)))
    return VideoClip(frames=frames, source_id=clip.source_id, variant=tag, meta=dict(clip.meta))


def _distort(frame: np.ndarray, kind: str, params: dict, noise_seed: int) -> np.ndarray:
    if kind == "BLOCK_QUANT":
        return _block_quant(frame, params["step"])
    if kind == "GAUSS_BLUR":
        return _blur(frame, params["sigma"])
    return frame.astype(np.float64) + params["std"] * _noise_field(frame.shape, noise_seed)


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def run_encoder_hook(template: str, input_dir: Path, crf: float, output: Path) -> VideoClip:
    """Run an external encoder command with ``{input} {crf} {output}`` filled in."""
    cmd = template.format(input=shlex.quote(str(input_dir)), crf=f"{crf:g}", output=shlex.quote(str(output)))
    proc = subprocess.run(cmd, shell=True, capture_output=True, text=True)
    if proc.returncode != 0:
        raise RuntimeError(f"encoder hook failed ({cmd}): {proc.stderr.strip()}")
    return load_clip(output)


# -- procedural sources --------------------------------------------------------

PALETTES = {
    "warm": [(220, 80, 40), (240, 180, 60), (150, 40, 30)],
    "cool": [(40, 90, 200), (60, 180, 190), (20, 40, 110)],
    "earthy": [(120, 150, 60), (170, 120, 70), (70, 90, 40)],
    "vivid": [(230, 40, 140), (40, 200, 90), (250, 220, 30)],
}
TEXTURES = ("striped", "checkered", "rippled", "speckled")
SHAPES = ("circle", "square", "triangle")
STYLES = ("flat motion graphic", "abstract animated pattern", "synthetic test card")
WORDS = ("HELLO", "VIDEO", "TEST", "NEWS", "SCORE", "PLAY", "GAME", "LIVE")


def source_params(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    palette = str(rng.choice(list(PALETTES)))
    return {
        "seed": int(seed),
        "mos": round(float(rng.uniform(*MOS_RANGE)), 4),
        "palette": palette,
        "texture": str(rng.choice(TEXTURES)),
        "freq": float(rng.uniform(0.08, 0.45)),
        "angle": float(rng.uniform(0, math.pi)),
        "shapes": [str(s) for s in rng.choice(SHAPES, size=int(rng.integers(1, 3)), replace=False)],
        "word": str(rng.choice(WORDS)),
        "style": str(rng.choice(STYLES)),
    }


def _render(params: dict, height: int, width: int, t: int) -> np.ndarray:
    rng = np.random.default_rng(params["seed"] + 7919)
    cols = np.array(PALETTES[params["palette"]], dtype=np.float64)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    dx = 2.0 * t
    ax, ay = math.cos(params["angle"]), math.sin(params["angle"])
    proj = (xx + dx) * ax + yy * ay
    f = params["freq"]
    tex = params["texture"]
    if tex == "striped":
        pat = 0.5 + 0.5 * np.sin(proj * f * 2)
    elif tex == "checkered":
        pat = ((np.floor((xx + dx) * f / 1.5) + np.floor(yy * f / 1.5)) % 2).astype(np.float64)
    elif tex == "rippled":
        r = np.hypot(xx + dx - width / 2, yy - height / 2)
        pat = 0.5 + 0.5 * np.sin(r * f * 1.5)
    else:
        base = rng.random((height // 2 + 1, (width + 64) // 2 + 1))
        base = np.kron(base, np.ones((2, 2)))[:height, int(dx) : int(dx) + width]
        pat = base
    grad = (xx / width)[..., None]
    img = cols[0] * (1 - grad) + cols[2] * grad
    img = img * (0.55 + 0.45 * pat[..., None]) + cols[1] * 0.25 * pat[..., None]
    pil = Image.fromarray(np.clip(img, 0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(pil)
    for i, shape in enumerate(params["shapes"]):
        cx = int(width * (0.25 + 0.45 * i) + 1.5 * t)
        cy = int(height * (0.35 + 0.25 * (i % 2)))
        r = max(4, int(min(height, width) * 0.18))
        color = tuple(int(255 - c) for c in cols[i % 3])
        box = [cx - r, cy - r, cx + r, cy + r]
        if shape == "circle":
            draw.ellipse(box, fill=color)
        elif shape == "square":
            draw.rectangle(box, fill=color)
        else:
            draw.polygon([(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)], fill=color)
    draw.text((4 + t, height - 14), params["word"], fill=(255, 255, 255))
    return np.asarray(pil).astype(np.float64)


TOP_MOS = 5.0


def capture_severity(mos: float, levels: int = 20) -> float:
    """Severity at which a flawless source would have fallen to ``mos``."""
    return max(0.0, levels * (TOP_MOS - mos) / (TOP_MOS - 1.0))


def _capture_defects(img: np.ndarray, mos: float, kind: str, seed: int) -> np.ndarray:
    """Degrade with ``kind`` as far as a flawless source would have to fall to ``mos``.

    Originals then show the same kind of damage as their ladder, so absolute
    quality is readable from the pixels on the same scale as severity.
    """
    s = capture_severity(mos)
    if s <= 0:
        return img
    if kind == "BLOCK_QUANT":
        # off the ladder's block grid, so re-quantizing never lands on the same lattice
        shifted = np.roll(_quantize(img), (4, 4), axis=(0, 1))
        return np.roll(_distort(shifted, kind, strength(kind, s), seed), (-4, -4), axis=(0, 1))
    return _distort(_quantize(img), kind, strength(kind, s), seed)


def synth_source(seed: int, resolution: tuple[int, int] = (90, 160), n_frames: int = 3, defect: str = "GAUSS_BLUR"):
    """Procedural clip plus its MOS. Deterministic in ``seed``.

    ``defect`` is the distortion kind used for the MOS-driven capture defects.
    """
    h, w = resolution
    if h < 1 or w < 1 or n_frames < 1:
        raise ConfigError("resolution and frame count must be positive")
    if defect not in KINDS:
        raise ConfigError(f"unknown distortion kind {defect!r}")
    params = source_params(seed)
    frames = []
    for t in range(n_frames):
        img = _capture_defects(_render(params, h, w, t), params["mos"], defect, seed * 31 + t)
        frames.append(_quantize(img))
    clip = VideoClip(frames=frames, source_id=f"src{seed:05d}", variant="original", meta=params)
    return clip, params["mos"]


def assign_pseudo_mos(mos_orig: float, severity: int, levels: int) -> float:
    if not 0 <= severity <= levels:
        raise ValueError(f"severity {severity} outside [0, {levels}]")
    return mos_orig - (severity / levels) * (mos_orig - 1.0)


def quality_band(score: float) -> str:
    return BANDS[int(min(max(math.floor(score + 0.5), 1), 5)) - 1]


ARTIFACT_NOUN = {
    "BLOCK_QUANT": "blocking artifacts",
    "GAUSS_BLUR": "blur",
    "ADD_NOISE": "noise",
    EXTERNAL: "compression artifacts",
}


def template_caption(params: dict, kind: str, severity: int, levels: int, score: float) -> str:
    shapes = " and ".join(f"a {s}" for s in params["shapes"])
    content = (
        f"The video shows {shapes} moving over a {params['texture']} "
        f"{params['palette']} background with the word {params['word']}."
    )
    style = f"The style is a {params['style']}."
    band = quality_band(score)
    frac = severity / levels if levels else 0.0
    if frac >= 0.6:
        detail = f", with severe {ARTIFACT_NOUN[kind]}"
    elif frac >= 0.25:
        detail = f", with visible {ARTIFACT_NOUN[kind]}"
    else:
        detail = ""
    return f"{content} {style} The technical quality is {band}{detail}."


# -- corpus ------------------------------------------------------------------


@dataclass
class Record:
    clip_path: str
    source_id: str
    kind: str
    severity: int
    levels: int
    mos: float
    is_original: bool
    caption: str
    split: str = "train"
    params: dict = field(default_factory=dict)

    @property
    def tag(self) -> DistortionTag:
        return DistortionTag(self.kind, self.severity, self.levels)


@dataclass
class DatasetManifest:
    records: list[Record]
    root: Path

    def path_of(self, rec: Record) -> Path:
        return self.root / rec.clip_path

    def split(self, name: str) -> list[Record]:
        return [r for r in self.records if r.split == name]

    def sources(self, split: str | None = None) -> dict[str, list[Record]]:
        out: dict[str, list[Record]] = {}
        for r in self.records:
            if split is None or r.split == split:
                out.setdefault(r.source_id, []).append(r)
        for recs in out.values():
            recs.sort(key=lambda r: r.severity)
        return out

    def validate(self) -> None:
        originals = {r.source_id: r for r in self.records if r.is_original}
        for r in self.records:
            if r.source_id not in originals:
                raise ValueError(f"record {r.clip_path} has no original for source {r.source_id}")
        for sid, recs in self.sources().items():
            vals = [r.mos for r in recs]
            if any(b >= a for a, b in zip(vals, vals[1:])):
                raise ValueError(f"pseudo-MOS not strictly decreasing for source {sid}")

    def write(self, path: Path | None = None) -> Path:
        path = path or self.root / "manifest.jsonl"
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r), sort_keys=True, ensure_ascii=False) + "\n")
        return path

    @classmethod
    def read(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.jsonl"
        records = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    records.append(Record(**json.loads(line)))
        return cls(records=records, root=path.parent)


def split_sources(source_ids: list[str], test_sources: int, seed: int) -> set[str]:
    if test_sources >= len(source_ids):
        raise ConfigError("test_sources must leave at least one training source")
    order = np.random.default_rng(seed + 1).permutation(len(source_ids))
    return {source_ids[i] for i in order[:test_sources]}


def build_corpus(
    out_dir: str | Path,
    n_sources: int = 10,
    levels: int = 20,
    kinds=("GAUSS_BLUR",),
    seed: int = 0,
    resolution: tuple[int, int] = (90, 160),
    n_frames: int = 3,
    test_sources: int = 2,
    encoder_cmd: str = "",
) -> DatasetManifest:
    """Write originals and full severity ladders to ``out_dir`` and return the manifest."""
    if n_sources < 1:
        raise ConfigError("n_sources must be >= 1")
    for k in kinds:
        if k not in KINDS:
            raise ConfigError(f"unknown distortion kind {k!r}")
    out_dir = Path(out_dir)
    records: list[Record] = []
    seeds = [seed * 100_003 + i for i in range(n_sources)]
    for i, src_seed in enumerate(seeds):
        defect = kinds[i % len(kinds)]
        clip, mos = synth_source(src_seed, resolution, n_frames, defect)
        kind = EXTERNAL if encoder_cmd else defect
        src_dir = Path("clips") / clip.source_id
        for sev in range(levels + 1):
            rel = src_dir / f"s{sev:02d}"
            target = out_dir / rel
            try:
                if sev == 0:
                    variant = clip
                elif encoder_cmd:
                    crf = distortion_params(EXTERNAL, sev, levels)["crf"]
                    tmp = out_dir / src_dir / f"enc{sev:02d}"
                    variant = run_encoder_hook(encoder_cmd, out_dir / src_dir / "s00", crf, tmp)
                    if tmp.exists():
                        shutil.rmtree(tmp) if tmp.is_dir() else tmp.unlink()
                else:
                    variant = apply_distortion(clip, DistortionTag(kind, sev, levels), noise_seed=src_seed)
                save_frames(variant.frames, target)
            except OSError as exc:
                raise OSError(f"failed writing clip {target}: {exc}") from exc
            q = assign_pseudo_mos(mos, sev, levels)
            records.append(
                Record(
                    clip_path=str(rel),
                    source_id=clip.source_id,
                    kind=kind,
                    severity=sev,
                    levels=levels,
                    mos=q,
                    is_original=sev == 0,
                    caption=template_caption(clip.meta, kind, sev, levels, q),
                    params=clip.meta if sev == 0 else {},
                )
            )
    test_ids = split_sources([f"src{s:05d}" for s in seeds], test_sources, seed) if test_sources else set()
    for r in records:
        r.split = "test" if r.source_id in test_ids else "train"
    manifest = DatasetManifest(records=records, root=out_dir)
    manifest.validate()
    manifest.write()
    log.info("wrote %d records to %s", len(records), out_dir)
    return manifest
