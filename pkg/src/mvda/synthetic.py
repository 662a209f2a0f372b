"""Synthetic two-domain multi-view dataset with a controllable color shift.

Each class renders as a procedural texture (stripe orientation, spatial
frequency and hue are all class-dependent). For every (class, container,
date) a canvas larger than the output size is rendered once; the views of
that container/date are crops of the same canvas at jittered offsets with
jittered brightness, which mimics photographing one plot repeatedly from
slightly different positions. Target-domain images additionally pass through
a fixed per-channel affine color transform plus Gaussian pixel noise: the
domain gap.

The canvas rng is keyed by (seed, class, container, date) only, so source
and target containers with the same index share the underlying scene; with
the shift disabled, paired images differ only by their view jitter.
"""

from __future__ import annotations

import colorsys
import datetime
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imaging import save_image
from .manifest import DatasetManifest, ImageRecord, save_manifest

_TREATMENTS = ["-N", "-P", "-K", "-B", "-S", "ctrl"]
_GENOTYPES = {"source": "alpha", "target": "beta"}
_START_DATE = datetime.date(2022, 6, 21)


@dataclass
class SynthConfig:
    """Generator knobs; the defaults are the desk-scale benchmark dataset."""

    class_count: int = 4
    containers_per_class_per_domain: int = 3
    dates: int = 2
    views_per_container_per_date: int = 8
    image_size: int = 32
    shift_gain: tuple[float, float, float] = (0.9, 0.45, 1.1)
    shift_bias: tuple[float, float, float] = (0.15, 0.05, 0.1)
    noise_sigma: float = 0.03
    crop_jitter: int = 4
    brightness_jitter: float = 0.08
    near_duplicate_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("class_count", "containers_per_class_per_domain", "dates",
                     "views_per_container_per_date"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        if not 0.0 <= self.near_duplicate_fraction <= 1.0:
            raise ValueError("near_duplicate_fraction must be in [0, 1]")

    def record_count(self) -> int:
        return (self.class_count * self.containers_per_class_per_domain * 2
                * self.dates * self.views_per_container_per_date)


def class_names(count: int) -> list[str]:
    if count <= len(_TREATMENTS):
        return _TREATMENTS[:count]
    return [f"t{c}" for c in range(count)]


def _class_palette(c: int, count: int) -> tuple[np.ndarray, np.ndarray]:
    hue = c / count
    bright = colorsys.hsv_to_rgb(hue, 0.85, 0.92)
    dark = colorsys.hsv_to_rgb((hue + 0.09) % 1.0, 0.55, 0.38)
    return np.array(bright), np.array(dark)


def _render_canvas(cfg: SynthConfig, cls: int, container: int, date_idx: int) -> np.ndarray:
    """Class texture on a canvas with room for crop jitter on every side."""
    side = cfg.image_size + 2 * cfg.crop_jitter
    rng = np.random.default_rng([cfg.seed, cls, container, date_idx])
    theta = np.pi * cls / cfg.class_count
    cycles = 2.5 + 0.75 * cls
    phase = rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    wave = (xx * np.cos(theta) + yy * np.sin(theta)) * (2.0 * np.pi * cycles / cfg.image_size)
    stripes = 0.5 + 0.5 * np.sin(wave + phase)
    bright, dark = _class_palette(cls, cfg.class_count)
    canvas = stripes[..., None] * bright + (1.0 - stripes[..., None]) * dark
    # mild per-scene tint so containers of one class are not pixel-clones
    tint = rng.uniform(-0.04, 0.04, size=3)
    return np.clip(canvas + tint, 0.0, 1.0)


def _near_duplicate_count(cfg: SynthConfig) -> int:
    return int(np.floor(cfg.views_per_container_per_date * cfg.near_duplicate_fraction))


def generate_synthetic(cfg: SynthConfig, out_dir: str | Path) -> DatasetManifest:
    """Render the dataset under ``out_dir`` and write manifest.jsonl beside it.

    Byte-identical output for identical configs: every random draw comes from
    a generator keyed by the master seed and the record's coordinates.
    """
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    size = cfg.image_size
    gain = np.asarray(cfg.shift_gain)
    bias = np.asarray(cfg.shift_bias)
    names = class_names(cfg.class_count)
    dup_start = cfg.views_per_container_per_date - _near_duplicate_count(cfg)
    records: list[ImageRecord] = []

    for cls in range(cfg.class_count):
        for container in range(cfg.containers_per_class_per_domain):
            for date_idx in range(cfg.dates):
                canvas = _render_canvas(cfg, cls, container, date_idx)
                date = _START_DATE + datetime.timedelta(days=date_idx)
                for dom_code, domain in enumerate(("source", "target")):
                    geno = _GENOTYPES[domain]
                    container_id = f"{geno}-t{cls}-r{container}"
                    base_jitter = None
                    for view in range(cfg.views_per_container_per_date):
                        rng = np.random.default_rng(
                            [cfg.seed, dom_code, cls, container, date_idx, view]
                        )
                        offy = int(rng.integers(0, 2 * cfg.crop_jitter + 1)) if cfg.crop_jitter else 0
                        offx = int(rng.integers(0, 2 * cfg.crop_jitter + 1)) if cfg.crop_jitter else 0
                        delta = rng.uniform(-cfg.brightness_jitter, cfg.brightness_jitter)
                        if view == 0:
                            base_jitter = (offy, offx, delta)
                        if view >= dup_start:
                            # near-duplicate of view 0: same crop, whisper of brightness
                            offy, offx, delta = base_jitter
                            delta = delta + (rng.random() - 0.5) * 0.004
                        img = canvas[offy:offy + size, offx:offx + size] + delta
                        if domain == "target":
                            img = img * gain + bias
                            if cfg.noise_sigma > 0:
                                img = img + rng.normal(0.0, cfg.noise_sigma, size=img.shape)
                        img = np.clip(img, 0.0, 1.0)
                        rec_id = f"{domain}-{container_id}-{date.isoformat()}-v{view:03d}"
                        rel_path = f"images/{rec_id}.png"
                        save_image(img, out_dir / rel_path)
                        records.append(
                            ImageRecord(
                                id=rec_id,
                                path=rel_path,
                                domain=domain,
                                genotype=geno,
                                container_id=container_id,
                                capture_date=date,
                                view_id=view,
                                label=cls,
                            )
                        )

    manifest = DatasetManifest(records, cfg.class_count, names)
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest
