"""Aligned-pair datasets: synthetic generation, on-disk reader, preprocessing.

The synthetic generator renders class-dependent geometric primitives into
the RGB modality and a correlated extruded height field into the second
modality, so cross-modal objectives have real signal at desk scale.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .masking import Modality, ModalityImage


@dataclass
class ModalityPair:
    rgb: ModalityImage
    other: ModalityImage
    pair_id: str
    label: int | None = None

    def __post_init__(self):
        if self.rgb.pixels.shape != self.other.pixels.shape:
            raise ValueError(f"pair {self.pair_id}: modality shapes differ")
        if self.rgb.patch_size != self.other.patch_size:
            raise ValueError(f"pair {self.pair_id}: patch sizes differ")


@dataclass
class DatasetManifest:
    root: Path
    entries: list[tuple[str, str, str]]  # (pair_id, rgb_relpath, other_relpath)
    mean_rgb: np.ndarray = field(default_factory=lambda: np.zeros(3))
    std_rgb: np.ndarray = field(default_factory=lambda: np.ones(3))
    mean_other: np.ndarray = field(default_factory=lambda: np.zeros(3))
    std_other: np.ndarray = field(default_factory=lambda: np.ones(3))
    tile_size: int = 512


def _smooth_noise(rng: np.random.Generator, size: int, cells: int, amp: float) -> np.ndarray:
    """Low-frequency noise: coarse grid upsampled bilinearly."""
    coarse = rng.normal(0.0, amp, size=(cells, cells))
    idx = np.linspace(0, cells - 1, size)
    i0 = np.floor(idx).astype(int)
    i1 = np.minimum(i0 + 1, cells - 1)
    t = idx - i0
    rows = coarse[i0][:, i0] * np.outer(1 - t, 1 - t)
    rows += coarse[i1][:, i0] * np.outer(t, 1 - t)
    rows += coarse[i0][:, i1] * np.outer(1 - t, t)
    rows += coarse[i1][:, i1] * np.outer(t, t)
    return rows


def generate_synthetic_pair(
    seed: int, size: int, n_classes: int, patch_size: int = 16
) -> ModalityPair:
    """Deterministic aligned RGB / height-field pair with a class label.

    Classes differ by primitive shape and count rather than mere brightness,
    so the label is only weakly linear in raw pixel means.
    """
    if size % patch_size:
        raise ValueError("size must be divisible by patch_size")
    rng = np.random.default_rng(seed)
    label = int(rng.integers(n_classes))

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    rgb = np.zeros((size, size, 3))
    height = np.zeros((size, size))
    rgb += 0.35 + _smooth_noise(rng, size, 4, 0.05)[..., None]

    def add_rect(cx, cy, hw, hh, color, h):
        m = (np.abs(xx - cx) <= hw) & (np.abs(yy - cy) <= hh)
        rgb[m] = color
        height[m] = np.maximum(height[m], h)

    def add_disk(cx, cy, r, color, h):
        m = (xx - cx) ** 2 + (yy - cy) ** 2 <= r**2
        rgb[m] = color
        height[m] = np.maximum(height[m], h)

    def add_ring(cx, cy, r_out, r_in, color, h):
        d2 = (xx - cx) ** 2 + (yy - cy) ** 2
        m = (d2 <= r_out**2) & (d2 > r_in**2)
        rgb[m] = color
        height[m] = np.maximum(height[m], h)

    # all classes share one palette and one height distribution; the classes
    # differ by geometry (and a deliberately tiny red-channel bias below), so
    # mean pooling alone separates them only weakly
    def rand_color():
        return np.clip(rng.uniform(0.3, 0.7, 3), 0, 1)

    def rand_height():
        return rng.uniform(0.3, 0.8)

    s = size
    if label == 0:
        # a couple of large solid rectangles
        for _ in range(2):
            add_rect(
                rng.uniform(0.25, 0.75) * s,
                rng.uniform(0.25, 0.75) * s,
                rng.uniform(0.09, 0.14) * s,
                rng.uniform(0.09, 0.14) * s,
                rand_color(),
                rand_height(),
            )
    elif label == 1:
        # many scattered small disks
        for _ in range(16):
            add_disk(
                rng.uniform(0.08, 0.92) * s,
                rng.uniform(0.08, 0.92) * s,
                rng.uniform(0.04, 0.06) * s,
                rand_color(),
                rand_height(),
            )
    elif label == 2:
        # two full-width stripes, horizontal or vertical
        horizontal = rng.random() < 0.5
        for _ in range(2):
            c = rng.uniform(0.1, 0.9) * s
            half = rng.uniform(0.02, 0.04) * s
            if horizontal:
                add_rect(0.5 * s, c, 0.6 * s, half, rand_color(), rand_height())
            else:
                add_rect(c, 0.5 * s, half, 0.6 * s, rand_color(), rand_height())
    else:
        # one large ring plus a small solid rectangle
        r_out = rng.uniform(0.20, 0.24) * s
        add_ring(
            rng.uniform(0.35, 0.65) * s,
            rng.uniform(0.35, 0.65) * s,
            r_out,
            0.62 * r_out,
            rand_color(),
            rand_height(),
        )
        add_rect(
            rng.uniform(0.15, 0.85) * s,
            rng.uniform(0.15, 0.85) * s,
            rng.uniform(0.05, 0.08) * s,
            rng.uniform(0.05, 0.08) * s,
            rand_color(),
            rand_height(),
        )

    # per-image photometric jitter: global mean statistics are a weak class
    # cue, so the label is carried mostly by geometry
    rgb *= rng.uniform(0.85, 1.15, 3)
    rgb += rng.uniform(-0.08, 0.08)
    height *= rng.uniform(0.7, 1.3)

    # small class-dependent bias keeps raw pixel means above-chance separable
    rgb[..., 0] += 0.012 * label
    rgb += rng.normal(0, 0.02, rgb.shape)
    height += _smooth_noise(rng, size, 4, 0.03)
    other = replicate_dsm_channels(np.clip(height, 0, None))
    pair_id = f"synth-{seed:08d}"
    return ModalityPair(
        rgb=ModalityImage(np.clip(rgb, 0, 1), Modality.RGB, patch_size),
        other=ModalityImage(np.clip(other, 0, 1.5), Modality.OTHER, patch_size),
        pair_id=pair_id,
        label=label,
    )


def make_synthetic_dataset(
    n: int, seed: int, size: int, n_classes: int = 4, patch_size: int = 16
) -> list[ModalityPair]:
    base = np.random.SeedSequence([seed, n_classes]).generate_state(n)
    return [
        generate_synthetic_pair(int(s), size, n_classes, patch_size) for s in base
    ]


def replicate_dsm_channels(dsm: np.ndarray) -> np.ndarray:
    """Stack a single-channel raster into three identical channels."""
    dsm = np.asarray(dsm, dtype=np.float64)
    if dsm.ndim == 3:
        if dsm.shape[2] != 1:
            raise ValueError(f"expected single-channel input, got {dsm.shape[2]} channels")
        dsm = dsm[..., 0]
    if dsm.ndim != 2:
        raise ValueError("expected an H x W raster")
    return np.repeat(dsm[..., None], 3, axis=2)


def normalize(image: ModalityImage, mean, std) -> ModalityImage:
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise ValueError("std must be > 0 per channel")
    return ModalityImage((image.pixels - mean) / std, image.modality, image.patch_size)


def denormalize(image: ModalityImage, mean, std) -> ModalityImage:
    return ModalityImage(
        image.pixels * np.asarray(std) + np.asarray(mean),
        image.modality,
        image.patch_size,
    )


# ---------------------------------------------------------------------------
# On-disk layout: <root>/<pair_id>_dom.png (8-bit, 3ch) and
# <root>/<pair_id>_dsm.tif (32-bit float, 1ch), plus a TSV manifest and a
# key=value stats sidecar.
# ---------------------------------------------------------------------------

def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    with open(path, "w") as f:
        for pair_id, rgb_rel, other_rel in manifest.entries:
            f.write(f"{pair_id}\t{rgb_rel}\t{other_rel}\n")
    with open(path.with_suffix(".stats"), "w") as f:
        f.write(f"tile_size={manifest.tile_size}\n")
        for name in ("mean_rgb", "std_rgb", "mean_other", "std_other"):
            vals = ",".join(repr(float(v)) for v in getattr(manifest, name))
            f.write(f"{name}={vals}\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    entries = []
    with open(path) as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"malformed manifest line: {line!r}")
            entries.append(tuple(parts))
    manifest = DatasetManifest(root=path.parent, entries=entries)
    stats_path = path.with_suffix(".stats")
    if stats_path.exists():
        with open(stats_path) as f:
            for line in f:
                key, _, val = line.strip().partition("=")
                if key == "tile_size":
                    manifest.tile_size = int(val)
                elif key in ("mean_rgb", "std_rgb", "mean_other", "std_other"):
                    setattr(manifest, key, np.array([float(v) for v in val.split(",")]))
    return manifest


def load_hr_pairs(manifest: DatasetManifest, patch_size: int = 16) -> Iterator[ModalityPair]:
    """Yield aligned, normalized pairs in manifest order.

    RGB tiles must be 3-channel 8-bit images, height tiles single-channel
    float rasters, both of the manifest tile size. Any violation raises
    naming the pair_id; nothing is silently skipped.
    """
    from PIL import Image

    for pair_id, rgb_rel, other_rel in manifest.entries:
        rgb_path = manifest.root / rgb_rel
        other_path = manifest.root / other_rel
        for p in (rgb_path, other_path):
            if not p.exists():
                raise FileNotFoundError(f"pair {pair_id}: missing file {p}")
        rgb = np.asarray(Image.open(rgb_path), dtype=np.float64)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ValueError(f"pair {pair_id}: RGB tile must have 3 channels")
        dsm = np.asarray(Image.open(other_path), dtype=np.float64)
        if dsm.ndim != 2:
            raise ValueError(f"pair {pair_id}: height tile must be single-channel")
        ts = manifest.tile_size
        if rgb.shape[:2] != (ts, ts) or dsm.shape != (ts, ts):
            raise ValueError(
                f"pair {pair_id}: tile size mismatch "
                f"(rgb {rgb.shape[:2]}, other {dsm.shape}, expected {(ts, ts)})"
            )
        if not (np.all(np.isfinite(rgb)) and np.all(np.isfinite(dsm))):
            raise ValueError(f"pair {pair_id}: non-finite pixel values")
        rgb = rgb / 255.0
        # per-tile min-max before global standardization: raw heights vary by site
        lo, hi = dsm.min(), dsm.max()
        dsm = (dsm - lo) / (hi - lo) if hi > lo else np.zeros_like(dsm)
        rgb_img = normalize(
            ModalityImage(rgb, Modality.RGB, patch_size),
            manifest.mean_rgb,
            manifest.std_rgb,
        )
        other_img = normalize(
            ModalityImage(
                replicate_dsm_channels(dsm), Modality.OTHER, patch_size
            ),
            manifest.mean_other,
            manifest.std_other,
        )
        yield ModalityPair(rgb_img, other_img, pair_id)


def write_synthetic_dataset(
    out_dir, n: int, seed: int, size: int, n_classes: int = 4
) -> Path:
    """Render a synthetic dataset to disk in the pair layout; returns manifest path."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    labels = []
    pairs = make_synthetic_dataset(n, seed, size, n_classes)
    for pair in pairs:
        rgb_rel = f"{pair.pair_id}_dom.png"
        other_rel = f"{pair.pair_id}_dsm.tif"
        Image.fromarray((np.clip(pair.rgb.pixels, 0, 1) * 255).astype(np.uint8)).save(
            out_dir / rgb_rel
        )
        Image.fromarray(pair.other.pixels[..., 0].astype(np.float32), mode="F").save(
            out_dir / other_rel
        )
        entries.append((pair.pair_id, rgb_rel, other_rel))
        labels.append(pair.label)
    manifest = DatasetManifest(root=out_dir, entries=entries, tile_size=size)
    manifest_path = out_dir / "manifest.tsv"
    write_manifest(manifest, manifest_path)
    with open(out_dir / "labels.tsv", "w") as f:
        for (pair_id, _, _), label in zip(entries, labels):
            f.write(f"{pair_id}\t{label}\n")
    return manifest_path
