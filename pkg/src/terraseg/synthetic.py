"""Bundled synthetic RGB-D-T dataset for tests, demos, and smoke runs.

Every frame shares the same color and depth scene (a rock slab, a bush,
black void borders on the left and right, compact-soil background). The
thermal plane is the only thing that varies: each frame warms a different
half of the background, and warm background pixels are labeled sandy while
cool ones stay compact. Over the four layout patterns each background
pixel is sandy in exactly half the frames, so with the thermal channel
removed the sandy/compact distinction is irreducibly ambiguous - which is
what the modality-sensitivity checks rely on.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .data import (
    ClassSet,
    DatasetManifest,
    ManifestEntry,
    Normalization,
    KELVIN_OFFSET,
    save_manifest,
)
from .errors import ConfigurationError

# The classes distinguishable only through the thermal channel.
THERMAL_PAIR = ("compact", "sandy")

BORDER = 4

_RGB = {
    "void": (0.0, 0.0, 0.0),
    "background": (0.45, 0.40, 0.30),
    "rock": (0.35, 0.18, 0.15),
    "bush": (0.10, 0.45, 0.15),
}

_DEPTH_M = {"void": 0.0, "background": 3.0, "rock": 1.5, "bush": 2.5}

_THERMAL_C = {"rock": 18.0, "bush": 20.0, "compact": 15.0, "sandy": 35.0}


def _scene_masks(size: int) -> dict:
    """Boolean region masks; all boundaries sit on multiples of four pixels."""
    height = width = size
    q = size // 4
    void = np.zeros((height, width), dtype=bool)
    void[:, :BORDER] = True
    void[:, width - BORDER :] = True
    rock = np.zeros_like(void)
    rock[q // 2 : q // 2 + q, q // 2 : q // 2 + q] = True
    bush = np.zeros_like(void)
    bush[height - q - q // 2 : height - q // 2, width - 2 * q : width - q] = True
    rock &= ~void
    bush &= ~void & ~rock
    background = ~(void | rock | bush)
    return {"void": void, "rock": rock, "bush": bush, "background": background}


def _warm_mask(size: int, pattern: int) -> np.ndarray:
    """Which half of the grid runs warm for a given frame pattern."""
    warm = np.zeros((size, size), dtype=bool)
    half = size // 2
    pattern = pattern % 4
    if pattern == 0:
        warm[:, :half] = True
    elif pattern == 1:
        warm[:, half:] = True
    elif pattern == 2:
        warm[:half, :] = True
    else:
        warm[half:, :] = True
    return warm


def build_frame(size: int, pattern: int, class_set: ClassSet) -> dict:
    """Physical-unit planes plus the label mask for one frame."""
    masks = _scene_masks(size)
    index = {name: i for i, name in enumerate(class_set.names)}

    rgb = np.zeros((size, size, 3), dtype=np.float32)
    depth = np.zeros((size, size), dtype=np.float32)
    for region in ("void", "background", "rock", "bush"):
        rgb[masks[region]] = _RGB[region]
        depth[masks[region]] = _DEPTH_M[region]

    sandy = masks["background"] & _warm_mask(size, pattern)
    compact = masks["background"] & ~sandy

    thermal = np.zeros((size, size), dtype=np.float32)
    thermal[masks["void"]] = -KELVIN_OFFSET  # raw zero: no reading
    thermal[masks["rock"]] = _THERMAL_C["rock"]
    thermal[masks["bush"]] = _THERMAL_C["bush"]
    thermal[compact] = _THERMAL_C["compact"]
    thermal[sandy] = _THERMAL_C["sandy"]

    label = np.zeros((size, size), dtype=np.int32)
    label[masks["void"]] = index["void"]
    label[masks["rock"]] = index["rock"]
    label[masks["bush"]] = index["bush"]
    label[compact] = index["compact"]
    label[sandy] = index["sandy"]

    return {"rgb": rgb, "depth": depth, "thermal": thermal, "label": label}


def _write_frame(out_dir: Path, frame_id: str, planes: dict, class_set: ClassSet) -> ManifestEntry:
    rgb8 = np.round(planes["rgb"] * 255.0).astype(np.uint8)
    depth16 = np.round(planes["depth"] * 1000.0).astype(np.uint16)
    thermal16 = np.round((planes["thermal"] + KELVIN_OFFSET) * 10.0).astype(np.uint16)
    palette = np.asarray(class_set.palette, dtype=np.uint8)
    label_rgb = palette[planes["label"]]

    paths = {
        "rgb": f"{frame_id}_rgb.png",
        "depth": f"{frame_id}_depth.png",
        "thermal": f"{frame_id}_thermal.png",
        "label": f"{frame_id}_label.png",
    }
    Image.fromarray(rgb8).save(out_dir / paths["rgb"])
    Image.fromarray(depth16).save(out_dir / paths["depth"])
    Image.fromarray(thermal16).save(out_dir / paths["thermal"])
    Image.fromarray(label_rgb).save(out_dir / paths["label"])
    return ManifestEntry(
        id=frame_id,
        rgb_path=paths["rgb"],
        depth_path=paths["depth"],
        thermal_path=paths["thermal"],
        label_path=paths["label"],
    )


def generate_synthetic_dataset(out_dir, n_frames: int = 4, size: int = 64) -> Path:
    """Write frames plus manifest into ``out_dir``; returns the manifest path."""
    if size < 16 or size % 4:
        raise ConfigurationError(f"synthetic frame size must be a multiple of 4 and >= 16, got {size}")
    if n_frames < 1:
        raise ConfigurationError("n_frames must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    class_set = ClassSet()
    entries = []
    for k in range(n_frames):
        planes = build_frame(size, pattern=k, class_set=class_set)
        entries.append(_write_frame(out_dir, f"synth{k:04d}", planes, class_set))
    normalization = Normalization(
        depth_max_m=10.0,
        thermal_min_c=0.0,
        thermal_max_c=40.0,
        channel_mean=(0.5, 0.5, 0.5, 0.5, 0.5),
        channel_std=(0.5, 0.5, 0.5, 0.5, 0.5),
    )
    manifest = DatasetManifest(entries=entries, class_set=class_set, normalization=normalization, root=out_dir)
    manifest_path = out_dir / "manifest.jsonl"
    save_manifest(manifest_path, manifest)
    return manifest_path
