"""Dataset ingestion: aligned RGB-D-T frames, label masks, splits, batches.

File conventions (all images lossless PNG):
  rgb      8-bit, 3 channels
  depth    16-bit single plane, integer millimeters (0 = no return)
  thermal  16-bit single plane, integer deci-Kelvin (value/10 - 273.15 C)
  label    palette colors from the class set, matched exactly

The manifest is line-delimited JSON: the first line is a header object
holding the class set and normalization constants, each following line
is one frame entry with paths relative to the manifest's directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigurationError, DataError

KELVIN_OFFSET = 273.15

BASEPROD_CLASS_NAMES = ("void", "compact", "grass", "bedrock", "sandy", "gravel", "rock", "bush")

BASEPROD_PALETTE = (
    (0, 0, 0),        # void
    (170, 120, 70),   # compact
    (60, 180, 75),    # grass
    (128, 128, 128),  # bedrock
    (255, 225, 25),   # sandy
    (145, 30, 180),   # gravel
    (230, 25, 75),    # rock
    (70, 240, 240),   # bush
)


@dataclass(frozen=True)
class ClassSet:
    """Ordered class names with palette colors; index 0 is void by default."""

    names: tuple = BASEPROD_CLASS_NAMES
    palette: tuple = BASEPROD_PALETTE
    void_index: int = 0

    def __post_init__(self):
        if len(self.names) != len(set(self.names)):
            raise ConfigurationError("class names must be unique")
        if len(self.palette) != len(self.names):
            raise ConfigurationError("palette size must match class count")
        if len(set(self.palette)) != len(self.palette):
            raise ConfigurationError("palette colors must be unique")
        if not 0 <= self.void_index < len(self.names):
            raise ConfigurationError("void_index out of range")

    def __len__(self) -> int:
        return len(self.names)

    def color_of(self, index: int) -> tuple:
        return self.palette[index]

    def to_dict(self) -> dict:
        return {"names": list(self.names), "palette": [list(c) for c in self.palette], "void_index": self.void_index}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassSet":
        return cls(names=tuple(d["names"]), palette=tuple(tuple(c) for c in d["palette"]), void_index=int(d["void_index"]))


@dataclass
class Normalization:
    """Channel scaling constants; bounds come from the sensors, not the code."""

    depth_max_m: float = 10.0
    thermal_min_c: float = -20.0
    thermal_max_c: float = 60.0
    channel_mean: tuple = (0.0, 0.0, 0.0, 0.0, 0.0)
    channel_std: tuple = (1.0, 1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.depth_max_m <= 0:
            raise ConfigurationError("depth_max_m must be positive")
        if self.thermal_min_c >= self.thermal_max_c:
            raise ConfigurationError("thermal bounds must be strictly ordered")
        if any(s <= 0 for s in self.channel_std):
            raise ConfigurationError("channel_std entries must be positive")

    def to_dict(self) -> dict:
        return {
            "depth_max_m": self.depth_max_m,
            "thermal_min_c": self.thermal_min_c,
            "thermal_max_c": self.thermal_max_c,
            "channel_mean": list(self.channel_mean),
            "channel_std": list(self.channel_std),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Normalization":
        return cls(
            depth_max_m=float(d["depth_max_m"]),
            thermal_min_c=float(d["thermal_min_c"]),
            thermal_max_c=float(d["thermal_max_c"]),
            channel_mean=tuple(d.get("channel_mean", (0.0,) * 5)),
            channel_std=tuple(d.get("channel_std", (1.0,) * 5)),
        )


@dataclass
class ManifestEntry:
    id: str
    rgb_path: str
    depth_path: str
    thermal_path: str
    label_path: Optional[str] = None


@dataclass
class DatasetManifest:
    entries: list
    class_set: ClassSet
    normalization: Normalization
    root: Path = field(default_factory=Path)

    def resolve(self, relative: str) -> Path:
        return self.root / relative

    def labeled_entries(self) -> list:
        return [e for e in self.entries if e.label_path is not None]


@dataclass
class MultimodalFrame:
    """One aligned capture: color in [0,1], depth in meters, thermal in Celsius."""

    id: str
    rgb: np.ndarray
    depth: np.ndarray
    thermal: np.ndarray
    label: Optional[np.ndarray] = None

    @property
    def extents(self) -> tuple:
        return self.rgb.shape[:2]


def save_manifest(path: Path, manifest: DatasetManifest) -> None:
    path = Path(path)
    header = {
        "class_set": manifest.class_set.to_dict(),
        "normalization": manifest.normalization.to_dict(),
    }
    with path.open("w") as fh:
        fh.write(json.dumps(header) + "\n")
        for e in manifest.entries:
            record = {"id": e.id, "rgb": e.rgb_path, "depth": e.depth_path, "thermal": e.thermal_path}
            if e.label_path is not None:
                record["label"] = e.label_path
            fh.write(json.dumps(record) + "\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    with path.open() as fh:
        lines = [line for line in (raw.strip() for raw in fh) if line]
    if not lines:
        raise DataError(f"manifest is empty: {path}")
    try:
        header = json.loads(lines[0])
        class_set = ClassSet.from_dict(header["class_set"])
        normalization = Normalization.from_dict(header["normalization"])
        entries = []
        for line in lines[1:]:
            rec = json.loads(line)
            entries.append(ManifestEntry(
                id=str(rec["id"]),
                rgb_path=rec["rgb"],
                depth_path=rec["depth"],
                thermal_path=rec["thermal"],
                label_path=rec.get("label"),
            ))
    except (KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"malformed manifest {path}: {exc}") from exc
    return DatasetManifest(entries=entries, class_set=class_set, normalization=normalization, root=path.parent)


def _read_image(path: Path, entry_id: str) -> np.ndarray:
    if not path.exists():
        raise DataError(f"entry {entry_id}: missing file {path}")
    with Image.open(path) as img:
        return np.array(img)


def _palette_lookup(colors: np.ndarray, class_set: ClassSet, entry_id: str) -> np.ndarray:
    """Exact color -> class index; any unknown color is a hard error."""
    packed = (colors[..., 0].astype(np.int64) << 16) | (colors[..., 1].astype(np.int64) << 8) | colors[..., 2]
    table = {(r << 16) | (g << 8) | b: i for i, (r, g, b) in enumerate(class_set.palette)}
    label = np.full(packed.shape, -1, dtype=np.int32)
    for key, index in table.items():
        label[packed == key] = index
    if (label < 0).any():
        bad = np.unique(packed[label < 0])[0]
        rgb = ((bad >> 16) & 255, (bad >> 8) & 255, bad & 255)
        raise DataError(f"entry {entry_id}: label color {rgb} not in palette")
    return label


def load_frame(entry: ManifestEntry, manifest: DatasetManifest) -> MultimodalFrame:
    """Decode and convert one entry to physical units."""
    rgb_raw = _read_image(manifest.resolve(entry.rgb_path), entry.id)
    if rgb_raw.ndim != 3 or rgb_raw.shape[2] < 3:
        raise DataError(f"entry {entry.id}: rgb image must have 3 channels, got shape {rgb_raw.shape}")
    rgb = rgb_raw[..., :3].astype(np.float32) / 255.0

    depth_raw = _read_image(manifest.resolve(entry.depth_path), entry.id)
    if depth_raw.ndim != 2:
        raise DataError(f"entry {entry.id}: depth image must be single-plane")
    depth = depth_raw.astype(np.float32) / 1000.0  # millimeters -> meters

    thermal_raw = _read_image(manifest.resolve(entry.thermal_path), entry.id)
    if thermal_raw.ndim != 2:
        raise DataError(f"entry {entry.id}: thermal image must be single-plane")
    thermal = thermal_raw.astype(np.float32) / 10.0 - KELVIN_OFFSET  # deci-Kelvin -> Celsius

    label = None
    if entry.label_path is not None:
        label_file = manifest.resolve(entry.label_path)
        if not label_file.exists():
            raise DataError(f"entry {entry.id}: missing file {label_file}")
        with Image.open(label_file) as img:
            colors = np.array(img.convert("RGB"))
        label = _palette_lookup(colors, manifest.class_set, entry.id)

    extents = rgb.shape[:2]
    for name, plane in (("depth", depth), ("thermal", thermal)) + ((("label", label),) if label is not None else ()):
        if plane.shape[:2] != extents:
            raise DataError(f"entry {entry.id}: {name} extents {plane.shape[:2]} != rgb extents {extents}")
    return MultimodalFrame(id=entry.id, rgb=rgb, depth=depth, thermal=thermal, label=label)


def normalize(frame: MultimodalFrame, manifest: DatasetManifest) -> np.ndarray:
    """Five-channel (5, H, W) float32 network input.

    RGB passes through; depth is clamped to [0, depth_max] and scaled to
    [0,1] (invalid zero depth stays 0); thermal maps its configured window
    to [0,1] with clamping. All channels are then standardized with the
    manifest's per-channel mean/std.
    """
    norm = manifest.normalization
    h, w = frame.extents
    out = np.empty((5, h, w), dtype=np.float32)
    out[0:3] = frame.rgb.transpose(2, 0, 1)
    out[3] = np.clip(frame.depth / norm.depth_max_m, 0.0, 1.0)
    span = norm.thermal_max_c - norm.thermal_min_c
    out[4] = np.clip((frame.thermal - norm.thermal_min_c) / span, 0.0, 1.0)
    mean = np.asarray(norm.channel_mean, dtype=np.float32)[:, None, None]
    std = np.asarray(norm.channel_std, dtype=np.float32)[:, None, None]
    return (out - mean) / std


def split_dataset(entries: Sequence[ManifestEntry], ratio: float, seed: int) -> tuple:
    """Deterministic shuffle, then the first ceil(ratio * n) entries train."""
    if not 0.0 < ratio < 1.0:
        raise ConfigurationError(f"split ratio must be in (0, 1), got {ratio}")
    entries = list(entries)
    if not entries:
        raise DataError("cannot split an empty dataset")
    order = np.random.default_rng(seed).permutation(len(entries))
    n_train = int(np.ceil(ratio * len(entries)))
    train = [entries[i] for i in order[:n_train]]
    val = [entries[i] for i in order[n_train:]]
    return train, val


@dataclass
class Batch:
    inputs: np.ndarray   # (N, 5, H, W) float32
    labels: np.ndarray   # (N, H, W) int32
    ids: tuple


def _pad_to(arr: np.ndarray, h: int, w: int, fill=0.0) -> np.ndarray:
    ph, pw = h - arr.shape[-2], w - arr.shape[-1]
    if ph == 0 and pw == 0:
        return arr
    widths = [(0, 0)] * (arr.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(arr, widths, constant_values=fill)


def batches(entries: Sequence[ManifestEntry], manifest: DatasetManifest, batch_size: int,
            seed: int, epoch: int, shuffle: bool = True,
            ablate_channels: Sequence[int] = ()) -> Iterator[Batch]:
    """Yield label-bearing batches in a per-epoch deterministic order.

    Frames of unequal extents within a batch are right/bottom padded to the
    batch maximum; padded label pixels get the void class. ``ablate_channels``
    zeroes the listed input channels (modality ablation).
    """
    entries = list(entries)
    for c in ablate_channels:
        if not 0 <= c < 5:
            raise ConfigurationError(f"ablate channel {c} outside the 5-channel input")
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(len(entries))
    else:
        order = np.arange(len(entries))
    void = manifest.class_set.void_index
    for start in range(0, len(entries), batch_size):
        chunk = [entries[i] for i in order[start : start + batch_size]]
        frames = [load_frame(e, manifest) for e in chunk]
        for frame, entry in zip(frames, chunk):
            if frame.label is None:
                raise DataError(f"entry {entry.id} has no label mask; cannot build training batch")
        h = max(f.extents[0] for f in frames)
        w = max(f.extents[1] for f in frames)
        inputs = np.stack([_pad_to(normalize(f, manifest), h, w) for f in frames])
        labels = np.stack([_pad_to(f.label, h, w, fill=void) for f in frames]).astype(np.int32)
        for c in ablate_channels:
            inputs[:, c, :, :] = 0.0
        yield Batch(inputs=inputs, labels=labels, ids=tuple(f.id for f in frames))


def class_pixel_frequencies(manifest: DatasetManifest) -> dict:
    """Pixel count per class name across all labeled entries."""
    counts = np.zeros(len(manifest.class_set), dtype=np.int64)
    for entry in manifest.labeled_entries():
        frame = load_frame(entry, manifest)
        counts += np.bincount(frame.label.ravel(), minlength=len(manifest.class_set))
    return {name: int(c) for name, c in zip(manifest.class_set.names, counts)}


def validate_dataset(manifest: DatasetManifest) -> dict:
    """Check every invariant the loaders rely on; returns summary statistics.

    Raises DataError naming the first offending entry.
    """
    if not manifest.entries:
        raise DataError("manifest has no entries")
    ids = [e.id for e in manifest.entries]
    if len(ids) != len(set(ids)):
        raise DataError("duplicate entry ids in manifest")
    extents = {}
    for entry in manifest.entries:
        frame = load_frame(entry, manifest)
        if (frame.depth < 0).any():
            raise DataError(f"entry {entry.id}: negative depth values")
        if frame.label is not None and frame.label.max() >= len(manifest.class_set):
            raise DataError(f"entry {entry.id}: label index out of range")
        extents[entry.id] = frame.extents
    return {
        "entries": len(manifest.entries),
        "labeled": len(manifest.labeled_entries()),
        "extents": extents,
        "class_pixels": class_pixel_frequencies(manifest),
    }
