"""Dataset manifests, image loading and structural-input composition."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import DimensionError, LabelError, LoadError, ManifestError

BACKGROUND = "bg"


@dataclass(frozen=True)
class ImageSample:
    id: str
    image: np.ndarray
    label: np.ndarray
    layer_map: Optional[np.ndarray] = None
    anomaly_map: Optional[np.ndarray] = None
    healthy_counterpart: Optional[np.ndarray] = None
    caption: Optional[str] = None
    mask: Optional[np.ndarray] = None
    volume_id: Optional[str] = None
    slice_index: Optional[int] = None
    split: str = "train"

    def anomaly(self) -> np.ndarray:
        if self.anomaly_map is not None:
            return self.anomaly_map
        if self.healthy_counterpart is not None:
            return compute_anomaly_map(self.image, self.healthy_counterpart)
        raise LoadError(f"sample {self.id!r} has neither an anomaly map nor a healthy counterpart")

    def structural_input(self) -> np.ndarray:
        layer = self.layer_map if self.layer_map is not None else np.zeros_like(self.image)
        return compose_structural_input(layer, self.anomaly())


@dataclass
class DatasetManifest:
    classes: list[str]
    samples: list[dict] = field(default_factory=list)
    root: Path = Path(".")

    def __post_init__(self):
        if not self.classes:
            raise ManifestError("class list is empty")
        if self.classes[0] != BACKGROUND:
            raise ManifestError(f"class list must begin with {BACKGROUND!r}, got {self.classes[0]!r}")
        if len(set(self.classes)) != len(self.classes):
            raise ManifestError("duplicate class names")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ManifestError(f"manifest not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict) or "classes" not in doc:
            raise ManifestError(f"manifest {path} lacks a 'classes' list")
        samples = doc.get("samples", [])
        for entry in samples:
            if "id" not in entry or "image" not in entry:
                raise ManifestError(f"manifest entry missing 'id' or 'image': {entry}")
        return cls(list(doc["classes"]), list(samples), path.parent)

    def write(self, path) -> None:
        path = Path(path)
        doc = {"classes": self.classes, "samples": self.samples}
        path.write_text(json.dumps(doc, indent=2))

    def encode_label(self, tags: Sequence[str], sample_id: str = "?") -> np.ndarray:
        """Multi-hot label; the background bit is set only when no lesion tag is present."""
        y = np.zeros(self.num_classes, dtype=np.float32)
        for tag in tags:
            if tag not in self.classes:
                raise ManifestError(f"sample {sample_id!r}: unknown class tag {tag!r}")
            y[self.classes.index(tag)] = 1.0
        if not y[1:].any():
            y[0] = 1.0
        return y


def read_grayscale(path) -> np.ndarray:
    """Decode an 8- or 16-bit grayscale image to float32 in [0, 1]."""
    with Image.open(path) as img:
        if img.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(img, dtype=np.float64)
            scale = 65535.0
        else:
            arr = np.asarray(img.convert("L"), dtype=np.float64)
            scale = 255.0
    return np.clip(arr / scale, 0.0, 1.0).astype(np.float32)


def read_index_mask(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.int64)


def write_grayscale(arr: np.ndarray, path, bits: int = 8) -> None:
    arr = np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0)
    if bits == 16:
        Image.fromarray(np.round(arr * 65535).astype(np.uint16)).save(path)
    else:
        Image.fromarray(np.round(arr * 255).astype(np.uint8)).save(path)


def resize(arr: np.ndarray, size: tuple[int, int], mode: str = "bilinear") -> np.ndarray:
    if tuple(arr.shape) == tuple(size):
        return arr
    t = torch.from_numpy(np.ascontiguousarray(arr))[None, None]
    if mode == "nearest":
        out = F.interpolate(t.float(), size=size, mode="nearest")
        return out[0, 0].numpy().astype(arr.dtype)
    out = F.interpolate(t.double(), size=size, mode="bilinear", align_corners=False)
    return out[0, 0].numpy().astype(np.float32)


def compute_anomaly_map(image: np.ndarray, healthy: np.ndarray) -> np.ndarray:
    """Absolute difference between an image and its generated healthy counterpart."""
    image = np.asarray(image)
    healthy = np.asarray(healthy)
    if image.shape != healthy.shape:
        raise DimensionError(f"anomaly map needs equal shapes, got {image.shape} and {healthy.shape}")
    return np.abs(image - healthy)


def compose_structural_input(layer: np.ndarray, anomaly: np.ndarray) -> np.ndarray:
    """Min-max normalized sum of layer map and anomaly map.

    A constant sum carries no structure and maps to all zeros.
    """
    layer = np.asarray(layer)
    anomaly = np.asarray(anomaly)
    if layer.shape != anomaly.shape:
        raise DimensionError(f"layer {layer.shape} and anomaly {anomaly.shape} differ in shape")
    dtype = np.result_type(layer.dtype, anomaly.dtype, np.float32)
    total = layer.astype(np.float64) + anomaly.astype(np.float64)
    lo, hi = total.min(), total.max()
    if hi == lo:
        return np.zeros(total.shape, dtype=dtype)
    out = (total - lo) / (hi - lo)
    # float64 division can land one ulp off the exact extremes
    out[total == lo] = 0.0
    out[total == hi] = 1.0
    return out.astype(dtype)


def binarize_label(y) -> np.ndarray:
    """Healthy/lesion one-hot: (1, 0) for background-only, (0, 1) if any lesion bit is set."""
    y = np.asarray(y)
    if y.ndim != 1 or y.size < 1:
        raise LabelError(f"label must be a non-empty vector, got shape {y.shape}")
    if not y.any():
        raise LabelError("label vector is all zeros")
    if y[1:].any():
        return np.array([0.0, 1.0], dtype=np.float32)
    return np.array([1.0, 0.0], dtype=np.float32)


def _load_sample(entry: dict, manifest: DatasetManifest, size: tuple[int, int]) -> ImageSample:
    sid = str(entry["id"])

    def path_of(key):
        p = manifest.root / entry[key]
        if not p.exists():
            raise LoadError(f"sample {sid!r}: missing {key} file {p}")
        return p

    def grid(key):
        if not entry.get(key):
            return None
        try:
            return resize(read_grayscale(path_of(key)), size)
        except LoadError:
            raise
        except Exception as exc:
            raise LoadError(f"sample {sid!r}: cannot decode {key}: {exc}") from exc

    label = manifest.encode_label(entry.get("labels", []), sid)
    image = grid("image")
    mask = None
    if entry.get("mask"):
        mask = resize(read_index_mask(path_of("mask")), size, mode="nearest")
        if mask.max(initial=0) >= manifest.num_classes:
            raise LoadError(f"sample {sid!r}: mask value {mask.max()} outside class range")
    caption = entry.get("caption")
    if caption and str(caption).endswith(".txt"):
        caption = path_of("caption").read_text().strip()
    return ImageSample(
        id=sid,
        image=image,
        label=label,
        layer_map=grid("layer"),
        anomaly_map=grid("anomaly"),
        healthy_counterpart=grid("healthy"),
        caption=caption,
        mask=mask,
        volume_id=entry.get("volume_id"),
        slice_index=entry.get("slice_index"),
        split=entry.get("split", "train"),
    )


def load_dataset(manifest_path, input_size: tuple[int, int], split: Optional[str] = None) -> list[ImageSample]:
    """Load every sample of a manifest, resized to ``input_size`` (H, W)."""
    manifest = DatasetManifest.read(manifest_path)
    size = (int(input_size[0]), int(input_size[1]))
    out = []
    for entry in manifest.samples:
        if split is not None and entry.get("split", "train") != split:
            continue
        out.append(_load_sample(entry, manifest, size))
    return out
