"""Synthetic retinal B-scans with planted lesions, for tests and desk-scale runs.

Each image is a stack of curved horizontal bands with speckle. Lesion class 1
("SRF") is a dark lens sitting on top of the bright band; class 2 ("PED") is
a bright, heterogeneous blob hanging below it. The generated healthy
counterpart is the same scan without lesions and with fresh speckle, so
``|image - healthy|`` highlights the lesions the way a generative
healthy-reconstruction would.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset_io import BACKGROUND, DatasetManifest, write_grayscale
from .text_providers import export_stub_cache

CLASSES = (BACKGROUND, "SRF", "PED")
CAPTION_PREFIX = "a black and white photo of"
_WORDS = {
    "healthy": ["plane", "flying", "sky", "clouds", "wing"],
    "SRF": ["person", "hill", "laying", "snow", "curved"],
    "PED": ["pillow", "bed", "case", "white", "sheet"],
}
_FILLER = ["blurry", "picture", "line", "view", "dark", "wave"]
# band intensities top to bottom: vitreous, inner retina, outer nuclear, bright band, choroid
_BANDS = (0.08, 0.55, 0.30, 0.80, 0.35)
# layer-segmentation codes: only retinal layers are labelled, vitreous and choroid are background
_LAYER_CODES = np.array([0.0, 1 / 3, 2 / 3, 1.0, 0.0])


def _retina(rng: np.random.Generator, h: int, w: int):
    x = np.arange(w)
    phase = rng.uniform(0, 2 * np.pi)
    tilt = rng.uniform(-0.06, 0.06) * h
    base = 0.30 * h + tilt * (x / w - 0.5) + 0.04 * h * np.sin(2 * np.pi * x / w + phase)
    thickness = np.array([0.18, 0.14, 0.06]) * h * rng.uniform(0.9, 1.1)
    edges = [base]
    for t in thickness:
        edges.append(edges[-1] + t)
    yy = np.arange(h)[:, None]
    band = np.zeros((h, w), dtype=np.int64)
    for e in edges:
        band += (yy >= e[None, :]).astype(np.int64)
    return band, edges


def _ellipse(h, w, cy, cx, ry, rx):
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _speckle(rng, clean, level=0.06, floor=0.0):
    noise = clean * (1.0 + level * rng.standard_normal(clean.shape)) + floor * rng.standard_normal(clean.shape)
    return np.clip(noise, 0.0, 1.0)


def make_scan(rng: np.random.Generator, size: tuple[int, int], lesions: tuple[int, ...]):
    """Return ``(image, healthy, layer_map, mask)`` for one synthetic scan."""
    h, w = size
    band, edges = _retina(rng, h, w)
    clean = np.asarray(_BANDS)[band]
    healthy_clean = clean.copy()
    mask = np.zeros((h, w), dtype=np.int64)
    taken = []
    for cls in lesions:
        for _ in range(20):
            cx = rng.uniform(0.2, 0.8) * w
            if all(abs(cx - t) > 0.4 * w for t in taken):
                break
        taken.append(cx)
        rx = rng.uniform(0.2, 0.25) * w
        ry = rng.uniform(0.12, 0.15) * h
        col = int(np.clip(cx, 0, w - 1))
        if cls == 1:
            region = _ellipse(h, w, edges[2][col] - ry, cx, ry, rx) & (band < 3)
            clean[region] = 0.03
        else:
            region = _ellipse(h, w, edges[3][col] + ry * 0.8, cx, ry, rx) & (band == 4)
            # heterogeneous hyperreflective fill
            clean[region] = rng.uniform(0.5, 1.0, int(region.sum()))
        mask[region] = cls
    image = _speckle(rng, clean)
    healthy = _speckle(rng, healthy_clean)
    layer = _LAYER_CODES[band]
    return image.astype(np.float32), healthy.astype(np.float32), layer.astype(np.float32), mask


def caption_for(rng: np.random.Generator, lesions: tuple[int, ...]) -> str:
    groups = [CLASSES[c] for c in lesions] or ["healthy"]
    words = []
    for g in groups:
        words += list(rng.choice(_WORDS[g], size=2, replace=False))
    words.append(str(rng.choice(_FILLER)))
    return f"{CAPTION_PREFIX} a {' '.join(words)}"


def lesion_plan(n: int) -> list[tuple[int, ...]]:
    """Cycle healthy, SRF, PED, SRF+PED."""
    cycle = [(), (1,), (2,), (1, 2)]
    return [cycle[i % 4] for i in range(n)]


def write_dataset(root, n: int = 32, size: tuple[int, int] = (256, 256), seed: int = 0,
                  clip_dim: int = 32, desc_dim: int = 32, slices_per_volume: int = 8) -> Path:
    """Write images, companions, masks, captions, embedding caches and ``manifest.json``.

    Returns the manifest path.
    """
    root = Path(root)
    for sub in ("images", "layers", "healthy", "masks"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    samples, captions = [], {}
    for i, lesions in enumerate(lesion_plan(n)):
        sid = f"s{i:04d}"
        image, healthy, layer, mask = make_scan(rng, size, lesions)
        write_grayscale(image, root / "images" / f"{sid}.png", bits=16)
        write_grayscale(healthy, root / "healthy" / f"{sid}.png", bits=16)
        write_grayscale(layer, root / "layers" / f"{sid}.png")
        Image.fromarray(mask.astype(np.uint8)).save(root / "masks" / f"{sid}.png")
        captions[sid] = caption_for(rng, lesions)
        samples.append({
            "id": sid,
            "image": f"images/{sid}.png",
            "layer": f"layers/{sid}.png",
            "healthy": f"healthy/{sid}.png",
            "mask": f"masks/{sid}.png",
            "labels": [CLASSES[c] for c in lesions],
            "caption": captions[sid],
            "split": "train",
            "volume_id": f"v{i // slices_per_volume:03d}",
            "slice_index": i % slices_per_volume,
        })
    (root / "captions.json").write_text(json.dumps(captions, indent=2, sort_keys=True))
    export_stub_cache(root / "embeddings", CLASSES, captions, clip_dim, desc_dim, seed=seed)
    manifest = DatasetManifest(list(CLASSES), samples)
    manifest.write(root / "manifest.json")
    return root / "manifest.json"
