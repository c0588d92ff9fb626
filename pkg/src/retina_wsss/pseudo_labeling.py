"""CAM extraction, heatmap fusion, background thresholding and label export."""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigError, ExportError


def cam_from_classifier(f4_plus: torch.Tensor, head_weight: torch.Tensor) -> torch.Tensor:
    """Lesion CAMs: the classifier's linear map applied at every position.

    ``f4_plus`` is ``(B, C, H, W)``, ``head_weight`` is ``(K, C)``; returns
    ``(B, K-1, H, W)`` with the background column dropped.
    """
    cams = torch.einsum("bchw,kc->bkhw", f4_plus, head_weight)
    return cams[:, 1:]


def minmax_per_channel(x: torch.Tensor) -> torch.Tensor:
    """Per-(sample, channel) min-max scaling to [0, 1]; constant channels become zero."""
    flat = x.flatten(-2)
    lo = flat.min(dim=-1, keepdim=True).values
    hi = flat.max(dim=-1, keepdim=True).values
    span = hi - lo
    safe = torch.where(span > 0, span, torch.ones_like(span))
    out = torch.where(span > 0, (flat - lo) / safe, torch.zeros_like(flat))
    return out.reshape(x.shape)


def fuse_heatmaps(cam: torch.Tensor, sim3: Optional[torch.Tensor], sim4: Optional[torch.Tensor],
                  gammas: Sequence[float] = (1.0, 1.0, 1.0), size: tuple[int, int] | None = None,
                  present: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Foreground map: weighted sum of ReLU'd, resized sources, then per-class min-max.

    All sources carry lesion channels only, ``(B, K-1, h, w)`` or ``(K-1, h, w)``.
    ``present`` (same leading shape, ``K-1`` entries) zeroes the channels of
    lesions absent from the image-level label; without it min-max scaling
    would stretch every absent class up to 1.
    """
    g1, g3, g4 = (float(g) for g in gammas)
    if min(g1, g3, g4) < 0:
        raise ConfigError(f"fusion weights must be nonnegative, got {gammas}")
    squeeze = cam.dim() == 3
    sources = [(g1, cam), (g3, sim3), (g4, sim4)]
    if size is None:
        size = tuple(cam.shape[-2:])
    fg = None
    for gamma, src in sources:
        if src is None:
            continue
        if squeeze:
            src = src[None]
        src = torch.relu(src)
        if tuple(src.shape[-2:]) != tuple(size):
            src = F.interpolate(src, size=size, mode="bilinear", align_corners=False)
        term = gamma * src
        fg = term if fg is None else fg + term
    fg = minmax_per_channel(fg)
    if present is not None:
        fg = fg * present.to(fg.dtype).reshape(fg.shape[0], -1, 1, 1)
    return fg[0] if squeeze else fg


def background_map(fg: np.ndarray, lam: float) -> np.ndarray:
    """Background score: the constant threshold map."""
    return np.full((1,) + fg.shape[1:], lam, dtype=fg.dtype)


def finalize(fg, lam: float):
    """Stack the background map on the foreground maps and take the per-pixel argmax.

    ``fg`` is ``(K-1, H, W)``. Ties resolve to the lowest class index, so a
    lesion score equal to ``lam`` stays background. Returns ``(M_final, labels)``.
    """
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"background threshold must lie in [0, 1], got {lam}")
    if isinstance(fg, torch.Tensor):
        fg = fg.detach().cpu().numpy()
    fg = np.asarray(fg)
    final = np.concatenate([background_map(fg, lam), fg], axis=0)
    labels = np.argmax(final, axis=0).astype(np.int64)
    return final, labels


def labels_from_fg(fg: np.ndarray, lam: float) -> np.ndarray:
    """Same labels as :func:`finalize` from a precomputed max/argmax, for threshold sweeps."""
    top = fg.max(axis=0)
    arg = fg.argmax(axis=0) + 1
    return np.where(top <= lam, 0, arg).astype(np.int64)


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def export(labels: np.ndarray, path, class_names: Sequence[str], lam: float,
           gammas: Sequence[float], checkpoint_id: str = "") -> None:
    """Write an 8-bit index PNG plus a side-car JSON of run metadata."""
    path = Path(path)
    if len(class_names) > 256 or (labels.size and labels.max() > 255):
        raise ExportError(f"{path}: 8-bit label images hold at most 256 classes")
    if labels.size and labels.min() < 0:
        raise ExportError(f"{path}: negative class index")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.stem + ".tmp.png")
        Image.fromarray(labels.astype(np.uint8)).save(tmp, format="PNG")
        os.replace(tmp, path)
        meta = {
            "classes": list(class_names),
            "lambda": float(lam),
            "gamma": [float(g) for g in gammas],
            "checkpoint": checkpoint_id,
            "shape": list(labels.shape),
        }
        _atomic_write_bytes(path.with_suffix(".json"), json.dumps(meta, indent=2, sort_keys=True).encode())
    except OSError as exc:
        raise ExportError(f"cannot write pseudo label {path}: {exc}") from exc


def read_labels(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img, dtype=np.int64)


def dump_cam(fg: np.ndarray, directory, sample_id: str, class_names: Sequence[str]) -> None:
    """One little-endian float32 raster per lesion class plus a JSON shape header."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = {"id": sample_id, "shape": list(fg.shape[1:]), "dtype": "<f4", "channels": {}}
    for k, name in enumerate(class_names[1:]):
        fname = f"{sample_id}.{k + 1}.f32"
        _atomic_write_bytes(directory / fname, np.ascontiguousarray(fg[k], dtype="<f4").tobytes())
        header["channels"][name] = fname
    _atomic_write_bytes(directory / f"{sample_id}.cam.json", json.dumps(header, indent=2).encode())
