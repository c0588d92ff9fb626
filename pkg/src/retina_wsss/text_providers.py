"""Text embeddings from on-disk caches, plus a deterministic stub embedder.

Cache layout (one directory)::

    manifest.json            {"entries": {key: {"dim": int, "file": str, "text": str?}}}
    <file>.f32               raw little-endian float32 vector

Key convention used by the offline exporters:

    label/<class name>       label-text embedding (one per class, background included)
    desc/<sample id>         embedding of the generated caption of that sample

``text`` is optional and carries the source string verbatim (captions keep
their generator prefix) so caption statistics need no re-generation.
"""
from __future__ import annotations

import json
import math
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import CacheError

LABEL_PREFIX = "label/"
DESC_PREFIX = "desc/"

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


class XorShift64Star:
    """xorshift64* generator; bit-identical on every platform."""

    def __init__(self, seed: int):
        self.state = (seed & _MASK64) or 0x9E3779B97F4A7C15

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & _MASK64
        x ^= x >> 27
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & _MASK64

    def uniform(self) -> float:
        # 53-bit mantissa, strictly inside (0, 1)
        return ((self.next_u64() >> 11) + 0.5) * (1.0 / (1 << 53))


def stub_embed(text: str, dim: int, seed: int = 0) -> np.ndarray:
    """Deterministic unit-norm pseudo-embedding of ``text``.

    Stands in for a CLIP/BLIP encoder in tests and synthetic runs.
    """
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    key = text.encode("utf-8") + b"\x00" + int(seed).to_bytes(8, "little", signed=True)
    rng = XorShift64Star(fnv1a64(key))
    out = np.empty(dim, dtype=np.float64)
    i = 0
    while i < dim:
        u1, u2 = rng.uniform(), rng.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        out[i] = r * math.cos(2.0 * math.pi * u2)
        if i + 1 < dim:
            out[i + 1] = r * math.sin(2.0 * math.pi * u2)
        i += 2
    out /= np.linalg.norm(out)
    return out.astype(np.float32)


def _file_name(key: str) -> str:
    slug = re.sub(r"[^A-Za-z0-9._-]+", "_", key)
    return f"{slug}-{fnv1a64(key.encode('utf-8')):016x}.f32"


@dataclass
class _Entry:
    dim: int
    file: str
    text: Optional[str] = None


class EmbeddingCache:
    """Read/write access to a directory of float32 vectors keyed by string."""

    def __init__(self, root):
        self.root = Path(root)
        self.entries: dict[str, _Entry] = {}
        manifest = self.root / "manifest.json"
        if manifest.exists():
            try:
                doc = json.loads(manifest.read_text())
            except json.JSONDecodeError as exc:
                raise CacheError(f"corrupt cache manifest {manifest}: {exc}") from exc
            for key, meta in doc.get("entries", {}).items():
                self.entries[key] = _Entry(int(meta["dim"]), meta["file"], meta.get("text"))

    @classmethod
    def open(cls, root) -> "EmbeddingCache":
        root = Path(root)
        if not (root / "manifest.json").exists():
            raise CacheError(f"no embedding cache at {root}")
        return cls(root)

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def keys(self) -> list[str]:
        return list(self.entries)

    def text(self, key: str) -> Optional[str]:
        if key not in self.entries:
            raise CacheError(f"cache has no key {key!r}")
        return self.entries[key].text

    def get(self, key: str) -> np.ndarray:
        if key not in self.entries:
            raise CacheError(f"cache has no key {key!r}")
        entry = self.entries[key]
        path = self.root / entry.file
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise CacheError(f"cannot read payload for {key!r}: {exc}") from exc
        if len(raw) != 4 * entry.dim:
            raise CacheError(f"payload for {key!r} has {len(raw)} bytes, expected {4 * entry.dim}")
        return np.frombuffer(raw, dtype="<f4").astype(np.float32)

    def put(self, key: str, vector, text: Optional[str] = None) -> None:
        vec = np.ascontiguousarray(np.asarray(vector, dtype="<f4").ravel())
        self.root.mkdir(parents=True, exist_ok=True)
        entry = _Entry(int(vec.size), _file_name(key), text)
        (self.root / entry.file).write_bytes(vec.tobytes())
        self.entries[key] = entry

    def flush(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        doc = {"entries": {}}
        for key in sorted(self.entries):
            e = self.entries[key]
            meta = {"dim": e.dim, "file": e.file}
            if e.text is not None:
                meta["text"] = e.text
            doc["entries"][key] = meta
        tmp = self.root / "manifest.json.tmp"
        tmp.write_text(json.dumps(doc, indent=1))
        os.replace(tmp, self.root / "manifest.json")


def load_label_embeddings(cache: EmbeddingCache, class_names: Iterable[str]) -> np.ndarray:
    """Stack the label embeddings of ``class_names`` in order, shape (K, C_clip)."""
    rows = []
    for name in class_names:
        key = LABEL_PREFIX + name
        if key not in cache:
            raise CacheError(f"label embedding missing for class {name!r}")
        rows.append(cache.get(key))
    if not rows:
        raise CacheError("no class names given")
    dims = {r.size for r in rows}
    if len(dims) != 1:
        raise CacheError(f"label embeddings have inconsistent dims {sorted(dims)}")
    mat = np.stack(rows)
    if np.any(np.linalg.norm(mat, axis=1) == 0):
        raise CacheError("label embedding with zero norm")
    return mat


def load_description(cache: EmbeddingCache, sample_id: str) -> np.ndarray:
    key = DESC_PREFIX + sample_id
    if key not in cache:
        raise CacheError(f"description embedding missing for sample {sample_id!r}")
    return cache.get(key)


class TextEmbeddingSet:
    """Label matrix plus per-sample description vectors for one dataset."""

    def __init__(self, label_matrix: np.ndarray, descriptions: dict[str, np.ndarray], provenance: str):
        dims = {v.size for v in descriptions.values()}
        if len(dims) > 1:
            raise CacheError(f"description vectors have inconsistent dims {sorted(dims)}")
        self.label_matrix = np.asarray(label_matrix, dtype=np.float32)
        self.descriptions = descriptions
        self.provenance = provenance
        self.desc_dim = dims.pop() if dims else 0

    @property
    def clip_dim(self) -> int:
        return int(self.label_matrix.shape[1])

    def description(self, sample_id: str) -> np.ndarray:
        try:
            return self.descriptions[sample_id]
        except KeyError:
            raise CacheError(f"description embedding missing for sample {sample_id!r}") from None

    @classmethod
    def from_cache(cls, label_cache: EmbeddingCache, desc_cache: EmbeddingCache, class_names, sample_ids):
        labels = load_label_embeddings(label_cache, class_names)
        desc = {sid: load_description(desc_cache, sid) for sid in sample_ids}
        return cls(labels, desc, "cache")

    @classmethod
    def from_stub(cls, class_names, captions: dict[str, str], clip_dim: int, desc_dim: int, seed: int = 0,
                  prompt: str = "{}"):
        labels = np.stack([stub_embed(prompt.format(name), clip_dim, seed) for name in class_names])
        desc = {sid: stub_embed(text or "", desc_dim, seed) for sid, text in captions.items()}
        return cls(labels, desc, "stub")


def export_stub_cache(root, class_names, captions: dict[str, str], clip_dim: int, desc_dim: int,
                      seed: int = 0, prompt: str = "{}") -> EmbeddingCache:
    """Write a cache in the exporter layout using stub embeddings."""
    cache = EmbeddingCache(root)
    for name in class_names:
        text = prompt.format(name)
        cache.put(LABEL_PREFIX + name, stub_embed(text, clip_dim, seed), text=text)
    for sid, text in captions.items():
        cache.put(DESC_PREFIX + sid, stub_embed(text, desc_dim, seed), text=text)
    cache.flush()
    return cache
