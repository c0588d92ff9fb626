"""Training loop, pseudo-label generation, sweeps and report writing."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt_io
from .config import TrainConfig
from .dataset_io import DatasetManifest, ImageSample, binarize_label, load_dataset, read_index_mask
from .errors import CheckpointError, ConfigError, DataError, DimensionError, NumericError
from .evaluation import ConfusionCounts, SweepResult, accumulate, miou, sliding_similarity, sweep, word_frequency
from .model import DualBranchNet, ModelConfig
from .objectives import TERMS, LossWeights, total_loss
from .pseudo_labeling import cam_from_classifier, dump_cam, export, finalize, fuse_heatmaps, read_labels
from .text_providers import EmbeddingCache, TextEmbeddingSet, load_description, stub_embed

log = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def write_json(path, doc) -> Path:
    """Atomic JSON write (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


def file_digest(path, n: int = 16) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:n]


@dataclass
class Tensors:
    """A dataset stacked into tensors, in manifest order."""

    ids: list
    images: torch.Tensor
    structural: torch.Tensor
    labels: torch.Tensor
    binary: torch.Tensor
    desc: torch.Tensor
    masks: list = field(default_factory=list)

    def __len__(self):
        return len(self.ids)


def stack_samples(samples: Sequence[ImageSample], text: TextEmbeddingSet, dtype=torch.float32) -> Tensors:
    if not samples:
        return Tensors([], torch.zeros(0), torch.zeros(0), torch.zeros(0), torch.zeros(0), torch.zeros(0))
    return Tensors(
        ids=[s.id for s in samples],
        images=torch.from_numpy(np.stack([s.image for s in samples])).to(dtype),
        structural=torch.from_numpy(np.stack([s.structural_input() for s in samples])).to(dtype),
        labels=torch.from_numpy(np.stack([s.label for s in samples])).to(dtype),
        binary=torch.from_numpy(np.stack([binarize_label(s.label) for s in samples])).to(dtype),
        desc=torch.from_numpy(np.stack([text.description(s.id) for s in samples])).to(dtype),
        masks=[s.mask for s in samples],
    )


def resolve_text(mode: str, manifest: DatasetManifest, samples: Sequence[ImageSample], clip_dim: int,
                 desc_dim: int, seed: int = 0, prompt: str = "{}", label_cache=None, desc_cache=None
                 ) -> TextEmbeddingSet:
    if mode == "stub":
        captions = {s.id: s.caption or "" for s in samples}
        return TextEmbeddingSet.from_stub(manifest.classes, captions, clip_dim, desc_dim, seed, prompt)
    if mode != "cache":
        raise ConfigError(f"unknown text mode {mode!r}")
    if label_cache is None:
        raise ConfigError("cache text mode needs a label embedding cache path")
    labels = EmbeddingCache.open(label_cache)
    descs = EmbeddingCache.open(desc_cache or label_cache)
    return TextEmbeddingSet.from_cache(labels, descs, manifest.classes, [s.id for s in samples])


def augment_batch(images, structural, cfg, generator: torch.Generator):
    """Apply one sampled flip/rotation to each image and its structural input; jitter the image only."""
    b = images.shape[0]
    if cfg.hflip:
        flip = torch.rand(b, generator=generator) < 0.5
        images = torch.where(flip[:, None, None], images.flip(-1), images)
        structural = torch.where(flip[:, None, None], structural.flip(-1), structural)
    if cfg.rotation > 0:
        angle = (torch.rand(b, generator=generator) * 2 - 1) * math.radians(cfg.rotation)
        cos, sin = torch.cos(angle), torch.sin(angle)
        zeros = torch.zeros_like(cos)
        theta = torch.stack([torch.stack([cos, -sin, zeros], -1), torch.stack([sin, cos, zeros], -1)], 1)
        grid = F.affine_grid(theta.to(images.dtype), (b, 1) + tuple(images.shape[-2:]), align_corners=False)
        images = F.grid_sample(images[:, None], grid, align_corners=False)[:, 0]
        structural = F.grid_sample(structural[:, None], grid, align_corners=False)[:, 0]
    if cfg.jitter > 0:
        scale = 1 + (torch.rand(b, generator=generator) * 2 - 1) * cfg.jitter
        images = (images * scale[:, None, None].to(images.dtype)).clamp(0, 1)
    return images, structural


@dataclass
class TrainResult:
    checkpoint: Path
    log: Path
    history: list
    output: Path
    model: DualBranchNet = None
    text: TextEmbeddingSet = None
    samples: list = None


def build_model(cfg: TrainConfig, num_classes: int, text: TextEmbeddingSet, generator=None) -> DualBranchNet:
    mcfg = ModelConfig(
        encoder=cfg.encoder_config(),
        num_classes=num_classes,
        clip_dim=text.clip_dim,
        desc_dim=text.desc_dim,
        structural_frozen=None if cfg.structural_frozen is None else tuple(cfg.structural_frozen),
    )
    return DualBranchNet(mcfg, generator).to(_DTYPES[cfg.dtype])


def train(cfg: TrainConfig, keep_model: bool = True) -> TrainResult:
    """Run the full training loop and write checkpoints plus a JSON-lines log."""
    out = Path(cfg.paths.output)
    out.mkdir(parents=True, exist_ok=True)
    dtype = _DTYPES[cfg.dtype]
    generator = torch.Generator().manual_seed(cfg.seed)

    manifest = DatasetManifest.read(cfg.paths.manifest)
    samples = [s for s in load_dataset(cfg.paths.manifest, cfg.input_size) if s.split == "train"]
    if not samples:
        raise DataError(f"{cfg.paths.manifest}: no training samples")
    text = resolve_text(cfg.text.mode, manifest, samples, cfg.text.clip_dim, cfg.text.desc_dim, cfg.seed,
                        cfg.text.prompt, cfg.paths.label_embeddings, cfg.paths.description_embeddings)
    data = stack_samples(samples, text, dtype)
    label_matrix = torch.from_numpy(text.label_matrix).to(dtype)

    model = build_model(cfg, manifest.num_classes, text, generator)
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(trainable, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)
    weights = cfg.weights

    meta_base = {
        "model": model.config.to_dict(),
        "classes": manifest.classes,
        "input_size": list(cfg.input_size),
        "text": {"mode": cfg.text.mode, "clip_dim": text.clip_dim, "desc_dim": text.desc_dim,
                 "prompt": cfg.text.prompt, "seed": cfg.seed},
        "label_matrix": text.label_matrix.astype(float).tolist(),
        "gammas": list(cfg.gammas),
        "seed": cfg.seed,
    }
    log_path = out / "train_log.jsonl"
    history = []
    with open(log_path, "w") as fh:
        header = {"event": "start", "loss_weights": dict(zip(TERMS, weights.as_tuple())), "config": cfg.to_dict(),
                  "num_samples": len(data), "trainable_params": sum(p.numel() for p in trainable)}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        step = 0
        n = len(data)
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            order = torch.randperm(n, generator=generator)
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                images, structural = data.images[idx], data.structural[idx]
                if cfg.augment.active:
                    images, structural = augment_batch(images, structural, cfg.augment, generator)
                outputs = model(images, structural, data.desc[idx], label_matrix)
                loss, terms = total_loss(outputs, data.labels[idx], data.binary[idx], weights)
                step += 1
                record = {"epoch": epoch, "step": step, "total": float(loss.detach())}
                record.update({t: float(v.detach()) for t, v in terms.items()})
                if not all(math.isfinite(v) for v in record.values()):
                    fh.write(json.dumps({"event": "abort", **record}) + "\n")
                    raise NumericError(f"non-finite loss at step {step}: "
                                       + ", ".join(f"{k}={record[k]}" for k in ("total",) + TERMS))
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                fh.write(json.dumps(record, sort_keys=True) + "\n")
                history.append(record)
            if cfg.checkpoint_every_epoch or epoch == cfg.epochs:
                meta = dict(meta_base, epoch=epoch, step=step)
                ck = ckpt_io.from_module(model, optimizer, meta)
                if cfg.checkpoint_every_epoch:
                    ckpt_io.save(ck, out / "checkpoints" / f"epoch_{epoch:03d}.ckpt")
                ckpt_io.save(ck, out / "checkpoint.ckpt")
            log.info("epoch %d/%d loss %.4f", epoch, cfg.epochs, history[-1]["total"])
    return TrainResult(out / "checkpoint.ckpt", log_path, history, out,
                       model if keep_model else None, text, samples)


def restore(checkpoint_path) -> tuple[DualBranchNet, dict]:
    """Rebuild a model from a checkpoint written by :func:`train`."""
    ck = ckpt_io.load(checkpoint_path)
    if "model" not in ck.meta:
        raise CheckpointError(f"{checkpoint_path}: no model configuration in checkpoint metadata")
    model = DualBranchNet(ModelConfig.from_dict(ck.meta["model"]))
    dtype = torch.from_numpy(ck.tensors[next(iter(ck.tensors))]).dtype
    model = model.to(dtype)
    ckpt_io.load_into(model, ck)
    model.eval()
    return model, ck.meta


def text_for_checkpoint(meta: dict, manifest: DatasetManifest, samples, embeddings=None) -> TextEmbeddingSet:
    """The label matrix stored at training time plus per-sample description vectors."""
    t = meta["text"]
    if list(manifest.classes) != list(meta["classes"]):
        raise CheckpointError(f"dataset classes {manifest.classes} do not match checkpoint classes {meta['classes']}")
    if t["mode"] == "stub" and embeddings is None:
        descs = {s.id: stub_embed(s.caption or "", t["desc_dim"], t["seed"]) for s in samples}
    else:
        if embeddings is None:
            embeddings = manifest.root / "embeddings"
        cache = EmbeddingCache.open(embeddings)
        descs = {s.id: load_description(cache, s.id) for s in samples}
    text = TextEmbeddingSet(np.asarray(meta["label_matrix"], dtype=np.float32), descs, t["mode"])
    if text.desc_dim and text.desc_dim != t["desc_dim"]:
        raise DimensionError(f"description vectors have {text.desc_dim} dims, checkpoint expects {t['desc_dim']}")
    return text


@torch.no_grad()
def foreground_maps(model: DualBranchNet, data: Tensors, label_matrix: torch.Tensor, gammas,
                    batch_size: int = 8, use_labels: bool = True) -> list[np.ndarray]:
    """Normalized lesion heatmaps at input resolution, one ``(K-1, H, W)`` array per image.

    With ``use_labels`` the maps of lesions absent from an image's label are zeroed.
    """
    model.eval()
    dtype = next(model.parameters()).dtype
    size = tuple(data.images.shape[-2:])
    out = []
    for start in range(0, len(data), batch_size):
        sl = slice(start, start + batch_size)
        o = model(data.images[sl].to(dtype), data.structural[sl].to(dtype), data.desc[sl].to(dtype),
                  label_matrix.to(dtype))
        cam = cam_from_classifier(o["f4_plus"], model.head_primary.weight)
        present = data.labels[sl, 1:] if use_labels else None
        fg = fuse_heatmaps(cam, o["sim3"][:, 1:], o["sim4"][:, 1:], gammas, size, present)
        out.extend(fg.float().numpy())
    return out


def _load_for_inference(checkpoint_path, manifest_path, embeddings=None):
    model, meta = restore(checkpoint_path)
    manifest = DatasetManifest.read(manifest_path)
    samples = load_dataset(manifest_path, tuple(meta["input_size"]))
    text = text_for_checkpoint(meta, manifest, samples, embeddings)
    dtype = next(model.parameters()).dtype
    data = stack_samples(samples, text, dtype)
    return model, meta, manifest, samples, data, torch.from_numpy(text.label_matrix).to(dtype)


def pseudo(checkpoint_path, manifest_path, lam: float, out_dir, gammas=None, embeddings=None,
           dump_cams: bool = False) -> list[Path]:
    """Write one pseudo-label PNG (+ side-car JSON) per sample."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"background threshold must lie in [0, 1], got {lam}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model, meta, manifest, samples, data, label_matrix = _load_for_inference(checkpoint_path, manifest_path,
                                                                             embeddings)
    gammas = tuple(meta.get("gammas", (1.0, 1.0, 1.0)) if gammas is None else gammas)
    if not samples:
        return []
    ck_id = file_digest(checkpoint_path)
    fgs = foreground_maps(model, data, label_matrix, gammas)
    written = []
    for sample, fg in zip(samples, fgs):
        _, labels = finalize(fg, lam)
        path = out_dir / f"{sample.id}.png"
        export(labels, path, manifest.classes, lam, gammas, ck_id)
        if dump_cams:
            dump_cam(fg, out_dir / "cams", sample.id, manifest.classes)
        written.append(path)
    return written


def sweep_checkpoint(checkpoint_path, manifest_path, gammas=None, embeddings=None) -> SweepResult:
    model, meta, manifest, samples, data, label_matrix = _load_for_inference(checkpoint_path, manifest_path,
                                                                             embeddings)
    gammas = tuple(meta.get("gammas", (1.0, 1.0, 1.0)) if gammas is None else gammas)
    keep = [i for i, s in enumerate(samples) if s.mask is not None]
    if not keep:
        raise DataError(f"{manifest_path}: no samples carry ground-truth masks")
    fgs = foreground_maps(model, data, label_matrix, gammas)
    return sweep([fgs[i] for i in keep], [samples[i].mask for i in keep], manifest.num_classes)


def evaluate_dirs(pred_dir, gt_dir, num_classes: Optional[int] = None, class_names=None) -> dict:
    """Micro mIoU between same-named index PNGs in two directories."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    preds = sorted(p for p in pred_dir.glob("*.png") if not p.name.endswith(".tmp.png"))
    if not preds:
        raise DataError(f"no prediction images in {pred_dir}")
    pairs = []
    for p in preds:
        g = gt_dir / p.name
        if not g.exists():
            raise DataError(f"ground truth missing for {p.name} in {gt_dir}")
        pairs.append((read_labels(p), read_index_mask(g), p.name))
    if num_classes is None:
        if class_names is None:
            side = p.with_suffix(".json")
            if side.exists():
                class_names = json.loads(side.read_text()).get("classes")
        num_classes = len(class_names) if class_names else 1 + max(int(max(a.max(), b.max())) for a, b, _ in pairs)
    counts = ConfusionCounts(num_classes)
    for pred, gt, name in pairs:
        try:
            accumulate(pred, gt, counts)
        except DimensionError as exc:
            raise DimensionError(f"{name}: {exc}") from None
    iou, mean = miou(counts)
    names = list(class_names) if class_names else [str(k) for k in range(num_classes)]
    return {
        "miou": mean,
        "iou": {n: (None if np.isnan(v) else float(v)) for n, v in zip(names, iou)},
        "intersection": counts.intersection.tolist(),
        "union": counts.union.tolist(),
        "num_images": len(pairs),
    }


def run_experiment(cfg: TrainConfig, figures: bool = True) -> dict:
    """Train, sweep the background threshold, export pseudo labels at the best threshold, score them.

    Writes ``metrics.json``, ``sweep.json`` and ``pseudo/`` under the output directory.
    """
    result = train(cfg)
    out = result.output
    manifest = DatasetManifest.read(cfg.paths.manifest)
    samples = [s for s in result.samples if s.mask is not None]
    if not samples:
        raise DataError("experiment needs ground-truth masks for the threshold sweep")
    dtype = _DTYPES[cfg.dtype]
    data = stack_samples(samples, result.text, dtype)
    label_matrix = torch.from_numpy(result.text.label_matrix).to(dtype)
    fgs = foreground_maps(result.model, data, label_matrix, cfg.gammas, cfg.batch_size)
    sw = sweep(fgs, data.masks, manifest.num_classes)
    write_json(out / "sweep.json", sw.to_dict())

    ck_id = file_digest(result.checkpoint)
    counts = ConfusionCounts(manifest.num_classes)
    for sample, fg in zip(samples, fgs):
        _, labels = finalize(fg, sw.best_lambda)
        export(labels, out / "pseudo" / f"{sample.id}.png", manifest.classes, sw.best_lambda, cfg.gammas, ck_id)
        accumulate(labels, sample.mask, counts)
    iou, mean = miou(counts)
    # step-1 loss against the mean over the final epoch, which is less noisy than a single step
    first = result.history[0]["total"]
    final_epoch = [r["total"] for r in result.history if r["epoch"] == result.history[-1]["epoch"]]
    last = float(np.mean(final_epoch))
    metrics = {
        "miou": mean,
        "iou": {n: (None if np.isnan(v) else float(v)) for n, v in zip(manifest.classes, iou)},
        "best_lambda": sw.best_lambda,
        "sweep_best_miou": sw.best_miou,
        "loss_first": first,
        "loss_final_epoch_mean": last,
        "loss_reduction": 1.0 - last / first,
        "steps": len(result.history),
        "checkpoint": ck_id,
    }
    write_json(out / "metrics.json", metrics)
    if figures:
        from . import plotting

        plotting.sweep_curve(sw, out / "figures" / "sweep.png")
        plotting.loss_curves(result.history, out / "figures" / "loss.png")
    return metrics


def _write_csv(path: Path, header: Sequence[str], rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    os.replace(tmp, path)
    return path


def _caption_entries(captions_path) -> dict[str, dict]:
    """Captions file: JSON object of id -> caption string or id -> {caption, group, volume_id, slice_index}."""
    try:
        doc = json.loads(Path(captions_path).read_text())
    except FileNotFoundError:
        raise DataError(f"captions file not found: {captions_path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"captions file {captions_path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise DataError(f"{captions_path}: expected a JSON object keyed by sample id")
    entries = {}
    for sid, value in doc.items():
        entry = {"caption": value} if isinstance(value, str) else dict(value)
        if not isinstance(entry.get("caption"), str):
            raise DataError(f"{captions_path}: sample {sid!r} has no caption text")
        entries[sid] = entry
    return entries


def analyze_text(captions_path, out_dir, embeddings=None, manifest_path=None, figures: bool = True) -> dict:
    """Word histograms per group and, given embeddings plus slice order, sliding-window similarity.

    Groups, volume ids and slice indices come from the captions file, falling
    back to the dataset manifest (group = the sample's lesion tags, or
    "healthy").
    """
    out = Path(out_dir)
    entries = _caption_entries(captions_path)
    if manifest_path is not None:
        manifest = DatasetManifest.read(manifest_path)
        for ref in manifest.samples:
            entry = entries.get(ref["id"])
            if entry is None:
                continue
            tags = list(ref.get("labels", []))
            entry.setdefault("group", "+".join(tags) if tags else "healthy")
            for key in ("volume_id", "slice_index"):
                if key in ref:
                    entry.setdefault(key, ref[key])
    ids = sorted(entries)
    freqs = word_frequency([entries[i]["caption"] for i in ids], [str(entries[i].get("group", "all")) for i in ids])
    hist_rows = [(g, w, c) for g, words in freqs.items() for w, c in words]
    report = {"histogram": str(_write_csv(out / "histogram.csv", ("group", "word", "count"), hist_rows)),
              "groups": {g: len(words) for g, words in freqs.items()}}

    sim = None
    ordered = [i for i in ids if "volume_id" in entries[i] and "slice_index" in entries[i]]
    if embeddings is not None and ordered:
        cache = EmbeddingCache.open(embeddings)
        vectors = {i: load_description(cache, i) for i in ordered}
        sim = sliding_similarity(vectors, {i: str(entries[i]["volume_id"]) for i in ordered},
                                 {i: int(entries[i]["slice_index"]) for i in ordered})
        report["similarity"] = str(_write_csv(out / "similarity.csv", ("window", "similarity"),
                                              [(w, f"{v:.10g}") for w, v in sorted(sim.items())]))
    elif embeddings is not None:
        log.warning("no volume/slice information for the captions; skipping the similarity analysis")
    if figures:
        from . import plotting

        plotting.word_histograms(freqs, out / "figures" / "word_histograms.png")
        if sim is not None:
            plotting.similarity_by_window({"descriptions": sim}, out / "figures" / "similarity.png")
    return report
