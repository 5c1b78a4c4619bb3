"""ShadowTracer: a plain convolutional regressor from an image to its manipulation trace."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
from torch import nn

from gimlab import degrade as dg
from gimlab import synthgen as sg

log = logging.getLogger(__name__)

CKPT_FORMAT = "gimlab-tracer/1"


class TracerError(RuntimeError):
    pass


class TracerDivergence(TracerError, ArithmeticError):
    """Raised when the training loss stops being finite."""


@dataclass
class TracerConfig:
    num_layers: int = 15
    hidden: int = 64
    in_channels: int = 3
    out_channels: int = 1

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TracerHyperparams:
    iterations: int = 20000
    batch_size: int = 64
    patch_size: int = 64
    lr: float = 1e-3
    mask_fraction: float = 1.0  # zero-target patches drag the norm loss to the all-zero map
    degrade_prob: float = 1.0
    val_batches: int = 4
    log_every: int = 100
    zero_head: bool = True
    seed: int = 0


class ShadowTracer(nn.Module):
    """DnCNN-style stack: conv+ReLU, (L-2) x conv+BN+ReLU, linear conv head. No global skip."""

    def __init__(self, cfg: TracerConfig | None = None, zero_head: bool = False):
        super().__init__()
        self.cfg = cfg = cfg or TracerConfig()
        if cfg.num_layers < 2:
            raise TracerError("tracer needs at least 2 layers")

        def conv(cin, cout, bias):
            return nn.Conv2d(cin, cout, 3, padding=1, padding_mode="replicate", bias=bias)

        layers = [conv(cfg.in_channels, cfg.hidden, True), nn.ReLU(inplace=True)]
        for _ in range(cfg.num_layers - 2):
            layers += [conv(cfg.hidden, cfg.hidden, False), nn.BatchNorm2d(cfg.hidden), nn.ReLU(inplace=True)]
        self.head = conv(cfg.hidden, cfg.out_channels, True)
        layers.append(self.head)
        self.body = nn.Sequential(*layers)
        if zero_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    @property
    def receptive_field(self) -> int:
        return 2 * self.cfg.num_layers + 1

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if min(h, w) < self.receptive_field:
            raise TracerError(
                f"input {h}x{w} smaller than the tracer receptive field {self.receptive_field}"
            )
        return self.body(x)


def trace_forward(model: ShadowTracer, image: np.ndarray | torch.Tensor) -> np.ndarray:
    """Inference on one H x W x 3 image (values in [0,1]); returns an H x W signed trace map."""
    x = torch.as_tensor(np.asarray(image), dtype=next(model.parameters()).dtype)
    if x.min() < 0 or x.max() > 1:
        raise TracerError("tracer input must lie in [0, 1]")
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model(x.permute(2, 0, 1)[None])[0, 0]
    model.train(was_training)
    return out.numpy()


def tracer_loss(predicted: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-patch L2 norm of the residual (not squared), averaged over the batch.

    Tensors are (B, C, H, W); a 3-D input is treated as a single patch.
    """
    if predicted.shape != target.shape:
        raise TracerError(f"shape mismatch: {tuple(predicted.shape)} vs {tuple(target.shape)}")
    diff = predicted - target
    if diff.dim() == 3:
        diff = diff[None]
    return torch.linalg.vector_norm(diff.flatten(1), dim=1).mean()


# --------------------------------------------------------------------------- data


@dataclass
class PairRecord:
    original: np.ndarray  # H x W x 3
    trace: np.ndarray  # H x W x 3, zeros for authentic
    mask: np.ndarray  # H x W
    label: int


@lru_cache(maxsize=None)
def _load_pair(root: str, original: str, trace: str, mask: str) -> PairRecord:
    base = Path(root)
    orig = sg.load_rgb(base / original)
    if trace == "-":
        h, w = orig.shape[:2]
        return PairRecord(orig, np.zeros_like(orig), np.zeros((h, w), np.uint8), 0)
    return PairRecord(orig, np.load(base / trace), sg.load_mask(base / mask), 1)


def load_pair(manifest: sg.DatasetManifest, entry: sg.ManifestEntry) -> PairRecord:
    return _load_pair(str(manifest.root), entry.original, entry.trace, entry.mask)


@dataclass
class PatchBatch:
    images: np.ndarray  # B x P x P x 3
    targets: np.ndarray  # B x P x P x 1
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _crop_overlapping_mask(rng, mask, patch):
    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    k = int(rng.integers(len(ys)))
    y0 = int(rng.integers(max(0, ys[k] - patch + 1), min(ys[k], h - patch) + 1))
    x0 = int(rng.integers(max(0, xs[k] - patch + 1), min(xs[k], w - patch) + 1))
    return y0, x0


def sample_patches(manifest: sg.DatasetManifest, patch_size: int, count: int, rng_seed,
                   augment: bool = False, mask_fraction: float = 0.5, degrade_prob: float = 1.0,
                   alpha_range=(0.5, 1.0)) -> PatchBatch:
    """Random (image patch, target trace patch) pairs.

    With probability ``mask_fraction`` a patch comes from a manipulated image and
    overlaps its mask; otherwise it comes from an authentic image (target zero).
    With ``augment`` the full image is mix-up blended with alpha ~ U(alpha_range)
    and randomly degraded before cropping; the target stays the clean blended trace.
    """
    entries = manifest.entries
    if not entries:
        raise TracerError("cannot sample patches from an empty manifest")
    manipulated = [e for e in entries if e.label == 1]
    authentic = [e for e in entries if e.label == 0]
    rng = np.random.default_rng(rng_seed)
    images, targets, labels = [], [], []
    for _ in range(count):
        use_manip = manipulated and (not authentic or rng.random() < mask_fraction)
        entry = (manipulated if use_manip else authentic)[int(rng.integers(len(manipulated if use_manip else authentic)))]
        rec = load_pair(manifest, entry)
        h, w = rec.mask.shape
        if patch_size > min(h, w):
            raise TracerError(f"patch size {patch_size} exceeds image size {h}x{w}")
        trace = rec.trace
        image = rec.original + trace
        if augment:
            if rec.label:
                alpha = float(rng.uniform(*alpha_range))
                image = sg.mixup_blend(rec.original, image, alpha)
                trace = image - rec.original
            deg_seed = int(rng.integers(2**31))
            if rng.random() < degrade_prob:
                image, _ = dg.random_degrade(image, deg_seed)
        if rec.label and rec.mask.any():
            y0, x0 = _crop_overlapping_mask(rng, rec.mask, patch_size)
        else:
            y0 = int(rng.integers(h - patch_size + 1))
            x0 = int(rng.integers(w - patch_size + 1))
        sl = (slice(y0, y0 + patch_size), slice(x0, x0 + patch_size))
        images.append(np.clip(image[sl], 0.0, 1.0))
        targets.append(trace[sl].mean(axis=-1, keepdims=True))
        labels.append(rec.label)
    return PatchBatch(np.stack(images), np.stack(targets), np.asarray(labels))


def _to_tensor(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(0, 3, 1, 2)


# --------------------------------------------------------------------------- training


@dataclass
class TracerWeights:
    model: ShadowTracer
    fingerprint: str
    history: list[dict] = field(default_factory=list)

    @property
    def final_train_loss(self) -> float:
        return self.history[-1]["train_loss"] if self.history else math.nan

    @property
    def final_val_loss(self) -> float:
        return self.history[-1].get("val_loss", math.nan) if self.history else math.nan


def training_fingerprint(cfg: TracerConfig, hp: TracerHyperparams, data_fingerprint: str) -> str:
    blob = json.dumps({"arch": asdict(cfg), "hp": asdict(hp), "data": data_fingerprint}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def evaluate_loss(model: ShadowTracer, batch: PatchBatch) -> float:
    model.eval()
    with torch.no_grad():
        loss = tracer_loss(model(_to_tensor(batch.images)), _to_tensor(batch.targets))
    model.train()
    return float(loss)


def train_tracer(manifest: sg.DatasetManifest, hp: TracerHyperparams | None = None,
                 cfg: TracerConfig | None = None, val_manifest: sg.DatasetManifest | None = None,
                 callback=None) -> TracerWeights:
    hp = hp or TracerHyperparams()
    cfg = cfg or TracerConfig()
    if not manifest.select(label=1).entries or not manifest.select(label=0).entries:
        raise TracerError("tracer training needs both authentic and manipulated samples")
    torch.manual_seed(hp.seed)
    model = ShadowTracer(cfg, zero_head=hp.zero_head)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=hp.lr)
    seeds = np.random.SeedSequence(hp.seed).spawn(2)
    batch_rng = np.random.default_rng(seeds[0])
    val_batch = None
    if val_manifest is not None and len(val_manifest):
        val_batch = sample_patches(val_manifest, hp.patch_size, hp.val_batches * hp.batch_size, seeds[1],
                                   augment=True, mask_fraction=hp.mask_fraction, degrade_prob=hp.degrade_prob)
    history: list[dict] = []
    running = []
    for it in range(1, hp.iterations + 1):
        batch = sample_patches(manifest, hp.patch_size, hp.batch_size, int(batch_rng.integers(2**63)),
                               augment=True, mask_fraction=hp.mask_fraction, degrade_prob=hp.degrade_prob)
        loss = tracer_loss(model(_to_tensor(batch.images)), _to_tensor(batch.targets))
        if not torch.isfinite(loss):
            raise TracerDivergence(f"non-finite tracer loss at iteration {it}: {float(loss.detach())}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        running.append(float(loss.detach()))
        if it % hp.log_every == 0 or it == hp.iterations:
            row = {"iteration": it, "train_loss": float(np.mean(running))}
            if val_batch is not None:
                row["val_loss"] = evaluate_loss(model, val_batch)
            history.append(row)
            running = []
            log.info("tracer it=%d %s", it, row)
            if callback:
                callback(row)
    model.eval()
    return TracerWeights(model, training_fingerprint(cfg, hp, manifest.fingerprint), history)


# --------------------------------------------------------------------------- persistence


def save_tracer(weights: TracerWeights, path: str | Path) -> None:
    torch.save(
        {
            "format": CKPT_FORMAT,
            "fingerprint": weights.fingerprint,
            "config": asdict(weights.model.cfg),
            "history": weights.history,
            "state_dict": weights.model.state_dict(),
        },
        path,
    )


def load_tracer(path: str | Path, expected_fingerprint: str | None = None) -> TracerWeights:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != CKPT_FORMAT:
        raise TracerError(f"{path} is not a tracer checkpoint ({CKPT_FORMAT})")
    if expected_fingerprint is not None and blob["fingerprint"] != expected_fingerprint:
        raise TracerError(
            f"tracer checkpoint fingerprint {blob['fingerprint']} != expected {expected_fingerprint}"
        )
    model = ShadowTracer(TracerConfig(**blob["config"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return TracerWeights(model, blob["fingerprint"], blob["history"])
