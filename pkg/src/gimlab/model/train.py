"""GIMFormer training: in-memory image set, resize/flip augmentation, AdamW + poly schedule."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from gimlab import synthgen as sg
from gimlab.model.gimformer import GIMFormer, ModelConfig, build_model, model_loss
from gimlab.tracer import TracerWeights

log = logging.getLogger(__name__)

SETTING_TRAIN_SUBSETS = {
    "mix": ("SD-like", "GLIDE-like", "DDNM-like"),
    "cross": ("SD-like",),
}


class TrainingError(RuntimeError):
    pass


class TrainingDivergence(TrainingError, ArithmeticError):
    pass


@dataclass
class TrainHyperparams:
    epochs: int = 5
    batch_size: int = 8
    lr: float = 6e-5
    weight_decay: float = 1e-2
    eps: float = 1e-8
    poly_power: float = 0.9
    resize_range: tuple[float, float] = (0.5, 2.0)
    flip: bool = True
    monitor_size: int = 256
    seed: int = 0

    def canonical(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


@dataclass
class ImageSet:
    """Images (N, H, W, 3) float32, masks (N, H, W) uint8, labels (N,), plus the entries."""

    images: np.ndarray
    masks: np.ndarray
    labels: np.ndarray
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_manifest(cls, manifest: sg.DatasetManifest) -> "ImageSet":
        if not manifest.entries:
            raise TrainingError("empty manifest")
        imgs, masks, labels = [], [], []
        for e in manifest.entries:
            img = sg.load_rgb(manifest.resolve(e.image)).astype(np.float32)
            imgs.append(img)
            if e.mask == "-":
                masks.append(np.zeros(img.shape[:2], np.uint8))
            else:
                masks.append(sg.load_mask(manifest.resolve(e.mask)))
            labels.append(e.label)
        return cls(np.stack(imgs), np.stack(masks), np.asarray(labels, np.int64), list(manifest.entries))

    def subset(self, idx) -> "ImageSet":
        idx = np.asarray(idx)
        return ImageSet(self.images[idx], self.masks[idx], self.labels[idx], [self.entries[i] for i in idx])


def setting_manifest(manifest: sg.DatasetManifest, setting: str, split: str = "train") -> sg.DatasetManifest:
    if setting not in SETTING_TRAIN_SUBSETS:
        raise TrainingError(f"unknown setting {setting!r}")
    return manifest.select(subsets=SETTING_TRAIN_SUBSETS[setting], split=split)


def augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator, resize_range, flip: bool):
    """Random resize by a ratio in ``resize_range`` then crop/pad back to the input size; random h-flip."""
    h, w = mask.shape
    lo, hi = resize_range
    if hi > lo or lo != 1.0:
        ratio = float(rng.uniform(lo, hi))
        nh, nw = max(1, round(h * ratio)), max(1, round(w * ratio))
        if (nh, nw) != (h, w):
            t = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)[None]
            image = F.interpolate(t, size=(nh, nw), mode="bilinear", align_corners=False)[0].permute(1, 2, 0).numpy()
            m = torch.from_numpy(mask.astype(np.float32))[None, None]
            mask = F.interpolate(m, size=(nh, nw), mode="nearest")[0, 0].numpy().astype(np.uint8)
        if nh < h or nw < w:
            # symmetric padding mirrors pixels and labels consistently
            ph, pw = max(0, h - nh), max(0, w - nw)
            image = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="symmetric")
            mask = np.pad(mask, ((0, ph), (0, pw)), mode="symmetric")
        y0 = int(rng.integers(image.shape[0] - h + 1))
        x0 = int(rng.integers(image.shape[1] - w + 1))
        image, mask = image[y0:y0 + h, x0:x0 + w], mask[y0:y0 + h, x0:x0 + w]
    if flip and rng.random() < 0.5:
        image, mask = image[:, ::-1], mask[:, ::-1]
    return np.ascontiguousarray(image, dtype=np.float32), np.ascontiguousarray(mask)


def to_batch(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)).permute(0, 3, 1, 2)


def dataset_loss(model: GIMFormer, data: ImageSet, batch_size: int = 32) -> float:
    model.eval()
    total = 0.0
    with torch.no_grad():
        for s in range(0, len(data), batch_size):
            sl = slice(s, s + batch_size)
            out = model(to_batch(data.images[sl]))
            loss = model_loss(torch.from_numpy(data.labels[sl]).float(), out.label_logit,
                              torch.from_numpy(data.masks[sl]).float(), out.mask_logits)
            total += float(loss) * len(data.labels[sl])
    model.train()
    return total / len(data)


def poly_lambda(total_iters: int, power: float):
    return lambda it: max(0.0, 1.0 - it / max(1, total_iters)) ** power


@dataclass
class TrainResult:
    model: GIMFormer
    history: list[dict]
    init_loss: float
    fingerprint: str


def training_fingerprint(cfg: ModelConfig, hp: TrainHyperparams, data_fp: str, tracer_fp: str | None,
                         setting: str) -> str:
    blob = {"arch": cfg.canonical(), "hp": hp.canonical(), "data": data_fp, "tracer": tracer_fp,
            "setting": setting}
    return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()[:16]


def train_model(manifest: sg.DatasetManifest, tracer: TracerWeights | None, hp: TrainHyperparams | None = None,
                cfg: ModelConfig | None = None, setting: str = "mix", finetune_tracer: bool = False,
                data: ImageSet | None = None, callback=None) -> TrainResult:
    """Optimise detection BCE + mask BCE on the training split of ``setting``.

    ``manifest`` may be the whole dataset; only the setting's training subsets are used.
    A prebuilt ``data`` set skips loading from disk.
    """
    hp = hp or TrainHyperparams()
    cfg = cfg or ModelConfig()
    train_manifest = setting_manifest(manifest, setting)
    if data is None:
        data = ImageSet.from_manifest(train_manifest)
    if data.images.shape[1] != cfg.img_size:
        raise TrainingError(f"image size {data.images.shape[1]} != model img_size {cfg.img_size}")

    torch.manual_seed(hp.seed)
    model = build_model(cfg, tracer, finetune_tracer)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=hp.lr, eps=hp.eps, weight_decay=hp.weight_decay)
    steps_per_epoch = int(np.ceil(len(data) / hp.batch_size))
    sched = torch.optim.lr_scheduler.LambdaLR(opt, poly_lambda(hp.epochs * steps_per_epoch, hp.poly_power))

    rng = np.random.default_rng(np.random.SeedSequence([hp.seed, 1]))
    monitor = data.subset(rng.permutation(len(data))[: hp.monitor_size])
    init_loss = dataset_loss(model, monitor)
    history = []
    model.train()
    for epoch in range(1, hp.epochs + 1):
        order = rng.permutation(len(data))
        losses = []
        for s in range(0, len(order), hp.batch_size):
            idx = order[s:s + hp.batch_size]
            pairs = [augment(data.images[i], data.masks[i], rng, hp.resize_range, hp.flip) for i in idx]
            images = to_batch(np.stack([p[0] for p in pairs]))
            masks = torch.from_numpy(np.stack([p[1] for p in pairs]).astype(np.float32))
            labels = torch.from_numpy(data.labels[idx].astype(np.float32))
            out = model(images)
            loss = model_loss(labels, out.label_logit, masks, out.mask_logits)
            if not torch.isfinite(loss):
                raise TrainingDivergence(f"non-finite loss at epoch {epoch}: {float(loss.detach())}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            losses.append(float(loss.detach()))
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "monitor_loss": dataset_loss(model, monitor),
               "lr": sched.get_last_lr()[0]}
        history.append(row)
        log.info("model epoch %d %s", epoch, row)
        if callback:
            callback(row)
    model.eval()
    fp = training_fingerprint(cfg, hp, manifest.fingerprint, tracer.fingerprint if tracer and cfg.use_tracer else None,
                              setting)
    return TrainResult(model, history, init_loss, fp)
