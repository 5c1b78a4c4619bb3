"""Detection/localization metrics, the mix and cross evaluation settings, and sweeps."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.stats import rankdata

from gimlab import degrade as dg
from gimlab import synthgen as sg
from gimlab.model.train import ImageSet, to_batch

SETTING_EVAL_SUBSETS = {
    "mix": ("SD-like", "GLIDE-like", "DDNM-like"),
    "cross": ("SD-like", "cross-dist", "GLIDE-like", "DDNM-like"),
}

# (label, op, param) in the column order of the robustness table
ROBUSTNESS_CELLS = (
    ("No Distortion", "none", None),
    ("Cmp (q=90)", "jpeg", 90),
    ("Cmp (q=80)", "jpeg", 80),
    ("Cmp (q=75)", "jpeg", 75),
    ("Blur (k=3)", "blur", 3),
    ("Blur (k=5)", "blur", 5),
    ("Downsample (0.66X)", "downsample", 0.66),
    ("Downsample (0.5X)", "downsample", 0.5),
)


class BenchError(ValueError):
    pass


def _check_shapes(a, b):
    if np.shape(a) != np.shape(b):
        raise BenchError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def pixel_f1(pred_probs, gt, threshold: float = 0.5) -> float:
    """F1 of the manipulated class after thresholding (strictly greater than ``threshold``).

    An empty ground truth with an empty prediction scores 1.0.
    """
    gt = np.asarray(getattr(gt, "pixels", gt)).astype(bool)
    pred_probs = np.asarray(pred_probs)
    _check_shapes(pred_probs, gt)
    if not 0 < threshold < 1:
        raise BenchError(f"threshold must be in (0, 1), got {threshold}")
    pred = pred_probs > threshold
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    if tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


def pixel_auc(pred_probs, gt) -> float | None:
    """Rank-based ROC AUC with mid-rank ties; None when ``gt`` holds a single class."""
    gt = np.asarray(getattr(gt, "pixels", gt)).astype(bool).ravel()
    scores = np.asarray(pred_probs, dtype=np.float64).ravel()
    _check_shapes(scores, gt)
    n_pos = int(gt.sum())
    n_neg = gt.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)  # average ranks for ties
    return float((ranks[gt].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def cls_accuracy(label_logits, labels, threshold: float = 0.5) -> float:
    logits = np.asarray(label_logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.shape != labels.shape:
        raise BenchError("logits and labels must have equal length")
    if logits.size == 0:
        raise BenchError("cannot score an empty list")
    pred = sigmoid(logits) > threshold  # ties go to class 0
    return float(np.mean(pred == labels.astype(bool)))


def max_map_statistic(mask_probs) -> float:
    return float(np.max(mask_probs))


# --------------------------------------------------------------------------- evaluation


@dataclass
class Predictions:
    mask_probs: np.ndarray  # (N, H, W)
    label_logits: np.ndarray  # (N,)


def predict(model, images: np.ndarray, batch_size: int = 32) -> Predictions:
    model.eval()
    masks, logits = [], []
    with torch.no_grad():
        for s in range(0, len(images), batch_size):
            out = model(to_batch(images[s:s + batch_size]))
            masks.append(torch.sigmoid(out.mask_logits).double().numpy())
            logits.append(out.label_logit.double().numpy())
    return Predictions(np.concatenate(masks), np.concatenate(logits))


def score_predictions(pred: Predictions, masks: np.ndarray, labels: np.ndarray, threshold: float = 0.5,
                      score: str = "head") -> dict:
    """Mean per-image F1, mean per-image AUC (single-class images skipped), and Cls.Acc."""
    f1s = [pixel_f1(p, m, threshold) for p, m in zip(pred.mask_probs, masks)]
    aucs = [a for a in (pixel_auc(p, m) for p, m in zip(pred.mask_probs, masks)) if a is not None]
    if score == "head":
        acc = cls_accuracy(pred.label_logits, labels)
    elif score == "max_map":
        stats = np.array([max_map_statistic(p) for p in pred.mask_probs])
        acc = float(np.mean((stats > threshold) == labels.astype(bool)))
    else:
        raise BenchError(f"unknown detection score {score!r}")
    return {
        "cls_acc": acc,
        "pixel_f1": float(np.mean(f1s)),
        "pixel_auc": float(np.mean(aucs)) if aucs else math.nan,
        "n_images": int(len(labels)),
        "n_auc": len(aucs),
    }


def evaluate(model, data: ImageSet, threshold: float = 0.5, score: str = "head") -> dict:
    return score_predictions(predict(model, data.images), data.masks, data.labels, threshold, score)


@dataclass
class SubsetRow:
    subset: str
    cls_acc: float
    pixel_f1: float
    pixel_auc: float
    n_images: int = 0


@dataclass
class EvalReport:
    setting: str
    rows: list[SubsetRow]
    seed: int
    fingerprint: str
    robustness: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for r in self.rows:
            for v in (r.cls_acc, r.pixel_f1, r.pixel_auc):
                if not (math.isnan(v) or 0.0 <= v <= 1.0):
                    raise BenchError(f"metric out of [0, 1] in row {r}")

    def to_table(self) -> str:
        lines = [f"setting={self.setting} seed={self.seed} fingerprint={self.fingerprint}",
                 f"{'subset':<12} {'Cls.Acc':>8} {'F1':>8} {'AUC':>8} {'n':>6}"]
        for r in self.rows:
            lines.append(f"{r.subset:<12} {100 * r.cls_acc:8.1f} {100 * r.pixel_f1:8.1f} "
                         f"{100 * r.pixel_auc:8.1f} {r.n_images:6d}")
        if self.robustness:
            lines.append("")
            lines.append("robustness (pixel F1 %)")
            width = max(len(c["cell"]) for c in self.robustness)
            for c in self.robustness:
                lines.append(f"  {c['cell']:<{width}} {100 * c['pixel_f1']:8.1f}")
        return "\n".join(lines)

    def records(self) -> list[dict]:
        meta = {"setting": self.setting, "seed": self.seed, "fingerprint": self.fingerprint}
        out = [{"kind": "subset", **meta, **asdict(r)} for r in self.rows]
        out += [{"kind": "robustness", **meta, **c} for c in self.robustness]
        if self.extra:
            out.append({"kind": "extra", **meta, **self.extra})
        return out

    def write(self, directory: str | Path, stem: str = "report") -> tuple[Path, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        table = d / f"{stem}.txt"
        table.write_text(self.to_table() + "\n", encoding="utf-8")
        jsonl = d / f"{stem}.jsonl"
        jsonl.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records()), encoding="utf-8")
        return table, jsonl

    @classmethod
    def read(cls, jsonl: str | Path) -> "EvalReport":
        recs = [json.loads(line) for line in Path(jsonl).read_text(encoding="utf-8").splitlines() if line]
        if not recs:
            raise BenchError(f"{jsonl} holds no records")
        head = recs[0]
        rows = [SubsetRow(r["subset"], r["cls_acc"], r["pixel_f1"], r["pixel_auc"], r["n_images"])
                for r in recs if r["kind"] == "subset"]
        rob = [{k: r[k] for k in ("cell", "op", "param", "pixel_f1")} for r in recs if r["kind"] == "robustness"]
        extra = next(({k: v for k, v in r.items() if k not in ("kind", "setting", "seed", "fingerprint")}
                      for r in recs if r["kind"] == "extra"), {})
        return cls(head["setting"], rows, head["seed"], head["fingerprint"], rob, extra)


def load_test_sets(manifest: sg.DatasetManifest, subsets) -> dict[str, ImageSet]:
    return {s: ImageSet.from_manifest(manifest.select(subsets=(s,), split="test")) for s in subsets}


def run_setting(model, manifest: sg.DatasetManifest, setting: str, seed: int = 0, fingerprint: str = "",
                test_sets: dict[str, ImageSet] | None = None, score: str = "head") -> EvalReport:
    """Evaluate ``model`` on each test subset of ``setting`` (3 rows for mix, 4 for cross)."""
    if setting not in SETTING_EVAL_SUBSETS:
        raise BenchError(f"unknown setting {setting!r}")
    subsets = SETTING_EVAL_SUBSETS[setting]
    present = {e.subset for e in manifest.entries if e.split == "test"}
    missing = [s for s in subsets if s not in present and not (test_sets and s in test_sets)]
    if missing:
        raise BenchError(f"setting {setting!r} needs test subsets {missing}")
    test_sets = test_sets or load_test_sets(manifest, subsets)
    rows = []
    for s in subsets:
        m = evaluate(model, test_sets[s], score=score)
        rows.append(SubsetRow(s, m["cls_acc"], m["pixel_f1"], m["pixel_auc"], m["n_images"]))
    return EvalReport(setting, rows, seed, fingerprint)


def clean_testset(manifest: sg.DatasetManifest, subsets=None) -> ImageSet:
    """Undegraded test images rebuilt from the lossless originals and traces."""
    from gimlab.tracer import load_pair

    sel = manifest.select(subsets=subsets, split="test")
    if not sel.entries:
        raise BenchError("no test entries for the clean test set")
    imgs, masks, labels = [], [], []
    for e in sel.entries:
        rec = load_pair(sel, e)
        imgs.append((rec.original + rec.trace).astype(np.float32))
        masks.append(rec.mask)
        labels.append(rec.label)
    return ImageSet(np.stack(imgs), np.stack(masks), np.asarray(labels), list(sel.entries))


def robustness_sweep(model, clean: ImageSet, threshold: float = 0.5) -> list[dict]:
    """Pixel F1 of the same model on the same images under each single distortion."""
    rows = []
    for cell, op, param in ROBUSTNESS_CELLS:
        if op == "none":
            images = clean.images
        else:
            images = np.stack([dg.apply_degradation(im, op, param) for im in clean.images]).astype(np.float32)
        pred = predict(model, images)
        f1 = float(np.mean([pixel_f1(p, m, threshold) for p, m in zip(pred.mask_probs, clean.masks)]))
        rows.append({"cell": cell, "op": op, "param": param, "pixel_f1": f1})
    return rows


def nested_subsets(manifest: sg.DatasetManifest, sizes, seed: int) -> list[sg.DatasetManifest]:
    """Training manifests of the requested sizes, each a prefix of one seeded permutation."""
    sizes = list(sizes)
    if sizes != sorted(sizes):
        raise BenchError("scale sweep sizes must be ascending")
    entries = list(manifest.entries)
    if sizes and sizes[-1] > len(entries):
        raise BenchError(f"largest size {sizes[-1]} exceeds {len(entries)} available entries")
    order = np.random.default_rng(seed).permutation(len(entries))
    return [sg.DatasetManifest([entries[i] for i in order[:n]], manifest.seed, manifest.fingerprint, manifest.root)
            for n in sizes]


def run_scale_sweep(manifest: sg.DatasetManifest, sizes, train_fn, setting: str = "cross", seed: int = 0) -> list[dict]:
    """Train one model per size via ``train_fn(train_manifest) -> model`` and score it on the test split."""
    from gimlab.model.train import setting_manifest

    train = setting_manifest(manifest, setting)
    test = load_test_sets(manifest, SETTING_EVAL_SUBSETS[setting][:1])
    rows = []
    for n, sub in zip(sizes, nested_subsets(train, sizes, seed)):
        model = train_fn(sub)
        m = evaluate(model, next(iter(test.values())))
        rows.append({"size": n, **m})
    if len(rows) > 1 and rows[-1]["pixel_f1"] < rows[0]["pixel_f1"] - 0.05:
        rows[-1]["flag"] = "largest size scored below smallest - 0.05"
    return rows
