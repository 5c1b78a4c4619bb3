from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from gimlab.model.encoder import DualEncoder
from gimlab.model.layers import DEFAULT_WINDOWS
from gimlab.tracer import ShadowTracer, TracerWeights

CKPT_FORMAT = "gimlab-gimformer/1"
ABLATIONS = ("fsb", "mwam", "tracer")


class CheckpointError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    img_size: int = 64
    dims: tuple[int, ...] = (32, 64, 160, 256)
    depths: tuple[int, ...] = (2, 2, 2, 2)
    heads: tuple[int, ...] = (1, 2, 5, 8)
    sr_ratios: tuple[int, ...] = (8, 4, 2, 1)
    mlp_ratio: int = 4
    windows: tuple[tuple[int, ...], ...] = DEFAULT_WINDOWS
    decoder_dim: int = 64
    head_dim: int = 64
    trace_scale: float = 10.0
    use_fsb: bool = True
    use_mwam: bool = True
    use_tracer: bool = True

    def __post_init__(self):
        self.dims = tuple(self.dims)
        self.depths = tuple(self.depths)
        self.heads = tuple(self.heads)
        self.sr_ratios = tuple(self.sr_ratios)
        self.windows = tuple(tuple(w) for w in self.windows)

    @classmethod
    def ablated(cls, ablate=(), **kw) -> "ModelConfig":
        for a in ablate:
            if a not in ABLATIONS:
                raise ValueError(f"unknown ablation {a!r}; choose from {ABLATIONS}")
        return cls(use_fsb="fsb" not in ablate, use_mwam="mwam" not in ablate,
                   use_tracer="tracer" not in ablate, **kw)

    def canonical(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.canonical(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class ModelOutput:
    mask_logits: torch.Tensor  # (B, H, W)
    label_logit: torch.Tensor  # (B,)
    features: list[torch.Tensor] = field(default_factory=list, repr=False)


class MLPDecoder(nn.Module):
    """SegFormer all-MLP head: per-stage 1x1 projections, upsample to stride 4, fuse, predict."""

    def __init__(self, dims, embed):
        super().__init__()
        self.proj = nn.ModuleList(nn.Conv2d(d, embed, 1) for d in dims)
        self.fuse = nn.Sequential(nn.Conv2d(4 * embed, embed, 1, bias=False), nn.BatchNorm2d(embed), nn.ReLU())
        self.pred = nn.Conv2d(embed, 1, 1)

    def forward(self, feats):
        size = feats[0].shape[-2:]
        ups = [F.interpolate(p(f), size=size, mode="bilinear", align_corners=False) if i else p(f)
               for i, (p, f) in enumerate(zip(self.proj, feats))]
        return self.pred(self.fuse(torch.cat(ups, dim=1)))


class DetectionHead(nn.Module):
    """conv + BN + activation on the last stage, pooled, then a 2-layer MLP."""

    def __init__(self, dim, hidden):
        super().__init__()
        self.conv = nn.Sequential(nn.Conv2d(dim, hidden, 1, bias=False), nn.BatchNorm2d(hidden), nn.ReLU())
        self.mlp = nn.Sequential(nn.Linear(hidden, hidden), nn.ReLU(), nn.Linear(hidden, 1))

    def forward(self, x):
        return self.mlp(self.conv(x).mean((2, 3)))[:, 0]


class GIMFormer(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None, tracer: ShadowTracer | None = None,
                 finetune_tracer: bool = False):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        self.encoder = DualEncoder(cfg)
        self.decoder = MLPDecoder(cfg.dims, cfg.decoder_dim)
        self.cls_head = DetectionHead(cfg.dims[-1], cfg.head_dim)
        self.finetune_tracer = finetune_tracer
        self.tracer = tracer if cfg.use_tracer else None
        if self.tracer is not None and not finetune_tracer:
            for p in self.tracer.parameters():
                p.requires_grad_(False)

    def train(self, mode: bool = True):
        super().train(mode)
        if self.tracer is not None and not self.finetune_tracer:
            self.tracer.eval()
        return self

    def trace(self, image: torch.Tensor) -> torch.Tensor:
        if self.tracer is None:
            raise CheckpointError("model has no tracer attached")
        if self.finetune_tracer:
            return self.tracer(image)
        with torch.no_grad():
            return self.tracer(image)

    def encode(self, image: torch.Tensor, trace: torch.Tensor | None = None) -> list[torch.Tensor]:
        if self.cfg.use_tracer and trace is None:
            trace = self.trace(image)
        x = (image - 0.5) / 0.25
        t = trace * self.cfg.trace_scale if trace is not None else None
        return self.encoder(x, t if self.cfg.use_tracer else None)

    def decode(self, feats: list[torch.Tensor], size: tuple[int, int]) -> ModelOutput:
        if len(feats) != 4:
            raise ValueError(f"decoder needs a 4-stage pyramid, got {len(feats)} stages")
        mask = self.decoder(feats)
        mask = F.interpolate(mask, size=size, mode="bilinear", align_corners=False)[:, 0]
        return ModelOutput(mask, self.cls_head(feats[3]), feats)

    def forward(self, image: torch.Tensor, trace: torch.Tensor | None = None) -> ModelOutput:
        return self.decode(self.encode(image, trace), image.shape[-2:])


def _check_binary(t: torch.Tensor, name: str):
    if not bool(((t == 0) | (t == 1)).all()):
        raise ValueError(f"{name} must be binary")


def model_loss(label: torch.Tensor, label_logit: torch.Tensor, mask: torch.Tensor,
               mask_logits: torch.Tensor) -> torch.Tensor:
    """BCE on the image label plus pixel-averaged BCE on the mask, summed unweighted."""
    label = label.to(label_logit.dtype)
    mask = mask.to(mask_logits.dtype)
    if label.shape != label_logit.shape or mask.shape != mask_logits.shape:
        raise ValueError("label/mask shapes do not match the logits")
    _check_binary(label, "label")
    _check_binary(mask, "mask")
    cls = F.binary_cross_entropy_with_logits(label_logit, label)
    seg = F.binary_cross_entropy_with_logits(mask_logits, mask)
    return cls + seg


# --------------------------------------------------------------------------- checkpoints


def save_model(model: GIMFormer, path: str | Path, fingerprint: str, extra: dict | None = None) -> None:
    torch.save(
        {
            "format": CKPT_FORMAT,
            "fingerprint": fingerprint,
            "arch": model.cfg.canonical(),
            "arch_fingerprint": model.cfg.fingerprint(),
            "tracer_config": asdict(model.tracer.cfg) if model.tracer is not None else None,
            "finetune_tracer": model.finetune_tracer,
            "state_dict": model.state_dict(),
            "extra": extra or {},
        },
        path,
    )


def load_model(path: str | Path, expected_arch: ModelConfig | None = None) -> tuple[GIMFormer, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != CKPT_FORMAT:
        raise CheckpointError(f"{path} is not a GIMFormer checkpoint ({CKPT_FORMAT})")
    cfg = ModelConfig.from_dict(blob["arch"])
    if cfg.fingerprint() != blob["arch_fingerprint"]:
        raise CheckpointError(f"{path}: stored architecture fingerprint is inconsistent")
    if expected_arch is not None and expected_arch.fingerprint() != blob["arch_fingerprint"]:
        raise CheckpointError(
            f"checkpoint architecture {blob['arch_fingerprint']} does not match config {expected_arch.fingerprint()}"
        )
    tracer = None
    if blob["tracer_config"] is not None:
        from gimlab.tracer import TracerConfig

        tracer = ShadowTracer(TracerConfig(**blob["tracer_config"]))
    model = GIMFormer(cfg, tracer, blob["finetune_tracer"])
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob


def build_model(cfg: ModelConfig, tracer: TracerWeights | None, finetune_tracer: bool = False) -> GIMFormer:
    if cfg.use_tracer and tracer is None:
        raise CheckpointError("a tracer is required unless the tracer is ablated")
    module = copy.deepcopy(tracer.model) if tracer is not None and cfg.use_tracer else None
    return GIMFormer(cfg, module, finetune_tracer)
