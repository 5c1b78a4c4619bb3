"""Dual-branch four-stage encoder (RGB branch + trace branch) with per-stage fusion."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from gimlab.model.layers import FrequencySpatialBlock, MultiWindowAnomaly


class OverlapPatchEmbed(nn.Module):
    def __init__(self, cin, cout, kernel, stride):
        super().__init__()
        self.proj = nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2, padding_mode="replicate")
        self.norm = nn.LayerNorm(cout)

    def forward(self, x):
        x = self.proj(x)
        b, c, h, w = x.shape
        x = self.norm(x.flatten(2).transpose(1, 2))
        return x.transpose(1, 2).reshape(b, c, h, w)


class EfficientAttention(nn.Module):
    """Multi-head self-attention with spatially reduced keys/values."""

    def __init__(self, dim, heads, sr_ratio):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)
        self.sr_ratio = sr_ratio
        if sr_ratio > 1:
            self.sr = nn.Conv2d(dim, dim, sr_ratio, stride=sr_ratio)
            self.norm = nn.LayerNorm(dim)

    def forward(self, x, h, w):
        b, n, c = x.shape
        q = self.q(x).reshape(b, n, self.heads, c // self.heads).transpose(1, 2)
        kv_in = x
        if self.sr_ratio > 1 and min(h, w) >= self.sr_ratio:
            kv_in = self.sr(x.transpose(1, 2).reshape(b, c, h, w)).flatten(2).transpose(1, 2)
            kv_in = self.norm(kv_in)
        kv = self.kv(kv_in).reshape(b, -1, 2, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        k, v = kv[0], kv[1]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        out = (attn.softmax(dim=-1) @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class MixFFN(nn.Module):
    def __init__(self, dim, ratio=4):
        super().__init__()
        hidden = dim * ratio
        self.fc1 = nn.Linear(dim, hidden)
        self.dw = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden, padding_mode="replicate")
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, h, w):
        x = self.fc1(x)
        b, n, c = x.shape
        x = self.dw(x.transpose(1, 2).reshape(b, c, h, w)).flatten(2).transpose(1, 2)
        return self.fc2(F.gelu(x))


class TransformerBlock(nn.Module):
    def __init__(self, dim, heads, sr_ratio, mlp_ratio=4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = EfficientAttention(dim, heads, sr_ratio)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = MixFFN(dim, mlp_ratio)

    def forward(self, x, h, w):
        x = x + self.attn(self.norm1(x), h, w)
        return x + self.ffn(self.norm2(x), h, w)


class Stage(nn.Module):
    """Transformer blocks on a (B, C, H, W) map followed by a LayerNorm."""

    def __init__(self, dim, depth, heads, sr_ratio, mlp_ratio=4):
        super().__init__()
        self.blocks = nn.ModuleList(TransformerBlock(dim, heads, sr_ratio, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        b, c, h, w = x.shape
        t = x.flatten(2).transpose(1, 2)
        for blk in self.blocks:
            t = blk(t, h, w)
        return self.norm(t).transpose(1, 2).reshape(b, c, h, w)


class RectifyGate(nn.Module):
    """Cross-branch channel gating: pooled statistics of both branches gate the other branch,
    which is added back as a residual correction."""

    def __init__(self, dim, reduction=4, weight=0.5):
        super().__init__()
        hidden = max(dim // reduction, 8)
        self.mlp = nn.Sequential(nn.Linear(4 * dim, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, 2 * dim))
        self.weight = weight

    def forward(self, rgb, trace):
        stats = torch.cat([rgb.mean((2, 3)), rgb.amax((2, 3)), trace.mean((2, 3)), trace.amax((2, 3))], dim=1)
        g_rgb, g_trace = torch.sigmoid(self.mlp(stats))[:, :, None, None].chunk(2, dim=1)
        return rgb + self.weight * g_rgb * trace, trace + self.weight * g_trace * rgb


class FuseConcat(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.proj = nn.Conv2d(2 * dim, dim, 1)
        self.norm = nn.BatchNorm2d(dim)

    def forward(self, rgb, trace):
        return self.norm(self.proj(torch.cat([rgb, trace], dim=1)))


class DualEncoder(nn.Module):
    """Four stages at strides 4/8/16/32.

    Per stage the RGB branch runs patch-embed -> FSB -> transformer -> MWAM, the trace branch
    patch-embed -> transformer -> MWAM; the branches are rectified and fused into F_i while the
    rectified branch features feed the next stage.
    """

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        dims = cfg.dims
        size = cfg.img_size
        self.rgb_embed, self.rgb_fsb, self.rgb_stage, self.rgb_mwam = (nn.ModuleList() for _ in range(4))
        self.tr_embed, self.tr_stage, self.tr_mwam, self.rectify, self.fuse = (nn.ModuleList() for _ in range(5))
        for i in range(4):
            kernel, stride = (7, 4) if i == 0 else (3, 2)
            cin = 3 if i == 0 else dims[i - 1]
            side = size // (4 * 2**i)
            self.rgb_embed.append(OverlapPatchEmbed(cin, dims[i], kernel, stride))
            self.rgb_fsb.append(FrequencySpatialBlock(dims[i], side, side) if cfg.use_fsb else nn.Identity())
            self.rgb_stage.append(Stage(dims[i], cfg.depths[i], cfg.heads[i], cfg.sr_ratios[i], cfg.mlp_ratio))
            self.rgb_mwam.append(MultiWindowAnomaly(dims[i], cfg.windows[i]) if cfg.use_mwam else nn.Identity())
            if cfg.use_tracer:
                tin = 1 if i == 0 else dims[i - 1]
                self.tr_embed.append(OverlapPatchEmbed(tin, dims[i], kernel, stride))
                self.tr_stage.append(Stage(dims[i], cfg.depths[i], cfg.heads[i], cfg.sr_ratios[i], cfg.mlp_ratio))
                self.tr_mwam.append(MultiWindowAnomaly(dims[i], cfg.windows[i]) if cfg.use_mwam else nn.Identity())
                self.rectify.append(RectifyGate(dims[i]))
                self.fuse.append(FuseConcat(dims[i]))

    def forward(self, image: torch.Tensor, trace: torch.Tensor | None = None) -> list[torch.Tensor]:
        h, w = image.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"input size {h}x{w} must be a multiple of 32")
        if self.cfg.use_tracer and trace is None:
            raise ValueError("trace map required when the trace branch is enabled")
        feats = []
        x, t = image, trace
        for i in range(4):
            x = self.rgb_mwam[i](self.rgb_stage[i](self.rgb_fsb[i](self.rgb_embed[i](x))))
            if self.cfg.use_tracer:
                t = self.tr_mwam[i](self.tr_stage[i](self.tr_embed[i](t)))
                x, t = self.rectify[i](x, t)
                feats.append(self.fuse[i](x, t))
            else:
                feats.append(x)
        return feats
