"""Frequency-Spatial Block and Multi-Window Anomalous Modeling."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

DEFAULT_WINDOWS = ((3, 7, 9), (7, 11, 15), (9, 17, 25), (11, 21, 31))
SIGMA_FLOOR = 1e-5


class SpectralFilter(nn.Module):
    """Per-channel complex weights on the rfft2 grid of an h x w map, identity initialised."""

    def __init__(self, channels: int, height: int, width: int):
        super().__init__()
        self.grid = (height, width // 2 + 1)
        weight = torch.zeros(channels, *self.grid, 2)
        weight[..., 0] = 1.0
        self.weight = nn.Parameter(weight)

    def complex_weight(self, grid: tuple[int, int] | None = None) -> torch.Tensor:
        w = torch.view_as_complex(self.weight)
        if grid is None or tuple(grid) == self.grid:
            return w
        # other input resolutions: resample the filter, GFNet style
        re = F.interpolate(w.real[None], size=grid, mode="bilinear", align_corners=True)[0]
        im = F.interpolate(w.imag[None], size=grid, mode="bilinear", align_corners=True)[0]
        return torch.complex(re, im)

    def forward(self, x: torch.Tensor, strict: bool = False) -> torch.Tensor:
        h, w = x.shape[-2:]
        grid = (h, w // 2 + 1)
        if strict and grid != self.grid:
            raise ValueError(f"filter grid {self.grid} does not match FFT grid {grid}")
        spec = torch.fft.rfft2(x, dim=(-2, -1), norm="ortho")
        spec = spec * self.complex_weight(grid)
        return torch.fft.irfft2(spec, s=(h, w), dim=(-2, -1), norm="ortho")


def conv3x3(cin, cout, bias=True):
    return nn.Conv2d(cin, cout, 3, padding=1, padding_mode="replicate", bias=bias)


class FrequencySpatialBlock(nn.Module):
    """out = ConvL([X_f, X_s]) + X with X_f the spectrally filtered input, X_s = ConvL(Conv(X))."""

    def __init__(self, channels: int, height: int, width: int, slope: float = 0.1):
        super().__init__()
        self.filter = SpectralFilter(channels, height, width)
        self.spatial_in = conv3x3(channels, channels)
        self.spatial_out = conv3x3(channels, channels)
        self.fuse = nn.Conv2d(2 * channels, channels, 1)
        self.slope = slope

    def frequency(self, x):
        return self.filter(x)

    def spatial(self, x):
        return F.leaky_relu(self.spatial_out(self.spatial_in(x)), self.slope)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mixed = torch.cat([self.frequency(x), self.spatial(x)], dim=1)
        return F.leaky_relu(self.fuse(mixed), self.slope) + x

    def zero_fusion_(self):
        nn.init.zeros_(self.fuse.weight)
        nn.init.zeros_(self.fuse.bias)
        return self


def window_stats(x: torch.Tensor, k: int) -> tuple[torch.Tensor, torch.Tensor]:
    """k x k windowed mean and max of a (B, C, H, W) map, replicate padded, same size out."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"window size must be odd, got {k}")
    h, w = x.shape[-2:]
    if k > 2 * min(h, w) - 1:
        raise ValueError(f"window {k} too large for a {h}x{w} map")
    if k == 1:
        return x, x
    r = k // 2
    padded = F.pad(x, (r, r, r, r), mode="replicate")
    return F.avg_pool2d(padded, k, stride=1), F.max_pool2d(padded, k, stride=1)


def effective_windows(windows, h: int, w: int) -> list[int]:
    """Clamp window sizes to what a small h x w map can hold."""
    cap = 2 * min(h, w) - 1
    return [min(k, cap) for k in windows]


class MultiWindowAnomaly(nn.Module):
    """Normalised pixel-vs-window differences at several scales, turned into gated anomaly maps."""

    def __init__(self, channels: int, windows=(3, 7, 9)):
        super().__init__()
        self.windows = tuple(int(k) for k in windows)
        n = len(self.windows)
        # w_sigma = softplus(raw) >= 0; raw=-10 starts it at ~4.5e-5
        self.sigma_raw = nn.Parameter(torch.full((channels,), -10.0))
        self.map_avg = nn.Conv2d(n * channels, channels, 1)
        self.map_max = nn.Conv2d(n * channels, channels, 1)
        self.score_avg = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="replicate", groups=channels),
            nn.Conv2d(channels, 1, 1),
        )
        self.score_max = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="replicate", groups=channels),
            nn.Conv2d(channels, 1, 1),
        )

    @property
    def w_sigma(self) -> torch.Tensor:
        return F.softplus(self.sigma_raw)

    def sigma_star(self, x: torch.Tensor) -> torch.Tensor:
        std = x.flatten(2).std(dim=2, unbiased=False)  # (B, C)
        s = torch.maximum(std, SIGMA_FLOOR + self.w_sigma)
        assert bool((s > 0).all()), "sigma* must be positive"
        return s[:, :, None, None]

    def differences(self, x: torch.Tensor):
        """Lists (D_a^k, D_m^k) over the configured windows."""
        s = self.sigma_star(x)
        ks = effective_windows(self.windows, *x.shape[-2:])
        d_avg, d_max = [], []
        for k in ks:
            avg, mx = window_stats(x, k)
            d_avg.append((x - avg) / s)
            d_max.append((x - mx) / s)
        return d_avg, d_max

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        d_avg, d_max = self.differences(x)
        m_avg = self.map_avg(torch.cat(d_avg, dim=1))
        m_max = self.map_max(torch.cat(d_max, dim=1))
        s_avg = torch.sigmoid(self.score_avg(x))
        s_max = torch.sigmoid(self.score_max(x))
        return x + s_avg * m_avg + s_max * m_max

    def zero_maps_(self):
        for conv in (self.map_avg, self.map_max):
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)
        return self
