"""Procedural manipulated-image generation.

Stands in for a segmentation + inpainting pipeline: smooth blob masks, three
generator families with distinct residual signatures, mix-up blending, and a
dataset writer that pairs every manipulated image with its authentic source.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from PIL import Image
from scipy.ndimage import gaussian_filter, label as cc_label
from scipy.sparse.linalg import spsolve

from gimlab import degrade as dg

log = logging.getLogger(__name__)

FAMILIES = ("repaint-noise", "smooth-removal", "texture-resynth")
FAMILY_SUBSET = {
    "repaint-noise": "SD-like",
    "texture-resynth": "GLIDE-like",
    "smooth-removal": "DDNM-like",
}
SUBSETS = ("SD-like", "GLIDE-like", "DDNM-like", "cross-dist")
CROSS_FAMILY = "repaint-noise"

MAIN_POOL = ("fractal", "shapes", "stripes")
HELDOUT_POOL = ("cells", "rings")

# blobs never exceed this fraction of the image; above it masks stop looking like objects
MAX_BLOB_COVERAGE = 0.75
MIN_SIZE = 64


class SynthError(ValueError):
    pass


@dataclass
class SourceImage:
    pixels: np.ndarray  # H x W x 3 in [0, 1]
    id: str

    def __post_init__(self):
        h, w = self.pixels.shape[:2]
        if h < MIN_SIZE or w < MIN_SIZE:
            raise SynthError(f"source image must be at least {MIN_SIZE}x{MIN_SIZE}, got {h}x{w}")
        if self.pixels.min() < 0 or self.pixels.max() > 1:
            raise SynthError("source pixels must lie in [0, 1]")


@dataclass
class BinaryMask:
    pixels: np.ndarray  # H x W uint8 in {0, 1}

    @property
    def coverage(self) -> float:
        return float(self.pixels.mean())

    @property
    def n_components(self) -> int:
        return int(cc_label(self.pixels)[1])

    @classmethod
    def empty(cls, height: int, width: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=np.uint8))


@dataclass
class GeneratorSpec:
    family: str
    params: dict = field(default_factory=dict)
    seed: int = 0


@dataclass
class ImageSample:
    original: SourceImage
    manipulated: np.ndarray
    mask: BinaryMask
    label: int
    trace: np.ndarray  # H x W x 3 signed; manipulated - original
    alpha: float = 1.0
    generator: GeneratorSpec | None = None
    degradation: dg.DegradationRecord | None = None


def derive_seed(seed: int, key: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(key.encode("utf-8"))])


def quantize(image: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so in-memory pixels equal what PNG stores."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


# --------------------------------------------------------------------------- sources


def _lowpass_noise(rng, h, w, sigma, channels=1):
    n = rng.standard_normal((h, w, channels))
    n = gaussian_filter(n, sigma=(sigma, sigma, 0), mode="wrap")
    n -= n.mean()
    return n / (n.std() + 1e-12)


def _fractal(rng, h, w):
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    radius = np.sqrt(fx**2 + fy**2)
    radius[0, 0] = 1.0
    beta = rng.uniform(2.2, 2.8)
    out = np.empty((h, w, 3))
    base = rng.standard_normal((h, w))
    for c in range(3):
        noise = 0.7 * base + 0.3 * rng.standard_normal((h, w))
        spec = np.fft.rfft2(noise) / radius ** (beta / 2)
        spec[0, 0] = 0
        ch = np.fft.irfft2(spec, s=(h, w))
        out[..., c] = ch / (ch.std() + 1e-12)
    tint = rng.uniform(0.25, 0.75, size=3)
    return tint + rng.uniform(0.08, 0.16) * out


def _shapes(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    c0, c1 = rng.uniform(0.1, 0.9, size=(2, 3))
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(angle) * xx + np.sin(angle) * yy)[..., None]
    out = c0 + (c1 - c0) * (ramp - ramp.min()) / (np.ptp(ramp) + 1e-12)
    for _ in range(int(rng.integers(3, 8))):
        cy, cx = rng.uniform(0, 1, size=2)
        ry, rx = rng.uniform(0.05, 0.3, size=2)
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
        out[inside] = rng.uniform(0.05, 0.95, size=3)
    return gaussian_filter(out, sigma=(0.7, 0.7, 0))


def _stripes(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    out = np.full((h, w, 3), rng.uniform(0.3, 0.7, size=3))
    for _ in range(2):
        freq = rng.uniform(0.04, 0.2)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        out += rng.uniform(0.05, 0.2) * wave[..., None] * rng.uniform(0.5, 1.0, size=3)
    return out


def _cells(rng, h, w):
    n = int(rng.integers(6, 16))
    pts = rng.uniform(0, 1, size=(n, 2)) * (h, w)
    colors = rng.uniform(0.1, 0.9, size=(n, 3))
    yy, xx = np.mgrid[0:h, 0:w]
    d = (yy[..., None] - pts[:, 0]) ** 2 + (xx[..., None] - pts[:, 1]) ** 2
    return colors[np.argmin(d, axis=-1)]


def _rings(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    r = np.hypot(yy - cy, xx - cx)
    freq = rng.uniform(0.05, 0.15)
    base = rng.uniform(0.3, 0.7, size=3)
    return base + 0.2 * np.sign(np.sin(2 * np.pi * freq * r))[..., None] * rng.uniform(0.3, 1, size=3)


_TEXTURES = {"fractal": _fractal, "shapes": _shapes, "stripes": _stripes, "cells": _cells, "rings": _rings}


def make_source(height: int, width: int, seed: np.random.SeedSequence | int, image_id: str,
                pool: tuple[str, ...] = MAIN_POOL) -> SourceImage:
    """Procedural 'photograph': a texture from ``pool`` plus mild sensor noise, 8-bit quantized."""
    rng = np.random.default_rng(seed)
    kind = pool[int(rng.integers(len(pool)))]
    img = _TEXTURES[kind](rng, height, width)
    # sensor noise: the fingerprint that generators destroy or replace
    img = img + rng.uniform(0.005, 0.015) * rng.standard_normal(img.shape)
    return SourceImage(quantize(img), image_id)


# --------------------------------------------------------------------------- masks


def generate_mask(height: int, width: int, rng_seed, coverage_bounds=(0.05, 0.5)) -> BinaryMask:
    """Smooth blob mask: the top-k pixels of a low-pass random field."""
    if height < MIN_SIZE or width < MIN_SIZE:
        raise SynthError(f"mask size must be at least {MIN_SIZE}x{MIN_SIZE}")
    lo, hi = map(float, coverage_bounds)
    n = height * width
    lo_px, hi_px = int(np.ceil(lo * n)), int(np.floor(min(hi, MAX_BLOB_COVERAGE) * n))
    if not 0 < lo <= hi <= 1 or lo_px < 1 or lo_px > hi_px:
        raise SynthError(
            f"coverage bounds {coverage_bounds} infeasible for {height}x{width} "
            f"(blobs are capped at {MAX_BLOB_COVERAGE:.0%} coverage)"
        )
    rng = np.random.default_rng(rng_seed)
    k = int(rng.integers(lo_px, hi_px + 1))
    sigma = min(height, width) * rng.uniform(0.08, 0.16)
    field_ = gaussian_filter(rng.standard_normal((height, width)), sigma=sigma, mode="reflect")
    # a single broad bump keeps most masks to one or two object-like components
    cy, cx = rng.uniform(0.25, 0.75, size=2) * (height, width)
    yy, xx = np.mgrid[0:height, 0:width]
    bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (0.3 * min(height, width)) ** 2))
    field_ = field_ / (field_.std() + 1e-12) + 1.5 * bump
    order = np.argsort(-field_.ravel(), kind="stable")
    mask = np.zeros(n, dtype=np.uint8)
    mask[order[:k]] = 1
    return BinaryMask(mask.reshape(height, width))


# --------------------------------------------------------------------------- generators


# Upsampling-decoder residue per family: a zero-mean tile repeated over the
# generated region (the checkerboard pattern of strided transposed convs).
DECODER_TILES = {
    "repaint-noise": np.array([[1, -1], [-1, 1]], dtype=np.float64),
    "texture-resynth": np.array([[1, -1], [1, -1]], dtype=np.float64),
    "smooth-removal": np.kron(np.array([[1, -1], [-1, 1]], dtype=np.float64), np.ones((2, 2))),
}


def decoder_artifact(h: int, w: int, tile: np.ndarray, amplitude: float, offset=(0, 0)) -> np.ndarray:
    """``tile`` repeated over an h x w grid starting at ``offset``; shape (h, w, 1)."""
    th, tw = tile.shape
    yy = (np.arange(h)[:, None] + offset[0]) % th
    xx = (np.arange(w)[None, :] + offset[1]) % tw
    return amplitude * tile[yy, xx][..., None]


def default_params(family: str, rng: np.random.Generator) -> dict:
    if family == "repaint-noise":
        return {"noise_sigma": float(rng.uniform(0.5, 0.8)), "amplitude": float(rng.uniform(0.08, 0.16)),
                "mean_sigma": float(rng.uniform(1.0, 2.0)), "blend": float(rng.uniform(0.0, 0.3))}
    if family == "smooth-removal":
        return {"smooth_iters": 10, "kappa": 0.08, "shade": float(rng.uniform(0.0, 0.04))}
    if family == "texture-resynth":
        return {"patch": int(rng.choice([4, 6, 8])), "jitter": float(rng.uniform(0.02, 0.06)),
                "coarse_sigma": 2.0, "detail_gain": float(rng.uniform(1.5, 2.5))}
    raise SynthError(f"unknown generator family {family!r}")


def _repaint_noise(img, mask, rng, p):
    mean = gaussian_filter(img, sigma=(p["mean_sigma"], p["mean_sigma"], 0), mode="nearest")
    h, w = mask.shape
    luma = _lowpass_noise(rng, h, w, p["noise_sigma"])
    chroma = _lowpass_noise(rng, h, w, p["noise_sigma"], channels=3)
    noise = p["amplitude"] * (0.8 * luma + 0.35 * chroma)
    # regeneration keeps most of the content and partially smooths it
    return img + p["blend"] * (mean - img) + noise


def perona_malik(img, iters, kappa):
    out = img.copy()
    for _ in range(iters):
        pad = np.pad(out, ((1, 1), (1, 1), (0, 0)), mode="edge")
        grads = [pad[:-2, 1:-1] - out, pad[2:, 1:-1] - out, pad[1:-1, :-2] - out, pad[1:-1, 2:] - out]
        out = out + 0.2 * sum(g * np.exp(-((g / kappa) ** 2)) for g in grads)
    return out


def harmonic_fill(img, mask):
    """Solve Laplace's equation inside ``mask`` with the image as Dirichlet boundary."""
    h, w = mask.shape
    idx = -np.ones((h, w), dtype=np.int64)
    ys, xs = np.nonzero(mask)
    idx[ys, xs] = np.arange(len(ys))
    n = len(ys)
    rows, cols, vals = [], [], []
    rhs = np.zeros((n, img.shape[2]))
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        ny = np.clip(ys + dy, 0, h - 1)
        nx = np.clip(xs + dx, 0, w - 1)
        inside = idx[ny, nx] >= 0
        rows.append(np.arange(n)[inside])
        cols.append(idx[ny, nx][inside])
        vals.append(-np.ones(inside.sum()))
        rhs[~inside] += img[ny[~inside], nx[~inside]]
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(np.full(n, 4.0))
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    sol = spsolve(A.tocsc(), rhs)
    out = img.copy()
    out[ys, xs] = sol.reshape(n, -1)
    return out


def _smooth_removal(img, mask, rng, p):
    smoothed = perona_malik(img, p["smooth_iters"], p["kappa"])
    filled = harmonic_fill(smoothed, mask.astype(bool))
    h, w = mask.shape
    shade = p["shade"] * _lowpass_noise(rng, h, w, sigma=max(h, w) / 6)
    return filled + shade


def _texture_resynth(img, mask, rng, p):
    """Coarse layer kept; fine detail resynthesised from shuffled patches of the image itself."""
    ps = p["patch"]
    h, w = mask.shape
    sig = (p["coarse_sigma"], p["coarse_sigma"], 0)
    coarse = gaussian_filter(img, sigma=sig, mode="nearest")
    detail = img - coarse
    out = np.zeros_like(img)
    for y in range(0, h, ps):
        for x in range(0, w, ps):
            if not mask[y:y + ps, x:x + ps].any():
                continue
            sy = int(rng.integers(0, h - ps + 1))
            sx = int(rng.integers(0, w - ps + 1))
            patch = detail[sy:sy + ps, sx:sx + ps]
            ty, tx = min(ps, h - y), min(ps, w - x)
            gain = p["detail_gain"] * (1.0 + p["jitter"] * rng.standard_normal())
            out[y:y + ty, x:x + tx] = patch[:ty, :tx] * gain + p["jitter"] * rng.standard_normal(3)
    return coarse + out


_GENERATORS = {
    "repaint-noise": _repaint_noise,
    "smooth-removal": _smooth_removal,
    "texture-resynth": _texture_resynth,
}


def apply_generator(image: SourceImage, mask: BinaryMask, spec: GeneratorSpec) -> tuple[np.ndarray, np.ndarray]:
    """Manipulate ``image`` inside ``mask``; returns (manipulated, trace) with trace = manipulated - original."""
    if spec.family not in _GENERATORS:
        raise SynthError(f"unknown generator family {spec.family!r}")
    x = image.pixels
    m = mask.pixels.astype(bool)
    if m.shape != x.shape[:2]:
        raise SynthError(f"mask shape {m.shape} does not match image {x.shape[:2]}")
    if not m.any():
        return x.copy(), np.zeros_like(x)
    rng = np.random.default_rng(spec.seed)
    params = {**default_params(spec.family, np.random.default_rng(spec.seed)), **spec.params}
    raw = _GENERATORS[spec.family](x, m, rng, params)
    tile = DECODER_TILES[spec.family]
    amp = params.get("artifact_amplitude", float(rng.uniform(0.03, 0.06)))
    offset = (int(rng.integers(tile.shape[0])), int(rng.integers(tile.shape[1])))
    raw = raw + decoder_artifact(*m.shape, tile, amp, offset)
    manipulated = x.copy()
    manipulated[m] = quantize(raw)[m]
    return manipulated, manipulated - x


def mixup_blend(original: SourceImage | np.ndarray, manipulated: np.ndarray, alpha: float) -> np.ndarray:
    if not 0.5 <= alpha <= 1.0:
        raise SynthError(f"alpha must be in [0.5, 1.0], got {alpha}")
    x = original.pixels if isinstance(original, SourceImage) else original
    if alpha == 1.0:
        return np.array(manipulated, dtype=np.float64)
    # same as alpha*m + (1-alpha)*x, but leaves unmanipulated pixels bit-exact
    return x + alpha * (np.asarray(manipulated, dtype=np.float64) - x)


def make_sample(image: SourceImage, seed: np.random.SeedSequence, family: str | None,
                coverage_bounds=(0.05, 0.5), alpha: float = 1.0) -> ImageSample:
    """Manipulated (family given) or authentic (family None) sample, pre-degradation."""
    h, w = image.pixels.shape[:2]
    if family is None:
        return ImageSample(image, image.pixels.copy(), BinaryMask.empty(h, w), 0, np.zeros_like(image.pixels))
    mask_seed, gen_seed = seed.spawn(2)
    mask = generate_mask(h, w, mask_seed, coverage_bounds)
    spec = GeneratorSpec(family, {}, int(gen_seed.generate_state(1)[0]))
    manipulated, _ = apply_generator(image, mask, spec)
    blended = mixup_blend(image, manipulated, alpha)
    return ImageSample(image, blended, mask, 1, blended - image.pixels, alpha, spec)


# --------------------------------------------------------------------------- dataset


@dataclass
class DatagenConfig:
    image_size: int = 64
    train_per_family: int = 300
    test_per_family: int = 100
    cross_dist_test: int = 100
    families: tuple[str, ...] = FAMILIES
    coverage_bounds: tuple[float, float] = (0.05, 0.5)
    degrade_prob: float = 1.0
    alpha: float = 1.0
    seed: int = 0

    def canonical(self) -> dict:
        d = asdict(self)
        d["families"] = list(self.families)
        d["coverage_bounds"] = list(self.coverage_bounds)
        return d

    def fingerprint(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ManifestEntry:
    image: str
    mask: str  # "-" for authentic
    label: int
    subset: str
    split: str
    degradation: str = "none:-:0"
    original: str = "-"
    trace: str = "-"

    FIELDS = ("image", "mask", "label", "subset", "split", "degradation", "original", "trace")

    def to_line(self) -> str:
        return "\t".join(str(getattr(self, f)) for f in self.FIELDS)

    @classmethod
    def from_line(cls, line: str) -> "ManifestEntry":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != len(cls.FIELDS):
            raise SynthError(f"malformed manifest line: {line!r}")
        kw = dict(zip(cls.FIELDS, parts))
        kw["label"] = int(kw["label"])
        return cls(**kw)

    @property
    def sample_id(self) -> str:
        return Path(self.image).stem.removesuffix("_f")


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    seed: int
    fingerprint: str
    root: Path | None = None

    HEADER = "# gimlab-manifest v1"

    def resolve(self, rel: str) -> Path:
        return (self.root or Path(".")) / rel

    def select(self, *, subsets=None, split=None, label=None) -> "DatasetManifest":
        keep = [
            e for e in self.entries
            if (subsets is None or e.subset in subsets)
            and (split is None or e.split == split)
            and (label is None or e.label == label)
        ]
        return DatasetManifest(keep, self.seed, self.fingerprint, self.root)

    def __len__(self):
        return len(self.entries)

    def write(self, path: Path) -> None:
        lines = [f"{self.HEADER} seed={self.seed} fingerprint={self.fingerprint}",
                 "# " + "\t".join(ManifestEntry.FIELDS)]
        lines += [e.to_line() for e in self.entries]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: Path) -> "DatasetManifest":
        path = Path(path)
        text = path.read_text(encoding="utf-8").splitlines()
        if not text or not text[0].startswith(cls.HEADER):
            raise SynthError(f"{path} is not a gimlab manifest")
        meta = dict(tok.split("=", 1) for tok in text[0][len(cls.HEADER):].split())
        entries = [ManifestEntry.from_line(t) for t in text[1:] if t and not t.startswith("#")]
        return cls(entries, int(meta["seed"]), meta["fingerprint"], path.parent)


def save_rgb(path: Path, image: np.ndarray, quality: int | None = None) -> None:
    im = Image.fromarray(dg.to_uint8(image), mode="RGB")
    if quality is None:
        im.save(path, format="PNG")
    else:
        im.save(path, format="JPEG", quality=int(quality))


def save_mask(path: Path, mask: BinaryMask) -> None:
    Image.fromarray((mask.pixels * 255).astype(np.uint8), mode="L").save(path, format="PNG")


def load_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def load_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.uint8)


def _write_final(path_stem: Path, image: np.ndarray, record: dg.DegradationRecord) -> Path:
    # the JPEG cell is stored by encoding once at its quality; other cells stay lossless so
    # no second degradation is chained on top
    if record.op == "jpeg":
        path = path_stem.with_suffix(".jpg")
        save_rgb(path, image, quality=int(record.param))
    else:
        path = path_stem.with_suffix(".png")
        save_rgb(path, dg.apply_degradation(image, record.op, record.param))
    return path


def _degradation_for(cfg: DatagenConfig, seed: np.random.SeedSequence) -> dg.DegradationRecord:
    rng = np.random.default_rng(seed)
    deg_seed = int(rng.integers(2**31))
    if rng.random() >= cfg.degrade_prob:
        return dg.DegradationRecord("none", None, deg_seed)
    return dg.pick_degradation(deg_seed)


def _plan(cfg: DatagenConfig) -> list[tuple[str, str, str, int]]:
    """(family, subset, split, index) for every manipulated/authentic pair."""
    plan = []
    for family in cfg.families:
        subset = FAMILY_SUBSET[family]
        plan += [(family, subset, "train", i) for i in range(cfg.train_per_family)]
        plan += [(family, subset, "test", i) for i in range(cfg.test_per_family)]
    plan += [(CROSS_FAMILY, "cross-dist", "test", i) for i in range(cfg.cross_dist_test)]
    return plan


def generate_pair(cfg: DatagenConfig, family: str, subset: str, split: str, index: int):
    """Deterministic (authentic, manipulated, degradations) for one plan slot."""
    sid = f"{subset}-{split}-{index:05d}"
    src_seed, man_seed, deg_a, deg_m = derive_seed(cfg.seed, sid).spawn(4)
    pool = HELDOUT_POOL if subset == "cross-dist" else MAIN_POOL
    src = make_source(cfg.image_size, cfg.image_size, src_seed, sid, pool)
    authentic = make_sample(src, man_seed, None)
    manipulated = make_sample(src, man_seed, family, cfg.coverage_bounds, cfg.alpha)
    authentic.degradation = _degradation_for(cfg, deg_a)
    manipulated.degradation = _degradation_for(cfg, deg_m)
    return sid, authentic, manipulated


def build_dataset(cfg: DatagenConfig, out_dir: str | os.PathLike) -> DatasetManifest:
    plan = _plan(cfg)
    if not plan:
        raise SynthError("dataset config requests zero images")
    for family in cfg.families:
        if family not in FAMILIES:
            raise SynthError(f"unknown generator family {family!r}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for subset in {p[1] for p in plan}:
            for sub in ("originals", "images", "masks", "traces"):
                (out / subset / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise SynthError(f"cannot create dataset directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise SynthError(f"dataset directory {out} is not writable")

    entries = []
    for n, (family, subset, split, index) in enumerate(plan):
        sid, auth, man = generate_pair(cfg, family, subset, split, index)
        d = out / subset
        orig_path = d / "originals" / f"{sid}.png"
        save_rgb(orig_path, auth.original.pixels)
        mask_path = d / "masks" / f"{sid}_f.png"
        save_mask(mask_path, man.mask)
        trace_path = d / "traces" / f"{sid}_f.npy"
        np.save(trace_path, man.trace)
        a_path = _write_final(d / "images" / sid, auth.manipulated, auth.degradation)
        m_path = _write_final(d / "images" / f"{sid}_f", man.manipulated, man.degradation)
        rel = lambda p: p.relative_to(out).as_posix()  # noqa: E731
        entries.append(ManifestEntry(rel(a_path), "-", 0, subset, split, auth.degradation.serialize(),
                                     rel(orig_path), "-"))
        entries.append(ManifestEntry(rel(m_path), rel(mask_path), 1, subset, split,
                                     man.degradation.serialize(), rel(orig_path), rel(trace_path)))
        if (n + 1) % 500 == 0:
            log.info("generated %d/%d pairs", n + 1, len(plan))
    manifest = DatasetManifest(entries, cfg.seed, cfg.fingerprint(), out)
    manifest.write(out / "manifest.tsv")
    return manifest
