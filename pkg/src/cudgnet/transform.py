"""Input-space transformation component: fractal and affine image mixing.

Images are float arrays in ``[0, 1]`` laid out channels-first ``(C, H, W)``.
Three branches are drawn with equal probability:

    1.  x (+) f1
    2. (x (+) f1) * (x (+) x_aff)
    3. (x (+) f1) * (x (+) x_aff) * (x (+) f2)

where ``(+)`` is the average blend ``clip((a + b) / 2)`` and ``*`` is the
elementwise product. The drawn branch is applied ``k`` times in sequence with
fresh fractals and affine parameters each time.
"""
from __future__ import annotations

import colorsys
import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

logger = logging.getLogger(__name__)

N_BRANCHES = 3
MAX_K = 10


@dataclass
class TCConfig:
    k_max: int = 2
    rotation_deg: float = 20.0
    translate_frac: float = 0.125
    contrast_jitter: float = 0.4
    branch_probs: tuple = (1 / 3, 1 / 3, 1 / 3)
    n_fractals: int = 64
    fractal_seed: int = 0
    fractal_dir: str | None = None

    def __post_init__(self):
        if not 0 <= self.k_max <= MAX_K:
            raise ValueError(f"k_max must be in [0, {MAX_K}], got {self.k_max}")
        if len(self.branch_probs) != N_BRANCHES or abs(sum(self.branch_probs) - 1.0) > 1e-9:
            raise ValueError("branch_probs must hold three probabilities summing to 1")
        if min(self.rotation_deg, self.translate_frac, self.contrast_jitter) < 0:
            raise ValueError("affine ranges must be non-negative")
        self.branch_probs = tuple(float(p) for p in self.branch_probs)


# ---------------------------------------------------------------------------
# fractals


def _sample_ifs(rng: np.random.Generator, max_retries: int = 100):
    n_maps = int(rng.integers(2, 9))
    linear = np.empty((n_maps, 2, 2))
    for m in range(n_maps):
        for _ in range(max_retries):
            cand = rng.uniform(-1.0, 1.0, size=(2, 2))
            sv = np.linalg.svd(cand, compute_uv=False)
            # contractive, but not so thin that the attractor collapses to a line
            if sv[0] < 0.95 and sv[1] > 0.05:
                linear[m] = cand
                break
        else:
            raise RuntimeError(f"could not sample a contractive affine map in {max_retries} attempts")
    offset = rng.uniform(-1.0, 1.0, size=(n_maps, 2))
    weights = np.abs(np.linalg.det(linear)) + 1e-3
    return linear, offset, weights / weights.sum()


def _chaos_game(linear, offset, probs, rng, n_chains=512, n_steps=120, burn_in=20):
    pts = rng.uniform(-1.0, 1.0, size=(n_chains, 2))
    out = []
    for step in range(n_steps):
        idx = rng.choice(len(probs), size=n_chains, p=probs)
        pts = np.einsum("nij,nj->ni", linear[idx], pts) + offset[idx]
        if step >= burn_in:
            out.append(pts)
    return np.concatenate(out)


def generate_fractal(seed: int, size=(32, 32)) -> np.ndarray:
    """Render a coloured IFS attractor of shape ``(3, H, W)`` in ``[0, 1]``.

    Deterministic for a given ``seed`` and ``size``.
    """
    h, w = (int(s) for s in size)
    if h <= 0 or w <= 0:
        raise ValueError(f"fractal size must be positive, got {size}")
    rng = np.random.default_rng(seed)
    linear, offset, probs = _sample_ifs(rng)
    pts = _chaos_game(linear, offset, probs, rng)

    lo = pts.min(axis=0)
    span = np.maximum(pts.max(axis=0) - lo, 1e-8)
    ij = (pts - lo) / span
    rows = np.clip((ij[:, 1] * (h - 1)).round().astype(int), 0, h - 1)
    cols = np.clip((ij[:, 0] * (w - 1)).round().astype(int), 0, w - 1)
    mask = np.zeros((h, w), dtype=np.float64)
    mask[rows, cols] = 1.0
    mask = ndimage.uniform_filter(mask, size=3, mode="constant")
    mask /= max(mask.max(), 1e-8)

    hue = rng.uniform()
    sat = rng.uniform(0.5, 1.0)
    color = np.array(colorsys.hsv_to_rgb(hue, sat, 1.0))
    img = mask[None] * color[:, None, None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


class FractalBank:
    """A fixed, ordered collection of fractal images of one size."""

    def __init__(self, images):
        images = [np.asarray(im, dtype=np.float32) for im in images]
        if not images:
            raise ValueError("fractal bank is empty")
        shape = images[0].shape
        if any(im.shape != shape for im in images):
            raise ValueError("fractal bank images must share one shape")
        self.images = np.stack(images)

    @classmethod
    def render(cls, size=(32, 32), n: int = 64, seed: int = 0) -> "FractalBank":
        return cls(generate_fractal(seed * 100_003 + i, size) for i in range(n))

    @classmethod
    def from_directory(cls, path) -> "FractalBank":
        """Load ``.npy`` (C, H, W) or image files, in lexicographic file order."""
        path = Path(path)
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in {".npy", ".png", ".jpg", ".jpeg"})
        if not files:
            raise FileNotFoundError(f"no fractal images (.npy/.png/.jpg) in {path}")
        images = []
        for f in files:
            if f.suffix.lower() == ".npy":
                images.append(np.load(f))
            else:
                arr = np.asarray(Image.open(f).convert("RGB"), dtype=np.float32) / 255.0
                images.append(arr.transpose(2, 0, 1))
        return cls(images)

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        for i, im in enumerate(self.images):
            np.save(path / f"fractal_{i:05d}.npy", im)

    @property
    def shape(self):
        return self.images.shape[1:]

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        return self.images[i]

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.images[int(rng.integers(len(self.images)))]


@lru_cache(maxsize=8)
def _cached_bank(shape, n, seed, fractal_dir):
    if fractal_dir is not None:
        return FractalBank.from_directory(fractal_dir)
    return FractalBank.render(shape, n, seed)


def bank_for(cfg: TCConfig, size) -> FractalBank:
    bank = _cached_bank(tuple(size), cfg.n_fractals, cfg.fractal_seed, cfg.fractal_dir)
    if tuple(bank.shape[1:]) != tuple(size):
        raise ValueError(f"fractal bank has spatial size {bank.shape[1:]}, images have {tuple(size)}")
    return bank


# ---------------------------------------------------------------------------
# affine


def affine(x: np.ndarray, angle: float = 0.0, translate=(0.0, 0.0), contrast: float = 1.0) -> np.ndarray:
    """Rotate (degrees, about the centre), translate (pixels, ``(dy, dx)``) and scale contrast."""
    x = np.asarray(x, dtype=np.float32)
    out = x
    if angle != 0.0 or translate[0] != 0.0 or translate[1] != 0.0:
        h, w = x.shape[-2:]
        centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        theta = np.deg2rad(angle)
        # snap float noise so quarter turns land exactly on the pixel grid
        rot = np.round(np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]), 12)
        inv = rot.T
        # output pixel o samples input at inv @ (o - centre - t) + centre
        shift = centre - inv @ (centre + np.asarray(translate, dtype=float))
        out = np.stack([
            ndimage.affine_transform(ch, inv, offset=shift, order=1, mode="constant", cval=0.0)
            for ch in x
        ])
    if contrast != 1.0:
        grey = out.mean()
        out = (out - grey) * contrast + grey
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def random_affine(x: np.ndarray, rng: np.random.Generator, cfg: TCConfig | None = None) -> np.ndarray:
    cfg = cfg or TCConfig()
    h, w = x.shape[-2:]
    angle = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg) if cfg.rotation_deg else 0.0
    if cfg.translate_frac:
        t = rng.uniform(-cfg.translate_frac, cfg.translate_frac, size=2) * np.array([h, w])
    else:
        t = (0.0, 0.0)
    c = rng.uniform(1 - cfg.contrast_jitter, 1 + cfg.contrast_jitter) if cfg.contrast_jitter else 1.0
    return affine(x, angle, tuple(t), max(c, 0.0))


# ---------------------------------------------------------------------------
# the transformation component


def blend(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.clip((a + b) * 0.5, 0.0, 1.0)


def draw_branch(rng: np.random.Generator, probs=(1 / 3, 1 / 3, 1 / 3)) -> int:
    return int(rng.choice(N_BRANCHES, p=probs))


def tc_branch(x, branch: int, rng, cfg: TCConfig, bank: FractalBank, f1=None, f2=None) -> np.ndarray:
    """One application of a single branch. Fractals are drawn from ``bank`` unless given."""
    f1 = bank.sample(rng) if f1 is None else f1
    out = blend(x, f1)
    if branch >= 1:
        out = out * blend(x, random_affine(x, rng, cfg))
    if branch >= 2:
        f2 = bank.sample(rng) if f2 is None else f2
        out = out * blend(x, f2)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def apply_tc(x, cfg: TCConfig, rng: np.random.Generator, bank: FractalBank | None = None, k: int | None = None):
    """Apply the transformation component to one ``(C, H, W)`` image."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {x.shape}")
    if k is None:
        k = int(rng.integers(0, cfg.k_max + 1))
    if not 0 <= k <= MAX_K:
        raise ValueError(f"k must be in [0, {MAX_K}]")
    if k == 0:
        return x.copy()
    bank = bank if bank is not None else bank_for(cfg, x.shape[-2:])
    if tuple(bank.shape) != x.shape:
        raise ValueError(f"fractals have shape {tuple(bank.shape)}, image has {x.shape}")
    branch = draw_branch(rng, cfg.branch_probs)
    for _ in range(k):
        x = tc_branch(x, branch, rng, cfg, bank)
    return x


def apply_tc_batch(images, cfg: TCConfig, rng: np.random.Generator, bank: FractalBank | None = None):
    """Apply the transformation component independently to each image of ``(N, C, H, W)``."""
    images = np.asarray(images, dtype=np.float32)
    bank = bank if bank is not None else bank_for(cfg, images.shape[-2:])
    return np.stack([apply_tc(im, cfg, rng, bank) for im in images])
