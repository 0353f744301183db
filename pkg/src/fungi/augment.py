"""Seeded, deterministic view generation for every objective and modality.

All functions are pure in (input, seed): the same call always produces the
same views. Images are channel-first float arrays with values in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class ViewSet:
    views: list
    kind: str

    def __len__(self):
        return len(self.views)

    def __iter__(self):
        return iter(self.views)

    def __getitem__(self, i):
        return self.views[i]


def resize_bilinear(image, out_h, out_w):
    """Resize (C, H, W) with bilinear interpolation, half-pixel centers."""
    image = np.asarray(image)
    c, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()

    def axis_coords(n_in, n_out):
        coords = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        coords = np.clip(coords, 0.0, n_in - 1.0)
        lo = np.floor(coords).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = coords - lo
        return lo, hi, frac

    y0, y1, fy = axis_coords(h, out_h)
    x0, x1, fx = axis_coords(w, out_w)
    top = image[:, y0][:, :, x0] * (1 - fx) + image[:, y0][:, :, x1] * fx
    bot = image[:, y1][:, :, x0] * (1 - fx) + image[:, y1][:, :, x1] * fx
    out = top * (1 - fy[None, :, None]) + bot * fy[None, :, None]
    return out.astype(image.dtype)


def resize_nearest(grid, out_h, out_w):
    """Nearest-neighbor resize for a 2-D label grid."""
    grid = np.asarray(grid)
    h, w = grid.shape
    ys = np.minimum(((np.arange(out_h) + 0.5) * (h / out_h)).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * (w / out_w)).astype(np.int64), w - 1)
    return grid[ys][:, xs]


def patchify_overlap(image, patch=112, grid=7):
    """Overlapping square patches on a regular grid with rounded offsets."""
    image = np.asarray(image)
    _, h, w = image.shape
    if patch > h or patch > w:
        raise ValueError(f"patch {patch} larger than image {h}x{w}")
    if grid == 1:
        offsets = [0]
    else:
        span = h - patch
        offsets = [round(i * span / (grid - 1)) for i in range(grid)]
    views = [
        image[:, oy : oy + patch, ox : ox + patch].copy()
        for oy in offsets
        for ox in offsets
    ]
    return ViewSet(views=views, kind="overlap_patches")


def _random_square_crop(image, rng, scale_range, out_size):
    _, h, w = image.shape
    s = min(h, w)
    lo, hi = scale_range
    area = rng.uniform(lo, hi)
    side_min = max(1, math.ceil(s * math.sqrt(lo)))
    side_max = min(s, math.floor(s * math.sqrt(hi)))
    side = int(np.clip(round(s * math.sqrt(area)), side_min, max(side_min, side_max)))
    y0 = int(rng.integers(0, h - side + 1))
    x0 = int(rng.integers(0, w - side + 1))
    crop = image[:, y0 : y0 + side, x0 : x0 + side]
    return resize_bilinear(crop, out_size, out_size)


def dino_crops(
    image,
    seed,
    n_global=2,
    n_local=10,
    global_scale=(0.25, 1.0),
    local_scale=(0.05, 0.25),
    out_size=224,
):
    """Global and local random square crops, all resized to out_size.

    Crops only; no color augmentation. The area fraction of each crop is
    kept inside its declared range by construction (offsets and side are
    integer-rounded within the admissible band).
    """
    rng = np.random.default_rng(seed)
    glob = [_random_square_crop(image, rng, global_scale, out_size) for _ in range(n_global)]
    local = [_random_square_crop(image, rng, local_scale, out_size) for _ in range(n_local)]
    return ViewSet(views=glob, kind="global_crop"), ViewSet(views=local, kind="local_crop")


def _rgb_to_hsv(img):
    r, g, b = img[0], img[1], img[2]
    maxc = np.max(img, axis=0)
    minc = np.min(img, axis=0)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.maximum(maxc, 1e-12), 0.0)
    dz = np.maximum(delta, 1e-12)
    h = np.zeros_like(maxc)
    h = np.where(maxc == r, ((g - b) / dz) % 6.0, h)
    h = np.where(maxc == g, (b - r) / dz + 2.0, h)
    h = np.where(maxc == b, (r - g) / dz + 4.0, h)
    h = np.where(delta == 0, 0.0, h) / 6.0
    return np.stack([h, s, v])


def _hsv_to_rgb(img):
    h, s, v = img[0] * 6.0, img[1], img[2]
    i = np.floor(h).astype(np.int64) % 6
    f = h - np.floor(h)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def color_jitter(image, max_delta=0.1, p=0.5, seed=0):
    """Brightness / contrast / saturation / hue, each applied with prob p.

    Factors are bounded by max_delta; output is clamped to [0, 1]. With
    max_delta == 0 or p == 0 the input is returned unchanged.
    """
    image = np.asarray(image, dtype=np.float64)
    rng = np.random.default_rng(seed)
    out = image

    apply = rng.random(4) < p
    factors = 1.0 + rng.uniform(-max_delta, max_delta, size=3)
    hue_shift = rng.uniform(-max_delta, max_delta)

    if apply[0] and factors[0] != 1.0:  # brightness
        out = out * factors[0]
    if apply[1] and factors[1] != 1.0:  # contrast
        mean = out.mean()
        out = mean + factors[1] * (out - mean)
    if apply[2] and factors[2] != 1.0:  # saturation
        gray = out.mean(axis=0, keepdims=True)
        out = gray + factors[2] * (out - gray)
    if apply[3] and hue_shift != 0.0:  # hue
        hsv = _rgb_to_hsv(np.clip(out, 0.0, 1.0))
        hsv[0] = (hsv[0] + hue_shift) % 1.0
        out = _hsv_to_rgb(hsv)
    if out is image:
        return image.copy()
    return np.clip(out, 0.0, 1.0)


def word_delete(tokens, p=0.1, seed=0):
    """Drop each token independently with prob p; never return empty."""
    tokens = list(tokens)
    if not tokens:
        raise ValueError("word_delete requires a non-empty token list")
    rng = np.random.default_rng(seed)
    keep = rng.random(len(tokens)) >= p
    if not keep.any():
        return [tokens[int(rng.integers(len(tokens)))]]
    return [t for t, k in zip(tokens, keep) if k]


def audio_noise(clip, seed, noise_scale=10.0, max_shift=10):
    """Additive uniform noise plus a random time shift with zero padding.

    noisy = clip + u1 * u2 / noise_scale with u1 ~ U(0,1)^shape elementwise
    and u2 ~ U(0,1) a single draw; the result is shifted along the last
    axis by an integer from {-max_shift, ..., max_shift}.
    """
    clip = np.asarray(clip, dtype=np.float64)
    rng = np.random.default_rng(seed)
    u1 = rng.random(clip.shape)
    u2 = rng.random()
    noisy = clip + u1 * u2 / noise_scale
    shift = int(rng.integers(-max_shift, max_shift + 1))
    out = np.zeros_like(noisy)
    if shift == 0:
        out = noisy
    elif shift > 0:
        out[..., shift:] = noisy[..., :-shift]
    else:
        out[..., :shift] = noisy[..., -shift:]
    return out
