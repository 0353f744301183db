"""Seeded synthetic datasets for desk-scale runs.

Two classification families and one segmentation family, all pure functions
of (parameters, seed):

* blobs — each class owns a fixed set of Gaussian color bumps; samples add
  pixel noise and a small random shift of the bump centers.
* stripes — each class owns a grating frequency and orientation; samples
  randomize the phase and add pixel noise.
* segmentation — a dark textured background with 1..3 axis-aligned class
  rectangles; masks carry the class ids, with a one-pixel ignore ring
  around every rectangle.
"""

from __future__ import annotations

import os

import numpy as np

from . import store
from .features import derive_seed

IGNORE_LABEL = 255


def _class_rng(seed, *key):
    return np.random.default_rng(derive_seed(seed, *key))


def _blob_image(size, centers, colors, widths, rng, noise=0.08):
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.zeros((3, size, size))
    jitter = rng.normal(scale=0.02, size=centers.shape)
    for (cy, cx), (jy, jx), color, width in zip(centers, jitter, colors, widths):
        bump = np.exp(-(((yy - cy - jy) ** 2 + (xx - cx - jx) ** 2) / (2 * width**2)))
        img += color[:, None, None] * bump
    img += rng.normal(scale=noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _stripe_image(size, freq, theta, base_phase, rng, noise=0.08):
    yy, xx = np.mgrid[0:size, 0:size] / size
    phase = base_phase + rng.normal(scale=0.3)
    wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    channel_mix = np.array([0.9, 0.6, 0.3])
    img = 0.5 + 0.4 * channel_mix[:, None, None] * wave
    img += rng.normal(scale=noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def make_classification(kind, n, classes, image_size, seed):
    """Images (n, 3, S, S) float32 in [0, 1] plus integer labels."""
    if n < classes:
        raise ValueError("need at least one sample per class")
    if kind not in ("blobs", "stripes"):
        raise ValueError(f"unknown synthetic kind {kind!r}")
    class_params = []
    for c in range(classes):
        rng_c = _class_rng(seed, "class", c)
        if kind == "blobs":
            class_params.append(
                (
                    rng_c.uniform(0.15, 0.85, size=(3, 2)),  # centers
                    rng_c.uniform(0.2, 1.0, size=(3, 3)),  # colors
                    rng_c.uniform(0.08, 0.2, size=3),  # widths
                )
            )
        else:
            class_params.append((2.0 + 2.0 * c, np.pi * c / classes, rng_c.uniform(0, 2 * np.pi)))

    labels = np.arange(n) % classes
    images = np.empty((n, 3, image_size, image_size), dtype=np.float32)
    for i in range(n):
        rng_i = _class_rng(seed, "sample", i)
        c = int(labels[i])
        if kind == "blobs":
            centers, colors, widths = class_params[c]
            images[i] = _blob_image(image_size, centers, colors, widths, rng_i)
        else:
            freq, theta, base_phase = class_params[c]
            images[i] = _stripe_image(image_size, freq, theta, base_phase, rng_i)
    return images, labels.astype(np.int32)


def make_segmentation(n, classes, image_size, seed, max_shapes=3):
    """Images plus per-pixel masks; class 0 is background.

    Rectangles carry classes 1..classes-1; each rectangle is surrounded by
    a one-pixel ignore ring so the ignore path is always exercised.
    """
    if classes < 2:
        raise ValueError("segmentation needs background + at least one class")
    rng_colors = _class_rng(seed, "seg-colors")
    class_colors = rng_colors.uniform(0.3, 1.0, size=(classes, 3))
    images = np.empty((n, 3, image_size, image_size), dtype=np.float32)
    masks = np.empty((n, image_size, image_size), dtype=np.uint8)
    for i in range(n):
        rng = _class_rng(seed, "seg-sample", i)
        img = rng.random((3, image_size, image_size)) * 0.15
        mask = np.zeros((image_size, image_size), dtype=np.uint8)
        for _ in range(int(rng.integers(1, max_shapes + 1))):
            cls = int(rng.integers(1, classes))
            h = int(rng.integers(image_size // 4, image_size // 2))
            w = int(rng.integers(image_size // 4, image_size // 2))
            y0 = int(rng.integers(0, image_size - h))
            x0 = int(rng.integers(0, image_size - w))
            texture = 0.15 * rng.random((3, h, w))
            img[:, y0 : y0 + h, x0 : x0 + w] = class_colors[cls][:, None, None] * 0.8 + texture
            ring = np.zeros_like(mask, dtype=bool)
            ring[max(0, y0 - 1) : y0 + h + 1, max(0, x0 - 1) : x0 + w + 1] = True
            mask[ring] = IGNORE_LABEL
            mask[y0 : y0 + h, x0 : x0 + w] = cls
        images[i] = np.clip(img, 0.0, 1.0)
        masks[i] = mask
    return images, masks


def save_dataset(path, images, labels=None, masks=None, meta=""):
    sections = {"images": np.asarray(images, dtype=np.float32)}
    if labels is not None:
        sections["labels"] = np.asarray(labels, dtype=np.int32)
    if masks is not None:
        sections["masks"] = np.asarray(masks, dtype=np.uint8)
    sections["meta"] = store.encode_text(meta)
    store.write_sections(path, sections)


def load_dataset(path):
    s = store.read_sections(path)
    return {
        "images": s["images"],
        "labels": s.get("labels"),
        "masks": s.get("masks"),
        "meta": store.decode_text(s["meta"]) if "meta" in s else "",
    }


def write_dataset_dir(out_dir, kind, n, classes, image_size, seed, train_fraction=0.75):
    """Materialize train/test splits under a directory; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    meta = f"kind={kind} n={n} classes={classes} image_size={image_size} seed={seed}"
    paths = {}
    if kind == "segmentation":
        images, masks = make_segmentation(n, classes, image_size, seed)
        n_train = max(1, int(round(n * train_fraction)))
        for split, sl in (("train", slice(0, n_train)), ("test", slice(n_train, n))):
            path = os.path.join(out_dir, f"{split}.fngi")
            save_dataset(path, images[sl], masks=masks[sl], meta=f"{meta} split={split}")
            paths[split] = path
    else:
        images, labels = make_classification(kind, n, classes, image_size, seed)
        n_train = max(classes, int(round(n * train_fraction)))
        for split, sl in (("train", slice(0, n_train)), ("test", slice(n_train, n))):
            path = os.path.join(out_dir, f"{split}.fngi")
            save_dataset(path, images[sl], labels=labels[sl], meta=f"{meta} split={split}")
            paths[split] = path
    return paths
