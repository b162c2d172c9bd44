"""Procedurally generated labelled image set for desk-scale experiments.

The class of an image is the texture printed on its foreground object: a
sinusoidal grating with one of five orientations and one of two periods.
Object shape, object colour, position, rotation and background are random
nuisance factors, so a small CNN has to learn texture detectors, which are
sensitive to structured perturbations yet robust to pixel noise.
"""
from __future__ import annotations

import colorsys
import csv
import os
from pathlib import Path

import numpy as np

from .errors import ConfigurationError

SHAPES = ("disc", "square", "triangle", "cross", "ring")
ORIENTATIONS = 5
PERIODS = (4.0, 8.0)


def _shape_mask(shape, yy, xx, cy, cx, r, theta):
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u, v = c * dx + s * dy, -s * dx + c * dy
    if shape == "disc":
        return u * u + v * v <= r * r
    if shape == "square":
        return (np.abs(u) <= r * 0.85) & (np.abs(v) <= r * 0.85)
    if shape == "triangle":
        # upward triangle in the rotated frame
        return (v <= r * 0.7) & (v >= -r + 1.7 * np.abs(u))
    if shape == "cross":
        arm = r * 0.35
        return ((np.abs(u) <= arm) & (np.abs(v) <= r)) | ((np.abs(v) <= arm) & (np.abs(u) <= r))
    if shape == "ring":
        d2 = u * u + v * v
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    raise ValueError(shape)


def class_recipe(label: int, classes: int = 10):
    """(grating angle in radians, grating period in pixels) of a class id."""
    n_orient = max(ORIENTATIONS, -(-classes // len(PERIODS)))
    theta = np.pi * (label % n_orient) / n_orient
    return theta, PERIODS[(label // n_orient) % len(PERIODS)]


def render(label: int, rng: np.random.Generator, size: int = 64, classes: int = 10,
           contrast=(0.1, 0.2)) -> np.ndarray:
    """One ``[size, size, 3]`` float image in [0, 1]."""
    theta, period = class_recipe(label, classes)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.empty((size, size, 3))
    img[:] = rng.uniform(0.1, 0.9, size=3)
    # low-frequency background gradient
    gx, gy = rng.uniform(-0.15, 0.15, size=2)
    img += (gx * (xx / size - 0.5) + gy * (yy / size - 0.5))[..., None]
    r = rng.uniform(0.3, 0.42) * size
    cy, cx = rng.uniform(0.8 * r, size - 0.8 * r, size=2)
    shape = SHAPES[rng.integers(0, 3)]
    mask = _shape_mask(shape, yy, xx, cy, cx, r, rng.uniform(0, 2 * np.pi))
    color = np.array(colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0.3, 1.0), rng.uniform(0.5, 1.0)))
    wave = np.sin(2 * np.pi * (np.cos(theta) * xx + np.sin(theta) * yy) / period
                  + rng.uniform(0, 2 * np.pi))
    amp = rng.uniform(*contrast)
    fg = color[None, None, :] * (1 + 2 * amp * wave[..., None])
    img[mask] = fg[mask]
    img += rng.normal(0, 0.02, size=img.shape)
    return np.clip(img, 0, 1)


def generate(classes: int = 10, per_class: int = 200, seed: int = 0, size: int = 64):
    """Return ``(images [n, 3, size, size] float32, labels [n] int64)``.

    Images are interleaved by class so any prefix is class balanced.
    """
    if classes < 1 or per_class < 1:
        raise ConfigurationError("classes and per_class must be positive")
    rng = np.random.default_rng(seed)
    imgs = np.empty((classes * per_class, 3, size, size), dtype=np.float32)
    labels = np.empty(classes * per_class, dtype=np.int64)
    for i in range(per_class):
        for c in range(classes):
            k = i * classes + c
            imgs[k] = render(c, rng, size, classes).transpose(2, 0, 1)
            labels[k] = c
    # quantize like an 8-bit file would be
    imgs = np.round(imgs * 255) / 255
    return imgs.astype(np.float32), labels


def split_names(per_class: int, fractions=(0.5, 0.1, 0.4)):
    """Split labels for the ``per_class`` images of one class: train/query/gallery."""
    n_train = int(round(per_class * fractions[0]))
    n_query = max(1, int(round(per_class * fractions[1])))
    n_gallery = per_class - n_train - n_query
    if n_gallery < 1:
        raise ConfigurationError(f"per_class={per_class} is too small for a three-way split")
    return ["train"] * n_train + ["query"] * n_query + ["gallery"] * n_gallery


def write_dataset(out_dir, classes: int = 10, per_class: int = 200, seed: int = 0,
                  size: int = 64, fractions=(0.5, 0.1, 0.4)) -> Path:
    """Render the toy set as PNG files plus ``manifest.csv``; returns the manifest path."""
    from PIL import Image

    if classes < 1 or per_class < 1:
        raise ConfigurationError("classes and per_class must be positive")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"{out} is not writable")
    imgs, labels = generate(classes, per_class, seed, size)
    splits = split_names(per_class, fractions)
    rows = []
    for k in range(len(imgs)):
        i = k // classes
        name = f"images/{k:05d}_c{labels[k]:02d}.png"
        arr = np.round(imgs[k].transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(arr).save(out / name, optimize=False)
        rows.append((name, int(labels[k]), splits[i]))
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label", "split"])
        w.writerows(rows)
    return manifest
