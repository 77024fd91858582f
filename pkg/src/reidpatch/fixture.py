"""Procedural pedestrian fixture written in Market-1501 layout.

Each identity is a fixed combination of head, torso, leg and bag colors plus
a torso pattern. Two pseudo-cameras differ in background and lighting. Per
image, the figure is jittered in position and scale, and a few background
clutter blocks are drawn.
"""
from __future__ import annotations

import colorsys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .errors import InsufficientIdentitiesError

PATTERNS = ("solid", "hstripe", "vstripe", "split")

# (background rgb, lighting gain, tint) per camera
_CAMERAS = {
    1: ((150, 160, 140), 1.00, np.array([1.05, 1.0, 0.92])),
    2: ((95, 100, 125), 0.82, np.array([0.92, 0.98, 1.08])),
}


def _color(rng, hue=None):
    h = rng.random() if hue is None else hue
    s = 0.55 + 0.45 * rng.random()
    v = 0.35 + 0.6 * rng.random()
    return tuple(int(255 * c) for c in colorsys.hsv_to_rgb(h, s, v))


def identity_attributes(identity: int, seed: int) -> dict:
    rng = np.random.default_rng([seed, identity])
    torso_hue = (identity * 0.618034 + rng.random() * 0.1) % 1.0
    return {
        "head": _color(rng),
        "torso": _color(rng, torso_hue),
        "torso2": _color(rng, (torso_hue + 0.5) % 1.0),
        "legs": _color(rng),
        "pattern": PATTERNS[identity % len(PATTERNS)],
        "bag": None if rng.random() < 0.4 else _color(rng),
        "width": 0.85 + 0.3 * rng.random(),
    }


def render_person(attrs: dict, camera: int, rng, height: int = 256, width: int = 128) -> Image.Image:
    """Draw on a 256 x 128 canvas, then resize to the requested size."""
    img = _render_canvas(attrs, camera, rng)
    if (height, width) != (256, 128):
        img = img.resize((width, height), Image.BILINEAR)
    return img


def _render_canvas(attrs: dict, camera: int, rng, height: int = 256, width: int = 128) -> Image.Image:
    bg, gain, tint = _CAMERAS[1 + (camera - 1) % 2]
    img = Image.new("RGB", (width, height), bg)
    draw = ImageDraw.Draw(img)
    # background gradient and clutter
    for y in range(0, height, 8):
        shade = int(20 * y / height)
        draw.rectangle([0, y, width, y + 8], fill=tuple(max(0, c - shade) for c in bg))
    for _ in range(3):
        x0, y0 = rng.integers(0, width), rng.integers(0, height)
        w, h = rng.integers(8, 30), rng.integers(8, 40)
        draw.rectangle([x0, y0, x0 + w, y0 + h], fill=tuple(int(c) for c in rng.integers(40, 220, 3)))

    s = 0.9 + 0.2 * rng.random()
    cx = width / 2 + rng.integers(-8, 9)
    top = 18 + rng.integers(-6, 7)
    bw = 26 * attrs["width"] * s
    head_r = 13 * s
    torso_h, leg_h = 86 * s, 100 * s

    draw.ellipse([cx - head_r, top, cx + head_r, top + 2 * head_r], fill=attrs["head"])
    t0 = top + 2 * head_r + 2
    box = [cx - bw, t0, cx + bw, t0 + torso_h]
    draw.rectangle(box, fill=attrs["torso"])
    pat, c2 = attrs["pattern"], attrs["torso2"]
    if pat == "hstripe":
        for k in range(4):
            y = t0 + (2 * k + 1) * torso_h / 8
            draw.rectangle([box[0], y, box[2], y + torso_h / 10], fill=c2)
    elif pat == "vstripe":
        for k in range(3):
            x = box[0] + (2 * k + 1) * 2 * bw / 6 - bw / 10
            draw.rectangle([x, t0, x + bw / 5, t0 + torso_h], fill=c2)
    elif pat == "split":
        draw.rectangle([box[0], t0 + torso_h / 2, box[2], t0 + torso_h], fill=c2)
    # arms
    draw.rectangle([box[0] - 9 * s, t0 + 4, box[0], t0 + torso_h * 0.8], fill=attrs["torso"])
    draw.rectangle([box[2], t0 + 4, box[2] + 9 * s, t0 + torso_h * 0.8], fill=attrs["torso"])
    l0 = t0 + torso_h
    draw.rectangle([cx - bw * 0.9, l0, cx - 3, min(height - 2, l0 + leg_h)], fill=attrs["legs"])
    draw.rectangle([cx + 3, l0, cx + bw * 0.9, min(height - 2, l0 + leg_h)], fill=attrs["legs"])
    if attrs["bag"] is not None:
        bx = box[2] + 9 * s
        draw.rectangle([bx, t0 + torso_h * 0.45, bx + 16 * s, t0 + torso_h * 0.85], fill=attrs["bag"])

    arr = np.asarray(img, dtype=np.float32) * gain * tint
    arr += rng.normal(0.0, 4.0, arr.shape)
    return Image.fromarray(np.clip(arr, 0, 255).astype(np.uint8))


def split_for(k: int, m: int) -> str:
    """Per-identity split: first half train, then query, rest gallery.

    The first two non-train images (one per camera) become queries.
    """
    half = m // 2
    if k < half:
        return "train"
    if k < half + 2 and m - half >= 3:
        return "query"
    if m - half < 3 and k == half:
        return "query"
    return "gallery"


_SPLIT_DIRS = {"train": "bounding_box_train", "query": "query", "gallery": "bounding_box_test"}


def make_fixture(out, identities: int = 16, images_per_identity: int = 8, seed: int = 0,
                 height: int = 256, width: int = 128) -> Path:
    """Render a synthetic Re-ID dataset and return its root directory."""
    if identities < 2:
        raise InsufficientIdentitiesError("fixture needs at least 2 identities")
    if images_per_identity < 2:
        raise ValueError("fixture needs at least 2 images per identity")
    out = Path(out)
    for d in _SPLIT_DIRS.values():
        (out / d).mkdir(parents=True, exist_ok=True)
    frame = 0
    for pid in range(1, identities + 1):
        attrs = identity_attributes(pid, seed)
        for k in range(images_per_identity):
            camera = 1 + k % 2
            rng = np.random.default_rng([seed, pid, k])
            img = render_person(attrs, camera, rng, height, width)
            frame += 1
            name = f"{pid:04d}_c{camera}s1_{frame:06d}_00.png"
            img.save(out / _SPLIT_DIRS[split_for(k, images_per_identity)] / name)
    return out
