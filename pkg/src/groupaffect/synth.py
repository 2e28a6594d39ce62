"""Synthetic group images with known intensity labels.

Every image shows 1 to 6 people in a row, each with a cartoon face above a
striped torso, in front of a wavy textured background.  The label (0..5) is
visible in three places, each through its own noise:

* face: the mouth arc bends from a frown to a smile with each person's
  intensity (image label + image-level face noise + per-person noise);
* body: torso stripe orientation follows the same recipe with its own noise;
* scene: background wave orientation and tint follow the label plus noise.

Because the three noise sources are independent, combining modalities gives
a better estimate than any single one.  Each part also varies in ways that
say nothing about the label (hair, face shape, eye style, stripe base angle
and period, background period and clutter), so local features group by
appearance type while the label moves them smoothly within each type.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .core import GroupImageRecord, Rect, record_to_json

MANIFEST_NAME = "manifest.jsonl"


@dataclass(frozen=True)
class SynthParams:
    width: int = 144
    height: int = 96
    slots: int = 6
    face_size: int = 18
    body_w: int = 20
    body_h: int = 30
    image_noise: float = 0.8  # image-level, independent per modality
    person_noise: float = 0.6  # per face / per torso
    pixel_noise: float = 6.0  # additive gray-level noise
    face_bend: float = 0.07  # mouth bend at the extremes, as a fraction of face size
    body_swing: float = 2 * math.pi / 9  # stripe rotation across the label range
    scene_swing: float = math.pi / 8  # background rotation across the label range
    contrast_gain: float = 0.8  # label-driven texture contrast on torso and background


def balanced_labels(n: int, rng: np.random.Generator, levels: int = 6) -> np.ndarray:
    return rng.permutation(np.arange(n) % levels)


def _wave(h: int, w: int, angle: float, period: float, phase: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    t = xx * math.cos(angle) + yy * math.sin(angle)
    return np.sin(2 * math.pi * t / period + phase)


def _intensity_to_unit(v: float) -> float:
    return float(np.clip(v / 5.0, 0.0, 1.0))


def _contrast(u: float, gain: float, rng: np.random.Generator, lo: float, hi: float) -> float:
    if gain == 0.0:
        return rng.uniform(lo, hi)
    return lo + gain * (hi - lo) * u + (1.0 - gain) * rng.uniform(0.0, hi - lo)


def _background(h: int, w: int, s: float, rng: np.random.Generator, p: "SynthParams") -> np.ndarray:
    # nuisance: base orientation, period and clutter; signal: orientation offset, contrast and tint
    base = float(rng.choice([0.0, math.pi / 2]))
    period = float(rng.choice([6.0, 9.0, 12.0]))
    wave = _wave(h, w, base + s * p.scene_swing, period, rng.uniform(0, 2 * math.pi))
    tint = np.array([90 + 80 * s, 110, 170 - 80 * s])
    img = tint[None, None, :] + _contrast(s, p.contrast_gain, rng, 25, 45) * wave[..., None]
    for _ in range(int(rng.integers(0, 4))):
        y0, x0 = int(rng.integers(0, h - 8)), int(rng.integers(0, w - 8))
        bh, bw = int(rng.integers(6, 20)), int(rng.integers(6, 30))
        img[y0 : y0 + bh, x0 : x0 + bw] = rng.uniform(40, 220, size=3)
    return img


def _torso(h: int, w: int, b: float, rng: np.random.Generator, p: "SynthParams") -> np.ndarray:
    # nuisance: pattern base angle, period, colour; signal: angle offset and contrast
    base = float(rng.choice([0.0, math.pi / 3, 2 * math.pi / 3]))
    period = float(rng.choice([4.0, 6.0]))
    stripes = _wave(h, w, base + b * p.body_swing, period, rng.uniform(0, 2 * math.pi))
    shirt = rng.uniform(60, 200, size=3)
    return shirt[None, None, :] + _contrast(b, p.contrast_gain, rng, 35, 60) * stripes[..., None]


def _draw_face(draw: ImageDraw.ImageDraw, fx: int, fy: int, fs: int, f: float, rng: np.random.Generator, bend_gain: float) -> None:
    # nuisance: face shape, hair, eyes, skin tone; signal: mouth curvature
    skin = tuple(int(v) for v in rng.uniform(150, 235, size=3))
    inset = int(rng.choice([1, max(1, fs // 8)]))
    draw.ellipse([fx + inset, fy + 1, fx + fs - 1 - inset, fy + fs - 2], fill=skin)
    hair = int(rng.integers(0, 3))
    dark = tuple(int(v) for v in rng.uniform(10, 80, size=3))
    if hair == 1:
        draw.rectangle([fx + 2, fy, fx + fs - 3, fy + fs // 5], fill=dark)
    elif hair == 2:
        draw.rectangle([fx, fy + 2, fx + 2, fy + fs // 2], fill=dark)
        draw.rectangle([fx + fs - 3, fy + 2, fx + fs - 1, fy + fs // 2], fill=dark)
    eye_y = fy + int(0.38 * fs)
    lines = bool(rng.integers(0, 2))
    for ex in (fx + int(0.32 * fs), fx + int(0.68 * fs)):
        if lines:
            draw.line([ex - 2, eye_y, ex + 2, eye_y], fill=(30, 30, 30), width=1)
        else:
            draw.ellipse([ex - 1, eye_y - 1, ex + 1, eye_y + 1], fill=(30, 30, 30))
    bend = (2.0 * f - 1.0) * bend_gain * fs  # negative: frown, positive: smile
    mouth_y = fy + 0.68 * fs
    half = 0.26 * fs
    pts = [(fx + fs / 2 + t * half, mouth_y - bend * (t * t - 0.5)) for t in np.linspace(-1.0, 1.0, 9)]
    draw.line(pts, fill=(120, 20, 30), width=2)


def render_image(label: float, rng: np.random.Generator, params: SynthParams = SynthParams()):
    """Return (RGB uint8 image, face boxes, body boxes) for one group image."""
    p = params
    h, w = p.height, p.width
    s = _intensity_to_unit(label + rng.normal(0, p.image_noise))
    img = _background(h, w, s, rng, p)

    n_people = int(rng.integers(1, p.slots + 1))
    slots = np.sort(rng.choice(p.slots, size=n_people, replace=False))
    slot_w = w // p.slots
    face_noise = rng.normal(0, p.image_noise)
    body_noise = rng.normal(0, p.image_noise)
    people = []
    for slot in slots.tolist():
        cx = slot * slot_w + slot_w // 2 + int(rng.integers(-2, 3))
        top = p.face_size // 2 + int(rng.integers(-3, 4))
        bx = int(np.clip(cx - p.body_w // 2, 0, w - p.body_w))
        by = top + p.face_size + 2
        bh = min(p.body_h, h - by)
        b = _intensity_to_unit(label + body_noise + rng.normal(0, p.person_noise))
        img[by : by + bh, bx : bx + p.body_w] = _torso(bh, p.body_w, b, rng, p)
        fx = int(np.clip(cx - p.face_size // 2, 0, w - p.face_size))
        f = _intensity_to_unit(label + face_noise + rng.normal(0, p.person_noise))
        people.append((fx, top, f, Rect(bx, by, p.body_w, bh)))

    canvas = Image.fromarray(np.clip(img, 0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(canvas)
    faces: list[Rect] = []
    bodies: list[Rect] = []
    for fx, fy, f, body in people:
        _draw_face(draw, fx, fy, p.face_size, f, rng, p.face_bend)
        faces.append(Rect(fx, fy, p.face_size, p.face_size))
        bodies.append(body)

    arr = np.asarray(canvas).astype(np.float64)
    arr = arr + rng.normal(0, p.pixel_noise, size=arr.shape)
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8), faces, bodies


def gen_synthetic(out_dir: str | Path, n: int, seed: int = 0, params: SynthParams = SynthParams()) -> Path:
    """Write ``n`` PNG images and a manifest; returns the manifest path."""
    if n < 20:
        raise ValueError("synthetic corpus needs n >= 20")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    labels = balanced_labels(n, rng)
    lines = []
    for i, label in enumerate(labels.tolist()):
        img, faces, bodies = render_image(float(label), rng, params)
        name = Path("images") / f"img_{i:05d}.png"
        Image.fromarray(img).save(out / name)
        rec = GroupImageRecord(out / name, float(label), faces, bodies)
        lines.append(record_to_json(rec, relative_to=out))
    manifest = out / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest
