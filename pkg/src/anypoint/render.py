"""Overlay rendering of track records onto video frames."""
from __future__ import annotations

import colorsys
import os

import numpy as np
from PIL import Image, ImageDraw

from anypoint.errors import InvalidInputError

TRAIL = 8
BADGE = (255, 64, 32)


def _color(pid):
    r, g, b = colorsys.hsv_to_rgb((pid * 0.618034) % 1.0, 0.85, 1.0)
    return int(255 * r), int(255 * g), int(255 * b)


def _to_uint8(frame):
    a = np.asarray(frame)
    if a.dtype != np.uint8:
        a = (np.clip(a, 0, 1) * 255).round().astype(np.uint8)
    return a


def render_overlay(frames, records, out_dir, scale=1, radius=2, trail=TRAIL):
    """Write ``%05d.png`` overlays into ``out_dir``; returns the written paths.

    Markers are filled when visibility > 0.5 and hollow otherwise. Frames
    with a rebased record get a badge in the top-left corner.
    """
    frames = [_to_uint8(f) for f in frames]
    by_frame = {}
    for r in records:
        if not 0 <= r.frame < len(frames):
            raise InvalidInputError(f"record for frame {r.frame}, but only {len(frames)} frames were given")
        by_frame.setdefault(r.frame, []).append(r)
    history = {}
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for t, frame in enumerate(frames):
        img = Image.fromarray(frame)
        recs = sorted(by_frame.get(t, []), key=lambda r: r.point_id)
        if scale != 1:
            img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
        if recs:
            draw = ImageDraw.Draw(img)

            def px(x, y):
                return (x + 0.5) * scale - 0.5, (y + 0.5) * scale - 0.5
            for r in recs:
                history.setdefault(r.point_id, []).append(px(r.x, r.y))
                history[r.point_id] = history[r.point_id][-trail:]
                color = _color(r.point_id)
                path = history[r.point_id]
                if len(path) > 1:
                    draw.line(path, fill=color, width=1)
                cx, cy = path[-1]
                box = (cx - radius, cy - radius, cx + radius, cy + radius)
                if r.visibility > 0.5:
                    draw.ellipse(box, fill=color, outline=color)
                else:
                    draw.ellipse(box, outline=color)
            if any(r.rebased for r in recs):
                s = max(3, 3 * scale)
                draw.rectangle((0, 0, 2 * s, s), fill=BADGE)
        path = os.path.join(out_dir, f"{t:05d}.png")
        img.save(path)
        paths.append(path)
    return paths
