"""Procedural stand-ins for host photos and logos.

Used for smoke tests and demos where no photo collection is at hand. Hosts
are smooth color fields with blobs, stripes and grain; logos are
anti-aliased RGBA shapes and glyphs.

    python -m unmark.procedural OUT_DIR --hosts 64 --logos 16
"""

from __future__ import annotations

import argparse
import os

import numpy as np
from PIL import Image, ImageDraw, ImageFilter, ImageFont


def make_host(rng: np.random.Generator, size: int = 256) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / size
    img = np.empty((size, size, 3), np.float32)
    base = rng.uniform(0.1, 0.9, 3)
    grad = rng.normal(0, 0.3, (3, 2))
    for c in range(3):
        img[:, :, c] = base[c] + grad[c, 0] * (xx - 0.5) + grad[c, 1] * (yy - 0.5)
    for _ in range(int(rng.integers(3, 9))):
        cx, cy = rng.uniform(0, 1, 2)
        s = rng.uniform(0.05, 0.3)
        amp = rng.normal(0, 0.35, 3)
        g = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
        img += g[:, :, None] * amp
    freq = rng.uniform(4, 30)
    theta = rng.uniform(0, np.pi)
    stripes = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy))
    img += 0.06 * stripes[:, :, None] * rng.uniform(-1, 1, 3)
    img += rng.normal(0, 0.02, img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


def make_logo(rng: np.random.Generator, size: int = 128) -> Image.Image:
    """RGBA logo on a transparent canvas; aspect ratio varies per logo."""
    w = size
    h = int(size * rng.uniform(0.5, 1.2))
    rgba = Image.new("RGBA", (w * 4, h * 4), (0, 0, 0, 0))
    d = ImageDraw.Draw(rgba)
    for _ in range(int(rng.integers(2, 5))):
        color = tuple(int(v) for v in rng.integers(0, 256, 3)) + (255,)
        x0, y0 = rng.uniform(0, 0.6) * w * 4, rng.uniform(0, 0.6) * h * 4
        x1, y1 = x0 + rng.uniform(0.25, 0.4) * w * 4, y0 + rng.uniform(0.25, 0.4) * h * 4
        kind = int(rng.integers(3))
        if kind == 0:
            d.ellipse([x0, y0, x1, y1], fill=color)
        elif kind == 1:
            d.rectangle([x0, y0, x1, y1], fill=color)
        else:
            d.ellipse([x0, y0, x1, y1], outline=color, width=int(w * 0.12))
    text = "".join(chr(int(c)) for c in rng.integers(65, 91, int(rng.integers(2, 5))))
    color = tuple(int(v) for v in rng.integers(0, 256, 3)) + (255,)
    try:
        font = ImageFont.load_default(size=int(h * 1.2))
    except TypeError:
        font = ImageFont.load_default()
    d.text((w * 0.3, h * 1.2), text, fill=color, font=font)
    # supersampled drawing plus a light blur gives soft, anti-aliased alpha edges
    rgba = rgba.resize((w, h), Image.LANCZOS).filter(ImageFilter.GaussianBlur(0.6))
    if rgba.getchannel("A").getextrema()[1] == 0:
        d = ImageDraw.Draw(rgba)
        d.ellipse([w * 0.2, h * 0.2, w * 0.8, h * 0.8], fill=color)
    return rgba


def write_assets(out_dir, n_hosts: int, n_logos: int, seed: int = 0, host_size: int = 256, logo_size: int = 128):
    """Write ``hosts/`` and ``logos/`` PNG folders; returns their paths."""
    hosts_dir = os.path.join(out_dir, "hosts")
    logos_dir = os.path.join(out_dir, "logos")
    os.makedirs(hosts_dir, exist_ok=True)
    os.makedirs(logos_dir, exist_ok=True)
    for i in range(n_hosts):
        rng = np.random.default_rng([seed, 1, i])
        arr = np.round(make_host(rng, host_size) * 255).astype(np.uint8)
        Image.fromarray(arr, "RGB").save(os.path.join(hosts_dir, f"host_{i:05d}.png"))
    for i in range(n_logos):
        rng = np.random.default_rng([seed, 2, i])
        make_logo(rng, logo_size).save(os.path.join(logos_dir, f"logo_{i:04d}.png"))
    return hosts_dir, logos_dir


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("out")
    p.add_argument("--hosts", type=int, default=64)
    p.add_argument("--logos", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--host-size", type=int, default=256)
    args = p.parse_args(argv)
    h, l = write_assets(args.out, args.hosts, args.logos, args.seed, args.host_size)
    print(h)
    print(l)


if __name__ == "__main__":
    main()
