"""Raster primitives shared by the rest of the package.

Images are float32 numpy arrays laid out H x W x C with values in [0, 1].
Masks are the same with C = 1. Network code works on torch tensors laid out
B x C x H x W; ``to_batch`` / ``from_batch`` convert between the two.
"""

from __future__ import annotations

import os

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage
from PIL import UnidentifiedImageError

from .errors import FormatError, ImageIOError, ShapeError

# ITU-R BT.601 luma
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

_MODES = {1: "L", 3: "RGB", 4: "RGBA"}


def _clip(a: np.ndarray) -> np.ndarray:
    a = np.nan_to_num(a, nan=0.0, posinf=1.0, neginf=0.0)
    return np.clip(a, 0.0, 1.0).astype(np.float32, copy=False)


def _as_hwc(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ShapeError(f"expected an H x W x C raster, got shape {img.shape}")
    return img


def load_image(path, channels: int = 3) -> np.ndarray:
    """Decode a PNG/JPEG file into an H x W x ``channels`` float raster.

    Gray sources are replicated to 3 channels on request. ``channels=4``
    requires the file to actually carry an alpha channel.
    """
    if channels not in _MODES:
        raise FormatError(f"unsupported channel count {channels}")
    try:
        with PILImage.open(path) as im:
            im.load()
            has_alpha = im.mode in ("RGBA", "LA", "PA") or (
                im.mode == "P" and "transparency" in im.info
            )
            if channels == 4 and not has_alpha:
                raise FormatError(f"{path}: alpha channel requested but image has none")
            im = im.convert(_MODES[channels])
            arr = np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageIOError(f"cannot decode image {path}: {exc}") from exc
    arr = _as_hwc(arr)
    return arr.astype(np.float32) / 255.0


def quantize(img: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid used on disk."""
    return np.round(_clip(_as_hwc(img)) * 255.0).astype(np.uint8)


def save_image(path, img: np.ndarray) -> None:
    img = _as_hwc(img)
    c = img.shape[2]
    if c not in _MODES:
        raise ShapeError(f"cannot save a {c}-channel raster")
    data = quantize(img)
    if c == 1:
        data = data[:, :, 0]
    d = os.path.dirname(os.fspath(path))
    if d:
        os.makedirs(d, exist_ok=True)
    try:
        PILImage.fromarray(data, mode=_MODES[c]).save(path, format="PNG")
    except OSError as exc:
        raise ImageIOError(f"cannot write {path}: {exc}") from exc


def resize(img: np.ndarray, h: int, w: int, mode: str = "bilinear", antialias: bool = False) -> np.ndarray:
    """Resample to ``h`` x ``w``.

    Bilinear uses the half-pixel-center convention (align_corners=False);
    nearest picks the source pixel whose center is closest. ``antialias``
    only changes downsampling and is meant for photographic hosts.
    """
    if h < 1 or w < 1:
        raise ShapeError(f"target size must be positive, got {h}x{w}")
    img = _as_hwc(img)
    if img.shape[:2] == (h, w):
        return _clip(img.copy())
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1)[None]
    if mode == "bilinear":
        out = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False, antialias=antialias)
    elif mode == "nearest":
        out = F.interpolate(t, size=(h, w), mode="nearest-exact")
    else:
        raise ValueError(f"unknown resize mode {mode!r}")
    return _clip(out[0].permute(1, 2, 0).numpy())


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """BT.601 luma, replicated back to three channels for compositing."""
    img = _as_hwc(img)
    if img.shape[2] != 3:
        raise ShapeError(f"to_grayscale expects 3 channels, got {img.shape[2]}")
    y = img @ np.asarray(LUMA_WEIGHTS, dtype=np.float32)
    return _clip(np.repeat(y[:, :, None], 3, axis=2))


def center_crop_square(img: np.ndarray) -> np.ndarray:
    img = _as_hwc(img)
    h, w = img.shape[:2]
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    return img[top:top + s, left:left + s]


def to_batch(*imgs: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """Stack H x W x C rasters into a B x C x H x W tensor."""
    arrs = [np.ascontiguousarray(_as_hwc(a).transpose(2, 0, 1)) for a in imgs]
    return torch.from_numpy(np.stack(arrs)).to(dtype)


def from_batch(t: torch.Tensor) -> list[np.ndarray]:
    """Inverse of ``to_batch``; clamps to [0, 1]."""
    arr = t.detach().to("cpu", torch.float32).numpy()
    return [_clip(a.transpose(1, 2, 0)) for a in arr]
