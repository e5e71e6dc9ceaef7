"""Synthetic watermarked-sample generation.

A sample is produced by alpha-blending a (resized, optionally gray) logo onto
a host photo. Every sample carries the full supervision tuple: the
watermarked input, the clean background, the placed watermark and its
binary mask.

On-disk layout::

    <out>/manifest.json
    <out>/<split>/<sample_id>/{input,bg,wm,mask}.png
"""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import imaging
from .errors import CapacityError, FormatError, IntegrityError, PlacementError, ShapeError

MASK_THRESHOLD = np.float32(1.0 / 255.0)
MIN_OPACITY = 0.05
IMAGE_EXTS = (".png", ".jpg", ".jpeg")
SAMPLE_FILES = ("input.png", "bg.png", "wm.png", "mask.png")
MANIFEST_FORMAT = "unmark-dataset"
MANIFEST_VERSION = 1
SPLITS = ("train", "test")


@dataclass
class LogoAsset:
    rgb: np.ndarray
    alpha: np.ndarray
    name: str

    def __post_init__(self):
        if self.rgb.shape[:2] != self.alpha.shape[:2] or self.rgb.shape[2] != 3 or self.alpha.shape[2] != 1:
            raise ShapeError(f"logo {self.name}: rgb {self.rgb.shape} / alpha {self.alpha.shape} mismatch")
        if not (self.alpha > 0).any():
            raise FormatError(f"logo {self.name} is fully transparent")


@dataclass
class PlacementSpec:
    scale: float
    top_left: tuple
    opacity: float
    grayscale: bool = False

    def to_dict(self):
        return {"scale": self.scale, "top_left": [int(v) for v in self.top_left],
                "opacity": self.opacity, "grayscale": bool(self.grayscale)}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["scale"]), tuple(int(v) for v in d["top_left"]), float(d["opacity"]), bool(d["grayscale"]))


@dataclass
class Sample:
    input: np.ndarray
    background: np.ndarray
    watermark: np.ndarray
    mask: np.ndarray
    placement: PlacementSpec
    alpha: np.ndarray  # effective per-pixel blend weight, zero outside the mask
    size: tuple = (0, 0)  # placed logo height, width


@dataclass
class DatasetProfile:
    name: str
    n_train: int
    n_test: int
    opacity_range: tuple
    scale_range: tuple
    grayscale: bool = False

    def __post_init__(self):
        for r in (self.opacity_range, self.scale_range):
            lo, hi = r
            if not (0.0 <= lo <= hi <= 1.0):
                raise ValueError(f"profile {self.name}: bad range {r}")

    def with_counts(self, n_train=None, n_test=None) -> "DatasetProfile":
        d = asdict(self)
        if n_train is not None:
            d["n_train"] = n_train
        if n_test is not None:
            d["n_test"] = n_test
        return DatasetProfile(**d)

    def to_dict(self):
        d = asdict(self)
        d["opacity_range"] = list(self.opacity_range)
        d["scale_range"] = list(self.scale_range)
        return d


PROFILES = {
    "logo-l": DatasetProfile("LOGO-L", 12000, 2000, (0.35, 0.60), (0.35, 0.60)),
    "logo-h": DatasetProfile("LOGO-H", 12000, 2000, (0.60, 0.85), (0.60, 0.85)),
    "logo-gray": DatasetProfile("LOGO-Gray", 12000, 2000, (0.35, 0.85), (0.35, 0.85), grayscale=True),
    "logo-30k": DatasetProfile("LOGO-30K", 28000, 4000, (0.35, 0.85), (0.35, 0.85)),
}


def get_profile(name: str) -> DatasetProfile:
    try:
        return PROFILES[name.lower()]
    except KeyError:
        raise KeyError(f"unknown profile {name!r}; choose from {', '.join(PROFILES)}") from None


def load_logo(path) -> LogoAsset:
    """Read a logo; files without alpha are treated as fully opaque."""
    name = os.path.splitext(os.path.basename(path))[0]
    try:
        rgba = imaging.load_image(path, channels=4)
        rgb, alpha = rgba[:, :, :3], rgba[:, :, 3:]
    except FormatError:
        rgb = imaging.load_image(path, channels=3)
        alpha = np.ones(rgb.shape[:2] + (1,), np.float32)
    return LogoAsset(np.ascontiguousarray(rgb), np.ascontiguousarray(alpha), name)


def logo_size(logo: LogoAsset, scale: float, host_w: int) -> tuple:
    """(height, width) of the placed logo: width = scale * host width, aspect kept."""
    lh, lw = logo.rgb.shape[:2]
    w = max(1, int(round(scale * host_w)))
    h = max(1, int(round(w * lh / lw)))
    return h, w


def place_watermark(host: np.ndarray, logo: LogoAsset, spec: PlacementSpec,
                    premultiplied_wm: bool = False) -> Sample:
    host = np.asarray(host, dtype=np.float32)
    if host.ndim != 3 or host.shape[2] != 3:
        raise ShapeError(f"host must be H x W x 3, got {host.shape}")
    if not (MIN_OPACITY <= spec.opacity <= 1.0):
        raise PlacementError(f"opacity {spec.opacity} outside [{MIN_OPACITY}, 1]")
    H, W = host.shape[:2]
    h, w = logo_size(logo, spec.scale, W)
    r, c = spec.top_left
    if r < 0 or c < 0 or r + h > H or c + w > W:
        raise PlacementError(f"logo rectangle {h}x{w} at {(r, c)} exceeds host {H}x{W}")

    rgb = imaging.resize(logo.rgb, h, w, "bilinear")
    a_src = imaging.resize(logo.alpha, h, w, "bilinear")
    if spec.grayscale:
        rgb = imaging.to_grayscale(rgb)
    m = (a_src >= MASK_THRESHOLD).astype(np.float32)
    a = np.float32(spec.opacity) * a_src * m

    inp = host.copy()
    inp[r:r + h, c:c + w] = a * rgb + (1.0 - a) * host[r:r + h, c:c + w]
    mask = np.zeros((H, W, 1), np.float32)
    mask[r:r + h, c:c + w] = m
    alpha = np.zeros((H, W, 1), np.float32)
    alpha[r:r + h, c:c + w] = a
    wm = np.zeros_like(host)
    wm[r:r + h, c:c + w] = (a * rgb) if premultiplied_wm else (rgb * m)
    return Sample(np.clip(inp, 0, 1), host.copy(), wm, mask, spec, alpha, (h, w))


def _list_images(d) -> list:
    if not os.path.isdir(d):
        raise CapacityError(f"not a directory: {d}")
    return sorted(f for f in os.listdir(d) if f.lower().endswith(IMAGE_EXTS))


@lru_cache(maxsize=64)
def _cached_logo(path) -> LogoAsset:
    return load_logo(path)


def prepare_host(path, size: int) -> np.ndarray:
    img = imaging.load_image(path, channels=3)
    return imaging.resize(imaging.center_crop_square(img), size, size, "bilinear", antialias=True)


def draw_placement(rng: np.random.Generator, profile: DatasetProfile, logo: LogoAsset, host_hw) -> PlacementSpec:
    """Uniform opacity/scale/location under the profile; scale shrinks if a tall logo would not fit."""
    H, W = host_hw
    opacity = float(rng.uniform(*profile.opacity_range))
    scale = float(rng.uniform(*profile.scale_range))
    h, w = logo_size(logo, scale, W)
    while h > H:
        if w == 1:
            raise PlacementError(f"logo {logo.name} is too tall to fit a {H}x{W} host")
        w -= 1
        scale = w / W
        h, w = logo_size(logo, scale, W)
    row = int(rng.integers(0, H - h + 1))
    col = int(rng.integers(0, W - w + 1))
    return PlacementSpec(scale, (row, col), opacity, profile.grayscale)


def plan_splits(hosts, logos, profile: DatasetProfile, seed: int) -> dict:
    """Disjoint host/logo partitions. Each host is used by exactly one sample."""
    need = profile.n_train + profile.n_test
    if len(hosts) < need:
        raise CapacityError(f"{len(hosts)} hosts available, {need} needed ({profile.n_train} train + {profile.n_test} test)")
    if len(logos) < 2:
        raise CapacityError(f"at least 2 logos are needed for disjoint splits, found {len(logos)}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    hosts = [hosts[i] for i in rng.permutation(len(hosts))]
    logos = [logos[i] for i in rng.permutation(len(logos))]
    n_test_logos = min(len(logos) - 1, max(1, int(round(len(logos) * profile.n_test / need))))
    return {
        "test": {"hosts": hosts[:profile.n_test], "logos": sorted(logos[:n_test_logos])},
        "train": {"hosts": hosts[profile.n_test:need], "logos": sorted(logos[n_test_logos:])},
    }


def _make_one(job):
    (split_idx, i, seed, profile, host_path, logo_dir, logo_names, out_dir, size, premultiplied) = job
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1 + split_idx, i]))
    logo_name = logo_names[int(rng.integers(len(logo_names)))]
    logo = _cached_logo(os.path.join(logo_dir, logo_name))
    host = prepare_host(host_path, size)
    spec = draw_placement(rng, profile, logo, host.shape[:2])
    s = place_watermark(host, logo, spec, premultiplied_wm=premultiplied)
    sid = f"{i:06d}"
    d = os.path.join(out_dir, SPLITS[split_idx], sid)
    os.makedirs(d, exist_ok=True)
    for fname, raster in zip(SAMPLE_FILES, (s.input, s.background, s.watermark, s.mask)):
        imaging.save_image(os.path.join(d, fname), raster)
    return {
        "id": sid,
        "host": os.path.basename(host_path),
        "logo": logo_name,
        "placement": spec.to_dict(),
        "size": [int(v) for v in s.size],
    }


def synthesize_dataset(profile: DatasetProfile, hosts_dir, logos_dir, seed: int, out_dir,
                       image_size: int = 256, workers: int = 1, premultiplied_wm: bool = False,
                       progress=None) -> dict:
    """Generate a full dataset; returns the manifest (also written to ``out_dir``).

    Each sample draws from its own generator seeded by (seed, split, index),
    so any worker count yields identical bytes.
    """
    hosts = _list_images(hosts_dir)
    logos = _list_images(logos_dir)
    if not hosts or not logos:
        raise CapacityError(f"empty input listing: {len(hosts)} hosts, {len(logos)} logos")
    plan = plan_splits(hosts, logos, profile, seed)
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "profile": profile.to_dict(),
        "seed": int(seed),
        "image_size": int(image_size),
        "premultiplied_wm": bool(premultiplied_wm),
        "logos": {s: plan[s]["logos"] for s in SPLITS},
        "splits": {},
    }
    for split_idx, split in enumerate(SPLITS):
        part = plan[split]
        jobs = [
            (split_idx, i, seed, profile, os.path.join(hosts_dir, h), logos_dir, part["logos"],
             out_dir, image_size, premultiplied_wm)
            for i, h in enumerate(part["hosts"])
        ]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as ex:
                entries = list(ex.map(_make_one, jobs, chunksize=16))
        else:
            entries = []
            for j in jobs:
                entries.append(_make_one(j))
                if progress:
                    progress(split, len(entries), len(jobs))
        manifest["splits"][split] = entries
    write_manifest(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


def write_manifest(path, manifest) -> None:
    with open(path, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def read_manifest(path) -> dict:
    try:
        with open(path) as fh:
            man = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"cannot read manifest {path}: {exc}") from exc
    if man.get("format") != MANIFEST_FORMAT:
        raise IntegrityError(f"{path} is not an {MANIFEST_FORMAT} manifest")
    return man


def sample_dir(root, split, sid) -> str:
    return os.path.join(root, split, sid)


def load_sample(root, split, sid) -> dict:
    d = sample_dir(root, split, sid)
    return {
        "input": imaging.load_image(os.path.join(d, "input.png"), 3),
        "bg": imaging.load_image(os.path.join(d, "bg.png"), 3),
        "wm": imaging.load_image(os.path.join(d, "wm.png"), 3),
        "mask": imaging.load_image(os.path.join(d, "mask.png"), 1),
    }


def iter_split(manifest, root, split="test", limit=None):
    """Yield (sample_id, input, background, mask) rasters for evaluation."""
    entries = manifest["splits"][split]
    if limit is not None:
        entries = entries[:limit]
    for e in entries:
        s = load_sample(root, split, e["id"])
        yield e["id"], s["input"], s["bg"], s["mask"]


def check_integrity(manifest, root) -> None:
    missing = []
    for split, entries in manifest["splits"].items():
        for e in entries:
            d = sample_dir(root, split, e["id"])
            missing += [os.path.join(d, f) for f in SAMPLE_FILES if not os.path.isfile(os.path.join(d, f))]
    if missing:
        shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
        raise IntegrityError(f"{len(missing)} sample files missing: {shown}", missing)


def area_fraction(size, image_size) -> float:
    h, w = size
    return (h * w) / float(image_size * image_size)


@dataclass
class DatasetStats:
    opacity_hist: list
    area_hist: list
    logo_counts: dict
    n_samples: int
    bin_edges: list = field(default_factory=lambda: [round(i / 10, 1) for i in range(11)])

    def to_text(self) -> str:
        out = io.StringIO()
        out.write(f"samples: {self.n_samples}\n\n")
        out.write(f"{'bin':<12}{'opacity':>10}{'area':>10}\n")
        for i in range(10):
            lo, hi = self.bin_edges[i], self.bin_edges[i + 1]
            out.write(f"[{lo:.1f}, {hi:.1f}{']' if i == 9 else ')':<4}{self.opacity_hist[i]:>10}{self.area_hist[i]:>10}\n")
        out.write(f"\nlogos: {len(self.logo_counts)}\n")
        for name, n in sorted(self.logo_counts.items()):
            out.write(f"  {name:<40}{n:>8}\n")
        return out.getvalue()

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["kind", "key", "count"])
        for i in range(10):
            key = f"{self.bin_edges[i]:.1f}-{self.bin_edges[i + 1]:.1f}"
            w.writerow(["opacity", key, self.opacity_hist[i]])
        for i in range(10):
            key = f"{self.bin_edges[i]:.1f}-{self.bin_edges[i + 1]:.1f}"
            w.writerow(["area", key, self.area_hist[i]])
        for name, n in sorted(self.logo_counts.items()):
            w.writerow(["logo", name, n])
        return out.getvalue()


def dataset_stats(manifest_path, splits=SPLITS, check_files: bool = True) -> DatasetStats:
    """Opacity and area-fraction histograms (10 bins over [0, 1]) plus per-logo counts."""
    man = read_manifest(manifest_path)
    root = os.path.dirname(os.path.abspath(manifest_path))
    if check_files:
        check_integrity(man, root)
    size = man["image_size"]
    opac, area, logos = [], [], {}
    for split in splits:
        for e in man["splits"].get(split, []):
            opac.append(e["placement"]["opacity"])
            area.append(area_fraction(e["size"], size))
            logos[e["logo"]] = logos.get(e["logo"], 0) + 1
    oh, _ = np.histogram(opac, bins=10, range=(0.0, 1.0))
    ah, _ = np.histogram(area, bins=10, range=(0.0, 1.0))
    return DatasetStats([int(v) for v in oh], [int(v) for v in ah], logos, len(opac))


def write_stats(stats: DatasetStats, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "stats.txt"), "w") as fh:
        fh.write(stats.to_text())
    with open(os.path.join(out_dir, "stats.csv"), "w") as fh:
        fh.write(stats.to_csv())
