"""End-to-end training, validation and single-image removal."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset

from . import checkpoint as ckpt
from . import imaging
from .compositor import load_sample, read_manifest
from .errors import ConfigError, DataError, NumericError
from .losses import LossWeights, PerceptualExtractor, total_loss
from .metrics import finite_mean, psnr
from .networks import ArchConfig, WatermarkRemover

log = logging.getLogger("unmark.train")

VGG_ENV = "UNMARK_VGG_WEIGHTS"


@dataclass
class TrainConfig:
    manifest: str = ""
    checkpoint_dir: str = "checkpoints"
    vgg_weights: str = ""
    resume: str = ""
    lr: float = 1e-3
    # linear ramp from lr/warmup_steps to lr; 0 disables
    warmup_steps: int = 200
    batch_size: int = 4
    epochs: int = 100
    image_size: int = 256
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    alpha: float = 0.025
    beta: float = 0.15
    val_every: int = 1
    n_val: int = 0
    widths: tuple = ArchConfig.widths
    blocks: int = ArchConfig.blocks
    refine_blocks: int = ArchConfig.refine_blocks
    reduction: int = ArchConfig.reduction
    s2am_levels: str = ArchConfig.s2am_levels
    grad_clip: float = 0.0
    deterministic: bool = True
    max_steps: int = 0
    workers: int = 0
    log_every: int = 1

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        for name in ("lr", "batch_size", "epochs", "image_size", "adam_eps", "val_every"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("n_val", "grad_clip", "max_steps", "workers", "alpha", "beta", "warmup_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")

    @property
    def arch(self) -> ArchConfig:
        try:
            return ArchConfig(self.widths, self.blocks, self.refine_blocks, self.reduction, self.s2am_levels)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        return d

    # -- key = value text format ------------------------------------------

    def dumps(self) -> str:
        lines = ["# unmark training config", "# key = value; '#' starts a comment; widths is a comma list"]
        for f in fields(self):
            lines.append(f"{f.name} = {format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def loads(cls, text: str, **overrides) -> "TrainConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            values[k] = v
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(values)

    @classmethod
    def load(cls, path, **overrides) -> "TrainConfig":
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.loads(text, **overrides)

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(values) - set(types))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kw = {}
        for k, v in values.items():
            kw[k] = parse_value(k, v, types[k]) if isinstance(v, str) else v
        return cls(**kw)


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(key, text: str, typ):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(text)
        if typ == "float":
            return float(text)
        if typ == "tuple":
            return tuple(int(x) for x in text.split(",") if x.strip())
        return text
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {text!r} as {typ}") from None


# -- data ---------------------------------------------------------------------


class ManifestDataset(Dataset):
    """Supervision tensors (input, bg, wm, mask) for one manifest split."""

    def __init__(self, manifest_path, split: str, image_size: int, limit: int = 0):
        self.manifest = read_manifest(manifest_path)
        self.root = os.path.dirname(os.path.abspath(manifest_path))
        self.split = split
        entries = self.manifest["splits"].get(split, [])
        self.entries = entries[:limit] if limit else entries
        self.image_size = image_size

    def __len__(self):
        return len(self.entries)

    def _fit(self, a, mode):
        if a.shape[0] == self.image_size and a.shape[1] == self.image_size:
            return a
        return imaging.resize(a, self.image_size, self.image_size, mode)

    def __getitem__(self, i):
        s = load_sample(self.root, self.split, self.entries[i]["id"])
        out = {}
        for k in ("input", "bg", "wm"):
            out[k] = torch.from_numpy(np.ascontiguousarray(self._fit(s[k], "bilinear").transpose(2, 0, 1)))
        m = self._fit(s["mask"], "nearest")
        out["mask"] = torch.from_numpy(np.ascontiguousarray((m >= 0.5).astype(np.float32).transpose(2, 0, 1)))
        return out


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list:
    perm = np.random.default_rng(np.random.SeedSequence([seed, 7, epoch])).permutation(n)
    return [perm[i:i + batch_size].tolist() for i in range(0, n, batch_size)]


# -- inference ----------------------------------------------------------------


def _pad_to_multiple(x: torch.Tensor, multiple: int):
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not (ph or pw):
        return x, (h, w)
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode), (h, w)


@torch.no_grad()
def run_model(model: WatermarkRemover, images: list):
    """Pipeline outputs for H x W x 3 rasters, reflection-padded to the net's stride and cropped back."""
    results = []
    for img in images:
        x, (h, w) = _pad_to_multiple(imaging.to_batch(img), model.arch.multiple)
        out = model(x)
        crop = lambda t: t[..., :h, :w]
        results.append({
            "final": imaging.from_batch(crop(out.final))[0],
            "coarse": imaging.from_batch(crop(out.coarse))[0],
            "mask": imaging.from_batch(crop(out.outputs.mask))[0],
            "wm": imaging.from_batch(crop(out.outputs.wm))[0],
            "bg": imaging.from_batch(crop(out.outputs.bg))[0],
        })
    return results


def make_predictor(model: WatermarkRemover):
    model.eval()

    def predict(images):
        return [(r["final"], r["mask"]) for r in run_model(model, images)]

    return predict


def remove(checkpoint_path, input_path, out_dir) -> dict:
    """Write final/coarse/mask/wm PNGs for one watermarked image."""
    model = ckpt.load_model(checkpoint_path)
    img = imaging.load_image(input_path, channels=3)
    r = run_model(model, [img])[0]
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for k in ("final", "coarse", "mask", "wm"):
        paths[k] = os.path.join(out_dir, f"{k}.png")
        imaging.save_image(paths[k], r[k])
    return paths


def validate(model, dataset: ManifestDataset) -> float:
    """Mean PSNR of I_final against the background over ``dataset``."""
    model.eval()
    vals = []
    with torch.no_grad():
        for i in range(len(dataset)):
            b = dataset[i]
            out = model(b["input"][None])
            vals.append(psnr(out.final[0], b["bg"]))
    model.train()
    return finite_mean(vals)[0] if vals else math.nan


# -- training -----------------------------------------------------------------


def configure_numerics(deterministic: bool) -> None:
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    else:
        torch.use_deterministic_algorithms(False)


def resolve_vgg(config: TrainConfig) -> str:
    return os.environ.get(VGG_ENV) or config.vgg_weights


def _check_finite(parts: dict, step: int) -> None:
    # components before the total, so the first name reported is the culprit
    for k in sorted(parts, key=lambda k: (k == "total", "." not in k, k)):
        if not torch.isfinite(parts[k]).all():
            raise NumericError(k, step)


class Trainer:
    """Owns the model, optimizer and data for one run."""

    def __init__(self, config: TrainConfig):
        self.config = config
        configure_numerics(config.deterministic)
        if not config.manifest:
            raise ConfigError("config key 'manifest' is required for training")
        self.weights = config.weights
        self.extractor = None
        if self.weights.alpha > 0:
            self.extractor = PerceptualExtractor(resolve_vgg(config))
        try:
            self.train_set = ManifestDataset(config.manifest, "train", config.image_size)
            self.val_set = ManifestDataset(config.manifest, "test", config.image_size, config.n_val)
        except OSError as exc:
            raise DataError(str(exc)) from exc
        if len(self.train_set) == 0:
            raise DataError(f"{config.manifest}: training split is empty")
        torch.manual_seed(config.seed)
        self.model = WatermarkRemover(config.arch)
        self.optimizer = torch.optim.Adam(
            self.model.parameters(), lr=config.lr, betas=(config.adam_beta1, config.adam_beta2),
            eps=config.adam_eps, foreach=False,
        )
        self.step = 0
        self.best_psnr = -math.inf
        if config.resume:
            self._resume(config.resume)
        os.makedirs(config.checkpoint_dir, exist_ok=True)
        self.metrics_path = os.path.join(config.checkpoint_dir, "metrics.jsonl")

    def _resume(self, path):
        meta, tensors = ckpt.read(path)
        self.model = ckpt.build_model(meta, tensors, self.config.arch)
        self.optimizer = torch.optim.Adam(
            self.model.parameters(), lr=self.config.lr,
            betas=(self.config.adam_beta1, self.config.adam_beta2), eps=self.config.adam_eps, foreach=False,
        )
        ckpt.restore_optimizer(self.model, self.optimizer, meta, tensors)
        self.step = int(meta.get("step", 0))
        self.best_psnr = float(meta.get("best_psnr", -math.inf))
        log.info("resumed from %s at step %d", path, self.step)

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.train_set) / self.config.batch_size)

    def save(self, name, **extra) -> str:
        path = os.path.join(self.config.checkpoint_dir, name)
        meta = {"config": self.config.to_dict(), "step": self.step, "best_psnr": self.best_psnr,
                "epoch": self.step // self.steps_per_epoch, **extra}
        ckpt.save(path, self.model, meta, self.optimizer)
        return path

    def lr_at(self, step: int) -> float:
        w = self.config.warmup_steps
        return self.config.lr * min(1.0, (step + 1) / w) if w else self.config.lr

    def train_step(self, batch) -> dict:
        for group in self.optimizer.param_groups:
            group["lr"] = self.lr_at(self.step)
        out = self.model(batch["input"])
        total, parts = total_loss(out, batch["bg"], batch["wm"], batch["mask"], self.weights, self.extractor)
        parts = {"total": total, **parts}
        _check_finite(parts, self.step)
        if float(batch["mask"].sum()) == 0.0:
            log.warning("step %d: batch has an empty ground-truth mask; relative L1 terms are 0", self.step)
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        if self.config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.config.grad_clip)
        self.optimizer.step()
        self.step += 1
        return {k: float(v.detach()) for k, v in parts.items()}

    def _loader(self, batches):
        return DataLoader(self.train_set, batch_sampler=batches, num_workers=self.config.workers)

    def fit(self, on_step=None) -> dict:
        cfg = self.config
        if not cfg.deterministic:
            log.warning("fast numerics mode: runs are not bitwise reproducible")
        self.model.train()
        spe = self.steps_per_epoch
        history = []
        last_val = None
        stopped = False
        with open(self.metrics_path, "a") as mlog:
            for epoch in range(self.step // spe, cfg.epochs):
                batches = epoch_batches(len(self.train_set), cfg.batch_size, cfg.seed, epoch)
                skip = self.step - epoch * spe
                t0 = time.time()
                for batch in self._loader(batches[skip:]):
                    if cfg.max_steps and self.step >= cfg.max_steps:
                        stopped = True
                        break
                    parts = self.train_step(batch)
                    rec = {"step": self.step, "epoch": epoch, **parts}
                    history.append(rec)
                    if self.step % cfg.log_every == 0:
                        mlog.write(json.dumps(rec) + "\n")
                        mlog.flush()
                        log.info("step %d epoch %d total %.5f", self.step, epoch, parts["total"])
                    if on_step:
                        on_step(self, rec)
                if stopped:
                    break
                log.info("epoch %d done in %.1fs", epoch, time.time() - t0)
                self.save(f"epoch_{epoch:03d}.ckpt")
                if len(self.val_set) and (epoch + 1) % cfg.val_every == 0:
                    last_val = validate(self.model, self.val_set)
                    mlog.write(json.dumps({"step": self.step, "epoch": epoch, "val_psnr": last_val}) + "\n")
                    log.info("epoch %d validation PSNR %.3f dB", epoch, last_val)
                    if last_val > self.best_psnr:
                        self.best_psnr = last_val
                        self.save("best.ckpt")
                if cfg.max_steps and self.step >= cfg.max_steps:
                    break
        final = self.save("last.ckpt")
        return {"checkpoint": final, "step": self.step, "history": history,
                "val_psnr": last_val, "best_psnr": self.best_psnr}


def train(config: TrainConfig, on_step=None) -> dict:
    return Trainer(config).fit(on_step=on_step)
