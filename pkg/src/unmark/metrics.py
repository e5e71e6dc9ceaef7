"""Evaluation criteria and the dataset-level evaluation report."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from . import losses
from .errors import ShapeError

# Full-scale reference numbers (PSNR dB, SSIM) for the complete method; context only.
REFERENCE_RESULTS = {
    "LOGO-H": (40.05, 0.9897),
    "LOGO-L": (42.53, 0.9924),
    "LOGO-Gray": (42.01, 0.9928),
    "LOGO-30K": (41.27, 0.9910),
}

CSV_FIELDS = ("sample_id", "psnr", "ssim", "mask_iou", "input_psnr", "masked_psnr")


def _as_array(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(pred, gt) -> float:
    """10 log10(1 / MSE) over all channels jointly; identical inputs give inf."""
    p, g = _as_array(pred), _as_array(gt)
    if p.shape != g.shape:
        raise ShapeError(f"psnr: {p.shape} vs {g.shape}")
    mse = float(np.mean((p - g) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def masked_psnr(pred, gt, mask) -> float:
    """PSNR restricted to pixels where ``mask`` > 0.5 (H x W x C layout)."""
    p, g, m = _as_array(pred), _as_array(gt), _as_array(mask)
    if p.shape != g.shape:
        raise ShapeError(f"masked_psnr: {p.shape} vs {g.shape}")
    sel = np.broadcast_to(m > 0.5, p.shape)
    if not sel.any():
        return math.nan
    mse = float(np.mean((p[sel] - g[sel]) ** 2))
    return math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)


def ssim(pred, gt) -> float:
    """Evaluation SSIM for single H x W x C rasters (or B x C x H x W tensors)."""
    p, g = _as_array(pred), _as_array(gt)
    if p.shape != g.shape:
        raise ShapeError(f"ssim: {p.shape} vs {g.shape}")
    if p.ndim == 3:
        p, g = p.transpose(2, 0, 1)[None], g.transpose(2, 0, 1)[None]
    with torch.no_grad():
        return float(losses.ssim(torch.from_numpy(np.ascontiguousarray(p)), torch.from_numpy(np.ascontiguousarray(g))))


def mask_iou(mask_pred, mask_gt, threshold: float = 0.5) -> float:
    p, g = _as_array(mask_pred), _as_array(mask_gt)
    if p.shape != g.shape:
        raise ShapeError(f"mask_iou: {p.shape} vs {g.shape}")
    pb, gb = p >= threshold, g >= 0.5
    union = np.logical_or(pb, gb).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pb, gb).sum() / union)


def finite_mean(values):
    """Mean over finite entries; returns (mean, number of excluded entries)."""
    vals = [v for v in values if math.isfinite(v)]
    excluded = len(values) - len(vals)
    return (sum(vals) / len(vals) if vals else math.nan), excluded


@dataclass
class EvalSummary:
    rows: list = field(default_factory=list)
    means: dict = field(default_factory=dict)
    excluded: dict = field(default_factory=dict)
    profile: str = ""

    def to_text(self) -> str:
        lines = [f"samples: {len(self.rows)}"]
        for k in ("psnr", "ssim", "mask_iou", "input_psnr", "masked_psnr"):
            note = f"  ({self.excluded[k]} non-finite excluded)" if self.excluded.get(k) else ""
            lines.append(f"mean {k:<12} {self.means.get(k, math.nan):.4f}{note}")
        ref = REFERENCE_RESULTS.get(self.profile)
        if ref:
            lines.append(
                f"reference ({self.profile}, full-scale training): PSNR {ref[0]:.2f} dB, SSIM {ref[1]:.4f}"
                " -- context only, not expected at desk scale"
            )
        return "\n".join(lines) + "\n"


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf"
    if math.isnan(v):
        return "nan"
    return repr(float(v))


def write_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (r[k] if k == "sample_id" else _fmt(r[k])) for k in CSV_FIELDS})


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (v if k == "sample_id" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def summarize(rows, profile: str = "") -> EvalSummary:
    s = EvalSummary(rows=list(rows), profile=profile)
    for k in CSV_FIELDS[1:]:
        s.means[k], s.excluded[k] = finite_mean([r[k] for r in rows])
    return s


def evaluate_samples(predict, samples, batch_size: int = 1):
    """Score ``predict`` on an iterable of (sample_id, input, background, mask) rasters.

    ``predict`` maps a list of H x W x 3 inputs to a list of
    (final, predicted_mask) raster pairs.
    """
    rows = []
    buf = []

    def flush():
        preds = predict([b[1] for b in buf])
        for (sid, inp, bg, m), (final, m_pred) in zip(buf, preds):
            rows.append({
                "sample_id": sid,
                "psnr": psnr(final, bg),
                "ssim": ssim(final, bg),
                "mask_iou": mask_iou(m_pred, m),
                "input_psnr": psnr(inp, bg),
                "masked_psnr": masked_psnr(final, bg, m),
            })
        buf.clear()

    for item in samples:
        buf.append(item)
        if len(buf) >= batch_size:
            flush()
    if buf:
        flush()
    return rows


def evaluate_dataset(checkpoint, manifest, out_dir, split: str = "test", batch_size: int = 1,
                     limit: int | None = None) -> EvalSummary:
    """Run a checkpoint over a manifest split and write ``eval.csv`` + ``eval.txt``."""
    from . import checkpoint as ckpt
    from .compositor import iter_split, read_manifest
    from .trainer import make_predictor

    man = read_manifest(manifest)
    model = ckpt.load_model(checkpoint)
    predict = make_predictor(model)
    samples = iter_split(man, os.path.dirname(os.path.abspath(manifest)), split, limit=limit)
    rows = evaluate_samples(predict, samples, batch_size=batch_size)
    summary = summarize(rows, profile=man.get("profile", {}).get("name", ""))
    os.makedirs(out_dir, exist_ok=True)
    write_csv(os.path.join(out_dir, "eval.csv"), rows)
    with open(os.path.join(out_dir, "eval.txt"), "w") as fh:
        fh.write(summary.to_text())
    return summary
