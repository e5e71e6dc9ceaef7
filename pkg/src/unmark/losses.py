"""Training objectives.

Every function takes B x C x H x W tensors; masks are B x 1 x H x W and
broadcast over channels.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

MASK_EPS = 1e-6
LOG_CLAMP = 1e-7

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# VGG16 feature-stack layout up to relu3_3; taps after relu1_2, relu2_2, relu3_3
_VGG16_LAYOUT = (64, 64, "M", 128, 128, "M", 256, 256, 256)
VGG_TAPS = (3, 8, 15)


@dataclass
class LossWeights:
    alpha: float = 0.025  # perceptual
    beta: float = 0.15  # SSIM

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError(f"loss weights must be nonnegative, got alpha={self.alpha} beta={self.beta}")


def relative_l1(pred, gt, mask, eps: float = MASK_EPS):
    """sum |M * (pred - gt)| / sum(M), normalised by the single-channel mask area."""
    if pred.shape != gt.shape:
        raise ShapeError(f"relative_l1: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return (mask * (pred - gt)).abs().sum() / mask.sum().clamp_min(eps)


def relative_l1_pred(pred, gt, mask_pred, mask_gt, eps: float = MASK_EPS):
    """sum |M' * pred - M * gt| / sum(M); zero when the ground-truth mask is empty."""
    if pred.shape != gt.shape:
        raise ShapeError(f"relative_l1_pred: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    denom = mask_gt.sum()
    if denom.item() < eps:
        return pred.sum() * 0.0
    return (mask_pred * pred - mask_gt * gt).abs().sum() / denom


def mask_bce(mask_pred, mask_gt):
    p = mask_pred.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP)
    return -(mask_gt * torch.log(p) + (1.0 - mask_gt) * torch.log(1.0 - p)).mean()


def mask_bce_logits(logits, mask_gt):
    """``mask_bce(sigmoid(logits), mask_gt)`` without the clamp.

    Same value wherever the clamp is inactive (|logit| < ~16). Unlike the
    probability form its gradient is sigmoid(z) - M and never vanishes, so a
    confidently wrong pixel can still be corrected.
    """
    return F.binary_cross_entropy_with_logits(logits, mask_gt)


def watermark_loss(wm_pred, wm_gt, mask_pred, mask_gt):
    return relative_l1(wm_pred, wm_gt, mask_gt) + relative_l1_pred(wm_pred, wm_gt, mask_pred, mask_gt)


def gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float32):
    coords = torch.arange(size, dtype=torch.float64) - size // 2
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype)


def ssim(pred, gt, window_size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0):
    """Mean SSIM over channels and valid (unpadded) window positions."""
    if pred.shape != gt.shape or pred.dim() != 4:
        raise ShapeError(f"ssim: shapes {tuple(pred.shape)} and {tuple(gt.shape)} must match (B x C x H x W)")
    if min(pred.shape[-2:]) < window_size:
        raise ShapeError(f"ssim: image {tuple(pred.shape[-2:])} smaller than the {window_size}px window")
    c = pred.shape[1]
    win = gaussian_window(window_size, sigma, pred.dtype).to(pred.device)
    win = win.expand(c, 1, window_size, window_size)

    def filt(x):
        return F.conv2d(x, win, groups=c)

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_x, mu_y = filt(pred), filt(gt)
    sxx = filt(pred * pred) - mu_x ** 2
    syy = filt(gt * gt) - mu_y ** 2
    sxy = filt(pred * gt) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return (num / den).mean()


def ssim_loss(pred, gt):
    return 1.0 - ssim(pred, gt)


class PerceptualExtractor(nn.Module):
    """Frozen VGG16 features up to relu3_3, returning the three tap activations.

    Weights come from a file; a torchvision ``vgg16`` state dict works as is
    (``features.N.weight`` keys), as does a bare feature-stack dict.
    """

    def __init__(self, weights_path):
        super().__init__()
        layers = []
        in_ch = 3
        for v in _VGG16_LAYOUT:
            if v == "M":
                layers.append(nn.MaxPool2d(2, 2))
            else:
                layers += [nn.Conv2d(in_ch, v, 3, padding=1), nn.ReLU()]
                in_ch = v
        self.features = nn.Sequential(*layers)
        self._load(weights_path)
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def _load(self, path):
        if not path:
            raise ConfigError("perceptual loss needs VGG16 weights: set `vgg_weights` or UNMARK_VGG_WEIGHTS")
        if not os.path.isfile(path):
            raise ConfigError(f"VGG16 weights file not found: {path}")
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise ConfigError(f"cannot read VGG16 weights from {path}: {exc}") from exc
        if not isinstance(state, dict):
            raise ConfigError(f"{path} does not hold a state dict")
        state = {k[len("features."):] if k.startswith("features.") else k: v for k, v in state.items()}
        wanted = self.features.state_dict()
        missing = [k for k in wanted if k not in state]
        if missing:
            raise ConfigError(f"{path} lacks VGG16 feature tensors: {', '.join(missing)}")
        try:
            self.features.load_state_dict({k: state[k] for k in wanted})
        except RuntimeError as exc:
            raise ConfigError(f"{path}: VGG16 tensor shapes do not match: {exc}") from exc

    def train(self, mode: bool = True):
        # stays in eval mode for the whole run
        return super().train(False)

    def forward(self, x):
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        taps = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in VGG_TAPS:
                taps.append(x)
        return taps


def perceptual_loss(pred, gt, extractor: PerceptualExtractor):
    fp = extractor(pred)
    with torch.no_grad():
        fg = extractor(gt)
    return sum((a - b).abs().mean() for a, b in zip(fp, fg))


def stage_terms(image_x, gt, stage_bg, mask_pred, mask_gt, weights: LossWeights, extractor=None) -> dict:
    """Unweighted components of one stage's removal loss."""
    terms = {
        "rel_gt": relative_l1(stage_bg, gt, mask_gt),
        "rel_pred": relative_l1_pred(stage_bg, gt, mask_pred, mask_gt),
        "l1": (image_x - gt).abs().mean(),
        "ssim": ssim_loss(image_x, gt),
    }
    if weights.alpha > 0:
        if extractor is None:
            raise ConfigError("alpha > 0 but no perceptual extractor was configured")
        terms["vgg"] = perceptual_loss(image_x, gt, extractor)
    return terms


def combine_stage(terms: dict, weights: LossWeights):
    total = terms["rel_gt"] + terms["rel_pred"] + terms["l1"] + weights.beta * terms["ssim"]
    if "vgg" in terms:
        total = total + weights.alpha * terms["vgg"]
    return total


def stage_loss(image_x, gt, stage_bg, mask_pred, mask_gt, weights: LossWeights, extractor=None):
    """alpha*vgg + rel_gt + beta*(1 - SSIM) + mean|I_x - I_gt| + rel_pred."""
    return combine_stage(stage_terms(image_x, gt, stage_bg, mask_pred, mask_gt, weights, extractor), weights)


def total_loss(out, gt_bg, gt_wm, gt_mask, weights: LossWeights, extractor=None):
    """Sum of coarse, refine, watermark and mask terms; returns (total, parts).

    ``out`` is a ``PipelineOutputs``. ``parts`` holds the four summands plus
    their unweighted sub-terms under dotted names, for logging.
    """
    m_pred = out.outputs.mask
    coarse = stage_terms(out.coarse, gt_bg, out.outputs.bg, m_pred, gt_mask, weights, extractor)
    refine = stage_terms(out.final, gt_bg, out.refined, m_pred, gt_mask, weights, extractor)
    parts = {
        "coarse": combine_stage(coarse, weights),
        "refine": combine_stage(refine, weights),
        "wm": watermark_loss(out.outputs.wm, gt_wm, m_pred, gt_mask),
        "mask": (mask_bce(m_pred, gt_mask) if out.outputs.mask_logits is None
                 else mask_bce_logits(out.outputs.mask_logits, gt_mask)),
    }
    total = parts["coarse"] + parts["refine"] + parts["wm"] + parts["mask"]
    for stage, terms in (("coarse", coarse), ("refine", refine)):
        for k, v in terms.items():
            parts[f"{stage}.{k}"] = v
    return total, parts


def is_finite(x) -> bool:
    return math.isfinite(float(x))
