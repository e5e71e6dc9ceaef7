"""SplitNet, RefineNet and the two mask compositions that chain them."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn as nn

from .blocks import S2AM, Down, IResBlock, TaskAttention, Up, count_parameters, init_weights
from .errors import ShapeError

TASKS = ("bg", "mask", "wm")
HEAD_CHANNELS = {"bg": 3, "mask": 1, "wm": 3}


@dataclass
class ArchConfig:
    # 3 blocks per scale in both stages; widths chosen to land near 32.6M parameters
    widths: tuple = (24, 48, 96, 192, 384)
    blocks: int = 3
    refine_blocks: int = 3
    reduction: int = 16
    s2am_levels: str = "coarse"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) < 2:
            raise ValueError("need at least two scales")
        if self.s2am_levels not in ("coarse", "fine"):
            raise ValueError(f"s2am_levels must be 'coarse' or 'fine', got {self.s2am_levels!r}")

    @property
    def multiple(self) -> int:
        return 2 ** (len(self.widths) - 1)

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


class SplitOutputs(NamedTuple):
    bg: torch.Tensor
    mask: torch.Tensor
    wm: torch.Tensor
    # pre-sigmoid mask; lets the BCE keep a gradient where the sigmoid saturates
    mask_logits: torch.Tensor | None = None


def _check_spatial(x: torch.Tensor, channels: int, multiple: int, who: str) -> None:
    if x.dim() != 4 or x.shape[1] != channels:
        raise ShapeError(f"{who}: expected B x {channels} x H x W, got {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h % multiple or w % multiple:
        raise ShapeError(f"{who}: spatial size {h}x{w} is not divisible by {multiple}")


def _stage(in_ch, out_ch, n, role):
    return nn.Sequential(*[IResBlock(in_ch if i == 0 else out_ch, out_ch, role) for i in range(n)])


class Encoder(nn.Module):
    """Stacked iResBlocks per scale, stride-2 conv between scales."""

    def __init__(self, in_ch, widths, blocks):
        super().__init__()
        self.downs = nn.ModuleList()
        self.stages = nn.ModuleList()
        prev = in_ch
        for i, w in enumerate(widths):
            if i > 0:
                self.downs.append(Down(prev, w))
            self.stages.append(_stage(prev if i == 0 else w, w, blocks, "encoder"))
            prev = w

    def forward(self, x):
        feats = []
        for i, stage in enumerate(self.stages):
            if i > 0:
                x = self.downs[i - 1](x)
            x = stage(x)
            feats.append(x)
        return feats


class DecoderLevel(nn.Module):
    """Upsample, concatenate the encoder skip, then a stack of iResBlocks."""

    def __init__(self, in_ch, out_ch, blocks):
        super().__init__()
        self.up = Up(in_ch, out_ch)
        self.body = _stage(2 * out_ch, out_ch, blocks, "decoder")

    def merge(self, x, skip):
        return torch.cat([self.up(x), skip], dim=1)

    def forward(self, x, skip):
        return self.body(self.merge(x, skip))


class SplitNet(nn.Module):
    """Shared encoder, one weight-tied decoder trunk, three attention-gated task streams."""

    def __init__(self, arch: ArchConfig | None = None):
        super().__init__()
        self.arch = arch = arch or ArchConfig()
        widths = arch.widths
        self.encoder = Encoder(3, widths, arch.blocks)
        dec_widths = list(reversed(widths[:-1]))
        ins = list(reversed(widths[1:]))
        # a single trunk object serves every stream, so the weights are tied by construction
        self.trunk = nn.ModuleList(DecoderLevel(i, o, arch.blocks) for i, o in zip(ins, dec_widths))
        self.attention = nn.ModuleList(TaskAttention(w, TASKS, arch.reduction) for w in dec_widths)
        self.heads = nn.ModuleDict({t: nn.Conv2d(widths[0], HEAD_CHANNELS[t], 1) for t in TASKS})
        init_weights(self)

    def features(self, x):
        """Per-task decoder features right before the output heads."""
        _check_spatial(x, 3, self.arch.multiple, "SplitNet")
        skips = self.encoder(x)
        b = x.shape[0]
        n = len(TASKS)
        h = skips[-1]
        for level, (trunk, attn) in enumerate(zip(self.trunk, self.attention)):
            skip = skips[-2 - level]
            if level > 0:
                skip = skip.repeat(n, 1, 1, 1)
            # streams ride along the batch axis through the shared trunk
            h = trunk(h, skip)
            if level == 0:
                h = h.repeat(n, 1, 1, 1)
            h = torch.cat([attn(chunk, t) for chunk, t in zip(h.split(b), TASKS)], dim=0)
        return dict(zip(TASKS, h.split(b)))

    def forward(self, x) -> SplitOutputs:
        feats = self.features(x)
        logits = {t: self.heads[t](feats[t]) for t in TASKS}
        return SplitOutputs(*(torch.sigmoid(logits[t]) for t in TASKS), mask_logits=logits["mask"])


class RefineNet(nn.Module):
    """iResBlock UNet on (coarse image, predicted mask) with two S2AM blocks in the decoder."""

    def __init__(self, arch: ArchConfig | None = None):
        super().__init__()
        self.arch = arch = arch or ArchConfig()
        widths = arch.widths
        self.encoder = Encoder(4, widths, arch.refine_blocks)
        dec_widths = list(reversed(widths[:-1]))
        ins = list(reversed(widths[1:]))
        self.decoder = nn.ModuleList(
            DecoderLevel(i, o, arch.refine_blocks) for i, o in zip(ins, dec_widths)
        )
        n = len(dec_widths)
        levels = (0, 1) if arch.s2am_levels == "coarse" else (n - 2, n - 1)
        self.s2am_levels = tuple(levels)
        self.s2am = nn.ModuleDict({str(i): S2AM(2 * dec_widths[i], arch.reduction) for i in levels})
        self.head = nn.Conv2d(widths[0], 3, 1)
        init_weights(self)

    def forward(self, coarse, mask):
        if mask.shape[0] != coarse.shape[0] or mask.shape[1] != 1 or mask.shape[-2:] != coarse.shape[-2:]:
            raise ShapeError(f"RefineNet: mask {tuple(mask.shape)} does not match image {tuple(coarse.shape)}")
        x = torch.cat([coarse, mask], dim=1)
        _check_spatial(x, 4, self.arch.multiple, "RefineNet")
        skips = self.encoder(x)
        h = skips[-1]
        for level, dec in enumerate(self.decoder):
            h = dec.merge(h, skips[-2 - level])
            if str(level) in self.s2am:
                h = self.s2am[str(level)](h, mask)
            h = dec.body(h)
        return torch.sigmoid(self.head(h))


def _compose(pred, image, mask, who):
    if pred.shape != image.shape:
        raise ShapeError(f"{who}: prediction {tuple(pred.shape)} vs input {tuple(image.shape)}")
    if mask.dim() != 4 or mask.shape[1] != 1 or mask.shape[0] != image.shape[0] or mask.shape[-2:] != image.shape[-2:]:
        raise ShapeError(f"{who}: mask {tuple(mask.shape)} does not match {tuple(image.shape)}")
    return pred * mask + image * (1.0 - mask)


def compose_coarse(image, outputs: SplitOutputs):
    """I_coarse = F_bg(I) * F_m(I) + I * (1 - F_m(I))."""
    return _compose(outputs.bg, image, outputs.mask, "compose_coarse")


def compose_final(image, refined, mask):
    """I_final = R * F_m(I) + I * (1 - F_m(I))."""
    return _compose(refined, image, mask, "compose_final")


class PipelineOutputs(NamedTuple):
    outputs: SplitOutputs
    coarse: torch.Tensor
    refined: torch.Tensor
    final: torch.Tensor


class WatermarkRemover(nn.Module):
    """SplitNet followed by RefineNet, trained end to end."""

    def __init__(self, arch: ArchConfig | None = None):
        super().__init__()
        self.arch = arch or ArchConfig()
        self.split = SplitNet(self.arch)
        self.refine = RefineNet(self.arch)

    def forward(self, image) -> PipelineOutputs:
        return pipeline_forward(image, self.split, self.refine)


def pipeline_forward(image, split: SplitNet, refine: RefineNet) -> PipelineOutputs:
    outs = split(image)
    coarse = compose_coarse(image, outs)
    refined = refine(coarse, outs.mask)
    final = compose_final(image, refined, outs.mask)
    return PipelineOutputs(outs, coarse, refined, final)


def summary(model: WatermarkRemover) -> dict:
    split = count_parameters(model.split)
    refine = count_parameters(model.refine)
    return {
        "arch": model.arch.to_dict(),
        "splitnet": split,
        "splitnet_encoder": count_parameters(model.split.encoder),
        "splitnet_trunk": count_parameters(model.split.trunk),
        "splitnet_task_specific": count_parameters(model.split.attention) + count_parameters(model.split.heads),
        "refinenet": refine,
        "total": split + refine,
    }
