"""Differentiable building blocks shared by SplitNet and RefineNet."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError

LEAKY_SLOPE = 0.2


def count_parameters(module: nn.Module) -> int:
    # named_parameters() yields a tied tensor once, so shared trunks count once
    return sum(p.numel() for p in module.parameters())


def init_weights(module: nn.Module) -> None:
    """Kaiming-uniform convolutions, zero biases (attention biases included).

    3x3 convs feed a norm + rectifier and get the ReLU gain. 1x1 convs
    (fusions, projections, heads, SE layers) are linear maps and get unit
    gain; with the ReLU gain, activations grow through the unnormalized
    fusions and the sigmoid heads saturate at initialization.
    """
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            gain = "linear" if m.kernel_size == (1, 1) else "relu"
            nn.init.kaiming_uniform_(m.weight, nonlinearity=gain)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def _check_channels(x: torch.Tensor, expected: int, who: str) -> None:
    if x.dim() != 4 or x.shape[1] != expected:
        raise ShapeError(f"{who}: expected B x {expected} x H x W, got {tuple(x.shape)}")


class InstanceNorm(nn.Module):
    """Per-sample, per-channel normalization with a learnable affine.

    Written out instead of nn.InstanceNorm2d because the latter refuses
    1x1 feature maps, which a 16x16 input produces at the bottleneck.
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        mean = x.mean(dim=(2, 3), keepdim=True)
        var = x.var(dim=(2, 3), unbiased=False, keepdim=True)
        x = (x - mean) * torch.rsqrt(var + self.eps)
        return x * self.weight[None, :, None, None] + self.bias[None, :, None, None]


class SEBlock(nn.Module):
    """Squeeze-and-excitation channel gate: x * sigmoid(W2 relu(W1 gap(x)))."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        self.channels = channels
        hidden = max(channels // reduction, 1)
        self.fc1 = nn.Conv2d(channels, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, channels, 1)

    def logits(self, x):
        _check_channels(x, self.channels, "SEBlock")
        s = x.mean(dim=(2, 3), keepdim=True)
        return self.fc2(F.relu(self.fc1(s)))

    def gate(self, x):
        return torch.sigmoid(self.logits(x))

    def forward(self, x):
        return x * self.gate(x)


class TaskAttention(nn.Module):
    """One untied SE gate per task, applied to a shared basis feature."""

    def __init__(self, channels: int, tasks=("bg", "mask", "wm"), reduction: int = 16):
        super().__init__()
        self.tasks = tuple(tasks)
        self.gates = nn.ModuleDict({t: SEBlock(channels, reduction) for t in self.tasks})

    def forward(self, basis, task: str):
        return self.gates[task](basis)


class IResBlock(nn.Module):
    """Improved residual block.

    conv3x3 -> IN -> act, twice; the post-activation feature is concatenated
    with the (1x1-projected) input and fused back to ``out_ch`` by a 1x1
    conv. Encoder blocks use ReLU, decoder blocks LeakyReLU(0.2).
    """

    def __init__(self, in_ch: int, out_ch: int, role: str = "encoder"):
        super().__init__()
        if role not in ("encoder", "decoder"):
            raise ValueError(f"role must be 'encoder' or 'decoder', got {role!r}")
        self.in_ch, self.out_ch, self.role = in_ch, out_ch, role
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm1 = InstanceNorm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm2 = InstanceNorm(out_ch)
        self.proj = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        self.fuse = nn.Conv2d(2 * out_ch, out_ch, 1)

    def act(self, x):
        if self.role == "encoder":
            return F.relu(x)
        return F.leaky_relu(x, LEAKY_SLOPE)

    def forward(self, x):
        _check_channels(x, self.in_ch, "IResBlock")
        h = self.act(self.norm1(self.conv1(x)))
        h = self.act(self.norm2(self.conv2(h)))
        return self.fuse(torch.cat([h, self.proj(x)], dim=1))


def resize_mask(mask: torch.Tensor, size) -> torch.Tensor:
    """Bilinear (soft) resampling of a B x 1 x H x W mask to ``size``."""
    if tuple(mask.shape[-2:]) == tuple(size):
        return mask
    return F.interpolate(mask, size=tuple(size), mode="bilinear", align_corners=False)


class S2AM(nn.Module):
    """Mask-guided spatial-separated attention.

    F' = G_mix(x) * x;  out = M * G_fg(F') * F' + (1 - M) * G_bg(F') * F'
    """

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        self.channels = channels
        self.mix = SEBlock(channels, reduction)
        self.fg = SEBlock(channels, reduction)
        self.bg = SEBlock(channels, reduction)

    def forward(self, x, mask):
        _check_channels(x, self.channels, "S2AM")
        if mask.dim() != 4 or mask.shape[1] != 1 or mask.shape[0] != x.shape[0]:
            raise ShapeError(f"S2AM: mask must be B x 1 x H x W, got {tuple(mask.shape)}")
        m = resize_mask(mask, x.shape[-2:])
        f = self.mix(x)
        return m * self.fg(f) + (1.0 - m) * self.bg(f)


class Down(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Up(nn.Module):
    """Bilinear x2 followed by a 3x3 conv."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.conv(x)
