"""Residual encoder-decoder segmentation network built from a Plan.

Each encoder stage is two residual blocks (conv - instance norm - ReLU with
a 1x1x1 strided projection when shapes differ); the first block of a stage
carries that stage's downsampling stride. The decoder mirrors the encoder:
a transposed convolution upsamples, the skip feature is concatenated, and
two stride-1 residual blocks follow. Output heads (1x1x1 conv + softmax)
sit on the decoder features of the finest levels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import NonFiniteGradient, ResumeMismatch, ShapeMismatch
from .planner import Plan

IN_EPS = 1e-5


@dataclass(frozen=True)
class Architecture:
    levels: int
    strides: tuple[tuple[int, int, int], ...]   # per level, level 0 == (1,1,1)
    channels: tuple[int, ...]                   # per level
    num_classes: int
    patch_size: tuple[int, int, int]
    ds_outputs: int
    in_channels: int = 1

    @property
    def kernel(self) -> tuple[int, int, int]:
        # Degenerate axes (2D plans have z extent 1) use kernel 1.
        return tuple(3 if p > 1 else 1 for p in self.patch_size)

    def cum_strides(self, level: int) -> tuple[int, int, int]:
        out = [1, 1, 1]
        for s in self.strides[: level + 1]:
            out = [o * x for o, x in zip(out, s)]
        return tuple(out)

    def fingerprint(self) -> str:
        return (
            f"levels={self.levels};strides={self.strides};channels={self.channels};"
            f"classes={self.num_classes};patch={self.patch_size};ds={self.ds_outputs};"
            f"in={self.in_channels}"
        )


def architecture_from_plan(plan: Plan) -> Architecture:
    levels = plan.levels
    channels = tuple(
        min(plan.base_channels * (2 ** i), plan.max_channels) for i in range(levels)
    )
    return Architecture(
        levels=levels,
        strides=tuple(tuple(s) for s in plan.pool_schedule),
        channels=channels,
        num_classes=plan.num_classes,
        patch_size=tuple(plan.patch_size),
        ds_outputs=max(1, levels - 2),
    )


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride, kernel):
        super().__init__()
        padding = tuple(k // 2 for k in kernel)
        self.conv = nn.Conv3d(in_ch, out_ch, kernel, stride=stride, padding=padding, bias=False)
        self.norm = nn.InstanceNorm3d(out_ch, eps=IN_EPS, affine=True)
        if tuple(stride) != (1, 1, 1) or in_ch != out_ch:
            self.proj = nn.Conv3d(in_ch, out_ch, 1, stride=stride, bias=False)
        else:
            self.proj = None
        self.relu = nn.ReLU(inplace=False)

    def forward(self, x):
        y = self.norm(self.conv(x))
        skip = self.proj(x) if self.proj is not None else x
        return self.relu(y + skip)


class SegmentationNet(nn.Module):
    """Forward returns softmax confidence maps, finest level first."""

    def __init__(self, arch: Architecture):
        super().__init__()
        self.arch = arch
        k = arch.kernel
        ch = arch.channels

        stages = []
        prev = arch.in_channels
        for i in range(arch.levels):
            stages.append(nn.Sequential(
                ResidualBlock(prev, ch[i], arch.strides[i], k),
                ResidualBlock(ch[i], ch[i], (1, 1, 1), k),
            ))
            prev = ch[i]
        self.encoder = nn.ModuleList(stages)

        ups = []
        dec = []
        for i in range(arch.levels - 1, 0, -1):
            ups.append(nn.ConvTranspose3d(
                ch[i], ch[i - 1], kernel_size=arch.strides[i], stride=arch.strides[i], bias=False
            ))
            dec.append(nn.Sequential(
                ResidualBlock(2 * ch[i - 1], ch[i - 1], (1, 1, 1), k),
                ResidualBlock(ch[i - 1], ch[i - 1], (1, 1, 1), k),
            ))
        self.ups = nn.ModuleList(ups)
        self.decoder = nn.ModuleList(dec)

        self.heads = nn.ModuleList(
            nn.Conv3d(ch[lvl], arch.num_classes, 1, bias=True)
            for lvl in range(arch.ds_outputs)
        )

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if tuple(x.shape[2:]) != self.arch.patch_size or x.shape[1] != self.arch.in_channels:
            raise ShapeMismatch(
                f"input {tuple(x.shape)} does not match patch {self.arch.patch_size}"
            )
        feats = []
        h = x
        for stage in self.encoder:
            h = stage(h)
            feats.append(h)

        level_out = {self.arch.levels - 1: feats[-1]}
        cur = feats[-1]
        for j, i in enumerate(range(self.arch.levels - 1, 0, -1)):
            cur = self.decoder[j](torch.cat([self.ups[j](cur), feats[i - 1]], dim=1))
            level_out[i - 1] = cur

        outs = []
        for lvl in range(self.arch.ds_outputs):
            logits = self.heads[lvl](level_out[lvl])
            outs.append(torch.softmax(logits, dim=1))
        return outs


def _he_fill(tensor: torch.Tensor, fan_in: int, gen: torch.Generator) -> None:
    std = math.sqrt(2.0 / fan_in)
    sample = torch.randn(tensor.shape, generator=gen, dtype=torch.float64) * std
    with torch.no_grad():
        tensor.copy_(sample.to(tensor.dtype))


def init_params(net: SegmentationNet, seed: int) -> None:
    """He-normal conv kernels, unit norm scales, zero offsets; deterministic."""
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    for module in net.modules():
        if isinstance(module, nn.Conv3d):
            w = module.weight
            _he_fill(w, fan_in=int(w.shape[1] * w.shape[2] * w.shape[3] * w.shape[4]), gen=gen)
            if module.bias is not None:
                with torch.no_grad():
                    module.bias.zero_()
        elif isinstance(module, nn.ConvTranspose3d):
            w = module.weight  # (in, out, kz, ky, kx)
            _he_fill(w, fan_in=int(w.shape[0] * w.shape[2] * w.shape[3] * w.shape[4]), gen=gen)
            if module.bias is not None:
                with torch.no_grad():
                    module.bias.zero_()
        elif isinstance(module, nn.InstanceNorm3d):
            with torch.no_grad():
                module.weight.fill_(1.0)
                module.bias.zero_()


def build_network(arch: Architecture, seed: int, dtype: torch.dtype = torch.float32) -> SegmentationNet:
    net = SegmentationNet(arch)
    net = net.to(dtype)
    init_params(net, seed)
    return net


def gradients(net: SegmentationNet, loss_fn, x: torch.Tensor) -> dict[str, torch.Tensor]:
    """d(loss)/d(theta) for every parameter; loss_fn maps head outputs to a scalar."""
    names, params = zip(*net.named_parameters())
    outputs = net(x)
    loss = loss_fn(outputs)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    out = {}
    for name, p, g in zip(names, params, grads):
        if g is None:
            g = torch.zeros_like(p)
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient in {name}")
        out[name] = g
    return out


def save_params(net: SegmentationNet, path) -> None:
    torch.save({"arch": net.arch.fingerprint(), "state": net.state_dict()}, path)


def load_params(net: SegmentationNet, path) -> None:
    blob = torch.load(path, weights_only=False)
    if blob.get("arch") != net.arch.fingerprint():
        raise ResumeMismatch(
            f"checkpoint architecture {blob.get('arch')!r} != network {net.arch.fingerprint()!r}"
        )
    net.load_state_dict(blob["state"])
