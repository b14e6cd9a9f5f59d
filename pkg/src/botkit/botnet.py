"""BoTNet-50: a ResNet-50 whose last stage swaps 3x3 convolutions for MHSA."""

from __future__ import annotations

from dataclasses import dataclass, fields
from fractions import Fraction
from typing import Optional

import numpy as np

from . import functional as F
from .attention import MhsaConfig, MhsaLayer
from .nn import BatchNorm2d, Conv2d, Linear, Module, ModuleList
from .tensor import Tensor

EXPANSION = 4
STAGE_NAMES = ("c2", "c3", "c4", "c5")


@dataclass(frozen=True)
class BottleneckSpec:
    in_channels: int
    mid_channels: int
    out_channels: int
    spatial_op: str = "conv3x3"  # or "mhsa"
    stride: int = 1
    has_projection_shortcut: bool = False

    def __post_init__(self):
        if self.out_channels != EXPANSION * self.mid_channels:
            raise ValueError(
                f"out_channels ({self.out_channels}) must be {EXPANSION} x mid_channels ({self.mid_channels})"
            )
        if self.spatial_op not in ("conv3x3", "mhsa"):
            raise ValueError(f"unknown spatial_op {self.spatial_op!r}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")


@dataclass(frozen=True)
class BotNet50Config:
    stage_depths: tuple = (3, 4, 6, 3)
    stage_mid_channels: tuple = (64, 128, 256, 512)
    stem_channels: int = 64
    mhsa_stage: str = "c5"
    heads: int = 8
    num_classes: int = 2
    input_size: int = 224
    in_channels: int = 3
    width_multiplier: Fraction = Fraction(1)
    use_value_relative: bool = False
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "width_multiplier", Fraction(self.width_multiplier))
        object.__setattr__(self, "stage_depths", tuple(int(d) for d in self.stage_depths))
        object.__setattr__(self, "stage_mid_channels", tuple(int(c) for c in self.stage_mid_channels))
        if len(self.stage_depths) != 4 or len(self.stage_mid_channels) != 4:
            raise ValueError("expected four stages (c2..c5)")
        if self.input_size % 32:
            raise ValueError(f"input_size must be divisible by 32, got {self.input_size}")
        if self.mhsa_stage not in STAGE_NAMES:
            raise ValueError(f"mhsa_stage must be one of {STAGE_NAMES}")
        if self.width_multiplier <= 0:
            raise ValueError("width_multiplier must be positive")
        self.scaled(self.stem_channels)
        for c in self.stage_mid_channels:
            self.scaled(c)
        mid = self.scaled(self.stage_mid_channels[STAGE_NAMES.index(self.mhsa_stage)])
        MhsaConfig(mid, self.heads)

    def scaled(self, channels: int) -> int:
        value = Fraction(channels) * self.width_multiplier
        if value.denominator != 1 or value < 1:
            raise ValueError(
                f"width_multiplier {self.width_multiplier} gives non-integer channel count {value} from {channels}"
            )
        return int(value)

    def stage_sizes(self) -> list[int]:
        """Spatial output sizes of c1..c5."""
        return [self.input_size // 2**k for k in range(1, 6)]

    def to_metadata(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            out[f"model.{f.name}"] = str(v)
        return out

    @classmethod
    def from_metadata(cls, meta: dict[str, str]) -> "BotNet50Config":
        kwargs = {}
        for f in fields(cls):
            key = f"model.{f.name}"
            if key not in meta:
                continue
            raw = meta[key]
            if f.name in ("stage_depths", "stage_mid_channels"):
                kwargs[f.name] = tuple(int(x) for x in raw.split(","))
            elif f.name == "width_multiplier":
                kwargs[f.name] = Fraction(raw)
            elif f.name == "use_value_relative":
                kwargs[f.name] = raw == "True"
            elif f.name in ("mhsa_stage", "dtype"):
                kwargs[f.name] = raw
            else:
                kwargs[f.name] = int(raw)
        return cls(**kwargs)


class Stem(Module):
    def __init__(self, in_ch, out_ch, rng, dtype):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, 7, stride=2, padding=3, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(out_ch, dtype=dtype)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class Bottleneck(Module):
    """1x1 reduce -> spatial op -> 1x1 expand, plus a shortcut; ReLU after the sum.

    For ``spatial_op == "mhsa"`` the attention runs at the input resolution and a
    2x2 average pool follows it when the block downsamples.
    """

    def __init__(self, spec: BottleneckSpec, rng, dtype=np.float64, heads=8, fmap_size=None, use_value_relative=False):
        super().__init__()
        self.spec = spec
        mid = spec.mid_channels
        self.conv1 = Conv2d(spec.in_channels, mid, 1, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(mid, dtype=dtype)
        if spec.spatial_op == "mhsa":
            if fmap_size is None:
                raise ValueError("an MHSA block needs the feature-map size to size its offset tables")
            cfg = MhsaConfig(mid, heads, use_value_relative)
            self.mhsa = MhsaLayer(cfg, fmap_size, fmap_size, rng=rng, dtype=dtype)
        else:
            self.conv2 = Conv2d(mid, mid, 3, stride=spec.stride, padding=1, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(mid, dtype=dtype)
        self.conv3 = Conv2d(mid, spec.out_channels, 1, rng=rng, dtype=dtype)
        self.bn3 = BatchNorm2d(spec.out_channels, dtype=dtype)
        if spec.has_projection_shortcut:
            self.proj = Conv2d(spec.in_channels, spec.out_channels, 1, stride=spec.stride, rng=rng, dtype=dtype)
            self.proj_bn = BatchNorm2d(spec.out_channels, dtype=dtype)

    def forward(self, x):
        return bottleneck_forward(x, self)


def bottleneck_forward(x, block: Bottleneck) -> Tensor:
    """H(x) = relu(F(x) + shortcut(x)) for conv and BoT blocks alike."""
    spec = block.spec
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"block expects {spec.in_channels} input channels, got {x.shape[1]}")
    out = F.relu(block.bn1(block.conv1(x)))
    if spec.spatial_op == "mhsa":
        out = block.mhsa(out)
        if spec.stride == 2:
            out = F.avg_pool2d(out, 2, 2)
    else:
        out = block.conv2(out)
    out = F.relu(block.bn2(out))
    out = block.bn3(block.conv3(out))
    shortcut = block.proj_bn(block.proj(x)) if spec.has_projection_shortcut else x
    if out.shape != shortcut.shape:
        raise ValueError(f"residual branch shape {out.shape} does not match shortcut shape {shortcut.shape}")
    return F.relu(out + shortcut)


bot_block_forward = bottleneck_forward


class BotNet(Module):
    def __init__(self, config: BotNet50Config, seed: int = 0):
        super().__init__()
        self.config = config
        dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(seed)
        stem = config.scaled(config.stem_channels)
        self.c1 = Stem(config.in_channels, stem, rng, dtype)

        in_ch = stem
        size = config.input_size // 4  # after stem + max pool
        for idx, name in enumerate(STAGE_NAMES):
            mid = config.scaled(config.stage_mid_channels[idx])
            out_ch = EXPANSION * mid
            attn = name == config.mhsa_stage
            blocks = ModuleList()
            for b in range(config.stage_depths[idx]):
                stride = 2 if (b == 0 and idx > 0) else 1
                spec = BottleneckSpec(
                    in_channels=in_ch,
                    mid_channels=mid,
                    out_channels=out_ch,
                    spatial_op="mhsa" if attn else "conv3x3",
                    stride=stride,
                    has_projection_shortcut=(in_ch != out_ch or stride != 1),
                )
                blocks.append(
                    Bottleneck(spec, rng, dtype, config.heads, fmap_size=size, use_value_relative=config.use_value_relative)
                )
                in_ch = out_ch
                size //= stride
            setattr(self, name, blocks)
        self.fc = Linear(in_ch, config.num_classes, rng=rng, dtype=dtype)

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def stages(self):
        return [getattr(self, n) for n in STAGE_NAMES]

    def mhsa_layers(self) -> list[MhsaLayer]:
        return [m for m in self.modules() if isinstance(m, MhsaLayer)]

    def freeze_bn_stats(self, frozen: bool = True) -> None:
        for m in self.modules():
            if isinstance(m, BatchNorm2d):
                m.freeze_stats = frozen

    def forward(self, x, return_stages: bool = False):
        cfg = self.config
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        expected = (cfg.in_channels, cfg.input_size, cfg.input_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ValueError(f"expected input (N, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}")
        feats = {}
        h = self.c1(x)
        feats["c1"] = h
        h = F.max_pool2d(h, 3, 2, padding=1)
        for name in STAGE_NAMES:
            for block in getattr(self, name):
                h = block(h)
            feats[name] = h
        logits = self.fc(F.global_avg_pool(h))
        if return_stages:
            return logits, feats
        return logits


def build_botnet50(config: Optional[BotNet50Config] = None, seed: int = 0) -> BotNet:
    return BotNet(config or BotNet50Config(), seed=seed)


def forward(model: BotNet, batch) -> Tensor:
    return model(batch)


def replicate_channels(slices: np.ndarray, channels: int = 3) -> np.ndarray:
    """(N, H, W) grayscale -> (N, channels, H, W)."""
    slices = np.asarray(slices)
    return np.repeat(slices[:, None, :, :], channels, axis=1)
