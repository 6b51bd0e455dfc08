"""Multi-scale backbone stub and the pyramid: lateral 1x1 projections,
top-down upsample-and-add, and per-level spatial-context fusion with
L2 normalization and channel compression."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import config
from .srnn import IrnnWeights, SrnnConfig, create_srnn_weights, srnn_module
from .tensor import (ConvWeights, ShapeError, Tensor4, add, channel_l2norm_scale,
                     concat_channels, conv, relu, slice_channels,
                     upsample2x_nearest)

STRIDES = (4, 8, 16, 32)


@dataclass
class BackboneConfig:
    widths: tuple = (16, 32, 64, 128)
    in_channels: int = 1

    def __post_init__(self):
        if len(self.widths) != 4:
            raise ValueError(f"backbone needs exactly 4 stages, got {self.widths}")
        if self.in_channels not in (1, 3):
            raise ValueError(f"in_channels must be 1 or 3, got {self.in_channels}")


@dataclass
class StageWeights:
    down: ConvWeights   # 3x3 stride-2 entry conv
    conv1: ConvWeights  # residual inner 3x3
    conv2: ConvWeights


@dataclass
class BackboneWeights:
    stem: ConvWeights          # 3x3 stride-2, in_channels -> widths[0]
    stages: list[StageWeights]

    @classmethod
    def create(cls, cfg: BackboneConfig, rng: np.random.Generator,
               dtype=np.float32) -> "BackboneWeights":
        stem = ConvWeights.create(cfg.widths[0], cfg.in_channels, 3, rng, dtype)
        stages = []
        prev = cfg.widths[0]
        for w in cfg.widths:
            stages.append(StageWeights(
                down=ConvWeights.create(w, prev, 3, rng, dtype),
                conv1=ConvWeights.create(w, w, 3, rng, dtype),
                conv2=ConvWeights.create(w, w, 3, rng, dtype),
            ))
            prev = w
        return cls(stem=stem, stages=stages)

    def params(self, prefix: str = "backbone") -> dict[str, Tensor4]:
        out = {f"{prefix}.stem.kernel": self.stem.kernel,
               f"{prefix}.stem.bias": self.stem.bias}
        for i, st in enumerate(self.stages):
            for nm, cw in (("down", st.down), ("conv1", st.conv1), ("conv2", st.conv2)):
                out[f"{prefix}.stage{i}.{nm}.kernel"] = cw.kernel
                out[f"{prefix}.stage{i}.{nm}.bias"] = cw.bias
        return out


def residual_block(x: Tensor4, conv1: ConvWeights, conv2: ConvWeights) -> Tensor4:
    return add(x, conv(relu(conv(x, conv1)), conv2))


def backbone_forward(image: Tensor4, weights: BackboneWeights) -> list[Tensor4]:
    """Four stage maps at strides 4, 8, 16, 32."""
    n, c, h, w = image.dims
    if h % 32 or w % 32:
        raise ShapeError(
            f"image dims {h}x{w} must be divisible by 32; pad the input")
    if c != weights.stem.c_in:
        raise ShapeError(f"image has {c} channels, stem expects {weights.stem.c_in}")
    x = conv(image, weights.stem, stride=2)
    stages = []
    for st in weights.stages:
        x = conv(x, st.down, stride=2)
        x = residual_block(x, st.conv1, st.conv2)
        stages.append(x)
    return stages


@dataclass
class FeaturePyramid:
    """Ordered (stride, map) levels, finest to coarsest, uniform channel width."""

    levels: list[tuple[int, Tensor4]]

    def __post_init__(self):
        strides = [s for s, _ in self.levels]
        if strides != sorted(strides) or len(set(strides)) != len(strides):
            raise ValueError(f"strides must be strictly increasing, got {strides}")
        widths = {t.dims[1] for _, t in self.levels}
        if len(widths) > 1:
            raise ValueError(f"pyramid width not uniform: {widths}")

    @property
    def width(self) -> int:
        return self.levels[0][1].dims[1]

    def maps(self) -> list[Tensor4]:
        return [t for _, t in self.levels]


def build_pyramid(stages: list[Tensor4],
                  laterals: list[ConvWeights]) -> FeaturePyramid:
    """Semantic branch: lateral 1x1 per stage, then coarse-to-fine
    upsample-and-add."""
    if len(stages) != 4 or len(laterals) != 4:
        raise ShapeError(f"expected 4 stages/laterals, got {len(stages)}/{len(laterals)}")
    lat = [conv(s, lw) for s, lw in zip(stages, laterals)]
    merged = [None] * 4
    merged[3] = lat[3]
    for k in (2, 1, 0):
        up = upsample2x_nearest(merged[k + 1])
        if up.dims != lat[k].dims:
            raise ShapeError(
                f"top-down spatial mismatch at level {k}: {up.dims} vs {lat[k].dims}")
        merged[k] = add(lat[k], up)
    return FeaturePyramid(list(zip(STRIDES, merged)))


def fuse_context(semantic: Tensor4, context: Tensor4, gamma: Tensor4,
                 compress: ConvWeights) -> Tensor4:
    """Normalize each branch to unit channel L2 with its own learned scale,
    concat, then compress with a 1x1 conv.

    The branches are normalized separately because their raw amplitudes
    differ by an order of magnitude (the recurrent sweeps accumulate along
    whole rows/columns); amplitude matching is what the normalization step
    is for."""
    p = semantic.dims[1]
    if context.dims[1] != p or gamma.dims[1] != 2 * p:
        raise ShapeError(
            f"fuse channel mismatch: semantic {semantic.dims}, context "
            f"{context.dims}, gamma {gamma.dims}")
    g_sem = slice_channels(gamma, 0, p)
    g_ctx = slice_channels(gamma, p, 2 * p)
    cat = concat_channels([channel_l2norm_scale(semantic, g_sem),
                           channel_l2norm_scale(context, g_ctx)])
    return conv(cat, compress)


@dataclass
class FpnWeights:
    backbone: BackboneWeights
    laterals: list[ConvWeights]          # stage width -> P
    srnn: list[list[IrnnWeights]]        # per level, per round
    gammas: list[Tensor4]                # (1, 2P, 1, 1) each
    compress: list[ConvWeights]          # 2P -> P
    srnn_cfg: SrnnConfig = field(default_factory=SrnnConfig)

    @classmethod
    def create(cls, backbone_cfg: BackboneConfig, pyramid_width: int,
               srnn_cfg: SrnnConfig, rng: np.random.Generator,
               dtype=np.float32) -> "FpnWeights":
        backbone = BackboneWeights.create(backbone_cfg, rng, dtype)
        p = pyramid_width
        laterals = [ConvWeights.create(p, w, 1, rng, dtype)
                    for w in backbone_cfg.widths]
        srnn = []
        for w in backbone_cfg.widths:
            cfg = SrnnConfig(rounds=srnn_cfg.rounds,
                             c_hid=srnn_cfg.c_hid or w, c_out=p)
            srnn.append(create_srnn_weights(w, cfg, rng, dtype))
        gammas = [Tensor4(np.ones((1, 2 * p, 1, 1), dtype=dtype)) for _ in range(4)]
        compress = [ConvWeights.create(p, 2 * p, 1, rng, dtype) for _ in range(4)]
        return cls(backbone=backbone, laterals=laterals, srnn=srnn,
                   gammas=gammas, compress=compress, srnn_cfg=srnn_cfg)

    def params(self, prefix: str = "fpn") -> dict[str, Tensor4]:
        out = self.backbone.params(f"{prefix}.backbone")
        for i in range(4):
            out[f"{prefix}.lateral{i}.kernel"] = self.laterals[i].kernel
            out[f"{prefix}.lateral{i}.bias"] = self.laterals[i].bias
            out[f"{prefix}.gamma{i}"] = self.gammas[i]
            out[f"{prefix}.compress{i}.kernel"] = self.compress[i].kernel
            out[f"{prefix}.compress{i}.bias"] = self.compress[i].bias
            for r, w in enumerate(self.srnn[i]):
                out.update(w.params(f"{prefix}.srnn{i}.round{r}"))
        return out


def extract(image: Tensor4, weights: FpnWeights,
            srnn_enabled: bool = True) -> FeaturePyramid:
    """Backbone -> {lateral, context} per stage -> top-down merge -> fuse."""
    stages = backbone_forward(image, weights.backbone)
    semantic = build_pyramid(stages, weights.laterals)
    fused = []
    for k, (stride, sem) in enumerate(semantic.levels):
        if srnn_enabled:
            cfg = SrnnConfig(rounds=weights.srnn_cfg.rounds,
                             c_hid=weights.srnn[k][0].input_proj.c_out,
                             c_out=sem.dims[1])
            ctx = srnn_module(stages[k], cfg, weights.srnn[k])
        else:
            ctx = Tensor4(np.zeros_like(sem.data))
        fused.append(fuse_context(sem, ctx, weights.gammas[k], weights.compress[k]))
    return FeaturePyramid(list(zip(STRIDES, fused)))
