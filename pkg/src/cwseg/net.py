"""Three-stage fully convolutional segmentation network with skip heads.

The topology is fixed. Stage 1 runs three conv-conv-pool blocks down to
stride 8 and ends in the 1x1 head ``score_pool3``; stage 2 is one more block
to stride 16 ending in ``score_pool4``; stage 3 is a final block to stride
32 whose second conv is a wide 7x7 classifier layer, ending in the 1x1 head
``score_fr``. Score maps are fused skip-style: upsample the deepest map by
2, add the cropped stride-16 map, upsample by 2, add the cropped stride-8
map, then upsample by 8 back to input resolution.

Stage 3 deliberately carries roughly half of the per-frame multiply
-accumulates (the 7x7 classifier conv), which is what makes gating it
worthwhile for the clockwork scheduler.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import ContractError, ShapeError
from .tensor_ops import (
    ConvParams,
    Tensor,
    add,
    as_chw,
    conv2d,
    crop_center,
    maxpool2d,
    relu,
    upsample_bilinear,
)


class StageId(enum.IntEnum):
    """The three schedulable stages, ordered shallow to deep."""

    STAGE1 = 1
    STAGE2 = 2
    STAGE3 = 3

    @property
    def label(self) -> str:
        return f"stage{int(self)}"


@dataclass(frozen=True)
class NetConfig:
    """Structural parameters of the toy network.

    Input height/width must be divisible by 32 (five 2x2 pools); the network
    built for a config only accepts frames of exactly that size.
    """

    in_channels: int = 3
    num_classes: int = 2
    base_width: int = 8
    height: int = 64
    width: int = 64

    def __post_init__(self):
        if self.in_channels < 1:
            raise ShapeError("in_channels must be positive")
        if self.num_classes < 2:
            raise ShapeError("num_classes must be at least 2")
        if self.base_width < 1:
            raise ShapeError("base_width must be positive")
        for name, v in (("height", self.height), ("width", self.width)):
            if v < 32 or v % 32 != 0:
                raise ShapeError(f"{name} must be a positive multiple of 32, got {v}")


class LayerSpec(NamedTuple):
    name: str
    stage: StageId
    in_channels: int
    out_channels: int
    kernel: int
    pad: int


def layer_specs(cfg: NetConfig) -> tuple[LayerSpec, ...]:
    """The fixed layer list, widths derived from ``cfg.base_width``."""
    w, c = cfg.base_width, cfg.num_classes
    s1, s2, s3 = StageId.STAGE1, StageId.STAGE2, StageId.STAGE3
    return (
        LayerSpec("conv1_1", s1, cfg.in_channels, w, 3, 1),
        LayerSpec("conv1_2", s1, w, w, 3, 1),
        LayerSpec("conv2_1", s1, w, 2 * w, 3, 1),
        LayerSpec("conv2_2", s1, 2 * w, 2 * w, 3, 1),
        LayerSpec("conv3_1", s1, 2 * w, 4 * w, 3, 1),
        LayerSpec("conv3_2", s1, 4 * w, 4 * w, 3, 1),
        LayerSpec("score_pool3", s1, 4 * w, c, 1, 0),
        LayerSpec("conv4_1", s2, 4 * w, 8 * w, 3, 1),
        LayerSpec("conv4_2", s2, 8 * w, 8 * w, 3, 1),
        LayerSpec("score_pool4", s2, 8 * w, c, 1, 0),
        LayerSpec("conv5_1", s3, 8 * w, 8 * w, 3, 1),
        # fc6-like wide classifier conv; the bulk of stage-3 compute
        LayerSpec("conv5_2", s3, 8 * w, 32 * w, 7, 3),
        LayerSpec("score_fr", s3, 32 * w, c, 1, 0),
    )


LAYER_NAMES: tuple[str, ...] = tuple(s.name for s in layer_specs(NetConfig()))
LAYER_STAGE: dict[str, StageId] = {s.name: s.stage for s in layer_specs(NetConfig())}


@dataclass(frozen=True)
class StagedNet:
    """Validated, immutable network: config plus per-layer parameters."""

    cfg: NetConfig
    layers: dict[str, ConvParams]


@dataclass(frozen=True)
class StageOutputs:
    """Everything a full forward pass produces, including the intermediates
    the scheduler persists across frames."""

    pool3_features: Tensor
    score_pool3: Tensor
    pool4_features: Tensor
    score_pool4: Tensor
    score_fr: Optional[Tensor]
    final_scores: Tensor


class WorkCounter:
    """Tallies convolution invocations and multiply-accumulate counts.

    Keys are layer names; aggregate per stage via ``stage_convs`` /
    ``stage_macs``. Counting happens at the conv2d call sites, so totals
    reflect work actually executed.
    """

    def __init__(self):
        self.convs: dict[str, int] = {}
        self.macs: dict[str, int] = {}

    def record(self, layer: str, macs: int) -> None:
        self.convs[layer] = self.convs.get(layer, 0) + 1
        self.macs[layer] = self.macs.get(layer, 0) + macs

    def _by_stage(self, per_layer: dict[str, int]) -> dict[str, int]:
        out: dict[str, int] = {}
        for name, n in per_layer.items():
            label = LAYER_STAGE[name].label
            out[label] = out.get(label, 0) + n
        return out

    def stage_convs(self) -> dict[str, int]:
        return self._by_stage(self.convs)

    def stage_macs(self) -> dict[str, int]:
        return self._by_stage(self.macs)

    def total_macs(self) -> int:
        return sum(self.macs.values())


def build_net(cfg: NetConfig, weights: dict[str, np.ndarray]) -> StagedNet:
    """Assemble and validate a network from a weight store.

    The store must hold, for every topology layer, a weight entry under the
    layer name and a bias entry under ``<name>.bias``, with shapes matching
    the fixed layer list.
    """
    layers: dict[str, ConvParams] = {}
    for spec in layer_specs(cfg):
        for key in (spec.name, spec.name + ".bias"):
            if key not in weights:
                raise ContractError(f"weight store is missing entry '{key}'")
        w = np.asarray(weights[spec.name], dtype=np.float32)
        expected = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
        if w.shape != expected:
            raise ShapeError(
                f"layer '{spec.name}': weight shape {w.shape}, expected {expected}"
            )
        b = np.asarray(weights[spec.name + ".bias"], dtype=np.float32)
        if b.shape != (spec.out_channels,):
            raise ShapeError(
                f"layer '{spec.name}': bias shape {b.shape}, expected "
                f"({spec.out_channels},)"
            )
        layers[spec.name] = ConvParams(
            out_channels=spec.out_channels,
            in_channels=spec.in_channels,
            kernel_h=spec.kernel,
            kernel_w=spec.kernel,
            weights=w,
            bias=b,
            stride=1,
            pad=spec.pad,
        )
    return StagedNet(cfg=cfg, layers=layers)


def _conv(net: StagedNet, name: str, x: Tensor, work: Optional[WorkCounter]) -> Tensor:
    p = net.layers[name]
    out = conv2d(x, p)
    if work is not None:
        work.record(name, out.size * p.in_channels * p.kernel_h * p.kernel_w)
    return out


def _check_input(net: StagedNet, x: Tensor, channels: int, h: int, w: int, what: str) -> Tensor:
    x = as_chw(x)
    expected = (channels, h, w)
    if x.shape != expected:
        raise ShapeError(f"{what}: expected shape {expected}, got {x.shape}")
    return x


def run_stage1(net, frame: Tensor, work: WorkCounter | None = None):
    """Run the shallow stage: three blocks to stride 8 plus score_pool3.

    Returns (pool3_features, score_pool3).
    """
    cfg = net.cfg
    x = _check_input(net, frame, cfg.in_channels, cfg.height, cfg.width, "frame")
    for pair in (("conv1_1", "conv1_2"), ("conv2_1", "conv2_2"), ("conv3_1", "conv3_2")):
        for name in pair:
            x = relu(_conv(net, name, x, work))
        x = maxpool2d(x, 2, 2)
    return x, _conv(net, "score_pool3", x, work)


def run_stage2(net, pool3_features: Tensor, work: WorkCounter | None = None):
    """Run the middle stage to stride 16; returns (pool4_features, score_pool4)."""
    cfg = net.cfg
    x = _check_input(
        net, pool3_features, 4 * cfg.base_width, cfg.height // 8, cfg.width // 8,
        "pool3_features",
    )
    for name in ("conv4_1", "conv4_2"):
        x = relu(_conv(net, name, x, work))
    x = maxpool2d(x, 2, 2)
    return x, _conv(net, "score_pool4", x, work)


def run_stage3(net, pool4_features: Tensor, work: WorkCounter | None = None) -> Tensor:
    """Run the deep stage to stride 32; returns score_fr."""
    cfg = net.cfg
    x = _check_input(
        net, pool4_features, 8 * cfg.base_width, cfg.height // 16, cfg.width // 16,
        "pool4_features",
    )
    x = relu(_conv(net, "conv5_1", x, work))
    x = relu(_conv(net, "conv5_2", x, work))
    x = maxpool2d(x, 2, 2)
    return _conv(net, "score_fr", x, work)


def fuse_and_upsample(net, score_fr: Tensor, score_pool4: Tensor,
                      score_pool3: Tensor) -> Tensor:
    """Skip-fuse the three score maps up to full input resolution."""
    c = net.cfg.num_classes
    for name, t in (("score_fr", score_fr), ("score_pool4", score_pool4),
                    ("score_pool3", score_pool3)):
        t = as_chw(t)
        if t.shape[0] != c:
            raise ShapeError(f"{name}: expected {c} class channels, got {t.shape[0]}")
    u = upsample_bilinear(score_fr, 2)
    u = add(u, crop_center(score_pool4, u.shape[1], u.shape[2]))
    u = upsample_bilinear(u, 2)
    u = add(u, crop_center(score_pool3, u.shape[1], u.shape[2]))
    return upsample_bilinear(u, 8)


def full_forward(net, frame: Tensor, work: WorkCounter | None = None) -> StageOutputs:
    """Run all three stages plus fusion; returns every intermediate."""
    pool3, score3 = run_stage1(net, frame, work)
    pool4, score4 = run_stage2(net, pool3, work)
    score_fr = run_stage3(net, pool4, work)
    final = fuse_and_upsample(net, score_fr, score4, score3)
    return StageOutputs(
        pool3_features=pool3,
        score_pool3=score3,
        pool4_features=pool4,
        score_pool4=score4,
        score_fr=score_fr,
        final_scores=final,
    )


def argmax_mask(final_scores: Tensor) -> np.ndarray:
    """Per-pixel index of the max-scoring class; ties go to the lowest index."""
    scores = as_chw(final_scores)
    return np.argmax(scores, axis=0)
