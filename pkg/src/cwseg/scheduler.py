"""Clockwork scheduling: per-frame decisions about which network stages run,
persistence of deep scores across frames, and execution traces.

Firing rules. Frame 0 always runs everything. Afterwards:

* ``Always``     - all three stages, every frame (the oracle arm).
* ``Fixed``      - stage 2 fires when ``index % period2 == 0``; stage 3 when
                   ``index % period3 == 0`` and stage 2 fired (prefix rule).
* ``Adaptive``   - stage 2 always fires (its output is the change signal);
                   stage 3 fires when ``change > theta``, where change is the
                   mean absolute difference between the fresh score_pool4 and
                   ``prev_score``, the copy saved at the last stage-3 firing.

The comparison is strict, so a huge theta means "never refire" and a negative
theta means "fire every frame" exactly. Stage 1 is never gated.

When stage 3 is skipped the skip policy decides the output: ``ReuseFinal``
returns the mask of the cached final scores unchanged; ``FuseCachedDeep``
re-runs the fusion chain with the cached score_fr and the freshest available
score_pool4/score_pool3 (score_pool3 is always fresh). ``prev_score`` and the
cached final scores are only refreshed when stage 3 actually fires, so the
change signal always measures drift since the last deep computation.
"""
from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ContractError
from .net import (
    StagedNet,
    StageId,
    WorkCounter,
    argmax_mask,
    fuse_and_upsample,
    run_stage1,
    run_stage2,
    run_stage3,
)
from .tensor_ops import Tensor, mean_abs_diff


@dataclass(frozen=True)
class Always:
    """Every stage, every frame."""


@dataclass(frozen=True)
class Fixed:
    """Fixed periods for stages 2 and 3 (stage 1 is implicitly period 1)."""

    period2: int
    period3: int

    def __post_init__(self):
        for name, v in (("period2", self.period2), ("period3", self.period3)):
            if not isinstance(v, int) or v < 1:
                raise ContractError(f"{name} must be an integer >= 1, got {v!r}")


@dataclass(frozen=True)
class Adaptive:
    """Data-driven stage-3 gating with threshold ``theta``.

    Negative theta is allowed and makes stage 3 fire on every frame, which
    is the exact-oracle switch used in tests.
    """

    theta: float

    def __post_init__(self):
        if math.isnan(self.theta):
            raise ContractError("theta must not be NaN")


ClockSchedule = Union[Always, Fixed, Adaptive]


class SkipPolicy(enum.Enum):
    """What to output on frames where stage 3 is skipped."""

    REUSE_FINAL = "reuse-final"
    FUSE_CACHED_DEEP = "fuse-cached-deep"


@dataclass(frozen=True)
class PersistedState:
    """Everything carried across frames. ``prev_score`` is the score_pool4
    captured at the last stage-3 firing (the change reference); the cached_*
    fields are the freshest values of each map, except cached_final and
    cached_score_fr which also only refresh on stage-3 firings."""

    prev_score: Tensor
    cached_score_pool3: Tensor
    cached_score_pool4: Tensor
    cached_score_fr: Tensor
    cached_final: Tensor
    frames_seen: int


@dataclass(frozen=True)
class StageTrace:
    """Per-frame execution record.

    ``elapsed`` has keys only for the parts that ran ("stage1", "stage2",
    "stage3", "fusion"); ``convs``/``macs`` count convolution work per stage
    label. ``change`` is None except in adaptive mode past frame 0.
    """

    frame_index: int
    fired: frozenset[StageId]
    change: Optional[float]
    elapsed: dict[str, float]
    convs: dict[str, int]
    macs: dict[str, int]


def should_fire(schedule: ClockSchedule, frame_index: int,
                change: Optional[float] = None) -> frozenset[StageId]:
    """The set of stages that fire on ``frame_index`` under ``schedule``.

    ``change`` is required exactly when the schedule is adaptive and
    frame_index > 0.
    """
    if frame_index < 0:
        raise ContractError(f"frame_index must be >= 0, got {frame_index}")
    all_stages = frozenset((StageId.STAGE1, StageId.STAGE2, StageId.STAGE3))
    if frame_index == 0 or isinstance(schedule, Always):
        return all_stages
    if isinstance(schedule, Fixed):
        fired = {StageId.STAGE1}
        if frame_index % schedule.period2 == 0:
            fired.add(StageId.STAGE2)
            if frame_index % schedule.period3 == 0:
                fired.add(StageId.STAGE3)
        return frozenset(fired)
    if isinstance(schedule, Adaptive):
        if change is None:
            raise ContractError(
                "adaptive scheduling needs a change value past frame 0"
            )
        fired = {StageId.STAGE1, StageId.STAGE2}
        if change > schedule.theta:
            fired.add(StageId.STAGE3)
        return frozenset(fired)
    raise ContractError(f"unknown schedule {schedule!r}")


def step(net: StagedNet, schedule: ClockSchedule, policy: SkipPolicy,
         state: Optional[PersistedState], frame: Tensor,
         ) -> tuple[np.ndarray, PersistedState, StageTrace]:
    """Process one frame: run the fired stages, produce a mask, advance state.

    ``state`` must be None exactly on the first frame of a sequence. Frames
    must keep the resolution the net was built for; drift is an error, never
    a silent re-initialization.
    """
    index = 0 if state is None else state.frames_seen
    if index > 0 and state is None:
        raise ContractError("state is required after frame 0")

    work = WorkCounter()
    elapsed: dict[str, float] = {}

    t0 = time.perf_counter()
    pool3, score_pool3 = run_stage1(net, frame, work)
    elapsed["stage1"] = time.perf_counter() - t0

    change: Optional[float] = None
    adaptive = isinstance(schedule, Adaptive)
    if adaptive and index > 0:
        # stage 2 always runs in adaptive mode; its output is the signal
        t0 = time.perf_counter()
        pool4, score_pool4 = run_stage2(net, pool3, work)
        elapsed["stage2"] = time.perf_counter() - t0
        change = mean_abs_diff(score_pool4, state.prev_score)
        fired = should_fire(schedule, index, change)
    else:
        fired = should_fire(schedule, index)
        if StageId.STAGE2 in fired:
            t0 = time.perf_counter()
            pool4, score_pool4 = run_stage2(net, pool3, work)
            elapsed["stage2"] = time.perf_counter() - t0
        else:
            pool4 = None
            score_pool4 = state.cached_score_pool4

    if StageId.STAGE3 in fired:
        t0 = time.perf_counter()
        score_fr = run_stage3(net, pool4, work)
        elapsed["stage3"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        final = fuse_and_upsample(net, score_fr, score_pool4, score_pool3)
        elapsed["fusion"] = time.perf_counter() - t0
        mask = argmax_mask(final)
        new_state = PersistedState(
            prev_score=score_pool4,
            cached_score_pool3=score_pool3,
            cached_score_pool4=score_pool4,
            cached_score_fr=score_fr,
            cached_final=final,
            frames_seen=index + 1,
        )
    else:
        if policy is SkipPolicy.REUSE_FINAL:
            mask = argmax_mask(state.cached_final)
        else:
            t0 = time.perf_counter()
            final = fuse_and_upsample(
                net, state.cached_score_fr, score_pool4, score_pool3
            )
            elapsed["fusion"] = time.perf_counter() - t0
            mask = argmax_mask(final)
        new_state = PersistedState(
            prev_score=state.prev_score,
            cached_score_pool3=score_pool3,
            cached_score_pool4=score_pool4,
            cached_score_fr=state.cached_score_fr,
            cached_final=state.cached_final,
            frames_seen=index + 1,
        )

    trace = StageTrace(
        frame_index=index,
        fired=fired,
        change=change,
        elapsed=elapsed,
        convs=work.stage_convs(),
        macs=work.stage_macs(),
    )
    return mask, new_state, trace


def run_sequence(net: StagedNet, schedule: ClockSchedule, policy: SkipPolicy,
                 frames: Sequence[Tensor],
                 ) -> tuple[list[np.ndarray], list[StageTrace]]:
    """Fold :func:`step` over a frame sequence from empty state."""
    if len(frames) == 0:
        raise ContractError("cannot run an empty sequence")
    masks: list[np.ndarray] = []
    traces: list[StageTrace] = []
    state: Optional[PersistedState] = None
    for frame in frames:
        mask, state, trace = step(net, schedule, policy, state, frame)
        masks.append(mask)
        traces.append(trace)
    return masks, traces
