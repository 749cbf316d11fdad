"""Alternating detector/generator training schedules.

An ``n:m`` schedule updates the detector for n epochs while the generator is
frozen, then the generator for m epochs while the detector is frozen, and
repeats; ``joint`` updates both every epoch. The scheduler is model-agnostic:
it only sequences callbacks, so any trainable pair can adopt it.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable

from .errors import ScheduleError

MODE_JOINT = "joint"
MODE_ALTERNATE = "alternate"

ACTIVE_DETECTOR = "detector"
ACTIVE_GENERATOR = "generator"
ACTIVE_BOTH = "both"
FROZEN_NONE = "none"

_SPEC_RE = re.compile(r"^(\d+):(\d+)$")


@dataclass(frozen=True)
class ScheduleSpec:
    mode: str
    detector_epochs: int = 0
    generator_epochs: int = 0

    def __post_init__(self):
        if self.mode not in (MODE_JOINT, MODE_ALTERNATE):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        if self.mode == MODE_ALTERNATE:
            if self.detector_epochs < 1 or self.generator_epochs < 1:
                raise ValueError("alternate schedules need n >= 1 and m >= 1")

    def __str__(self) -> str:
        if self.mode == MODE_JOINT:
            return MODE_JOINT
        return f"{self.detector_epochs}:{self.generator_epochs}"


@dataclass(frozen=True)
class Phase:
    epoch: int
    active: str
    frozen: str


def parse_schedule(text: str) -> ScheduleSpec:
    """Parse ``"joint"`` or ``"N:M"`` with positive integer phase lengths."""
    text = text.strip()
    if text == MODE_JOINT:
        return ScheduleSpec(mode=MODE_JOINT)
    m = _SPEC_RE.match(text)
    if not m:
        raise ValueError(f"schedule must be 'joint' or 'N:M', got {text!r}")
    n, g = int(m.group(1)), int(m.group(2))
    if n < 1 or g < 1:
        raise ValueError(f"phase lengths must be positive, got {text!r}")
    return ScheduleSpec(mode=MODE_ALTERNATE, detector_epochs=n, generator_epochs=g)


def phase_for_epoch(spec: ScheduleSpec, epoch: int) -> Phase:
    """The detector leads: epochs 0..n-1 of each period train it, then the generator."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if spec.mode == MODE_JOINT:
        return Phase(epoch=epoch, active=ACTIVE_BOTH, frozen=FROZEN_NONE)
    period = spec.detector_epochs + spec.generator_epochs
    if epoch % period < spec.detector_epochs:
        return Phase(epoch=epoch, active=ACTIVE_DETECTOR, frozen=ACTIVE_GENERATOR)
    return Phase(epoch=epoch, active=ACTIVE_GENERATOR, frozen=ACTIVE_DETECTOR)


def run_schedule(spec: ScheduleSpec, total_epochs: int,
                 detector_step: Callable[[int], None],
                 generator_step: Callable[[int], None]) -> list[Phase]:
    """Drive the callbacks epoch by epoch and return the executed phase trace.

    Joint mode invokes both callbacks each epoch, detector first. A callback
    failure aborts the run with the partial trace attached to the error.
    """
    if total_epochs < 1:
        raise ValueError("total_epochs must be >= 1")
    trace: list[Phase] = []
    for epoch in range(total_epochs):
        phase = phase_for_epoch(spec, epoch)
        try:
            if phase.active in (ACTIVE_DETECTOR, ACTIVE_BOTH):
                detector_step(epoch)
            if phase.active in (ACTIVE_GENERATOR, ACTIVE_BOTH):
                generator_step(epoch)
        except Exception as exc:
            raise ScheduleError(
                f"callback failed at epoch {epoch} ({phase.active}): {exc}",
                trace=list(trace),
            ) from exc
        trace.append(phase)
    return trace
