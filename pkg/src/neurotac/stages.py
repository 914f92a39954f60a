from __future__ import annotations

from enum import IntEnum


class GraspStage(IntEnum):
    """Grasp stage label; integer codes are stable on disk."""

    IDLE = 0
    PRESS = 1
    SLIP = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, text: str) -> "GraspStage":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown grasp stage {text!r}") from None


def stage_at(timeline, t_us: int) -> GraspStage:
    """Stage in force at ``t_us``.

    A change point ``(t, stage)`` governs the half-open span ``(t, next]``,
    matching the window convention: the frame ending exactly at an onset
    holds no post-onset events and keeps the previous stage.
    """
    current = GraspStage.IDLE
    for t, stage in timeline:
        if t < t_us:
            current = GraspStage(stage)
        else:
            break
    return current
