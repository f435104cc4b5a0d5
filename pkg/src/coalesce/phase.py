from __future__ import annotations

import enum


class Phase(enum.IntEnum):
    """The fixed sequence of slots inside one step."""

    REQUEST_POSTING = 0
    PRE_RECEIVE = 1
    RECEIVE_POST = 2
    PRE_SEND = 3
    SEND_POST = 4
    PRE_WAIT = 5
    WAIT = 6
    POST_WAIT = 7
    END_STEP = 8

    @property
    def label(self) -> str:
        return "".join(part.capitalize() for part in self.name.split("_"))

    @property
    def is_framework(self) -> bool:
        return self in _FRAMEWORK

    @classmethod
    def from_label(cls, label: str) -> "Phase":
        for p in cls:
            if p.label == label or p.name == label:
                return p
        raise ValueError(f"unknown phase {label!r}")


_FRAMEWORK = frozenset({Phase.RECEIVE_POST, Phase.SEND_POST, Phase.WAIT})

CALLBACK_PHASES = tuple(p for p in Phase if not p.is_framework)
