from __future__ import annotations

import dataclasses
from dataclasses import dataclass


@dataclass
class EventCounters:
    """Event tallies for one crossbar/layer.  Sum them with ``+`` for totals."""

    set_pulses: int = 0
    reset_pulses: int = 0
    device_reads: int = 0
    chi_writes: int = 0
    refresh_events: int = 0

    def __add__(self, other: "EventCounters") -> "EventCounters":
        return EventCounters(**{f.name: getattr(self, f.name) + getattr(other, f.name)
                                for f in dataclasses.fields(self)})

    def __sub__(self, other: "EventCounters") -> "EventCounters":
        return EventCounters(**{f.name: getattr(self, f.name) - getattr(other, f.name)
                                for f in dataclasses.fields(self)})

    @property
    def device_updates(self) -> int:
        return self.set_pulses + self.reset_pulses

    def snapshot(self) -> "EventCounters":
        return dataclasses.replace(self)

    def as_dict(self) -> dict[str, int]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EventCounters":
        return cls(**{k: int(v) for k, v in d.items()})


def total(counters) -> EventCounters:
    out = EventCounters()
    for c in counters:
        out = out + c
    return out
