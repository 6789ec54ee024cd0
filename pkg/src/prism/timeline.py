"""Speaker timelines and their RTTM serialization."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable


class TimelineError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class Span:
    start: float
    duration: float
    label: str

    @property
    def end(self) -> float:
        return self.start + self.duration


@dataclass
class Timeline:
    entries: list[Span] = field(default_factory=list)
    file_id: str = "meeting"

    def __post_init__(self):
        for s in self.entries:
            if s.duration <= 0:
                raise TimelineError(f"span {s} has non-positive duration")
            if not s.label:
                raise TimelineError("span label must be non-empty")
        self.entries = sorted(self.entries, key=lambda s: (s.start, s.label, s.duration))

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def labels(self) -> list[str]:
        return sorted({s.label for s in self.entries})

    @property
    def end(self) -> float:
        return max((s.end for s in self.entries), default=0.0)

    def shifted(self, delay: float) -> "Timeline":
        return Timeline([Span(s.start + delay, s.duration, s.label) for s in self.entries], self.file_id)

    def relabeled(self, mapping: dict[str, str]) -> "Timeline":
        return Timeline([Span(s.start, s.duration, mapping.get(s.label, s.label)) for s in self.entries], self.file_id)

    def speech_regions(self) -> list[tuple[float, float]]:
        """Union of all spans as sorted, disjoint (start, end) intervals."""
        regions: list[list[float]] = []
        for s in sorted(self.entries):
            if regions and s.start <= regions[-1][1]:
                regions[-1][1] = max(regions[-1][1], s.end)
            else:
                regions.append([s.start, s.end])
        return [(a, b) for a, b in regions]

    def to_rttm(self) -> str:
        return "".join(
            f"SPEAKER {self.file_id} 1 {s.start:.3f} {s.duration:.3f} <NA> <NA> {s.label} <NA> <NA>\n"
            for s in self.entries
        )

    @classmethod
    def from_rttm(cls, text: str, file_id: str | None = None) -> "Timeline":
        spans, fid = [], file_id
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) < 8 or parts[0] != "SPEAKER":
                raise TimelineError(f"line {lineno}: not an RTTM SPEAKER record")
            if file_id is not None and parts[1] != file_id:
                continue
            fid = fid or parts[1]
            spans.append(Span(float(parts[3]), float(parts[4]), parts[7]))
        return cls(spans, fid or "meeting")


def write_rttm(path: str | Path, timelines: Timeline | Iterable[Timeline]) -> None:
    if isinstance(timelines, Timeline):
        timelines = [timelines]
    Path(path).write_text("".join(t.to_rttm() for t in timelines))


def read_rttm(path: str | Path) -> dict[str, Timeline]:
    """All timelines in an RTTM file, keyed by file id."""
    text = Path(path).read_text()
    ids = []
    for line in text.splitlines():
        parts = line.split()
        if len(parts) > 1 and parts[1] not in ids:
            ids.append(parts[1])
    return {fid: Timeline.from_rttm(text, fid) for fid in ids}
