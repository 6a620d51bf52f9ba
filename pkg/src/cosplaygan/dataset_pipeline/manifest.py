"""Line-delimited dataset manifest and the record/box/keypoint types it stores."""

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

# forward path a record walks through; each stage consumes exactly one status
STAGES = ("new", "filtered", "cropped", "deduped", "calibrated")
TERMINAL = ("rejected", "corrupt", "undetected", "duplicate")
LABELS = ("character", "clothing")


class StageOrderError(RuntimeError):
    pass


@dataclass(frozen=True)
class RegionBox:
    label: str
    left: int
    top: int
    width: int
    height: int
    confidence: float = 1.0

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"unknown region label {self.label!r}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"empty box {self.width}x{self.height}")
        if self.left < 0 or self.top < 0:
            raise ValueError("box starts outside the image")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    def check_within(self, width, height):
        if self.left + self.width > width or self.top + self.height > height:
            raise ValueError(f"box {self} exceeds a {width}x{height} image")
        return self

    @classmethod
    def from_dict(cls, d):
        return cls(str(d["label"]), int(d["left"]), int(d["top"]), int(d["width"]),
                   int(d["height"]), float(d.get("confidence", 1.0)))


@dataclass(frozen=True)
class Keypoint:
    name: str
    x: float
    y: float
    confidence: float = 1.0


class KeypointSet(tuple):
    """Immutable tuple of :class:`Keypoint` validated against image bounds."""

    def __new__(cls, points, width=None, height=None):
        pts = tuple(p if isinstance(p, Keypoint) else Keypoint(str(p["name"]), float(p["x"]),
                                                                float(p["y"]),
                                                                float(p.get("confidence", 1.0)))
                    for p in points)
        for p in pts:
            if not 0.0 <= p.confidence <= 1.0:
                raise ValueError(f"keypoint {p.name}: confidence {p.confidence} outside [0, 1]")
            if width is not None and not 0 <= p.x <= width - 1:
                raise ValueError(f"keypoint {p.name}: x={p.x} outside [0, {width - 1}]")
            if height is not None and not 0 <= p.y <= height - 1:
                raise ValueError(f"keypoint {p.name}: y={p.y} outside [0, {height - 1}]")
        return super().__new__(cls, pts)


@dataclass
class Record:
    id: str
    path: str
    status: str = "new"
    score: float = None
    regions: list = field(default_factory=list)
    character_path: str = None
    clothing_path: str = None
    group: str = None
    center_x: float = None
    center_fallback: bool = False
    calibrated_path: str = None
    split: str = None
    warnings: list = field(default_factory=list)

    @property
    def stage_index(self):
        return STAGES.index(self.status) if self.status in STAGES else None

    def advance(self, to):
        """Move one stage forward, or into a terminal status from any live stage."""
        if self.status in TERMINAL:
            raise StageOrderError(f"{self.id}: already terminal ({self.status})")
        if to in TERMINAL:
            self.status = to
            return self
        if to not in STAGES or STAGES.index(to) != self.stage_index + 1:
            raise StageOrderError(f"{self.id}: cannot go from {self.status} to {to}")
        self.status = to
        return self

    def reached(self, status):
        """True if the record is at or past ``status`` on the live path."""
        i = self.stage_index
        return i is not None and i >= STAGES.index(status)


class Manifest:
    """Ordered record collection persisted as one JSON object per line."""

    def __init__(self, records=()):
        self.records = {}
        for r in records:
            self.add(r)

    def add(self, record):
        if record.id in self.records:
            raise ValueError(f"duplicate record id {record.id}")
        self.records[record.id] = record
        return record

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records.values())

    def __getitem__(self, rid):
        return self.records[rid]

    def __contains__(self, rid):
        return rid in self.records

    def with_status(self, *statuses):
        return [r for r in self if r.status in statuses]

    def counts(self):
        out = {}
        for r in self:
            out[r.status] = out.get(r.status, 0) + 1
        return out

    def to_lines(self):
        return [json.dumps(asdict(r), sort_keys=True) for r in self]

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text("".join(line + "\n" for line in self.to_lines()))
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            return cls()
        records = []
        for n, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                records.append(Record(**json.loads(line)))
            except (TypeError, json.JSONDecodeError) as err:
                raise ValueError(f"{path}:{n}: bad manifest line: {err}") from err
        return cls(records)

    def check_invariants(self):
        """Raise if any duplicate group is split across train and test."""
        splits = {}
        for r in self:
            if r.group is None or r.split is None:
                continue
            splits.setdefault(r.group, set()).add(r.split)
        leaking = sorted(g for g, s in splits.items() if len(s) > 1)
        if leaking:
            raise ValueError(f"duplicate groups span both splits: {leaking}")
        return True
