"""Pseudo-label generation and memory-bank integration across self-training rounds."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detector import predict
from .geometry import Box3D, boxes_to_array, iou_3d_arrays

MATCH_IOU = 0.1
BUFFER_CAPACITY = 64


@dataclass
class PseudoLabelSet:
    scene_id: str
    boxes: list[Box3D]

    def __post_init__(self):
        for b in self.boxes:
            if b.score is None:
                raise ValueError("pseudo labels must carry a score")


def generate(params, points, phi: float, cfg, scene_id: str = "", anchors=None) -> PseudoLabelSet:
    """Detections of the current model with final score >= phi."""
    dets = predict(points, params, cfg, anchors, score_thresh=min(phi, 1.0))
    return PseudoLabelSet(scene_id, threshold(dets, phi))


def threshold(dets, phi: float) -> list[Box3D]:
    return [d for d in dets if d.score is not None and d.score >= phi]


@dataclass
class IntegrationStats:
    kept: int = 0  # matched, memory box won
    replaced: int = 0  # matched, current box won
    added: int = 0  # unmatched current boxes entering the bank
    buffered: int = 0  # bank boxes moved to the buffer
    recovered: int = 0  # buffer boxes matched again
    evicted: int = 0

    def churn(self, bank_size: int) -> float:
        return (self.replaced + self.added + self.buffered) / max(1, bank_size + self.added)


def integrate_scene(memory: list[Box3D], buffer: list[Box3D], current: list[Box3D],
                    capacity: int = BUFFER_CAPACITY, match_iou: float = MATCH_IOU):
    """Merge one scene's current pseudo labels into its memory and buffer.

    Bank boxes are offered first, then buffered ones. Each offered box takes
    its best-IoU current box among those not yet claimed (lowest index on
    ties); at IoU >= ``match_iou`` the higher-scored of the pair is stored
    (memory wins ties). Unmatched bank boxes join the FIFO buffer, unmatched
    buffer boxes stay there, unclaimed current boxes enter the bank.
    Returns (bank, buffer, stats).
    """
    stats = IntegrationStats()
    offered = list(memory) + list(buffer)
    n_mem = len(memory)
    ious = iou_3d_arrays(boxes_to_array(offered), boxes_to_array(current))
    claimed = np.zeros(len(current), dtype=bool)
    new_bank: list[Box3D] = []
    still_buffered: list[Box3D] = []
    newly_buffered: list[Box3D] = []
    for e, box in enumerate(offered):
        in_bank = e < n_mem
        free = np.where(claimed, -1.0, ious[e]) if len(current) else ious[e]
        if len(current) and free.max() >= match_iou:
            f = int(free.argmax())
            claimed[f] = True
            cur = current[f]
            if cur.score > box.score:
                new_bank.append(cur)
                stats.replaced += 1
            else:
                new_bank.append(box)
                stats.kept += 1
            stats.recovered += not in_bank
        elif in_bank:
            newly_buffered.append(box)
            stats.buffered += 1
        else:
            still_buffered.append(box)
    for f, cur in enumerate(current):
        if not claimed[f]:
            new_bank.append(cur)
            stats.added += 1
    new_buffer = still_buffered + newly_buffered
    if len(new_buffer) > capacity:
        stats.evicted = len(new_buffer) - capacity
        new_buffer = new_buffer[stats.evicted:]
    return new_bank, new_buffer, stats


@dataclass
class MemoryBank:
    capacity: int = BUFFER_CAPACITY
    match_iou: float = MATCH_IOU
    entries: dict[str, list[Box3D]] = field(default_factory=dict)
    buffers: dict[str, list[Box3D]] = field(default_factory=dict)
    round: int = 0
    missing_reads: int = 0

    def integrate(self, current: PseudoLabelSet) -> IntegrationStats:
        """In-place update for one scene."""
        sid = current.scene_id
        if sid not in self.entries:
            self.entries[sid] = list(current.boxes)
            self.buffers[sid] = []
            return IntegrationStats(added=len(current.boxes))
        bank, buf, stats = integrate_scene(self.entries[sid], self.buffers.get(sid, []),
                                           current.boxes, self.capacity, self.match_iou)
        self.entries[sid] = bank
        self.buffers[sid] = buf
        return stats

    def snapshot(self, scene_id: str) -> list[Box3D]:
        if scene_id not in self.entries:
            self.missing_reads += 1
            return []
        return list(self.entries[scene_id])

    def to_dict(self) -> dict:
        enc = lambda d: {k: [b.to_dict() for b in v] for k, v in sorted(d.items())}
        return {"round": self.round, "capacity": self.capacity, "match_iou": self.match_iou,
                "entries": enc(self.entries), "buffers": enc(self.buffers)}

    @classmethod
    def from_dict(cls, d: dict) -> "MemoryBank":
        dec = lambda m: {k: [Box3D.from_dict(b) for b in v] for k, v in m.items()}
        return cls(capacity=d["capacity"], match_iou=d.get("match_iou", MATCH_IOU),
                   entries=dec(d["entries"]), buffers=dec(d["buffers"]), round=d["round"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path) -> "MemoryBank":
        return cls.from_dict(json.loads(Path(path).read_text()))


def integrate(current: PseudoLabelSet, bank: MemoryBank) -> MemoryBank:
    """Pure form: return an updated copy of ``bank``."""
    out = MemoryBank(bank.capacity, bank.match_iou, dict(bank.entries), dict(bank.buffers),
                     bank.round, bank.missing_reads)
    out.integrate(current)
    return out


def snapshot(bank: MemoryBank, scene_id: str) -> list[Box3D]:
    return bank.snapshot(scene_id)
