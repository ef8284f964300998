"""Frame-by-frame inference: track lifecycle, propagation, dump format.

The lifecycle bookkeeping lives in TrackLedger so its threshold behavior
can be driven with scripted confidences, independent of any network. The
Tracker wraps a model: per frame it renders nothing itself (the caller
supplies the feature grid), runs detection plus propagated track queries,
applies the ledger rules, and converts surviving queries into the next
frame's track queries.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bank import CategoryBank
from .decoder import QuerySet, ROLE_TRACK
from .encoder import FeatureGrid, TextFeatures, rasterize_scene
from .geometry import Box
from .model import TrackingModel
from .scenario import Scenario


@dataclass
class RuntimeConfig:
    tau_det: float = 0.5      # birth: best detection score must exceed this
    tau_tr: float = 0.5       # refresh: track stays active above this
    t_miss: int = 5           # consecutive misses before removal

    def validate(self) -> None:
        if not 0.0 < self.tau_det < 1.0:
            raise ValueError(f"tau_det {self.tau_det} outside (0, 1)")
        if not 0.0 < self.tau_tr < 1.0:
            raise ValueError(f"tau_tr {self.tau_tr} outside (0, 1)")
        if self.t_miss < 1:
            raise ValueError(f"t_miss must be at least 1, got {self.t_miss}")


@dataclass
class TrackState:
    track_id: int
    category_id: int
    box: Box
    score: float
    miss_count: int = 0
    active: bool = True


class TrackLedger:
    """Birth, refresh, decay and removal rules over confidence scores.

    Ids increase monotonically and are never reused. An inactive track
    keeps its slot until it misses t_miss frames in a row; a confident
    frame resets the count and reactivates it under the same id.
    """

    def __init__(self, cfg: RuntimeConfig):
        cfg.validate()
        self.cfg = cfg
        self.states: list[TrackState] = []
        self._next_id = 0

    def update(self, confidences: Sequence[float], boxes: Sequence[Box],
               categories: Sequence[int]) -> list[int]:
        """Refresh existing tracks in slot order; returns surviving slots.

        Input arrays align with self.states. A confidence above tau_tr
        reactivates the slot and replaces box/category/score; otherwise
        the slot goes inactive and accrues a miss, and removal happens
        exactly when miss_count reaches t_miss.
        """
        if not (len(confidences) == len(boxes) == len(categories) == len(self.states)):
            raise ValueError("update inputs must align with current track slots")
        survivors: list[int] = []
        kept: list[TrackState] = []
        for i, st in enumerate(self.states):
            conf = float(confidences[i])
            if conf > self.cfg.tau_tr:
                st.active = True
                st.miss_count = 0
                st.box = boxes[i]
                st.category_id = int(categories[i])
                st.score = conf
            else:
                st.active = False
                st.miss_count += 1
                if st.miss_count >= self.cfg.t_miss:
                    continue
            survivors.append(i)
            kept.append(st)
        self.states = kept
        return survivors

    def spawn(self, confidence: float, box: Box, category_id: int) -> TrackState:
        st = TrackState(track_id=self._next_id, category_id=int(category_id),
                        box=box, score=float(confidence))
        self._next_id += 1
        self.states.append(st)
        return st


def lifecycle_step(ledger: TrackLedger, track_confs: Sequence[float],
                   track_boxes: Sequence[Box], track_cats: Sequence[int],
                   det_confs: Sequence[float], det_boxes: Sequence[Box],
                   det_cats: Sequence[int]) -> tuple[list[int], list[int]]:
    """One frame of lifecycle decisions, no network involved.

    Refreshes existing slots, then births a track per detection whose
    confidence exceeds tau_det. Returns (surviving slot indices before
    births, detection rows that gave birth); newborn states sit at the
    end of ledger.states in detection-row order.
    """
    survivors = ledger.update(track_confs, track_boxes, track_cats)
    born_rows: list[int] = []
    for q, conf in enumerate(det_confs):
        if float(conf) > ledger.cfg.tau_det:
            ledger.spawn(float(conf), det_boxes[q], int(det_cats[q]))
            born_rows.append(q)
    return survivors, born_rows


# ---------------------------------------------------------------------------
# dumps


@dataclass(frozen=True)
class TrackRecord:
    frame: int
    track_id: int
    category_id: int
    box: Box
    score: float


@dataclass
class TrackDump:
    records: list[TrackRecord] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"{r.frame} {r.track_id} {r.category_id} "
                 f"{r.box.cx:.6f} {r.box.cy:.6f} {r.box.w:.6f} {r.box.h:.6f} "
                 f"{r.score:.6f}" for r in self.records]
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_text(cls, text: str) -> "TrackDump":
        records = []
        for ln, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError(f"track dump line {ln}: expected 8 fields, got {len(parts)}")
            frame, tid, cid = int(parts[0]), int(parts[1]), int(parts[2])
            cx, cy, w, h, score = (float(x) for x in parts[3:])
            records.append(TrackRecord(frame, tid, cid, Box(cx, cy, w, h), score))
        return cls(records=records)

    def frame_records(self, t: int) -> list[TrackRecord]:
        return [r for r in self.records if r.frame == t]

    def num_frames(self) -> int:
        return max((r.frame for r in self.records), default=-1) + 1


# ---------------------------------------------------------------------------
# tracker


def _box_from_row(row: np.ndarray) -> Box:
    cx, cy, w, h = (float(v) for v in row)
    return Box(cx, cy, max(w, 1e-6), max(h, 1e-6))


class Tracker:
    """Stateful frame-by-frame runner around a trained model.

    Classification at inference scores queries against the full category
    list of the bank, so novel categories compete alongside base ones.
    """

    def __init__(self, model: TrackingModel, bank: CategoryBank, cfg: RuntimeConfig):
        cfg.validate()
        self.model = model
        self.bank = bank
        self.cfg = cfg
        self.ledger = TrackLedger(cfg)
        self._content: Optional[np.ndarray] = None     # [n, d] carried track content
        self._position: Optional[np.ndarray] = None    # [n, d]
        self._ref: Optional[np.ndarray] = None         # [n, 4]
        self._frame = 0

    def _text_features(self) -> TextFeatures:
        return TextFeatures(self.bank.text.copy(), list(range(self.bank.total)))

    def step(self, grid: FeatureGrid) -> list[TrackRecord]:
        with ad.no_grad():
            n_tr = len(self.ledger.states)
            tracks = None
            if n_tr > 0:
                tracks = QuerySet(
                    content=Tensor(self._content.copy()),
                    position=Tensor(self._position.copy()),
                    ref_boxes=Tensor(self._ref.copy()),
                    roles=np.full(n_tr, ROLE_TRACK, dtype=np.int8),
                    track_ids=[st.track_id for st in self.ledger.states],
                )
            outputs, qs = self.model.forward_frame(grid, self._text_features(), tracks)
            final = outputs[-1]
            scores = final.scores.data
            boxes = final.boxes.data
            n_det = qs.n_detect

            # refresh existing tracks from their rows, then spawn births
            track_rows = list(range(n_det, n_det + n_tr))
            survivors, born_rows = lifecycle_step(
                self.ledger,
                [float(scores[r].max()) for r in track_rows],
                [_box_from_row(boxes[r]) for r in track_rows],
                [int(scores[r].argmax()) for r in track_rows],
                [float(scores[q].max()) for q in range(n_det)],
                [_box_from_row(boxes[q]) for q in range(n_det)],
                [int(scores[q].argmax()) for q in range(n_det)],
            )

            # next-frame queries: surviving tracks keep order, newborns at the end
            keep_rows = [n_det + i for i in survivors] + born_rows
            keep_ids = [st.track_id for st in self.ledger.states]
            if keep_rows:
                next_qs = self.model.propagate_tracks(final, qs, keep_rows, keep_ids)
                self._content = next_qs.content.data.copy()
                self._position = next_qs.position.data.copy()
                self._ref = next_qs.ref_boxes.data.copy()
            else:
                self._content = self._position = self._ref = None

        emitted = [TrackRecord(self._frame, st.track_id, st.category_id, st.box, st.score)
                   for st in self.ledger.states if st.active]
        self._frame += 1
        return emitted


def run_sequence(model: TrackingModel, bank: CategoryBank, scenario: Scenario,
                 cfg: RuntimeConfig, seed: int,
                 noise: Optional[float] = None) -> TrackDump:
    """Render and track a full scenario; the dump is seed-deterministic."""
    tracker = Tracker(model, bank, cfg)
    noise_level = model.cfg.rasterize_noise if noise is None else float(noise)
    records: list[TrackRecord] = []
    for t in range(scenario.num_frames):
        rng = np.random.default_rng(np.random.SeedSequence((seed, t)))
        grid = rasterize_scene(scenario.frame_objects(t), bank,
                               model.cfg.grid_rows, model.cfg.grid_cols,
                               noise_level, rng)
        records.extend(tracker.step(grid))
    return TrackDump(records=records)
