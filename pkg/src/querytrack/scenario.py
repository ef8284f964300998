"""Synthetic scene generation and the training-time augmentations.

A scenario is ground truth: per frame, per persistent id, a category and a
box. Three motion models (linear, crossing, enter-exit) cover the failure
modes the tracker must survive; the mosaic composite, rarely-overlapping
marking and random occlusion reproduce the training-time augmentation
pipeline at unit-square scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Set, Tuple

import numpy as np

from .bank import CategoryBank
from .geometry import Box, box_from_corners, iou


@dataclass(frozen=True)
class ScenarioRecord:
    frame: int
    track_id: int
    category_id: int
    box: Box


@dataclass
class Scenario:
    num_frames: int
    records: list[ScenarioRecord] = field(default_factory=list)

    def __post_init__(self):
        self.records.sort(key=lambda r: (r.frame, r.track_id))
        seen = set()
        cats = {}
        for r in self.records:
            key = (r.frame, r.track_id)
            if key in seen:
                raise ValueError(f"duplicate record for id {r.track_id} in frame {r.frame}")
            seen.add(key)
            if r.track_id in cats and cats[r.track_id] != r.category_id:
                raise ValueError(f"id {r.track_id} changes category mid-scenario")
            cats[r.track_id] = r.category_id
            if not 0 <= r.frame < self.num_frames:
                raise ValueError(f"record frame {r.frame} outside [0, {self.num_frames})")

    def frame_objects(self, t: int) -> list[Tuple[int, Box]]:
        return [(r.category_id, r.box) for r in self.records if r.frame == t]

    def frame_records(self, t: int) -> list[ScenarioRecord]:
        return [r for r in self.records if r.frame == t]

    def track_ids(self) -> list[int]:
        return sorted({r.track_id for r in self.records})

    def category_ids(self) -> list[int]:
        return sorted({r.category_id for r in self.records})

    def frames_of(self, track_id: int) -> list[int]:
        return sorted(r.frame for r in self.records if r.track_id == track_id)

    def to_text(self) -> str:
        lines = [f"{r.frame} {r.track_id} {r.category_id} "
                 f"{r.box.cx:.6f} {r.box.cy:.6f} {r.box.w:.6f} {r.box.h:.6f}"
                 for r in self.records]
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_text(cls, text: str) -> "Scenario":
        records = []
        for ln, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 7:
                raise ValueError(f"scenario line {ln}: expected 7 fields, got {len(parts)}")
            frame, tid, cid = int(parts[0]), int(parts[1]), int(parts[2])
            cx, cy, w, h = (float(x) for x in parts[3:])
            records.append(ScenarioRecord(frame, tid, cid, Box(cx, cy, w, h)))
        num_frames = max((r.frame for r in records), default=-1) + 1
        return cls(num_frames=max(1, num_frames), records=records)


def clip_window(scenario: Scenario, start: int, length: int) -> Scenario:
    """Contiguous sub-clip with frames re-indexed from zero."""
    if start < 0 or start + length > scenario.num_frames:
        raise ValueError(f"window [{start}, {start + length}) outside scenario of "
                         f"{scenario.num_frames} frames")
    recs = [ScenarioRecord(r.frame - start, r.track_id, r.category_id, r.box)
            for r in scenario.records if start <= r.frame < start + length]
    return Scenario(num_frames=length, records=recs)


# ---------------------------------------------------------------------------
# generation


def _category_pool(bank: CategoryBank, which: str) -> list[int]:
    if which == "base":
        return bank.base_ids()
    if which == "novel":
        return bank.novel_ids()
    if which == "all":
        return list(range(bank.total))
    raise ValueError(f"unknown category pool {which!r} (base|novel|all)")


def _draw_categories(rng: np.random.Generator, pool: Sequence[int], n: int) -> list[int]:
    if not pool:
        raise ValueError("category pool is empty")
    if n <= len(pool):
        return [int(c) for c in rng.choice(pool, size=n, replace=False)]
    return [int(c) for c in rng.choice(pool, size=n, replace=True)]


def _linear_path(rng: np.random.Generator, num_frames: int,
                 size_range=(0.08, 0.2), speed_range=(0.015, 0.05)):
    """A constant-velocity path that keeps the whole box inside the square."""
    w = float(rng.uniform(*size_range))
    h = float(rng.uniform(*size_range))
    speed = float(rng.uniform(*speed_range))
    angle = float(rng.uniform(0.0, 2.0 * np.pi))
    vx, vy = speed * np.cos(angle), speed * np.sin(angle)
    span = max(1, num_frames - 1)

    def clamp_velocity(v, margin):
        room = 1.0 - 2.0 * margin
        if abs(v) * span > room:
            return np.sign(v) * room / span
        return v

    mx, my = w / 2 + 0.005, h / 2 + 0.005
    vx, vy = clamp_velocity(vx, mx), clamp_velocity(vy, my)
    cx0 = float(rng.uniform(mx - min(0.0, vx * span), 1.0 - mx - max(0.0, vx * span)))
    cy0 = float(rng.uniform(my - min(0.0, vy * span), 1.0 - my - max(0.0, vy * span)))
    return [(cx0 + vx * t, cy0 + vy * t, w, h) for t in range(num_frames)]


def generate_scenario(num_objects: int, num_frames: int, motion: str,
                      bank: CategoryBank, seed: int,
                      category_pool: str = "base") -> Scenario:
    """Seeded ground-truth generation under one of three motion models.

    linear: constant per-frame displacement per object.
    crossing: paths meet near one point at the middle frame, which forces
    a real occlusion-grade overlap between objects.
    enter_exit: objects appear after the clip starts or leave before it
    ends (at least one of each), linear while present.
    """
    if num_objects < 1:
        raise ValueError("need at least one object")
    if num_frames < 2:
        raise ValueError("need at least two frames")
    rng = np.random.default_rng(seed)
    pool = _category_pool(bank, category_pool)
    cats = _draw_categories(rng, pool, num_objects)
    records: list[ScenarioRecord] = []

    if motion == "linear":
        for oid in range(num_objects):
            for t, (cx, cy, w, h) in enumerate(_linear_path(rng, num_frames)):
                records.append(ScenarioRecord(t, oid, cats[oid], Box(cx, cy, w, h)))

    elif motion == "crossing":
        cross = rng.uniform(0.42, 0.58, size=2)
        t_star = num_frames // 2
        span = max(1, num_frames - 1)
        for oid in range(num_objects):
            angle = 2.0 * np.pi * oid / num_objects + float(rng.uniform(-0.25, 0.25))
            speed = min(float(rng.uniform(0.035, 0.055)), 0.5 / span)
            direction = np.array([np.cos(angle), np.sin(angle)])
            perp = np.array([-direction[1], direction[0]]) * float(rng.uniform(-0.01, 0.01))
            w = float(rng.uniform(0.14, 0.2))
            h = float(rng.uniform(0.14, 0.2))
            for t in range(num_frames):
                center = cross + (t - t_star) * speed * direction + perp
                cx = float(np.clip(center[0], w / 2, 1 - w / 2))
                cy = float(np.clip(center[1], h / 2, 1 - h / 2))
                records.append(ScenarioRecord(t, oid, cats[oid], Box(cx, cy, w, h)))

    elif motion == "enter_exit":
        if num_frames < 4:
            raise ValueError("enter_exit needs at least four frames")
        windows = []
        if num_objects == 1:
            windows.append((1, num_frames - 2))
        else:
            windows.append((1, num_frames - 1))       # late entry
            windows.append((0, num_frames - 2))       # early exit
            for _ in range(num_objects - 2):
                first = int(rng.integers(0, num_frames - 1))
                last = int(rng.integers(first + 1, num_frames))
                windows.append((first, last))
        for oid, (first, last) in enumerate(windows):
            path = _linear_path(rng, last - first + 1)
            for i, (cx, cy, w, h) in enumerate(path):
                records.append(ScenarioRecord(first + i, oid, cats[oid], Box(cx, cy, w, h)))

    else:
        raise ValueError(f"unknown motion model {motion!r} (linear|crossing|enter_exit)")

    return Scenario(num_frames=num_frames, records=records)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    mosaic_probability: float = 0.5
    shuffle_ratio: float = 0.1
    dislocation_ratio: float = 0.25
    single_ratio_range: Tuple[float, float] = (0.7, 1.2)
    occlusion_ratio_range: Tuple[float, float] = (0.1, 0.13)
    sampler_steps: Tuple[int, ...] = (4, 7, 14)
    sampler_lengths: Tuple[int, ...] = (2, 3, 4, 5)
    flip_probability: float = 0.5

    def validate(self) -> None:
        if len(self.sampler_lengths) != len(self.sampler_steps) + 1:
            raise ValueError("sampler_lengths must have one more entry than sampler_steps")
        if list(self.sampler_steps) != sorted(self.sampler_steps):
            raise ValueError("sampler_steps must be ascending")
        lo, hi = self.occlusion_ratio_range
        if not 0 < lo <= hi < 1:
            raise ValueError(f"bad occlusion_ratio_range {self.occlusion_ratio_range}")


_QUADRANTS = ((0.0, 0.0), (0.5, 0.0), (0.0, 0.5), (0.5, 0.5))


def dynamic_mosaic(scenarios: Sequence[Scenario], cfg: AugmentConfig, seed: int) -> Scenario:
    """Compose four equal-length scenarios into one quadrant mosaic.

    Per source: a size ratio from single_ratio_range, an optional
    horizontal flip, and a per-frame drift whose total stays within
    dislocation_ratio of the quadrant size. With probability
    shuffle_ratio two quadrants swap places mid-clip. Boxes are remapped
    into the composite square, clipped there, and ids re-namespaced.
    """
    if len(scenarios) != 4:
        raise ValueError(f"mosaic needs exactly 4 scenarios, got {len(scenarios)}")
    T = scenarios[0].num_frames
    for s in scenarios:
        if s.num_frames != T:
            raise ValueError("mosaic scenarios must share a frame count")
    rng = np.random.default_rng(seed)
    scales = rng.uniform(cfg.single_ratio_range[0], cfg.single_ratio_range[1], size=4)
    flips = rng.random(4) < cfg.flip_probability
    per_frame = cfg.dislocation_ratio * 0.5 / max(1, T - 1)
    drift = rng.uniform(-1.0, 1.0, size=(4, 2)) * per_frame
    swap_pair: Optional[Tuple[int, int]] = None
    swap_frame = T
    if rng.random() < cfg.shuffle_ratio and T > 1:
        pair = rng.choice(4, size=2, replace=False)
        swap_pair = (int(pair[0]), int(pair[1]))
        swap_frame = int(rng.integers(1, T))

    def quadrant_of(source: int, t: int) -> Tuple[float, float]:
        slot = source
        if swap_pair is not None and t >= swap_frame:
            if source == swap_pair[0]:
                slot = swap_pair[1]
            elif source == swap_pair[1]:
                slot = swap_pair[0]
        return _QUADRANTS[slot]

    records: list[ScenarioRecord] = []
    for s_idx, scn in enumerate(scenarios):
        scale = float(scales[s_idx])
        for rec in scn.records:
            t = rec.frame
            ox, oy = quadrant_of(s_idx, t)
            cx, cy, w, h = rec.box.cx, rec.box.cy, rec.box.w, rec.box.h
            if flips[s_idx]:
                cx = 1.0 - cx
            # scale about the source center, then map into the quadrant
            sx = 0.5 + (cx - 0.5) * scale
            sy = 0.5 + (cy - 0.5) * scale
            gx = ox + 0.5 * sx + drift[s_idx, 0] * t
            gy = oy + 0.5 * sy + drift[s_idx, 1] * t
            gw, gh = 0.5 * w * scale, 0.5 * h * scale
            x0, y0 = max(0.0, gx - gw / 2), max(0.0, gy - gh / 2)
            x1, y1 = min(1.0, gx + gw / 2), min(1.0, gy + gh / 2)
            if x1 - x0 < 1e-6 or y1 - y0 < 1e-6:
                continue  # clipped away entirely
            records.append(ScenarioRecord(t, s_idx * 100000 + rec.track_id,
                                          rec.category_id,
                                          box_from_corners(x0, y0, x1, y1)))
    return Scenario(num_frames=T, records=records)


def mark_rarely_overlapping(scenario: Scenario, iou_threshold: float = 0.1,
                            frame_fraction: float = 0.9) -> Set[int]:
    """Ids whose max IoU against all others stays under the threshold in at
    least ``frame_fraction`` of the frames where they appear."""
    by_frame: dict[int, list[ScenarioRecord]] = {}
    for r in scenario.records:
        by_frame.setdefault(r.frame, []).append(r)
    clear_frames: dict[int, int] = {}
    present_frames: dict[int, int] = {}
    for recs in by_frame.values():
        for r in recs:
            present_frames[r.track_id] = present_frames.get(r.track_id, 0) + 1
            peak = 0.0
            for other in recs:
                if other.track_id != r.track_id:
                    peak = max(peak, iou(r.box, other.box))
            if peak < iou_threshold:
                clear_frames[r.track_id] = clear_frames.get(r.track_id, 0) + 1
    return {tid for tid, total in present_frames.items()
            if clear_frames.get(tid, 0) >= frame_fraction * total}


def random_occlusion(scenario: Scenario, marked: Set[int], cfg: AugmentConfig,
                     seed: int) -> Scenario:
    """Delete one marked target's records over a contiguous interior window.

    The window length is a fraction of the clip length drawn from
    occlusion_ratio_range (at least one frame); the target stays present
    on both sides so reappearance is guaranteed. No eligible target, or a
    span too short to keep both sides, leaves the scenario unchanged.
    """
    if not marked:
        return scenario
    rng = np.random.default_rng(seed)
    candidates = sorted(marked)
    target = candidates[int(rng.integers(len(candidates)))]
    span_frames = scenario.frames_of(target)
    fraction = float(rng.uniform(cfg.occlusion_ratio_range[0], cfg.occlusion_ratio_range[1]))
    window = max(1, int(np.floor(fraction * scenario.num_frames)))
    window = min(window, len(span_frames) - 2)
    if window < 1:
        return scenario
    start_pos = int(rng.integers(1, len(span_frames) - window))
    removed = set(span_frames[start_pos:start_pos + window])
    records = [r for r in scenario.records
               if not (r.track_id == target and r.frame in removed)]
    return Scenario(num_frames=scenario.num_frames, records=records)


def sampler_schedule(epoch: int, cfg: AugmentConfig) -> int:
    """Clip length for an epoch: lengths step up at each sampler step."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    cfg.validate()
    idx = 0
    for step in cfg.sampler_steps:
        if epoch >= step:
            idx += 1
    return int(cfg.sampler_lengths[idx])
