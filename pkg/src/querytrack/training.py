"""Two-phase training: detection first, then joint tracking.

The optimizer is plain gradient descent with a global-norm clip and
decoupled weight decay. Phase one steps on single frames (clip length 1,
no propagation) and leaves the query updater frozen; phase two propagates
matched queries across whole clips and trains decoder plus updater with
the encoder frozen. Per-step randomness is derived from (seed, epoch,
clip, frame) so a rerun with the same config reproduces the loss history
bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bank import CategoryBank, sample_categories
from .encoder import TextFeatures, rasterize_scene
from .losses import FrameTargets, LossWeights, frame_loss, match_frame, sequence_loss
from .model import TrackingModel
from .scenario import (AugmentConfig, Scenario, clip_window, dynamic_mosaic,
                       generate_scenario, mark_rarely_overlapping, random_occlusion,
                       sampler_schedule)

PHASES = ("detection", "tracking")
WHOLE_CLIP = 1 << 20  # seed-stream frame key for whole-clip updates


@dataclass
class TrainConfig:
    lr: float = 4e-5
    weight_decay: float = 1e-4
    grad_clip: float = 0.1
    epochs: int = 20
    decay_epoch: int = -1          # lr drops to a tenth from this epoch; -1 disables
    detection_epochs: int = 0      # epochs of phase one before tracking starts
    clips_per_epoch: int = 8
    num_objects: int = 3
    motion: str = "mixed"          # linear | crossing | enter_exit | mixed
    seed: int = 0

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not 0 <= self.detection_epochs <= self.epochs:
            raise ValueError("detection_epochs must lie within [0, epochs]")
        if self.clips_per_epoch < 1:
            raise ValueError("clips_per_epoch must be at least 1")
        if self.num_objects < 1:
            raise ValueError("num_objects must be at least 1")
        if self.motion not in ("linear", "crossing", "enter_exit", "mixed"):
            raise ValueError(f"unknown motion {self.motion!r}")


def phase_for_epoch(epoch: int, cfg: TrainConfig) -> str:
    return "detection" if epoch < cfg.detection_epochs else "tracking"


def trainable_names(store, phase: str) -> list[str]:
    """Which parameters each phase updates.

    detection: everything but the cross-frame updater, which sees no data.
    tracking: decoder and updater only; fusion stack and query slots hold.
    Together the two phases cover every parameter in the store.
    """
    names = store.names()
    if phase == "detection":
        return [n for n in names if not n.startswith("cip/")]
    if phase == "tracking":
        return [n for n in names if n.startswith("decoder/") or n.startswith("cip/")]
    if phase == "all":
        return names
    raise ValueError(f"unknown phase {phase!r}")


def apply_freeze(store, phase: str) -> None:
    wanted = set(trainable_names(store, phase))
    store.set_trainable([n for n in store.names() if n not in wanted], False)
    store.set_trainable(sorted(wanted), True)


class GradientDescent:
    """SGD with global-norm clipping and decoupled weight decay.

    The decay term is applied directly to the parameter, outside the
    clipped gradient, so clipping never rescales regularization.
    """

    def __init__(self, store, weight_decay: float, grad_clip: float):
        self.store = store
        self.weight_decay = float(weight_decay)
        self.grad_clip = float(grad_clip)

    def step(self, lr: float) -> float:
        params = [p for _, p in self.store.items()
                  if p.requires_grad and p.grad is not None]
        total = float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in params)))
        scale = 1.0
        if self.grad_clip > 0 and total > self.grad_clip:
            scale = self.grad_clip / total
        for p in params:
            p.data = p.data - lr * scale * p.grad - lr * self.weight_decay * p.data
        return total


def clip_loss(model: TrackingModel, bank: CategoryBank, scenario: Scenario,
              weights: LossWeights, rng: np.random.Generator,
              propagate: bool = True) -> tuple[Tensor, int]:
    """Loss over one clip; gradients flow across frames when propagating.

    Matched detect queries become next-frame track queries; carried track
    queries stay alive for the whole clip even when their target vanishes,
    supervised as background on those frames.
    """
    gt_cats = scenario.category_ids()
    k = min(bank.total, max(model.cfg.category_sample_size, len(gt_cats)))
    sample = sample_categories(bank, gt_cats, k, seed=int(rng.integers(2 ** 31)))
    col_of = {cid: j for j, cid in enumerate(sample.ids)}
    text = TextFeatures(bank.text[np.asarray(sample.ids)], list(sample.ids))

    tracks = None
    carried: list[int] = []
    losses: list[Tensor] = []
    total_targets = 0
    for t in range(scenario.num_frames):
        recs = scenario.frame_records(t)
        grid = rasterize_scene([(r.category_id, r.box) for r in recs], bank,
                               model.cfg.grid_rows, model.cfg.grid_cols,
                               model.cfg.rasterize_noise, rng)
        outputs, qs = model.forward_frame(grid, text, tracks)
        final = outputs[-1]
        targets = FrameTargets(
            category_cols=np.array([col_of[r.category_id] for r in recs], dtype=np.intp),
            category_ids=np.array([r.category_id for r in recs], dtype=np.intp),
            boxes=(np.array([r.box.as_array() for r in recs])
                   if recs else np.zeros((0, 4))),
            gt_ids=[r.track_id for r in recs],
        )
        match, track_assign = match_frame(final, qs.n_detect, carried, targets, weights)
        losses.append(frame_loss(outputs, qs.n_detect, track_assign, targets,
                                 match, weights, bank))
        total_targets += targets.count
        if propagate and t + 1 < scenario.num_frames:
            keep = list(range(qs.n_detect, qs.size)) + [q for q, _ in match.pairs]
            ids = carried + [targets.gt_ids[g] for _, g in match.pairs]
            tracks = model.propagate_tracks(final, qs, keep, ids, rng)
            carried = ids
    return sequence_loss(losses, total_targets), total_targets


def build_epoch_clips(bank: CategoryBank, cfg: TrainConfig, augment: AugmentConfig,
                      epoch: int) -> list[Scenario]:
    """Generate one epoch of clips under the length schedule and mosaics."""
    length = sampler_schedule(epoch, augment)
    clips = []
    for c in range(cfg.clips_per_epoch):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, epoch, c, 9)))
        motion = cfg.motion
        if motion == "mixed":
            motion = ("linear", "crossing", "enter_exit")[int(rng.integers(3))]
        if motion == "enter_exit" and length < 4:
            motion = "linear"

        def gen():
            return generate_scenario(cfg.num_objects, length, motion, bank,
                                     seed=int(rng.integers(2 ** 31)))

        if rng.random() < augment.mosaic_probability:
            scn = dynamic_mosaic([gen() for _ in range(4)], augment,
                                 seed=int(rng.integers(2 ** 31)))
        else:
            scn = gen()
        marked = mark_rarely_overlapping(scn)
        scn = random_occlusion(scn, marked, augment, seed=int(rng.integers(2 ** 31)))
        clips.append(scn)
    return clips


@dataclass(frozen=True)
class StepLog:
    step: int
    epoch: int
    loss: float
    grad_norm: float


def fixed_overfit_suite():
    """Canonical memorization experiment: model, bank, clips, schedule.

    Twenty pinned five-frame clips of three objects each, alternating
    crossing and enter-exit motion, every fourth clip a four-way mosaic,
    occlusion applied throughout. The model sees all base categories as
    prompts every step and renders without noise, so the dataset is a
    fixed set of tensors a correct implementation can drive to a small
    fraction of its starting loss inside the epoch budget.
    """
    from .bank import build_surrogate_bank
    from .model import ModelConfig, TrackingModel

    bank = build_surrogate_bank(14, 2, 32, 0.95, crops_per_category=4, seed=7)
    model_cfg = ModelConfig(category_sample_size=14, rasterize_noise=0.0)
    model = TrackingModel(model_cfg)
    augment = AugmentConfig()
    clips = []
    for i in range(20):
        motion = "crossing" if i % 2 == 0 else "enter_exit"
        if i % 4 == 3:
            parts = [generate_scenario(3, 5, motion, bank, seed=1000 + 4 * i + j)
                     for j in range(4)]
            scn = dynamic_mosaic(parts, augment, seed=500 + i)
        else:
            scn = generate_scenario(3, 5, motion, bank, seed=100 + i)
        marked = mark_rarely_overlapping(scn)
        clips.append(random_occlusion(scn, marked, augment, seed=300 + i))
    train_cfg = TrainConfig(lr=6e-3, weight_decay=1e-4, grad_clip=10.0,
                            epochs=300, decay_epoch=220, detection_epochs=150,
                            clips_per_epoch=len(clips), seed=0)
    return model, bank, clips, train_cfg


def history_to_text(history: Sequence[StepLog]) -> str:
    lines = [f"{h.step} {h.loss:.6f}" for h in history]
    return "\n".join(lines) + ("\n" if lines else "")


def fit(model: TrackingModel, bank: CategoryBank, cfg: TrainConfig,
        augment: Optional[AugmentConfig] = None,
        clips: Optional[Sequence[Scenario]] = None,
        weights: Optional[LossWeights] = None,
        on_epoch: Optional[Callable[[int, float], None]] = None) -> List[StepLog]:
    """Run the full schedule; returns the per-step loss history.

    ``clips`` pins a fixed clip set for every epoch (no regeneration, no
    augmentation), which is the overfitting setup; otherwise each epoch
    draws fresh augmented clips from its own seed stream.
    """
    cfg.validate()
    augment = augment if augment is not None else AugmentConfig()
    weights = weights if weights is not None else LossWeights()
    opt = GradientDescent(model.store, cfg.weight_decay, cfg.grad_clip)
    history: List[StepLog] = []
    step = 0
    try:
        for epoch in range(cfg.epochs):
            phase = phase_for_epoch(epoch, cfg)
            apply_freeze(model.store, phase)
            lr = cfg.lr
            if 0 <= cfg.decay_epoch <= epoch:
                lr = cfg.lr * 0.1
            epoch_clips = clips if clips is not None else build_epoch_clips(
                bank, cfg, augment, epoch)
            if phase == "detection":
                # one update per frame: detection ignores temporal context
                units = [(ci, clip_window(scn, t, 1), t)
                         for ci, scn in enumerate(epoch_clips)
                         for t in range(scn.num_frames)]
            else:
                # whole-clip units; the frame key must stay clear of real indices
                units = [(ci, scn, WHOLE_CLIP) for ci, scn in enumerate(epoch_clips)]
            epoch_total = 0.0
            for clip_idx, scenario, frame in units:
                rng = np.random.default_rng(
                    np.random.SeedSequence((cfg.seed, epoch, clip_idx, frame)))
                model.store.zero_grads()
                loss, _ = clip_loss(model, bank, scenario, weights, rng,
                                    propagate=(phase == "tracking"))
                value = float(loss.data)
                if not np.isfinite(value):
                    raise RuntimeError(
                        f"non-finite loss {value!r} at epoch {epoch} clip {clip_idx}")
                ad.backward(loss)
                grad_norm = opt.step(lr)
                history.append(StepLog(step, epoch, value, grad_norm))
                step += 1
                epoch_total += value
            if on_epoch is not None:
                on_epoch(epoch, epoch_total / max(1, len(units)))
    finally:
        apply_freeze(model.store, "all")
    return history
