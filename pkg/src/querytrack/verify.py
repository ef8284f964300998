"""Built-in self checks behind the ``verify`` subcommand.

Each suite re-derives a core contract with an independent method (double
loops, exhaustive assignment enumeration, scripted confidences, hand
counted metrics) and compares the production code against it. A check
yields (name, passed, detail); the CLI renders one line per check.
"""

from __future__ import annotations

import itertools
from typing import Callable, List, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, finite_diff_check
from .bank import build_surrogate_bank
from .encoder import TextFeatures, rasterize_scene
from .geometry import Box
from .isolation import (category_isolation_mask, content_isolation_mask,
                        difference_matrix)
from .losses import LossWeights, hungarian_match
from .metrics import dump_from_scenario, evaluate
from .model import ModelConfig, TrackingModel
from .runtime import RuntimeConfig, TrackDump, TrackLedger, TrackRecord, lifecycle_step
from .scenario import Scenario, ScenarioRecord, generate_scenario
from .training import clip_loss

CheckResult = Tuple[str, bool, str]


# ---------------------------------------------------------------------------
# gradients


def check_grad() -> List[CheckResult]:
    cfg = ModelConfig(d_model=16, heads=2, ffn_hidden=24, fusion_layers=1,
                      decoder_layers=2, num_queries=3, grid_rows=4, grid_cols=4,
                      category_sample_size=2, rasterize_noise=0.0, seed=3)
    model = TrackingModel(cfg)
    bank = build_surrogate_bank(num_base=3, num_novel=0, dim=16, alignment=0.9, seed=5)
    scenario = generate_scenario(2, 2, "linear", bank, seed=11)
    weights = LossWeights()

    def loss_fn() -> Tensor:
        rng = np.random.default_rng(0)
        loss, _ = clip_loss(model, bank, scenario, weights, rng, propagate=True)
        return loss

    err = finite_diff_check(loss_fn, model.store, samples_per_param=2)
    ok = err < 1e-4
    return [("grad/full-loss-finite-diff", ok, f"max rel err {err:.3e} (limit 1e-4)")]


# ---------------------------------------------------------------------------
# masks


def _difference_double_loop(probs: np.ndarray) -> np.ndarray:
    floor = 1e-12
    n = probs.shape[0]
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            p = np.maximum(probs[i], floor)
            q = np.maximum(probs[j], floor)
            forward = np.sum(probs[i] * (np.log(p) - np.log(q)))
            reverse = np.sum(probs[j] * (np.log(q) - np.log(p)))
            out[i, j] = forward + reverse
    return out


def check_masks() -> List[CheckResult]:
    results: List[CheckResult] = []
    rng = np.random.default_rng(21)

    worst = 0.0
    for _ in range(20):
        n, m = int(rng.integers(2, 12)), int(rng.integers(2, 6))
        raw = rng.random((n, m)) + 1e-3
        probs = raw / raw.sum(axis=1, keepdims=True)
        fast = difference_matrix(probs).values
        slow = _difference_double_loop(probs)
        worst = max(worst, float(np.abs(fast - slow).max()))
    results.append(("masks/difference-double-loop", worst < 1e-10,
                    f"max abs diff {worst:.3e} (limit 1e-10)"))

    bad = 0
    for _ in range(50):
        n = int(rng.integers(2, 8))
        raw = rng.random((n, 4)) + 1e-3
        probs = raw / raw.sum(axis=1, keepdims=True)
        n_track = int(rng.integers(0, n + 1))
        diff = difference_matrix(probs)
        mask = category_isolation_mask(diff, 1.0, slice(n - n_track, n))
        for i in range(n):
            for j in range(n):
                want = diff.values[i, j] > diff.mean and i != j
                if n - n_track <= i < n and n - n_track <= j < n:
                    want = False
                if i == j:
                    want = False
                if bool(mask[i, j]) != want:
                    bad += 1
    results.append(("masks/category-brute-force", bad == 0, f"{bad} cell mismatches"))

    ok = True
    for nd, nt in [(0, 3), (3, 0), (2, 2), (5, 1)]:
        mask = content_isolation_mask(nd, nt)
        expect = 2 * nd * nt
        if int(mask.sum()) != expect or mask.shape != (nd + nt, nd + nt):
            ok = False
    results.append(("masks/content-block-structure", ok, "cross blocks only"))
    return results


# ---------------------------------------------------------------------------
# matching


def exhaustive_match_cost(cost: np.ndarray) -> float:
    """Minimum assignment cost by brute enumeration (small matrices only)."""
    n, g = cost.shape
    k = min(n, g)
    best = np.inf
    if n <= g:
        for cols in itertools.permutations(range(g), k):
            best = min(best, sum(cost[i, cols[i]] for i in range(k)))
    else:
        for rows in itertools.permutations(range(n), k):
            best = min(best, sum(cost[rows[j], j] for j in range(k)))
    return float(best)


def check_match() -> List[CheckResult]:
    rng = np.random.default_rng(33)
    worst = 0.0
    bad_pairs = 0
    trials = 400
    for _ in range(trials):
        n, g = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        cost = rng.random((n, g)) * 10 - 5
        res = hungarian_match(cost)
        brute = exhaustive_match_cost(cost)
        worst = max(worst, abs(res.total_cost - brute))
        if len(res.pairs) != min(n, g):
            bad_pairs += 1
    ok = worst < 1e-9 and bad_pairs == 0
    return [("match/exhaustive-agreement", ok,
             f"{trials} trials, max cost gap {worst:.2e}, {bad_pairs} size errors")]


# ---------------------------------------------------------------------------
# lifecycle


def _dummy_box() -> Box:
    return Box(0.5, 0.5, 0.2, 0.2)


def check_lifecycle() -> List[CheckResult]:
    results: List[CheckResult] = []
    box = _dummy_box()

    for tau_det, tau_tr, t_miss in [(0.5, 0.5, 1), (0.3, 0.5, 3), (0.7, 0.3, 2)]:
        cfg = RuntimeConfig(tau_det=tau_det, tau_tr=tau_tr, t_miss=t_miss)
        ledger = TrackLedger(cfg)
        ok = True
        notes = []

        # birth requires strictly exceeding tau_det
        lifecycle_step(ledger, [], [], [], [tau_det], [box], [0])
        if ledger.states:
            ok, notes = False, [f"birth at conf == tau_det {tau_det}"]
        lifecycle_step(ledger, [], [], [], [tau_det + 0.05], [box], [0])
        if len(ledger.states) != 1 or ledger.states[0].track_id != 0:
            ok, notes = False, ["birth above tau_det failed"]

        # misses accumulate and removal lands exactly on t_miss
        for step in range(t_miss):
            before = len(ledger.states)
            lifecycle_step(ledger, [tau_tr], [box], [0], [], [], [])
            still = len(ledger.states)
            if step < t_miss - 1 and still != before:
                ok, notes = False, [f"removed after {step + 1} misses, t_miss {t_miss}"]
            if step == t_miss - 1 and still != 0:
                ok, notes = False, [f"survived {t_miss} misses"]
        # a rebirth mints a fresh id
        lifecycle_step(ledger, [], [], [], [0.99], [box], [0])
        if ledger.states and ledger.states[0].track_id == 0:
            ok, notes = False, ["track id reused after removal"]

        label = f"lifecycle/det{tau_det}-tr{tau_tr}-miss{t_miss}"
        results.append((label, ok, "; ".join(notes) if notes else "birth/decay/removal"))

    # refresh resets the miss counter and keeps the id
    cfg = RuntimeConfig(tau_det=0.5, tau_tr=0.5, t_miss=3)
    ledger = TrackLedger(cfg)
    lifecycle_step(ledger, [], [], [], [0.9], [box], [0])
    lifecycle_step(ledger, [0.2], [box], [0], [], [], [])
    lifecycle_step(ledger, [0.2], [box], [0], [], [], [])
    lifecycle_step(ledger, [0.9], [box], [0], [], [], [])
    ok = (len(ledger.states) == 1 and ledger.states[0].track_id == 0
          and ledger.states[0].miss_count == 0 and ledger.states[0].active)
    for _ in range(2):
        lifecycle_step(ledger, [0.2], [box], [0], [], [], [])
    ok = ok and len(ledger.states) == 1  # two misses, third pending
    results.append(("lifecycle/refresh-resets-miss", ok,
                    "reactivation keeps id and clears the count"))
    return results


# ---------------------------------------------------------------------------
# metrics


def _switch_oracle() -> Tuple[float, int]:
    frames = 10
    gt_records = []
    pred_records = []
    for t in range(frames):
        a = Box(0.2 + 0.02 * t, 0.3, 0.1, 0.1)
        b = Box(0.7, 0.4 + 0.02 * t, 0.1, 0.1)
        gt_records += [ScenarioRecord(t, 0, 0, a), ScenarioRecord(t, 1, 1, b)]
        pred_a_id = 100 if t < 6 else 300   # identity swap on track 0 at frame 6
        pred_records += [TrackRecord(t, pred_a_id, 0, a, 0.9),
                         TrackRecord(t, 200, 1, b, 0.9)]
    gt = Scenario(num_frames=frames, records=gt_records)
    dump = TrackDump(records=pred_records)
    report = evaluate(gt, dump)
    return report.mota, report.id_switches


def check_metrics() -> List[CheckResult]:
    results: List[CheckResult] = []
    mota, switches = _switch_oracle()
    ok = abs(mota - 0.95) < 1e-9 and switches == 1
    results.append(("metrics/switch-oracle", ok,
                    f"MOTA {mota:.4f} (want 0.95), switches {switches} (want 1)"))

    bank = build_surrogate_bank(num_base=6, num_novel=0, dim=16, alignment=0.9, seed=2)
    bad = 0
    for s in range(5):
        scn = generate_scenario(3, 6, ("linear", "crossing", "enter_exit")[s % 3],
                                bank, seed=s)
        rep = evaluate(scn, dump_from_scenario(scn))
        if not (rep.mota == 1.0 and rep.idf1 == 1.0 and rep.id_switches == 0):
            bad += 1
    results.append(("metrics/self-evaluation", bad == 0,
                    f"{bad} of 5 self evaluations imperfect"))
    return results


SUITES: dict[str, Callable[[], List[CheckResult]]] = {
    "grad": check_grad,
    "masks": check_masks,
    "match": check_match,
    "lifecycle": check_lifecycle,
    "metrics": check_metrics,
}


def run_suites(names: List[str]) -> List[CheckResult]:
    results: List[CheckResult] = []
    for name in names:
        if name not in SUITES:
            raise ValueError(f"unknown verify suite {name!r} "
                             f"(choose from {', '.join(sorted(SUITES))}, all)")
        results.extend(SUITES[name]())
    return results
