import numpy as np
import pytest

from querytrack.bank import build_surrogate_bank
from querytrack.geometry import Box
from querytrack.model import ModelConfig, TrackingModel
from querytrack.runtime import (RuntimeConfig, TrackDump, TrackLedger, TrackRecord,
                                Tracker, lifecycle_step, run_sequence)
from querytrack.scenario import generate_scenario

B = Box(0.5, 0.5, 0.2, 0.2)


def ledger(tau_det=0.5, tau_tr=0.5, t_miss=3):
    return TrackLedger(RuntimeConfig(tau_det=tau_det, tau_tr=tau_tr, t_miss=t_miss))


class TestLedger:
    def test_spawn_assigns_monotonic_ids(self):
        led = ledger()
        a = led.spawn(0.9, B, 2)
        b = led.spawn(0.8, B, 1)
        assert (a.track_id, b.track_id) == (0, 1)

    def test_ids_never_reused_after_removal(self):
        led = ledger(t_miss=1)
        led.spawn(0.9, B, 0)
        led.update([0.1], [B], [0])          # miss -> removed immediately
        assert led.states == []
        again = led.spawn(0.9, B, 0)
        assert again.track_id == 1

    def test_refresh_resets_miss_count_and_reactivates(self):
        led = ledger(t_miss=3)
        led.spawn(0.9, B, 0)
        led.update([0.2], [B], [0])
        assert not led.states[0].active and led.states[0].miss_count == 1
        led.update([0.8], [B], [0])
        assert led.states[0].active and led.states[0].miss_count == 0

    def test_removal_exactly_at_t_miss(self):
        led = ledger(t_miss=3)
        led.spawn(0.9, B, 0)
        led.update([0.0], [B], [0])
        led.update([0.0], [B], [0])
        assert len(led.states) == 1          # two misses: still held
        led.update([0.0], [B], [0])
        assert led.states == []              # third miss: gone

    def test_refresh_replaces_box_and_category(self):
        led = ledger()
        led.spawn(0.9, B, 0)
        new_box = Box(0.7, 0.7, 0.1, 0.1)
        led.update([0.95], [new_box], [3])
        st = led.states[0]
        assert st.category_id == 3 and st.box is new_box and st.score == 0.95

    def test_threshold_is_strict(self):
        led = ledger(tau_tr=0.5)
        led.spawn(0.9, B, 0)
        led.update([0.5], [B], [0])          # equal is not enough
        assert not led.states[0].active

    def test_update_length_mismatch(self):
        led = ledger()
        led.spawn(0.9, B, 0)
        with pytest.raises(ValueError):
            led.update([0.9, 0.8], [B, B], [0, 0])

    def test_config_validation(self):
        with pytest.raises(ValueError):
            RuntimeConfig(tau_det=0.0).validate()
        with pytest.raises(ValueError):
            RuntimeConfig(tau_tr=1.0).validate()
        with pytest.raises(ValueError):
            RuntimeConfig(t_miss=0).validate()


class TestLifecycleStep:
    def test_birth_above_tau_det_only(self):
        led = ledger(tau_det=0.6)
        survivors, born = lifecycle_step(led, [], [], [],
                                         [0.7, 0.6, 0.59], [B, B, B], [0, 1, 2])
        assert born == [0] and survivors == []
        assert len(led.states) == 1 and led.states[0].category_id == 0

    def test_survivors_then_births_ordering(self):
        led = ledger(tau_det=0.5, tau_tr=0.5, t_miss=2)
        led.spawn(0.9, B, 0)
        led.spawn(0.9, B, 1)
        survivors, born = lifecycle_step(led, [0.8, 0.1], [B, B], [0, 1],
                                         [0.9], [Box(0.3, 0.3, 0.1, 0.1)], [2])
        assert survivors == [0, 1]           # the missing track is held, not removed
        assert born == [0]
        assert [st.track_id for st in led.states] == [0, 1, 2]

    def test_scripted_grid_lifecycle(self):
        # births at tau_det, inactivation at tau_tr, removal at exactly t_miss
        for tau_det in (0.3, 0.5, 0.7):
            for tau_tr in (0.3, 0.5):
                for t_miss in (1, 3, 5):
                    led = ledger(tau_det, tau_tr, t_miss)
                    lifecycle_step(led, [], [], [], [tau_det + 0.01], [B], [0])
                    assert len(led.states) == 1
                    for k in range(t_miss - 1):
                        lifecycle_step(led, [tau_tr - 0.01], [B], [0], [], [], [])
                        assert len(led.states) == 1, (tau_det, tau_tr, t_miss, k)
                    lifecycle_step(led, [tau_tr - 0.01], [B], [0], [], [], [])
                    assert led.states == []


class TestDump:
    def test_text_round_trip(self):
        dump = TrackDump(records=[
            TrackRecord(0, 0, 2, Box(0.5, 0.5, 0.2, 0.2), 0.912),
            TrackRecord(1, 0, 2, Box(0.52, 0.5, 0.2, 0.2), 0.87),
        ])
        back = TrackDump.from_text(dump.to_text())
        assert len(back.records) == 2
        assert back.records[0].track_id == 0 and back.records[0].score == pytest.approx(0.912)
        assert back.num_frames() == 2

    def test_empty_dump(self):
        assert TrackDump.from_text("").records == []
        assert TrackDump().to_text() == ""
        assert TrackDump().num_frames() == 0

    def test_malformed_line(self):
        with pytest.raises(ValueError, match="8 fields"):
            TrackDump.from_text("0 1 2 0.5 0.5\n")


@pytest.fixture(scope="module")
def small_world():
    bank = build_surrogate_bank(4, 1, 16, 0.9, seed=0)
    cfg = ModelConfig(d_model=16, heads=2, ffn_hidden=32, fusion_layers=1,
                      decoder_layers=2, num_queries=6, grid_rows=4, grid_cols=4,
                      category_sample_size=4, rasterize_noise=0.0)
    return TrackingModel(cfg), bank


class TestTracker:
    def test_emissions_clear_their_gate(self, small_world):
        model, bank = small_world
        scn = generate_scenario(2, 3, "linear", bank, seed=3)
        cfg = RuntimeConfig(tau_det=0.9, tau_tr=0.5)
        dump = run_sequence(model, bank, scn, cfg, seed=0)
        seen = set()
        for r in dump.records:
            gate = cfg.tau_tr if r.track_id in seen else cfg.tau_det
            assert r.score > gate
            seen.add(r.track_id)

    def test_deterministic_under_seed(self, small_world):
        model, bank = small_world
        scn = generate_scenario(2, 3, "linear", bank, seed=3)
        a = run_sequence(model, bank, scn, RuntimeConfig(), seed=5)
        b = run_sequence(model, bank, scn, RuntimeConfig(), seed=5)
        assert a.to_text() == b.to_text()

    def test_low_threshold_births_capped_by_queries(self, small_world):
        model, bank = small_world
        scn = generate_scenario(1, 2, "linear", bank, seed=1)
        dump = run_sequence(model, bank, scn, RuntimeConfig(tau_det=0.01, tau_tr=0.01),
                            seed=2)
        frame0_ids = {r.track_id for r in dump.frame_records(0)}
        assert len(frame0_ids) <= model.cfg.num_queries

    def test_tracker_state_carries_between_steps(self, small_world):
        from querytrack.encoder import rasterize_scene
        model, bank = small_world
        tracker = Tracker(model, bank, RuntimeConfig(tau_det=0.01, tau_tr=0.01))
        scn = generate_scenario(1, 2, "linear", bank, seed=1)
        grid0 = rasterize_scene(scn.frame_objects(0), bank, 4, 4, 0.0)
        tracker.step(grid0)
        if tracker.ledger.states:
            assert tracker._content is not None
            assert tracker._content.shape[0] == len(tracker.ledger.states)
        grid1 = rasterize_scene(scn.frame_objects(1), bank, 4, 4, 0.0)
        recs = tracker.step(grid1)
        assert all(r.frame == 1 for r in recs)
