"""Generator invariants: determinism, spectra, ground-truth recoverability."""

import math

import numpy as np
import pytest
import scipy.signal as sps
import scipy.stats

from eegmotion import synth
from eegmotion.data import EEG_FS, KIN_FS, compute_rt, remove_rt_outliers
from eegmotion.synth import CohortConfig, generate_cohort, generate_subject

SMALL = CohortConfig(n_subjects=2, trials_per_mode=30, seed=7)


@pytest.fixture(scope="module")
def subject():
    return generate_subject(SMALL, 0, return_truth=True)


@pytest.fixture(scope="module")
def cohort():
    return generate_cohort(CohortConfig(n_subjects=3, trials_per_mode=24, seed=3))


def raw_windows(rec, rows, pre_seconds=0.5):
    """Unprocessed EEG windows ending at each true movement onset."""
    width = int(pre_seconds * EEG_FS)
    wins, labels = [], []
    for r in rows:
        stop = int(round(r["movement_onset_s"] * EEG_FS))
        wins.append(rec.eeg[:, stop - width : stop])
        labels.append(1 if r["mode"] == "active" else 0)
    return np.stack(wins), np.array(labels)


class TestConfig:
    def test_defaults_match_study_size(self):
        cfg = CohortConfig()
        assert cfg.n_subjects == 13
        assert cfg.trials_per_mode == 210

    def test_validation(self):
        with pytest.raises(ValueError, match="n_subjects"):
            CohortConfig(n_subjects=1)
        with pytest.raises(ValueError, match="snr"):
            CohortConfig(snr=-0.1)
        with pytest.raises(ValueError, match="trials_per_mode"):
            CohortConfig(trials_per_mode=0)


class TestStructure:
    def test_stream_shapes_and_rates(self, subject):
        rec, rows = subject
        assert rec.eeg.shape[0] == 128
        assert rec.eeg.dtype == np.float32
        assert rec.kinematics.shape[0] == 4
        assert abs(rec.eeg.shape[1] / EEG_FS - rec.kinematics.shape[1] / KIN_FS) < 0.1
        assert len(rows) == 60

    def test_modes_are_balanced_and_interleaved(self, subject):
        _, rows = subject
        modes = [r["mode"] for r in rows]
        assert modes.count("active") == 30
        assert modes.count("passive") == 30
        assert modes != ["active"] * 30 + ["passive"] * 30

    def test_events_are_ordered(self, subject):
        rec, _ = subject
        stim = rec.events.stimulus_sample
        move = rec.events.movement_sample
        assert np.all(np.diff(stim) > 0)
        assert np.all(move > stim)

    def test_subject_index_validated(self):
        with pytest.raises(ValueError, match="subject_index"):
            generate_subject(SMALL, 2)


class TestDeterminism:
    def test_regeneration_is_bitwise(self, subject):
        rec, rows = subject
        again, rows2 = generate_subject(SMALL, 0, return_truth=True)
        assert np.array_equal(rec.eeg, again.eeg)
        assert np.array_equal(rec.kinematics, again.kinematics)
        assert rows == rows2

    def test_subjects_differ(self, subject):
        rec, _ = subject
        other = generate_subject(SMALL, 1)
        assert rec.eeg.shape != other.eeg.shape or not np.array_equal(
            rec.eeg, other.eeg
        )

    def test_seed_changes_cohort(self):
        a = generate_subject(CohortConfig(n_subjects=2, trials_per_mode=5, seed=1), 0)
        b = generate_subject(CohortConfig(n_subjects=2, trials_per_mode=5, seed=2), 0)
        assert a.eeg.shape != b.eeg.shape or not np.array_equal(a.eeg, b.eeg)


class TestSpectra:
    def test_background_is_pink_with_alpha_peak(self, subject):
        rec, _ = subject
        for ch in (40, 100, 127):  # away from frontal blinks and central drift
            f, p = sps.welch(rec.eeg[ch].astype(np.float64), fs=EEG_FS, nperseg=4096)
            band = (f >= 6) & (f <= 14)
            peak = f[band][np.argmax(p[band])]
            assert 9.0 <= peak <= 11.0
            fit = ((f >= 1.5) & (f <= 7.5)) | ((f >= 14) & (f <= 40))
            slope = np.polyfit(np.log(f[fit]), np.log(p[fit]), 1)[0]
            assert -1.5 < slope < -0.5

    def test_blinks_are_frontal_and_heavy_tailed(self, subject):
        rec, _ = subject
        assert scipy.stats.kurtosis(rec.eeg[0]) > 2.0
        assert scipy.stats.kurtosis(rec.eeg[100]) < 2.0


class TestGroundTruth:
    def test_rt_recovered_within_one_sample(self, cohort):
        recordings, truth = cohort
        by_id = {r.subject_id: r for r in recordings}
        hits = total = 0
        for row in truth:
            rt = compute_rt(by_id[row["subject_id"]].kinematics, row["stimulus_s"])
            total += 1
            hits += rt is not None and abs(rt - row["true_rt"]) <= 1 / KIN_FS + 1e-12
        assert hits / total >= 0.99

    def test_rt_median_matches_distribution(self, cohort):
        _, truth = cohort
        rts = [r["true_rt"] for r in truth if r["mode"] == "active"]
        analytic = 0.08 + math.exp(math.log(0.28))
        assert abs(np.median(rts) - analytic) / analytic < 0.10

    def test_passive_latencies_fall_below_rt_bounds(self, cohort):
        _, truth = cohort
        passive = [r["true_rt"] for r in truth if r["mode"] == "passive"]
        assert remove_rt_outliers(passive).kept_rts.size == 0
        active = [r["true_rt"] for r in truth if r["mode"] == "active"]
        assert remove_rt_outliers(active).kept_rts.size > 0.8 * len(active)

    def test_drift_onset_leads_movement_for_actives(self, cohort):
        _, truth = cohort
        for row in truth:
            if row["mode"] == "active":
                lead = row["movement_onset_s"] - row["drift_onset_s"]
                assert 0.10 - 1e-9 <= lead <= 0.45 + 1e-9
            else:
                assert math.isnan(row["drift_onset_s"])

    def test_fast_trials_get_earlier_drift_onset(self, cohort):
        _, truth = cohort
        act = [r for r in truth if r["mode"] == "active"]
        rts = np.array([r["true_rt"] for r in act])
        leads = np.array(
            [r["movement_onset_s"] - r["drift_onset_s"] for r in act]
        )
        fast, slow = rts < np.median(rts), rts >= np.median(rts)
        assert leads[fast].mean() > leads[slow].mean()


class TestClassSignal:
    def test_mean_amplitude_detector_separates_intent(self, subject):
        rec, rows = subject
        wins, labels = raw_windows(rec, rows)
        tail = int(0.25 * EEG_FS)
        feats = wins[:, 54:75, -tail:].mean(axis=(1, 2))
        cut = 0.5 * (feats[labels == 1].mean() + feats[labels == 0].mean())
        acc = ((feats < cut).astype(int) == labels).mean()
        assert acc >= 0.90

    def test_snr_zero_removes_the_signal(self):
        cfg = CohortConfig(n_subjects=2, trials_per_mode=30, seed=7, snr=0.0)
        rec, rows = generate_subject(cfg, 0, return_truth=True)
        wins, labels = raw_windows(rec, rows)
        tail = int(0.25 * EEG_FS)
        feats = wins[:, 54:75, -tail:].mean(axis=(1, 2))
        cut = 0.5 * (feats[labels == 1].mean() + feats[labels == 0].mean())
        acc = ((feats < cut).astype(int) == labels).mean()
        assert 0.3 <= acc <= 0.7

    def test_drift_amplitude_tracks_snr(self):
        base = CohortConfig(n_subjects=2, trials_per_mode=20, seed=5, snr=1.0)
        strong = CohortConfig(n_subjects=2, trials_per_mode=20, seed=5, snr=4.0)
        gap = []
        for cfg in (base, strong):
            rec, rows = generate_subject(cfg, 0, return_truth=True)
            wins, labels = raw_windows(rec, rows)
            tail = int(0.25 * EEG_FS)
            feats = wins[:, 54:75, -tail:].mean(axis=(1, 2))
            gap.append(feats[labels == 0].mean() - feats[labels == 1].mean())
        assert gap[1] > 2.0 * gap[0]


class TestCohortFiles:
    def test_round_trip(self, cohort, tmp_path):
        recordings, truth = cohort
        synth.save_cohort(recordings, truth, tmp_path / "c", config=None)
        back_recs, back_truth = synth.load_cohort(tmp_path / "c")
        assert [r.subject_id for r in back_recs] == ["s00", "s01", "s02"]
        for a, b in zip(recordings, back_recs):
            assert np.array_equal(a.eeg, b.eeg)
            assert np.array_equal(a.kinematics, b.kinematics)
        assert len(back_truth) == len(truth)
        for a, b in zip(truth, back_truth):
            assert a["mode"] == b["mode"] and a["trial_index"] == b["trial_index"]
            assert a["true_rt"] == pytest.approx(b["true_rt"], abs=1e-8)
            if a["mode"] == "passive":
                assert math.isnan(b["drift_onset_s"])

    def test_config_snapshot_written(self, cohort, tmp_path):
        recordings, truth = cohort
        cfg = CohortConfig(n_subjects=3, trials_per_mode=24, seed=3)
        synth.save_cohort(recordings, truth, tmp_path / "c", config=cfg)
        text = (tmp_path / "c" / "cohort_config.txt").read_text()
        assert "seed=3" in text and "trials_per_mode=24" in text
