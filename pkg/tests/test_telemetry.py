import math

import numpy as np
import pytest

from viotsim.telemetry import (
    AnomalyKind,
    ContextSpec,
    FeatureSpec,
    NORMAL_LABEL,
    WindowBoundsError,
    generate_context,
    generate_stream,
    inject_anomaly,
    plan_anomaly_windows,
    stream_to_csv,
)

FEATURES = (
    FeatureSpec(name="speed_kmh", role="speed", mean=62.0, sigma=4.0, reversion=0.12),
    FeatureSpec(name="engine_temp_c", role="engine_temp", mean=92.0, sigma=2.5, reversion=0.08),
    FeatureSpec(name="brake_kpa", role="brake_pressure", mean=140.0, sigma=9.0, reversion=0.2),
    FeatureSpec(name="heading_deg", role="heading", mean=180.0, sigma=15.0, reversion=0.05),
)


class TestGenerateStream:
    def test_zero_steps(self):
        stream = generate_stream("SV-1", 0, 1, FEATURES)
        assert len(stream) == 0

    def test_deterministic(self):
        a = generate_stream("SV-1", 100, 5, FEATURES)
        b = generate_stream("SV-1", 100, 5, FEATURES)
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(a.labels, b.labels)

    def test_all_labels_normal(self):
        stream = generate_stream("SV-1", 50, 5, FEATURES)
        assert (stream.labels == NORMAL_LABEL).all()
        assert stream.label_at(0) is None

    def test_sample_mean_matches_process_mean(self):
        # Oracle: for the AR(1) x_{t+1} = x_t + r(mean - x_t) + w_t with
        # stationary std sigma, the variance of the sample mean over n steps is
        # approximately (sigma^2 / n) * (1 + phi) / (1 - phi), phi = 1 - r.
        n = 10_000
        stream = generate_stream("SV-1", n, 123, FEATURES)
        for j, spec in enumerate(FEATURES):
            phi = 1.0 - spec.reversion
            se = math.sqrt(spec.sigma ** 2 / n * (1 + phi) / (1 - phi))
            assert abs(stream.values[:, j].mean() - spec.mean) < 3 * se, spec.name

    def test_sample_std_matches_stationary_std(self):
        stream = generate_stream("SV-2", 10_000, 9, FEATURES)
        for j, spec in enumerate(FEATURES):
            assert stream.values[:, j].std() == pytest.approx(spec.sigma, rel=0.15), spec.name

    def test_negative_steps_rejected(self):
        with pytest.raises(ValueError):
            generate_stream("SV-1", -1, 1, FEATURES)


class TestInjectAnomaly:
    def stream(self, steps=200, seed=3):
        return generate_stream("SV-1", steps, seed, FEATURES)

    def test_window_label_count(self):
        out = inject_anomaly(self.stream(), AnomalyKind.CONGESTION, (10, 20), 1)
        assert int((out.labels != NORMAL_LABEL).sum()) == 10
        assert out.label_at(10) is AnomalyKind.CONGESTION

    def test_empty_window_unchanged(self):
        stream = self.stream()
        out = inject_anomaly(stream, AnomalyKind.COLLISION, (5, 5), 1)
        assert out is stream

    def test_out_of_bounds(self):
        with pytest.raises(WindowBoundsError):
            inject_anomaly(self.stream(), AnomalyKind.COLLISION, (190, 201), 1)
        with pytest.raises(WindowBoundsError):
            inject_anomaly(self.stream(), AnomalyKind.COLLISION, (-1, 5), 1)

    def test_outside_window_bitwise_untouched(self):
        stream = self.stream()
        out = inject_anomaly(stream, AnomalyKind.MALICIOUS_ATTACK, (50, 80), 1)
        assert np.array_equal(out.values[:50], stream.values[:50])
        assert np.array_equal(out.values[80:], stream.values[80:])
        assert (out.labels[:50] == NORMAL_LABEL).all()

    def test_congestion_suppresses_speed(self):
        # Oracle: baseline mean/std recomputed from the unperturbed stream.
        stream = self.stream(steps=2000, seed=11)
        speed = stream.values[:, 0]
        baseline_mean, baseline_std = speed.mean(), speed.std()
        out = inject_anomaly(stream, AnomalyKind.CONGESTION, (100, 200), 2)
        inside = out.values[100:200, 0]
        assert inside.mean() < baseline_mean - 4 * baseline_std

    def test_fraction_identity(self):
        stream = self.stream(steps=400)
        out = inject_anomaly(stream, AnomalyKind.BREAKDOWN, (17, 103), 5)
        assert out.anomalous_fraction() == (103 - 17) / 400

    @pytest.mark.parametrize("kind,role_col,direction", [
        (AnomalyKind.COLLISION, 2, +1),          # brake spike
        (AnomalyKind.TRAFFIC_VIOLATION, 0, +1),  # speed above limit
        (AnomalyKind.BREAKDOWN, 1, +1),          # temperature ramp
    ])
    def test_shift_kinds_exceed_four_sigma(self, kind, role_col, direction):
        stream = self.stream(steps=500, seed=13)
        spec = FEATURES[role_col]
        out = inject_anomaly(stream, kind, (100, 160), 7)
        shift = direction * (out.values[100:160, role_col] - stream.values[100:160, role_col])
        if kind is AnomalyKind.TRAFFIC_VIOLATION:
            assert (out.values[100:160, 0] >= spec.mean + 4 * spec.sigma).all()
        else:
            assert (shift >= 4 * spec.sigma - 1e-9).all()

    def test_malicious_attack_moves_every_feature(self):
        stream = self.stream(steps=300, seed=17)
        out = inject_anomaly(stream, AnomalyKind.MALICIOUS_ATTACK, (50, 90), 3)
        for j, spec in enumerate(FEATURES):
            deviation = np.abs(out.values[50:90, j] - spec.mean)
            assert (deviation >= 4 * spec.sigma - 1e-9).all(), spec.name

    def test_fatigue_oscillates_heading(self):
        stream = self.stream(steps=300, seed=19)
        out = inject_anomaly(stream, AnomalyKind.DRIVER_FATIGUE, (40, 120), 3)
        delta = out.values[40:120, 3] - stream.values[40:120, 3]
        assert (np.abs(delta) >= 4 * FEATURES[3].sigma - 1e-9).all()
        assert (delta > 0).any() and (delta < 0).any()

    def test_deterministic(self):
        a = inject_anomaly(self.stream(), AnomalyKind.COLLISION, (10, 40), 21)
        b = inject_anomaly(self.stream(), AnomalyKind.COLLISION, (10, 40), 21)
        assert np.array_equal(a.values, b.values)


class TestPlanAnomalyWindows:
    def test_exact_budget(self):
        windows = plan_anomaly_windows(1000, 0.05, tuple(AnomalyKind), 10, 30, 5)
        total = sum(end - start for _, start, end in windows)
        assert total == 50

    def test_zero_fraction(self):
        assert plan_anomaly_windows(1000, 0.0, tuple(AnomalyKind), 10, 30, 5) == []

    def test_non_overlapping_and_sorted(self):
        windows = plan_anomaly_windows(2000, 0.1, tuple(AnomalyKind), 10, 40, 9)
        last_end = -1
        for _, start, end in windows:
            assert start > last_end
            last_end = end

    def test_deterministic(self):
        a = plan_anomaly_windows(1000, 0.05, tuple(AnomalyKind), 10, 30, 5)
        b = plan_anomaly_windows(1000, 0.05, tuple(AnomalyKind), 10, 30, 5)
        assert a == b


class TestGenerateContext:
    SPEC = ContextSpec(intersections=3, light_period=10,
                       policy_flags=("speed-limit-50", "restricted-zone", "school-zone"))

    def test_zero_steps(self):
        assert len(generate_context("region-1", 0, 1, self.SPEC)) == 0

    def test_deterministic(self):
        a = generate_context("region-1", 200, 4, self.SPEC)
        b = generate_context("region-1", 200, 4, self.SPEC)
        assert np.array_equal(a.weather, b.weather)
        assert np.array_equal(a.light_states, b.light_states)
        assert a.active_flags == b.active_flags

    def test_light_period_exact(self):
        stream = generate_context("region-1", 1000, 4, self.SPEC)
        period = self.SPEC.light_period
        for t in range(1000 - period):
            assert (stream.light_states[t] == stream.light_states[t + period]).all()

    def test_flags_subset_of_declared(self):
        stream = generate_context("region-1", 10, 4, self.SPEC)
        assert set(stream.active_flags) <= set(self.SPEC.policy_flags)

    def test_record_accessor(self):
        stream = generate_context("region-1", 10, 4, self.SPEC)
        record = stream.record(3)
        assert record.t == 3
        assert len(record.light_states) == 3
        assert all(state in (0, 1, 2) for state in record.light_states)


def test_csv_export_round_digits(tmp_path):
    stream = generate_stream("SV-1", 5, 1, FEATURES)
    stream = inject_anomaly(stream, AnomalyKind.CONGESTION, (2, 4), 1)
    path = tmp_path / "stream.csv"
    stream_to_csv(stream, path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "speed_kmh,engine_temp_c,brake_kpa,heading_deg,label"
    assert len(lines) == 6
    assert lines[1].endswith("normal")
    assert lines[3].endswith("congestion")
    cell = lines[1].split(",")[0]
    assert float(cell) == pytest.approx(stream.values[0, 0], rel=1e-8)
