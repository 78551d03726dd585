"""Tests for the scaling benchmark, error sweep and policy grid."""

import math

import numpy as np
import pytest

from bench import (
    BenchImpl,
    bench_attention,
    error_sweep,
    grid_sweep,
    parse_impl,
    quadratic_scratch_estimate,
)
from sink_analysis import detect_sinks_iterative
from tensor_core import ShapeError

FAST = dict(heads=1, head_dim=8, trials=1, warmups=0)


class TestParseImpl:
    def test_names(self):
        assert parse_impl("exact") == BenchImpl("exact")
        assert parse_impl(" FNA:16 ") == BenchImpl("fna", 16)
        assert parse_impl("fna").s == 64
        assert parse_impl("masked").quadratic

    @pytest.mark.parametrize("text", ["fast", "fna:0", "exact:3", "fna:x"])
    def test_rejects(self, text):
        with pytest.raises(ValueError):
            parse_impl(text)


class TestBenchAttention:
    def test_empty_lengths(self):
        with pytest.raises(ShapeError):
            bench_attention([])

    def test_length_below_two(self):
        with pytest.raises(ShapeError):
            bench_attention([1, 8])

    def test_record_cardinality(self):
        records = bench_attention([256, 512], batch=2, impls=["exact", "fna:64"], **FAST)
        assert [(r.impl, r.n) for r in records] == [
            ("exact", 256), ("fna:64", 256), ("exact", 512), ("fna:64", 512)]
        assert all(r.batch == 2 and not r.skipped and r.time_ms > 0 for r in records)
        assert all(r.scratch_bytes > 0 for r in records)

    def test_memory_cap_skips_quadratic_only(self):
        records = bench_attention([64], impls=["exact", "masked", "fna:8"], memory_cap=1, **FAST)
        by_impl = {r.impl: r for r in records}
        assert by_impl["exact"].skipped and by_impl["masked"].skipped
        assert math.isnan(by_impl["exact"].time_ms)
        assert by_impl["exact"].scratch_bytes == quadratic_scratch_estimate(64, 8)
        assert not by_impl["fna:8"].skipped

    def test_fna_scratch_grows_linearly(self):
        records = bench_attention([1024, 2048], impls=["fna:16"], **FAST)
        assert records[1].scratch_bytes / records[0].scratch_bytes <= 2.5

    @pytest.mark.slow
    def test_exact_scratch_grows_quadratically(self):
        records = bench_attention([2048, 4096], impls=["exact"], **FAST)
        assert records[1].scratch_bytes / records[0].scratch_bytes >= 3.2

    @pytest.mark.slow
    def test_time_trends(self):
        lengths = [1024, 2048, 4096, 8192]
        records = bench_attention(lengths, impls=["exact", "fna:64"], heads=1, head_dim=64)
        times = {(r.impl, r.n): r.time_ms for r in records}
        for a, b in zip(lengths, lengths[1:]):
            assert 3.2 <= times[("exact", b)] / times[("exact", a)] <= 4.8
            assert 1.6 <= times[("fna:64", b)] / times[("fna:64", a)] <= 2.6


class TestErrorSweep:
    def test_full_landmarks_are_exact(self):
        records = error_sweep(32, 8, 2, [33], seeds=range(3))
        assert len(records) == 3
        assert all(r.frob_err <= 1e-4 and r.maxabs_err <= 1e-4 for r in records)

    def test_mean_error_shrinks_with_more_landmarks(self):
        s_values = [8, 16, 32, 64]
        records = error_sweep(256, 16, 1, s_values, seeds=range(20))
        means = [np.mean([r.frob_err for r in records if r.s == s]) for s in s_values]
        assert all(b <= a for a, b in zip(means, means[1:]))
        assert all(r.frob_err >= 0 and r.maxabs_err >= 0 for r in records)

    def test_sample_count_out_of_range(self):
        with pytest.raises(ShapeError):
            error_sweep(8, 4, 1, [10], seeds=[0])


class TestGridSweep:
    @pytest.fixture(scope="class")
    def report(self, synth_spec, synth_model, synth_input):
        return detect_sinks_iterative(synth_input, synth_model, synth_spec.lm, synth_spec.ld)

    def _by_label(self, records):
        return {r.policy: r for r in records}

    def test_all_policies_reported(self, synth_model, synth_input, report):
        records = grid_sweep(synth_input, synth_model, 4, report)
        assert len(records) == 27
        assert all(r.valid for r in records)

    def test_excluding_massive_token_hurts(self, synth_model, synth_input, report):
        rows = self._by_label(grid_sweep(synth_input, synth_model, 4, report))
        default = rows["cls=guarantee;massive=ignore;artifact=ignore"]
        excluded = rows["cls=guarantee;massive=exclude;artifact=ignore"]
        assert default.drift < 1e-2
        assert excluded.drift > 0.1
        assert excluded.drift > 10 * default.drift

    def test_oversized_guarantee_is_invalid(self, synth_model, synth_input, report):
        records = grid_sweep(synth_input, synth_model, 3, report)
        invalid = [r for r in records if not r.valid]
        assert [r.policy for r in invalid] == ["cls=guarantee;massive=guarantee;artifact=guarantee"]
        assert math.isnan(invalid[0].drift)
        assert invalid[0].error

    def test_runs_detection_when_no_report(self, synth_spec, synth_model, synth_input):
        records = grid_sweep(synth_input, synth_model, 4, lm=synth_spec.lm, ld=synth_spec.ld)
        assert len(records) == 27

    def test_start_layer_checked(self, synth_model, synth_input, report):
        with pytest.raises(ValueError):
            grid_sweep(synth_input, synth_model, 4, report, from_layer=5)
