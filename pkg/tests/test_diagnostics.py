import csv
import io
import json

import numpy as np
import pytest

import diagnostics
from boxhead_config import BenchConfig, GradcheckConfig
from deform_conv import DeformConvLayer
from diagnostics import (
    COMPONENTS,
    print_bench_table,
    print_gradcheck_report,
    rel_error,
    run_bench,
    run_gradcheck,
    sample_indices,
    write_bench_csv,
    write_gradcheck_report,
)
from tensor_core import NumericFailure

TINY_CASES = (("conv2d", (1, 2, 4, 4), 3), ("deform_conv", (1, 2, 4, 4), 2))


def test_rel_error_floor():
    assert rel_error(0.0, 0.0) == 0.0
    assert rel_error(1e-9, 0.0) == pytest.approx(1e-3)
    assert rel_error(2.0, 1.0) == pytest.approx(0.5)


def test_sample_indices_are_distinct_and_in_range(rng):
    idx = sample_indices(rng, (2, 3, 4), 10)
    assert len(set(idx)) == 10
    assert all(0 <= a < 2 and 0 <= b < 3 and 0 <= c < 4 for a, b, c in idx)
    assert len(sample_indices(rng, (2, 2), 10)) == 4
    assert sample_indices(rng, (0, 3), 5) == []


def test_component_names_are_unique():
    names = [c.name for c in COMPONENTS]
    assert len(names) == len(set(names))


def test_gradcheck_subset_passes(tmp_path):
    only = ["conv2d", "avg_pool3x3", "relu", "sigmoid", "batchnorm", "deform_conv", "box_losses", "center_focal_loss"]
    rows = run_gradcheck(GradcheckConfig(seeds=2), only=only)
    assert [r.component for r in rows] == [c.name for c in COMPONENTS if c.name in only]
    for r in rows:
        assert r.passed, r
        assert r.tolerance == (1e-3 if r.component == "batchnorm" else 1e-4)
    data = json.loads(write_gradcheck_report(rows, tmp_path).read_text())
    assert data["passed"] is True
    assert len(data["components"]) == len(only)
    out = io.StringIO()
    print_gradcheck_report(rows, out)
    assert "Gradient Check Summary" in out.getvalue()


def test_full_gradcheck_passes_at_default_seeds():
    cfg = GradcheckConfig()
    assert cfg.seeds == 20
    rows = run_gradcheck(cfg)
    assert [r.component for r in rows] == [c.name for c in COMPONENTS]
    failed = [(r.component, r.max_rel_err, r.worst_array, r.worst_seed) for r in rows if not r.passed]
    assert failed == []


def test_deform_layer_outputs_off_the_map_stay_off_the_relu_kink():
    # offsets this wide push every tap of most outputs off a 2x2 map
    for seed in range(20):
        rng = np.random.default_rng(seed)
        layer = DeformConvLayer(2, 3, rng)
        diagnostics._randomize_deform_layer(layer, rng, scale=25.0)
        out = layer.forward(rng.normal(size=(1, 2, 2, 2)))
        assert np.abs(out).min() > 0.0
        assert np.all(np.abs(layer.params["bias"]) >= 0.1)


def test_gradcheck_catches_a_wrong_backward(monkeypatch):
    monkeypatch.setattr(diagnostics, "relu_backward", lambda x, g: g)
    (row,) = run_gradcheck(GradcheckConfig(seeds=1, entries=18), only=["relu"])
    assert not row.passed
    assert row.max_rel_err > 0.5


def test_bench_verifies_before_timing(tmp_path):
    rows = run_bench(BenchConfig(repeats=2), cases=TINY_CASES)
    assert [r.kernel for r in rows] == ["conv2d", "deform_conv"]
    for r in rows:
        assert r.max_abs_diff <= 1e-10
        assert r.naive_s > 0 and r.fast_s > 0
    assert rows[0].input_shape == "1x2x4x4"
    with open(write_bench_csv(rows, tmp_path), newline="") as f:
        table = list(csv.DictReader(f))
    assert table[1]["kernel"] == "deform_conv"
    out = io.StringIO()
    print_bench_table(rows, 3.0, out)
    assert "conv2d" in out.getvalue()


def test_bench_refuses_to_time_a_wrong_kernel(monkeypatch):
    real = diagnostics.deform_conv_forward
    monkeypatch.setattr(diagnostics, "deform_conv_forward", lambda x, layer: real(x, layer) + 1e-6)
    with pytest.raises(NumericFailure, match="timings withheld"):
        run_bench(BenchConfig(repeats=1), cases=TINY_CASES)


def test_bench_inputs_are_seeded():
    a = run_bench(BenchConfig(repeats=1), seed=3, cases=TINY_CASES[:1])
    b = run_bench(BenchConfig(repeats=1), seed=3, cases=TINY_CASES[:1])
    assert a[0].max_abs_diff == b[0].max_abs_diff
    assert np.isfinite(a[0].speedup)


class _Terminal(io.StringIO):
    def isatty(self):
        return True


def _passing_row():
    return diagnostics.GradcheckRow("conv2d", 1, 1e-9, "weight", 0, 1e-4, True)


def test_reports_are_plain_text_off_a_terminal(monkeypatch):
    monkeypatch.delenv("NO_COLOR", raising=False)
    out = io.StringIO()
    print_gradcheck_report([_passing_row()], out)
    print_bench_table(run_bench(BenchConfig(repeats=1), cases=TINY_CASES[:1]), 1e9, out)
    assert "\x1b[" not in out.getvalue()


def test_terminal_gets_colour_unless_no_color(monkeypatch):
    pytest.importorskip("colorama")
    monkeypatch.delenv("NO_COLOR", raising=False)
    tty = _Terminal()
    print_gradcheck_report([_passing_row()], tty)
    assert "\x1b[" in tty.getvalue()
    monkeypatch.setenv("NO_COLOR", "1")
    tty = _Terminal()
    print_gradcheck_report([_passing_row()], tty)
    assert "\x1b[" not in tty.getvalue()
