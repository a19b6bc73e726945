import itertools

import numpy as np
import pytest

from cagevit import complexity as C
from cagevit.errors import ContractError, MeasurementError


def test_sra_flops_worked_value():
    assert C.flops_sra(16, 16, 64, 2).flops == 6_291_456


def test_sra_flops_unit_grid():
    for d in (1, 3, 64):
        assert C.flops_sra(1, 1, d, 1).flops == 2 * d + d * d


def test_larger_ratio_cuts_sra_flops_when_attention_dominates():
    assert C.flops_sra(64, 64, 8, 2).flops < C.flops_sra(64, 64, 8, 1).flops


def test_linear_flops_worked_value():
    assert C.flops_linear(16, 16, 7, 64).flops == 1_605_632
    assert C.flops_linear(1, 1, 1, 1).flops == 2


def test_gated_cost_equals_linear_on_a_grid():
    grid = list(itertools.product((1, 2, 7, 14, 16), (3, 5, 9, 16), (1, 2, 7), (1, 8, 64, 512)))[:200]
    assert len(grid) == 200
    for h, w, p, d in grid:
        plain, gated = C.flops_linear(h, w, p, d), C.flops_linear(h, w, p, d, "GatedLinearSRA")
        assert plain.flops == gated.flops == 2 * h * w * p * p * d
        assert "gate" in gated.note and plain.note == ""


def test_reports_recompute_from_fields():
    for r in (C.flops_sra(8, 8, 16, 2), C.flops_linear(8, 8, 3, 16), C.flops_full(4, 4, 8),
              C.flops_linear(5, 5, 2, 4, "GatedLinearSRA")):
        assert r.flops > 0 and r.recompute() == r.flops


def test_linear_undercuts_sra_at_realistic_sizes():
    assert C.flops_linear(16, 16, 7, 64).flops < C.flops_sra(16, 16, 64, 2).flops


def test_formula_contract_errors():
    with pytest.raises(ContractError):
        C.flops_sra(0, 4, 4, 1)
    with pytest.raises(ContractError):
        C.flops_linear(4, 4, -1, 4)
    with pytest.raises(ContractError):
        C.flops_sra(1, 3, 2, 2)  # R^2 does not divide (hw)^2
    with pytest.raises(ContractError):
        C.flops_linear(4, 4, 2, 4, "SRA")


def test_full_cost_counts_more_than_the_closed_form():
    assert C.full_cost("GatedLinearSRA", 16, 16, 64, 7, n_fusion=4) > C.flops_linear(16, 16, 7, 64).flops
    assert C.full_cost("GatedLinearSRA", 16, 16, 64, 7, n_fusion=4) > C.full_cost("LinearSRA", 16, 16, 64, 7, n_fusion=4)


def test_fit_recovers_known_exponent():
    n = np.array([256, 512, 1024, 2048, 4096])
    alpha, resid = C.fit_exponent(n, 3.0 * n**1.5)
    assert abs(alpha - 1.5) < 1e-12 and resid < 1e-12


def test_grid_for_is_exact_and_near_square():
    for n in (256, 512, 1024, 2048, 4096, 7, 12):
        h, w = C.grid_for(n)
        assert h * w == n and h <= w


def test_bench_inputs_are_deterministic():
    cfg = C.bench_config("GatedLinearSRA", d=16)
    a, b = C.bench_inputs("GatedLinearSRA", cfg, 256, seed=3), C.bench_inputs("GatedLinearSRA", cfg, 256, seed=3)
    np.testing.assert_array_equal(a[1].data, b[1].data)
    np.testing.assert_array_equal(a[2].wq.data, b[2].wq.data)
    np.testing.assert_array_equal(a[3].w2.data, b[3].w2.data)


def test_bench_argument_checks():
    cfg = C.bench_config("Full", d=8)
    with pytest.raises(ContractError):
        C.bench("Full", cfg, [256, 128, 512, 1024, 4096])
    with pytest.raises(ContractError):
        C.bench("Full", cfg, [16, 32, 64, 128, 256], repeats=3)
    with pytest.raises(ContractError):
        C.bench("Full", cfg, [16, 32, 64, 128])


def test_bench_small_run_emits_csv():
    fit = C.bench("LinearSRA", C.bench_config("LinearSRA", d=8, p=2), [16, 32, 64, 128, 256])
    lines = fit.to_csv().splitlines()
    assert lines[0] == C.CSV_HEADER
    assert len(lines) == 7 and lines[-1].startswith("# kind=LinearSRA alpha=")
    assert all(len(line.split(",")) == 9 for line in lines[1:-1])
    assert np.isfinite(fit.alpha)


def test_coarse_timer_raises_measurement_error(monkeypatch):
    import time

    real = time.get_clock_info

    class Coarse:
        resolution = 1.0

    monkeypatch.setattr(time, "get_clock_info", lambda name: Coarse if name == "perf_counter" else real(name))
    with pytest.raises(MeasurementError, match="larger sizes"):
        C.bench("Full", C.bench_config("Full", d=4), [4, 8, 16, 32, 64])


def test_scaling_fit_invariants():
    with pytest.raises(ContractError):
        C.ScalingFit("Full", [1, 2, 3, 4, 5], [1] * 5, 1.0, 0.0)
    with pytest.raises(MeasurementError):
        C.ScalingFit("Full", [1, 2, 4, 8, 16], [1] * 5, float("nan"), 0.0)
