"""Sweep orchestration tests.

Oracles: the closed-form schedule values, exact-zero coupling when the slow
drift ignores the fast state, synthetic power-law reports for the rate
fitter, and step-halving on a fully deterministic variant.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest

from mvx_avgfilter.averaging import make_drift_oracle
from mvx_avgfilter.errors import DegenerateFit, Instability, InvalidEpsilon, InvalidParams
from mvx_avgfilter.experiments import (
    SweepConfig,
    SweepReport,
    SweepRow,
    averaging_error_sweep,
    delta_schedule,
    filter_error_sweep,
    rate_fit,
    sup_path_error,
)
from mvx_avgfilter.filtering import FilterConfig
from mvx_avgfilter.model import LinearModelParams, ModelSpec, make_linear_model
from mvx_avgfilter.sde import SdeConfig, coupled_pair

REF = LinearModelParams()


def ref_model(params=REF, x0=1.0, z0=1.0):
    return make_linear_model(params, n=1, m=1, l=1, x0=[x0], z0=[z0])


def base_sde(T=0.5, dt=0.01, N=100, seed=900):
    return SdeConfig(epsilon=0.1, T=T, dt_macro=dt, micro_substeps=1, N=N, seed=seed)


# ===== schedule =====


def test_delta_schedule_values():
    assert delta_schedule(math.exp(-1.0)) == pytest.approx(math.exp(-1.0), rel=1e-12)
    assert delta_schedule(0.1) == pytest.approx(0.1 * math.log(10.0) ** (1.0 / 3.0), rel=1e-12)
    assert delta_schedule(0.1) == pytest.approx(0.132050, abs=5e-6)
    assert delta_schedule(0.01) == pytest.approx(0.016637, abs=5e-7)


def test_delta_schedule_domain():
    for bad in (0.0, 1.0, 1.5, -0.1):
        with pytest.raises(InvalidEpsilon):
            delta_schedule(bad)


# ===== config =====


def test_sweep_config_validation():
    ok = base_sde()
    SweepConfig(eps_grid=(0.1, 0.05), mc_reps=4, base_sde=ok)
    with pytest.raises(InvalidParams):
        SweepConfig(eps_grid=(0.05, 0.1), mc_reps=4, base_sde=ok)  # not decreasing
    with pytest.raises(InvalidParams):
        SweepConfig(eps_grid=(0.1, 0.1), mc_reps=4, base_sde=ok)
    with pytest.raises(InvalidParams):
        SweepConfig(eps_grid=(1.2, 0.1), mc_reps=4, base_sde=ok)
    with pytest.raises(InvalidParams):
        SweepConfig(eps_grid=(0.1, 0.05), mc_reps=3, base_sde=ok)
    with pytest.raises(InvalidParams):
        SweepConfig(eps_grid=(0.1, 0.05), mc_reps=4, base_sde=ok, p_orders=(0,))


# ===== sup_path_error =====


def test_sup_path_error_zero_for_decoupled_slow():
    params = LinearModelParams(a11=-1.0, a12=0.2, a13=0.0, s1=0.5)
    model = ref_model(params)
    oracle = make_drift_oracle(model, mode="analytic-linear")
    cfg = base_sde(N=50)
    sf, av = coupled_pair(model, oracle, cfg)
    worst = sup_path_error(sf, av)
    assert worst.shape == (50,)
    assert np.all(worst == 0.0)


# ===== averaging sweep =====


def test_averaging_sweep_exact_zero_when_z_free():
    params = LinearModelParams(a11=-1.0, a12=0.2, a13=0.0, s1=0.5)
    model = ref_model(params)
    oracle = make_drift_oracle(model, mode="analytic-linear")
    sweep = SweepConfig(eps_grid=(0.1, 0.05), mc_reps=4, base_sde=base_sde(T=0.2, N=30))
    report = averaging_error_sweep(model, oracle, sweep)
    assert all(r.mean_error == 0.0 for r in report.rows)
    assert all(r.std_error == 0.0 for r in report.rows)


def test_averaging_sweep_error_decreases():
    model = ref_model()
    oracle = make_drift_oracle(model, mode="analytic-linear")
    sweep = SweepConfig(
        eps_grid=(0.1, 0.02), mc_reps=4, base_sde=base_sde(T=0.5, N=200), p_orders=(1,)
    )
    report = averaging_error_sweep(model, oracle, sweep)
    by_eps = {r.eps: r for r in report.rows if r.p == 1}
    assert by_eps[0.02].mean_error < by_eps[0.1].mean_error


def test_averaging_sweep_report_shape():
    model = ref_model()
    oracle = make_drift_oracle(model, mode="analytic-linear")
    sweep = SweepConfig(
        eps_grid=(0.1, 0.05, 0.02), mc_reps=4, base_sde=base_sde(T=0.2, N=40)
    )
    report = averaging_error_sweep(model, oracle, sweep)
    assert isinstance(report, SweepReport)
    assert len(report.rows) == 3 * 2  # eps x p_orders
    for row in report.rows:
        assert row.reps == 4
        assert row.std_error >= 0.0
        assert row.delta_eps == pytest.approx(delta_schedule(row.eps))
    # dominant envelope term decreases along the grid
    t3 = [e["eps_over_delta"] for e in report.envelope]
    assert all(a > b for a, b in zip(t3, t3[1:]))
    assert report.config_digest
    assert 1 in report.fits


def test_averaging_sweep_deterministic_step_halving():
    # sigma1 = s2 = 0 makes every run deterministic; the sweep statistic
    # then converges first-order in dt
    params = LinearModelParams(a11=-1.0, a12=0.0, a13=1.0, s1=0.0, s2=0.0)
    model = ref_model(params)
    oracle = make_drift_oracle(model, mode="analytic-linear")
    errs = {}
    for dt in (0.02, 0.01, 0.005):
        sweep = SweepConfig(
            eps_grid=(0.05,),
            mc_reps=4,
            base_sde=SdeConfig(
                epsilon=0.05, T=1.0, dt_macro=dt, micro_substeps=1, N=4, seed=1
            ),
            p_orders=(1,),
        )
        report = averaging_error_sweep(model, oracle, sweep)
        errs[dt] = report.rows[0].mean_error
        assert report.rows[0].std_error == 0.0
    # first-order step bias: successive differences shrink by roughly half
    assert abs(errs[0.02] - errs[0.01]) <= 3.0 * abs(errs[0.01] - errs[0.005]) + 1e-12


def test_averaging_sweep_instability_names_the_rep():
    base = ref_model()
    model = ModelSpec(
        n=1, m=1, l=1, x0=np.zeros(1), z0=np.ones(1),
        b1=base.b1, sigma1=base.sigma1,
        b2=lambda x, mu, z, nu: 1e40 * z,
        sigma2=base.sigma2, h=base.h,
    )
    oracle = make_drift_oracle(ref_model(), mode="analytic-linear")
    sweep = SweepConfig(
        eps_grid=(0.1,), mc_reps=4, base_sde=base_sde(T=0.2, N=10), p_orders=(1,)
    )
    with np.errstate(over="ignore"), pytest.raises(Instability) as err:
        averaging_error_sweep(model, oracle, sweep)
    assert "eps=0.1" in str(err.value)
    assert "rep" in str(err.value)


def test_averaging_sweep_reproducible_and_thread_independent():
    model = ref_model()
    oracle = make_drift_oracle(model, mode="analytic-linear")

    def run(threads):
        sweep = SweepConfig(
            eps_grid=(0.1, 0.05), mc_reps=4, base_sde=base_sde(T=0.3, N=50),
            threads=threads,
        )
        return averaging_error_sweep(model, oracle, sweep)

    a, b, c = run(1), run(1), run(3)
    for x, y in ((a, b), (a, c)):
        assert [dataclasses.astuple(r) for r in x.rows] == [
            dataclasses.astuple(r) for r in y.rows
        ]
        assert x.config_digest == y.config_digest
        assert x.fits == y.fits


def test_standard_error_scales_with_reps():
    model = ref_model()
    oracle = make_drift_oracle(model, mode="analytic-linear")
    ses = {}
    for reps in (8, 16):
        sweep = SweepConfig(
            eps_grid=(0.1,), mc_reps=reps, base_sde=base_sde(T=0.5, N=100), p_orders=(1,)
        )
        report = averaging_error_sweep(model, oracle, sweep)
        ses[reps] = report.rows[0].std_error
    ratio = ses[8] / ses[16]
    assert 0.5 * math.sqrt(2.0) <= ratio <= 1.5 * math.sqrt(2.0)


# ===== filter sweep =====


def filter_sweep_cfg(eps_grid=(0.1, 0.02), reps=4, Nf=80, T=0.3, N=60, seed=700):
    return SweepConfig(
        eps_grid=eps_grid,
        mc_reps=reps,
        base_sde=base_sde(T=T, N=N, seed=seed),
        p_orders=(1,),
        filter_cfg=FilterConfig(Nf=Nf, resample_threshold=0.5, functional="tanh", p=1),
    )


def test_filter_sweep_identical_arms_are_exactly_equal():
    model = ref_model()
    oracle = make_drift_oracle(model, mode="analytic-linear")
    report = filter_error_sweep(
        model, oracle, "tanh", filter_sweep_cfg(), arms=("multiscale", "multiscale")
    )
    assert all(r.mean_error == 0.0 for r in report.rows)


def test_filter_sweep_silent_sensor_tracks_averaging():
    model = ref_model(LinearModelParams(hscale=0.0))
    oracle = make_drift_oracle(model, mode="analytic-linear")
    report = filter_error_sweep(model, oracle, "tanh", filter_sweep_cfg(seed=701))
    by_eps = {r.eps: r for r in report.rows}
    pooled = math.hypot(by_eps[0.1].std_error, by_eps[0.02].std_error)
    assert by_eps[0.02].mean_error <= by_eps[0.1].mean_error + pooled


def test_filter_sweep_discrepancy_direction():
    model = ref_model()
    oracle = make_drift_oracle(model, mode="analytic-linear")
    report = filter_error_sweep(model, oracle, "tanh", filter_sweep_cfg(seed=702))
    by_eps = {r.eps: r for r in report.rows}
    pooled = math.hypot(by_eps[0.1].std_error, by_eps[0.02].std_error)
    assert by_eps[0.02].mean_error <= by_eps[0.1].mean_error + pooled


def test_filter_sweep_requires_filter_cfg():
    model = ref_model()
    oracle = make_drift_oracle(model, mode="analytic-linear")
    sweep = SweepConfig(eps_grid=(0.1,), mc_reps=4, base_sde=base_sde())
    with pytest.raises(InvalidParams):
        filter_error_sweep(model, oracle, "tanh", sweep)


def test_filter_sweep_reproducible():
    model = ref_model()
    oracle = make_drift_oracle(model, mode="analytic-linear")
    a = filter_error_sweep(model, oracle, "tanh", filter_sweep_cfg(eps_grid=(0.1,)))
    b = filter_error_sweep(model, oracle, "tanh", filter_sweep_cfg(eps_grid=(0.1,)))
    assert [dataclasses.astuple(r) for r in a.rows] == [
        dataclasses.astuple(r) for r in b.rows
    ]


# ===== rate fit =====


def synthetic_report(eps_values, means, p=1):
    rows = [
        SweepRow(eps=e, delta_eps=delta_schedule(e), p=p, mean_error=m, std_error=0.0, reps=4)
        for e, m in zip(eps_values, means)
    ]
    return SweepReport(
        kind="averaging", rows=rows, envelope=[], fits={}, runtime_s=0.0, config_digest="x"
    )


def test_rate_fit_linear_power():
    eps = (0.5, 0.1, 0.02, 0.004)
    slope, intercept, r2 = rate_fit(synthetic_report(eps, eps))
    assert slope == pytest.approx(1.0, abs=1e-12)
    assert r2 == pytest.approx(1.0, abs=1e-12)


def test_rate_fit_sqrt_power():
    eps = (0.5, 0.1, 0.02)
    slope, _, _ = rate_fit(synthetic_report(eps, [math.sqrt(e) for e in eps]))
    assert slope == pytest.approx(0.5, abs=1e-12)


def test_rate_fit_rejects_nonpositive_means():
    with pytest.raises(DegenerateFit):
        rate_fit(synthetic_report((0.5, 0.1, 0.02), [0.1, 0.0, 0.01]))


def test_rate_fit_needs_three_points():
    with pytest.raises(DegenerateFit):
        rate_fit(synthetic_report((0.5, 0.1), [0.5, 0.1]))


def test_rate_fit_on_real_sweep():
    model = ref_model()
    oracle = make_drift_oracle(model, mode="analytic-linear")
    sweep = SweepConfig(
        eps_grid=(0.1, 0.05, 0.02), mc_reps=6, base_sde=base_sde(T=0.5, N=150),
        p_orders=(1,),
    )
    report = averaging_error_sweep(model, oracle, sweep)
    slope, _, r2 = rate_fit(report)
    assert slope > 0.0
    assert r2 >= 0.8
