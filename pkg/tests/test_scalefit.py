import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from refdata import batch_table, depth_row, flops_column, tokens_table

from spherelab.model import ModelConfig, MoEConfig, param_specs
from spherelab.scalefit import (
    BelowFloor,
    FitError,
    LogLRQuadraticRegressor,
    NoInteriorMinimum,
    PowerLawRegressor,
    SweepPoint,
    cel,
    chinchilla_flops,
    fit_power_law,
    fit_quadratic_loglr,
    forward_flops_per_token,
    full_scale_config,
    leverage,
    loo_cv_power,
    param_count,
    read_sweep_csv,
    sensitivity,
)


def parabola(lrs, eta=0.01, a=0.3, floor=2.5):
    return [(lr, a * math.log(lr / eta) ** 2 + floor) for lr in lrs]


def test_quadratic_exact_parabola():
    f = fit_quadratic_loglr(parabola([0.005, 0.01, 0.02]))
    assert f.eta_star == pytest.approx(0.01, rel=1e-12)
    assert f.loss_star == pytest.approx(2.5, rel=1e-12)
    assert f.r_squared == pytest.approx(1.0)
    assert not f.extrapolated


def test_quadratic_table_row():
    f = fit_quadratic_loglr(depth_row(8))
    assert 0.013 <= f.eta_star <= 0.018
    assert f.a > 0


def test_quadratic_errors():
    with pytest.raises(FitError):
        fit_quadratic_loglr([(0.01, 1.0), (0.02, 1.1)])
    with pytest.raises(FitError):
        fit_quadratic_loglr([(0.01, 1.0), (0.01, 1.2), (0.02, 1.1)])
    with pytest.raises(NoInteriorMinimum) as ei:
        fit_quadratic_loglr([(0.001, 1.0), (0.01, 2.0), (0.1, 1.0)])
    assert ei.value.fit.a < 0
    with pytest.raises(ValueError):
        SweepPoint(-1.0, 1.0)


def test_quadratic_duplicates_average():
    pts = parabola([0.005, 0.01, 0.02])
    dup = pts + [(0.01, pts[1][1] + 0.1), (0.01, pts[1][1] - 0.1)]
    assert fit_quadratic_loglr(dup).eta_star == pytest.approx(0.01, rel=1e-10)


def test_quadratic_extrapolation_flag():
    f = fit_quadratic_loglr(parabola([1e-5, 2e-5, 4e-5], eta=1.0))
    assert f.extrapolated


@settings(max_examples=50)
@given(st.floats(-5, 5), st.integers(0, 2**31))
def test_quadratic_offset_invariance(offset, seed):
    rng = np.random.default_rng(seed)
    lrs = np.geomspace(1e-3, 1e-1, 7)
    pts = [(lr, l + rng.normal(0, 0.01)) for lr, l in parabola(lrs)]
    a = fit_quadratic_loglr(pts)
    b = fit_quadratic_loglr([(lr, l + offset) for lr, l in pts])
    assert b.eta_star == pytest.approx(a.eta_star, rel=1e-10)
    assert b.loss_star - a.loss_star == pytest.approx(offset, abs=1e-10)


def test_power_floor_recovery():
    x = np.array([1, 2, 4, 8, 16, 32], dtype=float)
    f = fit_power_law(x, 2 * x**-0.5 + 1, with_floor=True)
    assert (f.A, f.b, f.C0) == pytest.approx((2, 0.5, 1), abs=1e-6)


def test_power_tokens_table():
    f = fit_power_law(*tokens_table())
    assert f.b == pytest.approx(0.320, abs=0.005)
    assert f.A == pytest.approx(24.27, rel=0.05)


def test_power_batch_table():
    f = fit_power_law(*batch_table())
    assert -f.b == pytest.approx(0.558, abs=0.01)


def test_power_errors():
    with pytest.raises(FitError):
        fit_power_law([1.0, -2.0], [1.0, 2.0])
    with pytest.raises(FitError):
        fit_power_law([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], with_floor=True)
    with pytest.raises(FitError):
        fit_power_law([1.0], [1.0])


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 100), st.floats(-1.5, 1.5), st.integers(3, 12))
def test_power_floorless_recovery(A, b, n):
    x = np.geomspace(1e6, 1e12, n)
    f = fit_power_law(x, A * x ** (-b))
    assert f.A == pytest.approx(A, rel=1e-9)
    assert f.b == pytest.approx(b, rel=1e-9, abs=1e-12)


def test_cel_self_and_table():
    x, muon = flops_column("muon")
    base = fit_power_law(x, muon, with_floor=True)
    assert base.C0 == pytest.approx(1.23, abs=0.15)
    c = 3e20
    assert cel(base, c, float(base.predict(c))) == pytest.approx(1.0, rel=1e-9)
    with pytest.raises(BelowFloor):
        cel(base, c, base.C0 * 0.5)


def test_leverage_table_endpoints():
    x, muon = flops_column("muon")
    for col, target in (("muonh_hyperp", 1.58), ("muonh", 0.70)):
        f = fit_power_law(*flops_column(col), with_floor=True)
        assert leverage(f, x[-1], muon[-1]) == pytest.approx(target, abs=0.08)


@settings(max_examples=30, deadline=None)
@given(st.floats(1e19, 1e22))
def test_cel_identity_in_range(c):
    x, muon = flops_column("muon")
    base = fit_power_law(x, muon, with_floor=True)
    assert cel(base, c, float(base.predict(c))) == pytest.approx(1.0, rel=1e-8)


def test_param_count_examples():
    cfg = ModelConfig(depth=2, aspect_ratio=16, vocab=256)
    pc = param_count(cfg)
    assert pc["total"] == sum(s.size for s in param_specs(cfg))
    assert pc["total"] == pc["active"]
    big = param_count(full_scale_config(8, vocab=32768))["total"]
    assert big == pytest.approx(208e6, rel=0.05)
    assert param_count(ModelConfig(depth=2, mlp_mult=8))["total"] > pc["total"]
    moe = param_count(ModelConfig(depth=2, moe=MoEConfig(4, 4)))
    assert moe["total"] > moe["active"]


def test_flops_examples():
    cfg = full_scale_config(8)
    attn = 2.0 * 4096 * (cfg.q_width + cfg.q_width) * 8
    assert attn == pytest.approx(2.68e8, rel=0.01)
    assert 3 * attn == pytest.approx(8.05e8, rel=0.01)
    assert chinchilla_flops(cfg, 10.4e9) == pytest.approx(2.14e19, rel=0.05)
    n = param_count(cfg)["active"]
    assert chinchilla_flops(cfg, 10.4e9, s=1) / (6 * n * 10.4e9) == pytest.approx(1.0, rel=0.02)


def test_flops_linear_and_monotone():
    cfg = ModelConfig(depth=4)
    assert chinchilla_flops(cfg, 3e6) == pytest.approx(3 * chinchilla_flops(cfg, 1e6), rel=1e-14)
    base = forward_flops_per_token(cfg)
    for kw in ({"depth": 6}, {"aspect_ratio": 32}, {"vocab": 512}, {"context": 256}, {"mlp_mult": 6},
               {"head_dim": 16}):
        args = {"depth": 4, **kw}
        assert forward_flops_per_token(ModelConfig(**args)) > base
    with pytest.raises(ValueError):
        chinchilla_flops(cfg, 0)


def test_sensitivity_noiseless_and_counts():
    pts = parabola(np.geomspace(1e-3, 1e-1, 6))
    s = sensitivity(pts, 3)
    assert s.subsets == 20 and s.failed == 0
    assert s.lr_err_pct < 1e-8 and s.loss_err_pct < 1e-8
    with pytest.raises(FitError):
        sensitivity(pts, 2)


def test_sensitivity_counts_failures():
    pts = [(0.001, 1.0), (0.002, 1.3), (0.004, 1.0), (0.008, 1.5), (0.016, 2.4)]
    s = sensitivity(pts, 3)
    assert s.failed >= 1
    assert s.subsets == 10


def test_loo_examples():
    x = np.geomspace(1, 100, 6)
    assert loo_cv_power(x, 3 * x**-0.4) < 1e-9
    assert 1.0 <= loo_cv_power(*tokens_table()) <= 2.0
    y = 3 * x**-0.4
    y2 = y.copy()
    y2[2] *= 2
    assert loo_cv_power(x, y2) > loo_cv_power(x, y)
    with pytest.raises(FitError):
        loo_cv_power([1.0, 2.0], [1.0, 2.0])


def test_read_sweep_csv(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("lr,loss\n0.01,2.0\n0.02,1.9\n")
    assert read_sweep_csv(p) == [SweepPoint(0.01, 2.0), SweepPoint(0.02, 1.9)]
    bad = tmp_path / "b.csv"
    bad.write_text("lr,loss\n0.01,abc\n")
    with pytest.raises(FitError):
        read_sweep_csv(bad)


def test_estimators():
    x, y = tokens_table()
    est = PowerLawRegressor().fit(x[:, None], y)
    assert est.exponent_ == pytest.approx(0.320, abs=0.005)
    assert est.predict(x[:, None]) == pytest.approx(y, rel=0.03)
    assert est.score(x[:, None], y) > 0.99
    q = LogLRQuadraticRegressor().fit(*map(np.asarray, zip(*[((lr,), l) for lr, l in depth_row(8)])))
    assert 0.013 <= q.eta_star_ <= 0.018
    from sklearn.base import clone

    assert clone(PowerLawRegressor(with_floor=True)).with_floor is True
