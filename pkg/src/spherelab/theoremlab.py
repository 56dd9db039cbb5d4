"""Numerical checks of the sphere-update, transfer, bounded-logit, gating and
LayerNorm-Jacobian results.

Every check is deterministic under its seed and returns a :class:`CheckReport`.
All pass/fail bands live in :data:`THRESHOLDS`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .linalg import frobenius_norm, random_orthogonal, vector_rms
from .optim import hypersphere_project, tangent_project

THRESHOLDS = {
    "quarter_ratio": (0.2, 0.3),
    "quarter_ratio_min_fraction": 0.99,
    "width_rms_tol": 0.10,
    "depth_slope_normalized": (0.5, 0.07),
    "depth_slope_scaled": (0.0, 0.07),
    "depth_flat_tol": 0.15,
    "gating_rms_tol": 0.05,
    "ln_jacobian_max_abs": 1e-6,
}


@dataclass
class CheckReport:
    name: str
    trials: int
    statistic: float
    threshold: float
    passed: bool
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _sphere_point(rng, shape):
    w = rng.standard_normal(shape)
    return w * (rng.uniform(0.5, 2.0) / frobenius_norm(w))


def _in_band(r, band):
    return band[0] <= r <= band[1]


def check_first_order_expansion(trials: int = 100, seed: int = 0) -> CheckReport:
    """Residual of ``project(W + eps*D) - W - Pi_T(eps*D)`` shrinks fourfold when eps halves."""
    rng = np.random.default_rng(seed)
    band = THRESHOLDS["quarter_ratio"]
    ratios, ok = [], 0
    for _ in range(trials):
        shape = tuple(rng.integers(2, 12, size=2))
        w = _sphere_point(rng, shape)
        c = frobenius_norm(w)
        delta = rng.standard_normal(shape)
        good = True
        for eps in (1e-2, 1e-3):
            r = [frobenius_norm(hypersphere_project(w + e * delta, c) - w - tangent_project(e * delta, w))
                 for e in (eps, eps / 2)]
            ratio = r[1] / r[0]
            ratios.append(ratio)
            good &= _in_band(ratio, band)
        ok += good
    frac = ok / trials
    need = THRESHOLDS["quarter_ratio_min_fraction"]
    return CheckReport("first_order_expansion", trials, frac, need, frac >= need,
                       {"band": band, "median_ratio": float(np.median(ratios)),
                        "min_ratio": float(np.min(ratios)), "max_ratio": float(np.max(ratios))})


def check_wd_noop(trials: int = 100, seed: int = 1) -> CheckReport:
    """Adding decay to a normalized step changes the projected weight only at second order."""
    rng = np.random.default_rng(seed)
    band = THRESHOLDS["quarter_ratio"]
    ratios, scaled, ok = [], [], 0
    for _ in range(trials):
        shape = tuple(rng.integers(2, 12, size=2))
        w = _sphere_point(rng, shape)
        c = frobenius_norm(w)
        g = rng.standard_normal(shape)
        g_hat = g * (c / frobenius_norm(g))
        good = True
        for lam in (0.1, 1.0):
            def gap(eta):
                return frobenius_norm(hypersphere_project(w - eta * g_hat - eta * lam * w, c)
                                      - hypersphere_project(w - eta * g_hat, c))
            for eta in (1e-2, 1e-3):
                ratio = gap(eta / 2) / gap(eta)
                ratios.append(ratio)
                good &= _in_band(ratio, band)
            scaled.append((gap(1e-4) / 1e-8) / (gap(1e-3) / 1e-6))
        ok += good
    frac = ok / trials
    need = THRESHOLDS["quarter_ratio_min_fraction"]
    zero_gap = frobenius_norm(hypersphere_project(w - 1e-2 * g_hat, c) - hypersphere_project(w - 1e-2 * g_hat, c))
    return CheckReport("wd_noop", trials, frac, need, frac >= need,
                       {"band": band, "median_ratio": float(np.median(ratios)),
                        "max_constant_drift": float(np.max(np.abs(np.log(scaled)))), "gap_at_zero_decay": zero_gap})


def msign(m) -> np.ndarray:
    """Exact polar factor ``U V^T``."""
    u, _, vt = np.linalg.svd(m, full_matrices=False)
    return u @ vt


def check_width_transfer(widths=(64, 128, 256, 512), samples: int = 64, C: float = 1.0, seed: int = 2) -> CheckReport:
    """Flat-spectrum sphere weights keep ``rms(Wx)/(C*rms(x))`` at 1 across widths."""
    rng = np.random.default_rng(seed)
    ratios, control = {}, {}
    for d in widths:
        ms = msign(rng.standard_normal((d, d)))
        w = C * math.sqrt(d) * ms / frobenius_norm(ms)
        x = rng.standard_normal((d, samples))
        ratios[d] = float(np.mean([vector_rms(w @ x[:, j]) / (C * vector_rms(x[:, j])) for j in range(samples)]))
        u, v = rng.standard_normal(d), rng.standard_normal(d)
        r1 = np.outer(u, v)
        r1 *= C * math.sqrt(d) / frobenius_norm(r1)
        control[d] = float(np.mean([vector_rms(r1 @ x[:, j]) / (C * vector_rms(x[:, j])) for j in range(samples)]))
    vals = np.array(list(ratios.values()))
    dev = float(max(np.max(np.abs(vals - 1.0)), vals.max() / vals.min() - 1.0))
    tol = THRESHOLDS["width_rms_tol"]
    return CheckReport("width_transfer", len(widths) * samples, dev, tol, dev <= tol,
                       {"ratios": ratios, "rank1_control": control})


def _skew_orthogonal(d: int, rng) -> np.ndarray:
    """Random orthogonal ``W`` with ``W^T = -W`` (so ``I + a*W`` is a scaled isometry)."""
    q = random_orthogonal(d, rng)
    j = np.zeros((d, d))
    for i in range(0, d, 2):
        j[i, i + 1], j[i + 1, i] = 1.0, -1.0
    return q @ j @ q.T


def _depth_response(L: int, eta: float, grad_scaled: bool, post_norm: bool, rng, d: int = 64) -> float:
    """``||x_L' - x_L||`` after one sphere-normalized step on every block.

    Blocks are ``x <- (x + a*W x)/sqrt(1 + a^2)`` with ``a = L^-1/2`` and skew
    orthogonal ``W``, an exact isometry, so all local Jacobians have norm 1.
    The post-norm variant RMS-normalizes after each residual add instead.
    The update direction for each ``W_l`` is the gradient of ``<v, x_L>``.
    """
    alpha = L**-0.5
    shrink = 1.0 / math.sqrt(1.0 + alpha * alpha)
    x0 = rng.standard_normal((d, 1))
    v = rng.standard_normal((d, 1))
    ws = {f"w{l}": _skew_orthogonal(d, rng) for l in range(L)}
    g = ad.Graph()
    x = g.const(x0)
    for name in ws:
        x = g.add(x, g.scale(g.matmul(g.input(name), x), alpha))
        x = g.transpose(g.rmsnorm(g.transpose(x))) if post_norm else g.scale(x, shrink)
    g.output(x, "x")
    g.output(g.sum(g.mul(x, g.const(v))), "objective")
    tr = ad.evaluate(g, ws)
    grads = ad.backward(g, tr, output="objective")
    c_g = math.sqrt(d)  # = ||W_l||_F
    new = {}
    for name, w in ws.items():
        upd = grads[name] * (c_g / frobenius_norm(grads[name]))
        if grad_scaled:
            upd = upd * alpha
        new[name] = w - eta * upd
    return frobenius_norm(ad.evaluate(g, new)["x"] - tr["x"])


def check_depth_scaling(depths=(4, 8, 16, 32, 64), seeds: int = 4, eta: float = 1e-3, seed: int = 3) -> CheckReport:
    """Output perturbation grows like sqrt(L) under normalized updates and is flat otherwise."""
    logL = np.log(depths)

    def series(grad_scaled=False, post_norm=False, eta_scale=False):
        out = []
        for L in depths:
            e = eta * (L**-0.5 if eta_scale else 1.0)
            out.append(np.mean([_depth_response(L, e, grad_scaled, post_norm, np.random.default_rng(seed * 1000 + s))
                                for s in range(seeds)]))
        return np.array(out)

    norm = series()
    scaled = series(grad_scaled=True)
    flat = series(eta_scale=True)
    post = series(post_norm=True)
    slope = lambda y: float(np.polyfit(logL, np.log(y), 1)[0])  # noqa: E731
    s_norm, s_scaled, s_post = slope(norm), slope(scaled), slope(post)
    spread = float(flat.max() / flat.min() - 1.0)
    (t_n, tol_n), (t_s, tol_s) = THRESHOLDS["depth_slope_normalized"], THRESHOLDS["depth_slope_scaled"]
    flat_tol = THRESHOLDS["depth_flat_tol"]
    worst = max(abs(s_norm - t_n) / tol_n, abs(s_scaled - t_s) / tol_s, abs(s_post - t_n) / tol_n, spread / flat_tol)
    return CheckReport("depth_scaling", 4 * len(depths) * seeds, worst, 1.0, worst <= 1.0,
                       {"slope_normalized": s_norm, "slope_grad_scaled": s_scaled, "slope_post_norm": s_post,
                        "flat_spread": spread, "depths": list(depths),
                        "note": "statistic is the largest deviation as a fraction of its tolerance"})


def check_bounded_logits(trials: int = 100_000, seed: int = 4, batch: int = 5000) -> CheckReport:
    """``||Wx|| <= C||x||``, the RMS form, and the per-element bound never fail."""
    rng = np.random.default_rng(seed)
    viol, worst, done = 0, 0.0, 0
    slack = 1.0 + 1e-12
    while done < trials:
        n = min(batch, trials - done)
        d_out, d_in = (int(v) for v in rng.integers(1, 33, size=2))
        C = rng.uniform(0.1, 10.0)
        w = rng.standard_normal((n, d_out, d_in))
        w *= C / np.sqrt(np.sum(w * w, axis=(1, 2), keepdims=True))
        x = rng.standard_normal((n, d_in)) * rng.uniform(0.01, 100.0, size=(n, 1))
        y = np.einsum("nij,nj->ni", w, x)
        ny, nx = np.linalg.norm(y, axis=1), np.linalg.norm(x, axis=1)
        rms_y, rms_x = ny / math.sqrt(d_out), nx / math.sqrt(d_in)
        b1 = ny / (C * nx)
        b2 = rms_y / (C * math.sqrt(d_in / d_out) * rms_x)
        b3 = np.max(np.abs(y), axis=1) / (C * nx)
        viol += int(np.sum((b1 > slack) | (b2 > slack) | (b3 > slack)))
        worst = max(worst, float(b1.max()), float(b2.max()), float(b3.max()))
        done += n
    tight = float(np.linalg.norm(np.outer([1.0, 0.0], [1.0, 0.0]) @ np.array([1.0, 0.0])))
    return CheckReport("bounded_logits", trials, float(viol), 0.0, viol == 0,
                       {"max_bound_ratio": worst, "tight_case_ratio": tight})


def combine_rms(gates, dim: int = 256, trials: int = 10_000, sqrt_gate: bool = False, rng=None,
                chunk: int = 500) -> float:
    """Monte Carlo RMS of ``sum_i w_i e_i`` over independent standard-normal expert outputs."""
    rng = rng or np.random.default_rng(0)
    g = np.asarray(gates, dtype=np.float64)
    w = np.sqrt(g) if sqrt_gate else g
    total, count = 0.0, 0
    while count < trials:
        n = min(chunk, trials - count)
        e = rng.standard_normal((n, g.size, dim))
        y = np.einsum("k,nkd->nd", w, e)
        total += float(np.sum(y * y))
        count += n
    return math.sqrt(total / (trials * dim))


def check_gating_rms(ks=(2, 4, 8, 16, 32, 64), trials: int = 10_000, dim: int = 256, seed: int = 5) -> CheckReport:
    """Classical uniform gating shrinks RMS to ``1/sqrt(k)``; square-root gating keeps it at 1."""
    rng = np.random.default_rng(seed)
    tol = THRESHOLDS["gating_rms_tol"]
    rows, worst = {}, 0.0
    for k in ks:
        gates = np.full(k, 1.0 / k)
        classical = combine_rms(gates, dim, trials, False, rng)
        sq = combine_rms(gates, dim, trials, True, rng)
        dev = max(abs(classical * math.sqrt(k) - 1.0), abs(sq - 1.0))
        worst = max(worst, dev)
        rows[k] = {"classical": classical, "sqrt": sq}
    one_hot = combine_rms([0.97, 0.01, 0.01, 0.01], dim, 2000, False, rng)
    return CheckReport("gating_rms", trials * len(ks) * 2, worst, tol, worst <= tol,
                       {"rms": rows, "near_one_hot_classical": one_hot})


def layernorm_jacobian(u, eps: float = ad.NORM_EPS) -> np.ndarray:
    """Closed form ``(1/s)(P - v v^T/(d s^2))`` with ``v = u - mean(u)``, ``s^2 = mean(v^2) + eps``."""
    u = np.asarray(u, dtype=np.float64).ravel()
    d = u.size
    v = u - u.mean()
    s = math.sqrt(float(np.mean(v * v)) + eps)
    P = np.eye(d) - 1.0 / d
    return (P - np.outer(v, v) / (d * s * s)) / s


def _layernorm_graph(d):
    g = ad.Graph()
    g.output(g.layernorm(g.input("u")), "y")
    return g


def check_ln_jacobian(dims=(8, 64), trials: int = 100, seed: int = 6) -> CheckReport:
    """Closed-form LayerNorm Jacobian against central differences of the autodiff primitive."""
    rng = np.random.default_rng(seed)
    worst, worst_ad, null = 0.0, 0.0, 0.0
    for d in dims:
        g = _layernorm_graph(d)
        f = lambda u: ad.evaluate(g, {"u": u[None, :]})["y"][0]  # noqa: E731
        for _ in range(trials):
            u = rng.standard_normal(d) * rng.uniform(0.5, 3.0) + rng.uniform(-2.0, 2.0)
            J = layernorm_jacobian(u)
            fd = np.empty((d, d))
            for j in range(d):
                h = 1e-6 * max(1.0, abs(u[j]))
                e = np.zeros(d)
                e[j] = h
                fd[:, j] = (f(u + e) - f(u - e)) / (2 * h)
            worst = max(worst, float(np.max(np.abs(J - fd))))
            tr = ad.evaluate(g, {"u": u[None, :]})
            row = rng.integers(d)
            seed_vec = np.zeros((1, d))
            seed_vec[0, row] = 1.0
            gad = ad.backward(g, tr, seed=seed_vec)["u"][0]
            worst_ad = max(worst_ad, float(np.max(np.abs(gad - J[row]))))
            null = max(null, float(np.max(np.abs(J @ np.ones(d)))))
    tol = THRESHOLDS["ln_jacobian_max_abs"]
    return CheckReport("ln_jacobian", trials * len(dims), worst, tol, worst < tol,
                       {"max_abs_vs_autodiff": worst_ad, "max_abs_J_ones": null})


CHECKS = {
    "first_order_expansion": check_first_order_expansion,
    "wd_noop": check_wd_noop,
    "width_transfer": check_width_transfer,
    "depth_scaling": check_depth_scaling,
    "bounded_logits": check_bounded_logits,
    "gating_rms": check_gating_rms,
    "ln_jacobian": check_ln_jacobian,
}


def run_all(names=None) -> list[CheckReport]:
    names = list(CHECKS) if names is None else list(names)
    unknown = set(names) - set(CHECKS)
    if unknown:
        raise ValueError(f"unknown checks: {sorted(unknown)}")
    return [CHECKS[n]() for n in names]


def summary_table(reports) -> str:
    lines = [f"{'check':<24}{'trials':>9}{'statistic':>14}{'threshold':>12}  result"]
    for r in reports:
        lines.append(f"{r.name:<24}{r.trials:>9}{r.statistic:>14.4g}{r.threshold:>12.4g}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
