"""Curve fitting and accounting for LR sweeps and scaling laws.

Power laws are written ``y = A * x**(-b) + C0``. Fits minimize squared error
in ``y`` itself (not in log space); log-log regression only supplies the
starting point. A growing law such as LR against batch size simply comes out
with ``b < 0``.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import least_squares, minimize_scalar
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, check_X_y, validate_data

from .model import ModelConfig, active_param_count, param_specs


class FitError(ValueError):
    """Input does not admit the requested fit."""


class NoInteriorMinimum(FitError):
    """Quadratic opens downward; ``fit`` carries the coefficients anyway."""

    def __init__(self, msg, fit):
        super().__init__(msg)
        self.fit = fit


class BelowFloor(FitError):
    """Target loss at or below the fitted irreducible floor."""


@dataclass(frozen=True)
class SweepPoint:
    lr: float
    loss: float

    def __post_init__(self):
        if not (math.isfinite(self.lr) and math.isfinite(self.loss)):
            raise ValueError("sweep point must be finite")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


def _points(points) -> list[SweepPoint]:
    return [p if isinstance(p, SweepPoint) else SweepPoint(float(p[0]), float(p[1])) for p in points]


@dataclass(frozen=True)
class QuadFit:
    eta_star: float
    loss_star: float
    a: float
    b: float
    c: float
    r_squared: float
    extrapolated: bool

    def predict(self, lr):
        u = np.log(np.asarray(lr, dtype=np.float64))
        return self.a * u * u + self.b * u + self.c

    def to_dict(self) -> dict:
        return asdict(self)


def fit_quadratic_loglr(points) -> QuadFit:
    """Least-squares parabola in ``ln(lr)``; repeated LRs are averaged first."""
    pts = _points(points)
    groups: dict[float, list[float]] = {}
    for p in pts:
        groups.setdefault(p.lr, []).append(p.loss)
    if len(groups) < 3:
        raise FitError("need at least 3 distinct learning rates")
    lrs = np.array(sorted(groups))
    losses = np.array([np.mean(groups[v]) for v in lrs])
    u = np.log(lrs)
    a, b, c = np.polyfit(u, losses, 2)
    resid = losses - (a * u * u + b * u + c)
    ss_tot = float(np.sum((losses - losses.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    if a <= 0:
        fit = QuadFit(math.nan, math.nan, float(a), float(b), float(c), r2, True)
        raise NoInteriorMinimum("fitted parabola has no interior minimum (a <= 0)", fit)
    eta = math.exp(-b / (2 * a))
    extrap = not (lrs.min() / 4 <= eta <= lrs.max() * 4)
    return QuadFit(eta, float(c - b * b / (4 * a)), float(a), float(b), float(c), r2, extrap)


@dataclass(frozen=True)
class PowerFit:
    A: float
    b: float
    C0: float
    residual: float

    def predict(self, x):
        return self.A * np.power(np.asarray(x, dtype=np.float64), -self.b) + self.C0

    def inverse(self, y: float) -> float:
        """The ``x`` at which the law reaches ``y``."""
        if y <= self.C0:
            raise BelowFloor(f"target {y} is not above the floor {self.C0}")
        return float((self.A / (y - self.C0)) ** (1.0 / self.b))

    def to_dict(self) -> dict:
        return asdict(self)


def _xy(x, y, n_min):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise FitError("x and y differ in length")
    if x.size < n_min:
        raise FitError(f"need at least {n_min} points")
    if np.any(x <= 0) or np.any(y <= 0) or not np.all(np.isfinite(x) & np.isfinite(y)):
        raise FitError("power-law fits need finite positive x and y")
    return x, y


def _fit_amp_exp(x, y, floor=0.0):
    """Least squares of ``A*x^-b + floor`` against ``y`` for fixed ``floor``."""
    x0 = x[0]
    t = x / x0  # conditioning: the amplitude is fitted at x0
    z = y - floor
    slope, icpt = np.polyfit(np.log(t), np.log(z), 1)
    res = least_squares(lambda p: p[0] * t ** (-p[1]) + floor - y, [math.exp(icpt), -slope],
                        method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=10000)
    a_t, b = res.x
    return a_t * x0**b, b, float(np.sum(res.fun**2))


def fit_power_law(x, y, with_floor: bool = False, grid: int = 200) -> PowerFit:
    """Fit ``y = A*x^-b`` or, with ``with_floor``, ``y = A*x^-b + C0``.

    The floor is profiled: each candidate ``C0`` gets its own best ``(A, b)``,
    the profile is scanned on ``[0, 0.999*min(y)]`` and refined by bounded
    golden-section search, then all three parameters are polished jointly.
    """
    x, y = _xy(x, y, 4 if with_floor else 2)
    if not with_floor:
        A, b, sse = _fit_amp_exp(x, y)
        return PowerFit(float(A), float(b), 0.0, sse)

    hi = 0.999 * float(y.min())

    def profile(c0):
        try:
            return _fit_amp_exp(x, y, c0)[2]
        except (ValueError, np.linalg.LinAlgError):
            return math.inf

    cands = np.linspace(0.0, hi, grid)
    vals = np.array([profile(c) for c in cands])
    i = int(np.argmin(vals))
    lo_b, hi_b = cands[max(i - 1, 0)], cands[min(i + 1, grid - 1)]
    best = minimize_scalar(profile, bounds=(lo_b, hi_b), method="bounded", options={"xatol": 1e-10})
    c0 = float(best.x) if best.fun <= vals[i] else float(cands[i])
    A, b, _ = _fit_amp_exp(x, y, c0)

    x0 = x[0]
    t = x / x0
    res = least_squares(lambda p: p[0] * t ** (-p[1]) + p[2] - y, [A * x0 ** (-b), b, c0],
                        bounds=([0.0, -np.inf, 0.0], [np.inf, np.inf, hi]),
                        xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=20000)
    sse = float(np.sum(res.fun**2))
    if sse <= profile(c0):
        a_t, b, c0 = res.x
        A = a_t * x0**b
    else:
        sse = profile(c0)
    return PowerFit(float(A), float(b), float(c0), sse)


def cel(baseline: PowerFit, c_star: float, l_star: float) -> float:
    """Leverage ``C_base / c_star`` where the baseline law reaches ``l_star`` at ``C_base``."""
    if c_star <= 0:
        raise ValueError("c_star must be positive")
    return baseline.inverse(l_star) / c_star


def leverage(method: PowerFit, c_star: float, baseline_loss: float) -> float:
    """Leverage read off the method's own law at the baseline's observed loss.

    The baseline spends ``c_star`` to reach ``baseline_loss``; the method's
    fitted law says it would reach the same loss with ``method.inverse(...)``.
    """
    if c_star <= 0:
        raise ValueError("c_star must be positive")
    return c_star / method.inverse(baseline_loss)


def param_count(cfg: ModelConfig) -> dict:
    """Exact trainable-parameter totals, per group and overall."""
    out = {"embedding_vector": 0, "unembedding": 0, "hidden": 0}
    for spec in param_specs(cfg):
        out[spec.group.value] += spec.size
    out["total"] = sum(out.values())
    out["active"] = active_param_count(cfg)
    return out


def forward_flops_per_token(cfg: ModelConfig, s: int | None = None) -> float:
    """Matmul FLOPs of one token's forward pass (2 per multiply-accumulate).

    Counts every active weight matrix, the embedding lookup as a ``V x w``
    matmul, the LM head, and the ``QK^T`` and ``PV`` products over a full
    context of ``s`` positions.
    """
    s = cfg.context if s is None else s
    if s <= 0:
        raise ValueError("context length must be positive")
    n_mat = 0
    for spec in param_specs(cfg):
        if spec.is_matrix and ".moe.experts." not in spec.name:
            n_mat += spec.size
    if cfg.moe is not None:
        n_mat += cfg.depth * cfg.moe.routed_active * 3 * cfg.width * cfg.expert_intermediate
    attn = 2.0 * s * (cfg.q_width + cfg.q_width) * cfg.depth
    return 2.0 * n_mat + attn


def chinchilla_flops(cfg: ModelConfig, T: float, s: int | None = None) -> float:
    """Training FLOPs: forward plus a backward pass costing twice the forward."""
    if T <= 0:
        raise ValueError("T must be positive")
    return 3.0 * forward_flops_per_token(cfg, s) * T


def full_scale_config(depth: int, vocab: int = 32000, moe=None) -> ModelConfig:
    """Large-model shape: aspect ratio 128, head dim 128, 4 KV heads, context 4096."""
    return ModelConfig(depth=depth, aspect_ratio=128, head_dim=128, kv_heads=4, vocab=vocab,
                       context=4096, moe=moe)


@dataclass(frozen=True)
class Sensitivity:
    k: int
    lr_err_pct: float
    loss_err_pct: float
    subsets: int
    failed: int


def sensitivity(points, k: int) -> Sensitivity:
    """Mean relative error of subset fits versus the full fit over all ``C(n, k)`` subsets."""
    pts = _points(points)
    n = len(pts)
    if not 3 <= k <= n:
        raise FitError("subset size must satisfy 3 <= k <= n")
    full = fit_quadratic_loglr(pts)
    lr_err, loss_err, failed, total = [], [], 0, 0
    for combo in itertools.combinations(pts, k):
        total += 1
        try:
            f = fit_quadratic_loglr(combo)
        except FitError:
            failed += 1
            continue
        lr_err.append(abs(f.eta_star - full.eta_star) / full.eta_star)
        loss_err.append(abs(f.loss_star - full.loss_star) / abs(full.loss_star))
    mean = lambda v: 100.0 * float(np.mean(v)) if v else math.nan  # noqa: E731
    return Sensitivity(k, mean(lr_err), mean(loss_err), total, failed)


def loo_cv_power(x, y) -> float:
    """Leave-one-out mean absolute relative error (%) of floorless power-law fits."""
    x, y = _xy(x, y, 3)
    errs = []
    for i in range(x.size):
        keep = np.arange(x.size) != i
        f = fit_power_law(x[keep], y[keep])
        errs.append(abs(float(f.predict(x[i])) - y[i]) / y[i])
    return 100.0 * float(np.mean(errs))


# --- tabular I/O ------------------------------------------------------------------

def read_xy_csv(path, x_col: str | None = None, y_col: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Two numeric columns from a headed CSV (first two columns by default)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise FitError(f"{path}: no data rows")
    cols = list(rows[0])
    xc = x_col or cols[0]
    yc = y_col or cols[1]
    try:
        return (np.array([float(r[xc]) for r in rows]), np.array([float(r[yc]) for r in rows]))
    except (KeyError, ValueError) as exc:
        raise FitError(f"{path}: bad column data ({exc})") from None


def read_sweep_csv(path) -> list[SweepPoint]:
    lr, loss = read_xy_csv(path, "lr", "loss")
    return [SweepPoint(a, b) for a, b in zip(lr, loss)]


# --- estimators -------------------------------------------------------------------

class PowerLawRegressor(RegressorMixin, BaseEstimator):
    """``y = A*x^-b (+ C0)`` as a scikit-learn regressor on a single feature."""

    def __init__(self, with_floor: bool = False):
        self.with_floor = with_floor

    def fit(self, X, y):
        X, y = check_X_y(X, y, ensure_min_samples=2)
        if X.shape[1] != 1:
            raise ValueError("PowerLawRegressor takes exactly one feature")
        self.n_features_in_ = 1
        f = fit_power_law(X[:, 0], y, with_floor=self.with_floor)
        self.fit_ = f
        self.amplitude_, self.exponent_, self.floor_ = f.A, f.b, f.C0
        return self

    def predict(self, X):
        check_is_fitted(self, "fit_")
        X = validate_data(self, X, reset=False)
        return self.fit_.predict(X[:, 0])


class LogLRQuadraticRegressor(RegressorMixin, BaseEstimator):
    """Quadratic in ``ln(lr)``; exposes ``eta_star_`` and ``loss_star_``."""

    def fit(self, X, y):
        X, y = check_X_y(X, y, ensure_min_samples=3)
        if X.shape[1] != 1:
            raise ValueError("LogLRQuadraticRegressor takes exactly one feature")
        self.n_features_in_ = 1
        self.fit_ = fit_quadratic_loglr(list(zip(X[:, 0], y)))
        self.eta_star_, self.loss_star_ = self.fit_.eta_star, self.fit_.loss_star
        return self

    def predict(self, X):
        check_is_fitted(self, "fit_")
        X = validate_data(self, X, reset=False)
        return self.fit_.predict(X[:, 0])
