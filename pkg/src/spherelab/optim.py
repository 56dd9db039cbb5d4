"""Muon, MuonH, AdamW and AdamH steps plus the sphere and tangent projections.

Steps are plain functions ``(W, grad, lr, ..., state) -> W_new`` that mutate only
the per-parameter :class:`ParamState` they are handed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .hyperp import Group, Scheme
from .linalg import frobenius_inner, frobenius_norm, newton_schulz_orthogonalize

MUON_MOMENTUM = 0.95
ADAM_BETAS = (0.9, 0.95)
ADAM_EPS = 1e-8


class Kind(str, Enum):
    MUON = "muon"
    MUONH = "muonh"
    ADAMW = "adamw"
    ADAMH = "adamh"

    @property
    def on_sphere(self) -> bool:
        return self in (Kind.MUONH, Kind.ADAMH)


@dataclass
class ParamState:
    """Buffers for one parameter. ``c_w``/``c_g`` are set only for sphere kinds."""

    kind: Kind
    momentum: np.ndarray | None = None
    exp_avg: np.ndarray | None = None
    exp_avg_sq: np.ndarray | None = None
    c_w: float | None = None
    c_g: float | None = None
    step: int = 0


def init_state(kind, w, c_g: float | None = None) -> ParamState:
    """Fresh state; sphere kinds capture ``c_W = ||W0||_F`` here, once."""
    kind = Kind(kind)
    w = np.asarray(w, dtype=np.float64)
    st = ParamState(kind)
    if kind in (Kind.MUON, Kind.MUONH):
        st.momentum = np.zeros_like(w)
    else:
        st.exp_avg = np.zeros_like(w)
        st.exp_avg_sq = np.zeros_like(w)
    if kind.on_sphere:
        if w.ndim != 2:
            raise ValueError("sphere optimizers need a matrix parameter")
        c_w = frobenius_norm(w)
        if c_w <= 0:
            raise ValueError("cannot place a zero matrix on a sphere")
        st.c_w = c_w
        st.c_g = c_w if c_g is None else float(c_g)
    return st


def tangent_project(delta, w) -> np.ndarray:
    """Component of ``delta`` Frobenius-orthogonal to ``w``."""
    delta = np.asarray(delta, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if delta.shape != w.shape:
        raise ValueError("delta and W must have the same shape")
    nw2 = frobenius_inner(w, w)
    if nw2 == 0:
        raise ValueError("tangent projection at a zero matrix is undefined")
    return delta - (frobenius_inner(delta, w) / nw2) * w


def hypersphere_project(w, c_w: float) -> np.ndarray:
    """Rescale ``w`` to Frobenius norm ``c_w``."""
    w = np.asarray(w, dtype=np.float64)
    n = frobenius_norm(w)
    if n == 0:
        raise ValueError("cannot project a zero matrix onto the sphere")
    return (c_w / n) * w


def muon_raw_update(grad, state: ParamState, momentum: float = MUON_MOMENTUM, ns_steps: int = 5) -> np.ndarray:
    """Nesterov momentum followed by Newton-Schulz orthogonalization."""
    grad = np.asarray(grad, dtype=np.float64)
    if state.momentum is None:
        state.momentum = np.zeros_like(grad)
    state.momentum = momentum * state.momentum + grad
    blend = grad + momentum * state.momentum
    return newton_schulz_orthogonalize(blend, steps=ns_steps)


def _sphere_step(w, update, lr, state):
    n = frobenius_norm(update)
    if n == 0:
        return np.array(w, dtype=np.float64)
    g_hat = (state.c_g / n) * update
    return hypersphere_project(w - lr * g_hat, state.c_w)


def muonh_step(w, grad, lr: float, state: ParamState) -> np.ndarray:
    """Normalized Muon update followed by re-projection onto the ``c_W`` sphere."""
    if state.c_w is None:
        raise ValueError("sphere state is not initialized")
    w = np.asarray(w, dtype=np.float64)
    upd = muon_raw_update(grad, state)
    state.step += 1
    if lr == 0:
        return w.copy()
    return _sphere_step(w, upd, lr, state)


def muon_step(w, grad, lr: float, wd: float, state: ParamState) -> np.ndarray:
    """``W - lr*G - wd*W`` with independent (not lr-scaled) decay."""
    w = np.asarray(w, dtype=np.float64)
    upd = muon_raw_update(grad, state)
    state.step += 1
    return w - lr * upd - wd * w


def _adam_direction(grad, state: ParamState, betas=ADAM_BETAS, eps=ADAM_EPS) -> np.ndarray:
    grad = np.asarray(grad, dtype=np.float64)
    b1, b2 = betas
    if state.exp_avg is None:
        state.exp_avg = np.zeros_like(grad)
        state.exp_avg_sq = np.zeros_like(grad)
    state.step += 1
    state.exp_avg = b1 * state.exp_avg + (1 - b1) * grad
    state.exp_avg_sq = b2 * state.exp_avg_sq + (1 - b2) * grad * grad
    m_hat = state.exp_avg / (1 - b1**state.step)
    v_hat = state.exp_avg_sq / (1 - b2**state.step)
    return m_hat / (np.sqrt(v_hat) + eps)


def adamw_step(w, grad, lr: float, wd: float, state: ParamState, betas=ADAM_BETAS, eps=ADAM_EPS) -> np.ndarray:
    """Bias-corrected Adam with decoupled decay ``W <- W*(1 - lr*wd)``."""
    w = np.asarray(w, dtype=np.float64)
    d = _adam_direction(grad, state, betas, eps)
    return w * (1 - lr * wd) - lr * d


def adamh_step(w, grad, lr: float, wd: float, state: ParamState, betas=ADAM_BETAS, eps=ADAM_EPS) -> np.ndarray:
    """Adam direction normalized to ``c_G``, then re-projected to ``c_W``.

    ``wd`` is accepted for signature parity and ignored: decay has no
    first-order effect on the sphere.
    """
    if state.c_w is None:
        raise ValueError("sphere state is not initialized")
    w = np.asarray(w, dtype=np.float64)
    d = _adam_direction(grad, state, betas, eps)
    if lr == 0:
        return w.copy()
    return _sphere_step(w, d, lr, state)


def lr_schedule(step: int, total_steps: int, peak: float) -> float:
    """Linear decay from ``peak`` to ``0.1*peak`` without warm-up."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError("step must lie in [0, total_steps]")
    return peak * (1.0 - 0.9 * step / total_steps)


def assign_kind(scheme, group, is_matrix: bool = True) -> Kind:
    """HyperP runs MuonH on hidden and AdamH on the unembedding; others Muon/AdamW."""
    scheme, group = Scheme.parse(scheme), Group.parse(group)
    sphere = scheme is Scheme.HYPERP
    if group is Group.HIDDEN and is_matrix:
        return Kind.MUONH if sphere else Kind.MUON
    if group is Group.UNEMBEDDING and is_matrix:
        return Kind.ADAMH if sphere else Kind.ADAMW
    return Kind.ADAMW


@dataclass
class OptimizerState:
    """All per-parameter states of one run, keyed by parameter name."""

    params: dict[str, ParamState] = field(default_factory=dict)

    @classmethod
    def create(cls, specs, values: dict, scheme, kinds: dict | None = None) -> "OptimizerState":
        kinds = kinds or {}
        out = cls()
        for spec in specs:
            kind = kinds.get(spec.name) or assign_kind(scheme, spec.group, spec.is_matrix)
            out.params[spec.name] = init_state(kind, values[spec.name])
        return out

    def step(self, name: str, w, grad, lr: float, wd: float) -> np.ndarray:
        st = self.params[name]
        if st.kind is Kind.MUONH:
            return muonh_step(w, grad, lr, st)
        if st.kind is Kind.MUON:
            return muon_step(w, grad, lr, wd, st)
        if st.kind is Kind.ADAMH:
            return adamh_step(w, grad, lr, wd, st)
        return adamw_step(w, grad, lr, wd, st)

    def sphere_deviation(self, values: dict) -> float:
        """Max ``| ||W||_F - c_W | / c_W`` over sphere-constrained parameters (0 if none)."""
        dev = 0.0
        for name, st in self.params.items():
            if st.c_w is not None:
                dev = max(dev, abs(frobenius_norm(values[name]) - st.c_w) / st.c_w)
        return dev
