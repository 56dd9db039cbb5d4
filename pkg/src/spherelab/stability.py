"""Training-stability indicators: Z-values, branch RMS, 5-sigma outliers and MaxVio."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import logsumexp

OUTLIER_SIGMA = 5.0


def _as_list(x):
    return x if isinstance(x, (list, tuple)) else [x]


def z_metric(logits) -> float:
    """Mean over rows of the squared log-sum-exp of the last axis.

    ``-inf`` entries (masked positions) drop out of the sum; a row whose only
    finite entry is ``z`` contributes ``z**2``.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.ndim == 0 or z.shape[-1] == 0:
        raise ValueError("z_metric needs at least one non-empty row")
    lse = logsumexp(z, axis=-1)
    return float(np.mean(lse**2))


def z_metric_layers(layers) -> float:
    """Per-layer Z averaged across layers."""
    layers = _as_list(layers)
    if not layers:
        raise ValueError("no layers given")
    return float(np.mean([z_metric(l) for l in layers]))


def output_rms(outputs) -> float:
    """RMS over all elements, averaged across layers (pass a list for several layers)."""
    layers = _as_list(outputs)
    vals = []
    for o in layers:
        o = np.asarray(o, dtype=np.float64)
        if o.size == 0:
            raise ValueError("empty branch output")
        vals.append(np.sqrt(np.mean(o * o)))
    if not vals:
        raise ValueError("no layers given")
    return float(np.mean(vals))


def outlier_pct(outputs, sigma: float = OUTLIER_SIGMA) -> float:
    """Percent of elements beyond ``sigma`` population std of their token's mean.

    Each layer is ``(tokens, width)``; tokens with zero spread have no
    outliers. The per-layer percentages are averaged.
    """
    layers = _as_list(outputs)
    if not layers:
        raise ValueError("no layers given")
    vals = []
    for o in layers:
        o = np.asarray(o, dtype=np.float64)
        if o.ndim == 1:
            o = o[None, :]
        o = o.reshape(-1, o.shape[-1])
        if o.shape[-1] < 2:
            raise ValueError("per-token vectors need length >= 2")
        mu = o.mean(axis=-1, keepdims=True)
        sd = o.std(axis=-1, keepdims=True)
        hit = (np.abs(o - mu) > sigma * sd) & (sd > 0)
        vals.append(100.0 * hit.mean())
    return float(np.mean(vals))


def maxvio(counts) -> float:
    """``(max c - mean c) / mean c`` of per-expert dispatch counts."""
    c = np.asarray(counts, dtype=np.float64).ravel()
    if c.size == 0:
        raise ValueError("need at least one expert")
    if np.any(c < 0):
        raise ValueError("counts must be non-negative")
    mean = c.sum() / c.size
    if mean <= 0:
        raise ValueError("total dispatch count is zero")
    return float((c.max() - mean) / mean)


@dataclass
class StabilityReport:
    step: int
    attn_z: float
    router_z: float
    head_z: float
    attn_rms: float
    moe_rms: float
    attn_outlier_pct: float
    moe_outlier_pct: float
    mean_maxvio: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_activations(cls, step: int, acts) -> "StabilityReport":
        """Summarize a :class:`spherelab.model.BatchActivations` snapshot.

        ``moe_*`` fields describe the feed-forward branch (dense MLP or MoE);
        router fields are 0 for dense models.
        """
        router = acts.router_logits
        return cls(
            step=int(step),
            attn_z=z_metric_layers(acts.attn_logits),
            router_z=z_metric_layers(router) if router else 0.0,
            head_z=z_metric(acts.head_logits),
            attn_rms=output_rms(acts.attn_out),
            moe_rms=output_rms(acts.ffn_out),
            attn_outlier_pct=outlier_pct(acts.attn_out),
            moe_outlier_pct=outlier_pct(acts.ffn_out),
            mean_maxvio=float(np.mean([maxvio(c) for c in acts.dispatch_counts])) if acts.dispatch_counts else 0.0,
        )
