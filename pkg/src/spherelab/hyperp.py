"""Per-parameter multipliers for muP, muP++ and HyperP, and the closed-form LR laws.

All proportionalities are normalized to 1 at a :class:`TransferAnchor`, so the
base learning rate is the literal learning rate of the smallest model. The
residual multiplier is the only absolute quantity (``1`` or ``1/sqrt(2d)``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

DATA_EXPONENT = 0.32
DATA_LAW = (24.27, 0.320)
BATCH_LAW = (4.66e-6, 0.558)


class Scheme(str, Enum):
    MUP = "mup"
    MUPPP = "muppp"
    HYPERP = "hyperp"

    @classmethod
    def parse(cls, value) -> "Scheme":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown scheme {value!r}; expected one of {[s.value for s in cls]}") from None


class Group(str, Enum):
    EMBEDDING_VECTOR = "embedding_vector"
    UNEMBEDDING = "unembedding"
    HIDDEN = "hidden"

    @classmethod
    def parse(cls, value) -> "Group":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown parameter group {value!r}") from None


@dataclass(frozen=True)
class Multipliers:
    lr_mult: float
    init_std_mult: float
    res_mult: float
    weight_mult: float
    weight_decay: float  # multiplies the base weight decay


@dataclass(frozen=True)
class TransferAnchor:
    """Scale at which the base learning rate ``eta0`` was tuned."""

    eta0: float = 0.02
    d0: int = 2
    T0: float = 1.0e6
    B0: float = 8192
    w0: int | None = None  # defaults to the width at d0 under the run's aspect ratio

    def __post_init__(self):
        for name in ("eta0", "d0", "T0", "B0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"anchor {name} must be positive")
        if self.w0 is not None and self.w0 <= 0:
            raise ValueError("anchor w0 must be positive")


def residual_multiplier(scheme, depth: int, depth_mup: bool = True) -> float:
    scheme = Scheme.parse(scheme)
    if scheme is Scheme.MUP or not depth_mup:
        return 1.0
    return 1.0 / math.sqrt(2 * depth)


def multipliers(
    scheme,
    group,
    *,
    w: int,
    d: int,
    d_in: int = 1,
    d_out: int = 1,
    T: float | None = None,
    anchor: TransferAnchor | None = None,
    depth_mup: bool = True,
) -> Multipliers:
    """Look up the multiplier row for one parameter.

    ``w``/``d`` are model width and depth, ``d_in``/``d_out`` the matrix shape
    (ignored for vectors), ``T`` the training-token budget (HyperP hidden LR
    only). ``depth_mup=False`` drops the depth factors (the 1/sqrt(d) LR and the
    1/sqrt(2d) residual multiplier) for ablations.
    """
    scheme = Scheme.parse(scheme)
    group = Group.parse(group)
    if min(w, d, d_in, d_out) <= 0:
        raise ValueError("dimensions must be positive")
    anchor = anchor or TransferAnchor(d0=d)
    w0 = anchor.w0 if anchor.w0 is not None else w * anchor.d0 / d
    depth_lr = math.sqrt(anchor.d0 / d) if depth_mup else 1.0
    res = residual_multiplier(scheme, d, depth_mup)

    if group is Group.EMBEDDING_VECTOR:
        if scheme is Scheme.MUP:
            return Multipliers(1.0, 1.0, 1.0, 1.0, 1.0)
        return Multipliers(depth_lr, 1.0, 1.0, 1.0, 0.0)

    if group is Group.UNEMBEDDING:
        if scheme is Scheme.MUP:
            return Multipliers(1.0, 1.0, 1.0, w0 / w, 1.0)
        if scheme is Scheme.MUPPP:
            return Multipliers(depth_lr, 1.0, 1.0, w0 / w, 0.0)
        return Multipliers(depth_lr, 1.0, 1.0, 1.0, 0.0)

    # hidden matrices
    if scheme is Scheme.MUP:
        return Multipliers(math.sqrt(d_out / d_in), 1.0, res, 1.0, w0 / w)
    if scheme is Scheme.MUPPP:
        return Multipliers(math.sqrt(d_out / d_in) * depth_lr, 1.0, res, 1.0, w0 / w)
    t_factor = 1.0 if T is None else (anchor.T0 / T) ** DATA_EXPONENT
    return Multipliers(t_factor * depth_lr, 1.0, res, 1.0, 0.0)


def transfer_lr(anchor: TransferAnchor, d: float, T: float) -> float:
    """Base LR transferred from the anchor to depth ``d`` and ``T`` tokens."""
    return anchor.eta0 * math.sqrt(anchor.d0 / d) * (anchor.T0 / T) ** DATA_EXPONENT


def eval_data_law(T: float) -> float:
    """Optimal LR predicted from the training-token budget."""
    if T <= 0:
        raise ValueError("T must be positive")
    a, b = DATA_LAW
    return a * T ** (-b)


def eval_batch_law(B: float) -> float:
    """Optimal LR predicted from the batch size in tokens."""
    if B <= 0:
        raise ValueError("B must be positive")
    a, b = BATCH_LAW
    return a * B**b
