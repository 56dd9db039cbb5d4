"""Miniature Transformer-Next (dense) and Transformer-Next-MoE.

Pre-norm residual blocks with grouped-query attention (optional QK-norm,
rotary embeddings and a headwise sigmoid output gate) and either a SwiGLU MLP
or a top-k routed MoE layer (softmax after selection, optional square-root
gating and shared expert). Forward passes are expressed as
:mod:`spherelab.autodiff` graphs so that every trainable tensor gets an exact
reverse-mode gradient.

Matrices are stored ``(d_out, d_in)`` and applied as ``x @ W.T``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .hyperp import Group, Scheme, TransferAnchor, multipliers, residual_multiplier


class ConfigError(ValueError):
    """Inconsistent model configuration."""


@dataclass
class MoEConfig:
    sparsity: int = 2
    granularity: int = 2
    shared_expert: bool = True
    sqrt_gate: bool = True
    aux_weight: float = 0.1

    @property
    def pool_size(self) -> int:
        n = self.granularity * self.sparsity
        return n - 1 if self.shared_expert else n

    @property
    def routed_active(self) -> int:
        return self.granularity - 1 if self.shared_expert else self.granularity


@dataclass
class AttnConfig:
    qk_norm: bool = True
    gated: bool = True
    rope: bool = True
    rope_base: float = 10000.0


@dataclass
class ModelConfig:
    depth: int = 2
    aspect_ratio: int = 16
    n_head: int | None = None
    kv_heads: int = 4
    head_dim: int = 8
    vocab: int = 256
    context: int = 128
    mlp_mult: int = 4
    moe: MoEConfig | None = None
    attn: AttnConfig = field(default_factory=AttnConfig)
    scheme: str = "hyperp"
    depth_mup: bool = True
    anchor_width: int | None = None
    norm_eps: float = ad.NORM_EPS

    def __post_init__(self):
        if isinstance(self.moe, dict):
            self.moe = MoEConfig(**self.moe)
        if isinstance(self.attn, dict):
            self.attn = AttnConfig(**self.attn)
        self.scheme = Scheme.parse(self.scheme).value
        self.validate()

    @property
    def width(self) -> int:
        return self.aspect_ratio * self.depth

    @property
    def heads(self) -> int:
        return self.n_head if self.n_head is not None else 2 * self.depth

    @property
    def q_width(self) -> int:
        return self.heads * self.head_dim

    @property
    def kv_width(self) -> int:
        return self.kv_heads * self.head_dim

    @property
    def intermediate(self) -> int:
        return self.mlp_mult * self.width

    @property
    def expert_intermediate(self) -> int:
        """Expert hidden size so that active MLP parameters match the dense model."""
        if self.moe is None:
            return self.intermediate
        return max(2, 2 * round(self.intermediate / self.moe.granularity / 2))

    @property
    def res_mult(self) -> float:
        return residual_multiplier(self.scheme, self.depth, self.depth_mup)

    @property
    def weight_mult(self) -> float:
        w0 = self.anchor_width if self.anchor_width is not None else self.width
        anchor = TransferAnchor(d0=self.depth, w0=w0)
        return multipliers(self.scheme, Group.UNEMBEDDING, w=self.width, d=self.depth, anchor=anchor).weight_mult

    def validate(self) -> None:
        for name in ("depth", "aspect_ratio", "kv_heads", "head_dim", "vocab", "context", "mlp_mult"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.heads <= 0:
            raise ConfigError("n_head must be positive")
        if self.heads % self.kv_heads:
            raise ConfigError(f"n_head={self.heads} is not divisible by kv_heads={self.kv_heads}")
        if self.attn.rope and self.head_dim % 2:
            raise ConfigError("rotary embeddings need an even head_dim")
        if self.moe is not None:
            m = self.moe
            if m.sparsity < 1 or m.granularity < 1:
                raise ConfigError("MoE sparsity and granularity must be >= 1")
            if m.routed_active < 1:
                raise ConfigError("MoE layer selects no routed expert")
            if m.routed_active > m.pool_size:
                raise ConfigError(f"cannot select {m.routed_active} experts from a pool of {m.pool_size}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    group: Group
    layer: int | None = None

    @property
    def is_matrix(self) -> bool:
        return len(self.shape) == 2

    @property
    def fan_in(self) -> int:
        return self.shape[-1]

    @property
    def fan_out(self) -> int:
        return self.shape[0]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def _mlp_specs(prefix: str, w: int, inter: int, layer: int) -> list[ParamSpec]:
    h = Group.HIDDEN
    return [
        ParamSpec(f"{prefix}.w_gate", (inter, w), h, layer),
        ParamSpec(f"{prefix}.w_up", (inter, w), h, layer),
        ParamSpec(f"{prefix}.w_down", (w, inter), h, layer),
    ]


def param_specs(cfg: ModelConfig) -> list[ParamSpec]:
    """Every trainable tensor, in a fixed order, without allocating values."""
    w, V = cfg.width, cfg.vocab
    ev, h = Group.EMBEDDING_VECTOR, Group.HIDDEN
    specs = [ParamSpec("embed", (V, w), ev)]
    for l in range(cfg.depth):
        p = f"layers.{l}"
        specs.append(ParamSpec(f"{p}.attn_norm", (w,), ev, l))
        specs += [
            ParamSpec(f"{p}.attn.wq", (cfg.q_width, w), h, l),
            ParamSpec(f"{p}.attn.wk", (cfg.kv_width, w), h, l),
            ParamSpec(f"{p}.attn.wv", (cfg.kv_width, w), h, l),
            ParamSpec(f"{p}.attn.wo", (w, cfg.q_width), h, l),
        ]
        if cfg.attn.gated:
            specs.append(ParamSpec(f"{p}.attn.wg", (cfg.heads, w), h, l))
        if cfg.attn.qk_norm:
            specs.append(ParamSpec(f"{p}.attn.q_norm", (cfg.head_dim,), ev, l))
            specs.append(ParamSpec(f"{p}.attn.k_norm", (cfg.head_dim,), ev, l))
        specs.append(ParamSpec(f"{p}.mlp_norm", (w,), ev, l))
        if cfg.moe is None:
            specs += _mlp_specs(f"{p}.mlp", w, cfg.intermediate, l)
        else:
            specs.append(ParamSpec(f"{p}.moe.router", (cfg.moe.pool_size, w), h, l))
            for e in range(cfg.moe.pool_size):
                specs += _mlp_specs(f"{p}.moe.experts.{e}", w, cfg.expert_intermediate, l)
            if cfg.moe.shared_expert:
                specs += _mlp_specs(f"{p}.moe.shared", w, cfg.expert_intermediate, l)
    specs.append(ParamSpec("final_norm", (w,), ev))
    specs.append(ParamSpec("unembed", (V, w), Group.UNEMBEDDING))
    return specs


def build_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Initialize parameters deterministically from ``seed``.

    Linear maps (hidden and unembedding) use the uniform fan-in rule
    ``U(-1/sqrt(d_in), 1/sqrt(d_in))`` times the scheme's init multiplier,
    the embedding is standard normal and normalization gains start at one.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for spec in param_specs(cfg):
        if not spec.is_matrix:
            out[spec.name] = np.ones(spec.shape)
            continue
        mult = multipliers(cfg.scheme, spec.group, w=cfg.width, d=cfg.depth,
                           d_in=spec.fan_in, d_out=spec.fan_out).init_std_mult
        if spec.name == "embed":
            out[spec.name] = mult * rng.standard_normal(spec.shape)
        else:
            bound = 1.0 / math.sqrt(spec.fan_in)
            out[spec.name] = mult * rng.uniform(-bound, bound, size=spec.shape)
    return out


def active_param_count(cfg: ModelConfig) -> int:
    """Parameters touched by one token (routed experts counted once per active slot)."""
    total = 0
    for spec in param_specs(cfg):
        if ".moe.experts." in spec.name:
            continue
        total += spec.size
    if cfg.moe is not None:
        per_expert = 3 * cfg.width * cfg.expert_intermediate
        total += cfg.depth * cfg.moe.routed_active * per_expert
    return total


def aux_balance_loss(counts, probs, gamma: float) -> float:
    """Switch-style balance loss ``gamma * N * sum_i f_i * P_i``.

    ``counts`` are hard dispatch counts per expert, ``probs`` either the total
    router probability per expert or a ``(tokens, N)`` matrix of post-softmax
    routing weights.
    """
    c = np.asarray(counts, dtype=np.float64)
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim == 2:
        p = p.sum(axis=0)
    if c.shape != p.shape:
        raise ValueError("counts and probabilities disagree on the number of experts")
    if c.sum() <= 0:
        raise ValueError("total dispatch count is zero")
    if p.sum() <= 0:
        raise ValueError("total router probability is zero")
    f = c / c.sum()
    P = p / p.sum()
    return float(gamma * c.size * np.sum(f * P))


def combine_gates(gates, sqrt_gate: bool) -> np.ndarray:
    """Expert combination weights from normalized gates."""
    gates = np.asarray(gates, dtype=np.float64)
    return np.sqrt(gates) if sqrt_gate else gates


# --- graph construction -------------------------------------------------------

@dataclass
class BatchActivations:
    """Per-sub-layer tensors retained for the stability metrics.

    ``attn_logits`` are the masked pre-softmax scores (``-inf`` above the
    diagonal), ``attn_out``/``ffn_out`` are residual-branch outputs before the
    residual multiplier, flattened to ``(tokens, width)``.
    """

    attn_logits: list = field(default_factory=list)
    router_logits: list = field(default_factory=list)
    head_logits: np.ndarray | None = None
    attn_out: list = field(default_factory=list)
    ffn_out: list = field(default_factory=list)
    dispatch_counts: list = field(default_factory=list)


def rope_tables(seq: int, head_dim: int, base: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv = base ** (-np.arange(half) * 2.0 / head_dim)
    ang = np.outer(np.arange(seq), inv)
    cos = np.concatenate([np.cos(ang)] * 2, axis=-1)
    sin = np.concatenate([np.sin(ang)] * 2, axis=-1)
    rot = np.zeros((head_dim, head_dim))
    for j in range(half):
        rot[j + half, j] = -1.0
        rot[j, j + half] = 1.0
    return cos, sin, rot


def causal_mask(seq: int) -> np.ndarray:
    return np.triu(np.full((seq, seq), -np.inf), k=1)


class _Builder:
    """Adds model sub-graphs to one :class:`autodiff.Graph`."""

    def __init__(self, cfg: ModelConfig, batch: int, seq: int, names=None):
        self.cfg, self.batch, self.seq = cfg, batch, seq
        self.g = ad.Graph()
        names = names if names is not None else [s.name for s in param_specs(cfg)]
        self.p = {n: self.g.input(n) for n in names}
        self.records: dict[str, list] = {k: [] for k in
                                          ("attn_logits", "router_logits", "attn_out", "ffn_out", "counts")}
        self.aux_terms = []
        self._mask = self.g.const(causal_mask(seq))
        if cfg.attn.rope:
            cos, sin, rot = rope_tables(seq, cfg.head_dim, cfg.attn.rope_base)
            self._cos, self._sin, self._rot = self.g.const(cos), self.g.const(sin), self.g.const(rot)

    def linear(self, x, name):
        return self.g.matmul(x, self.g.transpose(self.p[name]))

    def norm(self, x, gain_name):
        return self.g.mul(self.g.rmsnorm(x, self.cfg.norm_eps), self.p[gain_name])

    def _rope(self, x):
        g = self.g
        return g.add(g.mul(x, self._cos), g.mul(g.matmul(x, self._rot), self._sin))

    def attention(self, h, layer: int):
        g, cfg = self.g, self.cfg
        B, s, hd, kv = self.batch, self.seq, cfg.head_dim, cfg.kv_heads
        grp = cfg.heads // kv
        pre = f"layers.{layer}.attn"
        q = g.permute(g.reshape(self.linear(h, f"{pre}.wq"), (B, s, kv, grp, hd)), (0, 2, 3, 1, 4))
        k = g.permute(g.reshape(self.linear(h, f"{pre}.wk"), (B, s, kv, 1, hd)), (0, 2, 3, 1, 4))
        v = g.permute(g.reshape(self.linear(h, f"{pre}.wv"), (B, s, kv, 1, hd)), (0, 2, 3, 1, 4))
        if cfg.attn.qk_norm:
            q = self.norm(q, f"{pre}.q_norm")
            k = self.norm(k, f"{pre}.k_norm")
        if cfg.attn.rope:
            q, k = self._rope(q), self._rope(k)
        scores = g.scale(g.matmul(q, g.transpose(k)), 1.0 / math.sqrt(hd))
        logits = g.add(scores, self._mask)
        self.records["attn_logits"].append(logits)
        o = g.matmul(g.softmax(logits), v)
        if cfg.attn.gated:
            gate = g.sigmoid(self.linear(h, f"{pre}.wg"))
            o = g.mul(o, g.permute(g.reshape(gate, (B, s, kv, grp, 1)), (0, 2, 3, 1, 4)))
        o = g.reshape(g.permute(o, (0, 3, 1, 2, 4)), (B, s, cfg.q_width))
        return self.linear(o, f"{pre}.wo")

    def expert(self, x, prefix):
        g = self.g
        return self.linear(g.mul(g.silu(self.linear(x, f"{prefix}.w_gate")), self.linear(x, f"{prefix}.w_up")),
                           f"{prefix}.w_down")

    def moe(self, h, layer: int):
        g, m = self.g, self.cfg.moe
        B, s, w = self.batch, self.seq, self.cfg.width
        n_tok = B * s
        pre = f"layers.{layer}.moe"
        x = g.reshape(h, (n_tok, w))
        router = self.linear(x, f"{pre}.router")
        self.records["router_logits"].append(router)
        idx = g.topk(router, m.routed_active)
        gates = g.softmax(g.take(router, idx))
        weights = g.sqrt(gates) if m.sqrt_gate else gates
        dense = g.scatter(weights, idx, m.pool_size)
        y = None
        for e in range(m.pool_size):
            term = g.mul(g.slice(dense, e, e + 1), self.expert(x, f"{pre}.experts.{e}"))
            y = term if y is None else g.add(y, term)
        if m.shared_expert:
            y = g.scale(g.add(y, self.expert(x, f"{pre}.shared")), 1.0 / math.sqrt(2.0))
        counts = g.count(idx, m.pool_size)
        self.records["counts"].append(counts)
        if m.aux_weight:
            f = g.scale(g.detach(counts), 1.0 / (n_tok * m.routed_active))
            P = g.scale(g.sum(g.scatter(gates, idx, m.pool_size), axis=0), 1.0 / n_tok)
            self.aux_terms.append(g.scale(g.sum(g.mul(f, P)), m.aux_weight * m.pool_size))
        return g.reshape(y, (B, s, w))

    def mlp(self, h, layer: int):
        return self.expert(h, f"layers.{layer}.mlp")

    def block(self, x, layer: int):
        g, cfg = self.g, self.cfg
        a = self.attention(self.norm(x, f"layers.{layer}.attn_norm"), layer)
        self.records["attn_out"].append(a)
        x = g.add(x, g.scale(a, cfg.res_mult))
        hn = self.norm(x, f"layers.{layer}.mlp_norm")
        f = self.mlp(hn, layer) if cfg.moe is None else self.moe(hn, layer)
        self.records["ffn_out"].append(f)
        return g.add(x, g.scale(f, cfg.res_mult))


@dataclass
class LMGraph:
    graph: ad.Graph
    records: dict
    head_logits: ad.Node
    batch: int
    seq: int

    def activations(self, trace: ad.Trace) -> BatchActivations:
        n = self.batch * self.seq
        flat = lambda nodes: [trace.value(x).reshape(n, -1) for x in nodes]  # noqa: E731
        return BatchActivations(
            attn_logits=[trace.value(x) for x in self.records["attn_logits"]],
            router_logits=[trace.value(x) for x in self.records["router_logits"]],
            head_logits=trace.value(self.head_logits),
            attn_out=flat(self.records["attn_out"]),
            ffn_out=flat(self.records["ffn_out"]),
            dispatch_counts=[trace.value(x) for x in self.records["counts"]],
        )


def build_lm_graph(cfg: ModelConfig, batch: int, seq: int) -> LMGraph:
    """Graph from ``tokens``/``targets`` (flattened ``batch*seq`` ids) to the loss.

    Outputs: ``loss`` (cross-entropy plus summed balance losses), ``lm_loss``
    and, for MoE models with a nonzero weight, ``aux_loss``.
    """
    b = _Builder(cfg, batch, seq)
    g = b.g
    tokens = g.input("tokens", differentiable=False)
    targets = g.input("targets", differentiable=False)
    x = g.reshape(g.gather_rows(b.p["embed"], tokens), (batch, seq, cfg.width))
    for layer in range(cfg.depth):
        x = b.block(x, layer)
    x = b.norm(x, "final_norm")
    logits = g.reshape(b.linear(x, "unembed"), (batch * seq, cfg.vocab))
    if cfg.weight_mult != 1.0:
        logits = g.scale(logits, cfg.weight_mult)
    lm = g.output(g.cross_entropy(logits, targets), "lm_loss")
    total = lm
    if b.aux_terms:
        aux = b.aux_terms[0]
        for t in b.aux_terms[1:]:
            aux = g.add(aux, t)
        g.output(aux, "aux_loss")
        total = g.add(lm, aux)
    g.output(total, "loss")
    return LMGraph(g, b.records, logits, batch, seq)


def _split_tokens(tokens) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(tokens, dtype=np.int64)
    if t.ndim == 1:
        t = t[None, :]
    if t.ndim != 2 or t.shape[1] < 2 or t.shape[0] < 1:
        raise ValueError("need at least one sequence of two or more tokens")
    return t[:, :-1], t[:, 1:]


class TransformerNext:
    """A configured model with cached graphs per batch shape."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.specs = param_specs(cfg)
        self._graphs: dict[tuple[int, int], LMGraph] = {}

    def init_params(self, seed: int = 0) -> dict[str, np.ndarray]:
        return build_params(self.cfg, seed)

    def lm_graph(self, batch: int, seq: int) -> LMGraph:
        key = (batch, seq)
        if key not in self._graphs:
            self._graphs[key] = build_lm_graph(self.cfg, batch, seq)
        return self._graphs[key]

    def _run(self, params, tokens):
        inputs, targets = _split_tokens(tokens)
        if inputs.max() >= self.cfg.vocab or inputs.min() < 0 or targets.max() >= self.cfg.vocab:
            raise ValueError("token id out of vocabulary range")
        lg = self.lm_graph(*inputs.shape)
        trace = ad.evaluate(lg.graph, {**params, "tokens": inputs.ravel(), "targets": targets.ravel()})
        return lg, trace

    def loss(self, params, tokens) -> tuple[float, BatchActivations]:
        lg, trace = self._run(params, tokens)
        return float(trace["lm_loss"]), lg.activations(trace)

    def loss_and_grads(self, params, tokens):
        """Returns ``(total_loss, lm_loss, grads, activations)``."""
        lg, trace = self._run(params, tokens)
        grads = ad.backward(lg.graph, trace, output="loss")
        return float(trace["loss"]), float(trace["lm_loss"]), grads, lg.activations(trace)


def lm_loss(tokens, params, cfg: ModelConfig) -> tuple[float, BatchActivations]:
    """Mean next-token cross-entropy in nats per predicted position."""
    return TransformerNext(cfg).loss(params, tokens)


# --- single-sublayer wrappers -------------------------------------------------

def _sublayer(cfg, x, params, build):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.width:
        raise ValueError(f"x must have shape (tokens, {cfg.width})")
    b = _Builder(cfg, 1, x.shape[0], names=list(params))
    xin = b.g.input("x")
    xr = b.g.reshape(xin, (1, x.shape[0], cfg.width))
    out = b.g.output(build(b, xr), "y")
    trace = ad.evaluate(b.g, {**params, "x": x})
    return trace.value(out), b, trace


def attention_forward(x, params, cfg: ModelConfig, layer: int = 0):
    """Attention sub-layer on ``(tokens, width)`` input; returns ``(y, masked logits)``."""
    y, b, trace = _sublayer(cfg, x, params, lambda b, xr: b.attention(xr, layer))
    logits = trace.value(b.records["attn_logits"][0])[0]
    return y[0], logits


def moe_forward(x, params, cfg: ModelConfig, layer: int = 0):
    """MoE sub-layer; returns ``(y, router logits, dispatch counts)``."""
    if cfg.moe is None:
        raise ConfigError("moe_forward needs a MoE config")
    y, b, trace = _sublayer(cfg, x, params, lambda b, xr: b.moe(xr, layer))
    return y[0], trace.value(b.records["router_logits"][0]), trace.value(b.records["counts"][0])


def block_forward(x, params, cfg: ModelConfig, layer: int = 0):
    y, _, _ = _sublayer(cfg, x, params, lambda b, xr: b.block(xr, layer))
    return y[0]
