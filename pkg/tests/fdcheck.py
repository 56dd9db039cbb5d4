"""Central finite-difference oracle for autodiff primitives."""

import numpy as np

from spherelab import autodiff as ad


def _pos(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


def _norm(rng, shape):
    return rng.standard_normal(shape)


def _cases():
    """name -> builder(rng) returning (graph, node, inputs)."""
    c = {}

    def unary(op, make=_norm, shape=(3, 4), **kw):
        def build(rng):
            g = ad.Graph()
            x = g.input("x")
            return g, getattr(g, op)(x, **kw), {"x": make(rng, shape)}
        return build

    def binary(op, sa=(3, 4), sb=(3, 4), make_b=_norm):
        def build(rng):
            g = ad.Graph()
            a, b = g.input("a"), g.input("b")
            return g, getattr(g, op)(a, b), {"a": _norm(rng, sa), "b": make_b(rng, sb)}
        return build

    c["matmul"] = binary("matmul", (3, 4), (4, 2))
    c["matmul_batched"] = binary("matmul", (2, 3, 4), (1, 4, 5))
    c["add"] = binary("add", (3, 4), (4,))
    c["sub"] = binary("sub", (2, 3, 4), (3, 1))
    c["mul"] = binary("mul", (3, 4), (1, 4))
    c["div"] = binary("div", (3, 4), (3, 4), make_b=_pos)
    c["scale"] = unary("scale", c=-1.7)
    c["transpose"] = unary("transpose", shape=(2, 3, 4))
    c["permute"] = unary("permute", shape=(2, 3, 4), axes=(2, 0, 1))
    c["slice"] = unary("slice", shape=(3, 5), start=1, stop=4)
    c["softmax"] = unary("softmax")
    c["rmsnorm"] = unary("rmsnorm")
    c["layernorm"] = unary("layernorm")
    c["silu"] = unary("silu")
    c["sigmoid"] = unary("sigmoid")
    c["exp"] = unary("exp")
    c["log"] = unary("log", make=_pos)
    c["sqrt"] = unary("sqrt", make=_pos)
    c["sum"] = unary("sum")
    c["sum_axis"] = unary("sum", shape=(3, 4, 2), axis=1, keepdims=True)

    def reshape_build(rng):
        g = ad.Graph()
        x = g.input("x")
        return g, g.reshape(x, (2, 6)), {"x": _norm(rng, (3, 4))}
    c["reshape"] = reshape_build

    def gather(rng):
        g = ad.Graph()
        t = g.input("table")
        idx = g.input("idx", differentiable=False)
        return g, g.gather_rows(t, idx), {"table": _norm(rng, (5, 3)), "idx": rng.integers(0, 5, size=7)}
    c["gather_rows"] = gather

    def take(rng):
        g = ad.Graph()
        x = g.input("x")
        sel = g.input("sel", differentiable=False)
        idx = g.topk(sel, 2)
        return g, g.take(x, idx), {"x": _norm(rng, (4, 5)), "sel": _norm(rng, (4, 5))}
    c["take"] = take

    def scatter(rng):
        g = ad.Graph()
        v = g.input("v")
        sel = g.input("sel", differentiable=False)
        return g, g.scatter(v, g.topk(sel, 2), 5), {"v": _norm(rng, (4, 2)), "sel": _norm(rng, (4, 5))}
    c["scatter"] = scatter

    def xent(rng):
        g = ad.Graph()
        z = g.input("z")
        t = g.input("t", differentiable=False)
        return g, g.cross_entropy(z, t), {"z": 3 * _norm(rng, (6, 5)), "t": rng.integers(0, 5, size=6)}
    c["cross_entropy"] = xent

    def softmax_xent(rng):
        g = ad.Graph()
        z = g.input("z")
        t = g.input("t", differentiable=False)
        p = g.softmax(z)
        return g, g.cross_entropy(g.log(p), t), {"z": _norm(rng, (4, 6)), "t": rng.integers(0, 6, size=4)}
    c["softmax_then_cross_entropy"] = softmax_xent
    return c


CASES = _cases()


def max_rel_error(name: str, seed: int) -> float:
    """Norm-wise relative error between backward() and central differences."""
    rng = np.random.default_rng(seed)
    g, node, inputs = CASES[name](rng)
    weights = None

    def scalar(vals):
        nonlocal weights
        out = ad.evaluate(g, vals).value(node)
        if weights is None:
            weights = np.random.default_rng(seed + 10_000).standard_normal(np.shape(out))
        return float(np.sum(out * weights))

    scalar(inputs)
    g.output(node, "out")
    tr = ad.evaluate(g, inputs)
    grads = ad.backward(g, tr, seed=weights)
    worst = 0.0
    for key, x in inputs.items():
        if not g.differentiable[key]:
            continue
        fd = np.zeros_like(x, dtype=np.float64)
        for i in np.ndindex(x.shape):
            h = 1e-6 * max(1.0, abs(x[i]))
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            fd[i] = (scalar({**inputs, key: xp}) - scalar({**inputs, key: xm})) / (2 * h)
        an = grads.get(key, np.zeros_like(fd))
        denom = max(np.linalg.norm(fd), np.linalg.norm(an), 1e-12)
        worst = max(worst, float(np.linalg.norm(an - fd) / denom))
    return worst
