import numpy as np

from dropsearch.tensor import Tape, Tensor


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / denom)


def check_op_grad(build, *arrays, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and finite differences.

    ``build`` maps input tensors to a tensor; the loss is a fixed random
    projection of its output so every output entry contributes.
    """
    rng = np.random.default_rng(1234)
    with Tape():
        probe = build(*[Tensor(a) for a in arrays])
    weights = rng.normal(size=probe.shape)

    def loss_of(*xs):
        return float((build(*[Tensor(a) for a in xs]).data * weights).sum())

    worst = 0.0
    params = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = build(*params)
        loss = (out * weights).sum()
    grads = tape.gradient(loss)
    for k, p in enumerate(params):
        def f(x, k=k):
            xs = list(arrays)
            xs[k] = x
            return loss_of(*xs)
        worst = max(worst, rel_err(grads.of(p), numeric_grad(f, arrays[k], h)))
    return worst


def conv2d_oracle(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    n, h, wd, ci = x.shape
    kh, kw, _, co = w.shape
    out = np.zeros((n, h - kh + 1, wd - kw + 1, co))
    for b in range(n):
        for y in range(h - kh + 1):
            for x0 in range(wd - kw + 1):
                for o in range(co):
                    s = 0.0
                    for i in range(kh):
                        for j in range(kw):
                            for c in range(ci):
                                s += x[b, y + i, x0 + j, c] * w[i, j, c, o]
                    out[b, y, x0, o] = s
    return out
