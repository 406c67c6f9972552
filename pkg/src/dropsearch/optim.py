"""Adam with bias correction over dicts of named numpy parameters."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


@dataclass
class AdamState:
    lr: float = 3.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "step": self.step,
            "m": {k: _arr_to_json(a) for k, a in sorted(self.m.items())},
            "v": {k: _arr_to_json(a) for k, a in sorted(self.v.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdamState":
        return cls(lr=d["lr"], beta1=d["beta1"], beta2=d["beta2"], eps=d["eps"], step=d["step"],
                   m={k: _arr_from_json(a) for k, a in d["m"].items()},
                   v={k: _arr_from_json(a) for k, a in d["v"].items()})


def _arr_to_json(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _arr_from_json(d: dict) -> np.ndarray:
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """Return new parameters after one Adam step; ``state`` advances in place."""
    missing = sorted(set(params) - set(grads))
    if missing:
        raise ContractError(f"adam_step: no gradient for {missing}")
    extra = sorted(set(grads) - set(params))
    if extra:
        raise ContractError(f"adam_step: gradient for unknown parameters {extra}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        if g.shape != p.shape:
            raise ContractError(f"adam_step: gradient shape {g.shape} != param shape {p.shape} for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - state.beta1) * g if m is None else state.beta1 * m + (1 - state.beta1) * g
        v = (1 - state.beta2) * g * g if v is None else state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out
