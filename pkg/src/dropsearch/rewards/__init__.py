"""Reward evaluators: ``evaluator(genome, seed) -> EvalResult``."""
from __future__ import annotations

from ..errors import ContractError
from ..space import SearchSpace, conv_space, transformer_space
from .random_search import random_search
from .synthetic import SyntheticReward
from .toy_conv import ToyConvConfig, ToyConvEvaluator, toy_conv_space
from .toy_lm import ToyLMConfig, ToyLMEvaluator

KINDS = ("synthetic", "toy-conv", "toy-lm")


def synthetic_space(space: str = "transformer", sites=None, groups: int = 1, restrict=None) -> SearchSpace:
    restrict = dict(restrict or {})
    if space == "transformer":
        return transformer_space(sites or ("query", "key"), **restrict)
    if space == "conv":
        return conv_space(groups, **restrict)
    raise ContractError(f"unknown synthetic space {space!r}")


def make_evaluator(kind: str, params: dict | None = None, seed: int = 0):
    """Build ``(evaluator, space)`` for a reward kind from plain config values."""
    params = dict(params or {})
    if kind == "synthetic":
        space = synthetic_space(params.pop("space", "transformer"), params.pop("sites", None),
                                params.pop("groups", 1), params.pop("restrict", None))
        target_seed = params.pop("target_seed", seed)
        reward = SyntheticReward.hidden(space, target_seed, params.pop("lam", 1.0))
        if params:
            raise ContractError(f"unknown synthetic reward options {sorted(params)}")
        return reward, space
    if kind == "toy-conv":
        ev = ToyConvEvaluator(ToyConvConfig(**params))
        return ev, ev.space
    if kind == "toy-lm":
        sites = params.pop("sites", None)
        ev = ToyLMEvaluator(ToyLMConfig(**params), **({"sites": tuple(sites)} if sites else {}))
        return ev, ev.space
    raise ContractError(f"unknown reward kind {kind!r}; expected one of {KINDS}")


__all__ = ["KINDS", "SyntheticReward", "ToyConvConfig", "ToyConvEvaluator", "ToyLMConfig", "ToyLMEvaluator",
           "make_evaluator", "random_search", "synthetic_space", "toy_conv_space"]
