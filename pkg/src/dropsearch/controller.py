"""Autoregressive token policies trained with importance-weighted REINFORCE.

Two backends share one contract (``init_params``, ``sample``, ``log_prob``,
``entropy``):

* :class:`FactorizedPolicy` keeps one free logit vector per token slot. It is
  small enough to enumerate exhaustively and serves as the reference.
* :class:`AttentionPolicy` is a causal pre-norm Transformer that reads the
  previously emitted tokens and predicts the next slot.

:class:`Controller` owns parameters, Adam state, the moving-average baseline,
and a version counter that increases by one per update.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from . import tensor as T
from .errors import ContractError
from .optim import AdamState, _arr_from_json, _arr_to_json, adam_step
from .space import PatternGenome, SearchSpace
from .tensor import Tape, Tensor

CHECKPOINT_FORMAT = "dropsearch-controller"
CHECKPOINT_VERSION = 1
MAX_LOG_RATIO = 700.0


def _sample_index(probs: np.ndarray, rng: np.random.Generator) -> int:
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    return min(idx, len(probs) - 1)


class FactorizedPolicy:
    backend = "factorized"

    def __init__(self, slot_sizes):
        self.slot_sizes = tuple(int(v) for v in slot_sizes)

    def init_params(self, rng: np.random.Generator | None = None) -> dict:
        return {f"logits_{i:03d}": np.zeros(v) for i, v in enumerate(self.slot_sizes)}

    def _logps(self, P: dict) -> list[Tensor]:
        return [T.log_softmax(P[f"logits_{i:03d}"]) for i in range(len(self.slot_sizes))]

    def log_prob(self, P: dict, tokens) -> Tensor:
        terms = [lp[int(t)] for lp, t in zip(self._logps(P), tokens)]
        out = terms[0]
        for t in terms[1:]:
            out = out + t
        return out

    def entropy(self, P: dict, tokens_batch=None) -> Tensor:
        out = None
        for lp in self._logps(P):
            h = -(T.exp(lp) * lp).sum()
            out = h if out is None else out + h
        return out

    def sample(self, params: dict, rng: np.random.Generator):
        tokens, total = [], 0.0
        for i in range(len(self.slot_sizes)):
            z = params[f"logits_{i:03d}"]
            logp = T.log_softmax(Tensor(z)).data
            t = _sample_index(np.exp(logp), rng)
            tokens.append(t)
            total += float(logp[t])
        return tuple(tokens), total


class AttentionPolicy:
    """Causal Transformer over the token sequence.

    Position 0 reads a start symbol; position p reads the token chosen at
    p - 1. Output logits span the concatenated vocabularies and are masked to
    the current slot's range before the softmax.
    """

    backend = "attention"

    def __init__(self, slot_sizes, n_layers: int = 4, d_model: int = 128, n_heads: int = 4,
                 d_head: int = 32, d_ff: int = 32, init_std: float = 0.02):
        self.slot_sizes = tuple(int(v) for v in slot_sizes)
        self.n_layers, self.d_model, self.n_heads = n_layers, d_model, n_heads
        self.d_head, self.d_ff, self.init_std = d_head, d_ff, init_std
        self.offsets = np.concatenate([[0], np.cumsum(self.slot_sizes)[:-1]]).astype(int)
        self.vocab = int(sum(self.slot_sizes))
        n = len(self.slot_sizes)
        self.slot_bias = np.full((n, self.vocab), nn.NEG_INF)
        for p, (off, v) in enumerate(zip(self.offsets, self.slot_sizes)):
            self.slot_bias[p, off:off + v] = 0.0

    def init_params(self, rng: np.random.Generator) -> dict:
        std, d = self.init_std, self.d_model
        params = {
            "tok_emb": rng.normal(0.0, std, (self.vocab + 1, d)),
            "pos_emb": rng.normal(0.0, std, (len(self.slot_sizes), d)),
        }
        for i in range(self.n_layers):
            params.update(nn.init_transformer(rng, f"l{i}_", d, self.n_heads, self.d_head, self.d_ff, std))
        params.update({
            "lnf_g": np.ones(d), "lnf_b": np.zeros(d),
            "w_out": rng.normal(0.0, std, (d, self.vocab)), "b_out": np.zeros(self.vocab),
        })
        return params

    def _input_ids(self, tokens) -> np.ndarray:
        prev = [1 + int(self.offsets[p]) + int(t) for p, t in enumerate(tokens)]
        return np.array([[0] + prev[:len(self.slot_sizes) - 1]])[:, :max(len(tokens), 1)]

    def _masked_logp(self, P: dict, ids: np.ndarray) -> Tensor:
        length = ids.shape[1]
        x = T.embedding(P["tok_emb"], ids) + P["pos_emb"][:length]
        for i in range(self.n_layers):
            x = nn.transformer_block(x, P, f"l{i}_", self.n_heads)
        x = T.layer_norm(x, P["lnf_g"], P["lnf_b"])
        logits = x @ P["w_out"] + P["b_out"]
        return T.log_softmax(logits + self.slot_bias[:length])

    def log_prob(self, P: dict, tokens) -> Tensor:
        tokens = tuple(int(t) for t in tokens)
        lp = self._masked_logp(P, self._input_ids(tokens))
        cols = self.offsets + np.array(tokens)
        return lp[0, np.arange(len(tokens)), cols].sum()

    def entropy(self, P: dict, tokens_batch=None) -> Tensor:
        """Sum of per-slot conditional entropies along the given sequences, averaged."""
        if not tokens_batch:
            raise ContractError("attention entropy needs sampled sequences")
        out = None
        for tokens in tokens_batch:
            lp = self._masked_logp(P, self._input_ids(tuple(tokens)))
            h = -(T.exp(lp) * lp).sum()
            out = h if out is None else out + h
        return out * (1.0 / len(tokens_batch))

    def sample(self, params: dict, rng: np.random.Generator):
        P = {k: Tensor(v) for k, v in params.items()}
        tokens, total = [], 0.0
        for p in range(len(self.slot_sizes)):
            ids = self._input_ids(tokens + [0])
            lp = self._masked_logp(P, ids).data[0, p]
            off, v = int(self.offsets[p]), self.slot_sizes[p]
            row = lp[off:off + v]
            t = _sample_index(np.exp(row), rng)
            tokens.append(t)
            total += float(row[t])
        return tuple(tokens), total


def make_policy(backend: str, slot_sizes, **kw):
    if backend == "factorized":
        return FactorizedPolicy(slot_sizes)
    if backend == "attention":
        return AttentionPolicy(slot_sizes, **kw)
    raise ContractError(f"unknown controller backend {backend!r}")


# -- functional surface ---------------------------------------------------------------

def _as_tensors(params: dict, requires_grad: bool = False) -> dict:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def sample(policy, params: dict, rng: np.random.Generator):
    """Draw a token tuple slot by slot; returns ``(tokens, logp)``."""
    return policy.sample(params, rng)


def logp(policy, params: dict, tokens) -> float:
    tokens = tuple(tokens)
    if len(tokens) != len(policy.slot_sizes):
        raise ContractError(f"expected {len(policy.slot_sizes)} tokens, got {len(tokens)}")
    for t, v in zip(tokens, policy.slot_sizes):
        if not 0 <= int(t) < v:
            raise ContractError(f"token {t} outside vocabulary of size {v}")
    return policy.log_prob(_as_tensors(params), tokens).item()


def entropy(policy, params: dict, tokens_batch=None) -> float:
    return policy.entropy(_as_tensors(params), tokens_batch).item()


def surrogate(policy, P: dict, tokens_batch, coeffs, entropy_coef: float = 0.0) -> Tensor:
    """Scalar whose gradient is the ascent direction of the update.

    ``coeffs[i]`` multiplies ``log P(tokens_i)``; for the importance-weighted
    estimator it is ``(perf_i - b) * ratio_i / M``.
    """
    out = None
    for tokens, c in zip(tokens_batch, coeffs):
        term = policy.log_prob(P, tokens) * float(c)
        out = term if out is None else out + term
    if entropy_coef:
        out = out + policy.entropy(P, tokens_batch) * entropy_coef
    return out


def surrogate_gradient(policy, params: dict, tokens_batch, coeffs, entropy_coef: float = 0.0) -> dict:
    P = _as_tensors(params, requires_grad=True)
    with Tape() as tape:
        obj = surrogate(policy, P, tokens_batch, coeffs, entropy_coef)
    grads = tape.gradient(obj)
    return {k: grads.of(t) for k, t in P.items()}


def importance_weights(policy, params: dict, tokens_batch, logp_old, clip: float | None = None):
    """``exp(logp(theta) - logp_old)`` per record, plus how many were clipped."""
    weights, clipped = [], 0
    for tokens, old in zip(tokens_batch, logp_old):
        d = logp(policy, params, tokens) - float(old)
        if d > MAX_LOG_RATIO:
            d, clipped = MAX_LOG_RATIO, clipped + 1
        w = float(np.exp(d))
        if clip is not None:
            lo, hi = 1.0 / clip, clip
            if w < lo or w > hi:
                w, clipped = min(max(w, lo), hi), clipped + 1
        weights.append(w)
    return weights, clipped


# -- stateful controller ---------------------------------------------------------------

@dataclass
class ControllerConfig:
    backend: str = "attention"
    lr: float = 3.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    entropy_coef: float = 1e-5
    baseline_momentum: float = 0.95
    batch_size: int = 16
    ratio_clip: float | None = None
    init_std: float = 0.02
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    d_head: int = 32
    d_ff: int = 32

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.ratio_clip is not None and self.ratio_clip <= 1.0:
            raise ContractError("ratio_clip must exceed 1")


@dataclass
class BaselineState:
    value: float | None = None
    momentum: float = 0.95

    def update(self, perf: float) -> float:
        if self.value is None:
            self.value = float(perf)
        else:
            self.value = self.momentum * self.value + (1.0 - self.momentum) * float(perf)
        return self.value


@dataclass(frozen=True)
class SampleRecord:
    genome: PatternGenome
    tokens: tuple
    logp_old: float
    theta_version: int

    def __post_init__(self):
        if not np.isfinite(self.logp_old):
            raise ContractError("logp_old must be finite")


@dataclass
class UpdateInfo:
    version: int
    baseline: float
    mean_perf: float
    weights: list = field(default_factory=list)
    clipped: int = 0
    staleness: list = field(default_factory=list)


class Controller:
    def __init__(self, space: SearchSpace, config: ControllerConfig | None = None, seed: int = 0):
        self.space = space
        self.config = config or ControllerConfig()
        c = self.config
        if c.backend == "attention":
            self.policy = AttentionPolicy(space.slot_sizes, c.n_layers, c.d_model, c.n_heads,
                                          c.d_head, c.d_ff, c.init_std)
        else:
            self.policy = make_policy(c.backend, space.slot_sizes)
        self.params = self.policy.init_params(np.random.default_rng(seed))
        self.adam = AdamState(lr=c.lr, beta1=c.beta1, beta2=c.beta2)
        self.baseline = BaselineState(momentum=c.baseline_momentum)
        self.version = 0
        self.clipped_total = 0

    def snapshot(self) -> tuple[int, dict]:
        """Immutable view of the current parameters, tagged with their version."""
        frozen = {}
        for k, v in self.params.items():
            a = v.copy()
            a.setflags(write=False)
            frozen[k] = a
        return self.version, frozen

    def sample(self, rng: np.random.Generator) -> SampleRecord:
        tokens, _ = self.policy.sample(self.params, rng)
        return SampleRecord(self.space.to_genome(tokens), tokens,
                            logp(self.policy, self.params, tokens), self.version)

    def logp(self, genome: PatternGenome) -> float:
        return logp(self.policy, self.params, self.space.to_tokens(genome))

    def entropy(self, tokens_batch=None) -> float:
        return entropy(self.policy, self.params, tokens_batch)

    def update(self, records, perfs) -> UpdateInfo:
        return reinforce_update(self, records, perfs)

    # -- persistence --------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "format_version": CHECKPOINT_VERSION,
            "space": {"kind": self.space.kind, "labels": list(self.space.labels),
                      "slots": [[n, list(v)] for n, v in self.space.slots]},
            "config": asdict(self.config),
            "theta_version": self.version,
            "clipped_total": self.clipped_total,
            "baseline": {"value": self.baseline.value, "momentum": self.baseline.momentum},
            "adam": self.adam.to_dict(),
            "params": {k: _arr_to_json(v) for k, v in sorted(self.params.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Controller":
        if d.get("format") != CHECKPOINT_FORMAT or d.get("format_version") != CHECKPOINT_VERSION:
            raise ContractError("not a controller checkpoint of a supported version")
        sp = d["space"]
        space = SearchSpace(sp["kind"], tuple((n, tuple(v)) for n, v in sp["slots"]), tuple(sp["labels"]))
        ctl = cls(space, ControllerConfig(**d["config"]), seed=0)
        ctl.params = {k: _arr_from_json(v) for k, v in d["params"].items()}
        ctl.adam = AdamState.from_dict(d["adam"])
        ctl.baseline = BaselineState(d["baseline"]["value"], d["baseline"]["momentum"])
        ctl.version = d["theta_version"]
        ctl.clipped_total = d["clipped_total"]
        return ctl

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Controller":
        return cls.from_dict(json.loads(Path(path).read_text()))


def reinforce_update(ctl: Controller, records, perfs) -> UpdateInfo:
    """One Adam step on the importance-weighted REINFORCE objective.

    gradient = 1/M sum_i (perf_i - b) * P(r_i; theta) / P(r_i; theta_i) * grad log P(r_i; theta)
               + entropy_coef * grad H(theta)

    ``b`` is the baseline before this batch (initialised to the batch mean
    on the first call); afterwards it absorbs the batch mean with the
    configured momentum.
    """
    records = list(records)
    perfs = [float(p) for p in perfs]
    m = ctl.config.batch_size
    if len(records) != m or len(perfs) != m:
        raise ContractError(f"reinforce_update: batch of {len(records)} records / {len(perfs)} perfs, expected {m}")
    if not all(np.isfinite(perfs)):
        raise ContractError("reinforce_update: perf values must be finite")
    mean_perf = float(np.mean(perfs))
    if ctl.baseline.value is None:
        ctl.baseline.value = mean_perf
    b = ctl.baseline.value
    tokens = [r.tokens for r in records]
    weights, clipped = importance_weights(ctl.policy, ctl.params, tokens,
                                          [r.logp_old for r in records], ctl.config.ratio_clip)
    coeffs = [(p - b) * w / m for p, w in zip(perfs, weights)]
    grad = surrogate_gradient(ctl.policy, ctl.params, tokens, coeffs, ctl.config.entropy_coef)
    ctl.params = adam_step(ctl.adam, ctl.params, {k: -g for k, g in grad.items()})
    staleness = [ctl.version - r.theta_version for r in records]
    ctl.version += 1
    ctl.clipped_total += clipped
    ctl.baseline.update(mean_perf)
    return UpdateInfo(ctl.version, ctl.baseline.value, mean_perf, weights, clipped, staleness)
