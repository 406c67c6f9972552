"""Two-layer attention language model on a synthetic character corpus.

The corpus comes from a tiny seeded grammar (subject, verb, object, optional
clauses) rendered as lowercase characters, so it has real structure for the
model to learn and needs no download. perf is ``80 / valid_ppl``.

Dropout patterns are applied at the eight sites of every block. One spec
governs a site in both layers and across heads, but each layer, head and step
draws its own mask. Masks are only sampled in training forward passes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import nn
from .. import tensor as T
from ..errors import ContractError, EvaluationFailed, NumericalFault
from ..evaluation import EvalResult
from ..masks import MaskStats, drop, sample_transformer_mask
from ..optim import AdamState, adam_step
from ..space import PatternGenome, decode_genome, transformer_space
from ..tensor import Tape, Tensor
from ..vocab import TRANSFORMER_SITES

SUBJECTS = ["the cat", "a dog", "my friend", "the old man", "her sister", "some birds", "the robot"]
VERBS = ["sees", "likes", "finds", "carries", "paints", "follows", "builds"]
OBJECTS = ["a red ball", "the river", "two apples", "an old map", "the green door", "a small boat"]
CLAUSES = ["today", "at night", "in the park", "with care", "again", "near the house"]
ALPHABET = " .abcdefghijklmnopqrstuvwxyz"


@dataclass(frozen=True)
class ToyLMConfig:
    train_steps: int = 120
    batch_size: int = 8
    seq_len: int = 70
    d_model: int = 64
    n_heads: int = 2
    d_ff: int = 128
    n_layers: int = 2
    lr: float = 3e-3
    rate: float = 0.2
    ppl_scale: float = 80.0
    train_chars: int = 40_000
    valid_chars: int = 8_000
    valid_batches: int = 8
    data_seed: int = 0

    def __post_init__(self):
        if not 0 < self.train_steps <= 2000:
            raise ContractError("toy-lm train_steps must lie in [1, 2000]")
        if self.d_model % self.n_heads:
            raise ContractError("d_model must be divisible by n_heads")
        if not 0.0 <= self.rate <= 1.0:
            raise ContractError("rate must lie in [0, 1]")


def make_corpus(n_chars: int, rng: np.random.Generator) -> str:
    out, size = [], 0
    while size < n_chars:
        s = f"{SUBJECTS[rng.integers(len(SUBJECTS))]} {VERBS[rng.integers(len(VERBS))]} " \
            f"{OBJECTS[rng.integers(len(OBJECTS))]}"
        if rng.random() < 0.5:
            s += " " + CLAUSES[rng.integers(len(CLAUSES))]
        s += ". "
        out.append(s)
        size += len(s)
    return "".join(out)[:n_chars]


def encode(text: str) -> np.ndarray:
    lookup = {c: i for i, c in enumerate(ALPHABET)}
    return np.array([lookup[c] for c in text], dtype=np.int64)


def make_data(cfg: ToyLMConfig):
    rng = np.random.default_rng([cfg.data_seed, 31])
    train = encode(make_corpus(cfg.train_chars, rng))
    valid = encode(make_corpus(cfg.valid_chars, rng))
    return train, valid


def init_params(cfg: ToyLMConfig, rng: np.random.Generator) -> dict:
    d, v = cfg.d_model, len(ALPHABET)
    params = {"emb": rng.normal(0.0, 0.02, (v, d)), "pos": rng.normal(0.0, 0.02, (cfg.seq_len, d))}
    for i in range(cfg.n_layers):
        params.update(nn.init_transformer(rng, f"l{i}_", d, cfg.n_heads, d // cfg.n_heads, cfg.d_ff, 0.02))
    params.update({"lnf_g": np.ones(d), "lnf_b": np.zeros(d),
                   "w_out": rng.normal(0.0, 0.02, (d, v)), "b_out": np.zeros(v)})
    return params


class SiteMasker:
    """Hook for :mod:`dropsearch.nn` that applies the per-site patterns."""

    def __init__(self, specs: dict | None, rate: float, rng: np.random.Generator,
                 stats: MaskStats, override=None):
        self.specs = specs or {}
        self.rate, self.rng, self.stats, self.override = rate, rng, stats, override
        self.training = True
        self.calls = {"train": 0, "eval": 0}

    def __call__(self, site: str, h: Tensor) -> Tensor:
        spec = self.specs.get(site)
        if spec is None or spec.is_identity:
            return h
        self.calls["train" if self.training else "eval"] += 1
        if not self.training:
            return h
        # (B, H, L, X) head tensors are masked per head as (B*H, L, X)
        shape3 = (int(np.prod(h.shape[:-2])), h.shape[-2], h.shape[-1])
        if self.override is not None and site in self.override:
            m = self.override[site](shape3, self.rate, self.rng)
        else:
            m = sample_transformer_mask(spec, shape3, self.rate, self.rng)
        return drop(h, m.reshape(h.shape), self.stats)


def forward(P: dict, ids: np.ndarray, cfg: ToyLMConfig, hook) -> Tensor:
    x = T.embedding(P["emb"], ids) + P["pos"][:ids.shape[1]]
    for i in range(cfg.n_layers):
        x = nn.transformer_block(x, P, f"l{i}_", cfg.n_heads, True, hook)
    x = T.layer_norm(x, P["lnf_g"], P["lnf_b"])
    return x @ P["w_out"] + P["b_out"]


def _windows(data: np.ndarray, starts: np.ndarray, length: int):
    idx = starts[:, None] + np.arange(length + 1)
    chunk = data[idx]
    return chunk[:, :-1], chunk[:, 1:]


class ToyLMEvaluator:
    """Callable ``(genome, seed) -> EvalResult``; perf is ``ppl_scale / valid_ppl``."""

    def __init__(self, config: ToyLMConfig | None = None, sites=TRANSFORMER_SITES, mask_override=None):
        """``mask_override`` maps a site to ``fn(shape, rate, rng) -> mask``."""
        self.config = config or ToyLMConfig()
        self.space = transformer_space(sites)
        self.mask_override = mask_override
        self._train, self._valid = make_data(self.config)

    def __call__(self, genome: PatternGenome | None, seed: int = 0) -> EvalResult:
        return self.train_and_eval(None if genome is None else decode_genome(genome), seed)

    def baseline(self, seed: int = 0) -> EvalResult:
        return self.train_and_eval(None, seed)

    def valid_batches(self):
        cfg = self.config
        n = cfg.valid_batches * cfg.batch_size
        stride = (len(self._valid) - cfg.seq_len - 1) // n
        starts = np.arange(n) * stride
        for b in range(cfg.valid_batches):
            yield _windows(self._valid, starts[b * cfg.batch_size:(b + 1) * cfg.batch_size], cfg.seq_len)

    def train_and_eval(self, specs: dict | None, seed: int) -> EvalResult:
        cfg = self.config
        params = init_params(cfg, np.random.default_rng([seed, 0]))
        order_rng = np.random.default_rng([seed, 1])
        stats = MaskStats()
        hook = SiteMasker(specs, cfg.rate, np.random.default_rng([seed, 2]), stats, self.mask_override)
        adam = AdamState(lr=cfg.lr)
        losses = []
        hi = len(self._train) - cfg.seq_len - 1
        try:
            for _ in range(cfg.train_steps):
                x, y = _windows(self._train, order_rng.integers(0, hi, cfg.batch_size), cfg.seq_len)
                P = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
                with Tape() as tape:
                    logits = forward(P, x, cfg, hook)
                    loss = T.cross_entropy(T.reshape(logits, (-1, logits.shape[-1])), y.ravel())
                grads = tape.gradient(loss)
                params = adam_step(adam, params, {k: grads.of(t) for k, t in P.items()})
                losses.append(loss.item())
            hook.training = False
            P = {k: Tensor(v) for k, v in params.items()}
            nll = []
            for x, y in self.valid_batches():
                logits = forward(P, x, cfg, hook)
                nll.append(T.cross_entropy(T.reshape(logits, (-1, logits.shape[-1])), y.ravel()).item())
        except NumericalFault as exc:
            raise EvaluationFailed(f"toy-lm diverged: {exc}") from exc
        mean_nll = float(np.mean(nll))
        if not mean_nll < math.log(np.finfo(float).max):
            raise EvaluationFailed(f"toy-lm validation perplexity overflows (nll {mean_nll:.4g})")
        ppl = math.exp(mean_nll)
        return EvalResult(cfg.ppl_scale / ppl, {
            "valid_ppl": ppl,
            "train_loss": losses[::max(1, len(losses) // 20)],
            "final_train_loss": losses[-1],
            "degenerate_masks": stats.degenerate,
            "masks_applied": stats.applied,
            "mask_calls_train": hook.calls["train"],
            "mask_calls_eval": hook.calls["eval"],
        })
