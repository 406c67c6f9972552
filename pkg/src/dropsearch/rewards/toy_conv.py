"""Small two-layer ConvNet on a procedurally generated bar-orientation task.

Images are 16x16 with a single bar, roughly horizontal (class 0) or roughly
vertical (class 1), plus Gaussian noise. They are zero-padded by 2 so that
the two valid 3x3 convolutions leave spatial extents of 18 and 16, which keeps
every size token of the ConvNet space meaningful.

Network, for an input x of shape (N, 20, 20, 1)::

    a = relu(mask_1(norm(conv3x3(x))))                 # (N, 18, 18, 8)
    main = mask_2(norm(conv3x3(a)))                    # (N, 16, 16, 16)
    skip = norm(conv1x1(crop(a)))                      # (N, 16, 16, 16)
    y = linear(mean_hw(relu(main + skip)))

``norm`` normalises each channel over space, then applies a per-channel
affine. When the second group has ``residual`` set, an independent draw of
its pattern is applied to the skip branch as well. The first group has no
skip path, so its ``residual`` flag has no effect.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..errors import ContractError, EvaluationFailed, NumericalFault
from ..evaluation import EvalResult
from ..masks import ConvPatternSpec, MaskStats, RateSchedule, drop, sample_conv_mask
from ..optim import AdamState, adam_step
from ..space import PatternGenome, conv_space, decode_genome
from ..tensor import Tape, Tensor

IMAGE = 16
PAD = 2
LAYER_SHAPES = ((18, 18), (16, 16))


@dataclass(frozen=True)
class ToyConvConfig:
    train_steps: int = 150
    batch_size: int = 32
    lr: float = 1e-2
    final_rate: float = 0.2
    n_train: int = 512
    n_valid: int = 512
    noise: float = 0.6
    data_seed: int = 0

    def __post_init__(self):
        if not 0 < self.train_steps <= 2000:
            raise ContractError("toy-conv train_steps must lie in [1, 2000]")
        if self.batch_size < 1 or self.n_train < self.batch_size or self.n_valid < 1:
            raise ContractError("toy-conv dataset sizes are inconsistent")


def toy_conv_space(**restrict):
    return conv_space(2, labels=("conv1", "conv2"), **restrict)


def make_bars(n: int, rng: np.random.Generator, noise: float = 0.6):
    """Return images of shape (n, 16, 16) and labels in {0, 1}."""
    labels = rng.integers(0, 2, n)
    jitter = rng.uniform(-25.0, 25.0, n)
    angles = np.deg2rad(np.where(labels == 0, 0.0, 90.0) + jitter)
    centres = rng.uniform(4.0, IMAGE - 5.0, (n, 2))
    half_len = rng.uniform(3.5, 6.0, n)
    yy, xx = np.mgrid[0:IMAGE, 0:IMAGE].astype(float)
    images = np.empty((n, IMAGE, IMAGE))
    for i in range(n):
        dy, dx = yy - centres[i, 0], xx - centres[i, 1]
        along = dx * np.cos(angles[i]) + dy * np.sin(angles[i])
        across = -dx * np.sin(angles[i]) + dy * np.cos(angles[i])
        bar = (np.abs(across) <= 0.8) & (np.abs(along) <= half_len[i])
        images[i] = bar.astype(float)
    images += rng.normal(0.0, noise, images.shape)
    return images, labels


def make_dataset(cfg: ToyConvConfig):
    rng = np.random.default_rng([cfg.data_seed, 21])
    xs, ys = make_bars(cfg.n_train + cfg.n_valid, rng, cfg.noise)
    xs = np.pad(xs, ((0, 0), (PAD, PAD), (PAD, PAD)))[..., None]
    return (xs[:cfg.n_train], ys[:cfg.n_train]), (xs[cfg.n_train:], ys[cfg.n_train:])


def init_params(rng: np.random.Generator) -> dict:
    def he(shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
    return {
        "conv1": he((3, 3, 1, 8), 9), "g1": np.ones(8), "b1": np.zeros(8),
        "conv2": he((3, 3, 8, 16), 72), "g2": np.ones(16), "b2": np.zeros(16),
        "skip": he((1, 1, 8, 16), 8), "gs": np.ones(16), "bs": np.zeros(16),
        "w_out": rng.normal(0.0, 0.1, (16, 2)), "b_out": np.zeros(2),
    }


def channel_norm(x: Tensor, gamma, beta) -> Tensor:
    n, h, w, c = x.shape
    flat = T.reshape(T.transpose(x, (0, 3, 1, 2)), (n, c, h * w))
    normed = T.transpose(T.reshape(T.layer_norm(flat), (n, c, h, w)), (0, 2, 3, 1))
    return normed * gamma + beta


class _Masker:
    """Draws and applies the group masks; counts calls per mode."""

    def __init__(self, specs, schedule: RateSchedule, rng, stats: MaskStats, override=None):
        self.specs, self.schedule, self.rng, self.stats = specs, schedule, rng, stats
        self.override = override
        self.calls = {"train": 0, "eval": 0}

    def __call__(self, group: int, h: Tensor, training: bool) -> Tensor:
        spec = self.specs[group] if self.specs else None
        if spec is None or spec.is_identity:
            return h
        self.calls["train" if training else "eval"] += 1
        if not training:
            return h
        rate = self.schedule.rate(group + 1)
        if self.override is not None:
            m = self.override(group, h.shape, rate, self.rng)
        else:
            m = sample_conv_mask(spec, h.shape, rate, self.rng)
        return drop(h, m, self.stats)


def forward(P: dict, x, masker: _Masker, training: bool) -> Tensor:
    h = T.conv2d(x if isinstance(x, Tensor) else Tensor(x), P["conv1"])
    a = T.relu(masker(0, channel_norm(h, P["g1"], P["b1"]), training))
    main = channel_norm(T.conv2d(a, P["conv2"]), P["g2"], P["b2"])
    skip = channel_norm(T.conv2d(a[:, 1:-1, 1:-1, :], P["skip"]), P["gs"], P["bs"])
    main = masker(1, main, training)
    spec2 = masker.specs[1] if masker.specs else None
    if spec2 is not None and spec2.residual:
        skip = masker(1, skip, training)
    pooled = T.mean(T.relu(main + skip), axis=(1, 2))
    return pooled @ P["w_out"] + P["b_out"]


class ToyConvEvaluator:
    """Callable ``(genome, seed) -> EvalResult``; perf is held-out accuracy."""

    def __init__(self, config: ToyConvConfig | None = None, mask_override=None):
        """``mask_override(group, shape, rate, rng) -> mask`` replaces pattern sampling."""
        self.config = config or ToyConvConfig()
        self.mask_override = mask_override
        self.space = toy_conv_space()
        self._data = make_dataset(self.config)

    def decode(self, genome: PatternGenome | None):
        if genome is None:
            return None
        return decode_genome(genome, LAYER_SHAPES)

    def __call__(self, genome: PatternGenome | None, seed: int = 0) -> EvalResult:
        return self.train_and_eval(self.decode(genome), seed)

    def baseline(self, seed: int = 0) -> EvalResult:
        """Same training run with no mask plumbing at all."""
        return self.train_and_eval(None, seed)

    def train_and_eval(self, specs: list[ConvPatternSpec] | None, seed: int) -> EvalResult:
        cfg = self.config
        (xtr, ytr), (xva, yva) = self._data
        params = init_params(np.random.default_rng([seed, 0]))
        order_rng = np.random.default_rng([seed, 1])
        stats = MaskStats()
        masker = _Masker(specs, RateSchedule(cfg.final_rate, 3), np.random.default_rng([seed, 2]), stats,
                          self.mask_override)
        adam = AdamState(lr=cfg.lr)
        losses = []
        try:
            for _ in range(cfg.train_steps):
                idx = order_rng.choice(cfg.n_train, cfg.batch_size, replace=False)
                P = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
                with Tape() as tape:
                    loss = T.cross_entropy(forward(P, xtr[idx], masker, True), ytr[idx])
                grads = tape.gradient(loss)
                params = adam_step(adam, params, {k: grads.of(t) for k, t in P.items()})
                losses.append(loss.item())
            P = {k: Tensor(v) for k, v in params.items()}
            logits = forward(P, xva, masker, False).data
        except NumericalFault as exc:
            raise EvaluationFailed(f"toy-conv diverged: {exc}") from exc
        acc = float((logits.argmax(axis=1) == yva).mean())
        return EvalResult(acc, {
            "val_accuracy": acc,
            "train_loss": losses[::max(1, len(losses) // 20)],
            "final_train_loss": losses[-1],
            "degenerate_masks": stats.degenerate,
            "masks_applied": stats.applied,
            "mask_calls_train": masker.calls["train"],
            "mask_calls_eval": masker.calls["eval"],
        })
