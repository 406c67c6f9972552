import math

import numpy as np
import pytest

from dropsearch.errors import ContractError, EvaluationFailed
from dropsearch.masks import sample_conv_mask
from dropsearch.rewards import (
    SyntheticReward,
    ToyConvConfig,
    ToyConvEvaluator,
    ToyLMConfig,
    ToyLMEvaluator,
    make_evaluator,
    random_search,
)
from dropsearch.rewards.toy_lm import make_corpus
from dropsearch.space import encode_special, parse_genome, transformer_space, uniform_random_genome

SMALL_CONV = ToyConvConfig(train_steps=15, batch_size=16, n_train=64, n_valid=64)
SMALL_LM = ToyLMConfig(train_steps=6, batch_size=2, train_chars=2000, valid_chars=1000, valid_batches=2)


def test_synthetic_target_and_one_off():
    space = transformer_space(["query"])
    target = space.to_genome((3, 1, 0, 1))
    r = SyntheticReward(space, target, lam=1.0)
    assert r(target).perf == 1.0
    assert r(space.to_genome((3, 2, 0, 1))).perf == math.exp(-1.0)
    assert r(space.to_genome((3, 2, 0, 1)), 5).perf == r(space.to_genome((3, 2, 0, 1)), 9).perf


def test_synthetic_unique_maximum_by_enumeration():
    space = transformer_space(["value"])
    r = SyntheticReward.hidden(space, seed=4, lam=0.7)
    perfs = [(r(g).perf, g) for g in space.enumerate()]
    best = [g for p, g in perfs if p == 1.0]
    assert best == [r.target]
    assert all(p < 1.0 for p, g in perfs if g != r.target)


def test_make_evaluator_rejects_unknown():
    with pytest.raises(ContractError):
        make_evaluator("imagenet")
    with pytest.raises(ContractError):
        make_evaluator("synthetic", {"lamda": 2.0})
    with pytest.raises(ContractError):
        make_evaluator("toy-lm", {"train_steps": 5000})


def test_random_search_curve():
    ev, space = make_evaluator("synthetic", seed=1)
    res = random_search(space, ev, 512, seed=3)
    assert len(res.best_curve) == 512 == len(res.records)
    assert all(b >= a for a, b in zip(res.best_curve, res.best_curve[1:]))
    assert res.best_perf == max(r["perf"] for r in res.records)
    assert random_search(space, ev, 512, seed=3).records == res.records


def test_random_first_sample_matches_space_average():
    space = transformer_space(["query"])
    r = SyntheticReward.hidden(space, seed=0)
    exact = np.mean([r(g).perf for g in space.enumerate()])
    firsts = np.array([random_search(space, r, 1, seed=s).records[0]["perf"] for s in range(3000)])
    sigma = firsts.std() / math.sqrt(len(firsts))
    assert abs(firsts.mean() - exact) < 4 * sigma


def test_random_search_resamples_failures():
    space = transformer_space(["query"])
    calls = []

    def flaky(genome, seed):
        calls.append(seed)
        if len(calls) % 3 == 0:
            raise EvaluationFailed("flake")
        return 0.5

    res = random_search(space, flaky, 10, seed=0)
    assert res.successes == 10 and res.failures == len(calls) - 10
    assert sorted(r["job_id"] for r in res.records) == list(range(len(calls)))


# -- toy ConvNet ---------------------------------------------------------------

@pytest.fixture(scope="module")
def conv_eval():
    return ToyConvEvaluator(SMALL_CONV)


def test_toy_conv_identity_matches_baseline(conv_eval):
    base = conv_eval.baseline(seed=7)
    ident = conv_eval(conv_eval.space.to_genome([0] * 16), seed=7)
    assert ident.perf == base.perf
    assert ident.metrics["train_loss"] == base.metrics["train_loss"]
    assert ident.metrics["masks_applied"] == 0


def test_toy_conv_deterministic_and_masks_train_only(conv_eval):
    g = parse_genome("conv;conv1:size=1,stride=2,repeat=8,share_c=false,residual=false,rotate=15,"
                     "shear_x=0.1,shear_y=0.0;conv2:size=2,stride=1,repeat=4,share_c=true,residual=true,"
                     "rotate=0,shear_x=0.0,shear_y=0.2")
    a = conv_eval(g, seed=1)
    b = conv_eval(g, seed=1)
    assert a.perf == b.perf and a.metrics == b.metrics
    steps = SMALL_CONV.train_steps
    # group 1 once, group 2 on the main branch and (residual) on the skip branch
    assert a.metrics["mask_calls_train"] == a.metrics["masks_applied"] == 3 * steps
    assert a.metrics["mask_calls_eval"] == 3
    assert 0.0 <= a.perf <= 1.0


def test_toy_conv_learns():
    ev = ToyConvEvaluator(ToyConvConfig(train_steps=60))
    assert ev.baseline(0).perf > 0.8


def test_toy_conv_all_zero_mask_is_degenerate_identity():
    base = ToyConvEvaluator(SMALL_CONV).baseline(seed=2)
    zeros = ToyConvEvaluator(SMALL_CONV, mask_override=lambda g, shape, rate, rng: np.zeros(shape))
    g = zeros.space.to_genome([4, 0, 31, 1, 0, 0, 0, 0] * 2)
    res = zeros(g, seed=2)
    assert res.metrics["degenerate_masks"] == res.metrics["masks_applied"] == 2 * SMALL_CONV.train_steps
    assert res.perf == base.perf


def test_toy_conv_largest_pattern_covers_part_of_grid():
    g = ToyConvEvaluator(SMALL_CONV).space.to_genome([4, 0, 31, 1, 0, 0, 0, 0] * 2)
    from dropsearch.space import decode_genome
    spec = decode_genome(g)[0]
    m = sample_conv_mask(spec, (500, 18, 18, 1), 1.0, np.random.default_rng(0))
    frac = 1.0 - m.mean()
    assert 0.0 < frac < 1.0


# -- toy LM --------------------------------------------------------------------

@pytest.fixture(scope="module")
def lm_eval():
    return ToyLMEvaluator(SMALL_LM)


def test_corpus_is_deterministic():
    a = make_corpus(500, np.random.default_rng(1))
    b = make_corpus(500, np.random.default_rng(1))
    assert a == b and len(a) == 500 and set(a) <= set(" .abcdefghijklmnopqrstuvwxyz")


def test_toy_lm_identity_matches_baseline(lm_eval):
    base = lm_eval.baseline(seed=3)
    ident = lm_eval(encode_special("none-at-site"), seed=3)
    assert ident.perf == base.perf
    assert ident.metrics["train_loss"] == base.metrics["train_loss"]
    assert ident.metrics["mask_calls_train"] == 0


def test_toy_lm_perf_is_scaled_inverse_ppl(lm_eval):
    res = lm_eval.baseline(seed=0)
    assert res.perf == 80.0 / res.metrics["valid_ppl"]


def test_toy_lm_variational_equals_hand_coded(lm_eval):
    g = encode_special("variational-dropout", only="ffn_inner")

    def hand_coded(shape, rate, rng):
        n, t, c = shape
        keep = rng.random((n, 1, c)) >= rate
        return np.broadcast_to(keep, shape).astype(float)

    ref = ToyLMEvaluator(SMALL_LM, mask_override={"ffn_inner": hand_coded})
    a = lm_eval(g, seed=4)
    b = ref(g, seed=4)
    assert a.perf == b.perf and a.metrics["train_loss"] == b.metrics["train_loss"]
    assert a.perf != lm_eval.baseline(seed=4).perf


def test_toy_lm_masks_train_only_and_deterministic(lm_eval):
    g = uniform_random_genome(lm_eval.space, np.random.default_rng(8))
    active = sum(1 for s in g.groups if s[0] != 0)
    a = lm_eval(g, seed=5)
    assert a.metrics == lm_eval(g, seed=5).metrics
    per_pass = SMALL_LM.n_layers * active
    assert a.metrics["mask_calls_train"] == a.metrics["masks_applied"] == per_pass * SMALL_LM.train_steps
    assert a.metrics["mask_calls_eval"] == per_pass * SMALL_LM.valid_batches


def test_toy_lm_divergence_is_a_failed_evaluation():
    ev = ToyLMEvaluator(ToyLMConfig(train_steps=20, batch_size=2, train_chars=2000, valid_chars=1000,
                                    valid_batches=1, lr=1e6))
    with pytest.raises(EvaluationFailed):
        ev.baseline(0)
