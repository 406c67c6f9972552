import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dropsearch.errors import ContractError, ShapeError
from dropsearch.masks import (
    ConvPatternSpec,
    MaskStats,
    RateSchedule,
    TransformerPatternSpec,
    apply_transform,
    drop,
    rate_at_layer,
    read_pgm,
    sample_conv_mask,
    sample_transformer_mask,
    transform_pattern,
    write_pgm,
)
from dropsearch.tensor import Tape, Tensor


# -- drop ---------------------------------------------------------------------

def test_drop_all_ones_is_identity():
    h = np.random.default_rng(0).normal(size=(2, 3, 4))
    out = drop(h, np.ones_like(h))
    np.testing.assert_array_equal(out, h)


def test_drop_direct_evaluation():
    np.testing.assert_array_equal(drop(np.array([1.0, 2, 3, 4]), np.array([1.0, 0, 1, 0])), [2, 0, 6, 0])


def test_drop_on_tensor_propagates_gradient():
    h = Tensor([1.0, 2.0, 3.0, 4.0], requires_grad=True)
    with Tape() as tape:
        loss = drop(h, np.array([1.0, 0, 1, 0])).sum()
    np.testing.assert_array_equal(tape.gradient(loss)[h], [2.0, 0.0, 2.0, 0.0])


def test_drop_degenerate_mask_is_identity_and_counted():
    stats = MaskStats()
    h = np.arange(4.0)
    assert drop(h, np.zeros(4), stats) is h
    assert stats.degenerate == 1 and stats.applied == 1


def test_drop_shape_mismatch():
    with pytest.raises(ShapeError):
        drop(np.zeros((2, 3)), np.ones((3, 2)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_scaled_mask_mean_is_one(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(1, 6, size=3))
    m = (rng.random(shape) < 0.6).astype(float)
    m.flat[0] = 1.0
    h = rng.normal(size=shape)
    ones = drop(np.ones(shape), m)
    assert abs(ones.sum() - m.size) < 1e-9
    out = drop(h, m)
    assert np.all(out[m == 0] == 0.0)


# -- rate schedule ------------------------------------------------------------------

def test_rate_schedule():
    sched = RateSchedule(0.2, 5)
    assert rate_at_layer(sched, 0) == 0.0
    assert rate_at_layer(sched, 4) == 0.2
    assert rate_at_layer(RateSchedule(0.6, 3), 1) == pytest.approx(0.3)
    rates = [sched.rate(i) for i in range(5)]
    assert rates == sorted(rates)
    with pytest.raises(ContractError):
        rate_at_layer(sched, 5)


# -- ConvNet masks --------------------------------------------------------------------

def test_spec_vocabulary_enforced():
    with pytest.raises(ContractError):
        ConvPatternSpec(size_k=5)
    with pytest.raises(ContractError):
        ConvPatternSpec(stride=3)
    with pytest.raises(ContractError):
        ConvPatternSpec(share_c=1)
    with pytest.raises(ContractError):
        TransformerPatternSpec(size=15)


def test_size_formula():
    assert ConvPatternSpec(size_k=2).side(20) == 8


def test_conv_identity_cases():
    rng = np.random.default_rng(0)
    assert (sample_conv_mask(ConvPatternSpec(size_k=0, repeat=32), (2, 10, 10, 3), 1.0, rng) == 1).all()
    assert (sample_conv_mask(ConvPatternSpec(size_k=3, repeat=32), (2, 10, 10, 3), 0.0, rng) == 1).all()


def test_conv_single_rect_fixed_offset():
    spec = ConvPatternSpec(size_k=1, stride=4, repeat=1)
    m = sample_conv_mask(spec, (1, 10, 10, 1), 1.0, np.random.default_rng(0), offset=(0, 0))
    assert (m == 0).sum() == 4
    assert (m[0, :2, :2, 0] == 0).all()


def _oracle_cover_fraction(height, width, spec):
    """Average over all offsets of the fraction of cells inside laid-out rectangles."""
    sh, sw = spec.side(height), spec.side(width)
    total = 0
    for oy in range(height):
        for ox in range(width):
            covered = set()
            placed = 0
            y = oy
            while y < height and placed < spec.repeat:
                x = ox
                while x < width and placed < spec.repeat:
                    for a in range(y, min(y + sh, height)):
                        for b in range(x, min(x + sw, width)):
                            covered.add((a, b))
                    placed += 1
                    x += sw + spec.stride
                y += sh + spec.stride
            total += len(covered)
    return total / (height * width * height * width)


@pytest.mark.parametrize("spec,rate", [
    (ConvPatternSpec(size_k=1, stride=2, repeat=4), 0.5),
    (ConvPatternSpec(size_k=2, stride=1, repeat=32), 0.3),
    (ConvPatternSpec(size_k=4, stride=4, repeat=2), 0.8),
])
def test_conv_zero_fraction_matches_tiling_oracle(spec, rate):
    height = width = 12
    p = rate * _oracle_cover_fraction(height, width, spec)
    draws = 10_000
    m = sample_conv_mask(spec, (draws, height, width, 1), rate, np.random.default_rng(7))
    frac = (m == 0).mean(axis=(1, 2, 3))
    bound = 3 * np.sqrt(p * (1 - p) / draws)
    assert abs(frac.mean() - p) <= bound


def test_share_c_slices_identical():
    spec = ConvPatternSpec(size_k=2, stride=2, repeat=6, share_c=True, rotate_max=45, shear_x_max=0.3)
    m = sample_conv_mask(spec, (4, 16, 16, 8), 0.5, np.random.default_rng(1))
    for c in range(1, 8):
        np.testing.assert_array_equal(m[..., c], m[..., 0])


def test_independent_channels_rarely_coincide():
    spec = ConvPatternSpec(size_k=1, stride=2, repeat=8, share_c=False)
    rng = np.random.default_rng(2)
    rates = []
    for channels in (1, 2, 4):
        m = sample_conv_mask(spec, (1000, 10, 10, channels), 0.5, rng)
        same = (m == m[..., :1]).all(axis=(1, 2, 3))
        rates.append(same.mean())
    assert rates[0] == 1.0
    assert rates[0] > rates[1] > rates[2]


def test_conv_mask_binary_and_shaped():
    spec = ConvPatternSpec(size_k=3, stride=1, repeat=9, rotate_max=75, shear_x_max=0.55, shear_y_max=0.55)
    m = sample_conv_mask(spec, (3, 17, 13, 5), 0.7, np.random.default_rng(3))
    assert m.shape == (3, 17, 13, 5)
    assert set(np.unique(m)) <= {0.0, 1.0}


# -- geometry -------------------------------------------------------------------------

def test_identity_transform():
    coords = np.array([[0, 0], [3, 4], [5, 2]])
    out = transform_pattern(coords, 0, 0.0, 0.0, np.random.default_rng(0), (8, 8))
    np.testing.assert_array_equal(out, np.unique(coords, axis=0))


def test_rotation_symmetric_pattern():
    # plus shape centred on a 7x7 grid is invariant under quarter turns
    coords = [(3, c) for c in range(1, 6)] + [(r, 3) for r in range(1, 6) if r != 3]
    out = apply_transform(coords, 90.0, 0.0, 0.0, (7, 7))
    assert {tuple(c) for c in out} == set(coords)
    # 2x2 block centred on an even grid
    block = [(3, 3), (3, 4), (4, 3), (4, 4)]
    assert {tuple(c) for c in apply_transform(block, 90.0, 0, 0, (8, 8))} == set(block)


@pytest.mark.parametrize("angle", [15.0, 33.3, 90.0, -60.0, 180.0])
def test_centre_is_fixed_point(angle):
    assert apply_transform([(4, 4)], angle, 0.0, 0.0, (9, 9)).tolist() == [[4, 4]]


def test_rounding_half_away_from_zero():
    # 2x2 grid centre (0.5, 0.5); shear_x 0.5 moves (1, 1) to x = 1 + 0.5*0.5 = 1.25 -> 1
    # and (0, 1) to x = 1 - 0.25 = 0.75 -> 1; (1, 0) to 0.25 -> 0
    out = apply_transform([(0, 1), (1, 0), (1, 1)], 0.0, 0.5, 0.0, (2, 2))
    assert {tuple(c) for c in out} == {(0, 1), (1, 0), (1, 1)}
    # 3x3 grid, shear 0.5 sends (0, 1) to x = 1 - 0.5 = 0.5 -> 1 and (2, 1) to 1.5 -> 2
    out = apply_transform([(0, 1), (2, 1)], 0.0, 0.5, 0.0, (3, 3))
    assert {tuple(c) for c in out} == {(0, 1), (2, 2)}


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_transform_stays_in_grid(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(2, 20, size=2)
    k = rng.integers(1, 30)
    coords = np.stack([rng.integers(0, h, k), rng.integers(0, w, k)], axis=1)
    out = transform_pattern(coords, 75, 0.55, 0.55, rng, (h, w))
    assert len(out) <= len(np.unique(coords, axis=0))
    if len(out):
        assert out[:, 0].min() >= 0 and out[:, 0].max() < h
        assert out[:, 1].min() >= 0 and out[:, 1].max() < w


# -- Transformer masks -----------------------------------------------------------------

def test_transformer_size_zero_is_identity():
    spec = TransformerPatternSpec(size=0, stride=5, share_t=True, share_c=True)
    assert (sample_transformer_mask(spec, (3, 70, 8), 1.0, np.random.default_rng(0)) == 1).all()


def test_variational_case_constant_along_time():
    spec = TransformerPatternSpec(size=70, stride=0, share_t=True, share_c=False)
    rng = np.random.default_rng(1)
    for _ in range(20):
        m = sample_transformer_mask(spec, (4, 70, 16), 0.5, rng)
        assert (m == m[:, :1, :]).all()


def test_variational_case_matches_hand_coded():
    spec = TransformerPatternSpec(size=70, stride=0, share_t=True, share_c=False)
    m = sample_transformer_mask(spec, (4, 70, 16), 0.3, np.random.default_rng(5))
    ref = (np.random.default_rng(5).random((4, 1, 16)) >= 0.3).astype(float)
    np.testing.assert_array_equal(m, np.broadcast_to(ref, m.shape))


def test_word_dropout_case_constant_along_channels():
    spec = TransformerPatternSpec(size=10, stride=5, share_t=False, share_c=True)
    m = sample_transformer_mask(spec, (4, 70, 16), 0.5, np.random.default_rng(2))
    assert (m == m[:, :, :1]).all()
    assert (m == 0).any()


def _runs(bits):
    out, cur, count = [], bits[0], 0
    for b in bits:
        if b == cur:
            count += 1
        else:
            out.append((cur, count))
            cur, count = b, 1
    out.append((cur, count))
    return out


@pytest.mark.parametrize("size,stride", [(10, 5), (20, 20), (30, 10), (10, 15)])
def test_transformer_run_structure(size, stride):
    spec = TransformerPatternSpec(size=size, stride=stride, share_t=False, share_c=False)
    m = sample_transformer_mask(spec, (20, 70, 3), 1.0, np.random.default_rng(size + stride))
    for n in range(20):
        for c in range(3):
            runs = _runs(m[n, :, c].tolist())
            for value, length in runs[1:-1]:
                assert length == (size if value == 0.0 else stride)
            for value, length in (runs[0], runs[-1]):
                assert length <= (size if value == 0.0 else stride)


def test_share_t_reuses_draw_within_run():
    spec = TransformerPatternSpec(size=10, stride=10, share_t=True, share_c=False)
    m = sample_transformer_mask(spec, (50, 70, 6), 0.5, np.random.default_rng(4))
    # within an affected run every token carries the same channel vector
    rng_phase = np.random.default_rng(4).integers(0, 20, 50)
    for n in range(50):
        run = (np.arange(70) + rng_phase[n]) // 20
        affected = (np.arange(70) + rng_phase[n]) % 20 < 10
        for r in np.unique(run[affected]):
            rows = m[n, (run == r) & affected]
            assert (rows == rows[0]).all()
        assert (m[n, ~affected] == 1).all()


def test_transformer_rate_fraction():
    spec = TransformerPatternSpec(size=20, stride=0, share_t=False, share_c=False)
    m = sample_transformer_mask(spec, (200, 70, 10), 0.25, np.random.default_rng(3))
    p = 0.25
    assert abs((m == 0).mean() - p) < 3 * np.sqrt(p * (1 - p) / m.size)


# -- rendering -------------------------------------------------------------------------

def test_pgm_round_trip(tmp_path):
    plane = np.array([[1, 0, 1], [0, 1, 1]])
    write_pgm(tmp_path / "m.pgm", plane)
    text = (tmp_path / "m.pgm").read_text()
    assert text.startswith("P2\n3 2\n255\n")
    np.testing.assert_array_equal(read_pgm(tmp_path / "m.pgm"), plane * 255)
