import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ipsfuse.shuffle import (
    ShuffleConfig,
    draw_kernel_size,
    low_pass_filter,
    make_training_sample,
    recombine,
    reconstruct_with_mask,
    sample_mask,
    synthesize,
)


def brute_mean_filter(img, k):
    """Windowed average with numpy-style reflect borders (edge pixel not repeated)."""
    h, w = img.shape
    r = k // 2

    def ref(i, n):
        while i < 0 or i >= n:
            i = -i if i < 0 else 2 * (n - 1) - i
        return i

    out = np.zeros_like(img)
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    acc += img[ref(y + dy, h), ref(x + dx, w)]
            out[y, x] = acc / (k * k)
    return out


# ------------------------------------------------------------ low-pass filter

@pytest.mark.parametrize("kind", ["mean", "gaussian", "median"])
@pytest.mark.parametrize("k", [3, 7, 31])
def test_constant_image_is_fixed(kind, k):
    img = np.full((20, 17, 3), 0.37)
    np.testing.assert_allclose(low_pass_filter(img, kind, k), 0.37, rtol=0, atol=1e-12)


def test_center_impulse_mean():
    # the 9 / 9 example scaled into [0, 1]: a lone 0.9 averages to 0.1
    img = np.zeros((3, 3))
    img[1, 1] = 0.9
    out = low_pass_filter(img, "mean", 3)
    assert out[1, 1, 0] == pytest.approx(0.1, abs=1e-15)


@pytest.mark.parametrize("k", [3, 5])
def test_mean_filter_ramp_matches_brute_force(k):
    ramp = np.arange(25, dtype=np.float64).reshape(5, 5) / 24
    np.testing.assert_allclose(low_pass_filter(ramp, "mean", k)[:, :, 0], brute_mean_filter(ramp, k), atol=1e-14)


def test_mean_filter_random_color_matches_brute_force(rng):
    img = rng.random((9, 11, 3))
    out = low_pass_filter(img, "mean", 5)
    for c in range(3):
        np.testing.assert_allclose(out[:, :, c], brute_mean_filter(img[:, :, c], 5), atol=1e-14)


def test_gaussian_uses_k_over_6(rng):
    img = rng.random((15, 15))
    k = 9
    r = k // 2
    g = np.exp(-0.5 * (np.arange(-r, r + 1) / (k / 6)) ** 2)
    g /= g.sum()
    kernel = np.outer(g, g)
    pad = np.pad(img, r, mode="reflect")
    y, x = 7, 7
    expected = (pad[y : y + k, x : x + k] * kernel).sum()
    assert low_pass_filter(img, "gaussian", k)[y, x, 0] == pytest.approx(expected, abs=1e-14)


def test_median_filter_window(rng):
    img = rng.random((7, 7))
    pad = np.pad(img, 1, mode="reflect")
    expected = np.array([[np.median(pad[y : y + 3, x : x + 3]) for x in range(7)] for y in range(7)])
    np.testing.assert_array_equal(low_pass_filter(img, "median", 3)[:, :, 0], expected)


@pytest.mark.parametrize("kind", ["mean", "gaussian", "median"])
def test_filter_output_in_range(kind, rng):
    out = low_pass_filter(rng.random((16, 16, 3)), kind, 7)
    assert out.shape == (16, 16, 3) and out.min() >= 0 and out.max() <= 1


def test_filter_rejects_even_kernel():
    with pytest.raises(ValueError, match="odd"):
        low_pass_filter(np.zeros((8, 8)), "mean", 4)


def test_filter_rejects_kernel_too_large_for_image():
    with pytest.raises(ValueError, match="too large"):
        low_pass_filter(np.zeros((4, 6)), "mean", 9)


def test_filter_rejects_kernel_out_of_range():
    with pytest.raises(ValueError):
        low_pass_filter(np.zeros((40, 40)), "mean", 33)


# ------------------------------------------------------------------- masks

def test_mask_degenerate_probabilities(rng):
    assert sample_mask((5, 5, 3), 0.0, rng).min() == 1
    assert sample_mask((5, 5, 3), 1.0, rng).max() == 0


@pytest.mark.parametrize("p", [0.1, 0.5, 0.9])
def test_mask_zero_fraction(p):
    m = sample_mask((1000, 1000), p, np.random.default_rng(3))
    assert abs((m == 0).mean() - p) < 0.002


def test_fresh_mask_each_call(rng):
    assert not np.array_equal(sample_mask((32, 32), 0.5, rng), sample_mask((32, 32), 0.5, rng))


def test_mask_rejects_bad_p(rng):
    with pytest.raises(ValueError):
        sample_mask((2, 2), 1.5, rng)


# --------------------------------------------------------------- recombine

def test_recombine_identity_and_full_swap(rng):
    f, d = rng.random((4, 4, 1)), rng.random((4, 4, 1))
    a, b = recombine(f, d, np.ones((4, 4, 1), np.uint8))
    assert np.array_equal(a, f) and np.array_equal(b, d)
    a, b = recombine(f, d, np.zeros((4, 4, 1), np.uint8))
    assert np.array_equal(a, d) and np.array_equal(b, f)


def test_recombine_hand_example():
    f = np.array([[1.0, 2.0], [3.0, 4.0]])
    d = np.zeros((2, 2))
    m = np.array([[1, 0], [0, 1]])
    a, b = recombine(f, d, m)
    np.testing.assert_array_equal(a, [[1, 0], [0, 4]])
    np.testing.assert_array_equal(b, [[0, 2], [3, 0]])


def test_recombine_dimension_mismatch():
    with pytest.raises(ValueError):
        recombine(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        reconstruct_with_mask(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((3, 2)))


def test_reconstruct_identity_mask(rng):
    a, b = rng.random((3, 3)), rng.random((3, 3))
    assert np.array_equal(reconstruct_with_mask(a, b, np.ones((3, 3))), a)


@pytest.mark.parametrize("seed", range(100))
def test_round_trip_16x16x3(seed):
    r = np.random.default_rng(seed)
    f, d = r.random((16, 16, 3)), r.random((16, 16, 3))
    m = sample_mask(f.shape, r.random(), r)
    assert np.array_equal(reconstruct_with_mask(*recombine(f, d, m), m), f)


images = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6), st.sampled_from([1, 3])),
                elements=st.floats(0, 1))


@settings(max_examples=60, deadline=None)
@given(data=st.data(), f=images, p=st.sampled_from([0.0, 0.5, 1.0, 0.3]))
def test_algebraic_properties(data, f, p):
    d = data.draw(arrays(np.float64, f.shape, elements=st.floats(0, 1)))
    m = sample_mask(f.shape, p, np.random.default_rng(data.draw(st.integers(0, 2**32 - 1))))
    a, b = recombine(f, d, m)
    assert np.array_equal(a + b, f + d)  # conservation
    a2, b2 = recombine(a, b, m)
    assert np.array_equal(a2, f) and np.array_equal(b2, d)  # involution
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    assert np.array_equal(lo, np.minimum(f, d)) and np.array_equal(hi, np.maximum(f, d))  # pixel groups
    assert np.array_equal(reconstruct_with_mask(a, b, m), f)


@settings(max_examples=30, deadline=None)
@given(c=st.floats(0, 1), seed=st.integers(0, 10_000))
def test_constant_image_fixed_point(c, seed):
    f = np.full((8, 8, 1), c)
    s = synthesize(f, ShuffleConfig(kernel_range=(3, 9)), np.random.default_rng(seed))
    assert np.allclose(s.shuffled_f, c, atol=1e-12) and np.allclose(s.shuffled_d, c, atol=1e-12)


# ------------------------------------------------------------ full samples

def test_training_sample_p0_no_swap(rng):
    src = rng.random((40, 40, 1))
    cfg = ShuffleConfig(mask_zero_probability=0.0, swap=False)
    s = synthesize(src, cfg, np.random.default_rng(5))
    f, d, target = make_training_sample(src, cfg, np.random.default_rng(5))
    assert np.array_equal(f, src) and np.array_equal(target, src)
    assert np.array_equal(d, low_pass_filter(src, "mean", s.kernel))


def test_training_sample_deterministic(rng):
    src = rng.random((40, 40, 3))
    a = make_training_sample(src, ShuffleConfig(), np.random.default_rng(9))
    b = make_training_sample(src, ShuffleConfig(), np.random.default_rng(9))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


@pytest.mark.parametrize("seed", range(10))
def test_training_sample_pixel_multiset(seed):
    r = np.random.default_rng(seed)
    src = r.random((40, 40, 3))
    s = synthesize(src, ShuffleConfig(filter_kind=["mean", "gaussian", "median"][seed % 3]), r)
    pair_in = np.sort(np.stack([src, s.filtered]), axis=0)
    pair_out = np.sort(np.stack([s.shuffled_f, s.shuffled_d]), axis=0)
    assert np.array_equal(pair_in, pair_out)
    assert np.array_equal(s.target, src)


def test_swap_happens_about_half_the_time():
    src = np.random.default_rng(0).random((40, 40, 1))
    swaps = [synthesize(src, ShuffleConfig(kernel_range=(3, 3)), np.random.default_rng(i)).swapped for i in range(400)]
    assert 0.4 < np.mean(swaps) < 0.6


def test_kernel_draw_is_odd_and_covers_range():
    r = np.random.default_rng(0)
    ks = {draw_kernel_size((3, 31), r) for _ in range(2000)}
    assert ks == set(range(3, 32, 2))


@pytest.mark.parametrize("bad", [
    dict(mask_zero_probability=-0.1),
    dict(filter_kind="box"),
    dict(kernel_range=(4, 9)),
    dict(kernel_range=(3, 33)),
    dict(kernel_range=(9, 5)),
])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        ShuffleConfig(**bad).validate()
