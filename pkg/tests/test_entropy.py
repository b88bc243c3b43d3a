"""Entropy model: quantizer, likelihood oracles, prior monotonicity,
table construction, and coded length against the information content."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from voxpcc import entropy, nn
from voxpcc.errors import DataError, UsageError

# ---------------------------------------------------------------------------
# quantizer

def test_quantize_test_mode_rounds_half_away():
    t = nn.Tensor(np.array([[-1.5, -0.5, -0.4, 0.0, 0.4, 0.5, 1.5,
                             2.5]]).reshape(1, 8, 1, 1))
    out = entropy.quantize(t, "test").data.reshape(-1)
    assert out.tolist() == [-2, -1, 0, 0, 0, 1, 2, 3]


def test_quantize_train_mode_adds_bounded_noise():
    rng = np.random.default_rng(0)
    t = nn.Tensor(np.zeros((1, 1000, 1, 1)))
    out = entropy.quantize(t, "train", rng).data
    assert np.all(np.abs(out) <= 0.5)
    assert out.std() == pytest.approx(math.sqrt(1 / 12), rel=0.1)


def test_quantize_train_mode_needs_rng():
    with pytest.raises(UsageError):
        entropy.quantize(nn.Tensor(np.zeros((1, 1, 1, 1))), "train")
    with pytest.raises(UsageError):
        entropy.quantize(nn.Tensor(np.zeros((1, 1, 1, 1))), "eval")


def test_quantize_passes_gradient_through():
    rng = np.random.default_rng(1)
    x = nn.Tensor(rng.standard_normal((2, 3, 1, 1)))
    for mode, r in (("train", rng), ("test", None)):
        y = entropy.quantize(x, mode, r)
        x.grad = None
        nn.backward(nn.focal_loss(np.zeros((1, 1, 1, 1)),
                                  nn.sigmoid(_mean(y))))
        assert x.grad is not None and np.all(np.isfinite(x.grad))


def _mean(t):
    n = t.data.size

    def bwd(g):
        nn.accumulate(t, np.full(t.data.shape, g / n))

    return nn.node(np.array(t.data.mean()).reshape(1, 1, 1, 1), (t,),
                   lambda g: bwd(float(g.reshape(-1)[0])))


# ---------------------------------------------------------------------------
# gaussian likelihoods

def test_gaussian_likelihood_known_values():
    # unit scale: P(bin 0) = 2 Phi(0.5) - 1, P(bin 1) = Phi(1.5) - Phi(0.5)
    y = nn.Tensor(np.array([0.0, 1.0]).reshape(1, 2, 1, 1))
    sigma = nn.Tensor(np.ones((1, 2, 1, 1)))
    p = entropy.likelihood_gaussian(y, sigma).data.reshape(-1)
    assert p[0] == pytest.approx(2 * norm.cdf(0.5) - 1, rel=1e-12)
    assert p[1] == pytest.approx(norm.cdf(1.5) - norm.cdf(0.5), rel=1e-12)
    assert p[0] == pytest.approx(0.3829249, abs=1e-7)
    assert p[1] == pytest.approx(0.2417303, abs=1e-7)


def test_gaussian_likelihood_floor():
    y = nn.Tensor(np.full((1, 1, 1, 1), 500.0))
    sigma = nn.Tensor(np.full((1, 1, 1, 1), 1e-6))
    p = entropy.likelihood_gaussian(y, sigma)
    assert p.data.reshape(-1)[0] == pytest.approx(1e-9)
    rate = entropy.rate_bits(p)
    nn.backward(rate)
    assert np.all(np.isfinite(y.grad))


def test_rate_bits_is_negative_log2_sum():
    rng = np.random.default_rng(2)
    p = nn.Tensor(rng.uniform(0.01, 1.0, (2, 3, 1, 1)))
    bits = entropy.rate_bits(p).item()
    assert bits == pytest.approx(float(-np.log2(p.data).sum()), rel=1e-12)


def test_fd_gaussian_likelihood():
    rng = np.random.default_rng(3)
    y = nn.Tensor(rng.standard_normal((2, 3, 1, 1)))
    sigma = nn.Tensor(rng.uniform(0.4, 2.0, (2, 3, 1, 1)))
    err = nn.finite_difference_check(
        lambda y, s: entropy.rate_bits(entropy.likelihood_gaussian(y, s)),
        [y, sigma], rng=rng)
    assert err < 1e-6


# ---------------------------------------------------------------------------
# factorized prior

def test_prior_cdf_is_monotone_and_bounded():
    prior = entropy.FactorizedPrior(3, rng=np.random.default_rng(4))
    v = np.linspace(-30, 30, 601)
    for c in range(3):
        f, _ = prior.cdf(v[None, :], channel=c)
        f = f[0]
        assert np.all(np.diff(f) >= 0)
        assert np.all((f >= 0) & (f <= 1))
        assert f[0] < 1e-4 and f[-1] > 1 - 1e-4


def test_prior_likelihood_sums_to_one():
    prior = entropy.FactorizedPrior(2, rng=np.random.default_rng(5))
    grid = np.arange(-100, 101, dtype=np.float64)
    z = nn.Tensor(np.tile(grid, (2, 1)).reshape(2, grid.size, 1, 1))
    p = entropy.likelihood_factorized(z, prior).data.reshape(2, -1)
    assert p.sum(axis=1) == pytest.approx([1.0, 1.0], abs=1e-4)


def test_prior_parameter_count():
    prior = entropy.FactorizedPrior(5, rng=np.random.default_rng(6))
    assert sum(p.data.size for p in prior.parameters()) == 5 * 28
    assert all(p.group == "prior" for p in prior.parameters())


def test_fd_factorized_likelihood():
    rng = np.random.default_rng(7)
    prior = entropy.FactorizedPrior(2, rng=rng)
    z = nn.Tensor(rng.standard_normal((2, 4, 1, 1)) * 2)
    err = nn.finite_difference_check(
        lambda z, *ps: entropy.rate_bits(
            entropy.likelihood_factorized(z, prior)),
        [z] + prior.parameters(), rng=rng)
    assert err < 1e-4


# ---------------------------------------------------------------------------
# tables

def test_quantize_pmf_preserves_total():
    rng = np.random.default_rng(8)
    p = rng.dirichlet(np.ones(40))
    f = entropy._quantize_pmf(p)
    assert int(f.sum()) == entropy.TOTAL_FREQ
    assert f.min() >= 1


def test_gaussian_table_alphabet_covers_tail_mass():
    for sigma in (1e-6, 0.01, 1.0, 64.0):
        table = entropy.gaussian_cdf_table(sigma)
        lo = table.offset
        hi = table.offset + len(table.freqs) - 1
        assert lo <= 0 <= hi
        # the alphabet must reach past the two-sided tail threshold
        assert norm.cdf((lo - 0.5) / max(sigma, 1e-9)) <= \
            entropy.TAIL_MASS * 1.01
        assert len(table.freqs) <= (1 << 14) + 1


def test_sigma_bins_pick_nearest_in_log():
    centers = entropy.default_sigma_centers()
    assert len(centers) == 64
    assert centers[0] == pytest.approx(1e-6) and \
        centers[-1] == pytest.approx(64.0)
    idx = entropy.sigma_bin_indices(centers)
    assert idx.tolist() == list(range(64))
    # midpoint in log space belongs to the nearer neighbor on each side
    mid = math.sqrt(centers[10] * centers[11])
    assert entropy.sigma_bin_indices(np.array([mid * 0.999]))[0] == 10
    assert entropy.sigma_bin_indices(np.array([mid * 1.001]))[0] == 11
    # clipping at the ladder ends
    assert entropy.sigma_bin_indices(np.array([1e-9]))[0] == 0
    assert entropy.sigma_bin_indices(np.array([1e9]))[0] == 63


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 999), count=st.integers(1, 400))
def test_gaussian_coding_round_trip_property(seed, count):
    rng = np.random.default_rng(seed)
    sigma = float(rng.uniform(0.05, 8.0))
    table = entropy.gaussian_cdf_table(sigma)
    symbols = np.rint(rng.normal(0, sigma, count)).astype(np.int64)
    payload = entropy.range_encode(symbols, table)
    got = entropy.range_decode(payload, count, table)
    lo = table.offset
    hi = table.offset + len(table.freqs) - 1
    assert np.array_equal(got, np.clip(symbols, lo, hi))


def test_factorized_coding_round_trip():
    rng = np.random.default_rng(9)
    prior = entropy.FactorizedPrior(4, rng=rng)
    tables = entropy.build_cdf_tables(prior)
    assert len(tables.factorized) == 4
    assert len(tables.gaussian) == 64
    per = [tables.factorized[c] for c in range(4) for _ in range(50)]
    symbols = np.concatenate([
        np.rint(rng.normal(0, 2, 50)).astype(np.int64) for _ in range(4)])
    payload = entropy.range_encode(symbols, per)
    got = entropy.range_decode(payload, len(symbols), per)
    clipped = np.concatenate([
        np.clip(symbols[c * 50:(c + 1) * 50], t.offset,
                t.offset + len(t.freqs) - 1)
        for c, t in enumerate(tables.factorized)])
    assert np.array_equal(got, clipped)


def test_coded_length_tracks_information_content():
    rng = np.random.default_rng(10)
    for sigma in (0.3, 1.0, 5.0):
        table = entropy.gaussian_cdf_table(sigma)
        symbols = np.rint(rng.normal(0, sigma, 3000)).astype(np.int64)
        payload = entropy.range_encode(symbols, table)
        est = entropy.table_bits(symbols, table) / 8
        assert len(payload) <= est * 1.01 + 32
        assert len(payload) >= est * 0.99 - 32


def test_mismatched_table_count_rejected():
    table = entropy.gaussian_cdf_table(1.0)
    with pytest.raises(UsageError):
        entropy.range_encode(np.zeros(3, dtype=np.int64), [table] * 2)
    with pytest.raises(DataError):
        entropy.range_decode(b"", 5, table)


def test_empty_stream_round_trip():
    table = entropy.gaussian_cdf_table(1.0)
    assert entropy.range_encode(np.zeros(0, dtype=np.int64), table) == b""
    got = entropy.range_decode(b"", 0, table)
    assert got.size == 0
