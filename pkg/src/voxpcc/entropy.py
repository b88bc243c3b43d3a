"""Entropy modeling: quantization, likelihoods, coding tables, coding.

The latent volume is coded conditionally on a per-element Gaussian scale
predicted by the hyper decoder; the side-information volume is coded under
a learned per-channel factorized prior whose CDF is a small monotone
network. Both models are made discrete through 16-bit frequency tables
shared bit-exactly by encoder and decoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf, ndtri

from . import rangecoder
from .errors import DataError, InternalError, UsageError
from .nn import Parameter, Tensor, accumulate, node

LIKELIHOOD_FLOOR = 1e-9
TOTAL_FREQ = 1 << 16
TAIL_MASS = 2.0 ** -17
SIGMA_BINS = 64
SIGMA_MIN = 1e-6
SIGMA_MAX = 64.0

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_LN2 = math.log(2.0)


def _phi(t: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(t / _SQRT2))


def _gauss_pdf(t: np.ndarray) -> np.ndarray:
    return _INV_SQRT_2PI * np.exp(-0.5 * t * t)


# ---------------------------------------------------------------------------
# quantization

def quantize(values, mode: str, rng: np.random.Generator | None = None):
    """Discretize latents: additive uniform noise in "train" mode, round
    half away from zero in "test" mode.

    Tensors get straight-through gradients (identity) in both modes;
    plain arrays are returned as plain arrays (test mode only).
    """
    if mode == "train":
        if rng is None:
            raise UsageError("train-mode quantization needs an rng")
        if not isinstance(values, Tensor):
            raise UsageError("train-mode quantization operates on tensors")
        noise = rng.uniform(-0.5, 0.5, size=values.data.shape)

        def bwd(g):
            accumulate(values, g)

        return node(values.data + noise, (values,), bwd)
    if mode == "test":
        if isinstance(values, Tensor):
            def bwd(g):
                accumulate(values, g)

            return node(_round_half_away(values.data), (values,), bwd)
        return _round_half_away(np.asarray(values, dtype=np.float64))
    raise UsageError(f"quantize mode must be train or test, got {mode!r}")


def _round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


# ---------------------------------------------------------------------------
# Gaussian conditional

@dataclass
class GaussianConditional:
    """Coding parameters for the scale-conditioned latent model."""

    sigma_centers: np.ndarray
    tables: list


def likelihood_gaussian(y_hat: Tensor, sigma: Tensor) -> Tensor:
    """Probability of each quantized latent under a zero-mean Gaussian
    with the per-element scale: Phi((v+.5)/s) - Phi((v-.5)/s), floored
    at LIKELIHOOD_FLOOR with zero gradient where the floor binds."""
    if y_hat.data.shape != sigma.data.shape:
        raise UsageError(f"latents {y_hat.data.shape} and scales "
                         f"{sigma.data.shape} differ in shape")
    s = sigma.data
    if np.any(s <= 0):
        raise UsageError("scales must be positive")
    hi = (y_hat.data + 0.5) / s
    lo = (y_hat.data - 0.5) / s
    raw = _phi(hi) - _phi(lo)
    live = raw > LIKELIHOOD_FLOOR
    p = np.maximum(raw, LIKELIHOOD_FLOOR)

    def bwd(g):
        gm = np.where(live, g, 0.0)
        pdf_hi = _gauss_pdf(hi)
        pdf_lo = _gauss_pdf(lo)
        accumulate(y_hat, gm * (pdf_hi - pdf_lo) / s)
        accumulate(sigma, gm * (lo * pdf_lo - hi * pdf_hi) / s)

    return node(p, (y_hat, sigma), bwd)


# ---------------------------------------------------------------------------
# factorized prior

class FactorizedPrior:
    """Learned per-channel CDF for the side information.

    Each channel's CDF is a three-layer monotone map 1 -> 3 -> 3 -> 1:
    softplus-positive weights, tanh-gated residual nonlinearities on the
    first two layers, sigmoid output. 28 parameters per channel, all in
    the "prior" optimizer group.
    """

    LAYER_WIDTHS = (1, 3, 3, 1)

    def __init__(self, channels: int, rng: np.random.Generator | None = None):
        if channels <= 0:
            raise UsageError("prior needs at least one channel")
        rng = rng or np.random.default_rng(0)
        self.channels = channels
        c = channels
        w_unit = math.log(math.expm1(1.0))        # softplus -> 1
        w_third = math.log(math.expm1(1.0 / 3.0))  # softplus -> 1/3
        mk = lambda a, name: Parameter(a, name, group="prior")
        self.w0 = mk(np.full((c, 3, 1), w_unit), "prior.w0")
        self.b0 = mk(rng.uniform(-0.5, 0.5, (c, 3)), "prior.b0")
        self.a0 = mk(np.zeros((c, 3)), "prior.a0")
        self.w1 = mk(np.full((c, 3, 3), w_third), "prior.w1")
        self.b1 = mk(np.zeros((c, 3)), "prior.b1")
        self.a1 = mk(np.zeros((c, 3)), "prior.a1")
        self.w2 = mk(np.full((c, 1, 3), w_third), "prior.w2")
        self.b2 = mk(np.zeros((c, 1)), "prior.b2")

    def parameters(self) -> list[Parameter]:
        return [self.w0, self.b0, self.a0, self.w1, self.b1, self.a1,
                self.w2, self.b2]

    def _arrays(self, channel):
        sl = slice(None) if channel is None else slice(channel, channel + 1)
        return tuple(p.data[sl] for p in self.parameters())

    def cdf(self, v: np.ndarray, channel: int | None = None):
        """CDF values and the cache needed for the backward pass.

        v has shape (channels, n), or (1, n) with an explicit channel.
        """
        w0, b0, a0, w1, b1, a1, w2, b2 = self._arrays(channel)
        s0, s1, s2 = _softplus(w0), _softplus(w1), _softplus(w2)
        u0 = v[:, None, :]
        z1 = np.einsum("cij,cjn->cin", s0, u0) + b0[:, :, None]
        t1 = np.tanh(z1)
        g0 = np.tanh(a0)[:, :, None]
        h1 = z1 + g0 * t1
        z2 = np.einsum("cij,cjn->cin", s1, h1) + b1[:, :, None]
        t2 = np.tanh(z2)
        g1 = np.tanh(a1)[:, :, None]
        h2 = z2 + g1 * t2
        z3 = np.einsum("cij,cjn->cin", s2, h2) + b2[:, :, None]
        f = 1.0 / (1.0 + np.exp(-z3))
        cache = (u0, t1, g0, h1, t2, g1, h2, f, s0, s1, s2, channel)
        return f[:, 0, :], cache

    def cdf_backward(self, cache, df: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients for a CDF evaluation; returns
        the gradient with respect to the input values."""
        u0, t1, g0, h1, t2, g1, h2, f, s0, s1, s2, channel = cache
        w0, b0, a0, w1, b1, a1, w2, b2 = self._arrays(channel)
        dz3 = df[:, None, :] * f * (1.0 - f)
        gw2 = np.einsum("cin,cjn->cij", dz3, h2) * _sigmoid_np(w2)
        gb2 = dz3.sum(axis=2)
        dh2 = np.einsum("cij,cin->cjn", s2, dz3)
        dz2 = dh2 * (1.0 + g1 * (1.0 - t2 * t2))
        ga1 = (dh2 * t2).sum(axis=2) * (1.0 - np.tanh(a1) ** 2)
        gw1 = np.einsum("cin,cjn->cij", dz2, h1) * _sigmoid_np(w1)
        gb1 = dz2.sum(axis=2)
        dh1 = np.einsum("cij,cin->cjn", s1, dz2)
        dz1 = dh1 * (1.0 + g0 * (1.0 - t1 * t1))
        ga0 = (dh1 * t1).sum(axis=2) * (1.0 - np.tanh(a0) ** 2)
        gw0 = np.einsum("cin,cjn->cij", dz1, u0) * _sigmoid_np(w0)
        gb0 = dz1.sum(axis=2)
        dv = np.einsum("cij,cin->cjn", s0, dz1)[:, 0, :]
        grads = (gw0, gb0, ga0, gw1, gb1, ga1, gw2, gb2)
        for p, g in zip(self.parameters(), grads):
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            sl = slice(None) if channel is None else slice(channel,
                                                           channel + 1)
            p.grad[sl] += g
        return dv


def _softplus(v: np.ndarray) -> np.ndarray:
    return np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def likelihood_factorized(z_hat: Tensor, prior: FactorizedPrior) -> Tensor:
    """Probability of each quantized side-information element under its
    channel's learned CDF: F(v+.5) - F(v-.5), floored."""
    shape = z_hat.data.shape
    if shape[0] != prior.channels:
        raise UsageError(f"side information has {shape[0]} channels, "
                         f"prior expects {prior.channels}")
    v = z_hat.data.reshape(prior.channels, -1)
    f_hi, cache_hi = prior.cdf(v + 0.5)
    f_lo, cache_lo = prior.cdf(v - 0.5)
    raw = f_hi - f_lo
    live = raw > LIKELIHOOD_FLOOR
    p = np.maximum(raw, LIKELIHOOD_FLOOR).reshape(shape)

    def bwd(g):
        gm = np.where(live, g.reshape(v.shape), 0.0)
        dv_hi = prior.cdf_backward(cache_hi, gm)
        dv_lo = prior.cdf_backward(cache_lo, -gm)
        accumulate(z_hat, (dv_hi + dv_lo).reshape(shape))

    return node(p, (z_hat,) + tuple(prior.parameters()), bwd)


def rate_bits(likelihoods) -> Tensor:
    """Total information content in bits: -sum log2 p over one likelihood
    tensor or a sequence of them."""
    if isinstance(likelihoods, Tensor):
        likelihoods = [likelihoods]
    if not likelihoods:
        raise UsageError("rate_bits needs at least one likelihood tensor")
    total = None
    for p in likelihoods:
        if np.any(p.data <= 0):
            raise InternalError("likelihoods must be positive")
        term = _neg_log2_sum(p)
        total = term if total is None else total + term
    return total


def _neg_log2_sum(p: Tensor) -> Tensor:
    val = -np.log2(p.data).sum()

    def bwd(g):
        accumulate(p, -float(g) / (p.data * _LN2))

    return node(val, (p,), bwd)


# ---------------------------------------------------------------------------
# discrete coding tables

@dataclass
class CdfTable:
    """Quantized frequency table over the integer alphabet
    [offset, offset + len(freqs) - 1]; frequencies sum to TOTAL_FREQ."""

    offset: int
    freqs: np.ndarray
    cum: np.ndarray = field(init=False)

    def __post_init__(self):
        self.freqs = np.asarray(self.freqs, dtype=np.int64)
        if self.freqs.size == 0 or self.freqs.min() < 1:
            raise InternalError("every table frequency must be >= 1")
        if int(self.freqs.sum()) != TOTAL_FREQ:
            raise InternalError("table frequencies must total 2^16")
        self.cum = np.concatenate(([0], np.cumsum(self.freqs)))

    def indices(self, symbols: np.ndarray) -> np.ndarray:
        # Clamp to the alphabet so both codec sides stay in agreement;
        # out-of-range symbols are astronomically unlikely under the model
        # that built the table.
        return np.clip(np.asarray(symbols) - self.offset, 0,
                       len(self.freqs) - 1).astype(np.int64)


def _quantize_pmf(p: np.ndarray) -> np.ndarray:
    f = np.maximum(1, np.rint(p * TOTAL_FREQ).astype(np.int64))
    spill = TOTAL_FREQ - int(f.sum())
    top = int(np.argmax(f))
    f[top] += spill
    if f[top] < 1:
        raise InternalError("pmf quantization collapsed the largest bin")
    return f


def gaussian_cdf_table(sigma: float) -> CdfTable:
    """Frequency table for a zero-mean Gaussian at one scale; the alphabet
    covers all symbols outside which the tail mass is below TAIL_MASS, and
    the outermost bins absorb the tails."""
    if sigma <= 0:
        raise UsageError("sigma must be positive")
    z_star = float(ndtri(1.0 - TAIL_MASS))
    hi = max(0, math.ceil(sigma * z_star - 0.5))
    while 1.0 - _phi(np.array((hi + 0.5) / sigma)) > TAIL_MASS:
        hi += 1
    symbols = np.arange(-hi, hi + 1)
    upper = _phi((symbols + 0.5) / sigma)
    lower = _phi((symbols - 0.5) / sigma)
    pmf = upper - lower
    pmf[0] += lower[0]
    pmf[-1] += 1.0 - upper[-1]
    return CdfTable(-hi, _quantize_pmf(pmf))


_ALPHABET_LIMIT = 1 << 14


def factorized_cdf_table(prior: FactorizedPrior, channel: int) -> CdfTable:
    """Frequency table for one side-information channel's learned CDF."""
    def cdf_at(x: float) -> float:
        return prior.cdf(np.array([[x]]), channel=channel)[0].item()

    lo = 0
    while cdf_at(lo - 0.5) > TAIL_MASS:
        lo -= 1
        if lo < -_ALPHABET_LIMIT:
            raise InternalError("prior left tail does not decay")
    hi = 0
    while 1.0 - cdf_at(hi + 0.5) > TAIL_MASS:
        hi += 1
        if hi > _ALPHABET_LIMIT:
            raise InternalError("prior right tail does not decay")
    edges = np.arange(lo, hi + 2) - 0.5
    f = prior.cdf(edges[None, :], channel=channel)[0][0]
    pmf = np.diff(f)
    pmf[0] += f[0]
    pmf[-1] += 1.0 - f[-1]
    return CdfTable(lo, _quantize_pmf(pmf))


def default_sigma_centers() -> np.ndarray:
    return np.geomspace(SIGMA_MIN, SIGMA_MAX, SIGMA_BINS)


def sigma_bin_indices(sigma: np.ndarray,
                      centers: np.ndarray | None = None) -> np.ndarray:
    """Nearest table index in log scale for each Gaussian scale."""
    centers = default_sigma_centers() if centers is None else centers
    logc = np.log(centers)
    edges = 0.5 * (logc[1:] + logc[:-1])
    clipped = np.clip(sigma, centers[0], centers[-1])
    return np.searchsorted(edges, np.log(clipped)).astype(np.int64)


@dataclass
class CodecTables:
    """Everything both codec sides derive deterministically from a model:
    the Gaussian scale ladder and the per-channel prior tables."""

    sigma_centers: np.ndarray
    gaussian: list[CdfTable]
    factorized: list[CdfTable]


def build_cdf_tables(prior: FactorizedPrior | None = None,
                     sigma_centers: np.ndarray | None = None) -> CodecTables:
    centers = (default_sigma_centers() if sigma_centers is None
               else np.asarray(sigma_centers, dtype=np.float64))
    gaussian = [gaussian_cdf_table(float(s)) for s in centers]
    factorized = ([factorized_cdf_table(prior, c)
                   for c in range(prior.channels)]
                  if prior is not None else [])
    return CodecTables(centers, gaussian, factorized)


# ---------------------------------------------------------------------------
# coding

def _table_list(tables, count: int) -> list[CdfTable]:
    if isinstance(tables, CdfTable):
        return [tables] * count
    tables = list(tables)
    if len(tables) != count:
        raise UsageError(f"{count} symbols but {len(tables)} tables")
    return tables


def range_encode(symbols, tables) -> bytes:
    """Encode integer symbols, each under its own frequency table (or one
    shared table); empty input encodes to an empty payload."""
    symbols = np.asarray(symbols, dtype=np.int64).reshape(-1)
    if symbols.size == 0:
        return b""
    per = _table_list(tables, symbols.size)
    enc = rangecoder.RangeEncoder()
    for s, t in zip(symbols.tolist(), per):
        i = int(t.indices(s))
        enc.encode(int(t.cum[i]), int(t.freqs[i]), TOTAL_FREQ)
    return enc.finish()


def range_decode(payload: bytes, count: int, tables) -> np.ndarray:
    """Decode `count` symbols encoded by range_encode with the same
    tables."""
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    if not payload:
        raise DataError("empty payload for a nonempty symbol stream")
    per = _table_list(tables, count)
    dec = rangecoder.RangeDecoder(payload)
    out = np.empty(count, dtype=np.int64)
    for k, t in enumerate(per):
        f = dec.decode_freq(TOTAL_FREQ)
        i = int(np.searchsorted(t.cum, f, side="right")) - 1
        dec.decode_update(int(t.cum[i]), int(t.freqs[i]), TOTAL_FREQ)
        out[k] = i + t.offset
    return out


def table_bits(symbols, tables) -> float:
    """Information content of symbols under the quantized tables; the
    coded length should stay within coder overhead of this."""
    symbols = np.asarray(symbols, dtype=np.int64).reshape(-1)
    per = _table_list(tables, symbols.size)
    bits = 0.0
    for s, t in zip(symbols.tolist(), per):
        i = int(t.indices(s))
        bits -= math.log2(t.freqs[i] / TOTAL_FREQ)
    return bits
