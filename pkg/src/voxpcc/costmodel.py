"""Analytic parameter and operation counting for the codec architectures.

Everything here is exact integer (or Fraction) arithmetic. "Operations"
means convolution multiply-accumulates over each layer's output volume;
biases and activations add parameters but no MACs. That convention is the
one under which the frozen default schedule reproduces the reference
encoder totals, and it is calibrated once in tools/resolve_schedule.py.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import product
from typing import Iterable, Sequence

from .errors import DataError, UsageError

# Frozen reference totals for the encoder (analysis + hyper-analysis) under
# the default 64-block schedule. The exact parameter pair is the anchor the
# schedule search resolves against; see tools/resolve_schedule.py.
ENCODER_PARAMS_BASELINE = 806_888
ENCODER_PARAMS_PROPOSED = 639_192

# Reference display figures for the comparison table emitted by
# `analyze-cost --report`. Cells that the frozen configuration cannot
# reproduce are reported with flags rather than silently adjusted.
REFERENCE_DISPLAY = {
    "baseline": {"params": "802k", "macs": "1.118B"},
    "learned_pcgc": {"params": "311k", "macs": "5.233B"},
    "proposed": {"params": "610k", "macs": "1.02B"},
    "proposed2": {"params": "562k", "macs": "823M"},
}

MODEL_PRESETS = ("baseline", "learned_pcgc", "proposed", "proposed2")

# Default schedule, frozen from the resolve_config search (see the script
# in tools/ for the full derivation and ranking):
#   channels (10, 52, 64), latent 128, hyper (16, 74), block 64.
DEFAULT_CHANNELS = (10, 52, 64)
DEFAULT_LATENT = 128
DEFAULT_HYPER = (16, 74)
DEFAULT_BLOCK = 64


@dataclass(frozen=True)
class LayerCost:
    """Exact cost of one layer: parameter count and output-volume MACs."""

    name: str
    params: int
    macs: int


@dataclass
class CostReport:
    """Per-layer costs plus totals for one model configuration."""

    model: str
    layers: list[LayerCost] = field(default_factory=list)

    @property
    def params(self) -> int:
        return sum(l.params for l in self.layers)

    @property
    def macs(self) -> int:
        return sum(l.macs for l in self.layers)

    def ratio_to(self, other: "CostReport") -> tuple[Fraction, Fraction]:
        """(params, macs) of self as exact fractions of other's totals."""
        return (Fraction(self.params, other.params),
                Fraction(self.macs, other.macs))


def _volume(dims: Sequence[int]) -> int:
    v = 1
    for d in dims:
        v *= int(d)
    return v


def conv3d_cost(k, c_in: int, c_out: int, d_out, bias: bool = True,
                name: str = "conv3d") -> LayerCost:
    """Cost of a dense 3D convolution.

    k may be a scalar kernel side or an (x, y, z) tuple; d_out is the
    output spatial extent, scalar or tuple. params = kx*ky*kz*Ci*Co (+ Co
    bias); macs = kx*ky*kz*Ci*Co*|d_out|.
    """
    kx, ky, kz = (k, k, k) if isinstance(k, int) else tuple(k)
    dims = (d_out, d_out, d_out) if isinstance(d_out, int) else tuple(d_out)
    if min(kx, ky, kz, c_in, c_out, *dims) <= 0:
        raise UsageError("conv3d_cost requires positive dimensions")
    taps = kx * ky * kz * c_in * c_out
    return LayerCost(name, taps + (c_out if bias else 0),
                     taps * _volume(dims))


def separable_cost(c_in: int, c_out: int, d_out, bias: bool = True,
                   mid: int | None = None,
                   name: str = "separable") -> LayerCost:
    """Cost of the 1D-then-2D factorized pair replacing a 3^3 convolution.

    The classic form keeps the intermediate width equal to c_out, giving
    3*Ci*Co + 9*Co^2 parameters; `mid` overrides the intermediate width so
    the proposed block's narrower inner layers can be costed too.
    """
    if mid is None:
        mid = c_out
    dims = (d_out, d_out, d_out) if isinstance(d_out, int) else tuple(d_out)
    if min(c_in, c_out, mid, *dims) <= 0:
        raise UsageError("separable_cost requires positive dimensions")
    taps = 3 * c_in * mid + 9 * mid * c_out
    params = taps + ((mid + c_out) if bias else 0)
    return LayerCost(name, params, taps * _volume(dims))


def activation_params(activation: str, channels: int) -> int:
    """Parameters of one activation over `channels` channels.

    Normalization activations carry a length-C offset vector and a CxC
    coupling matrix; plain relu has none.
    """
    if activation in ("gdn", "cgdn"):
        return channels * channels + channels
    if activation == "relu":
        return 0
    raise UsageError(f"unknown activation {activation!r}")


def proposed_block_widths(c: int) -> tuple[int, int, int, int]:
    """Inner widths (bottleneck, mid, out, dedicated) of the factorized
    residual block at width c.

    Ratios 5c/8, 5c/16, c/4 rounded half-up; the dedicated 1x1x1 path takes
    the remainder so the concatenation reconstructs c exactly. c must be
    divisible by 4 (the per-path output is a quarter split).
    """
    if c % 4 != 0:
        raise UsageError(f"proposed block width {c} not divisible by 4")
    wb = (5 * c + 4) // 8
    w1 = (5 * c + 8) // 16
    w2 = (c + 2) // 4
    p0 = c - 3 * w2
    return wb, w1, w2, p0


def _act_cost(name: str, activation: str, channels: int) -> LayerCost:
    return LayerCost(name, activation_params(activation, channels), 0)


def proposed_block_costs(c: int, d_out, activation: str,
                         prefix: str) -> list[LayerCost]:
    """Layer costs of one factorized residual block at width c."""
    wb, w1, w2, p0 = proposed_block_widths(c)
    layers = [conv3d_cost(1, c, p0, d_out, name=f"{prefix}.dedicated")]
    for axis in "xyz":
        ap = f"{prefix}.axis_{axis}"
        layers.append(conv3d_cost(1, c, wb, d_out, name=f"{ap}.bottleneck"))
        layers.append(_act_cost(f"{ap}.act_b", activation, wb))
        layers.append(conv3d_cost((3, 1, 1), wb, w1, d_out,
                                  name=f"{ap}.conv1d"))
        layers.append(_act_cost(f"{ap}.act_1d", activation, w1))
        layers.append(conv3d_cost((1, 3, 3), w1, w2, d_out,
                                  name=f"{ap}.conv2d"))
    return layers


def _baseline_residual_costs(c: int, d_out, activation: str,
                             prefix: str) -> list[LayerCost]:
    layers = []
    for j in range(2):
        layers.append(conv3d_cost(3, c, c, d_out, name=f"{prefix}.conv{j}"))
        layers.append(_act_cost(f"{prefix}.act{j}", activation, c))
    return layers


def _ceil_half(dims: tuple[int, int, int]) -> tuple[int, int, int]:
    return tuple((d + 1) // 2 for d in dims)


def encoder_layer_costs(config) -> list[LayerCost]:
    """Per-layer costs of the encoder (analysis + hyper-analysis).

    `config` provides variant, activation, block_size, channels,
    latent_channels and hyper_channels (duck-typed; see ModelConfig).
    """
    variant = config.variant
    act = config.activation
    c1, c2, c3 = config.channels
    latent = config.latent_channels
    h1, h2 = config.hyper_channels
    dims = (config.block_size,) * 3

    proposed_blocks = {
        "baseline": (), "baseline_cgdn": (),
        "proposed": (3,), "proposed2": (2, 3),
    }
    if variant not in proposed_blocks:
        raise UsageError(f"unknown variant {variant!r}")

    layers: list[LayerCost] = []
    prev = 1
    for i, c in enumerate((c1, c2, c3), start=1):
        dims = _ceil_half(dims)
        pfx = f"analysis.block{i}"
        layers.append(conv3d_cost(3, prev, c, dims, name=f"{pfx}.down"))
        layers.append(_act_cost(f"{pfx}.act", act, c))
        if i in proposed_blocks[variant]:
            for j in range(2):
                layers.extend(proposed_block_costs(
                    c, dims, act, prefix=f"{pfx}.res{j}"))
        else:
            layers.extend(_baseline_residual_costs(
                c, dims, act, prefix=f"{pfx}.res0"))
        prev = c

    layers.append(conv3d_cost(3, c3, latent, dims, name="analysis.latent"))

    dims = _ceil_half(dims)
    layers.append(conv3d_cost(3, latent, h1, dims,
                              name="hyper_analysis.conv0"))
    dims = _ceil_half(dims)
    layers.append(conv3d_cost(3, h1, h2, dims, name="hyper_analysis.conv1"))
    return layers


def _vrn_block_costs(c: int, d_out, prefix: str) -> list[LayerCost]:
    # Two-branch voxel residual block: a 3^3 pair on one branch and a
    # 1-3-1 bottleneck on the other, concatenating to c with a skip.
    q, h = c // 4, c // 2
    return [
        conv3d_cost(3, c, q, d_out, name=f"{prefix}.b1.conv0"),
        conv3d_cost(3, q, h, d_out, name=f"{prefix}.b1.conv1"),
        conv3d_cost(1, c, q, d_out, name=f"{prefix}.b2.conv0"),
        conv3d_cost(3, q, q, d_out, name=f"{prefix}.b2.conv1"),
        conv3d_cost(1, q, h, d_out, name=f"{prefix}.b2.conv2"),
    ]


def _learned_pcgc_costs(block_size: int = 64) -> list[LayerCost]:
    """Best-effort layer list for the external reference codec's encoder.

    Reconstructed from its published description (three downsampling
    stages with three two-branch voxel residual blocks each, channels
    16/32/64, a 16-channel latent, and a small hyper encoder). Totals are
    compared against the recorded reference figures with flags on
    mismatch; this preset is a counting target, not a runnable network.
    """
    dims = (block_size,) * 3
    layers = [conv3d_cost(3, 1, 16, dims, name="stage0.conv")]
    for i in range(3):
        layers.extend(_vrn_block_costs(16, dims, prefix=f"stage0.vrn{i}"))
    for s, (ci, co) in enumerate([(16, 32), (32, 64)], start=1):
        dims = _ceil_half(dims)
        layers.append(conv3d_cost(3, ci, co, dims, name=f"stage{s}.down"))
        for i in range(3):
            layers.extend(_vrn_block_costs(co, dims,
                                           prefix=f"stage{s}.vrn{i}"))
    dims = _ceil_half(dims)
    layers.append(conv3d_cost(3, 64, 16, dims, name="latent.conv"))
    dims = _ceil_half(dims)
    layers.append(conv3d_cost(3, 16, 8, dims, name="hyper.conv0"))
    dims = _ceil_half(dims)
    layers.append(conv3d_cost(3, 8, 8, dims, name="hyper.conv1"))
    return layers


def model_cost(config) -> CostReport:
    """Cost report for a ModelConfig or a named preset.

    Presets: baseline, proposed, proposed2 (the frozen default schedule
    with a normalization activation) and learned_pcgc (external reference
    architecture, counting only).
    """
    if isinstance(config, str):
        if config == "learned_pcgc":
            return CostReport("learned_pcgc", _learned_pcgc_costs())
        if config not in MODEL_PRESETS:
            raise UsageError(f"unknown preset {config!r}; "
                             f"choose from {MODEL_PRESETS}")
        from .models import ModelConfig
        cfg = ModelConfig(variant=config, activation="cgdn",
                          block_size=DEFAULT_BLOCK,
                          channels=DEFAULT_CHANNELS,
                          latent_channels=DEFAULT_LATENT,
                          hyper_channels=DEFAULT_HYPER)
        return CostReport(config, encoder_layer_costs(cfg))
    name = getattr(config, "variant", "custom")
    return CostReport(name, encoder_layer_costs(config))


def utilization_fraction(n: int, k: int = 3, d: int = 3) -> Fraction:
    """Fraction of output positions where a k^d kernel sees no padding.

    Exactly ((n - (k - 1)) / n) ** d for an n^d input with same padding.
    d = 0 gives 1 (empty product).
    """
    if d < 0:
        raise UsageError("dimensionality must be nonnegative")
    if n <= k - 1:
        raise UsageError(f"input side {n} too small for kernel {k}")
    return Fraction(n - (k - 1), n) ** d


_PINNED_AXES = {"corner": None, "edge": 2, "face": 1, "interior": 0}


def masked_fraction(position: str, k: int = 3, d: int = 3) -> Fraction:
    """Fraction of kernel taps falling outside the input at a boundary
    position, by exact enumeration of the k^d offset grid.

    position counts boundary-pinned axes: corner pins all d, edge pins 2,
    face pins 1, interior none.
    """
    if position not in _PINNED_AXES:
        raise UsageError(f"unknown position {position!r}")
    if d < 1:
        raise UsageError("dimensionality must be at least 1")
    pinned = d if position == "corner" else _PINNED_AXES[position]
    if pinned > d:
        raise UsageError(f"{position} position needs at least "
                         f"{pinned} dimensions")
    half = k // 2
    offsets = range(-half, k - half)
    outside = 0
    for taps in product(offsets, repeat=d):
        # The first `pinned` axes sit at coordinate 0 of the input, so any
        # negative offset along them lands in padding.
        if any(t < 0 for t in taps[:pinned]):
            outside += 1
    return Fraction(outside, k ** d)


@dataclass(frozen=True)
class SearchSpace:
    """Enumerable space of channel schedules for resolve_config.

    The defaults encode the documented preferences: the third width fixed
    at 64, the second width a multiple of 4 (the factorized block needs
    quarter splits and the two-block variant runs it at C2), and encoder
    MACs inside the display window of the reference table's first row.
    """

    c3: tuple[int, ...] = (64,)
    c1_range: tuple[int, int] = (2, 63)
    c2_multiple: int = 4
    latent_range: tuple[int, int] = (16, 320)
    h1_range: tuple[int, int] = (2, 256)
    h2_range: tuple[int, int] = (2, 256)
    macs_window: tuple[int, int] | None = (1_117_500_000, 1_118_500_000)
    block_size: int = 64


def _schedule_params(c1: int, c2: int, c3: int, latent: int,
                     h1: int, h2: int) -> int:
    # Baseline encoder with normalization activations, biases included.
    def act(c):
        return c * c + c

    total, prev = 0, 1
    for c in (c1, c2, c3):
        total += 27 * prev * c + c + act(c)          # down conv + act
        total += 2 * (27 * c * c + c) + 2 * act(c)   # residual part
        prev = c
    total += (27 * c3 + 1) * latent
    total += (27 * latent + 1) * h1 + (27 * h1 + 1) * h2
    return total


def _schedule_macs(c1: int, c2: int, c3: int, latent: int,
                   h1: int, h2: int, block: int) -> int:
    dims = (block,) * 3
    total, prev = 0, 1
    for c in (c1, c2, c3):
        dims = _ceil_half(dims)
        v = _volume(dims)
        total += 27 * prev * c * v + 2 * 27 * c * c * v
        prev = c
    total += 27 * c3 * latent * _volume(dims)
    dims = _ceil_half(dims)
    total += 27 * latent * h1 * _volume(dims)
    dims = _ceil_half(dims)
    total += 27 * h1 * h2 * _volume(dims)
    return total


def _sanity_key(c1, c2, c3, latent, h1, h2, macs, window_mid):
    score = ((h2 <= h1) + (h1 <= latent) + (latent >= c3) + (c1 >= 8)
             + (c1 < c2 < c3))
    return (-score, abs(macs - window_mid))


def resolve_config(target_params: int,
                   space: SearchSpace | None = None) -> list:
    """All schedules in `space` whose analytic baseline encoder total is
    exactly `target_params`, best-ranked first.

    Raises DataError listing the five nearest totals when nothing matches.
    """
    space = space or SearchSpace()
    lo_m, hi_m = space.macs_window or (None, None)
    mid = (lo_m + hi_m) // 2 if space.macs_window else 0

    matches = []
    nearest: list[tuple[int, tuple]] = []  # max-heap via negated distance

    def note_nearest(dist, sched):
        if len(nearest) < 5:
            heapq.heappush(nearest, (-dist, sched))
        elif dist < -nearest[0][0]:
            heapq.heapreplace(nearest, (-dist, sched))

    for c3 in space.c3:
        for c1 in range(space.c1_range[0], space.c1_range[1] + 1):
            c2_lo = c1 + 1
            for c2 in range(c2_lo, c3):
                if c2 % space.c2_multiple:
                    continue
                for latent in range(space.latent_range[0],
                                    space.latent_range[1] + 1):
                    base = _schedule_params(c1, c2, c3, latent, 0, 0)
                    if base > target_params:
                        break
                    for h1 in range(space.h1_range[0],
                                    space.h1_range[1] + 1):
                        rem = target_params - _schedule_params(
                            c1, c2, c3, latent, h1, 0)
                        if rem <= 0:
                            break
                        den = 27 * h1 + 1
                        h2, r = divmod(rem, den)
                        for cand in ((h2, r), (h2 + 1, den - r)):
                            if not (space.h2_range[0] <= cand[0]
                                    <= space.h2_range[1]):
                                continue
                            sched = (c1, c2, c3, latent, h1, cand[0])
                            if cand[1] == 0:
                                macs = _schedule_macs(*sched,
                                                      space.block_size)
                                if space.macs_window and not (
                                        lo_m <= macs <= hi_m):
                                    note_nearest(0, sched + (macs,))
                                    continue
                                matches.append((sched, macs))
                            else:
                                note_nearest(cand[1], sched)

    if not matches:
        near = sorted((-d, s) for d, s in nearest)
        lines = ", ".join(f"{s[:6]} off by {-d}" for d, s in near[:5])
        raise DataError(f"no schedule in the search space totals "
                        f"{target_params}; nearest: {lines}")

    matches.sort(key=lambda ms: _sanity_key(*ms[0], ms[1], mid))

    from .models import ModelConfig
    return [ModelConfig(variant="baseline", activation="cgdn",
                        block_size=space.block_size,
                        channels=(c1, c2, c3), latent_channels=latent,
                        hyper_channels=(h1, h2))
            for (c1, c2, c3, latent, h1, h2), _ in matches]


def parse_display(text: str) -> tuple[float, float]:
    """Parse a display figure like '1.118B' or '802k' into (value, unit).

    Returns the mantissa and the unit multiplier.
    """
    units = {"k": 1e3, "M": 1e6, "B": 1e9}
    unit = text[-1]
    if unit not in units:
        raise UsageError(f"display figure {text!r} must end in k/M/B")
    return float(text[:-1]), units[unit]


def display_match(value: int, text: str) -> bool:
    """Whether `value` rounds to `text` at text's displayed precision."""
    mantissa, unit = parse_display(text)
    decimals = len(text[:-1].split(".")[1]) if "." in text else 0
    return f"{value / unit:.{decimals}f}" == text[:-1]


def format_like(value: int, text: str) -> str:
    """Format `value` at the same precision and unit as `text`."""
    _, unit = parse_display(text)
    decimals = len(text[:-1].split(".")[1]) if "." in text else 0
    return f"{value / unit:.{decimals}f}{text[-1]}"
