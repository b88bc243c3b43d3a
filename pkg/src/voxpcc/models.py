"""Network architectures for block-based occupancy compression.

An analysis transform maps a voxel block to a latent volume through three
stride-2 stages, each a downsampling convolution, an activation and a
residual part; a mirrored synthesis transform maps the latent back to
occupancy probabilities; a hyper pair produces the scale field for the
latent's conditional entropy model.

Variants differ only in the residual parts: the factorized block replaces
the dense residual pair in the last stage ("proposed") or the last two
stages ("proposed2"). Parameter names are hierarchical and stable across
variants so checkpoints and cost reports line up layer by layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import nn
from .costmodel import proposed_block_widths
from .errors import InternalError, UsageError
from .nn import GdnParams, Parameter, Tensor

VARIANTS = ("baseline", "baseline_cgdn", "proposed", "proposed2")
ACTIVATIONS = ("relu", "gdn", "cgdn")


@dataclass
class ModelConfig:
    """Architecture hyperparameters; see configs/ for the shipped presets."""

    variant: str = "baseline"
    activation: str = "relu"
    block_size: int = 64
    channels: tuple[int, int, int] = (10, 52, 64)
    latent_channels: int = 128
    hyper_channels: tuple[int, int] = (16, 74)
    synthesis_gdn: bool = False

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.hyper_channels = tuple(int(c) for c in self.hyper_channels)
        self.block_size = int(self.block_size)
        self.latent_channels = int(self.latent_channels)
        if self.variant == "baseline_cgdn":
            self.activation = "cgdn"
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise UsageError(f"unknown variant {self.variant!r}; "
                             f"choose from {VARIANTS}")
        if self.activation not in ACTIVATIONS:
            raise UsageError(f"unknown activation {self.activation!r}; "
                             f"choose from {ACTIVATIONS}")
        if len(self.channels) != 3 or any(c <= 0 for c in self.channels):
            raise UsageError("channels must be three positive widths")
        c1, c2, c3 = self.channels
        if not c1 <= c2 <= c3:
            raise UsageError(f"channels must be nondecreasing, "
                             f"got {self.channels}")
        if len(self.hyper_channels) != 2 or min(self.hyper_channels) <= 0:
            raise UsageError("hyper_channels must be two positive widths")
        if self.latent_channels <= 0:
            raise UsageError("latent_channels must be positive")
        bs = self.block_size
        if bs < 8 or bs & (bs - 1):
            raise UsageError(f"block_size must be a power of two >= 8, "
                             f"got {bs}")
        if self.variant in ("proposed", "proposed2") and c3 % 4:
            raise UsageError(f"variant {self.variant} needs the last "
                             f"width divisible by 4, got {c3}")
        if self.variant == "proposed2" and c2 % 4:
            raise UsageError(f"variant proposed2 needs the second width "
                             f"divisible by 4, got {c2}")

    def synthesis_activation(self) -> str:
        if self.synthesis_gdn and self.activation != "relu":
            return self.activation
        return "relu"

    def to_mapping(self) -> dict[str, str]:
        return {
            "variant": self.variant,
            "activation": self.activation,
            "block_size": str(self.block_size),
            "channels": ",".join(str(c) for c in self.channels),
            "latent_channels": str(self.latent_channels),
            "hyper_channels": ",".join(str(c) for c in self.hyper_channels),
            "synthesis_gdn": "true" if self.synthesis_gdn else "false",
        }

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            if key not in known:
                continue
            if key in ("channels", "hyper_channels"):
                try:
                    kwargs[key] = tuple(int(p) for p in raw.split(","))
                except ValueError:
                    raise UsageError(f"bad integer list for {key}: {raw!r}")
            elif key in ("block_size", "latent_channels"):
                try:
                    kwargs[key] = int(raw)
                except ValueError:
                    raise UsageError(f"bad integer for {key}: {raw!r}")
            elif key == "synthesis_gdn":
                kwargs[key] = _parse_bool(key, raw)
            else:
                kwargs[key] = raw
        variant = kwargs.get("variant", "baseline")
        if "activation" not in kwargs:
            kwargs["activation"] = ("cgdn" if variant in
                                    ("proposed", "proposed2", "baseline_cgdn")
                                    else "relu")
        return cls(**kwargs)


def _parse_bool(key: str, raw: str) -> bool:
    if raw.lower() in ("true", "1", "yes"):
        return True
    if raw.lower() in ("false", "0", "no"):
        return False
    raise UsageError(f"bad boolean for {key}: {raw!r}")


# ---------------------------------------------------------------------------
# layers

def _init_weight(rng, shape, fan_in) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv3d:
    def __init__(self, name, c_in, c_out, kernel=(3, 3, 3), stride=1,
                 rng=None):
        rng = rng or np.random.default_rng(0)
        kernel = (kernel,) * 3 if isinstance(kernel, int) else tuple(kernel)
        fan_in = c_in * kernel[0] * kernel[1] * kernel[2]
        self.weight = Parameter(
            _init_weight(rng, (c_out, c_in) + kernel, fan_in),
            f"{name}.weight")
        self.bias = Parameter(np.zeros(c_out), f"{name}.bias")
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return nn.conv3d(x, self.weight, self.bias, self.stride)

    def parameters(self):
        return [self.weight, self.bias]


class TransposedConv3d:
    def __init__(self, name, c_in, c_out, stride=2, rng=None):
        rng = rng or np.random.default_rng(0)
        fan_in = c_in * 27
        self.weight = Parameter(
            _init_weight(rng, (c_in, c_out, 3, 3, 3), fan_in),
            f"{name}.weight")
        self.bias = Parameter(np.zeros(c_out), f"{name}.bias")
        self.stride = stride

    def __call__(self, x: Tensor, out_dims=None) -> Tensor:
        return nn.conv3d_transposed(x, self.weight, self.bias,
                                    self.stride, out_dims)

    def parameters(self):
        return [self.weight, self.bias]


class AxisConv1d:
    def __init__(self, name, c_in, c_out, axis, rng=None):
        rng = rng or np.random.default_rng(0)
        self.axis = axis
        self.weight = Parameter(_init_weight(rng, (c_out, c_in, 3), 3 * c_in),
                                f"{name}.weight")
        self.bias = Parameter(np.zeros(c_out), f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return nn.conv1d_axis(x, self.axis, self.weight, self.bias)

    def parameters(self):
        return [self.weight, self.bias]


class PlaneConv2d:
    def __init__(self, name, c_in, c_out, normal_axis, rng=None):
        rng = rng or np.random.default_rng(0)
        self.normal_axis = normal_axis
        self.weight = Parameter(
            _init_weight(rng, (c_out, c_in, 3, 3), 9 * c_in),
            f"{name}.weight")
        self.bias = Parameter(np.zeros(c_out), f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return nn.conv2d_plane(x, self.normal_axis, self.weight, self.bias)

    def parameters(self):
        return [self.weight, self.bias]


class Activation:
    """relu (parameter-free) or a divisive normalization with parameters."""

    def __init__(self, name, flavor, channels, rng=None):
        if flavor not in ACTIVATIONS:
            raise UsageError(f"unknown activation {flavor!r}")
        self.flavor = flavor
        self.gdn_params = (GdnParams.create(channels, flavor, name)
                           if flavor != "relu" else None)

    def __call__(self, x: Tensor) -> Tensor:
        if self.flavor == "relu":
            return nn.relu(x)
        if self.flavor == "gdn":
            return nn.gdn(x, self.gdn_params)
        return nn.cgdn(x, self.gdn_params)

    def parameters(self):
        if self.gdn_params is None:
            return []
        return [self.gdn_params.beta, self.gdn_params.gamma]


# ---------------------------------------------------------------------------
# residual parts

class ResidualBlockBaseline:
    """Two 3^3 convolutions with activations inside an identity skip."""

    def __init__(self, name, channels, activation, rng=None):
        self.conv0 = Conv3d(f"{name}.conv0", channels, channels, rng=rng)
        self.act0 = Activation(f"{name}.act0", activation, channels, rng=rng)
        self.conv1 = Conv3d(f"{name}.conv1", channels, channels, rng=rng)
        self.act1 = Activation(f"{name}.act1", activation, channels, rng=rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.act0(self.conv0(x))
        h = self.act1(self.conv1(h))
        return x + h

    def parameters(self):
        return (self.conv0.parameters() + self.act0.parameters()
                + self.conv1.parameters() + self.act1.parameters())


class ProposedBlock:
    """Factorized residual block: three axis paths plus a dedicated path.

    Each axis path narrows through a 1x1x1 bottleneck, convolves along its
    axis, then mixes in the orthogonal plane; the dedicated path is a
    linear 1x1x1 map. Outputs concatenate back to the block width under an
    identity skip. Width must be divisible by 4 (quarter splits).
    """

    def __init__(self, name, channels, activation, rng=None):
        wb, w1, w2, p0 = proposed_block_widths(channels)
        self.paths = []
        for axis in "xyz":
            ap = f"{name}.axis_{axis}"
            self.paths.append((
                Conv3d(f"{ap}.bottleneck", channels, wb, kernel=1, rng=rng),
                Activation(f"{ap}.act_b", activation, wb, rng=rng),
                AxisConv1d(f"{ap}.conv1d", wb, w1, axis, rng=rng),
                Activation(f"{ap}.act_1d", activation, w1, rng=rng),
                PlaneConv2d(f"{ap}.conv2d", w1, w2, axis, rng=rng),
            ))
        self.dedicated = Conv3d(f"{name}.dedicated", channels, p0,
                                kernel=1, rng=rng)

    def __call__(self, x: Tensor) -> Tensor:
        parts = []
        for bottleneck, act_b, c1d, act_1d, c2d in self.paths:
            h = act_b(bottleneck(x))
            h = act_1d(c1d(h))
            parts.append(c2d(h))
        parts.append(self.dedicated(x))
        return x + nn.concat_channels(parts)

    def parameters(self):
        out = []
        for path in self.paths:
            for layer in path:
                out.extend(layer.parameters())
        out.extend(self.dedicated.parameters())
        return out


def residual_block_baseline(channels, activation, name="res0", rng=None):
    return ResidualBlockBaseline(name, channels, activation, rng=rng)


def proposed_block(channels, activation, name="res0", rng=None):
    return ProposedBlock(name, channels, activation, rng=rng)


_PROPOSED_STAGES = {
    "baseline": (), "baseline_cgdn": (),
    "proposed": (3,), "proposed2": (2, 3),
}


# ---------------------------------------------------------------------------
# transforms

class Analysis:
    """Occupancy block -> latent volume (three stride-2 stages)."""

    def __init__(self, config: ModelConfig, rng=None):
        rng = rng or np.random.default_rng(0)
        act = config.activation
        self.stages = []
        prev = 1
        for i, c in enumerate(config.channels, start=1):
            pfx = f"analysis.block{i}"
            down = Conv3d(f"{pfx}.down", prev, c, stride=2, rng=rng)
            stage_act = Activation(f"{pfx}.act", act, c, rng=rng)
            if i in _PROPOSED_STAGES[config.variant]:
                residuals = [ProposedBlock(f"{pfx}.res{j}", c, act, rng=rng)
                             for j in range(2)]
            else:
                residuals = [ResidualBlockBaseline(f"{pfx}.res0", c, act,
                                                   rng=rng)]
            self.stages.append((down, stage_act, residuals))
            prev = c
        self.latent = Conv3d("analysis.latent", prev,
                             config.latent_channels, rng=rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for down, act, residuals in self.stages:
            h = act(down(h))
            for res in residuals:
                h = res(h)
        return self.latent(h)

    def parameters(self):
        out = []
        for down, act, residuals in self.stages:
            out.extend(down.parameters())
            out.extend(act.parameters())
            for res in residuals:
                out.extend(res.parameters())
        out.extend(self.latent.parameters())
        return out


class Synthesis:
    """Latent volume -> occupancy probabilities (mirror of Analysis).

    Residual parts stay dense in synthesis for every variant; the final
    stage ends in a sigmoid over a single channel.
    """

    def __init__(self, config: ModelConfig, rng=None):
        rng = rng or np.random.default_rng(0)
        act = config.synthesis_activation()
        chans = config.channels
        self.pre = Conv3d("synthesis.pre", config.latent_channels,
                          chans[2], rng=rng)
        self.pre_act = Activation("synthesis.pre.act", act, chans[2],
                                  rng=rng)
        self.stages = []
        for i in (3, 2, 1):
            c = chans[i - 1]
            c_out = chans[i - 2] if i > 1 else 1
            pfx = f"synthesis.block{i}"
            res = ResidualBlockBaseline(f"{pfx}.res0", c, act, rng=rng)
            up = TransposedConv3d(f"{pfx}.up", c, c_out, stride=2, rng=rng)
            stage_act = (Activation(f"{pfx}.act", act, c_out, rng=rng)
                         if i > 1 else None)
            self.stages.append((res, up, stage_act))

    def __call__(self, y: Tensor) -> Tensor:
        h = self.pre_act(self.pre(y))
        for res, up, act in self.stages:
            h = up(res(h))
            h = act(h) if act is not None else nn.sigmoid(h)
        return h

    def parameters(self):
        out = self.pre.parameters() + self.pre_act.parameters()
        for res, up, act in self.stages:
            out.extend(res.parameters())
            out.extend(up.parameters())
            if act is not None:
                out.extend(act.parameters())
        return out


class HyperAnalysis:
    """Latent -> side-information volume (two stride-2 relu convolutions)."""

    def __init__(self, config: ModelConfig, rng=None):
        rng = rng or np.random.default_rng(0)
        h1, h2 = config.hyper_channels
        self.conv0 = Conv3d("hyper_analysis.conv0", config.latent_channels,
                            h1, stride=2, rng=rng)
        self.conv1 = Conv3d("hyper_analysis.conv1", h1, h2, stride=2,
                            rng=rng)

    def __call__(self, y: Tensor) -> Tensor:
        return nn.relu(self.conv1(nn.relu(self.conv0(y))))

    def parameters(self):
        return self.conv0.parameters() + self.conv1.parameters()


class HyperSynthesis:
    """Side information -> positive scale field over the latent volume."""

    SIGMA_FLOOR = 1e-6

    def __init__(self, config: ModelConfig, rng=None):
        rng = rng or np.random.default_rng(0)
        h1, h2 = config.hyper_channels
        self.up0 = TransposedConv3d("hyper_synthesis.up0", h2, h1,
                                    stride=2, rng=rng)
        self.up1 = TransposedConv3d("hyper_synthesis.up1", h1,
                                    config.latent_channels, stride=2,
                                    rng=rng)

    def __call__(self, z: Tensor, latent_dims) -> Tensor:
        mid_dims = tuple(-(-d // 2) for d in latent_dims)
        h = nn.relu(self.up0(z, out_dims=mid_dims))
        h = self.up1(h, out_dims=tuple(latent_dims))
        return nn.softplus(h) + self.SIGMA_FLOOR

    def parameters(self):
        return self.up0.parameters() + self.up1.parameters()


def build_analysis(config: ModelConfig, rng=None) -> Analysis:
    return Analysis(config, rng=rng)


def build_synthesis(config: ModelConfig, rng=None) -> Synthesis:
    return Synthesis(config, rng=rng)


def build_hyper_networks(config: ModelConfig,
                         rng=None) -> tuple[HyperAnalysis, HyperSynthesis]:
    rng = rng or np.random.default_rng(0)
    return HyperAnalysis(config, rng=rng), HyperSynthesis(config, rng=rng)


# ---------------------------------------------------------------------------
# the bundle

@dataclass
class Network:
    """All four transforms plus the side-information prior."""

    config: ModelConfig
    analysis: Analysis
    synthesis: Synthesis
    hyper_analysis: HyperAnalysis
    hyper_synthesis: HyperSynthesis
    prior: object

    def parameters(self) -> list[Parameter]:
        out = (self.analysis.parameters() + self.synthesis.parameters()
               + self.hyper_analysis.parameters()
               + self.hyper_synthesis.parameters()
               + self.prior.parameters())
        seen = set()
        unique = []
        for p in out:
            if id(p) not in seen:
                seen.add(id(p))
                unique.append(p)
        return unique

    def named_parameters(self) -> dict[str, Parameter]:
        named = {}
        for p in self.parameters():
            if p.name in named:
                raise InternalError(f"duplicate parameter name {p.name}")
            named[p.name] = p
        return named

    def encoder_parameter_count(self) -> int:
        return sum(p.data.size for p in self.analysis.parameters()
                   + self.hyper_analysis.parameters())


def parameter_count(obj) -> int:
    return sum(p.data.size for p in obj.parameters())


def build_network(config: ModelConfig, seed: int = 0) -> Network:
    """Deterministically initialized network for a configuration."""
    from .entropy import FactorizedPrior

    rng = np.random.default_rng(seed)
    analysis = Analysis(config, rng=rng)
    synthesis = Synthesis(config, rng=rng)
    hyper_analysis = HyperAnalysis(config, rng=rng)
    hyper_synthesis = HyperSynthesis(config, rng=rng)
    prior = FactorizedPrior(config.hyper_channels[1], rng=rng)
    return Network(config, analysis, synthesis, hyper_analysis,
                   hyper_synthesis, prior)
