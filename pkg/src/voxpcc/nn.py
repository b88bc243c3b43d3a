"""Minimal differentiable-computation layer.

Dense float64 volumetric tensors with reverse-mode gradients over a small
tape, the convolution family (dense 3D, axis 1D, planar 2D, strided and
transposed), ReLU and the divisive-normalization activations, the focal
loss, Adam, and a central finite-difference gradient checker.

Tensors are channel-major: (channels, depth, height, width). Spatial axes
map x -> depth, y -> height, z -> width to match the x-major voxel order
used by the geometry module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, InternalError, UsageError


class Tensor:
    """A float64 array plus the backward closure that produced it."""

    __slots__ = ("data", "grad", "parents", "backward_fn")

    def __init__(self, data, parents=(), backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return self.data.item()

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return scale(self, other)

    __rmul__ = __mul__

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


class Parameter(Tensor):
    """A named leaf tensor updated by the optimizer.

    `group` routes it to an optimizer learning rate ("main" or "prior");
    `project` is applied in place after every optimizer step to enforce
    constraints such as nonnegativity.
    """

    __slots__ = ("name", "group", "project")

    def __init__(self, data, name: str, group: str = "main", project=None):
        super().__init__(data)
        self.name = name
        self.group = group
        self.project = project


def node(data, parents, backward_fn) -> Tensor:
    """Create an interior graph node. backward_fn(grad_out) must call
    accumulate(parent, grad) for every differentiable parent."""
    return Tensor(data, parents, backward_fn)


def accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss through the whole graph."""
    if loss.data.size != 1:
        raise UsageError("backward expects a scalar loss")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            topo.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t.parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for t in reversed(topo):
        if t.backward_fn is not None and t.grad is not None:
            t.backward_fn(t.grad)


# ---------------------------------------------------------------------------
# elementwise arithmetic (only the combinations the models need)

def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.data.shape != b.data.shape:
            raise UsageError(f"add shape mismatch {a.shape} vs {b.shape}")

        def bwd(g):
            accumulate(a, g)
            accumulate(b, g)

        return node(a.data + b.data, (a, b), bwd)

    def bwd(g):
        accumulate(a, g)

    return node(a.data + b, (a,), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bwd(g):
        accumulate(a, g * s)

    return node(a.data * s, (a,), bwd)


def concat_channels(parts: list[Tensor]) -> Tensor:
    sizes = [p.data.shape[0] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=0)

    def bwd(g):
        at = 0
        for p, c in zip(parts, sizes):
            accumulate(p, g[at:at + c])
            at += c

    return node(out, tuple(parts), bwd)


# ---------------------------------------------------------------------------
# convolutions

def _out_dims(in_dims, stride):
    return tuple(-(-d // stride) for d in in_dims)


def _pads(in_dims, k, stride, out_dims):
    pads = []
    for n, kk, o in zip(in_dims, k, out_dims):
        left = kk // 2
        right = max(0, stride * (o - 1) + kk - left - n)
        pads.append((left, right))
    return pads


def _im2col(xp: np.ndarray, k, stride, out_dims) -> np.ndarray:
    ci = xp.shape[0]
    od, oh, ow = out_dims
    taps = k[0] * k[1] * k[2]
    cols = np.empty((ci, taps, od * oh * ow), dtype=np.float64)
    t = 0
    s = stride
    for a in range(k[0]):
        for b in range(k[1]):
            for c in range(k[2]):
                view = xp[:, a:a + s * od:s, b:b + s * oh:s,
                          c:c + s * ow:s]
                cols[:, t, :] = view.reshape(ci, -1)
                t += 1
    return cols


def _col2im(gcols: np.ndarray, xp_shape, k, stride, out_dims) -> np.ndarray:
    dxp = np.zeros(xp_shape, dtype=np.float64)
    ci = xp_shape[0]
    od, oh, ow = out_dims
    t = 0
    s = stride
    for a in range(k[0]):
        for b in range(k[1]):
            for c in range(k[2]):
                dxp[:, a:a + s * od:s, b:b + s * oh:s,
                    c:c + s * ow:s] += gcols[:, t, :].reshape(ci, od, oh, ow)
                t += 1
    return dxp


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int,
                  out_dims=None):
    ci, *in_dims = x.shape
    co, ci_w, *k = w.shape
    if ci != ci_w:
        raise UsageError(f"conv channels mismatch: input {ci}, "
                         f"weights expect {ci_w}")
    if out_dims is None:
        out_dims = _out_dims(in_dims, stride)
    pads = _pads(in_dims, k, stride, out_dims)
    xp = np.pad(x, [(0, 0)] + pads)
    cols = _im2col(xp, k, stride, out_dims)
    out = (w.reshape(co, -1) @ cols.reshape(ci * k[0] * k[1] * k[2], -1))
    return out.reshape(co, *out_dims), xp.shape, pads, cols


def _conv_input_grad(g: np.ndarray, w: np.ndarray, stride: int,
                     x_dims) -> np.ndarray:
    # Scatter the output gradient back through the taps; exact adjoint of
    # _conv_forward's im2col + matmul.
    co, ci, *k = w.shape
    out_dims = g.shape[1:]
    pads = _pads(x_dims, k, stride, out_dims)
    xp_shape = (ci,) + tuple(n + pl + pr
                             for n, (pl, pr) in zip(x_dims, pads))
    gcols = (w.reshape(co, -1).T @ g.reshape(co, -1))
    gcols = gcols.reshape(ci, k[0] * k[1] * k[2], -1)
    dxp = _col2im(gcols, xp_shape, k, stride, out_dims)
    slc = tuple([slice(None)] + [slice(pl, pl + n)
                                 for n, (pl, pr) in zip(x_dims, pads)])
    return dxp[slc]


def conv3d(x: Tensor, weights: Tensor, bias: Tensor | None,
           stride: int = 1) -> Tensor:
    """Dense convolution, weights (Co, Ci, kx, ky, kz), same padding,
    output spatial dims = ceil(input / stride)."""
    if stride not in (1, 2):
        raise UsageError("stride must be 1 or 2")
    out, _, _, cols = _conv_forward(x.data, weights.data, stride)
    if bias is not None:
        out = out + bias.data[:, None, None, None]
    co = weights.data.shape[0]
    parents = (x, weights) + ((bias,) if bias is not None else ())

    def bwd(g):
        gf = g.reshape(co, -1)
        accumulate(weights,
                   (gf @ cols.reshape(cols.shape[0] * cols.shape[1], -1).T)
                   .reshape(weights.data.shape))
        accumulate(x, _conv_input_grad(g, weights.data, stride,
                                       x.data.shape[1:]))
        if bias is not None:
            accumulate(bias, gf.sum(axis=1))

    return node(out, parents, bwd)


def conv3d_transposed(x: Tensor, weights: Tensor, bias: Tensor | None,
                      stride: int = 1, out_dims=None) -> Tensor:
    """Exact adjoint of conv3d at the same stride; upsamples by stride.

    weights (Ci, Co, kx, ky, kz). out_dims defaults to stride * input and
    must satisfy ceil(out / stride) == input per axis otherwise.
    """
    if stride not in (1, 2):
        raise UsageError("stride must be 1 or 2")
    in_dims = x.data.shape[1:]
    if out_dims is None:
        out_dims = tuple(stride * d for d in in_dims)
    if _out_dims(out_dims, stride) != tuple(in_dims):
        raise UsageError(f"transposed output dims {out_dims} do not "
                         f"contract back to input dims {tuple(in_dims)}")
    ci, co = weights.data.shape[:2]
    if x.data.shape[0] != ci:
        raise UsageError(f"transposed conv channels mismatch: input "
                         f"{x.data.shape[0]}, weights expect {ci}")
    out = _conv_input_grad(x.data, weights.data, stride, out_dims)
    if bias is not None:
        out = out + bias.data[:, None, None, None]
    parents = (x, weights) + ((bias,) if bias is not None else ())

    def bwd(g):
        gout, _, _, cols = _conv_forward(g, weights.data, stride,
                                         out_dims=None)
        # forward conv of the upstream gradient contracts out_dims back to
        # in_dims, which is exactly the adjoint of this layer
        accumulate(x, gout)
        xf = x.data.reshape(ci, -1)
        accumulate(weights,
                   (xf @ cols.reshape(cols.shape[0] * cols.shape[1], -1).T)
                   .reshape(weights.data.shape))
        if bias is not None:
            accumulate(bias, g.reshape(g.shape[0], -1).sum(axis=1))

    return node(out, parents, bwd)


_AXIS_INDEX = {"x": 0, "y": 1, "z": 2}


def conv1d_axis(x: Tensor, axis: str, weights: Tensor,
                bias: Tensor | None) -> Tensor:
    """Length-3 convolution along one spatial axis, weights (Co, Ci, 3)."""
    if axis not in _AXIS_INDEX:
        raise UsageError(f"axis must be x, y or z, got {axis!r}")
    co, ci, k = weights.data.shape
    shape = [co, ci, 1, 1, 1]
    shape[2 + _AXIS_INDEX[axis]] = k
    w3 = _reshaped_view(weights, tuple(shape))
    return conv3d(x, w3, bias, stride=1)


def conv2d_plane(x: Tensor, normal_axis: str, weights: Tensor,
                 bias: Tensor | None) -> Tensor:
    """3x3 convolution in the plane orthogonal to normal_axis,
    weights (Co, Ci, 3, 3)."""
    if normal_axis not in _AXIS_INDEX:
        raise UsageError(f"axis must be x, y or z, got {normal_axis!r}")
    co, ci, k1, k2 = weights.data.shape
    shape = [co, ci, k1, k2]
    shape.insert(2 + _AXIS_INDEX[normal_axis], 1)
    w3 = _reshaped_view(weights, tuple(shape))
    return conv3d(x, w3, bias, stride=1)


def _reshaped_view(t: Tensor, shape) -> Tensor:
    """Reshape that routes gradients back to the original tensor."""
    def bwd(g):
        accumulate(t, g.reshape(t.data.shape))

    return node(t.data.reshape(shape), (t,), bwd)


# ---------------------------------------------------------------------------
# activations

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(g):
        accumulate(x, g * mask)

    return node(np.where(mask, x.data, 0.0), (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)

    def bwd(g):
        accumulate(x, g * out * (1.0 - out))

    return node(out, (x,), bwd)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def softplus(x: Tensor) -> Tensor:
    out = _softplus(x.data)
    sig = _sigmoid(x.data)

    def bwd(g):
        accumulate(x, g * sig)

    return node(out, (x,), bwd)


def _softplus(v: np.ndarray) -> np.ndarray:
    return np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))


BETA_MIN = 1e-6


@dataclass
class GdnParams:
    """Divisive-normalization parameters for one activation layer.

    beta: length-C offsets (floored at BETA_MIN); gamma: CxC nonnegative
    coupling; exponents fixed per flavor (2, 0.5) or (1, 1).
    """

    beta: Parameter
    gamma: Parameter
    alpha_exp: float
    eps_exp: float

    @classmethod
    def create(cls, channels: int, flavor: str, name: str) -> "GdnParams":
        if flavor == "gdn":
            a, e = 2.0, 0.5
        elif flavor == "cgdn":
            a, e = 1.0, 1.0
        else:
            raise UsageError(f"unknown normalization flavor {flavor!r}")
        beta = Parameter(np.ones(channels), f"{name}.beta",
                         project=lambda d: np.maximum(d, BETA_MIN, out=d))
        gamma = Parameter(0.1 * np.eye(channels), f"{name}.gamma",
                          project=lambda d: np.maximum(d, 0.0, out=d))
        return cls(beta, gamma, a, e)

    def validate(self):
        if np.any(self.beta.data < BETA_MIN) or np.any(self.gamma.data < 0):
            raise InternalError("divisive-norm parameters out of range")


def _divisive_norm(x: Tensor, params: GdnParams) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise InternalError("non-finite input to divisive normalization")
    params.validate()
    a, e = params.alpha_exp, params.eps_exp
    c = x.data.shape[0]
    xf = x.data.reshape(c, -1)
    p = xf * xf if a == 2.0 else np.abs(xf) ** a
    s = params.gamma.data @ p + params.beta.data[:, None]
    d = np.sqrt(s) if e == 0.5 else s ** e
    out = xf / d

    def bwd(g):
        gf = g.reshape(c, -1)
        t = gf * xf / (s * d)          # g * x * s^(-eps-1)
        if a == 2.0:
            dp = 2.0 * xf
        elif a == 1.0:
            dp = np.sign(xf)
        else:
            dp = a * np.abs(xf) ** (a - 1.0) * np.sign(xf)
        gx = gf / d - e * dp * (params.gamma.data.T @ t)
        accumulate(x, gx.reshape(x.data.shape))
        accumulate(params.beta, -e * t.sum(axis=1))
        accumulate(params.gamma, -e * (t @ p.T))

    return node(out.reshape(x.data.shape), (x, params.beta, params.gamma),
                bwd)


def gdn(x: Tensor, params: GdnParams) -> Tensor:
    """x_i / (beta_i + sum_j gamma_ij x_j^2) ** 0.5, per position."""
    if (params.alpha_exp, params.eps_exp) != (2.0, 0.5):
        raise UsageError("gdn expects exponents (2, 0.5)")
    return _divisive_norm(x, params)


def cgdn(x: Tensor, params: GdnParams) -> Tensor:
    """x_i / (beta_i + sum_j gamma_ij |x_j|), per position."""
    if (params.alpha_exp, params.eps_exp) != (1.0, 1.0):
        raise UsageError("cgdn expects exponents (1, 1)")
    return _divisive_norm(x, params)


# ---------------------------------------------------------------------------
# focal loss

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class FocalLossParams:
    alpha: float = 0.75
    gamma_focus: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise UsageError("focal alpha must lie in (0, 1)")
        if self.gamma_focus < 0.0:
            raise UsageError("focal gamma must be nonnegative")


def focal_loss(x, x_hat: Tensor,
               params: FocalLossParams = FocalLossParams()) -> Tensor:
    """Mean over voxels of -alpha_t (1 - p_t)^gamma log(p_t).

    x is the binary target (array or Tensor, treated as constant); x_hat
    holds occupancy probabilities. Predictions are clamped to
    [PROB_CLAMP, 1 - PROB_CLAMP] with zero gradient outside the clamp.
    """
    target = x.data if isinstance(x, Tensor) else np.asarray(x, float)
    if target.shape != x_hat.data.shape:
        raise UsageError(f"focal loss shape mismatch {target.shape} "
                         f"vs {x_hat.data.shape}")
    on = target == 1.0
    pt = np.where(on, x_hat.data, 1.0 - x_hat.data)
    at = np.where(on, params.alpha, 1.0 - params.alpha)
    inside = (pt > PROB_CLAMP) & (pt < 1.0 - PROB_CLAMP)
    ptc = np.clip(pt, PROB_CLAMP, 1.0 - PROB_CLAMP)
    gmf = params.gamma_focus
    one_m = 1.0 - ptc
    per_voxel = -at * one_m ** gmf * np.log(ptc)
    n = target.size

    def bwd(g):
        dpt = -at * (one_m ** gmf / ptc
                     - gmf * one_m ** (gmf - 1.0) * np.log(ptc))
        dpt = np.where(inside, dpt, 0.0)
        accumulate(x_hat, (float(g) / n) * np.where(on, dpt, -dpt))

    return node(per_voxel.mean(), (x_hat,), bwd)


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Bias-corrected Adam over a parameter list.

    Applies each parameter's projection hook after the update so
    constraint sets (nonnegative couplings, floored offsets) hold at
    every step boundary.
    """

    def __init__(self, params: list[Parameter], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if lr <= 0:
            raise UsageError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise DataError(f"non-finite gradient for {p.name}")
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if p.project is not None:
                p.project(p.data)


# ---------------------------------------------------------------------------
# verification harness

def finite_difference_check(op, inputs: list[Tensor],
                            epsilon: float = 1e-4,
                            max_coords: int = 24,
                            rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference
    gradients of a scalar-valued op over sampled input coordinates.

    relative error = |analytic - numeric| / max(1, |analytic|).
    """
    rng = rng or np.random.default_rng(0)
    out = op(*inputs)
    if out.data.size != 1:
        raise UsageError("finite_difference_check needs a scalar op")
    for t in inputs:
        t.grad = None
    backward(out)
    worst = 0.0
    for t in inputs:
        flat = t.data.reshape(-1)
        n = flat.size
        idx = (np.arange(n) if n <= max_coords
               else rng.choice(n, size=max_coords, replace=False))
        analytic = (np.zeros(n) if t.grad is None
                    else t.grad.reshape(-1))
        for i in idx:
            keep = flat[i]
            flat[i] = keep + epsilon
            hi = op(*inputs).item()
            flat[i] = keep - epsilon
            lo = op(*inputs).item()
            flat[i] = keep
            numeric = (hi - lo) / (2.0 * epsilon)
            err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
            worst = max(worst, err)
    return worst
