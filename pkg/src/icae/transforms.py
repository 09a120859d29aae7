"""Analysis/synthesis transform stacks with GDN nonlinearities.

Two architecture variants share identical total down/up-sampling (x16 for
the main pair, a further x4 for the hyper pair):

* ``baseline``  -- four 5x5 convolutions per main transform, all stride 2.
* ``deepened``  -- eight 3x3 convolutions per main transform, alternating
  stride 1 / stride 2, so exactly four stride-2 stages remain.

Stride-1 layers use same-size zero padding (k//2); stride-2 layers pad so
the output extent is exactly ceil(input/2), and their transposed mirrors
use output_pad=1 to restore exact doubling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    conv2d,
    conv_transpose2d,
    div,
    mul,
    relu,
    reshape,
    softplus,
    sqrt,
    square,
    tabs,
)

VARIANTS = ("baseline", "deepened")
KINDS = ("analysis", "synthesis", "hyper_analysis", "hyper_synthesis")

BETA_FLOOR = 1e-6
SIGMA_EPS = 1e-6


@dataclass
class ArchConfig:
    """Architecture descriptor: variant plus channel widths N and M."""

    variant: str = "baseline"
    n_channels: int = 192
    m_channels: int = 192
    deepen_hyper: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.n_channels < 1 or self.m_channels < 1:
            raise ValueError("channel counts must be positive")


class GdnParams:
    """Divisive-normalization parameters for one channel width.

    beta and gamma are stored as squared free parameters (plus a beta
    floor), so any optimizer step keeps beta >= BETA_FLOOR and gamma >= 0
    without projection.
    """

    def __init__(self, channels: int, dtype=np.float32):
        self.channels = channels
        self.beta_raw = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        gamma0 = (np.sqrt(0.1) * np.eye(channels)).astype(dtype)
        self.gamma_raw = Tensor(gamma0, requires_grad=True)

    @classmethod
    def from_values(cls, beta, gamma):
        beta = np.asarray(beta, dtype=np.float32)
        gamma = np.asarray(gamma, dtype=np.float32)
        p = cls(beta.shape[0])
        p.beta_raw.data = np.sqrt(np.maximum(beta - BETA_FLOOR, 0.0)).astype(np.float32)
        p.gamma_raw.data = np.sqrt(np.maximum(gamma, 0.0)).astype(np.float32)
        return p

    def beta(self) -> Tensor:
        return square(self.beta_raw) + BETA_FLOOR

    def gamma_kernel(self) -> Tensor:
        c = self.channels
        return reshape(square(self.gamma_raw), (c, c, 1, 1))

    def parameters(self):
        return [self.beta_raw, self.gamma_raw]


def gdn(x: Tensor, p: GdnParams) -> Tensor:
    """y_c = x_c / sqrt(beta_c + sum_k gamma_ck * x_k^2), per pixel."""
    beta = p.beta()
    if not np.all(beta.data > 0):
        raise ValueError("GDN beta must be strictly positive after reparameterization")
    norm = conv2d(square(x), p.gamma_kernel(), beta, stride=1, pad=0)
    return div(x, sqrt(norm))


def igdn(x: Tensor, p: GdnParams) -> Tensor:
    """Multiplicative counterpart of gdn: x_c * sqrt(beta_c + sum gamma x^2)."""
    beta = p.beta()
    if not np.all(beta.data > 0):
        raise ValueError("IGDN beta must be strictly positive after reparameterization")
    norm = conv2d(square(x), p.gamma_kernel(), beta, stride=1, pad=0)
    return mul(x, sqrt(norm))


@dataclass
class ConvLayer:
    kind: str  # "conv" or "conv_transpose"
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int
    activation: str  # "gdn" | "igdn" | "relu" | "softplus" | "none"
    pad: int
    output_pad: int
    kernel: Tensor
    bias: Tensor
    gdn_params: GdnParams | None = None

    def parameters(self):
        params = [self.kernel, self.bias]
        if self.gdn_params is not None:
            params.extend(self.gdn_params.parameters())
        return params


@dataclass
class TransformStack:
    """An ordered stack of parameterized layers realizing one transform."""

    name: str
    layers: list[ConvLayer] = field(default_factory=list)
    abs_input: bool = False

    def parameters(self):
        params = []
        for layer in self.layers:
            params.extend(layer.parameters())
        return params

    def conv_param_count(self) -> int:
        """Number of convolution weights + biases (GDN parameters excluded)."""
        return sum(layer.kernel.size + layer.bias.size for layer in self.layers)

    def downsample_factor(self) -> int:
        f = 1
        for layer in self.layers:
            if layer.kind == "conv":
                f *= layer.stride
        return f

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
        return self


def _plan(cfg: ArchConfig, which: str):
    """Layer plan as (kind, in, out, k, stride, activation) tuples."""
    n, m = cfg.n_channels, cfg.m_channels
    deep = cfg.variant == "deepened"
    if which == "analysis":
        if not deep:
            return [
                ("conv", 3, n, 5, 2, "gdn"),
                ("conv", n, n, 5, 2, "gdn"),
                ("conv", n, n, 5, 2, "gdn"),
                ("conv", n, m, 5, 2, "none"),
            ]
        plan = []
        c_in = 3
        for stage in range(4):
            c_out = m if stage == 3 else n
            plan.append(("conv", c_in, n, 3, 1, "gdn"))
            plan.append(("conv", n, c_out, 3, 2, "gdn" if stage < 3 else "none"))
            c_in = c_out
        return plan
    if which == "synthesis":
        if not deep:
            return [
                ("conv_transpose", m, n, 5, 2, "igdn"),
                ("conv_transpose", n, n, 5, 2, "igdn"),
                ("conv_transpose", n, n, 5, 2, "igdn"),
                ("conv_transpose", n, 3, 5, 2, "none"),
            ]
        plan = []
        c_in = m
        for stage in range(4):
            c_out = 3 if stage == 3 else n
            plan.append(("conv", c_in, n, 3, 1, "igdn"))
            plan.append(("conv_transpose", n, c_out, 3, 2, "igdn" if stage < 3 else "none"))
            c_in = c_out
        return plan
    if which == "hyper_analysis":
        if not cfg.deepen_hyper:
            return [
                ("conv", m, n, 3, 1, "relu"),
                ("conv", n, n, 5, 2, "relu"),
                ("conv", n, n, 5, 2, "none"),
            ]
        return [
            ("conv", m, n, 3, 1, "relu"),
            ("conv", n, n, 3, 1, "relu"),
            ("conv", n, n, 3, 2, "relu"),
            ("conv", n, n, 3, 1, "relu"),
            ("conv", n, n, 3, 2, "none"),
        ]
    if which == "hyper_synthesis":
        if not cfg.deepen_hyper:
            return [
                ("conv_transpose", n, n, 5, 2, "relu"),
                ("conv_transpose", n, n, 5, 2, "relu"),
                ("conv", n, m, 3, 1, "softplus"),
            ]
        return [
            ("conv", n, n, 3, 1, "relu"),
            ("conv_transpose", n, n, 3, 2, "relu"),
            ("conv", n, n, 3, 1, "relu"),
            ("conv_transpose", n, n, 3, 2, "relu"),
            ("conv", n, m, 3, 1, "softplus"),
        ]
    raise ValueError(f"unknown transform kind {which!r}; expected one of {KINDS}")


def build_transform(cfg: ArchConfig, which: str, seed: int = 0) -> TransformStack:
    """Build one of the four transforms with seeded fan-in initialization."""
    plan = _plan(cfg, which)
    rng = np.random.default_rng(seed)
    stack = TransformStack(name=which, abs_input=(which == "hyper_analysis"))
    for kind, c_in, c_out, k, stride, act in plan:
        fan_in = c_in * k * k
        std = float(np.sqrt(1.0 / fan_in))
        if kind == "conv":
            kshape = (c_out, c_in, k, k)
        else:
            kshape = (c_in, c_out, k, k)
        kernel = Tensor(rng.normal(0.0, std, size=kshape).astype(np.float32), requires_grad=True)
        bias = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)
        gdn_params = GdnParams(c_out) if act in ("gdn", "igdn") else None
        stack.layers.append(
            ConvLayer(
                kind=kind,
                in_channels=c_in,
                out_channels=c_out,
                kernel_size=k,
                stride=stride,
                activation=act,
                pad=k // 2,
                output_pad=stride - 1 if kind == "conv_transpose" and stride > 1 else 0,
                kernel=kernel,
                bias=bias,
                gdn_params=gdn_params,
            )
        )
    return stack


def forward(stack: TransformStack, x: Tensor) -> Tensor:
    """Apply the stack's layers in order."""
    if x.data.ndim != 4:
        raise ValueError(f"{stack.name}: expected a 4-D (N, C, H, W) input, got shape {x.data.shape}")
    c_in = stack.layers[0].in_channels
    if x.data.shape[1] != c_in:
        raise ValueError(
            f"{stack.name}: input has {x.data.shape[1]} channels but the first layer expects {c_in}"
        )
    down = stack.downsample_factor()
    if down > 1:
        h, w = x.data.shape[2], x.data.shape[3]
        if h % down or w % down:
            raise ValueError(
                f"{stack.name}: input extents {h}x{w} are not divisible by {down}; "
                f"pad the input first (the CLI pads to multiples of 64 by edge replication)"
            )
    out = tabs(x) if stack.abs_input else x
    for layer in stack.layers:
        if layer.kind == "conv":
            out = conv2d(out, layer.kernel, layer.bias, stride=layer.stride, pad=layer.pad)
        else:
            out = conv_transpose2d(
                out,
                layer.kernel,
                layer.bias,
                stride=layer.stride,
                pad=layer.pad,
                output_pad=layer.output_pad,
            )
        if layer.activation == "gdn":
            out = gdn(out, layer.gdn_params)
        elif layer.activation == "igdn":
            out = igdn(out, layer.gdn_params)
        elif layer.activation == "relu":
            out = relu(out)
        elif layer.activation == "softplus":
            out = softplus(out) + SIGMA_EPS
    return out
