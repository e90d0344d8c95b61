"""xUnit activations, (x)dense layers, transition layers and parameter counting.

Parameters live in a flat :class:`LayerParams` store keyed by dotted names,
e.g. ``block0.layer3.xunit.dw.weight``. Initialisers register parameters
under a prefix; forward functions look them up by the same prefix.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from dxnet import ops
from dxnet.autodiff import Variable
from dxnet.ops import BatchNormState, ConvSpec

XUNIT_KERNEL = 9


@dataclass(frozen=True)
class XUnitSpec:
    channels: int
    gate: str = "sigmoid"
    use_pointwise: bool = True
    with_bn: bool = True
    depthwise_kernel: int = XUNIT_KERNEL

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("xUnit needs at least one channel")
        if self.depthwise_kernel != XUNIT_KERNEL:
            raise ValueError("xUnit depthwise kernel is fixed at 9x9")
        if self.gate not in ops.GATES:
            raise ValueError(f"unknown gate {self.gate!r}")


@dataclass(frozen=True)
class DenseLayerSpec:
    in_channels: int
    growth_rate: int
    bottleneck_channels: Optional[int] = None
    with_xunit: bool = True
    with_bn: bool = True
    gate: str = "sigmoid"
    use_pointwise: bool = True
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.bottleneck_channels is None:
            object.__setattr__(self, "bottleneck_channels", 4 * self.growth_rate)
        if self.bottleneck_channels < self.growth_rate:
            raise ValueError("bottleneck_channels must be >= growth_rate")
        if self.in_channels < 1 or self.growth_rate < 1:
            raise ValueError("channel counts must be positive")

    @property
    def out_channels(self) -> int:
        return self.in_channels + self.growth_rate

    @property
    def xunit(self) -> XUnitSpec:
        return XUnitSpec(self.growth_rate, self.gate, self.use_pointwise, self.with_bn)


@dataclass(frozen=True)
class TransitionSpec:
    in_channels: int
    reduction_rate: float = 0.5
    with_pool: bool = True
    with_bn: bool = True
    dropout_rate: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.reduction_rate < 1.0:
            raise ValueError("reduction_rate must lie in (0, 1)")
        if self.out_channels < 1:
            raise ValueError(
                f"transition from {self.in_channels} channels at r={self.reduction_rate} leaves no channels"
            )

    @property
    def out_channels(self) -> int:
        return int(np.floor(self.reduction_rate * self.in_channels))


@dataclass
class LayerParams:
    """Ordered named parameters, BN states and a kind tag per parameter.

    Kinds: ``conv`` (conv filters), ``linear``, ``bias``, ``bn`` (affine).
    """

    tensors: Dict[str, Variable] = field(default_factory=dict)
    kinds: Dict[str, str] = field(default_factory=dict)
    bn: Dict[str, BatchNormState] = field(default_factory=dict)
    dtype: type = np.float32

    def _register(self, name: str, var: Variable, kind: str) -> Variable:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        var.name = name
        var.requires_grad = True
        self.tensors[name] = var
        self.kinds[name] = kind
        return var

    def add_conv(self, name: str, spec: ConvSpec, rng: np.random.Generator) -> None:
        fan_in = spec.weight_shape[1] * spec.kernel_h * spec.kernel_w
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=spec.weight_shape).astype(self.dtype)
        self._register(f"{name}.weight", Variable(w), "conv")
        if spec.has_bias:
            self._register(f"{name}.bias", Variable(np.zeros(spec.out_channels, self.dtype)), "bias")

    def add_linear(self, name: str, in_features: int, out_features: int, rng: np.random.Generator) -> None:
        w = rng.normal(0.0, np.sqrt(1.0 / in_features), size=(out_features, in_features)).astype(self.dtype)
        self._register(f"{name}.weight", Variable(w), "linear")
        self._register(f"{name}.bias", Variable(np.zeros(out_features, self.dtype)), "bias")

    def add_bn(self, name: str, channels: int) -> None:
        state = BatchNormState.create(channels, self.dtype, name)
        self._register(f"{name}.gamma", state.gamma, "bn")
        self._register(f"{name}.beta", state.beta, "bn")
        self.bn[name] = state

    def conv(self, name: str, x: Variable, spec: ConvSpec) -> Variable:
        return ops.conv2d(x, self.tensors[f"{name}.weight"], self.tensors.get(f"{name}.bias"), spec)

    def batch_norm(self, name: str, x: Variable) -> Variable:
        return ops.batch_norm(x, self.bn[name])

    def set_mode(self, mode: str) -> None:
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        for state in self.bn.values():
            state.mode = mode

    def names(self, prefix: str = "") -> list:
        return [n for n in self.tensors if n.startswith(prefix)]


# -- xUnit -------------------------------------------------------------------


def _xunit_convs(spec: XUnitSpec) -> tuple:
    k = spec.channels
    pw = ConvSpec.same(k, k, 1)
    dw = ConvSpec.same(k, k, spec.depthwise_kernel, groups=k, bias=True)
    return pw, dw


def init_xunit(params: LayerParams, prefix: str, spec: XUnitSpec, rng: np.random.Generator) -> None:
    pw, dw = _xunit_convs(spec)
    if spec.use_pointwise:
        params.add_conv(f"{prefix}.pw", pw, rng)
    if spec.with_bn:
        params.add_bn(f"{prefix}.bn1", spec.channels)
    params.add_conv(f"{prefix}.dw", dw, rng)
    if spec.with_bn:
        params.add_bn(f"{prefix}.bn2", spec.channels)


def xunit_gate(x: Variable, params: LayerParams, prefix: str, spec: XUnitSpec) -> Variable:
    """The weight map in [0, 1] that the xUnit multiplies its input by."""
    if x.shape[1] != spec.channels:
        raise ValueError(f"xUnit expects {spec.channels} channels, got {x.shape[1]}")
    pw, dw = _xunit_convs(spec)
    z = x
    if spec.use_pointwise:
        z = params.conv(f"{prefix}.pw", z, pw)
    if spec.with_bn:
        z = params.batch_norm(f"{prefix}.bn1", z)
    z = ops.relu(z)
    z = params.conv(f"{prefix}.dw", z, dw)
    if spec.with_bn:
        z = params.batch_norm(f"{prefix}.bn2", z)
    return ops.gate(z, spec.gate)


def xunit_forward(x: Variable, params: LayerParams, prefix: str, spec: XUnitSpec) -> Variable:
    return ops.hadamard(x, xunit_gate(x, params, prefix, spec))


# -- dense layer ---------------------------------------------------------------


def _dense_convs(spec: DenseLayerSpec) -> tuple:
    bias = not spec.with_bn
    c1 = ConvSpec.same(spec.in_channels, spec.bottleneck_channels, 1, bias=bias)
    c2 = ConvSpec.same(spec.bottleneck_channels, spec.growth_rate, 3, bias=bias)
    return c1, c2


def init_dense_layer(params: LayerParams, prefix: str, spec: DenseLayerSpec, rng: np.random.Generator) -> None:
    c1, c2 = _dense_convs(spec)
    if spec.with_bn:
        params.add_bn(f"{prefix}.bn1", spec.in_channels)
    params.add_conv(f"{prefix}.conv1", c1, rng)
    if spec.with_bn:
        params.add_bn(f"{prefix}.bn2", spec.bottleneck_channels)
    params.add_conv(f"{prefix}.conv2", c2, rng)
    if spec.with_xunit:
        init_xunit(params, f"{prefix}.xunit", spec.xunit, rng)


def _maybe_dropout(x: Variable, rate: float, rng: Optional[np.random.Generator]) -> Variable:
    if rate > 0.0 and rng is not None:
        return ops.dropout(x, rate, rng)
    return x


def dense_new_maps(
    x: Variable,
    params: LayerParams,
    prefix: str,
    spec: DenseLayerSpec,
    rng: Optional[np.random.Generator] = None,
) -> Variable:
    """The k maps a dense layer adds, before any xUnit."""
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"dense layer expects {spec.in_channels} channels, got {x.shape[1]}")
    c1, c2 = _dense_convs(spec)
    z = params.batch_norm(f"{prefix}.bn1", x) if spec.with_bn else x
    z = ops.relu(z)
    z = _maybe_dropout(params.conv(f"{prefix}.conv1", z, c1), spec.dropout_rate, rng)
    if spec.with_bn:
        z = params.batch_norm(f"{prefix}.bn2", z)
    z = ops.relu(z)
    return _maybe_dropout(params.conv(f"{prefix}.conv2", z, c2), spec.dropout_rate, rng)


def dense_layer_forward(
    x: Variable,
    params: LayerParams,
    prefix: str,
    spec: DenseLayerSpec,
    rng: Optional[np.random.Generator] = None,
) -> Variable:
    new = dense_new_maps(x, params, prefix, spec, rng)
    if spec.with_xunit:
        new = xunit_forward(new, params, f"{prefix}.xunit", spec.xunit)
    return ops.concat_channels([x, new])


# -- transition ----------------------------------------------------------------


def _transition_conv(spec: TransitionSpec) -> ConvSpec:
    return ConvSpec.same(spec.in_channels, spec.out_channels, 1, bias=not spec.with_bn)


def init_transition(params: LayerParams, prefix: str, spec: TransitionSpec, rng: np.random.Generator) -> None:
    if spec.with_bn:
        params.add_bn(f"{prefix}.bn", spec.in_channels)
    params.add_conv(f"{prefix}.conv", _transition_conv(spec), rng)


def transition_forward(
    x: Variable,
    params: LayerParams,
    prefix: str,
    spec: TransitionSpec,
    rng: Optional[np.random.Generator] = None,
) -> Variable:
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"transition expects {spec.in_channels} channels, got {x.shape[1]}")
    z = params.batch_norm(f"{prefix}.bn", x) if spec.with_bn else x
    z = _maybe_dropout(params.conv(f"{prefix}.conv", z, _transition_conv(spec)), spec.dropout_rate, rng)
    if spec.with_pool:
        z = ops.pool(z, "avg2x2")
    return z


# -- parameter accounting --------------------------------------------------------


def _conv_count(spec: ConvSpec) -> int:
    return int(np.prod(spec.weight_shape)) + (spec.out_channels if spec.has_bias else 0)


def xunit_param_count(spec: XUnitSpec, mode: str = "full") -> int:
    k = spec.channels
    if mode == "paper_formula":
        return k * spec.depthwise_kernel**2 + k
    if mode != "full":
        raise ValueError(f"unknown count mode {mode!r}")
    pw, dw = _xunit_convs(spec)
    total = _conv_count(dw)
    if spec.use_pointwise:
        total += _conv_count(pw)
    if spec.with_bn:
        total += 4 * k
    return total


def dense_layer_param_count(spec: DenseLayerSpec, mode: str = "full") -> int:
    c1, c2 = _dense_convs(spec)
    total = _conv_count(c1) + _conv_count(c2)
    if spec.with_bn:
        total += 2 * spec.in_channels + 2 * spec.bottleneck_channels
    if spec.with_xunit:
        total += xunit_param_count(spec.xunit, mode)
    return total


def transition_param_count(spec: TransitionSpec, mode: str = "full") -> int:
    return _conv_count(_transition_conv(spec)) + (2 * spec.in_channels if spec.with_bn else 0)
