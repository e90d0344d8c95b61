"""Whole networks for classification, denoising and super-resolution."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields, replace
from typing import List, Optional, Tuple

import numpy as np

from dxnet import ops
from dxnet.autodiff import Variable, as_variable, make_result, no_grad
from dxnet.blocks import (
    DenseLayerSpec,
    LayerParams,
    TransitionSpec,
    XUnitSpec,
    _conv_count,
    dense_layer_forward,
    dense_layer_param_count,
    init_dense_layer,
    init_transition,
    init_xunit,
    transition_forward,
    transition_param_count,
    xunit_forward,
    xunit_param_count,
)
from dxnet.ops import ConvSpec

TASKS = ("classification", "denoising", "super_resolution")
STEMS = ("conv3x3", "imagenet")


class ConfigError(ValueError):
    """Invalid or inconsistent network configuration."""


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parse_blocks(text: str) -> Tuple[int, ...]:
    parts = [p for p in text.replace(",", "-").replace(" ", "").split("-") if p]
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"bad block configuration {text!r}") from None


@dataclass(frozen=True)
class NetConfig:
    task: str = "classification"
    blocks: Tuple[int, ...] = (12, 12, 12)
    growth: int = 12
    reduction: float = 0.5
    initial_channels: Optional[int] = None
    xunit: bool = True
    gate: str = "sigmoid"
    pointwise: bool = True
    bn: Optional[bool] = None
    pool: Optional[bool] = None
    dropout: float = 0.0
    num_classes: int = 10
    channels: Optional[int] = None
    scale: int = 4
    bottleneck: int = 4
    stem: str = "conv3x3"

    def __post_init__(self):
        if self.task == "sr":
            object.__setattr__(self, "task", "super_resolution")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        defaults = {
            "classification": dict(channels=3, bn=True, pool=True),
            "denoising": dict(channels=1, bn=True, pool=False),
            "super_resolution": dict(channels=3, bn=False, pool=False),
        }[self.task]
        for key, value in defaults.items():
            if getattr(self, key) is None:
                object.__setattr__(self, key, value)
        if self.initial_channels is None:
            object.__setattr__(self, "initial_channels", 2 * self.growth)
        self.validate()

    def validate(self) -> None:
        if not self.blocks or min(self.blocks) < 1:
            raise ConfigError("block configuration must be a nonempty list of positive counts")
        if self.growth < 1:
            raise ConfigError("growth rate must be positive")
        if not 0.0 < self.reduction < 1.0:
            raise ConfigError("reduction rate must lie in (0, 1)")
        if self.initial_channels < self.growth:
            raise ConfigError("initial_channels must be >= growth rate")
        if self.gate not in ops.GATES:
            raise ConfigError(f"unknown gate {self.gate!r}")
        if self.stem not in STEMS:
            raise ConfigError(f"unknown stem {self.stem!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout rate must lie in [0, 1)")
        if self.bottleneck < 1:
            raise ConfigError("bottleneck factor must be >= 1")
        if self.task == "classification" and self.num_classes < 2:
            raise ConfigError("classification needs at least two classes")
        if self.task != "classification":
            if self.pool:
                raise ConfigError(f"{self.task} networks must be pool-free")
            if self.stem != "conv3x3":
                raise ConfigError("restoration networks use the conv3x3 stem")
        if self.task == "super_resolution":
            if self.scale not in (2, 4):
                raise ConfigError("super-resolution scale must be 2 or 4")
            if self.bn:
                raise ConfigError("super-resolution networks are batch-norm free")

    # -- text form --------------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "blocks":
                v = "-".join(str(b) for b in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, values: dict) -> "NetConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown network config key {key!r}")
            if not isinstance(raw, str):
                kwargs[key] = raw
                continue
            raw = raw.strip()
            if key == "blocks":
                kwargs[key] = _parse_blocks(raw)
            elif key in ("xunit", "pointwise", "bn", "pool"):
                kwargs[key] = _parse_bool(raw)
            elif key in ("growth", "initial_channels", "num_classes", "channels", "scale", "bottleneck"):
                try:
                    kwargs[key] = int(raw)
                except ValueError:
                    raise ConfigError(f"{key} must be an integer, got {raw!r}") from None
            elif key in ("reduction", "dropout"):
                try:
                    kwargs[key] = float(raw)
                except ValueError:
                    raise ConfigError(f"{key} must be a number, got {raw!r}") from None
            else:
                kwargs[key] = raw
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "NetConfig":
        return cls.from_dict(parse_kv(text))

    def with_overrides(self, **changes) -> "NetConfig":
        return replace(self, **changes)


def parse_kv(text: str) -> dict:
    """Flat ``key = value`` text; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


# -- topology ------------------------------------------------------------------


@dataclass(frozen=True)
class LayerEntry:
    name: str
    kind: str  # conv | xunit | dense | transition | bn | linear | upsample
    spec: object = None


def _stem_conv(cfg: NetConfig) -> ConvSpec:
    if cfg.stem == "imagenet":
        return ConvSpec(cfg.channels, cfg.initial_channels, 7, 7, 2, 3, 1, not cfg.bn)
    return ConvSpec.same(cfg.channels, cfg.initial_channels, 3, bias=not cfg.bn)


def topology(cfg: NetConfig) -> List[LayerEntry]:
    """Ordered layer list implied by ``cfg``."""
    k = cfg.growth
    ents = [LayerEntry("stem.conv", "conv", _stem_conv(cfg))]
    c = cfg.initial_channels
    if cfg.stem == "imagenet":
        ents.append(LayerEntry("stem.bn", "bn", c))
        ents.append(LayerEntry("stem.maxpool", "maxpool"))
    if cfg.xunit:
        ents.append(LayerEntry("stem.xunit", "xunit", XUnitSpec(c, cfg.gate, cfg.pointwise, cfg.bn)))
    for b, n in enumerate(cfg.blocks):
        for i in range(n):
            spec = DenseLayerSpec(c, k, cfg.bottleneck * k, cfg.xunit, cfg.bn, cfg.gate, cfg.pointwise, cfg.dropout)
            ents.append(LayerEntry(f"block{b}.layer{i}", "dense", spec))
            c = spec.out_channels
        if b < len(cfg.blocks) - 1:
            spec = TransitionSpec(c, cfg.reduction, cfg.pool, cfg.bn, cfg.dropout)
            ents.append(LayerEntry(f"trans{b}", "transition", spec))
            c = spec.out_channels
    if cfg.bn:
        ents.append(LayerEntry("head.bn", "bn", c))
    if cfg.task == "classification":
        ents.append(LayerEntry("head.linear", "linear", (c, cfg.num_classes)))
    elif cfg.task == "denoising":
        ents.append(LayerEntry("head.conv", "conv", ConvSpec.same(c, cfg.channels, 3, bias=True)))
    else:
        # tail width is the growth rate; each stage maps to 4k maps then shuffles x2
        for s in range(int(np.log2(cfg.scale))):
            ents.append(LayerEntry(f"tail.up{s}", "upsample", ConvSpec.same(c, 4 * k, 3, bias=True)))
            c = k
        ents.append(LayerEntry("tail.conv", "conv", ConvSpec.same(c, cfg.channels, 3, bias=True)))
    return ents


def _max_pool3x3s2(x: Variable) -> Variable:
    x = as_variable(x)
    n, c, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    ho, wo = (h - 1) // 2 + 1, (w - 1) // 2 + 1
    wins = np.stack(
        [xp[:, :, i : i + 2 * (ho - 1) + 1 : 2, j : j + 2 * (wo - 1) + 1 : 2] for i in range(3) for j in range(3)]
    )
    arg = wins.argmax(axis=0)
    out = np.take_along_axis(wins, arg[None], axis=0)[0]

    def backward_fn(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for idx in range(9):
            i, j = divmod(idx, 3)
            gxp[:, :, i : i + 2 * (ho - 1) + 1 : 2, j : j + 2 * (wo - 1) + 1 : 2] += g * (arg == idx)
        return (gxp[:, :, 1:-1, 1:-1],)


    return make_result(out, (x,), backward_fn, "max_pool")


# -- model ---------------------------------------------------------------------


@dataclass
class Model:
    config: NetConfig
    params: LayerParams
    layers: List[LayerEntry]
    mode: str = "train"
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def set_mode(self, mode: str) -> "Model":
        self.params.set_mode(mode)
        self.mode = mode
        return self

    def train(self) -> "Model":
        return self.set_mode("train")

    def eval(self) -> "Model":
        return self.set_mode("eval")

    @property
    def tensors(self) -> dict:
        return self.params.tensors

    def named_parameters(self):
        return list(self.params.tensors.items())

    def num_parameters(self) -> int:
        return int(sum(v.data.size for v in self.params.tensors.values()))

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Model":
        """Cast every parameter and BN statistic in place."""
        for v in self.params.tensors.values():
            v.data = v.data.astype(dtype)
        for st in self.params.bn.values():
            st.running_mean = st.running_mean.astype(dtype)
            st.running_var = st.running_var.astype(dtype)
        self.params.dtype = dtype
        return self

    def features(self, x) -> Variable:
        """Trunk output before the task head (pre-pool maps for classifiers)."""
        x = as_variable(x)
        cfg = self.config
        if x.data.ndim != 4 or x.shape[1] != cfg.channels:
            raise ValueError(f"expected input (N, {cfg.channels}, H, W), got {x.shape}")
        if self.mode not in ("train", "eval"):
            raise ValueError("model mode not set")
        p = self.params
        drop_rng = self.rng if self.mode == "train" else None
        z = x
        for ent in self.layers:
            if ent.kind == "conv" and ent.name == "stem.conv":
                z = p.conv(ent.name, z, ent.spec)
            elif ent.kind == "maxpool":
                z = _max_pool3x3s2(ops.relu(z))
            elif ent.name == "stem.bn":
                z = p.batch_norm(ent.name, z)
            elif ent.kind == "xunit":
                z = xunit_forward(z, p, ent.name, ent.spec)
            elif ent.kind == "dense":
                z = dense_layer_forward(z, p, ent.name, ent.spec, drop_rng)
            elif ent.kind == "transition":
                z = transition_forward(z, p, ent.name, ent.spec, drop_rng)
            elif ent.name == "head.bn":
                z = p.batch_norm(ent.name, z)
        return ops.relu(z)

    def forward(self, x) -> Variable:
        x = as_variable(x)
        cfg = self.config
        f = self.features(x)
        p = self.params
        if cfg.task == "classification":
            pooled = ops.reshape(ops.pool(f, "global_avg"), (f.shape[0], f.shape[1]))
            return ops.linear(pooled, p.tensors["head.linear.weight"], p.tensors["head.linear.bias"])
        if cfg.task == "denoising":
            head = self.layers[-1]
            return p.conv(head.name, f, head.spec)
        z = f
        for ent in self.layers:
            if ent.kind == "upsample":
                z = ops.pixel_shuffle(p.conv(ent.name, z, ent.spec), 2)
        tail = self.layers[-1]
        z = p.conv(tail.name, z, tail.spec)
        from dxnet.data import bicubic_resize

        skip = bicubic_resize(x.data, cfg.scale).astype(z.dtype)
        return ops.add(z, Variable(skip))

    __call__ = forward


def build_model(config: NetConfig, rng=None, dtype=np.float32) -> Model:
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(0 if rng is None else int(rng))
    params = LayerParams(dtype=dtype)
    layers = topology(config)
    for ent in layers:
        if ent.kind in ("conv", "upsample"):
            params.add_conv(ent.name, ent.spec, rng)
        elif ent.kind == "bn":
            params.add_bn(ent.name, ent.spec)
        elif ent.kind == "xunit":
            init_xunit(params, ent.name, ent.spec, rng)
        elif ent.kind == "dense":
            init_dense_layer(params, ent.name, ent.spec, rng)
        elif ent.kind == "transition":
            init_transition(params, ent.name, ent.spec, rng)
        elif ent.kind == "linear":
            params.add_linear(ent.name, *ent.spec, rng)
    drop_seed = int(rng.integers(2**63 - 1))
    return Model(config, params, layers, "train", np.random.default_rng(drop_seed))


def forward(model: Model, x) -> Variable:
    return model.forward(x)


def denoise(model: Model, y: np.ndarray) -> np.ndarray:
    """Residual denoising: subtract the predicted noise from ``y``."""
    if model.config.task != "denoising":
        raise ValueError("denoise() needs a denoising model")
    with no_grad():
        noise = model.forward(np.asarray(y, dtype=model.params.dtype)).data
    return y - noise


def predict(model: Model, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Batched no-grad forward, concatenated along the batch axis."""
    outs = []
    with no_grad():
        for i in range(0, len(x), batch_size):
            outs.append(model.forward(np.asarray(x[i : i + batch_size], dtype=model.params.dtype)).data)
    return np.concatenate(outs, axis=0)


# -- counting ------------------------------------------------------------------


def count_table(config: NetConfig, mode: str = "full") -> List[Tuple[str, int]]:
    """Per-group parameter counts derived from the topology, not from a built model."""
    rows: dict = {}

    def bump(group, n):
        rows[group] = rows.get(group, 0) + n

    for ent in topology(config):
        group = ent.name.split(".")[0]
        if ent.kind in ("conv", "upsample"):
            bump(group, _conv_count(ent.spec))
        elif ent.kind == "bn":
            bump(group, 2 * ent.spec)
        elif ent.kind == "xunit":
            bump(group, xunit_param_count(ent.spec, mode))
        elif ent.kind == "dense":
            bump(group, dense_layer_param_count(ent.spec, mode))
        elif ent.kind == "transition":
            bump(group, transition_param_count(ent.spec, mode))
        elif ent.kind == "linear":
            cin, cout = ent.spec
            bump(group, cin * cout + cout)
    return list(rows.items())


def param_count(spec, mode: str = "full") -> int:
    """Learnable scalars of an xUnit, dense layer, transition or whole network.

    ``paper_formula`` counts each xUnit as 82 per channel; ``full`` counts
    every stored scalar of the implemented layers.
    """
    if mode not in ("full", "paper_formula"):
        raise ValueError(f"unknown count mode {mode!r}")
    if isinstance(spec, XUnitSpec):
        return xunit_param_count(spec, mode)
    if isinstance(spec, DenseLayerSpec):
        return dense_layer_param_count(spec, mode)
    if isinstance(spec, TransitionSpec):
        return transition_param_count(spec, mode)
    if isinstance(spec, NetConfig):
        return sum(n for _, n in count_table(spec, mode))
    raise TypeError(f"cannot count parameters of {type(spec).__name__}")


def xunit_param_names(model: Model) -> set:
    return {n for n in model.params.tensors if ".xunit." in n or n.startswith("stem.xunit")}
