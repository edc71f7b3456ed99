"""Plantable 7-layer CNNs (five 3x3 convs, two fully connected layers).

Two topologies are supported, differing only in where max pooling sits:

    cifar: conv1 pool conv2 pool conv3 conv4 conv5 pool fc1 fc2   (3x32x32)
    stl:   conv1 pool conv2 pool conv3 pool conv4 conv5 pool fc1 fc2   (3x96x96)

Every conv is followed by ReLU, as is fc1. Parameters live in an ordered
dict keyed ``conv1.weight``, ``conv1.bias``, ..., ``fc2.bias``; each has a
boolean frozen mask of the same shape.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .gradcore import Tensor, conv2d, flatten, linear, maxpool2x2, relu

__all__ = [
    "ArchitectureSpec",
    "ChannelConfig",
    "PlantableNetwork",
    "build_network",
    "count_params",
    "expected_shapes",
    "forward",
    "param_count",
    "plant_channels",
    "planting_delta",
]

N_CONV = 5
KERNEL = 3
INIT_MODES = ("zero", "random")


@dataclass(frozen=True)
class ArchitectureSpec:
    variant: str
    input_shape: tuple[int, int, int]
    num_classes: int
    pool_after: tuple[int, ...]
    fc_hidden: int = 128

    def __post_init__(self):
        c, h, w = self.input_shape
        scale = 2 ** len(self.pool_after)
        if h % scale or w % scale:
            raise ValueError(f"input {h}x{w} is not divisible by the total pooling factor {scale}")
        if any(not 1 <= l <= N_CONV for l in self.pool_after):
            raise ValueError(f"pool positions must be conv indices 1..{N_CONV}")
        if self.num_classes < 1 or self.fc_hidden < 1:
            raise ValueError("fc widths must be positive")

    @classmethod
    def cifar(cls, num_classes: int = 10, input_hw: tuple[int, int] = (32, 32)) -> "ArchitectureSpec":
        return cls("cifar", (3, *input_hw), num_classes, (1, 2, 5))

    @classmethod
    def stl(cls, num_classes: int = 10, input_hw: tuple[int, int] = (96, 96)) -> "ArchitectureSpec":
        return cls("stl", (3, *input_hw), num_classes, (1, 2, 3, 5))

    @property
    def final_spatial(self) -> tuple[int, int]:
        scale = 2 ** len(self.pool_after)
        return self.input_shape[1] // scale, self.input_shape[2] // scale

    @property
    def final_area(self) -> int:
        fh, fw = self.final_spatial
        return fh * fw

    @property
    def fc_widths(self) -> tuple[int, int]:
        return (self.fc_hidden, self.num_classes)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "pool_after": list(self.pool_after),
            "fc_hidden": self.fc_hidden,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(d["variant"], tuple(d["input_shape"]), int(d["num_classes"]),
                   tuple(d["pool_after"]), int(d.get("fc_hidden", 128)))


@dataclass(frozen=True)
class ChannelConfig:
    conv_channels: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if len(self.conv_channels) != N_CONV:
            raise ValueError(f"expected {N_CONV} conv widths, got {len(self.conv_channels)}")
        if min(self.conv_channels) < 1:
            raise ValueError("all channel counts must be >= 1")

    @classmethod
    def uniform(cls, width: int) -> "ChannelConfig":
        return cls((width,) * N_CONV)

    def __iter__(self):
        return iter(self.conv_channels)

    def __getitem__(self, i):
        return self.conv_channels[i]


def _conv_shapes(spec: ArchitectureSpec, channels: ChannelConfig) -> list[tuple[int, int, int, int]]:
    ins = [spec.input_shape[0], *channels.conv_channels[:-1]]
    return [(co, ci, KERNEL, KERNEL) for co, ci in zip(channels.conv_channels, ins)]


def _fc_shapes(spec: ArchitectureSpec, channels: ChannelConfig) -> list[tuple[int, int]]:
    fc1_in = channels.conv_channels[-1] * spec.final_area
    return [(spec.fc_hidden, fc1_in), (spec.num_classes, spec.fc_hidden)]


def expected_shapes(spec: ArchitectureSpec, channels: ChannelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for i, shape in enumerate(_conv_shapes(spec, channels), start=1):
        shapes[f"conv{i}.weight"] = shape
        shapes[f"conv{i}.bias"] = (shape[0],)
    for i, shape in enumerate(_fc_shapes(spec, channels), start=1):
        shapes[f"fc{i}.weight"] = shape
        shapes[f"fc{i}.bias"] = (shape[0],)
    return shapes


def count_params(spec: ArchitectureSpec, channels: ChannelConfig) -> int:
    """Closed form: sum over layers of C_out*C_in*K*K + C_out (K = 1 for fc)."""
    total = 0
    c_prev = spec.input_shape[0]
    for c in channels.conv_channels:
        total += c * c_prev * KERNEL * KERNEL + c
        c_prev = c
    fc_in = c_prev * spec.final_area
    for width in spec.fc_widths:
        total += width * fc_in + width
        fc_in = width
    return total


def planting_delta(spec: ArchitectureSpec, channels: ChannelConfig, group: Iterable[int], n: int) -> int:
    """Parameter increase caused by planting ``n`` channels on each layer in ``group``."""
    grown = [c + (n if i + 1 in set(group) else 0) for i, c in enumerate(channels.conv_channels)]
    return count_params(spec, ChannelConfig(grown)) - count_params(spec, channels)


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class PlantableNetwork:
    """Weights, frozen masks and the channel growth history of one network.

    ``blocks[l-1]`` lists the sizes of the channel groups conv ``l`` was built
    from, in the order they were added (``(8,)`` fresh, ``(8, 4)`` after one
    plant). Forward passes compute each block with its own GEMM so that a
    plant never perturbs the arithmetic of pre-existing channels.
    """

    spec: ArchitectureSpec
    channels: ChannelConfig
    params: dict[str, Tensor]
    frozen: dict[str, np.ndarray] = field(default_factory=dict)
    blocks: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self):
        if not self.blocks:
            self.blocks = tuple((c,) for c in self.channels.conv_channels)
        self.blocks = tuple(tuple(int(b) for b in bl) for bl in self.blocks)
        if tuple(sum(bl) for bl in self.blocks) != self.channels.conv_channels:
            raise ValueError(f"channel blocks {self.blocks} do not sum to {self.channels.conv_channels}")
        for name, p in self.params.items():
            mask = self.frozen.get(name)
            if mask is None:
                self.frozen[name] = np.zeros(p.shape, dtype=bool)
            elif mask.shape != p.shape:
                raise ValueError(f"frozen mask for {name} has shape {mask.shape}, parameter {p.shape}")

    def conv(self, layer: int) -> tuple[Tensor, Tensor]:
        return self.params[f"conv{layer}.weight"], self.params[f"conv{layer}.bias"]

    def fc(self, layer: int) -> tuple[Tensor, Tensor]:
        return self.params[f"fc{layer}.weight"], self.params[f"fc{layer}.bias"]

    def copy(self) -> "PlantableNetwork":
        params = {k: Tensor(p.value.copy(), requires_grad=p.requires_grad) for k, p in self.params.items()}
        frozen = {k: m.copy() for k, m in self.frozen.items()}
        return PlantableNetwork(self.spec, self.channels, params, frozen, self.blocks)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def trainable_mask(self, name: str) -> np.ndarray:
        return ~self.frozen[name]

    def n_frozen(self) -> int:
        return int(sum(m.sum() for m in self.frozen.values()))

    def n_trainable(self) -> int:
        return int(sum((~m).sum() for m in self.frozen.values()))

    def same_as(self, other: "PlantableNetwork") -> bool:
        """Bitwise equality of architecture, values and frozen masks."""
        if self.spec != other.spec or self.channels != other.channels or self.blocks != other.blocks:
            return False
        if list(self.params) != list(other.params):
            return False
        return all(
            np.array_equal(self.params[k].value, other.params[k].value)
            and np.array_equal(self.frozen[k], other.frozen[k])
            for k in self.params
        )


def build_network(spec: ArchitectureSpec, channels: ChannelConfig, seed: int) -> PlantableNetwork:
    """Fresh network: He-uniform weights from ``seed``, zero biases, nothing frozen."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for i, shape in enumerate(_conv_shapes(spec, channels), start=1):
        params[f"conv{i}.weight"] = Tensor(_he_uniform(rng, shape, shape[1] * KERNEL * KERNEL), requires_grad=True)
        params[f"conv{i}.bias"] = Tensor(np.zeros(shape[0]), requires_grad=True)
    for i, shape in enumerate(_fc_shapes(spec, channels), start=1):
        params[f"fc{i}.weight"] = Tensor(_he_uniform(rng, shape, shape[1]), requires_grad=True)
        params[f"fc{i}.bias"] = Tensor(np.zeros(shape[0]), requires_grad=True)
    return PlantableNetwork(spec, channels, params)


def param_count(net: PlantableNetwork) -> int:
    return count_params(net.spec, net.channels)


def forward(net: PlantableNetwork, batch) -> Tensor:
    """Logits of shape (batch, num_classes)."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.value.ndim != 4 or x.shape[1:] != net.spec.input_shape:
        raise ValueError(f"batch shape {x.shape} does not match network input (N, {net.spec.input_shape})")
    pools = set(net.spec.pool_after)
    in_blocks: tuple[int, ...] = (net.spec.input_shape[0],)
    for layer in range(1, N_CONV + 1):
        out_blocks = net.blocks[layer - 1]
        x = relu(conv2d(x, *net.conv(layer), in_blocks=in_blocks, out_blocks=out_blocks))
        in_blocks = out_blocks
        if layer in pools:
            x = maxpool2x2(x)
    area = net.spec.final_area
    x = relu(linear(flatten(x), *net.fc(1), in_blocks=[b * area for b in in_blocks]))
    return linear(x, *net.fc(2))


def plant_channels(
    net: PlantableNetwork,
    group: Iterable[int],
    n: int,
    seed: int,
    init: str = "zero",
) -> PlantableNetwork:
    """Return a copy of ``net`` with ``n`` extra output channels on each conv in ``group``.

    All values that exist in ``net`` are copied unchanged and frozen. The new
    slices are trainable:

    * new output filters (and biases) of each planted layer, He-uniform
      (biases zero);
    * new input slices of the successor layer (the next conv, or fc1 for
      conv5, where each channel owns ``final_area`` consecutive inputs).

    With ``init="zero"`` successor slices start at zero so the returned
    network computes exactly the same function as ``net``. ``init="random"``
    He-initializes them instead.
    """
    group = sorted(set(group))
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not group:
        raise ValueError("group must contain at least one conv layer")
    if any(not 1 <= l <= N_CONV for l in group):
        raise ValueError(f"can only plant on conv layers 1..{N_CONV}; got {group} (fc widths are fixed)")
    if init not in INIT_MODES:
        raise ValueError(f"init must be one of {INIT_MODES}")

    spec = net.spec
    old_ch = net.channels.conv_channels
    new_ch = ChannelConfig(tuple(c + (n if i + 1 in group else 0) for i, c in enumerate(old_ch)))
    rng = np.random.default_rng(seed)

    params: dict[str, Tensor] = {}
    frozen: dict[str, np.ndarray] = {}

    def grow(name: str, new_shape: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
        old = net.params[name].value
        value = np.zeros(new_shape)
        mask = np.zeros(new_shape, dtype=bool)
        region = tuple(slice(0, s) for s in old.shape)
        value[region] = old
        mask[region] = True
        return value, mask

    for (i, new_shape), old_shape in zip(enumerate(_conv_shapes(spec, new_ch), start=1), _conv_shapes(spec, net.channels)):
        w, wm = grow(f"conv{i}.weight", new_shape)
        b, bm = grow(f"conv{i}.bias", (new_shape[0],))
        co, ci = old_shape[:2]
        fan_in = new_shape[1] * KERNEL * KERNEL
        if new_shape[0] > co:
            w[co:] = _he_uniform(rng, w[co:].shape, fan_in)
        if new_shape[1] > ci and init == "random":
            w[:co, ci:] = _he_uniform(rng, w[:co, ci:].shape, fan_in)
        params[f"conv{i}.weight"] = Tensor(w, requires_grad=True)
        params[f"conv{i}.bias"] = Tensor(b, requires_grad=True)
        frozen[f"conv{i}.weight"], frozen[f"conv{i}.bias"] = wm, bm

    fc_new = _fc_shapes(spec, new_ch)
    w, wm = grow("fc1.weight", fc_new[0])
    old_in = net.params["fc1.weight"].shape[1]
    if fc_new[0][1] > old_in and init == "random":
        w[:, old_in:] = _he_uniform(rng, w[:, old_in:].shape, fc_new[0][1])
    params["fc1.weight"] = Tensor(w, requires_grad=True)
    frozen["fc1.weight"] = wm
    for name in ("fc1.bias", "fc2.weight", "fc2.bias"):
        params[name] = Tensor(net.params[name].value.copy(), requires_grad=True)
        frozen[name] = np.ones(net.params[name].shape, dtype=bool)
    blocks = tuple(bl + ((n,) if i + 1 in group else ()) for i, bl in enumerate(net.blocks))
    return PlantableNetwork(spec, new_ch, params, frozen, blocks)
