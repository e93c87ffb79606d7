"""U-Net generators, VGG-style discriminators and their checkpoint container."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Union

import numpy as np

from . import engine as E
from .engine import Param, ShapeError, Tensor


class ConditionError(ValueError):
    """Raised when a stain-condition matrix is missing, malformed or mismatched."""


class CheckpointFormatError(ValueError):
    pass


# --------------------------------------------------------------------------
# configs
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GeneratorConfig:
    depth: int = 4
    base_width: int = 32
    in_channels: int = 3
    out_channels: int = 3
    condition_classes: int = 0

    def __post_init__(self):
        if self.depth < 1 or self.base_width < 1 or self.out_channels < 1 or self.in_channels < 1:
            raise ValueError(f"invalid generator config {self}")
        if self.condition_classes < 0:
            raise ValueError("condition_classes must be >= 0")

    @property
    def widths(self) -> list[int]:
        """Channel count at each level, ``base_width * 2**(k-1)`` for level ``k``."""
        return [self.base_width * 2**k for k in range(self.depth)]

    @property
    def divisor(self) -> int:
        return 2**self.depth


@dataclass(frozen=True)
class DiscriminatorConfig:
    blocks: int = 5
    base_width: int = 32
    input_size: tuple[int, int] = (256, 256)
    in_channels: int = 3
    condition_classes: int = 0
    hidden_units: int = 128

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        if self.blocks < 1 or self.base_width < 1 or self.hidden_units < 1:
            raise ValueError(f"invalid discriminator config {self}")
        h, w = self.input_size
        d = 2**self.blocks
        if h % d or w % d:
            raise ValueError(f"discriminator input {h}x{w} is not divisible by 2**{self.blocks} = {d}")

    @property
    def widths(self) -> list[int]:
        return [self.base_width * 2**k for k in range(self.blocks)]

    @property
    def feature_size(self) -> tuple[int, int]:
        """Spatial size reaching the dense layers."""
        d = 2**self.blocks
        return self.input_size[0] // d, self.input_size[1] // d


NetConfig = Union[GeneratorConfig, DiscriminatorConfig]


@dataclass
class NetworkState:
    """Learnable parameters of one network, keyed by layer path, plus its config."""

    config: NetConfig
    params: dict[str, Param] = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return "generator" if isinstance(self.config, GeneratorConfig) else "discriminator"

    def parameters(self) -> list[Param]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def copy(self) -> "NetworkState":
        return NetworkState(self.config, {k: p.copy() for k, p in self.params.items()})

    def astype(self, dtype) -> "NetworkState":
        return NetworkState(self.config, {k: p.astype(dtype) for k, p in self.params.items()})

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def __call__(self, x, cond=None) -> Tensor:
        if self.kind == "generator":
            return forward_generator(self, x, cond)
        return forward_discriminator(self, x, cond)


def _conv_param(rng: np.random.Generator, ci: int, co: int, dtype) -> tuple[Param, Param]:
    std = np.sqrt(2.0 / (ci * 9))
    return Param(rng.normal(0.0, std, (co, ci, 3, 3)).astype(dtype)), Param(np.zeros(co, dtype=dtype))


def _dense_param(rng: np.random.Generator, fi: int, fo: int, dtype) -> tuple[Param, Param]:
    std = np.sqrt(2.0 / fi)
    return Param(rng.normal(0.0, std, (fo, fi)).astype(dtype)), Param(np.zeros(fo, dtype=dtype))


def generator_layout(cfg: GeneratorConfig) -> list[tuple[str, int, int]]:
    """Ordered ``(layer_path, c_in, c_out)`` for every conv layer of a generator."""
    layers = []
    widths = cfg.widths
    c = cfg.in_channels + cfg.condition_classes
    for k, wk in enumerate(widths):
        for j in range(3):
            layers.append((f"down{k}.conv{j}", c, wk))
            c = wk
    prev = widths[-1]
    for k in reversed(range(cfg.depth)):
        c = prev + widths[k]
        for j in range(3):
            layers.append((f"up{k}.conv{j}", c, widths[k]))
            c = widths[k]
        prev = widths[k]
    layers.append(("final", widths[0], cfg.out_channels))
    return layers


def discriminator_layout(cfg: DiscriminatorConfig) -> tuple[list[tuple[str, int, int]], list[tuple[str, int, int]]]:
    convs = []
    c = cfg.in_channels + cfg.condition_classes
    for k, wk in enumerate(cfg.widths):
        convs.append((f"block{k}.conv0", c, wk))
        convs.append((f"block{k}.conv1", wk, wk))
        c = wk
    fh, fw = cfg.feature_size
    denses = [("dense0", c * fh * fw, cfg.hidden_units), ("dense1", cfg.hidden_units, 1)]
    return convs, denses


def param_shapes(cfg: NetConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter paths and shapes, in allocation order, implied by a config."""
    if isinstance(cfg, GeneratorConfig):
        convs, denses = generator_layout(cfg), []
    else:
        convs, denses = discriminator_layout(cfg)
    shapes = []
    for name, ci, co in convs:
        shapes += [(f"{name}.weight", (co, ci, 3, 3)), (f"{name}.bias", (co,))]
    for name, fi, fo in denses:
        shapes += [(f"{name}.weight", (fo, fi)), (f"{name}.bias", (fo,))]
    return shapes


def build_generator(cfg: GeneratorConfig, seed: int = 0, dtype=np.float32) -> NetworkState:
    """He-normal initialised U-Net generator."""
    rng = np.random.default_rng(seed)
    params: dict[str, Param] = {}
    for name, ci, co in generator_layout(cfg):
        w, b = _conv_param(rng, ci, co, dtype)
        params[f"{name}.weight"] = w
        params[f"{name}.bias"] = b
    return NetworkState(cfg, params)


def build_discriminator(cfg: DiscriminatorConfig, seed: int = 0, dtype=np.float32) -> NetworkState:
    rng = np.random.default_rng(seed)
    params: dict[str, Param] = {}
    convs, denses = discriminator_layout(cfg)
    for name, ci, co in convs:
        w, b = _conv_param(rng, ci, co, dtype)
        params[f"{name}.weight"] = w
        params[f"{name}.bias"] = b
    for name, fi, fo in denses:
        w, b = _dense_param(rng, fi, fo, dtype)
        params[f"{name}.weight"] = w
        params[f"{name}.bias"] = b
    return NetworkState(cfg, params)


def build_conditional_virtual_stainer(
    cfg: GeneratorConfig,
    disc_cfg: DiscriminatorConfig | None = None,
    seed: int = 0,
    dtype=np.float32,
) -> tuple[NetworkState, NetworkState]:
    """Class-conditional generator (all widths doubled) and its conditioned discriminator.

    ``cfg.base_width`` is the width of the matching stain-transformation
    network; the returned generator uses twice that.
    """
    if cfg.condition_classes != 2:
        raise ConditionError("the conditional virtual stainer uses exactly 2 condition classes")
    gcfg = GeneratorConfig(
        depth=cfg.depth,
        base_width=2 * cfg.base_width,
        in_channels=cfg.in_channels,
        out_channels=cfg.out_channels,
        condition_classes=2,
    )
    if disc_cfg is None:
        disc_cfg = DiscriminatorConfig(condition_classes=2)
    elif disc_cfg.condition_classes != 2:
        disc_cfg = DiscriminatorConfig(**{**asdict(disc_cfg), "condition_classes": 2})
    return build_generator(gcfg, seed, dtype), build_discriminator(disc_cfg, seed + 1, dtype)


def build_cycle_pair(
    base_width: int = 32,
    input_size: tuple[int, int] = (256, 256),
    disc_base_width: int | None = None,
    seed: int = 0,
    dtype=np.float32,
) -> tuple[NetworkState, NetworkState, NetworkState, NetworkState]:
    """(G, F, D_X, D_Y): two depth-3 U-Nets and two 4-block discriminators."""
    gcfg = GeneratorConfig(depth=3, base_width=base_width)
    dcfg = DiscriminatorConfig(blocks=4, base_width=disc_base_width or base_width, input_size=input_size)
    return (
        build_generator(gcfg, seed, dtype),
        build_generator(gcfg, seed + 1, dtype),
        build_discriminator(dcfg, seed + 2, dtype),
        build_discriminator(dcfg, seed + 3, dtype),
    )


# --------------------------------------------------------------------------
# conditioning
# --------------------------------------------------------------------------


def make_condition_matrix(class_index, classes: int, h: int, w: int, dtype=np.float32) -> np.ndarray:
    """One-hot stain condition matrix of shape ``(n, classes, h, w)``.

    ``class_index`` may be an int (batch of one) or a sequence of per-item classes.
    """
    idx = np.atleast_1d(np.asarray(class_index))
    if idx.dtype.kind not in "iu":
        raise ConditionError(f"class index must be an integer, got {class_index!r}")
    if np.any(idx < 0) or np.any(idx >= classes):
        raise ConditionError(f"class index {class_index!r} outside [0, {classes})")
    out = np.zeros((idx.size, classes, h, w), dtype=dtype)
    out[np.arange(idx.size), idx] = 1
    return out


def validate_condition(cond, classes: int, n: int, h: int, w: int) -> np.ndarray:
    c = cond.data if isinstance(cond, Tensor) else np.asarray(cond)
    if c.ndim == 4 and c.shape[0] == 1 and n > 1:
        c = np.broadcast_to(c, (n, *c.shape[1:]))
    if c.shape != (n, classes, h, w):
        raise ConditionError(f"condition matrix shape {c.shape} does not match {(n, classes, h, w)}")
    if not np.all((c == 0) | (c == 1)) or not np.all(c.sum(axis=1) == 1):
        raise ConditionError("condition matrix must be one-hot at every pixel")
    return c


def _with_condition(x: Tensor, cond, classes: int) -> Tensor:
    n, _, h, w = x.shape
    if classes == 0:
        if cond is not None:
            raise ConditionError("unconditional network was given a condition matrix")
        return x
    if cond is None:
        raise ConditionError(f"network expects a {classes}-class condition matrix")
    c = validate_condition(cond, classes, n, h, w)
    return E.concat([x, Tensor(c.astype(x.dtype, copy=False))], axis=1)


# --------------------------------------------------------------------------
# forward passes
# --------------------------------------------------------------------------


def _conv(net: NetworkState, name: str, x: Tensor) -> Tensor:
    return E.conv2d(x, net.params[f"{name}.weight"], net.params[f"{name}.bias"])


def forward_generator(net: NetworkState, x, cond=None) -> Tensor:
    cfg = net.config
    x = E.as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"generator input must be (n, c, h, w), got {x.shape}")
    n, c, h, w = x.shape
    if c != cfg.in_channels:
        raise ShapeError(f"generator expects {cfg.in_channels} input channels, got {c}")
    if h % cfg.divisor or w % cfg.divisor:
        raise ShapeError(f"input {h}x{w} is not divisible by 2**{cfg.depth} = {cfg.divisor}")
    t = _with_condition(x, cond, cfg.condition_classes)
    skips = []
    for k in range(cfg.depth):
        for j in range(3):
            t = E.leaky_relu(_conv(net, f"down{k}.conv{j}", t))
        skips.append(t)
        t = E.avg_pool2(t)
    for k in reversed(range(cfg.depth)):
        t = E.concat([E.bicubic_up2(t), skips[k]], axis=1)
        for j in range(3):
            t = E.leaky_relu(_conv(net, f"up{k}.conv{j}", t))
    return _conv(net, "final", t)


def forward_discriminator(net: NetworkState, x, cond=None) -> Tensor:
    """Probability (per batch item, shape ``(n,)``) that each input is real."""
    cfg = net.config
    x = E.as_tensor(x)
    if x.data.ndim != 4 or x.shape[2:] != cfg.input_size:
        raise ShapeError(f"discriminator expects spatial size {cfg.input_size}, got {x.shape}")
    if x.shape[1] != cfg.in_channels:
        raise ShapeError(f"discriminator expects {cfg.in_channels} channels, got {x.shape[1]}")
    t = _with_condition(x, cond, cfg.condition_classes)
    for k in range(cfg.blocks):
        t = E.leaky_relu(_conv(net, f"block{k}.conv0", t))
        t = E.leaky_relu(_conv(net, f"block{k}.conv1", t))
        t = E.avg_pool2(t)
    t = E.flatten(t)
    t = E.leaky_relu(E.dense(t, net.params["dense0.weight"], net.params["dense0.bias"]))
    t = E.dense(t, net.params["dense1.weight"], net.params["dense1.bias"])
    return E.reshape(E.sigmoid(t), (x.shape[0],))


# --------------------------------------------------------------------------
# checkpoint container
# --------------------------------------------------------------------------
#
# Layout (all integers little-endian):
#   8 bytes   magic b"VSTNCKPT"
#   uint16    format version (1)
#   uint32    header length L
#   L bytes   UTF-8 JSON header:
#               {"networks": [{"name", "kind", "config",
#                              "params": [[path, shape, step_count], ...]}, ...],
#                "moments": bool, "dtype": "<f4" | "<f8", "meta": {...}}
#   blobs     for each network in header order, for each param in header order:
#               value, then (if moments) m1 and m2; raw C-order arrays.
#
# Loading rebuilds each network from its config and rejects any header whose
# parameter paths or shapes disagree with that config.

MAGIC = b"VSTNCKPT"
FORMAT_VERSION = 1


def _config_from_dict(kind: str, d: dict) -> NetConfig:
    if kind == "generator":
        return GeneratorConfig(**d)
    if kind == "discriminator":
        d = dict(d)
        d["input_size"] = tuple(d["input_size"])
        return DiscriminatorConfig(**d)
    raise CheckpointFormatError(f"unknown network kind {kind!r}")


def dumps_networks(networks: dict[str, NetworkState], meta: dict | None = None, moments: bool = True) -> bytes:
    dtypes = {p.data.dtype for net in networks.values() for p in net.params.values()}
    if len(dtypes) > 1:
        raise CheckpointFormatError(f"mixed parameter dtypes {dtypes}")
    dtype = np.dtype(dtypes.pop() if dtypes else np.float32).newbyteorder("<")
    header = {
        "networks": [
            {
                "name": name,
                "kind": net.kind,
                "config": asdict(net.config),
                "params": [[k, list(p.data.shape), p.step_count] for k, p in net.params.items()],
            }
            for name, net in networks.items()
        ],
        "moments": moments,
        "dtype": dtype.str,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", FORMAT_VERSION, len(hbytes)))
    buf.write(hbytes)
    for net in networks.values():
        for p in net.params.values():
            arrays = (p.data, p.m1, p.m2) if moments else (p.data,)
            for a in arrays:
                buf.write(np.ascontiguousarray(a, dtype=dtype).tobytes())
    return buf.getvalue()


def loads_networks(blob: bytes) -> tuple[dict[str, NetworkState], dict]:
    if blob[:8] != MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<HI", blob[8:14])
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[14 : 14 + hlen].decode("utf-8"))
    dtype = np.dtype(header["dtype"])
    moments = header["moments"]
    pos = 14 + hlen
    networks: dict[str, NetworkState] = {}
    for entry in header["networks"]:
        cfg = _config_from_dict(entry["kind"], entry["config"])
        expected = [(k, list(shape)) for k, shape in param_shapes(cfg)]
        stored = [(k, list(shape)) for k, shape, _ in entry["params"]]
        if expected != stored:
            raise CheckpointFormatError(f"network {entry['name']!r}: parameter layout does not match its config")
        params: dict[str, Param] = {}
        for path, shape, step in entry["params"]:
            count = int(np.prod(shape))
            nbytes = count * dtype.itemsize
            arrays = []
            for _ in range(3 if moments else 1):
                if pos + nbytes > len(blob):
                    raise CheckpointFormatError("checkpoint truncated")
                arrays.append(np.frombuffer(blob, dtype=dtype, count=count, offset=pos).reshape(shape).astype(dtype.newbyteorder("=")))
                pos += nbytes
            p = Param(arrays[0])
            if moments:
                p.m1, p.m2 = arrays[1], arrays[2]
            p.step_count = int(step)
            params[path] = p
        networks[entry["name"]] = NetworkState(cfg, params)
    if pos != len(blob):
        raise CheckpointFormatError("trailing bytes after checkpoint payload")
    return networks, header["meta"]


def save_networks(path, networks: dict[str, NetworkState], meta: dict | None = None, moments: bool = True) -> None:
    Path(path).write_bytes(dumps_networks(networks, meta, moments))


def load_networks(path) -> tuple[dict[str, NetworkState], dict]:
    return loads_networks(Path(path).read_bytes())


def save_network(path, net: NetworkState, meta: dict | None = None) -> None:
    save_networks(path, {"net": net}, meta)


def load_network(path) -> NetworkState:
    nets, _ = load_networks(path)
    if len(nets) != 1:
        raise CheckpointFormatError(f"expected a single network, found {list(nets)}")
    return next(iter(nets.values()))
