"""Tiled whole-image inference with feathered blending, and the staining paths built on it."""

from __future__ import annotations

import enum
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .datapipe import from_tensor4, rgb_to_ycbcr, to_tensor4, ycbcr_to_rgb
from .engine import frozen
from .nets import GeneratorConfig, NetworkState, build_generator, make_condition_matrix


class TilingError(ValueError):
    pass


@dataclass(frozen=True)
class TileGrid:
    """Square tiles of ``tile_size`` overlapping by ``overlap`` pixels, blended with linear ramps.

    The last tile along each axis is pulled back to end at the image border,
    so every tile is full-size. Weights are normalised by their sum, which
    makes them a partition of unity at every pixel.
    """

    tile_size: int = 256
    overlap: int = 32

    def __post_init__(self):
        if self.tile_size < 1 or self.overlap < 0:
            raise TilingError("tile size must be positive and overlap non-negative")
        if self.overlap >= self.tile_size:
            raise TilingError(f"overlap {self.overlap} must be smaller than the tile size {self.tile_size}")

    def starts(self, length: int) -> list[int]:
        t = self.tile_size
        if length <= t:
            return [0]
        step = t - self.overlap
        s = list(range(0, length - t, step))
        s.append(length - t)
        return s

    def tiles(self, shape: tuple[int, int]) -> list[tuple[int, int]]:
        return [(y, x) for y in self.starts(shape[0]) for x in self.starts(shape[1])]

    def ramp(self) -> np.ndarray:
        """1-D feather profile: rises over the overlap, flat in the middle, never zero."""
        t, o = self.tile_size, self.overlap
        i = np.arange(t, dtype=np.float64)
        if o == 0:
            return np.ones(t)
        return np.minimum(1.0, np.minimum((i + 0.5) / o, (t - i - 0.5) / o))

    def weight_sum(self, shape: tuple[int, int]) -> np.ndarray:
        """Sum of raw tile weights at every pixel of an image padded to at least one tile."""
        t = self.tile_size
        ph, pw = max(shape[0], t), max(shape[1], t)
        r = self.ramp()
        wt = np.outer(r, r)
        acc = np.zeros((ph, pw))
        for y, x in self.tiles((ph, pw)):
            acc[y : y + t, x : x + t] += wt
        return acc

    def partition(self, shape: tuple[int, int]) -> np.ndarray:
        """Sum of normalised weights at every pixel; 1 everywhere by construction."""
        t = self.tile_size
        total = self.weight_sum(shape)
        r = self.ramp()
        wt = np.outer(r, r)
        acc = np.zeros_like(total)
        for y, x in self.tiles(total.shape):
            acc[y : y + t, x : x + t] += wt / total[y : y + t, x : x + t]
        return acc[: shape[0], : shape[1]]


@dataclass
class ThroughputReport:
    pixels: int
    seconds: float
    tiles: int
    workers: int
    microns_per_pixel: float | None = None

    @property
    def pixels_per_second(self) -> float:
        return self.pixels / self.seconds if self.seconds > 0 else float("inf")

    @property
    def mm2_per_second(self) -> float | None:
        if self.microns_per_pixel is None:
            return None
        return self.pixels_per_second * (self.microns_per_pixel * 1e-3) ** 2

    def table(self) -> str:
        rows = [
            ("pixels", f"{self.pixels}"),
            ("tiles", f"{self.tiles}"),
            ("workers", f"{self.workers}"),
            ("seconds", f"{self.seconds:.3f}"),
            ("pixels/s", f"{self.pixels_per_second:.1f}"),
        ]
        if self.mm2_per_second is not None:
            rows.append(("mm2/s", f"{self.mm2_per_second:.4f}"))
        return "\n".join(f"{k:<10}{v:>16}" for k, v in rows)


def _as_generator(model) -> NetworkState:
    net = getattr(model, "generator", model)
    if not isinstance(net, NetworkState) or net.kind != "generator":
        raise TypeError("model must be a generator NetworkState or a checkpoint holding one")
    return net


def _as_float_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype == np.uint8:
        img = img.astype(np.float64) / 255.0
    img = img.astype(np.float64, copy=False)
    if img.ndim != 3 or not np.all(np.isfinite(img)):
        raise TilingError(f"input must be a finite (h, w, c) image, got shape {img.shape}")
    return img


def transform_slide(
    image: np.ndarray,
    model,
    grid: TileGrid = TileGrid(),
    *,
    workers: int = 1,
    condition_class: int | None = None,
    microns_per_pixel: float | None = None,
) -> tuple[np.ndarray, ThroughputReport]:
    """Run a generator over a whole image tile by tile and blend the RGB tiles.

    3-channel inputs are RGB and enter the network as YCbCr; other channel
    counts (autofluorescence) enter unchanged. The network output is YCbCr and
    leaves as RGB in [0, 1]. Tiles may be evaluated by several threads, but
    they are accumulated in a fixed order, so the result does not depend on
    ``workers``.
    """
    net = _as_generator(model)
    cfg = net.config
    if cfg.out_channels != 3:
        raise TilingError(f"model must output 3 channels, got {cfg.out_channels}")
    t = grid.tile_size
    if t % cfg.divisor:
        raise TilingError(f"tile size {t} is not divisible by 2**{cfg.depth} = {cfg.divisor}")
    img = _as_float_image(image)
    if img.shape[2] != cfg.in_channels:
        raise TilingError(f"model expects {cfg.in_channels} input channels, image has {img.shape[2]}")
    h, w = img.shape[:2]
    x_in = rgb_to_ycbcr(img) if img.shape[2] == 3 else img
    # images smaller than a tile are reflected out to one tile
    ph, pw = max(h, t), max(w, t)
    if (ph, pw) != (h, w):
        x_in = np.pad(x_in, ((0, ph - h), (0, pw - w), (0, 0)), mode="reflect" if min(h, w) > 1 else "edge")
    x_in = x_in.astype(np.float32)
    cond = None
    if cfg.condition_classes:
        if condition_class is None:
            raise TilingError("conditional model needs condition_class")
        cond = make_condition_matrix(condition_class, cfg.condition_classes, t, t)
    tiles = grid.tiles((ph, pw))

    def run(origin):
        y, x = origin
        patch = to_tensor4(x_in[y : y + t, x : x + t])
        out = net(patch, cond).data
        return ycbcr_to_rgb(from_tensor4(out)[0].astype(np.float64))

    start = time.perf_counter()
    with frozen(net.parameters()):
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                outs = list(pool.map(run, tiles))
        else:
            outs = [run(o) for o in tiles]
    r = grid.ramp()
    wt = np.outer(r, r)[..., None]
    acc = np.zeros((ph, pw, 3))
    den = np.zeros((ph, pw, 1))
    for (y, x), o in zip(tiles, outs):
        acc[y : y + t, x : x + t] += wt * o
        den[y : y + t, x : x + t] += wt
    result = (acc / den)[:h, :w]
    elapsed = time.perf_counter() - start
    return result, ThroughputReport(h * w, elapsed, len(tiles), workers, microns_per_pixel)


def identity_generator(cfg: GeneratorConfig = GeneratorConfig(base_width=8)) -> NetworkState:
    """A generator whose output equals its input (up to float rounding).

    Signals travel through the top level only, each channel carried as the
    pair ``(lrelu(v), lrelu(-v))``: the difference of the pair is ``1.1 v``
    whatever the sign of ``v``, so every layer can rebuild ``v`` exactly.
    Deeper levels are all zeros and contribute nothing.
    """
    if cfg.in_channels != cfg.out_channels:
        raise ValueError("identity generator needs equal input and output channels")
    c = cfg.in_channels
    if cfg.widths[0] < 2 * c:
        raise ValueError(f"top width {cfg.widths[0]} cannot carry {c} channels as sign pairs")
    net = build_generator(cfg, seed=0)
    for p in net.parameters():
        p.data[...] = 0
    k = np.float32(1.0 / 1.1)

    def pair(name, offset=0):
        wgt = net.params[f"{name}.weight"].data
        for i in range(c):
            wgt[i, offset + i, 1, 1] = k
            wgt[i, offset + c + i, 1, 1] = -k
            if wgt.shape[0] > c:
                wgt[c + i, offset + i, 1, 1] = -k
                wgt[c + i, offset + c + i, 1, 1] = k

    w0 = net.params["down0.conv0.weight"].data
    for i in range(c):
        w0[i, i, 1, 1] = 1.0
        w0[c + i, i, 1, 1] = -1.0
    pair("down0.conv1")
    pair("down0.conv2")
    skip_offset = cfg.widths[1] if cfg.depth > 1 else cfg.widths[0]
    pair("up0.conv0", offset=skip_offset)
    pair("up0.conv1")
    pair("up0.conv2")
    pair("final")
    return net


# --------------------------------------------------------------------------
# staining paths
# --------------------------------------------------------------------------


class StainPath(str, enum.Enum):
    HE_TO_SPECIAL = "he_to_special"  # stain transformation of an H&E image
    AF_TO_HE_TO_SPECIAL = "af_to_he_to_special"  # virtual H&E, then stain transformation
    AF_TO_SPECIAL = "af_to_special"  # direct virtual special stain


PATH_STAGES = {
    StainPath.HE_TO_SPECIAL: [("he", "stain_transform", "special")],
    StainPath.AF_TO_HE_TO_SPECIAL: [("af", "virtual_he", "he"), ("he", "stain_transform", "special")],
    StainPath.AF_TO_SPECIAL: [("af", "virtual_special", "special")],
}


class MissingModelError(KeyError):
    def __init__(self, stage: str):
        super().__init__(f"stage '{stage}' needs a model named '{stage}'")
        self.stage = stage


@dataclass
class PipelineOutput:
    output: np.ndarray
    intermediates: dict[str, np.ndarray]
    reports: dict[str, ThroughputReport]


def run_pipeline(
    path: StainPath | str,
    inputs: dict[str, np.ndarray],
    models: dict,
    grid: TileGrid = TileGrid(),
    *,
    workers: int = 1,
    condition_classes: dict[str, int] | None = None,
) -> PipelineOutput:
    """Compose :func:`transform_slide` stages for one staining path.

    ``inputs`` holds ``"he"`` (RGB) or ``"af"`` (2-channel autofluorescence);
    ``models`` maps stage names (``stain_transform``, ``virtual_he``,
    ``virtual_special``) to generators. A conditional model used for a stage
    takes its class from ``condition_classes[stage]`` (default: 0 for
    ``virtual_he``, 1 otherwise).
    """
    path = StainPath(path)
    stages = PATH_STAGES[path]
    for _, stage, _ in stages:
        if models.get(stage) is None:
            raise MissingModelError(stage)
    first = stages[0][0]
    if first not in inputs:
        raise KeyError(f"path '{path.value}' needs input '{first}'")
    classes = {"virtual_he": 0, "virtual_special": 1, "stain_transform": 1, **(condition_classes or {})}
    images = dict(inputs)
    reports = {}
    for src, stage, dst in stages:
        net = _as_generator(models[stage])
        cls = classes[stage] if net.config.condition_classes else None
        images[dst], reports[stage] = transform_slide(images[src], net, grid, workers=workers, condition_class=cls)
    out = images[stages[-1][2]]
    inter = {k: v for k, v in images.items() if k not in inputs and v is not out}
    return PipelineOutput(out, inter, reports)
