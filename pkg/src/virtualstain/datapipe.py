"""Training-data preparation and the synthetic kidney-tissue phantom.

Images are float arrays in ``[0, 1]`` with channels last, ``(h, w, c)``;
:func:`to_tensor4` converts to the networks' ``(n, c, h, w)`` layout.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .engine import Tensor
from .nets import NetworkState, forward_generator


# --------------------------------------------------------------------------
# color space
# --------------------------------------------------------------------------

# BT.601 studio swing on the 8-bit scale, input RGB in [0, 1]
_YCC_MATRIX = np.array(
    [
        [65.481, 128.553, 24.966],
        [-37.797, -74.203, 112.0],
        [112.0, -93.786, -18.214],
    ]
)
_YCC_OFFSET = np.array([16.0, 128.0, 128.0])
_YCC_INVERSE = np.linalg.inv(_YCC_MATRIX)


def rgb_to_ycbcr(img: np.ndarray) -> np.ndarray:
    """RGB in ``[0, 1]`` to BT.601 YCbCr, rescaled from the 8-bit range by 1/255."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape[-1] != 3:
        raise ValueError(f"expected 3 channels in the last axis, got shape {img.shape}")
    if np.any(img < -1e-9) or np.any(img > 1 + 1e-9):
        raise ValueError("RGB values must lie in [0, 1]")
    return (img @ _YCC_MATRIX.T + _YCC_OFFSET) / 255.0


def ycbcr_to_rgb(img: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rgb_to_ycbcr`; the result is clamped to ``[0, 1]``."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape[-1] != 3:
        raise ValueError(f"expected 3 channels in the last axis, got shape {img.shape}")
    rgb = (img * 255.0 - _YCC_OFFSET) @ _YCC_INVERSE.T
    return np.clip(rgb, 0.0, 1.0)


# --------------------------------------------------------------------------
# geometry
# --------------------------------------------------------------------------


def downsample2x(img: np.ndarray) -> np.ndarray:
    """2x2 box-mean downsampling; an odd trailing row/column is cropped first."""
    img = np.asarray(img)
    h, w = img.shape[:2]
    img = img[: h - h % 2, : w - w % 2]
    h2, w2 = img.shape[0] // 2, img.shape[1] // 2
    blocks = img.reshape(h2, 2, w2, 2, *img.shape[2:])
    return blocks.mean(axis=(1, 3))


def crop_at(img: np.ndarray, origin: tuple[int, int], size: int) -> np.ndarray:
    y, x = origin
    return img[y : y + size, x : x + size]


def crop_patch(img: np.ndarray, rng: np.random.Generator, size: int = 256) -> tuple[np.ndarray, tuple[int, int]]:
    """Uniformly placed ``size x size`` crop and its (row, col) origin."""
    h, w = img.shape[:2]
    if h < size or w < size:
        raise ValueError(f"source {h}x{w} is smaller than the {size}x{size} patch")
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return crop_at(img, (y, x), size), (y, x)


def dihedral(img: np.ndarray, k: int) -> np.ndarray:
    """Element ``k`` of D4: rotate by ``k % 4`` quarter turns, then mirror columns if ``k >= 4``."""
    if not 0 <= k <= 7:
        raise ValueError(f"dihedral index must be in [0, 7], got {k}")
    out = np.rot90(img, k % 4, axes=(0, 1))
    if k >= 4:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def dihedral_compose(a: int, b: int) -> int:
    """Index of the element equal to applying ``a`` first, then ``b``."""
    ra, fa = a % 4, a // 4
    rb, fb = b % 4, b // 4
    # a mirror reverses the sense of any rotation applied after it
    r = (ra + (-rb if fa else rb)) % 4
    return r + 4 * ((fa + fb) % 2)


def dihedral_inverse(k: int) -> int:
    return next(j for j in range(8) if dihedral_compose(k, j) == 0)


def to_tensor4(*imgs: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Stack channels-last images into an ``(n, c, h, w)`` array."""
    arr = np.stack([np.atleast_3d(i) for i in imgs]).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(arr, dtype=dtype)


def from_tensor4(x) -> np.ndarray:
    """``(n, c, h, w)`` to a stack of channels-last images ``(n, h, w, c)``."""
    a = x.data if isinstance(x, Tensor) else np.asarray(x)
    return np.ascontiguousarray(a.transpose(0, 2, 3, 1))


# --------------------------------------------------------------------------
# phantom tissue
# --------------------------------------------------------------------------


class StainKind(str, enum.Enum):
    MT = "MT"
    PAS = "PAS"
    JMS = "JMS"


class Label(enum.IntEnum):
    BACKGROUND = 0
    STROMA = 1
    GLOMERULUS = 2
    CAPSULE = 3
    TUBULE_WALL = 4
    LUMEN = 5
    NUCLEUS = 6


# per-label RGB transfer functions; rows follow Label order
PALETTES: dict[str, np.ndarray] = {
    "HE": np.array(
        [
            [0.96, 0.95, 0.97],
            [0.93, 0.68, 0.80],
            [0.78, 0.45, 0.70],
            [0.88, 0.60, 0.78],
            [0.90, 0.52, 0.68],
            [0.98, 0.88, 0.93],
            [0.35, 0.22, 0.55],
        ]
    ),
    "MT": np.array(
        [
            [0.95, 0.95, 0.96],
            [0.45, 0.60, 0.85],
            [0.75, 0.35, 0.45],
            [0.30, 0.45, 0.82],
            [0.85, 0.30, 0.35],
            [0.94, 0.92, 0.95],
            [0.25, 0.15, 0.30],
        ]
    ),
    "PAS": np.array(
        [
            [0.96, 0.96, 0.97],
            [0.92, 0.80, 0.88],
            [0.80, 0.45, 0.70],
            [0.70, 0.15, 0.55],
            [0.88, 0.65, 0.80],
            [0.97, 0.93, 0.96],
            [0.30, 0.30, 0.55],
        ]
    ),
    "JMS": np.array(
        [
            [0.95, 0.95, 0.93],
            [0.85, 0.84, 0.78],
            [0.55, 0.55, 0.50],
            [0.15, 0.15, 0.15],
            [0.80, 0.74, 0.64],
            [0.95, 0.95, 0.92],
            [0.35, 0.35, 0.40],
        ]
    ),
}

# two-channel label-free autofluorescence (DAPI, Texas Red)
AF_PALETTE = np.array(
    [
        [0.02, 0.02],
        [0.35, 0.55],
        [0.50, 0.40],
        [0.62, 0.72],
        [0.45, 0.65],
        [0.10, 0.12],
        [0.85, 0.30],
    ]
)


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 712
    glomeruli: tuple[int, int] = (2, 4)
    glomerulus_radius: tuple[float, float] = (35.0, 60.0)
    tubules: tuple[int, int] = (45, 70)
    tubule_radius: tuple[float, float] = (14.0, 26.0)
    tubule_wall: tuple[float, float] = (4.0, 8.0)
    capsule_width: float = 4.0
    stroma_margin: float = 40.0
    nuclei_per_kpx: float = 1.2
    noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.size < 8:
            raise ValueError("phantom size must be >= 8")
        for name in ("glomeruli", "tubules"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"invalid count range {name}={lo, hi}")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")


@dataclass
class Phantom:
    he: np.ndarray
    stains: dict[str, np.ndarray]
    structure: np.ndarray
    autofluorescence: np.ndarray
    spec: PhantomSpec


def _ellipse(h, w, cy, cx, ry, rx, theta):
    """Boolean mask and normalised radius of a rotated ellipse, within its bounding box."""
    r = max(ry, rx) + 2
    y0, y1 = max(int(cy - r), 0), min(int(cy + r) + 1, h)
    x0, x1 = max(int(cx - r), 0), min(int(cx + r) + 1, w)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (c * dy + s * dx) / ry
    v = (-s * dy + c * dx) / rx
    return (slice(y0, y1), slice(x0, x1)), np.sqrt(u * u + v * v)


def phantom_structure(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """Integer label map (see :class:`Label`) of glomeruli, tubules and nuclei in stroma."""
    n = spec.size
    lab = np.zeros((n, n), dtype=np.uint8)
    prim = np.zeros((n, n), dtype=bool)
    n_glom = int(rng.integers(spec.glomeruli[0], spec.glomeruli[1] + 1))
    n_tub = int(rng.integers(spec.tubules[0], spec.tubules[1] + 1))
    if n_glom + n_tub == 0:
        return lab

    for _ in range(n_tub):
        r = rng.uniform(*spec.tubule_radius)
        wall = rng.uniform(*spec.tubule_wall)
        ecc = rng.uniform(0.7, 1.0)
        cy, cx = rng.uniform(0, n, size=2)
        box, rad = _ellipse(n, n, cy, cx, r, r * ecc, rng.uniform(0, np.pi))
        inner = 1.0 - wall / r
        region = lab[box]
        region[(rad <= 1.0) & (rad > inner)] = Label.TUBULE_WALL
        region[rad <= inner] = Label.LUMEN
        prim[box] |= rad <= 1.0

    for _ in range(n_glom):
        r = rng.uniform(*spec.glomerulus_radius)
        ecc = rng.uniform(0.8, 1.0)
        cy, cx = rng.uniform(0, n, size=2)
        box, rad = _ellipse(n, n, cy, cx, r, r * ecc, rng.uniform(0, np.pi))
        outer = 1.0 + spec.capsule_width / r
        region = lab[box]
        region[(rad <= outer) & (rad > 1.0)] = Label.CAPSULE
        region[rad <= 1.0] = Label.GLOMERULUS
        prim[box] |= rad <= outer

    dist = ndimage.distance_transform_edt(~prim)
    lab[(dist > 0) & (dist <= spec.stroma_margin)] = Label.STROMA

    cellular = np.isin(lab, (Label.STROMA, Label.GLOMERULUS, Label.TUBULE_WALL))
    count = int(spec.nuclei_per_kpx * cellular.sum() / 1000.0)
    ys, xs = np.nonzero(cellular)
    if count and ys.size:
        pick = rng.choice(ys.size, size=min(count, ys.size), replace=False)
        radii = rng.uniform(1.5, 3.0, size=pick.size)
        nuc = np.zeros((n, n), dtype=bool)
        for i, r in zip(pick, radii):
            box, rad = _ellipse(n, n, ys[i], xs[i], r, r, 0.0)
            nuc[box] |= rad <= 1.0
        lab[nuc & cellular] = Label.NUCLEUS
    return lab


def render(structure: np.ndarray, palette: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    img = palette[structure]
    if noise > 0:
        img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_phantom(spec: PhantomSpec) -> Phantom:
    """Render one structure map as H&E, MT, PAS, JMS and autofluorescence images.

    All renderings share the same label map, so they are pixel-aligned by
    construction; they differ only through the per-label palettes and
    independent pixel noise.
    """
    seeds = np.random.SeedSequence(spec.seed).spawn(6)
    structure = phantom_structure(spec, np.random.default_rng(seeds[0]))
    he = render(structure, PALETTES["HE"], spec.noise, np.random.default_rng(seeds[1]))
    stains = {
        kind.value: render(structure, PALETTES[kind.value], spec.noise, np.random.default_rng(seeds[2 + i]))
        for i, kind in enumerate(StainKind)
    }
    af = render(structure, AF_PALETTE, spec.noise, np.random.default_rng(seeds[5]))
    return Phantom(he, stains, structure, af, spec)


def palette_lookup(he: np.ndarray, target: str) -> np.ndarray:
    """Map an H&E rendering to ``target`` by nearest-palette-colour label lookup."""
    d = ((he[..., None, :] - PALETTES["HE"][None, None]) ** 2).sum(axis=-1)
    return PALETTES[target][np.argmin(d, axis=-1)]


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------


@dataclass
class StainPair:
    """A pixel-aligned (H&E, special stain) source image pair, RGB channels-last."""

    he: np.ndarray
    special: np.ndarray
    stain_kind: StainKind

    def __post_init__(self):
        if self.he.shape != self.special.shape:
            raise ValueError(f"pair images differ in shape: {self.he.shape} vs {self.special.shape}")
        self.stain_kind = StainKind(self.stain_kind)

    @cached_property
    def he_ycc(self) -> np.ndarray:
        return rgb_to_ycbcr(self.he).astype(np.float32)

    @cached_property
    def special_ycc(self) -> np.ndarray:
        return rgb_to_ycbcr(self.special).astype(np.float32)


@dataclass
class PatchPair:
    input_he: np.ndarray  # (1, 3, p, p) YCbCr
    target_special: np.ndarray  # (1, 3, p, p) YCbCr
    stain_kind: StainKind
    style_id: int = 0

    def __post_init__(self):
        if self.input_he.shape[2:] != self.target_special.shape[2:]:
            raise ValueError("input and target patches differ in spatial size")


@dataclass
class AugmentationBank:
    """Style-transfer generators re-rendering H&E inputs in other staining styles."""

    networks: list[NetworkState] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        for net in self.networks:
            cfg = net.config
            if cfg.in_channels != 3 or cfg.out_channels != 3:
                raise ValueError("style networks must map 3 channels to 3 channels")

    @property
    def size(self) -> int:
        return len(self.networks)

    def apply(self, style_id: int, img_ycc: np.ndarray) -> np.ndarray:
        net = self.networks[style_id - 1]
        out = forward_generator(net, to_tensor4(img_ycc)).data
        return np.clip(from_tensor4(out)[0], 0.0, 1.0).astype(np.float32)


class StyleNetworkError(RuntimeError):
    pass


def sample_training_pair(
    source: StainPair,
    bank: AugmentationBank,
    rng: np.random.Generator,
    patch_size: int = 256,
    style_id: int | None = None,
) -> PatchPair:
    """Draw one augmented training patch pair.

    Order: style transfer (input only), then a random dihedral transform and a
    random crop shared by input and target. ``style_id`` is drawn uniformly
    from ``{0, ..., K}`` unless given.
    """
    if style_id is None:
        style_id = int(rng.integers(0, bank.size + 1))
    he = source.he_ycc
    if style_id:
        try:
            he = bank.apply(style_id, he)
        except Exception as exc:  # surfaced with the style that failed
            raise StyleNetworkError(f"style network {style_id} failed: {exc}") from exc
        if not np.all(np.isfinite(he)):
            raise StyleNetworkError(f"style network {style_id} produced non-finite output")
    k = int(rng.integers(0, 8))
    he = dihedral(he, k)
    target = dihedral(source.special_ycc, k)
    he_patch, origin = crop_patch(he, rng, patch_size)
    target_patch = crop_at(target, origin, patch_size)
    return PatchPair(to_tensor4(he_patch), to_tensor4(target_patch), source.stain_kind, style_id)


# --------------------------------------------------------------------------
# image files and the on-disk phantom dataset
# --------------------------------------------------------------------------


def read_image(path) -> np.ndarray:
    """8-bit PNG/TIFF to float RGB in ``[0, 1]``."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot read image {path}: {exc}") from exc
    return arr


def write_image(path, img: np.ndarray) -> None:
    arr = np.asarray(img)
    if arr.ndim == 3 and arr.shape[-1] == 2:
        arr = np.concatenate([arr, np.zeros(arr.shape[:2] + (1,))], axis=-1)
    u8 = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(u8).save(path)


STAIN_DIRS = ("HE", "MT", "PAS", "JMS", "AF")


def write_phantom_dataset(
    root,
    n_train: int = 56,
    n_val: int = 8,
    spec: PhantomSpec = PhantomSpec(),
    seed: int = 0,
) -> Path:
    """Emit ``<root>/<split>/<stain>/<index>.png`` plus ``manifest.txt``.

    Autofluorescence images are stored with DAPI in red, Texas Red in green.
    """
    root = Path(root)
    lines = ["# split index seed " + " ".join(f"{k}={v}" for k, v in asdict(spec).items() if k != "seed")]
    specs = phantom_specs(n_train, n_val, spec, seed)
    for split, index, s in specs:
        ph = generate_phantom(s)
        write_image(root / split / "HE" / f"{index:04d}.png", ph.he)
        for kind, img in ph.stains.items():
            write_image(root / split / kind / f"{index:04d}.png", img)
        write_image(root / split / "AF" / f"{index:04d}.png", ph.autofluorescence)
        lines.append(f"{split} {index} {s.seed}")
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")
    return root


def phantom_specs(n_train: int, n_val: int, spec: PhantomSpec = PhantomSpec(), seed: int = 0):
    """Deterministic ``(split, index, PhantomSpec)`` list; each image gets its own seed."""
    seeds = np.random.SeedSequence(seed).generate_state(n_train + n_val)
    out = []
    for i in range(n_train + n_val):
        split, index = ("train", i) if i < n_train else ("val", i - n_train)
        s = PhantomSpec(**{**asdict(spec), "seed": int(seeds[i])})
        out.append((split, index, s))
    return out


def read_phantom_dataset(root, stain: str, split: str = "train", downsample: bool = False) -> list[StainPair]:
    root = Path(root)
    pairs = []
    for path in sorted((root / split / "HE").glob("*.png")):
        he = read_image(path)
        sp = read_image(root / split / stain / path.name)
        if downsample:
            he, sp = downsample2x(he), downsample2x(sp)
        pairs.append(StainPair(he, sp, StainKind(stain)))
    if not pairs:
        raise FileNotFoundError(f"no images under {root / split / 'HE'}")
    return pairs
