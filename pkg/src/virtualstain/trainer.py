"""GAN training loops: stain transformation, class-conditional staining, CycleGAN."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import engine as E
from .datapipe import AugmentationBank, StainPair, crop_at, crop_patch, dihedral, sample_training_pair, to_tensor4
from .engine import AdamConfig, Tensor, adam_step, frozen
from .losses import (
    LossWeights,
    RawTerms,
    adversarial_term,
    calibrate_weights,
    cycle_discriminator_losses,
    cycle_generator_loss,
    discriminator_loss,
    generator_loss,
    l1_loss,
    tv_loss,
)
from .nets import (
    DiscriminatorConfig,
    GeneratorConfig,
    NetworkState,
    build_conditional_virtual_stainer,
    build_cycle_pair,
    build_discriminator,
    build_generator,
    dumps_networks,
    loads_networks,
    make_condition_matrix,
)

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, checkpoint: "Checkpoint | None" = None):
        super().__init__(message)
        self.checkpoint = checkpoint


# --------------------------------------------------------------------------
# schedule
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    total_disc_iters: int = 50000
    init_gen_per_disc: int = 7
    decay_interval: int = 4000
    min_gen_per_disc: int = 3
    checkpoint_interval: int = 1000

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 1:
                raise ValueError(f"schedule field {k} must be positive, got {v}")
        if self.init_gen_per_disc < self.min_gen_per_disc:
            raise ValueError("init_gen_per_disc must be >= min_gen_per_disc")

    @property
    def num_checkpoints(self) -> int:
        return self.total_disc_iters // self.checkpoint_interval

    def total_gen_iters(self) -> int:
        return sum(gen_iters_per_disc(i, self) for i in range(self.total_disc_iters))


def gen_iters_per_disc(disc_iter: int, s: Schedule) -> int:
    """Generator updates to run before discriminator update number ``disc_iter``."""
    if disc_iter < 0:
        raise ValueError("disc_iter must be >= 0")
    return max(s.min_gen_per_disc, s.init_gen_per_disc - disc_iter // s.decay_interval)


@dataclass(frozen=True)
class TrainConfig:
    gen_lr: float = 1e-4
    disc_lr: float = 1e-5
    batch_size: int = 4
    calibration_batches: int = 4
    target_fractions: tuple[float, float, float] = (0.01, 0.0003, 0.99)


# --------------------------------------------------------------------------
# state and checkpoints
# --------------------------------------------------------------------------


@dataclass
class TrainState:
    generator: NetworkState
    discriminator: NetworkState
    weights: LossWeights
    rng: np.random.Generator
    seed: int
    disc_iter: int = 0
    history: list[dict] = field(default_factory=list)
    initial_val_l1: float | None = None


@dataclass
class Checkpoint:
    """Snapshot of a run after ``disc_iter`` discriminator iterations."""

    disc_iter: int
    generator: NetworkState
    discriminator: NetworkState
    meta: dict

    @property
    def val_l1(self) -> float | None:
        return self.meta.get("metrics", {}).get("val_l1")

    def to_bytes(self) -> bytes:
        return dumps_networks({"generator": self.generator, "discriminator": self.discriminator}, self.meta)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        nets, meta = loads_networks(blob)
        return cls(int(meta["disc_iter"]), nets["generator"], nets["discriminator"], meta)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def _snapshot(state: TrainState, schedule: Schedule, cfg: TrainConfig, metrics: dict, family: str, source=None) -> Checkpoint:
    meta = {
        "family": family,
        "disc_iter": state.disc_iter,
        "seed": state.seed,
        "weights": asdict(state.weights),
        "rng_state": state.rng.bit_generator.state,
        "history": list(state.history),
        "initial_val_l1": state.initial_val_l1,
        "schedule": asdict(schedule),
        "train_config": asdict(cfg),
        "metrics": metrics,
        "source_state": source.get_state() if hasattr(source, "get_state") else None,
    }
    return Checkpoint(state.disc_iter, state.generator.copy(), state.discriminator.copy(), meta)


def _restore(ckpt: Checkpoint, source=None) -> TrainState:
    if hasattr(source, "set_state"):
        source.set_state(ckpt.meta.get("source_state"))
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.meta["rng_state"]
    return TrainState(
        generator=ckpt.generator.copy(),
        discriminator=ckpt.discriminator.copy(),
        weights=LossWeights(**ckpt.meta["weights"]),
        rng=rng,
        seed=int(ckpt.meta["seed"]),
        disc_iter=ckpt.disc_iter,
        history=[dict(r) for r in ckpt.meta["history"]],
        initial_val_l1=ckpt.meta["initial_val_l1"],
    )


# --------------------------------------------------------------------------
# data sources
# --------------------------------------------------------------------------


@dataclass
class Batch:
    x: np.ndarray
    z: np.ndarray
    classes: np.ndarray | None = None


class PatchSource(Protocol):
    def sample(self, rng: np.random.Generator, batch_size: int) -> Batch: ...


@dataclass
class PairedPatchSource:
    """Augmented (H&E input, special-stain target) patches drawn from source pairs."""

    pairs: Sequence[StainPair]
    patch_size: int = 64
    bank: AugmentationBank = field(default_factory=AugmentationBank)

    def sample(self, rng: np.random.Generator, batch_size: int) -> Batch:
        xs, zs = [], []
        for _ in range(batch_size):
            src = self.pairs[int(rng.integers(len(self.pairs)))]
            pp = sample_training_pair(src, self.bank, rng, self.patch_size)
            xs.append(pp.input_he)
            zs.append(pp.target_special)
        return Batch(np.concatenate(xs), np.concatenate(zs))


@dataclass
class ConditionalPatchSource:
    """Patches of one input modality with a target per class (0: H&E, 1: special stain).

    Every (image, class) combination is visited once per epoch in a shuffled
    order, so classes are exactly balanced over an epoch.
    """

    inputs: Sequence[np.ndarray]
    targets: Sequence[Sequence[np.ndarray]]  # targets[class][image]
    patch_size: int = 64
    _queue: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if len(self.targets) != 2:
            raise ValueError("conditional training needs exactly two target classes")
        for per_class in self.targets:
            if len(per_class) != len(self.inputs):
                raise ValueError("every input image needs a target for each class")

    def epoch(self, rng: np.random.Generator) -> list[tuple[int, int]]:
        combos = [(i, c) for i in range(len(self.inputs)) for c in range(2)]
        order = rng.permutation(len(combos))
        return [combos[j] for j in order]

    def get_state(self) -> list:
        return [list(p) for p in self._queue]

    def set_state(self, queue) -> None:
        self._queue = [tuple(p) for p in queue or []]

    def sample(self, rng: np.random.Generator, batch_size: int) -> Batch:
        xs, zs, cs = [], [], []
        for _ in range(batch_size):
            if not self._queue:
                self._queue = self.epoch(rng)
            i, c = self._queue.pop()
            x, z = self.inputs[i], self.targets[c][i]
            k = int(rng.integers(0, 8))
            x, z = dihedral(x, k), dihedral(z, k)
            xp, origin = crop_patch(x, rng, self.patch_size)
            xs.append(to_tensor4(xp))
            zs.append(to_tensor4(crop_at(z, origin, self.patch_size)))
            cs.append(c)
        return Batch(np.concatenate(xs), np.concatenate(zs), np.asarray(cs))


def validation_batches(source_pairs: Sequence[tuple[np.ndarray, np.ndarray]], patch_size: int, per_image: int = 4):
    """Deterministic grid crops of (input, target) channels-last images as (n, c, p, p) arrays."""
    xs, zs = [], []
    for x, z in source_pairs:
        h, w = x.shape[:2]
        side = int(math.ceil(math.sqrt(per_image)))
        ys = np.linspace(0, h - patch_size, side).astype(int)
        xs_ = np.linspace(0, w - patch_size, side).astype(int)
        count = 0
        for y0 in ys:
            for x0 in xs_:
                if count == per_image:
                    break
                xs.append(to_tensor4(x[y0 : y0 + patch_size, x0 : x0 + patch_size]))
                zs.append(to_tensor4(z[y0 : y0 + patch_size, x0 : x0 + patch_size]))
                count += 1
    return np.concatenate(xs), np.concatenate(zs)


# --------------------------------------------------------------------------
# stain / conditional GAN loop
# --------------------------------------------------------------------------


def _cond(batch: Batch, classes: int) -> np.ndarray | None:
    if classes == 0:
        return None
    if batch.classes is None:
        raise ValueError("conditional training batch is missing class labels")
    p = batch.x.shape[2]
    return make_condition_matrix(batch.classes, classes, p, batch.x.shape[3])


def evaluate_l1(G: NetworkState, x: np.ndarray, z: np.ndarray, classes=None, chunk: int = 8) -> float:
    """Mean L1 between ``G(x)`` and ``z`` over a validation set."""
    total, count = 0.0, 0
    with frozen(G.parameters()):
        for i in range(0, x.shape[0], chunk):
            xb, zb = x[i : i + chunk], z[i : i + chunk]
            cond = None
            if classes is not None:
                cond = make_condition_matrix(np.asarray(classes[i : i + chunk]), G.config.condition_classes, xb.shape[2], xb.shape[3])
            out = G(xb, cond).data
            total += float(np.abs(out - zb).mean()) * xb.shape[0]
            count += xb.shape[0]
    return total / count


def measure_raw_terms(G: NetworkState, D: NetworkState, batch: Batch) -> RawTerms:
    classes = G.config.condition_classes
    cond = _cond(batch, classes)
    with frozen(G.parameters() + D.parameters()):
        g = G(batch.x, cond)
        d = D(g, cond if D.config.condition_classes else None)
        return RawTerms(l1_loss(batch.z, g).item(), tv_loss(g).item(), adversarial_term(d).item())


def _finite(*values: float) -> bool:
    return all(math.isfinite(v) for v in values)


def _gan_loop(
    state: TrainState,
    source: PatchSource,
    validation: tuple,
    schedule: Schedule,
    cfg: TrainConfig,
    family: str,
    out_dir: Path | None,
) -> list[Checkpoint]:
    G, D = state.generator, state.discriminator
    gen_adam = AdamConfig(cfg.gen_lr)
    disc_adam = AdamConfig(cfg.disc_lr)
    classes = G.config.condition_classes
    d_classes = D.config.condition_classes
    val_x, val_z = validation[0], validation[1]
    val_c = validation[2] if len(validation) > 2 else None
    checkpoints: list[Checkpoint] = []
    acc = {"l1": 0.0, "tv": 0.0, "adv": 0.0, "gen": 0.0, "disc": 0.0, "d_real": 0.0, "d_fake": 0.0, "n_gen": 0, "n_disc": 0}

    while state.disc_iter < schedule.total_disc_iters:
        for _ in range(gen_iters_per_disc(state.disc_iter, schedule)):
            batch = source.sample(state.rng, cfg.batch_size)
            cond = _cond(batch, classes)
            with frozen(D.parameters()):
                g = G(batch.x, cond)
                d = D(g, cond if d_classes else None)
                br = generator_loss(batch.z, g, d, state.weights)
            if not _finite(br.total):
                raise TrainingDivergedError(
                    f"non-finite generator loss at disc_iter {state.disc_iter}",
                    _snapshot(state, schedule, cfg, {"diverged": True}, family, source),
                )
            br.graph.backward()
            for p in G.parameters():
                adam_step(p, gen_adam)
            acc["l1"] += br.l1_term
            acc["tv"] += br.tv_term
            acc["adv"] += br.adv_term
            acc["gen"] += br.total
            acc["n_gen"] += 1

        batch = source.sample(state.rng, cfg.batch_size)
        cond = _cond(batch, classes)
        dcond = cond if d_classes else None
        with frozen(G.parameters()):
            fake = G(batch.x, cond)
        d_fake = D(fake, dcond)
        d_real = D(batch.z, dcond)
        dl = discriminator_loss(d_fake, d_real)
        if not _finite(dl.item()):
            raise TrainingDivergedError(
                f"non-finite discriminator loss at disc_iter {state.disc_iter}",
                _snapshot(state, schedule, cfg, {"diverged": True}, family, source),
            )
        dl.backward()
        for p in D.parameters():
            adam_step(p, disc_adam)
        acc["disc"] += dl.item()
        acc["d_real"] += float(d_real.data.mean())
        acc["d_fake"] += float(d_fake.data.mean())
        acc["n_disc"] += 1
        state.disc_iter += 1

        if state.disc_iter % schedule.checkpoint_interval == 0:
            val = evaluate_l1(G, val_x, val_z, val_c)
            ng, nd = max(acc["n_gen"], 1), max(acc["n_disc"], 1)
            row = {
                "iteration": state.disc_iter,
                "l1": acc["l1"] / ng,
                "tv": acc["tv"] / ng,
                "adv": acc["adv"] / ng,
                "gen_total": acc["gen"] / ng,
                "disc": acc["disc"] / nd,
                "d_real": acc["d_real"] / nd,
                "d_fake": acc["d_fake"] / nd,
                "val_l1": val,
            }
            for k in acc:
                acc[k] = 0 if k.startswith("n_") else 0.0
            if not all(math.isfinite(p.data.sum()) for p in G.parameters() + D.parameters()):
                raise TrainingDivergedError(
                    f"non-finite parameters at disc_iter {state.disc_iter}",
                    _snapshot(state, schedule, cfg, {"diverged": True}, family, source),
                )
            state.history.append(row)
            ckpt = _snapshot(state, schedule, cfg, {"val_l1": val}, family, source)
            checkpoints.append(ckpt)
            log.info("%s iter %d val_l1 %.5f disc %.4f", family, state.disc_iter, val, row["disc"])
            if out_dir is not None:
                ckpt.save(out_dir / f"{family}_{state.disc_iter:06d}.ckpt")
                write_metrics_log(out_dir / f"{family}_metrics.txt", state.history)
    return checkpoints


def _init_state(G, D, source, validation, cfg: TrainConfig, weights, seed) -> TrainState:
    rng = np.random.default_rng(seed)
    if weights is None:
        raws = [measure_raw_terms(G, D, source.sample(rng, cfg.batch_size)) for _ in range(cfg.calibration_batches)]
        weights = calibrate_weights(raws, cfg.target_fractions)
        log.info("calibrated loss weights alpha=%.4g beta=%.4g", weights.alpha, weights.beta)
    val_c = validation[2] if len(validation) > 2 else None
    initial = evaluate_l1(G, validation[0], validation[1], val_c)
    return TrainState(G, D, weights, rng, seed, initial_val_l1=initial)


def train_stain_gan(
    data: PatchSource,
    schedule: Schedule,
    weights: LossWeights | None = None,
    seed: int = 0,
    *,
    validation: tuple[np.ndarray, np.ndarray],
    gen_cfg: GeneratorConfig = GeneratorConfig(base_width=8),
    disc_cfg: DiscriminatorConfig | None = None,
    train_cfg: TrainConfig = TrainConfig(),
    resume: Checkpoint | None = None,
    out_dir=None,
) -> list[Checkpoint]:
    """Train a stain-transformation GAN; returns one checkpoint per checkpoint interval.

    With ``weights=None`` the TV and adversarial weights are calibrated on a
    few batches before the first iteration. ``resume`` continues a run from a
    checkpoint bit-exactly.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if resume is not None:
        state = _restore(resume, data)
    else:
        if disc_cfg is None:
            p = validation[0].shape[2]
            disc_cfg = DiscriminatorConfig(blocks=5, base_width=gen_cfg.base_width, input_size=(p, p))
        G = build_generator(gen_cfg, seed=seed)
        D = build_discriminator(disc_cfg, seed=seed + 1)
        state = _init_state(G, D, data, validation, train_cfg, weights, seed)
    return _gan_loop(state, data, validation, schedule, train_cfg, "stain", out_dir)


def train_conditional_stainer(
    data: ConditionalPatchSource,
    schedule: Schedule,
    seed: int = 0,
    *,
    validation: tuple[np.ndarray, np.ndarray, np.ndarray],
    gen_cfg: GeneratorConfig = GeneratorConfig(base_width=8, in_channels=2, condition_classes=2),
    disc_cfg: DiscriminatorConfig | None = None,
    weights: LossWeights | None = None,
    train_cfg: TrainConfig = TrainConfig(),
    resume: Checkpoint | None = None,
    out_dir=None,
) -> list[Checkpoint]:
    """Same loop as :func:`train_stain_gan` with the condition matrix fed to G and D.

    ``gen_cfg.base_width`` is the stain-transformation width; the built
    generator doubles it.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if resume is not None:
        state = _restore(resume, data)
    else:
        if disc_cfg is None:
            p = validation[0].shape[2]
            disc_cfg = DiscriminatorConfig(blocks=5, base_width=gen_cfg.base_width, input_size=(p, p), condition_classes=2)
        G, D = build_conditional_virtual_stainer(gen_cfg, disc_cfg, seed=seed)
        state = _init_state(G, D, data, validation, train_cfg, weights, seed)
    return _gan_loop(state, data, validation, schedule, train_cfg, "conditional", out_dir)


def select_model(checkpoints: Sequence[Checkpoint], validation=None, iteration: int | None = None) -> Checkpoint:
    """Pick a checkpoint by minimum validation L1, or by discriminator iteration if given."""
    if not checkpoints:
        raise ValueError("no checkpoints to select from")
    if iteration is not None:
        for c in checkpoints:
            if c.disc_iter == iteration:
                return c
        raise ValueError(f"no checkpoint saved at iteration {iteration}")

    def score(c: Checkpoint) -> float:
        if validation is not None:
            return evaluate_l1(c.generator, *validation)
        if c.val_l1 is None:
            raise ValueError("checkpoint has no stored validation L1; pass a validation set")
        return c.val_l1

    scores = [score(c) for c in checkpoints]
    return checkpoints[int(np.argmin(scores))]


def write_metrics_log(path, history: Sequence[dict]) -> None:
    """Plain-text metrics table, one row per checkpoint."""
    cols = ["iteration", "l1", "tv", "adv", "gen_total", "disc", "d_real", "d_fake", "val_l1"]
    lines = [" ".join(f"{c:>12s}" for c in cols)]
    for row in history:
        lines.append(" ".join(f"{row[c]:>12d}" if c == "iteration" else f"{row[c]:>12.6g}" for c in cols))
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# CycleGAN
# --------------------------------------------------------------------------


class BatchSampler:
    """Fixed-size batches from a shuffled pool; reshuffles when fewer than a batch remain."""

    def __init__(self, pool_size: int, batch_size: int, rng: np.random.Generator):
        if pool_size < batch_size:
            raise ValueError(f"pool of {pool_size} cannot fill batches of {batch_size}")
        self.pool_size, self.batch_size, self.rng = pool_size, batch_size, rng
        self._order = np.empty(0, dtype=int)
        self.epochs = 0

    def next(self) -> np.ndarray:
        if self._order.size < self.batch_size:
            self._order = self.rng.permutation(self.pool_size)
            self.epochs += 1
        idx, self._order = self._order[: self.batch_size], self._order[self.batch_size :]
        return idx


@dataclass
class CycleResult:
    G: NetworkState
    F: NetworkState
    D_X: NetworkState
    D_Y: NetworkState
    history: list[dict]
    checkpoints: list[bytes]


def cycle_consistency(G: NetworkState, F: NetworkState, x: np.ndarray) -> float:
    """``L1(x, F(G(x)))`` with frozen networks."""
    with frozen(G.parameters() + F.parameters()):
        return l1_loss(x, F(G(x))).item()


def train_cyclegan(
    domain_x: np.ndarray,
    domain_y: np.ndarray,
    seed: int = 0,
    *,
    iterations: int = 1000,
    batch_size: int = 6,
    lr: float = 2e-5,
    base_width: int = 8,
    weights: LossWeights = LossWeights(),
    checkpoint_interval: int | None = None,
) -> CycleResult:
    """Unpaired style transfer between two ``(N, 3, p, p)`` pools with 1:1 G/D updates."""
    domain_x = np.asarray(domain_x, dtype=np.float32)
    domain_y = np.asarray(domain_y, dtype=np.float32)
    p = domain_x.shape[2:]
    G, F, D_X, D_Y = build_cycle_pair(base_width=base_width, input_size=p, seed=seed)
    rng = np.random.default_rng(seed)
    sx = BatchSampler(len(domain_x), batch_size, rng)
    sy = BatchSampler(len(domain_y), batch_size, rng)
    adam = AdamConfig(lr)
    history, ckpts = [], []
    gens, discs = G.parameters() + F.parameters(), D_X.parameters() + D_Y.parameters()
    for it in range(1, iterations + 1):
        x, y = domain_x[sx.next()], domain_y[sy.next()]
        with frozen(discs):
            cl = cycle_generator_loss(x, y, G, F, D_X, D_Y, weights)
        if not math.isfinite(cl.total):
            raise TrainingDivergedError(f"non-finite cycle generator loss at iteration {it}")
        cl.graph.backward()
        for prm in gens:
            adam_step(prm, adam)

        with frozen(gens):
            gx, fy = G(x), F(y)
        l_dx, l_dy = cycle_discriminator_losses(D_X(x), D_X(fy), D_Y(y), D_Y(gx))
        both = E.add(l_dx, l_dy)
        if not math.isfinite(both.item()):
            raise TrainingDivergedError(f"non-finite cycle discriminator loss at iteration {it}")
        both.backward()
        for prm in discs:
            adam_step(prm, adam)
        history.append({"iteration": it, "cycle": cl.cycle_term, "adv": cl.adv_term, "d_x": l_dx.item(), "d_y": l_dy.item()})
        if checkpoint_interval and it % checkpoint_interval == 0:
            ckpts.append(dumps_networks({"G": G, "F": F, "D_X": D_X, "D_Y": D_Y}, {"iteration": it, "seed": seed}))
    return CycleResult(G, F, D_X, D_Y, history, ckpts)
