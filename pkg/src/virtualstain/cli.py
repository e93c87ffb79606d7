"""``virtualstain`` command line: phantom data, training, registration, inference, pipelines, tallies.

Every subcommand accepts ``--config FILE`` with ``key = value`` lines; flags
given on the command line override the file.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("virtualstain")

# config keys and their types; file values are parsed with these
CONFIG_KEYS = {
    "tile_size": int,
    "overlap": int,
    "seed": int,
    "microns_per_pixel": float,
    "checkpoint": str,
    "iteration_override": int,
    "workers": int,
    "total_disc_iters": int,
    "init_gen_per_disc": int,
    "decay_interval": int,
    "min_gen_per_disc": int,
    "checkpoint_interval": int,
    "batch_size": int,
    "patch_size": int,
    "base_width": int,
    "gen_lr": float,
    "disc_lr": float,
    "iterations": int,
}


def read_config(path) -> dict:
    """Parse a ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in CONFIG_KEYS:
            raise ValueError(f"{path}:{n}: unknown config key '{key}'")
        out[key] = CONFIG_KEYS[key](value)
    return out


def _settings(args: argparse.Namespace, defaults: dict) -> dict:
    """Defaults, then the config file, then explicit flags."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        merged.update(read_config(args.config))
    for key in CONFIG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            merged[key] = v
    return merged


def _add_common(p: argparse.ArgumentParser, *names: str) -> None:
    p.add_argument("--config", help="key = value settings file")
    help_ = {
        "tile_size": "inference tile size in pixels",
        "overlap": "tile overlap in pixels",
        "seed": "random seed",
        "microns_per_pixel": "pixel pitch, enables mm^2/s throughput",
        "checkpoint": "checkpoint file (model for inference, resume point for training)",
        "iteration_override": "select the checkpoint saved at this iteration",
        "workers": "inference threads",
    }
    for name in names:
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=CONFIG_KEYS[name], default=None, help=help_.get(name))


def _write_csv(path, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_phantom(args) -> int:
    from .datapipe import PhantomSpec, write_phantom_dataset

    s = _settings(args, {"seed": 0})
    root = write_phantom_dataset(args.out, args.n_train, args.n_val, PhantomSpec(size=args.size), seed=s["seed"])
    print(f"wrote {args.n_train} train / {args.n_val} val phantoms to {root}")
    return 0


def _load_checkpoints(path) -> list:
    from .trainer import Checkpoint

    p = Path(path)
    files = sorted(p.glob("*.ckpt")) if p.is_dir() else [p]
    if not files:
        raise FileNotFoundError(f"no checkpoints under {p}")
    return [Checkpoint.load(f) for f in files]


def cmd_train(args) -> int:
    from .datapipe import crop_patch, read_image, read_phantom_dataset, to_tensor4
    from .nets import GeneratorConfig, save_networks
    from .trainer import (
        Checkpoint,
        ConditionalPatchSource,
        PairedPatchSource,
        Schedule,
        TrainConfig,
        select_model,
        train_conditional_stainer,
        train_cyclegan,
        train_stain_gan,
        validation_batches,
        write_metrics_log,
    )

    s = _settings(
        args,
        {
            "seed": 0,
            "total_disc_iters": 5000,
            "init_gen_per_disc": 7,
            "decay_interval": 400,
            "min_gen_per_disc": 3,
            "checkpoint_interval": 500,
            "batch_size": 1,
            "patch_size": 64,
            "base_width": 8,
            "gen_lr": 1e-4,
            "disc_lr": 1e-5,
            "iterations": 1000,
        },
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resume = Checkpoint.load(s["checkpoint"]) if s.get("checkpoint") else None
    schedule = Schedule(
        s["total_disc_iters"], s["init_gen_per_disc"], s["decay_interval"], s["min_gen_per_disc"], s["checkpoint_interval"]
    )
    tcfg = TrainConfig(gen_lr=s["gen_lr"], disc_lr=s["disc_lr"], batch_size=s["batch_size"])
    p = s["patch_size"]

    if args.family == "stain":
        train = read_phantom_dataset(args.data, args.stain, "train")
        val = read_phantom_dataset(args.data, args.stain, "val")
        vset = validation_batches([(v.he_ycc, v.special_ycc) for v in val], p)
        ckpts = train_stain_gan(
            PairedPatchSource(train, p), schedule, seed=s["seed"], validation=vset,
            gen_cfg=GeneratorConfig(base_width=s["base_width"]), train_cfg=tcfg, resume=resume, out_dir=out,
        )
    elif args.family == "conditional":
        def load(split):
            he = read_phantom_dataset(args.data, args.stain, split)
            af = [read_image(Path(args.data) / split / "AF" / f"{i:04d}.png")[..., :2].astype(np.float32) for i in range(len(he))]
            return af, [x.he_ycc for x in he], [x.special_ycc for x in he]

        af, he, sp = load("train")
        vaf, vhe, vsp = load("val")
        vx, vz0 = validation_batches(list(zip(vaf, vhe)), p)
        _, vz1 = validation_batches(list(zip(vaf, vsp)), p)
        n = vx.shape[0]
        vset = (np.concatenate([vx, vx]), np.concatenate([vz0, vz1]), np.array([0] * n + [1] * n))
        ckpts = train_conditional_stainer(
            ConditionalPatchSource(af, [he, sp], p), schedule, seed=s["seed"], validation=vset,
            gen_cfg=GeneratorConfig(base_width=max(s["base_width"] // 2, 1), in_channels=2, condition_classes=2),
            train_cfg=tcfg, resume=resume, out_dir=out,
        )
    else:
        rng = np.random.default_rng(s["seed"])
        pairs = read_phantom_dataset(args.data, args.stain, "train")
        xs = np.concatenate([to_tensor4(crop_patch(q.he_ycc, rng, p)[0]) for q in pairs])
        ys = np.concatenate([to_tensor4(crop_patch(q.special_ycc, rng, p)[0]) for q in pairs])
        res = train_cyclegan(xs, ys, s["seed"], iterations=s["iterations"], base_width=s["base_width"])
        save_networks(out / "cyclegan.ckpt", {"G": res.G, "F": res.F, "D_X": res.D_X, "D_Y": res.D_Y}, {"iterations": s["iterations"]})
        print(f"cycle term {res.history[0]['cycle']:.4f} -> {res.history[-1]['cycle']:.4f}")
        return 0

    chosen = select_model(ckpts, iteration=s.get("iteration_override"))
    chosen.save(out / "selected.ckpt")
    write_metrics_log(out / "metrics.txt", chosen.meta["history"])
    print((out / "metrics.txt").read_text(), end="")
    print(f"selected iteration {chosen.disc_iter} -> {out / 'selected.ckpt'}")
    return 0


def cmd_register(args) -> int:
    from .datapipe import read_image, write_image
    from .registration import PaletteStainer, register_pipeline, save_transform

    af = read_image(args.af)[..., :2]
    stained = read_image(args.stained)
    if args.rough_stainer == "stub":
        stainer = PaletteStainer()
    elif args.rough_stainer == "none":
        stainer = None
    else:
        from .nets import load_networks

        nets, _ = load_networks(args.rough_stainer)
        stainer = nets.get("generator") or next(iter(nets.values()))
    res = register_pipeline(af, stained, stainer)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_transform(out / "affine.txt", res.affine)
    save_transform(out / "field.txt", res.field)
    write_image(out / "registered_af.png", np.clip(res.registered_af, 0, 1))
    for k, v in res.report.items():
        print(f"{k:<20}{v}")
    return 0


def _resolve_model(s: dict):
    from .trainer import select_model

    src = s.get("checkpoint")
    if not src:
        raise SystemExit("--checkpoint is required")
    return select_model(_load_checkpoints(src), iteration=s.get("iteration_override")).generator


def cmd_infer(args) -> int:
    from .datapipe import read_image, write_image
    from .slides import TileGrid, transform_slide

    s = _settings(args, {"tile_size": 256, "overlap": 32, "workers": 1})
    net = _resolve_model(s)
    img = read_image(args.input)
    if net.config.in_channels == 2:
        img = img[..., :2]
    out, rep = transform_slide(
        img, net, TileGrid(s["tile_size"], s["overlap"]), workers=s["workers"],
        condition_class=args.condition_class, microns_per_pixel=s.get("microns_per_pixel"),
    )
    write_image(args.output, out)
    print(rep.table())
    if args.csv:
        rows = ["metric,value", f"pixels,{rep.pixels}", f"seconds,{rep.seconds}", f"pixels_per_second,{rep.pixels_per_second}"]
        if rep.mm2_per_second is not None:
            rows.append(f"mm2_per_second,{rep.mm2_per_second}")
        _write_csv(args.csv, "\n".join(rows) + "\n")
    return 0


def cmd_pipeline(args) -> int:
    from .datapipe import read_image, write_image
    from .slides import TileGrid, run_pipeline

    s = _settings(args, {"tile_size": 256, "overlap": 32, "workers": 1})
    models = {}
    for spec in args.model or []:
        name, _, path = spec.partition("=")
        models[name] = select_model_file(path, s.get("iteration_override"))
    img = read_image(args.input)
    key = "he" if args.path == "he_to_special" else "af"
    if key == "af":
        img = img[..., :2]
    res = run_pipeline(args.path, {key: img}, models, TileGrid(s["tile_size"], s["overlap"]), workers=s["workers"])
    out = Path(args.output)
    write_image(out, res.output)
    if args.intermediates:
        for name, im in res.intermediates.items():
            write_image(out.with_name(f"{out.stem}_{name}{out.suffix}"), im)
    for stage, rep in res.reports.items():
        print(f"[{stage}]\n{rep.table()}")
    return 0


def select_model_file(path, iteration=None):
    from .trainer import select_model

    return select_model(_load_checkpoints(path), iteration=iteration).generator


def cmd_tally(args) -> int:
    from .study import read_records, table1_records, tally_study

    records = read_records(args.csv) if args.csv else table1_records()
    t = tally_study(records)
    print(t.table())
    if args.out_csv:
        _write_csv(args.out_csv, t.to_csv())
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="virtualstain", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write a synthetic paired-stain dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=56)
    p.add_argument("--n-val", type=int, default=8)
    p.add_argument("--size", type=int, default=712)
    _add_common(p, "seed")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train a stain, conditional or CycleGAN model")
    p.add_argument("--family", choices=["stain", "conditional", "cycle"], default="stain")
    p.add_argument("--data", required=True, help="phantom dataset root")
    p.add_argument("--stain", default="MT", choices=["MT", "PAS", "JMS"])
    p.add_argument("--out", required=True)
    _add_common(p, "seed", "checkpoint", "iteration_override")
    for key in ("total_disc_iters", "checkpoint_interval", "batch_size", "patch_size", "base_width", "iterations"):
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=CONFIG_KEYS[key], default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="align an autofluorescence image to a stained image")
    p.add_argument("--af", required=True, help="autofluorescence PNG (DAPI in red, Texas Red in green)")
    p.add_argument("--stained", required=True)
    p.add_argument("--rough-stainer", default="stub", help="'stub', 'none' or a checkpoint path")
    p.add_argument("--out", required=True)
    _add_common(p, "seed")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("infer", help="tiled inference over a whole image")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--condition-class", type=int, default=None)
    p.add_argument("--csv", help="write the throughput report as CSV")
    _add_common(p, "tile_size", "overlap", "seed", "microns_per_pixel", "checkpoint", "iteration_override", "workers")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("pipeline", help="run a staining path of chained models")
    p.add_argument("--path", required=True, choices=["he_to_special", "af_to_he_to_special", "af_to_special"])
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--model", action="append", metavar="STAGE=CKPT", help="stain_transform, virtual_he or virtual_special")
    p.add_argument("--intermediates", action="store_true")
    _add_common(p, "tile_size", "overlap", "seed", "microns_per_pixel", "iteration_override", "workers")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("tally", help="tally adjudication verdicts (defaults to the kidney study)")
    p.add_argument("--csv", help="case_id,pathologist_id,verdict CSV")
    p.add_argument("--out-csv")
    p.set_defaults(func=cmd_tally)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
