"""Train one stain-transformation GAN on synthetic phantoms and report validation L1.

    python3 scripts/desk_training.py --stain MT --iters 5000 --out runs/mt
"""

import argparse
import time

from virtualstain.datapipe import PhantomSpec, StainPair, generate_phantom, phantom_specs
from virtualstain.nets import GeneratorConfig
from virtualstain.trainer import PairedPatchSource, Schedule, TrainConfig, train_stain_gan, validation_batches


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--stain", default="MT", choices=["MT", "PAS", "JMS"])
    ap.add_argument("--iters", type=int, default=5000, help="total discriminator iterations")
    ap.add_argument("--n-train", type=int, default=56)
    ap.add_argument("--n-val", type=int, default=8)
    ap.add_argument("--size", type=int, default=256, help="phantom side in pixels")
    ap.add_argument("--patch", type=int, default=64)
    ap.add_argument("--base-width", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None, help="directory for checkpoints and the metrics table")
    args = ap.parse_args()

    pairs = {"train": [], "val": []}
    for split, _, spec in phantom_specs(args.n_train, args.n_val, PhantomSpec(size=args.size), seed=args.seed):
        ph = generate_phantom(spec)
        pairs[split].append(StainPair(ph.he, ph.stains[args.stain], args.stain))
    vset = validation_batches([(p.he_ycc, p.special_ycc) for p in pairs["val"]], args.patch)

    # the 5000-iteration desk schedule, scaled: 7 -> 3 generator steps, 10 checkpoints
    schedule = Schedule(args.iters, 7, max(1, args.iters * 2 // 25), 3, max(1, args.iters // 10))
    t0 = time.perf_counter()
    ckpts = train_stain_gan(
        PairedPatchSource(pairs["train"], args.patch), schedule, seed=args.seed, validation=vset,
        gen_cfg=GeneratorConfig(base_width=args.base_width), train_cfg=TrainConfig(batch_size=1), out_dir=args.out,
    )
    elapsed = time.perf_counter() - t0
    first = ckpts[0].meta["initial_val_l1"]
    print(f"{'iteration':>10} {'val_l1':>8}")
    for c in ckpts:
        print(f"{c.disc_iter:>10} {c.val_l1:>8.4f}")
    print(f"initial {first:.4f} -> final {ckpts[-1].val_l1:.4f} ({ckpts[-1].val_l1 / first:.1%}) in {elapsed:.0f} s")


if __name__ == "__main__":
    main()
