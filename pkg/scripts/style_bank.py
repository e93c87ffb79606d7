"""Train a small CycleGAN between H&E phantoms and a recoloured copy, then use it as a style bank.

The trained H&E->style generator is wrapped in an AugmentationBank and
applied to one phantom so the restyled image can be inspected.
"""

import argparse

import numpy as np

from virtualstain.datapipe import AugmentationBank, PhantomSpec, from_tensor4, generate_phantom, rgb_to_ycbcr, to_tensor4, write_image, ycbcr_to_rgb
from virtualstain.nets import build_cycle_pair
from virtualstain.trainer import cycle_consistency, train_cyclegan


def pools(n, size, patch):
    xs, ys = [], []
    for s in range(n):
        he = generate_phantom(PhantomSpec(size=size, seed=s)).he
        # an unpaired "other lab": channels rotated, contrast squeezed, crops from elsewhere
        other = np.clip(he[..., [1, 2, 0]] * 0.9 + 0.05, 0, 1)
        xs.append(to_tensor4(rgb_to_ycbcr(he))[:, :, :patch, :patch])
        ys.append(to_tensor4(rgb_to_ycbcr(other))[:, :, -patch:, -patch:])
    return np.concatenate(xs), np.concatenate(ys)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iters", type=int, default=500)
    ap.add_argument("--patch", type=int, default=16)
    ap.add_argument("--base-width", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="style_example.png")
    args = ap.parse_args()

    x, y = pools(12, 64, args.patch)
    G0, F0, _, _ = build_cycle_pair(base_width=args.base_width, input_size=(args.patch, args.patch), seed=args.seed)
    before = cycle_consistency(G0, F0, x)
    res = train_cyclegan(x, y, seed=args.seed, iterations=args.iters, base_width=args.base_width)
    after = cycle_consistency(res.G, res.F, x)
    print(f"cycle L1 {before:.4f} -> {after:.4f} after {args.iters} iterations")

    bank = AugmentationBank([res.G])
    he = generate_phantom(PhantomSpec(size=64, seed=99)).he
    styled = ycbcr_to_rgb(bank.apply(1, rgb_to_ycbcr(he).astype(np.float32)).astype(np.float64))
    write_image(args.out, np.clip(np.concatenate([he, styled], axis=1), 0, 1))
    print(f"wrote {args.out} (input | restyled)")


if __name__ == "__main__":
    main()
