"""Tiled-inference throughput of a desk generator over a synthetic whole image."""

import argparse

from virtualstain.datapipe import PhantomSpec, generate_phantom
from virtualstain.nets import GeneratorConfig, build_generator
from virtualstain.slides import TileGrid, transform_slide


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size", type=int, default=1024)
    ap.add_argument("--tile", type=int, default=256)
    ap.add_argument("--overlap", type=int, default=32)
    ap.add_argument("--base-width", type=int, default=8)
    ap.add_argument("--workers", type=int, nargs="+", default=[1, 2])
    ap.add_argument("--microns-per-pixel", type=float, default=0.5)
    args = ap.parse_args()

    he = generate_phantom(PhantomSpec(size=args.size, seed=0)).he
    net = build_generator(GeneratorConfig(base_width=args.base_width), seed=0)
    for w in args.workers:
        _, rep = transform_slide(he, net, TileGrid(args.tile, args.overlap), workers=w, microns_per_pixel=args.microns_per_pixel)
        print(f"workers={w}")
        print(rep.table())


if __name__ == "__main__":
    main()
