#!/usr/bin/env python3
"""Inverse-warp wall time against output size (bilinear and bicubic).

    python scripts/warp_benchmark.py --repeats 3
"""
import argparse
import time

import numpy as np

from fundusreg.geometry import AffineHomography, RadialDistortion, RegistrationModel, image_centre
from fundusreg.montage import default_fov, radial_k_from_geometry
from fundusreg.synthetic import synthetic_fundus
from fundusreg.warp import warp_image

SIZES = [(392, 588), (784, 1176), (1176, 1764), (1568, 2352)]


def model_for(shape):
    h, w = shape
    d = RadialDistortion.for_image(0.0, w, h)
    d = d.with_k(radial_k_from_geometry(default_fov(shape).radius, d.norm_scale))
    H = AffineHomography.similarity(np.deg2rad(5), 1.0, (0.12 * w, 0.05 * h), image_centre(w, h))
    return RegistrationModel(H, d, d, "one")


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()
    print(f"{'size':>11}{'Mpx':>7}{'bilinear s':>12}{'bicubic s':>11}{'s/Mpx':>8}")
    for shape in SIZES:
        img, fov = synthetic_fundus(shape, seed=0)
        model = model_for(shape)
        best = {}
        for order in (1, 3):
            times = []
            for _ in range(args.repeats):
                t0 = time.perf_counter()
                warp_image(img, model, shape, fov, fov, order=order)
                times.append(time.perf_counter() - t0)
            best[order] = min(times)
        mpx = shape[0] * shape[1] / 1e6
        print(f"{shape[0]:>5}x{shape[1]:<5}{mpx:7.2f}{best[1]:12.3f}{best[3]:11.3f}{best[1] / mpx:8.3f}")


if __name__ == "__main__":
    main()
