"""Minimum-tap inverse filters for three common flux-line distortions.

Each model is applied to an ideal unit step, an inverse IIR filter is fitted
by least squares, and the NMSE of the corrected step is printed along with
the full grid of (M_a, M_b) scores.
"""
import argparse
import math

import numpy as np

import fluxdpd as fd

FS = 2.4e9


def run(name, model, duration, threshold, max_m_a=2, max_m_b=4, allow_marginal=False):
    target = fd.make_step(1.0, 0.0, duration, FS)
    measured = fd.apply_distortion(model, target)
    res = fd.search_min_taps(measured, target, threshold, max_m_a, max_m_b,
                             exhaustive=True, allow_marginal=allow_marginal)
    print(f"\n{name}: uncorrected NMSE {fd.nmse_db(target, measured):7.1f} dB")
    print("        " + " ".join(f"Mb={mb:<5d}" for mb in range(1, max_m_b + 1)))
    for ma in range(max_m_a + 1):
        cells = []
        for mb in range(1, max_m_b + 1):
            v = res.grid.get((ma, mb))
            cells.append("  skip " if v is None else f"{max(v, -999):7.1f}")
        print(f"  Ma={ma}  " + " ".join(cells))
    print(f"  smallest passing: ({res.config.m_a}, {res.config.m_b}) at {res.nmse_db:.1f} dB")
    return res


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--threshold", type=float, default=-30.0, help="target NMSE in dB")
    ap.add_argument("--tau-bias-tee", type=float, default=100e-6)
    args = ap.parse_args()

    run("AWG low-pass (20 ns period, zeta 0.6)", fd.SecondOrderAwg.from_period(20e-9, 0.6), 200e-9, args.threshold)
    # a 10% overshoot is already near -33 dB, so a plain gain can pass a loose threshold
    run("overshoot (A 0.1, tau 100 ns)", fd.ExponentialOvershoot(0.1, 100e-9), 1e-6, args.threshold)
    # the exact inverse of a high-pass has its pole on the unit circle
    run(f"bias tee (tau {args.tau_bias_tee:g} s)", fd.BiasTeeHighPass(args.tau_bias_tee),
        args.tau_bias_tee, args.threshold, max_m_a=1, max_m_b=2, allow_marginal=True)

    a, tau = 0.1, 100e-9
    r = math.exp(-1 / (FS * tau))
    print("\nanalytic overshoot inverse b =", np.round([1 / (1 + a), -r / (1 + a)], 6),
          " a =", np.round([(r + a) / (1 + a)], 6))
