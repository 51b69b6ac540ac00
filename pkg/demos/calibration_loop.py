"""Closed-loop flux calibration with a simulated Ramsey phase measurement.

A step pulse passes through an unknown distortion chain, the qubit phase is
measured for every pulse duration, and the flux step response is rebuilt
from the phase slope.  An IIR inverse and a residual FIR are fitted to that
response and the measurement is repeated with the predistorted pulse.
"""
import argparse

import numpy as np

import fluxdpd as fd
from fluxdpd.pipeline import load_config, run_cryoscope

CONFIG = __file__.rsplit("/", 2)[0] + "/configs/calibrate.json"


def settled_dev(resp, level, start):
    return np.max(np.abs(resp.raw_flux[start:] / level - 1))


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=CONFIG)
    ap.add_argument("--readout-sd", type=float, default=None)
    args = ap.parse_args()

    cfg = load_config(args.config)
    if args.readout_sd is not None:
        cfg.readout_sd = args.readout_sd
    fs = cfg.sample_rate
    n = int(round(cfg.tau_stop * fs)) + 1
    step = fd.make_step(cfg.amplitude_v, 0.0, n / fs, fs)
    level = cfg.transmon.flux_per_volt * cfg.amplitude_v

    trace, phase, resp = run_cryoscope(cfg, step)
    print(f"{len(trace.durations)} durations, final phase {phase.phase[-1] / (2 * np.pi):.1f} turns")

    measured = fd.Signal(resp.excursion(0.0).samples, fs)
    target = fd.make_step(1.0, 0.0, n / fs, fs)
    iir = fd.design_inverse_iir(measured, target, fd.SynthesisConfig(1, 2))
    fir = fd.design_residual_fir(fd.apply_iir(measured, iir), target, 48, regularization=1e-6)
    print("IIR b =", np.round(iir.feedforward, 5), "a =", np.round(iir.feedback, 5))

    settle = 47
    pre = fd.apply_iir(step, iir)
    for name, pulse in [("uncorrected", step), ("IIR", pre), ("IIR + FIR", fd.apply_fir(pre, fir))]:
        _, _, r = run_cryoscope(cfg, pulse)
        print(f"  {name:12s} max |flux/level - 1| after sample {settle}: {settled_dev(r, level, settle):.2e}")
