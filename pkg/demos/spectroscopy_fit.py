"""Fit transmon energies and the voltage-to-flux map to a spectroscopy scan.

Simulates a two-tone map over a range of bias voltages, picks the resonance
in each column and refines (E_C, E_J, k, offset) with Levenberg-Marquardt.
"""
import argparse

import numpy as np

import fluxdpd as fd

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--noise", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    truth = fd.TransmonParams(0.2e9, 15e9, 0.5, 0.05)
    volts = np.linspace(-0.3, 0.7, 41)
    fq = fd.flux_to_frequency(truth, fd.voltage_to_flux(truth, volts))
    lw = 30e6
    freqs = np.linspace(fq.min() - 3 * lw, fq.max() + 3 * lw, 201)
    smap = fd.simulate_spectroscopy(truth, volts, freqs, lw, 0.5, args.noise, args.seed)

    peaks = fd.extract_peaks(smap)
    print(f"{len(peaks)} peaks from {len(volts)} voltages")
    guess = fd.TransmonParams(0.24e9, 12e9, 0.6, 0.04)
    fit = fd.fit_spectroscopy(peaks, guess)
    print(f"converged in {fit.iterations} iterations, rms residual {fit.rms_residual_hz / 1e3:.1f} kHz")
    for name, got, want in [
        ("E_C [GHz]", fit.params.ec_hz / 1e9, 0.2),
        ("E_J [GHz]", fit.params.ej_hz / 1e9, 15.0),
        ("k [1/V]", fit.params.flux_per_volt, 0.5),
        ("offset", fit.params.flux_offset, 0.05),
    ]:
        print(f"  {name:10s} {got:10.5f}   (true {want}, rel err {abs(got / want - 1):.1e})")
