#!/usr/bin/env python3
"""Regenerate the frozen golden files under tests/golden/.

Run once and commit the output; the tests then guard against regressions
of the P1 eigenstructure and its field-dependent transition comb.
"""

from pathlib import Path

import numpy as np

from nvdephase import spin_core as sc
from nvdephase.constants import GAUSS_TO_TESLA

GOLDEN = Path(__file__).resolve().parent.parent / "tests" / "golden"


def p1_zero_field_eigenvalues() -> None:
    vals = sc.eigensystem(sc.build_p1_hamiltonian(np.zeros(3))).values
    path = GOLDEN / "p1_zero_field_eigenvalues.csv"
    with path.open("w") as fh:
        fh.write("eigenvalue_mhz\n")
        for v in vals:
            fh.write(f"{v:.12f}\n")
    print(f"wrote {path}")


def p1_spectrum_vs_b() -> None:
    sx = np.kron(sc.spin_operators(0.5).sx.entries, np.eye(3))
    rows = []
    for b_gauss in (2.0, 9.5, 30.0, 60.0, 120.0):
        b = np.array([0.0, 0.0, b_gauss * GAUSS_TO_TESLA])
        for flag, orientation in ((0, sc.ON_AXIS), (1, sc.OFF_AXIS)):
            h = sc.build_p1_hamiltonian(b, orientation)
            for line in sc.transition_spectrum(h, sx):
                rows.append((b_gauss, line.freq_mhz, line.strength,
                             line.upper, line.lower, flag))
    path = GOLDEN / "p1_spectrum_vs_b.csv"
    with path.open("w") as fh:
        fh.write("b_gauss,freq_mhz,strength,n,m,off_axis\n")
        for b_gauss, freq, strength, n, m, flag in rows:
            fh.write(f"{b_gauss},{freq:.9f},{strength:.9e},{n},{m},{flag}\n")
    print(f"wrote {path} ({len(rows)} lines)")


if __name__ == "__main__":
    GOLDEN.mkdir(exist_ok=True)
    p1_zero_field_eigenvalues()
    p1_spectrum_vs_b()
