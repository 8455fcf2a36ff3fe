"""
The blur-derivative identity behind the method
==============================================

For a Gaussian PSF rescaled to the consensus magnification, the derivative
with respect to sensor distance is proportional to its Laplacian:

    dk/ds = -(c^2 sigma A / s^3) lap(k)

This script checks it by finite differences on a small grid of depths and
apertures, then shows what a deliberately wrong aperture looks like.
"""
from dataclasses import replace

from dfdd import desk_optics
from dfdd.sim import scaled_psf_derivative_check

o = desk_optics()
print(" Z (m)   A (mm)   FD vs identity   closed forms")
for Z in (0.5, 1.0, 1.6):
    for A in (0.5e-3, 1e-3, 2e-3):
        r = scaled_psf_derivative_check(replace(o, A=A), Z)
        print(f" {Z:4.1f}   {A * 1e3:5.1f}      {r.fd_vs_identity:9.2e}     {r.closed_forms:9.2e}")

bad = scaled_psf_derivative_check(o, 0.5, A_rhs=2 * o.A)
print(f"aperture doubled on one side: relative error {bad.fd_vs_identity:.2f}, passed={bad.passed()}")
