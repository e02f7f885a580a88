"""B(e^{2w} g) against e^{-2w} B(g) in dimension 4, thin and full grids.

    python demos/conformal_invariance.py
"""
from cbflow.mesh import Grid
from cbflow.oracle import doubly_warped, fourier
from cbflow.verify import conformal_invariance_error, thin_grid

thin = doubly_warped(4, 0.1, active=2)
w = fourier(thin.periods, (0.1, (1, 0, 0, 0), 0.3), (0.05, (1, 1, 0, 0), 1.0))
for N in (16, 32, 64):
    print(f"thin N={N:3d}  {conformal_invariance_error(thin, w, thin_grid(4, N)):.3e}")

full = doubly_warped(4, 0.1)
w4 = fourier(full.periods, (0.05, (0, 1, 0, 0), 0.5), (0.03, (1, 1, 0, 0), 1.3),
             (0.03, (0, 0, 1, 1), 0.7))
for N in (8, 12):  # 16^4 needs about 2 GB
    print(f"full N={N:3d}  {conformal_invariance_error(full, w4, Grid((N,) * 4)):.3e}")
