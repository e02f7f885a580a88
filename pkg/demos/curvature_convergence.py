"""Grid curvature against the pointwise oracle on thin grids of increasing size.

    python demos/curvature_convergence.py
"""
import math

from cbflow.oracle import doubly_warped
from cbflow.verify import GRID_QUANTITIES, identity_residuals, oracle_grid_errors, thin_grid

SIZES = (16, 32, 64)


def main():
    fam = doubly_warped(4, 0.1, active=2)
    errs = {N: oracle_grid_errors(fam, thin_grid(4, N), count=24) for N in SIZES}
    ids = {N: identity_residuals(fam.sample_to_grid(thin_grid(4, N))) for N in SIZES}
    rows = [(q, [errs[N][q] for N in SIZES]) for q in GRID_QUANTITIES]
    rows += [(k, [ids[N][k] for N in SIZES]) for k in ("dual_bach", "cotton_weyl", "bach_divergence")]
    print(f"{'quantity':18s}" + "".join(f"{'N=' + str(N):>12s}" for N in SIZES) + "   orders")
    for name, e in rows:
        orders = [math.log2(a / b) for a, b in zip(e, e[1:])]
        print(f"{name:18s}" + "".join(f"{x:12.3e}" for x in e)
              + "   " + " ".join(f"{p:5.2f}" for p in orders))


if __name__ == "__main__":
    main()
