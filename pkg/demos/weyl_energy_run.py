"""Short conformal Bach flow run on a 32 x 32 x 1 x 1 torus.

Prints the Weyl energy, the scalar-curvature drift and the pressure solver
work per record.  Takes seconds on one core.

    python demos/weyl_energy_run.py [steps]
"""
import sys

from cbflow.diagnostics import Monitor
from cbflow.flow import StepPolicy, initial_state, project_constant_scalar, run
from cbflow.oracle import doubly_warped, fourier
from cbflow.verify import thin_grid

S0 = -0.1


def main(steps=40):
    fam = doubly_warped(4, 0.05, active=2)
    w = fourier(fam.periods, (0.05, (0, 1, 0, 0), 0.5), (0.03, (1, 1, 0, 0), 1.3))
    metric, info = project_constant_scalar(fam.with_conformal(w).sample_to_grid(thin_grid(4, 32)), S0)
    print(f"projected onto S = {S0} in {info.iterations} Newton steps (sup error {info.residual:.1e})")
    policy = StepPolicy(scheme="rk2", max_steps=steps)
    state, ev = initial_state(metric, S0, policy=policy)
    traj = run(state, policy, max(1, steps // 10), evaluation=ev, monitor=Monitor(m_max=1))
    print(f"{'step':>5s} {'t':>11s} {'weyl energy':>15s} {'drift':>10s} {'iters':>6s}")
    for r in traj.records:
        print(f"{r.step:5d} {r.t:11.4e} {r.weyl_energy:15.10f} {r.scalar_drift:10.2e} "
              f"{r.solver_iterations:6d}")
    print("stopped:", traj.reason, traj.error or "")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 40)
