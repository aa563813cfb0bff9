"""Sanity checks on the numerical core, printed as a short table.

Energy should be flat for the undamped pendulum, mass flat for pure diffusion,
and halving the RK4 step should cut the error by roughly 2**4.
"""
from hybridaug.checks import energy_drift, mass_drift, rk4_order_factor, run_selfcheck

print(f"pendulum energy drift over 20 s : {energy_drift():.2e}")
print(f"diffusion mass drift, 50 frames : {mass_drift():.2e}")
print(f"RK4 step-halving error ratio    : {rk4_order_factor():.2f}")

print("\nfinite-difference gradient checks")
for r in run_selfcheck():
    if r.name.startswith("grad:"):
        print(f"  {r.name[5:]:<20s} {r.value:.1e}  {'ok' if r.passed else 'FAIL'}")
