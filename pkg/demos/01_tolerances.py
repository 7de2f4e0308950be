"""
How much disturbance can each architecture absorb?
===================================================

The plant-side filter reacts to the measured state, so its tolerance only
depends on the barrier margin. The remote controller acts on a prediction
that is ``tau`` steps old and plans ``N`` steps ahead, so every step of delay
and horizon multiplies the error by the dynamics constant ``L_d``.
"""
import numpy as np

from netcbf import bounds

# A comfortable toy: margin 0.1, decay 0.2, and nearly contractive dynamics.
t = bounds.ToleranceInputs(h_value=0.1, gamma=0.2, L_h=1.0, L_f=1.0, L_g=0.05, u_max=1.0, tau=3, horizon=4)
tab = bounds.tolerance_table(t)
print("L_d            ", tab["L_d"])
print("local          ", tab["w_bar_l"])
for l, w in enumerate(tab["w_bar_r"], start=1):
    print(f"remote, l={l}    ", w)
print("clauses        ", tab["clause1"], tab["clause2"], tab["clause3"])

# With no delay and a single-step horizon both tolerances coincide.
z = bounds.ToleranceInputs(0.1, 0.2, 1.0, 1.0, 0.05, 1.0, tau=0, horizon=1)
print("\ntau=0, N=1:", bounds.local_tolerance(z), bounds.remote_tolerance(z, 1))

# The ratio local / remote explodes with L_d. The arm's constants
# (sampled over its operating region) put L_d above 10.
print("\nratio w_bar_l / w_bar_r at tau=7, N=5")
for L_d in (0.9, 1.0, 1.1, 1.5, 2.0, 5.0, 10.8):
    r = bounds.ToleranceInputs(0.01, 0.1, 1.0, L_d, 0.0, 1.0, tau=7, horizon=5)
    print(f"  L_d = {L_d:5.2f}   ratio = {bounds.local_tolerance(r) / bounds.remote_tolerance_horizon(r):.3g}")

# Under the same delay, a shorter horizon gives back some of the margin.
print("\nremote tolerance for L_d = 1.1 as a function of (tau, N)")
for tau in (0, 3, 7):
    row = [bounds.remote_tolerance_horizon(bounds.ToleranceInputs(0.01, 0.1, 1.0, 1.1, 0.0, 1.0, tau, N))
           for N in (1, 3, 5)]
    print(f"  tau={tau}: " + "  ".join(f"{w:.3e}" for w in row))

# Prediction error after tau steps, for disturbances at the local bound.
print("\npredictor error bound:", bounds.prediction_error_bound(t, tab["w_bar_l"]))
print("grid of G(tau, l) for L_d = 1.1:")
print(np.array([[bounds.gain_G(tau, l, 1.1) for l in range(1, 6)] for tau in range(0, 8)]).round(2))
