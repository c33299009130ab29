"""Compiled inner loops for the two-scale integrator.

The model drift is coordinatewise: slow drift -u*(x - y)/gamma, fast drift
-(grad phi(y) + (y - x)/gamma)/eps with the registered separable problem
families inlined by integer code. Noise increments arrive pre-scaled to
variance h, so the fast noise coefficient is exactly sqrt(2/(eps*beta)).
"""

import math

from numba import njit

U_MODE_SCALAR = 0      # one control value per step
U_MODE_TABLE = 1       # static lookup table over a uniform y-grid (1-D)
U_MODE_DESCENT = 2     # hi where (x - y)*x > 0 else lo (1-D)


@njit(inline="always")
def _grad_w(fam, s):
    if fam == 0:
        return 0.0
    if fam == 1:
        return s
    a = abs(s)
    if a <= 2.0:
        return s * (s * s - 1.0)
    g = 6.0 + 11.0 * (a - 2.0)
    return g if s > 0.0 else -g


@njit(cache=True, nogil=True)
def two_scale_block(
    x,            # (P, n) slow states, updated in place
    y,            # (P, m) fast states, updated in place
    fam,          # family code
    gamma,
    eps,
    beta,
    h,
    u_mode,
    u_steps,      # (steps,) scalar control per step (mode 0; else unused)
    tab_y0,
    tab_dy,
    tab_vals,     # (n_tab,) table values (mode 1; else unused)
    u_lo,
    u_hi,
    sig_x,        # scalar slow diffusion coefficient (already at this eps)
    use_xnoise,
    dwx,          # (steps, P, n) slow increments, variance h (or dummy)
    dwy,          # (steps, P, m) fast increments, variance h
    freeze_slow,
    u_out,        # (P,) control applied at the first step, written once
):
    steps = dwy.shape[0]
    n_paths = x.shape[0]
    dim = x.shape[1]
    inv_g = 1.0 / gamma
    fast_coef = math.sqrt(2.0 / (eps * beta))
    sqrt2 = math.sqrt(2.0)
    n_tab = tab_vals.shape[0]
    for j in range(steps):
        for p in range(n_paths):
            if u_mode == U_MODE_SCALAR:
                u = u_steps[j]
            elif u_mode == U_MODE_TABLE:
                idx = int(math.floor((y[p, 0] - tab_y0) / tab_dy + 0.5))
                if idx < 0:
                    idx = 0
                elif idx >= n_tab:
                    idx = n_tab - 1
                u = tab_vals[idx]
            else:
                u = u_hi if (x[p, 0] - y[p, 0]) * x[p, 0] > 0.0 else u_lo
            if j == 0:
                u_out[p] = u
            for d in range(dim):
                xd = x[p, d]
                yd = y[p, d]
                drift_y = -(_grad_w(fam, yd) + (yd - xd) * inv_g)
                if not freeze_slow:
                    new_x = xd - u * (xd - yd) * inv_g * h
                    if use_xnoise:
                        new_x += sqrt2 * sig_x * dwx[j, p, d]
                    x[p, d] = new_x
                y[p, d] = yd + drift_y * (h / eps) + fast_coef * dwy[j, p, d]
    return 0
