"""Independent reference implementations the tests check against.

Everything here is deliberately naive: brute-force transport LPs, double
loops over particles, textbook recursions. Slow but obviously correct.
"""

import numpy as np
from scipy.optimize import linprog


def w1_lp(xa, wa, xb, wb):
    """W1 between two weighted atom sets by solving the transport LP."""
    xa = np.asarray(xa, dtype=float)
    xb = np.asarray(xb, dtype=float)
    wa = np.asarray(wa, dtype=float)
    wb = np.asarray(wb, dtype=float)
    na, nb = xa.size, xb.size
    cost = np.abs(xa[:, None] - xb[None, :]).ravel()
    a_eq = np.zeros((na + nb, na * nb))
    for i in range(na):
        a_eq[i, i * nb : (i + 1) * nb] = 1.0
    for j in range(nb):
        a_eq[na + j, j::nb] = 1.0
    b_eq = np.concatenate([wa, wb])
    res = linprog(cost, A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    assert res.success, res.message
    return float(res.fun)


def rk4_path(f, y0, times, h_max=0.01):
    """Classic RK4 for dy/dt = f(t, y) evaluated at the given times."""
    times = np.asarray(times, dtype=float)
    out = np.empty(times.size)
    out[0] = y = float(y0)
    for i in range(1, times.size):
        t = times[i - 1]
        span = times[i] - t
        n_sub = max(1, int(np.ceil(span / h_max)))
        h = span / n_sub
        for _ in range(n_sub):
            k1 = f(t, y)
            k2 = f(t + 0.5 * h, y + 0.5 * h * k1)
            k3 = f(t + 0.5 * h, y + 0.5 * h * k2)
            k4 = f(t + h, y + h * k3)
            y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            t += h
        out[i] = y
    return out


def jump_sum_loop(kernel, x, dn):
    """sum_{j != i} dn_j h(x_j, x_i), written as the literal double loop."""
    n = x.size
    out = np.zeros(n)
    for i in range(n):
        for j in range(n):
            if j != i and dn[j] != 0:
                out[i] += dn[j] * float(kernel(x[j], x[i]))
    return out


def mean_interaction_loop(kernel, pool, x):
    """(1/|pool|) sum_p h(pool_p, x_i), literal double loop."""
    out = np.zeros(x.size)
    for i in range(x.size):
        for p in pool:
            out[i] += float(kernel(p, x[i]))
    return out / pool.size


def euler_ou_moments(x0, b, omega, sigma, dt, n_steps):
    """Exact mean and variance of the Euler chain
    x_{k+1} = x_k + omega (b - x_k) dt + sigma sqrt(dt) xi_k."""
    r = 1.0 - omega * dt
    mean = b + (x0 - b) * r**n_steps
    if r == 1.0:
        var = sigma**2 * dt * n_steps
    else:
        var = sigma**2 * dt * (1.0 - r ** (2 * n_steps)) / (1.0 - r * r)
    return mean, var


def ou_moments(x0, b, omega, sigma, t):
    """Continuum mean-reverting diffusion: mean and variance at time t."""
    mean = b + (x0 - b) * np.exp(-omega * t)
    var = sigma**2 / (2.0 * omega) * (1.0 - np.exp(-2.0 * omega * t))
    return mean, var
