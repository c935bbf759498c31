"""Compiled inner loops: explicit HJB steps, their exact adjoints, SDE paths."""
import numba
import numpy as np

# mode codes
LF = 0
UPWIND = 1


@numba.njit(cache=True)
def _extrapolate(cur, n):
    cur[0] = 2.0 * cur[1] - cur[2]
    cur[n - 1] = 2.0 * cur[n - 2] - cur[n - 3]


@numba.njit(cache=True)
def _fold(lam, n):
    # transpose of the linear-extrapolation boundary rows
    lam[1] += 2.0 * lam[0]
    lam[2] -= lam[0]
    lam[0] = 0.0
    lam[n - 2] += 2.0 * lam[n - 1]
    lam[n - 3] -= lam[n - 1]
    lam[n - 1] = 0.0


@numba.njit(cache=True)
def hjb_quad(f, nsteps, dt, h, ell, sign, theta, mode):
    """Backward sweep for phi_t + phi_xx/2 + sign*(phi_x^2/2 - ell) = 0."""
    n = f.shape[0]
    phi = np.empty((nsteps + 1, n))
    phi[nsteps] = f
    a = 0.5 + 0.5 * theta * h if mode == LF else 0.5
    nrow = ell.shape[0]
    for k in range(nsteps - 1, -1, -1):
        nxt = phi[k + 1]
        cur = phi[k]
        r = min(k + 1, nrow - 1)
        for i in range(1, n - 1):
            d2 = (nxt[i + 1] - 2.0 * nxt[i] + nxt[i - 1]) / (h * h)
            if mode == LF:
                p = (nxt[i + 1] - nxt[i - 1]) / (2.0 * h)
                ham = 0.5 * p * p
            else:
                pp = (nxt[i + 1] - nxt[i]) / h
                pm = (nxt[i] - nxt[i - 1]) / h
                if sign > 0:
                    ham = 0.5 * (max(pp, 0.0) ** 2 + min(pm, 0.0) ** 2)
                else:
                    ham = 0.5 * (max(pm, 0.0) ** 2 + min(pp, 0.0) ** 2)
            cur[i] = nxt[i] + dt * (a * d2 + sign * (ham - ell[r, i]))
        _extrapolate(cur, n)
    return phi


@numba.njit(cache=True)
def adjoint_quad(phi, w, dt, h, sign, theta, mode):
    """Transpose sweep: returns d(sum_i w_i phi[0, i]) / d phi[N, :].

    Read forward in time this is the discrete Fokker-Planck flow of w.
    """
    nsteps = phi.shape[0] - 1
    n = phi.shape[1]
    lam = w.copy()
    new = np.empty(n)
    a = 0.5 + 0.5 * theta * h if mode == LF else 0.5
    c = a / (h * h)
    for k in range(nsteps):
        _fold(lam, n)
        nxt = phi[k + 1]
        for j in range(n):
            new[j] = 0.0
        for i in range(1, n - 1):
            li = lam[i]
            if li == 0.0:
                continue
            if mode == LF:
                hp = sign * (nxt[i + 1] - nxt[i - 1]) / (2.0 * h)
                up = c + hp / (2.0 * h)
                dn = c - hp / (2.0 * h)
            else:
                pp = (nxt[i + 1] - nxt[i]) / h
                pm = (nxt[i] - nxt[i - 1]) / h
                if sign > 0:
                    up = c + max(pp, 0.0) / h
                    dn = c - min(pm, 0.0) / h
                else:
                    up = c - min(pp, 0.0) / h
                    dn = c + max(pm, 0.0) / h
            new[i] += li * (1.0 - dt * (up + dn))
            new[i + 1] += li * dt * up
            new[i - 1] += li * dt * dn
        for j in range(n):
            lam[j] = new[j]
    return lam


@numba.njit(cache=True)
def adjoint_quad_batch(phi, W, dt, h, sign, theta, mode):
    """adjoint_quad applied to every column of W (nodes x columns)."""
    nsteps = phi.shape[0] - 1
    n, m = W.shape
    lam = W.copy()
    new = np.empty((n, m))
    a = 0.5 + 0.5 * theta * h if mode == LF else 0.5
    c = a / (h * h)
    for k in range(nsteps):
        for q in range(m):
            lam[1, q] += 2.0 * lam[0, q]
            lam[2, q] -= lam[0, q]
            lam[0, q] = 0.0
            lam[n - 2, q] += 2.0 * lam[n - 1, q]
            lam[n - 3, q] -= lam[n - 1, q]
            lam[n - 1, q] = 0.0
        nxt = phi[k + 1]
        new[:] = 0.0
        for i in range(1, n - 1):
            if mode == LF:
                hp = sign * (nxt[i + 1] - nxt[i - 1]) / (2.0 * h)
                up = c + hp / (2.0 * h)
                dn = c - hp / (2.0 * h)
            else:
                pp = (nxt[i + 1] - nxt[i]) / h
                pm = (nxt[i] - nxt[i - 1]) / h
                if sign > 0:
                    up = c + max(pp, 0.0) / h
                    dn = c - min(pm, 0.0) / h
                else:
                    up = c - min(pp, 0.0) / h
                    dn = c + max(pm, 0.0) / h
            stay = 1.0 - dt * (up + dn)
            for q in range(m):
                li = lam[i, q]
                new[i, q] += li * stay
                new[i + 1, q] += li * dt * up
                new[i - 1, q] += li * dt * dn
        lam, new = new, lam
    return lam


@numba.njit(cache=True)
def _table_eval(tab, r, i, p, p0, dp):
    m = tab.shape[2]
    u = (p - p0) / dp
    j = int(np.floor(u))
    if j < 0:
        j = 0
    elif j > m - 2:
        j = m - 2
    s = tab[r, i, j + 1] - tab[r, i, j]
    return tab[r, i, j] + (u - j) * s, s / dp


@numba.njit(cache=True)
def hjb_table(f, nsteps, dt, h, tab, p0, dp, r0, r1, wr, sign, theta):
    """Lax-Friedrichs sweep with H tabulated on a momentum grid per node."""
    n = f.shape[0]
    phi = np.empty((nsteps + 1, n))
    phi[nsteps] = f
    a = 0.5 + 0.5 * theta * h
    for k in range(nsteps - 1, -1, -1):
        nxt = phi[k + 1]
        cur = phi[k]
        for i in range(1, n - 1):
            d2 = (nxt[i + 1] - 2.0 * nxt[i] + nxt[i - 1]) / (h * h)
            p = (nxt[i + 1] - nxt[i - 1]) / (2.0 * h)
            h0, _ = _table_eval(tab, r0[k], i, p, p0, dp)
            h1, _ = _table_eval(tab, r1[k], i, p, p0, dp)
            ham = (1.0 - wr[k]) * h0 + wr[k] * h1
            cur[i] = nxt[i] + dt * (a * d2 + sign * ham)
        _extrapolate(cur, n)
    return phi


@numba.njit(cache=True)
def adjoint_table(phi, w, dt, h, tab, p0, dp, r0, r1, wr, sign, theta):
    nsteps = phi.shape[0] - 1
    n = phi.shape[1]
    lam = w.copy()
    new = np.empty(n)
    a = 0.5 + 0.5 * theta * h
    c = a / (h * h)
    for k in range(nsteps):
        _fold(lam, n)
        nxt = phi[k + 1]
        for j in range(n):
            new[j] = 0.0
        for i in range(1, n - 1):
            li = lam[i]
            if li == 0.0:
                continue
            p = (nxt[i + 1] - nxt[i - 1]) / (2.0 * h)
            _, s0 = _table_eval(tab, r0[k], i, p, p0, dp)
            _, s1 = _table_eval(tab, r1[k], i, p, p0, dp)
            hp = sign * ((1.0 - wr[k]) * s0 + wr[k] * s1)
            up = c + hp / (2.0 * h)
            dn = c - hp / (2.0 * h)
            new[i] += li * (1.0 - dt * (up + dn))
            new[i + 1] += li * dt * up
            new[i - 1] += li * dt * dn
        for j in range(n):
            lam[j] = new[j]
    return lam


@numba.njit(cache=True)
def drift_at(drift, drift_dt, x_min, h, t, x):
    """Bilinear interpolation of a (time level x node) table, clamped at the edges."""
    nt, nx = drift.shape
    ut = t / drift_dt
    r = int(np.floor(ut))
    if r < 0:
        r = 0
    elif r > nt - 2:
        r = nt - 2
    wt = ut - r
    if wt < 0.0:
        wt = 0.0
    elif wt > 1.0:
        wt = 1.0
    u = (x - x_min) / h
    i = int(np.floor(u))
    if i < 0:
        i = 0
    elif i > nx - 2:
        i = nx - 2
    fr = u - i
    if fr < 0.0:
        fr = 0.0
    elif fr > 1.0:
        fr = 1.0
    b0 = (1.0 - fr) * drift[r, i] + fr * drift[r, i + 1]
    b1 = (1.0 - fr) * drift[r + 1, i] + fr * drift[r + 1, i + 1]
    return (1.0 - wt) * b0 + wt * b1


@numba.njit(cache=True)
def euler_paths(x0, noise, drift, drift_dt, x_min, h, dt, record):
    """Euler-Maruyama paths clamped to the grid hull.

    Returns (positions, escape mask). Positions have shape (paths, steps + 1)
    when ``record`` and (paths, 2) otherwise.
    """
    npaths, nsteps = noise.shape
    nx = drift.shape[1]
    x_max = x_min + (nx - 1) * h
    ncol = nsteps + 1 if record else 2
    out = np.empty((npaths, ncol))
    escaped = np.zeros(npaths, dtype=np.bool_)
    sq = np.sqrt(dt)
    for j in range(npaths):
        x = x0[j]
        out[j, 0] = x
        for k in range(nsteps):
            b = drift_at(drift, drift_dt, x_min, h, k * dt, x)
            x = x + b * dt + sq * noise[j, k]
            if x < x_min:
                x = x_min
                escaped[j] = True
            elif x > x_max:
                x = x_max
                escaped[j] = True
            if record:
                out[j, k + 1] = x
        if not record:
            out[j, 1] = x
    return out, escaped


@numba.njit(cache=True)
def drift_along(pos, drift, drift_dt, x_min, h, dt):
    """Drift evaluated at the left endpoint of every step of every path."""
    npaths = pos.shape[0]
    nsteps = pos.shape[1] - 1
    beta = np.empty((npaths, nsteps))
    for j in range(npaths):
        for k in range(nsteps):
            beta[j, k] = drift_at(drift, drift_dt, x_min, h, k * dt, pos[j, k])
    return beta


@numba.njit(cache=True)
def kinetic_action(pos, drift, drift_dt, x_min, h, dt):
    """Left-endpoint sum of beta^2/2 dt per path."""
    npaths = pos.shape[0]
    nsteps = pos.shape[1] - 1
    out = np.zeros(npaths)
    for j in range(npaths):
        acc = 0.0
        for k in range(nsteps):
            b = drift_at(drift, drift_dt, x_min, h, k * dt, pos[j, k])
            acc += 0.5 * b * b
        out[j] = acc * dt
    return out


@numba.njit(cache=True)
def count_concordant(a_rank, b_rank, nb):
    """Pairs with a_i < a_j and b_i < b_j (strict), inputs sorted by a_rank."""
    tree = np.zeros(nb + 1, dtype=np.int64)
    n = a_rank.shape[0]
    total = 0
    start = 0
    while start < n:
        stop = start
        while stop < n and a_rank[stop] == a_rank[start]:
            stop += 1
        for j in range(start, stop):
            i = b_rank[j]  # count inserted ranks < b_rank[j]
            s = 0
            while i > 0:
                s += tree[i]
                i -= i & (-i)
            total += s
        for j in range(start, stop):
            i = b_rank[j] + 1
            while i <= nb:
                tree[i] += 1
                i += i & (-i)
        start = stop
    return total
