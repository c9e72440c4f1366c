"""Compiled per-instance loops for the forward mirror-descent solve.

These mirror the vectorized reference code in :mod:`ipmo.solver` and
:mod:`ipmo.core` operation for operation; the batched numpy path spends most
of its time in interpreter overhead once only a few slow instances remain.
"""
from __future__ import annotations

import numpy as np
from numba import njit

RECHECK_EVERY = 25
COUPLED_SAFETY = 0.9


@njit(cache=True)
def _clamp_row(row, floor, tol):
    n = row.shape[0]
    s = 0.0
    low = False
    for i in range(n):
        s += row[i]
        if row[i] < floor:
            low = True
    if not low and abs(s - 1.0) <= tol:
        return
    pinned = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        pinned[i] = row[i] < floor
    scaled = row.copy()
    for _ in range(n):
        k = 0
        free_sum = 0.0
        for i in range(n):
            if pinned[i]:
                k += 1
            else:
                free_sum += row[i]
        scale = (1.0 - floor * k) / free_sum
        newly = False
        for i in range(n):
            if pinned[i]:
                scaled[i] = floor
            else:
                scaled[i] = row[i] * scale
                if scaled[i] < floor:
                    newly = True
        if not newly:
            break
        for i in range(n):
            if not pinned[i] and scaled[i] < floor:
                pinned[i] = True
    row[:] = scaled


@njit(cache=True)
def _grads(z, z0, y, v, delta, lam, kappa, g):
    h, n = z.shape
    for s in range(h):
        for i in range(n):
            acc = 0.0
            for j in range(n):
                acc += v[s, i, j] * z[s, j]
            g[s, i] = delta * acc - y[s, i]
    if lam != 0.0:
        for s in range(h):
            for i in range(n):
                prev = z0[i] if s == 0 else z[s - 1, i]
                d = z[s, i] - prev
                dr = d / np.sqrt(d * d + kappa)
                g[s, i] += lam * dr
                if s > 0:
                    g[s - 1, i] -= lam * dr


@njit(cache=True)
def _md_map(z, z0, y, v, eta, delta, lam, kappa, g, out):
    h, n = z.shape
    _grads(z, z0, y, v, delta, lam, kappa, g)
    for s in range(h):
        amax = -np.inf
        for i in range(n):
            a = -eta * g[s, i]
            if not np.isfinite(a):
                return False
            g[s, i] = a
            if a > amax:
                amax = a
        tot = 0.0
        for i in range(n):
            r = z[s, i] * np.exp(g[s, i] - amax)
            out[s, i] = r
            tot += r
        for i in range(n):
            out[s, i] /= tot
    return True


@njit(cache=True)
def _curv(d, kappa):
    return kappa / (d * d + kappa) ** 1.5


@njit(cache=True)
def _pair_curv(z, z0, kappa, lam, pair):
    # rho'' of the trade into stage s plus that of the trade out of it
    h, n = z.shape
    if lam == 0.0:
        pair[:, :] = 0.0
        return
    for s in range(h):
        for i in range(n):
            prev = z0[i] if s == 0 else z[s - 1, i]
            pair[s, i] = _curv(z[s, i] - prev, kappa)
    for s in range(h - 1):
        for i in range(n):
            pair[s, i] += _curv(z[s + 1, i] - z[s, i], kappa)


@njit(cache=True)
def _bounds(z, z0, v, vmax, delta, lam, kappa, pair, exact):
    """(block bound, coupled bound); with ``exact=False`` the block bound is a cheap lower estimate."""
    h, n = z.shape
    _pair_curv(z, z0, kappa, lam, pair)
    block = np.inf
    qc = 0.0
    zall = 0.0
    for s in range(h):
        zmax = 0.0
        pmax = 0.0
        for i in range(n):
            if z[s, i] > zmax:
                zmax = z[s, i]
            if pair[s, i] > pmax:
                pmax = pair[s, i]
        if zmax > zall:
            zall = zmax
        if exact:
            q = delta * v[s].copy()
            for i in range(n):
                q[i, i] += lam * pair[s, i]
            qn = np.linalg.eigvalsh(q)[-1]
        else:
            qn = delta * vmax[s] + lam * pmax
        b = 2.0 / (qn * zmax)
        if b < block:
            block = b
        c = delta * vmax[s] + 2.0 * lam * pmax
        if c > qc:
            qc = c
    return block, 2.0 / (qc * zall)


@njit(cache=True)
def _auto_eta(z, z0, v, vmax, delta, lam, kappa, pair, fraction):
    block, coupled = _bounds(z, z0, v, vmax, delta, lam, kappa, pair, True)
    return min(fraction * block, COUPLED_SAFETY * coupled), block, coupled


@njit(cache=True)
def _needs_shrink(eta, z, z0, v, vmax, delta, lam, kappa, pair):
    lo, coupled = _bounds(z, z0, v, vmax, delta, lam, kappa, pair, False)
    if eta < lo and eta < coupled:
        return False
    block, coupled = _bounds(z, z0, v, vmax, delta, lam, kappa, pair, True)
    return eta >= block or eta >= coupled


@njit(cache=True)
def solve_batch(z, z0, y, v, vmax, eta, fixed, fraction, delta, lam, kappa, tol, max_iters, floor,
                simplex_tol, residual, iters, converged):
    """In-place solve of every instance in a flat batch; returns False on a non-finite step."""
    b, h, n = z.shape
    g = np.empty((h, n))
    new = np.empty((h, n))
    pair = np.empty((h, n))
    for k in range(b):
        zk = z[k]
        res = np.inf
        it = 0
        done = False
        while it < max_iters:
            if not _md_map(zk, z0[k], y[k], v[k], eta[k], delta, lam, kappa, g, new):
                return False
            for s in range(h):
                _clamp_row(new[s], floor, simplex_tol)
            res = 0.0
            for s in range(h):
                for i in range(n):
                    d = abs(new[s, i] - zk[s, i])
                    if d > res:
                        res = d
            it += 1
            done = res <= tol
            if not fixed and it % RECHECK_EVERY == 0 and not done:
                if _needs_shrink(eta[k], zk, z0[k], v[k], vmax[k], delta, lam, kappa, pair):
                    eta[k] = _auto_eta(zk, z0[k], v[k], vmax[k], delta, lam, kappa, pair, fraction)[0]
            if done and not fixed:
                # contraction is only certified for eta below the bound at the solution itself
                safe, block, coupled = _auto_eta(zk, z0[k], v[k], vmax[k], delta, lam, kappa, pair, fraction)
                if eta[k] >= block or eta[k] >= coupled:
                    eta[k] = safe
                    done = False
            if done:
                break
            zk[:, :] = new
        residual[k] = res
        iters[k] = it
        converged[k] = done
    return True
