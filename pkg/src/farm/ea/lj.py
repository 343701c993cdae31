"""Lennard-Jones 12-6 cluster energy, gradient and local minimization (eps = sigma = 1)."""
from __future__ import annotations

import math

import numpy as np
from numba import njit

PAIR_MIN_R = 2.0 ** (1.0 / 6.0)
LJ13_GLOBAL_MIN = -44.326801
"""Published global minimum of the 13-atom cluster (Mackay icosahedron)."""


class NonFinite(ValueError):
    """Coincident atoms or non-finite coordinates."""


class Diverged(RuntimeError):
    """Minimization produced a non-finite energy."""


@njit(cache=True, nogil=True, error_model="numpy")
def _energy(x):
    n = x.shape[0]
    e = 0.0
    for i in range(n - 1):
        for j in range(i + 1, n):
            dx = x[i, 0] - x[j, 0]
            dy = x[i, 1] - x[j, 1]
            dz = x[i, 2] - x[j, 2]
            ir2 = 1.0 / (dx * dx + dy * dy + dz * dz)
            ir6 = ir2 * ir2 * ir2
            e += 4.0 * (ir6 * ir6 - ir6)
    return e


@njit(cache=True, nogil=True, error_model="numpy")
def _energy_grad(x, g):
    n = x.shape[0]
    e = 0.0
    g[:, :] = 0.0
    for i in range(n - 1):
        for j in range(i + 1, n):
            dx = x[i, 0] - x[j, 0]
            dy = x[i, 1] - x[j, 1]
            dz = x[i, 2] - x[j, 2]
            ir2 = 1.0 / (dx * dx + dy * dy + dz * dz)
            ir6 = ir2 * ir2 * ir2
            e += 4.0 * (ir6 * ir6 - ir6)
            # dE/dr * (1/r) = -(48 r^-14 - 24 r^-8)
            f = (24.0 * ir6 - 48.0 * ir6 * ir6) * ir2
            g[i, 0] += f * dx
            g[i, 1] += f * dy
            g[i, 2] += f * dz
            g[j, 0] -= f * dx
            g[j, 1] -= f * dy
            g[j, 2] -= f * dz
    return e


@njit(cache=True, nogil=True, error_model="numpy")
def _lbfgs(x0, max_iter, g_tol, memory, max_step):
    """Returns (x, energy, iterations, status); status 0 converged, 1 max_iter, 2 stalled, 3 non-finite."""
    n = x0.shape[0]
    dim = 3 * n
    x = x0.copy().reshape(dim)
    g = np.empty(dim)
    e = _energy_grad(x.reshape(n, 3), g.reshape(n, 3))
    if not math.isfinite(e):
        return x.reshape(n, 3), e, 0, 3
    s_hist = np.zeros((memory, dim))
    y_hist = np.zeros((memory, dim))
    rho = np.zeros(memory)
    alpha_buf = np.zeros(memory)
    stored = 0
    head = 0
    x_new = np.empty(dim)
    g_new = np.empty(dim)
    d = np.empty(dim)
    for it in range(max_iter):
        if np.max(np.abs(g)) <= g_tol:
            return x.reshape(n, 3), e, it, 0
        # two-loop recursion
        d[:] = -g
        for k in range(stored):
            idx = (head - 1 - k) % memory
            a = rho[idx] * np.dot(s_hist[idx], d)
            alpha_buf[idx] = a
            d -= a * y_hist[idx]
        if stored > 0:
            last = (head - 1) % memory
            d *= np.dot(s_hist[last], y_hist[last]) / np.dot(y_hist[last], y_hist[last])
        for k in range(stored - 1, -1, -1):
            idx = (head - 1 - k) % memory
            b = rho[idx] * np.dot(y_hist[idx], d)
            d += (alpha_buf[idx] - b) * s_hist[idx]
        slope = np.dot(g, d)
        if not slope < 0.0:
            d[:] = -g
            slope = np.dot(g, d)
            stored = 0
        step = 1.0
        dmax = np.max(np.abs(d))
        if dmax * step > max_step:
            step = max_step / dmax
        accepted = False
        while step > 1e-16:
            for k in range(dim):
                x_new[k] = x[k] + step * d[k]
            e_new = _energy_grad(x_new.reshape(n, 3), g_new.reshape(n, 3))
            if e_new <= e + 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            return x.reshape(n, 3), e, it, 2
        sy = 0.0
        yy = 0.0
        for k in range(dim):
            s_k = x_new[k] - x[k]
            y_k = g_new[k] - g[k]
            s_hist[head, k] = s_k
            y_hist[head, k] = y_k
            sy += s_k * y_k
            yy += y_k * y_k
        if sy > 1e-12 * yy and sy > 0.0:
            rho[head] = 1.0 / sy
            head = (head + 1) % memory
            if stored < memory:
                stored += 1
        x[:] = x_new
        g[:] = g_new
        e = e_new
    if np.max(np.abs(g)) <= g_tol:
        return x.reshape(n, 3), e, max_iter, 0
    return x.reshape(n, 3), e, max_iter, 1


def as_coords(coords) -> np.ndarray:
    x = np.ascontiguousarray(coords, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ValueError(f"coords must have shape (N, 3), got {x.shape}")
    if x.shape[0] < 2:
        raise ValueError("need at least 2 atoms")
    if not np.all(np.isfinite(x)):
        raise NonFinite("non-finite coordinates")
    return x


def min_distance(coords) -> float:
    x = np.asarray(coords, dtype=np.float64)
    diff = x[:, None, :] - x[None, :, :]
    r = np.sqrt((diff ** 2).sum(-1))
    r[np.diag_indices(len(x))] = np.inf
    return float(r.min())


def lj_energy(coords) -> float:
    x = as_coords(coords)
    e = _energy(x)
    if not math.isfinite(e):
        raise NonFinite("coincident atoms")
    return float(e)


def lj_gradient(coords) -> np.ndarray:
    x = as_coords(coords)
    g = np.empty_like(x)
    e = _energy_grad(x, g)
    if not math.isfinite(e) or not np.all(np.isfinite(g)):
        raise NonFinite("coincident atoms")
    return g


def minimize(coords, max_iter: int = 2000, g_tol: float = 1e-6,
             memory: int = 8, max_step: float = 0.3) -> tuple[np.ndarray, float, int]:
    """L-BFGS with backtracking; energy never increases. Returns (coords, energy, iterations)."""
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    x = as_coords(coords)
    xm, e, iters, status = _lbfgs(x, max_iter, g_tol, memory, max_step)
    if status == 3 or not math.isfinite(e):
        raise Diverged(f"non-finite energy after {iters} iterations")
    return np.ascontiguousarray(xm), float(e), int(iters)
