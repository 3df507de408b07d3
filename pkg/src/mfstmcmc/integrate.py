"""Time integration of the linear system dp/dt = A(t) p.

Time-invariant generators go through a Krylov approximation of
``exp(h A) v`` built with the incomplete orthogonalization procedure (each
new basis vector is orthogonalized against the previous two only).  The
sub-step control follows the classical Expokit local error estimate.

Time-varying generators use ROS34PW2, a four-stage, third-order, L-stable
Rosenbrock-W method with an embedded second-order solution.  The method is
applied to the autonomised system ``(p, t)' = (A(t) p, 1)`` with the
inexact Jacobian ``diag(A(t_n), 0)``; the W-property keeps the order, so
no time derivative of the generator is needed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numba
import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class IntegratorError(RuntimeError):
    pass


@dataclass(frozen=True)
class IntegratorConfig:
    abs_tol: float = 1e-14
    rel_tol: float = 1e-4
    krylov_basis: int = 30
    max_step: float = math.inf
    max_substeps: int = 100_000

    def __post_init__(self):
        if self.abs_tol <= 0 or self.rel_tol <= 0:
            raise ValueError("integrator tolerances must be positive")
        if self.krylov_basis < 2:
            raise ValueError("krylov_basis must be at least 2")


def _one_norm(A) -> float:
    if sp.issparse(A):
        return float(abs(A).sum(axis=0).max()) if A.shape[0] else 0.0
    return float(np.abs(A).sum(axis=0).max()) if A.shape[0] else 0.0


def _round_step(h: float) -> float:
    # Expokit rounds trial steps to two significant digits
    s = 10.0 ** (math.floor(math.log10(h)) - 1)
    return math.ceil(h / s) * s


@numba.njit(cache=True)
def _csr_matvec(indptr, indices, data, x, out):
    for i in range(out.size):
        s = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            s += data[k] * x[indices[k]]
        out[i] = s


@numba.njit(cache=True)
def _iop_core(V, H, p, j):
    # orthogonalize p against the last two basis vectors only
    for i in range(max(0, j - 1), j + 1):
        h = 0.0
        for k in range(p.size):
            h += V[i, k] * p[k]
        H[i, j] = h
        for k in range(p.size):
            p[k] -= h * V[i, k]
    return np.sqrt(np.sum(p * p))


@numba.njit(cache=True)
def _arnoldi_iop_csr(indptr, indices, data, v0, V, H, m, btol):
    """Fill V (m+1, n) and H; return (basis size used, ||A v_{m+1}||).

    A negative norm signals a happy breakdown.
    """
    n = v0.size
    V[0] = v0
    p = np.empty(n)
    for j in range(m):
        _csr_matvec(indptr, indices, data, V[j], p)
        s = _iop_core(V, H, p, j)
        if s < btol or s == 0.0:
            return j + 1, -1.0
        H[j + 1, j] = s
        V[j + 1] = p / s
    _csr_matvec(indptr, indices, data, V[m], p)
    return m, np.sqrt(np.sum(p * p))


@numba.njit(cache=True)
def _arnoldi_iop_dense(A, v0, V, H, m, btol):
    V[0] = v0
    for j in range(m):
        p = A @ V[j]
        s = _iop_core(V, H, p, j)
        if s < btol or s == 0.0:
            return j + 1, -1.0
        H[j + 1, j] = s
        V[j + 1] = p / s
    p = A @ V[m]
    return m, np.sqrt(np.sum(p * p))


class KrylovStepper:
    """Sub-stepping Krylov propagator for a fixed generator.

    ``step`` advances at most to ``t_end`` and returns the actual step so
    callers can inspect (and reject) every internal checkpoint.
    """

    _gamma = 0.9
    _delta = 1.2
    _max_reject = 20

    def __init__(self, A, cfg: IntegratorConfig = IntegratorConfig()):
        self.A = A.tocsr() if sp.issparse(A) else np.asarray(A, dtype=float)
        self.n = self.A.shape[0]
        self.cfg = cfg
        self.m = max(2, min(cfg.krylov_basis, self.n))
        self.anorm = _one_norm(self.A)
        self.h_next: float | None = None
        if sp.issparse(self.A):
            A = self.A
            self._csr = (A.indptr.astype(np.int64), A.indices.astype(np.int64), A.data.astype(float))
        else:
            self._csr = None

    def _tol(self, beta: float) -> float:
        return self.cfg.abs_tol + self.cfg.rel_tol * beta

    def initial_step(self, beta: float) -> float:
        if self.anorm == 0.0:
            return math.inf
        m = self.m
        fact = ((m + 1) / math.e) ** (m + 1) * math.sqrt(2.0 * math.pi * (m + 1))
        h = (1.0 / self.anorm) * ((fact * self._tol(beta)) / (4.0 * beta * self.anorm)) ** (1.0 / m)
        return _round_step(h)

    def _arnoldi(self, v0, btol):
        m = self.m
        V = np.zeros((m + 1, self.n))
        H = np.zeros((m + 2, m + 2))
        if self._csr is not None:
            indptr, indices, data = self._csr
            mb, avnorm = _arnoldi_iop_csr(indptr, indices, data, v0, V, H, m, btol)
        else:
            mb, avnorm = _arnoldi_iop_dense(self.A, v0, V, H, m, btol)
        return V, H, mb, avnorm

    def step(self, w: np.ndarray, t_remaining: float) -> tuple[np.ndarray, float]:
        beta = float(np.linalg.norm(w))
        if t_remaining <= 0.0:
            return w.copy(), 0.0
        if beta == 0.0 or self.anorm == 0.0:
            return w.copy(), t_remaining
        if self.h_next is None:
            self.h_next = self.initial_step(beta)
        h = min(t_remaining, self.h_next, self.cfg.max_step)
        m = self.m
        btol = 1e-7 * self._tol(beta) / max(beta, 1e-300) * self.anorm
        V, H, mb, avnorm = self._arnoldi(w / beta, btol)
        if avnorm < 0.0:
            h = min(t_remaining, self.cfg.max_step)
            F = scipy.linalg.expm(h * H[:mb, :mb])
            w_new = beta * (F[:, 0] @ V[:mb])
            self.h_next = h if math.isfinite(h) else None
            return w_new, h
        H[m + 1, m] = 1.0
        tol = self._tol(beta)
        for _ in range(self._max_reject + 1):
            F = scipy.linalg.expm(h * H[: m + 2, : m + 2])
            phi1 = abs(beta * F[m, 0])
            phi2 = abs(beta * F[m + 1, 0] * avnorm)
            if phi1 > 10.0 * phi2:
                err, xm = phi2, 1.0 / m
            elif phi1 > phi2:
                err, xm = phi1 * phi2 / (phi1 - phi2), 1.0 / m
            else:
                err, xm = phi1, 1.0 / (m - 1)
            if err <= self._delta * h * tol:
                break
            h = _round_step(self._gamma * h * (h * tol / err) ** xm)
        else:
            raise IntegratorError("Krylov step rejected too many times")
        w_new = beta * (F[: m + 1, 0] @ V)
        err = max(err, 1e-300)
        self.h_next = _round_step(self._gamma * h * (h * tol / err) ** xm)
        return w_new, h


def expm_multiply_krylov(A, v, dt: float, cfg: IntegratorConfig = IntegratorConfig()) -> np.ndarray:
    """Approximate ``exp(dt * A) @ v`` by sub-stepped Krylov projections."""
    v = np.asarray(v, dtype=float)
    if dt < 0:
        raise ValueError("dt must be non-negative")
    if dt == 0.0:
        return v.copy()
    stepper = KrylovStepper(A, cfg)
    t, w = 0.0, v.copy()
    for _ in range(cfg.max_substeps):
        if t >= dt:
            return w
        w, h = stepper.step(w, dt - t)
        t = dt if dt - (t + h) <= 1e-14 * dt else t + h
    raise IntegratorError(f"Krylov integration did not reach t={dt} in {cfg.max_substeps} sub-steps")


# ROS34PW2 coefficients (alpha_ij, gamma_ij in the Rosenbrock form)
_GAMMA = 0.435866521508459
_ALPHA = np.array([
    [0.0, 0.0, 0.0, 0.0],
    [0.87173304301691801, 0.0, 0.0, 0.0],
    [0.84457060015369423, -0.11299064236484185, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
])
_GAMMA_OFF = np.array([
    [0.0, 0.0, 0.0, 0.0],
    [-0.87173304301691801, 0.0, 0.0, 0.0],
    [-0.90338057013044082, 0.054180672388095326, 0.0, 0.0],
    [0.24212380706095346, -1.2232505839045147, 0.54526025533510214, 0.0],
])
_B = np.array([0.24212380706095346, -1.2232505839045147, 1.5452602553351020, 0.435866521508459])
_BHAT = np.array([0.37810903145819369, -0.096042292212423178, 0.5, 0.2179332607542295])
_C = _ALPHA.sum(axis=1)


class RosenbrockStepper:
    """Adaptive ROS34PW2 stepper for ``dp/dt = A(t) p``.

    ``A_of_t`` is any callable returning a (sparse) matrix.  The generator
    is evaluated once per stage for the right-hand side but only once per
    step (at the step start) for the W matrix.
    """

    _safety = 0.8
    _min_factor = 0.2
    _max_factor = 5.0

    def __init__(self, A_of_t: Callable[[float], object], cfg: IntegratorConfig = IntegratorConfig(),
                 h0: float | None = None, adaptive: bool = True):
        self.A_of_t = A_of_t
        self.cfg = cfg
        self.h_next = h0
        self.adaptive = adaptive
        self.n_steps = 0

    def _error_norm(self, y, y_hat, y_old) -> float:
        scale = self.cfg.abs_tol + self.cfg.rel_tol * np.maximum(np.abs(y), np.abs(y_old))
        return float(np.sqrt(np.mean(((y - y_hat) / scale) ** 2))) if y.size else 0.0

    def _attempt(self, y, t, h, W):
        n = y.size
        I = sp.identity(n, format="csc")
        M = (I - (h * _GAMMA) * sp.csc_matrix(W)).tocsc()
        lu = spla.splu(M)
        k = np.zeros((4, n))
        for i in range(4):
            yi = y + _ALPHA[i, :i] @ k[:i] if i else y
            Ai = self.A_of_t(t + _C[i] * h)
            rhs = h * (Ai @ yi)
            if i:
                rhs += h * (W @ (_GAMMA_OFF[i, :i] @ k[:i]))
            k[i] = lu.solve(rhs)
        return y + _B @ k, y + _BHAT @ k

    def step(self, y: np.ndarray, t: float, t_remaining: float) -> tuple[np.ndarray, float]:
        if t_remaining <= 0:
            return y.copy(), 0.0
        W = self.A_of_t(t)
        if self.h_next is None:
            anorm = _one_norm(W)
            self.h_next = 0.01 / anorm if anorm > 0 else t_remaining
        planned = min(self.h_next, self.cfg.max_step)
        h = min(planned, t_remaining)
        while True:
            if h <= 1e-14 * max(1.0, abs(t)):
                raise IntegratorError(f"step size underflow at t={t}")
            y_new, y_hat = self._attempt(y, t, h, W)
            if not self.adaptive:
                self.n_steps += 1
                return y_new, h
            err = self._error_norm(y_new, y_hat, y)
            if err <= 1.0:
                fac = self._max_factor if err == 0 else min(
                    self._max_factor, self._safety * err ** (-1.0 / 3.0))
                # a step clipped to hit t_remaining should not shrink the next one
                self.h_next = max(h * fac, planned) if h < planned else h * fac
                self.n_steps += 1
                return y_new, h
            h *= max(self._min_factor, self._safety * err ** (-1.0 / 3.0))


def step_implicit(A_of_t: Callable[[float], object], v, t0: float, t1: float,
                  cfg: IntegratorConfig = IntegratorConfig()) -> np.ndarray:
    """Integrate ``dp/dt = A(t) p`` from t0 to t1 with adaptive ROS34PW2."""
    if not t1 > t0:
        raise ValueError("t1 must exceed t0")
    stepper = RosenbrockStepper(A_of_t, cfg)
    y, t = np.asarray(v, dtype=float).copy(), t0
    for _ in range(cfg.max_substeps):
        if t >= t1:
            return y
        y, h = stepper.step(y, t, t1 - t)
        t = t1 if t1 - (t + h) <= 1e-14 * max(1.0, abs(t1)) else t + h
    raise IntegratorError(f"implicit integration did not reach t={t1}")


def step_fixed(A_of_t, v, t0: float, t1: float, n_steps: int) -> np.ndarray:
    """ROS34PW2 with a fixed step count; used for order checks."""
    stepper = RosenbrockStepper(A_of_t, IntegratorConfig(), adaptive=False)
    h = (t1 - t0) / n_steps
    y = np.asarray(v, dtype=float).copy()
    for i in range(n_steps):
        stepper.h_next = h
        y, _ = stepper.step(y, t0 + i * h, h)
    return y


DENSE_CAP = 2000


def dense_reference_expm(A, v, dt: float) -> np.ndarray:
    """Padé scaling-and-squaring ``exp(dt A) v``; test oracle for small systems."""
    A = A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)
    if A.shape[0] > DENSE_CAP:
        raise ValueError(f"dense oracle limited to {DENSE_CAP} states, got {A.shape[0]}")
    return scipy.linalg.expm(dt * A) @ np.asarray(v, dtype=float)
