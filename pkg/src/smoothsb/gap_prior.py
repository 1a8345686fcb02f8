"""Lifted Gauss-Markov representation of smooth Gaussian priors.

A Matérn process with half-integer smoothness nu = m - 1/2 solves an
order-m linear SDE; stacking the process with its first m-1 derivatives
gives a stationary Gauss-Markov chain on R^m.  This module builds that
chain: the companion drift matrix F, the stationary covariance (via a
continuous Lyapunov solve), and the per-interval transition pair
(A_k, Lambda_k) obtained by Gaussian conditioning,

    A_k = exp(F dt_k),     Lambda_k = Sigma00 - A_k Sigma00 A_k^T.

Observation dimensions are independent copies that differ only by their
marginal scale sigma, so all matrices are stored once at unit scale and
scaled by sigma^2 on access.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .exceptions import NotHurwitz, SingularLambda, UnsupportedOrder

MAX_ORDER = 4

_SUPPORTED_NU = (0.5, 1.5, 2.5, 3.5)


@dataclass(frozen=True)
class KernelSpec:
    """Kernel of the scalar prior process, replicated per observation dim.

    Parameters
    ----------
    family : str
        ``"matern"`` or ``"integrated_bm"``.
    sigma : array_like
        Marginal standard deviation per observation dimension (length d).
    lengthscale : float
        Matérn lengthscale (ignored for integrated Brownian motion).
    nu : float, optional
        Matérn smoothness; must be a half-integer in {1/2, ..., 7/2}.
    order : int, optional
        SDE order m for integrated Brownian motion (derived as nu + 1/2
        for Matérn).
    """

    family: str
    sigma: np.ndarray
    lengthscale: float = 1.0
    nu: float | None = None
    order: int | None = None

    def __post_init__(self):
        sigma = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        object.__setattr__(self, "sigma", sigma)
        if np.any(sigma <= 0):
            raise ValueError("every sigma component must be positive")
        if self.family == "matern":
            if self.nu not in _SUPPORTED_NU:
                raise UnsupportedOrder(
                    f"nu must be one of {_SUPPORTED_NU}, got {self.nu}"
                )
            if self.lengthscale <= 0:
                raise ValueError("lengthscale must be positive")
            object.__setattr__(self, "order", int(self.nu + 0.5))
        elif self.family == "integrated_bm":
            if self.order is None or not 1 <= self.order <= MAX_ORDER:
                raise UnsupportedOrder(
                    f"integrated_bm order must be in 1..{MAX_ORDER}, got {self.order}"
                )
        else:
            raise ValueError(f"unknown kernel family {self.family!r}")

    @property
    def m(self) -> int:
        return self.order

    @property
    def d(self) -> int:
        return self.sigma.shape[0]

    @property
    def stationary(self) -> bool:
        return self.family == "matern"


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing observation times t_0 < ... < t_K."""

    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        object.__setattr__(self, "times", t)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("need at least two observation times")
        if np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")

    @classmethod
    def uniform(cls, K: int, horizon: float = 2.0) -> "TimeGrid":
        if K < 1:
            raise ValueError("K must be >= 1")
        return cls(np.linspace(0.0, horizon, K + 1))

    @property
    def K(self) -> int:
        return self.times.size - 1

    @property
    def gaps(self) -> np.ndarray:
        return np.diff(self.times)


def companion_matrix(spec: KernelSpec) -> np.ndarray:
    """Drift matrix of the order-m SDE in companion form.

    For Matérn nu = m - 1/2 the characteristic polynomial is
    (s + lam)^m with lam = sqrt(2 nu) / lengthscale, so the last row
    carries -binom(m, j) lam^(m-j); integrated Brownian motion has an
    all-zero last row.
    """
    m = spec.m
    if m > MAX_ORDER:
        raise UnsupportedOrder(f"order {m} > {MAX_ORDER}")
    F = np.zeros((m, m))
    for i in range(m - 1):
        F[i, i + 1] = 1.0
    if spec.family == "matern":
        lam = math.sqrt(2.0 * spec.nu) / spec.lengthscale
        for j in range(m):
            F[m - 1, j] = -math.comb(m, j) * lam ** (m - j)
    return F


def stationary_covariance(F: np.ndarray, diffusion_intensity: float) -> np.ndarray:
    """Solve F P + P F^T + L q L^T = 0 with L the last basis vector.

    Solved by vectorization (Kronecker linear system), which is exact and
    cheap for m <= 4.  Raises :class:`NotHurwitz` when F has a spectrum
    touching the closed right half plane (no stationary distribution).
    """
    m = F.shape[0]
    eig = np.linalg.eigvals(F)
    if np.any(eig.real >= -1e-12):
        raise NotHurwitz("drift matrix is not Hurwitz; no stationary covariance")
    rhs = np.zeros((m, m))
    rhs[m - 1, m - 1] = -diffusion_intensity
    eye = np.eye(m)
    coeff = np.kron(eye, F) + np.kron(F, eye)
    P = np.linalg.solve(coeff, rhs.reshape(-1)).reshape(m, m)
    P = 0.5 * (P + P.T)
    resid = F @ P + P @ F.T - rhs
    if np.max(np.abs(resid)) > 1e-10:
        raise ArithmeticError("Lyapunov residual unexpectedly large")
    return P


def _repair_psd(mat: np.ndarray, floor: float = -1e-10) -> np.ndarray:
    """Symmetrize and clamp tiny negative eigenvalues to zero.

    Violations below ``floor`` indicate a real bug, not roundoff, and are
    rejected.
    """
    sym = 0.5 * (mat + mat.T)
    w, V = np.linalg.eigh(sym)
    if np.min(w) < floor:
        raise SingularLambda(
            f"covariance eigenvalue {np.min(w):.3e} below PSD repair floor"
        )
    w = np.clip(w, 0.0, None)
    return (V * w) @ V.T


def _ibm_innovation(m: int, dt: float) -> np.ndarray:
    """Closed-form int_0^dt exp(Fs) L L^T exp(F^T s) ds for the pure
    m-fold integrator (polynomial kernel)."""
    out = np.empty((m, m))
    for i in range(m):
        for j in range(m):
            p = 2 * m - 1 - i - j
            out[i, j] = dt**p / (p * math.factorial(m - 1 - i) * math.factorial(m - 1 - j))
    return out


def transition(spec: KernelSpec, dt: float,
               sigma00_unit: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Unit-scale transition pair (A, Lambda) for one gap of length dt.

    ``sigma00_unit`` may be passed to avoid re-solving the Lyapunov
    equation in loops; it is only consulted for stationary kernels.
    """
    F = companion_matrix(spec)
    A = expm(F * dt)
    if spec.stationary:
        if sigma00_unit is None:
            sigma00_unit = _unit_stationary(spec)
        lam = _repair_psd(sigma00_unit - A @ sigma00_unit @ A.T)
    else:
        lam = _ibm_innovation(spec.m, dt)
    return A, lam


def _unit_stationary(spec: KernelSpec) -> np.ndarray:
    """Stationary covariance normalized so the position variance is 1."""
    F = companion_matrix(spec)
    P = stationary_covariance(F, 1.0)
    return P / P[0, 0]


@dataclass(frozen=True)
class LiftedPrior:
    """Per-interval Gauss-Markov transitions of the lifted prior.

    All matrices are stored at unit marginal scale (sigma = 1) and shared
    across observation dimensions; accessors apply the per-dimension
    sigma^2 factor.  Immutable after construction.
    """

    spec: KernelSpec
    grid: TimeGrid
    Sigma00: np.ndarray                  # (m, m) unit-scale stationary/initial cov
    A: tuple[np.ndarray, ...]            # K transition matrices, sigma-free
    Lambda: tuple[np.ndarray, ...]       # K unit-scale innovation covariances
    state_covs: tuple[np.ndarray, ...] = field(repr=False, default=())
    # unit-scale Sigma_{k,k} along the chain (constant for stationary kernels)

    @property
    def m(self) -> int:
        return self.spec.m

    @property
    def d(self) -> int:
        return self.spec.d

    @property
    def K(self) -> int:
        return self.grid.K

    def sigma2(self, dim: int) -> float:
        return float(self.spec.sigma[dim] ** 2)

    def sigma00_of(self, dim: int) -> np.ndarray:
        return self.sigma2(dim) * self.Sigma00

    def lambda_of(self, k: int, dim: int) -> np.ndarray:
        return self.sigma2(dim) * self.Lambda[k]

    def state_cov_of(self, k: int, dim: int) -> np.ndarray:
        return self.sigma2(dim) * self.state_covs[k]

    def pair_cov_unit(self, k: int) -> np.ndarray:
        """Unit-scale joint covariance of (z_k, z_{k+1}) for one dim."""
        S = self.state_covs[k]
        A = self.A[k]
        top = np.hstack([S, S @ A.T])
        bot = np.hstack([A @ S, A @ S @ A.T + self.Lambda[k]])
        return np.vstack([top, bot])


def build_lifted_prior(spec: KernelSpec, grid: TimeGrid,
                       initial_covariance: np.ndarray | None = None) -> LiftedPrior:
    """Construct the lifted chain (Sigma00, {A_k}, {Lambda_k}) on a grid.

    For stationary kernels Sigma00 solves the Lyapunov equation with the
    white-noise intensity normalized so Sigma00[0, 0] = 1 (scaled by
    sigma^2 per dimension on access).  Integrated Brownian motion has no
    stationary law; ``initial_covariance`` (unit scale) defaults to the
    identity by convention.
    """
    m = spec.m
    if spec.stationary:
        if initial_covariance is not None:
            raise ValueError("initial_covariance is only for integrated_bm")
        sigma00 = _unit_stationary(spec)
    else:
        sigma00 = np.eye(m) if initial_covariance is None else \
            _repair_psd(np.asarray(initial_covariance, dtype=float))

    A_list, lam_list, cov_list = [], [], [sigma00]
    for dt in grid.gaps:
        A, lam = transition(spec, float(dt), sigma00_unit=sigma00)
        A_list.append(A)
        lam_list.append(lam)
        cov_list.append(_repair_psd(A @ cov_list[-1] @ A.T + lam))
    return LiftedPrior(
        spec=spec,
        grid=grid,
        Sigma00=sigma00,
        A=tuple(A_list),
        Lambda=tuple(lam_list),
        state_covs=tuple(cov_list),
    )


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (mat + mat.T))
    w = np.clip(w, 0.0, None)
    return V * np.sqrt(w)


def sample_paths(prior: LiftedPrior, n_paths: int, seed: int) -> np.ndarray:
    """Draw lifted trajectories eta_0..eta_K from the prior.

    Returns an array of shape (n_paths, K+1, d, m); entry [..., 0] is the
    position coordinate.  Deterministic under a fixed seed.
    """
    rng = np.random.default_rng(seed)
    K, d, m = prior.K, prior.d, prior.m
    out = np.empty((n_paths, K + 1, d, m))
    L0 = _psd_sqrt(prior.Sigma00)
    out[:, 0] = rng.standard_normal((n_paths, d, m)) @ L0.T
    for k in range(K):
        Lk = _psd_sqrt(prior.Lambda[k])
        eps = rng.standard_normal((n_paths, d, m)) @ Lk.T
        out[:, k + 1] = out[:, k] @ prior.A[k].T + eps
    out *= prior.spec.sigma[None, None, :, None]
    return out


def matern_correlation(nu: float, lengthscale: float, tau: np.ndarray) -> np.ndarray:
    """Half-integer Matérn correlation (unit variance) at lags tau."""
    if nu not in _SUPPORTED_NU:
        raise UnsupportedOrder(f"nu must be one of {_SUPPORTED_NU}, got {nu}")
    p = int(nu - 0.5)
    tau = np.abs(np.asarray(tau, dtype=float))
    u = math.sqrt(2.0 * nu) * tau / lengthscale
    poly = np.zeros_like(u)
    for i in range(p + 1):
        coef = math.factorial(p + i) / (math.factorial(i) * math.factorial(p - i))
        poly += coef * (2.0 * u) ** (p - i)
    return (math.factorial(p) / math.factorial(2 * p)) * np.exp(-u) * poly


def joint_position_covariance(spec: KernelSpec, grid: TimeGrid,
                              dim: int = 0) -> np.ndarray:
    """Gram matrix k(|t_i - t_j|) of the position process for one dim.

    This is the closed-form route to the joint law of the observed
    coordinates; it deliberately avoids the state-space matrices so it can
    cross-check them.
    """
    if not spec.stationary:
        raise UnsupportedOrder("joint position covariance requires a stationary kernel")
    taus = grid.times[:, None] - grid.times[None, :]
    return spec.sigma[dim] ** 2 * matern_correlation(spec.nu, spec.lengthscale, taus)


def lifted_position_covariance(prior: LiftedPrior, dim: int = 0) -> np.ndarray:
    """Position-block Gram matrix implied by the chain (A_k, Lambda_k).

    Propagates the full lifted covariance through the Markov recursion and
    extracts the (0, 0) entry of every block; for a correct lift this
    equals :func:`joint_position_covariance`.
    """
    K, m = prior.K, prior.m
    blocks: dict[tuple[int, int], np.ndarray] = {(0, 0): prior.Sigma00}
    for k in range(1, K + 1):
        A = prior.A[k - 1]
        for j in range(k):
            blocks[(k, j)] = A @ blocks[(k - 1, j)] if j < k - 1 else A @ blocks[(k - 1, k - 1)]
        blocks[(k, k)] = A @ blocks[(k - 1, k - 1)] @ A.T + prior.Lambda[k - 1]
    gram = np.empty((K + 1, K + 1))
    for i in range(K + 1):
        for j in range(i + 1):
            gram[i, j] = gram[j, i] = blocks[(i, j)][0, 0]
    return prior.sigma2(dim) * gram


def condition_gaussian(cov: np.ndarray, observed: np.ndarray,
                       values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Condition a zero-mean Gaussian on a subset of coordinates.

    Returns (mean, cov) of the remaining coordinates, in their original
    relative order.
    """
    n = cov.shape[0]
    obs = np.asarray(observed, dtype=int)
    free = np.array([i for i in range(n) if i not in set(obs.tolist())], dtype=int)
    Soo = cov[np.ix_(obs, obs)]
    Sfo = cov[np.ix_(free, obs)]
    Sff = cov[np.ix_(free, free)]
    sol = np.linalg.solve(Soo, np.asarray(values, dtype=float))
    gain = np.linalg.solve(Soo, Sfo.T).T
    mean = Sfo @ sol
    cond = Sff - gain @ Sfo.T
    return mean, 0.5 * (cond + cond.T)


def bridge_moments(spec: KernelSpec, dt_left: float, dt_right: float,
                   sigma00_unit: np.ndarray | None = None,
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Conditional law of the lifted state between two pinned neighbors.

    For unit-scale states z_a -> z -> z_b separated by dt_left and
    dt_right, returns (Ga, Gb, S) with

        E[z | z_a, z_b] = Ga z_a + Gb z_b,   Cov = S.

    Ga and Gb are scale-free; S carries unit scale (multiply by sigma^2).
    """
    A1, L1 = transition(spec, dt_left, sigma00_unit)
    A2, L2 = transition(spec, dt_right, sigma00_unit)
    L1i = np.linalg.inv(_jitter_if_needed(L1))
    L2i = np.linalg.inv(_jitter_if_needed(L2))
    P = L1i + A2.T @ L2i @ A2
    S = np.linalg.inv(P)
    S = 0.5 * (S + S.T)
    return S @ L1i @ A1, S @ A2.T @ L2i, S


def _jitter_if_needed(lam: np.ndarray, cond_cap: float = 1e12) -> np.ndarray:
    """Add a trace-scaled diagonal jitter when Lambda is near singular."""
    w = np.linalg.eigvalsh(0.5 * (lam + lam.T))
    if w[0] <= 0 or w[-1] / max(w[0], 1e-300) > cond_cap:
        jitter = 1e-10 * np.trace(lam) / lam.shape[0]
        if jitter <= 0:
            raise SingularLambda("innovation covariance has zero trace")
        return lam + jitter * np.eye(lam.shape[0])
    return lam
