"""Haar cell grids over derivative space and pairwise potential tensors.

The derivative space at each timestep is covered by a uniform axis-aligned
box grid.  Cell indicator functions scaled by Z = Vol^{-1/2} form an
orthonormal family, and the pairwise Gram tensor of that family against
the Gaussian factor potentials,

    Gamma_k[x, x', i, j] ~= (Vol_i Vol_j)^{1/2} Phi_k(x, y_i, x', y_j),

is what every message update contracts.  Phi here is the *normalized*
transition density of the lifted chain (the joint stationary-times-
transition density on the first interval), so that chaining Gamma
reproduces the Riemann quadrature of the exact cost without a dangling
constant; see ``gamma_contracted_cost_tensor`` in the oracle module.

All tensors are kept in the log domain.  Independent observation
dimensions keep Gamma in per-dimension factorized form; the dense tensor
is the broadcast sum of the factors.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DegenerateVariance, SingularLambda
from .gap_prior import LiftedPrior, _jitter_if_needed
from .marginals import SnapshotSet

LOG_FLOOR = -745.0  # below this, exp underflows to subnormals; store -inf


def _floor_log(arr: np.ndarray) -> np.ndarray:
    arr[arr < LOG_FLOOR] = -np.inf
    return arr


@dataclass(frozen=True)
class WaveletGrid:
    """Uniform Haar cell geometry for every timestep.

    One half-width per (timestep, observation dim), shared by all
    derivative orders (the max-variance rule); per-order cell widths
    follow from the order's bin count.
    """

    m: int
    d: int
    bins: tuple[int, ...]          # cells per derivative order, len m-1
    half_widths: np.ndarray        # (K+1, d)
    half_width_factor: float

    @property
    def K(self) -> int:
        return self.half_widths.shape[0] - 1

    @property
    def cells_per_dim(self) -> int:
        return int(np.prod(self.bins, dtype=int)) if self.bins else 1

    @property
    def total_cells(self) -> int:
        return self.cells_per_dim ** self.d

    def widths(self, k: int, dim: int) -> np.ndarray:
        """Cell width per derivative order at one step/dimension."""
        hw = self.half_widths[k, dim]
        return np.array([2.0 * hw / M for M in self.bins])

    def log_volume(self, k: int, dim: int) -> float:
        """Log cell volume (cells at one step/dim all share a volume)."""
        return float(np.sum(np.log(self.widths(k, dim)))) if self.bins else 0.0

    def log_volume_total(self, k: int) -> float:
        return sum(self.log_volume(k, dim) for dim in range(self.d))

    def log_normalizer(self, k: int) -> float:
        """log Z_k with Z_k = Vol^{-1/2}, the unit-L2-norm choice."""
        return -0.5 * self.log_volume_total(k)

    def midpoints(self, k: int, dim: int) -> np.ndarray:
        """(cells_per_dim, m-1) midpoints, C-order over derivative orders."""
        if not self.bins:
            return np.zeros((1, 0))
        w = self.widths(k, dim)
        hw = self.half_widths[k, dim]
        axes = [(np.arange(M) + 0.5) * w[o] - hw for o, M in enumerate(self.bins)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=-1)

    def cell_box(self, k: int, dim: int, cell: int) -> tuple[np.ndarray, np.ndarray]:
        """(low, high) corners of one cell in one observation dimension."""
        mid = self.midpoints(k, dim)[cell]
        half = 0.5 * self.widths(k, dim)
        return mid - half, mid + half


def build_grid(prior: LiftedPrior, bins_per_order, half_width_factor: float = 3.0) -> WaveletGrid:
    """Size the Haar grid from the prior's stationary derivative spread.

    Per observation dimension the half-width is
    ``half_width_factor * sqrt(max_o Var(derivative order o))`` with the
    variances read off the chain covariance at each step (constant for
    stationary kernels).
    """
    m, d = prior.m, prior.d
    bins = tuple(int(b) for b in (bins_per_order or ()))
    if len(bins) != m - 1:
        raise ValueError(f"need {m - 1} bin counts for order {m}, got {len(bins)}")
    if any(b < 1 for b in bins):
        raise ValueError("bin counts must be >= 1")
    if half_width_factor <= 0:
        raise ValueError("half_width_factor must be positive")

    K = prior.K
    hw = np.zeros((K + 1, d))
    for k in range(K + 1):
        cov = prior.state_covs[k]
        deriv_var = np.diag(cov)[1:] if m > 1 else np.array([])
        for dim in range(d):
            if m == 1:
                continue
            top = float(np.max(deriv_var)) * prior.sigma2(dim)
            if top <= 0.0 and any(b > 1 for b in bins):
                raise DegenerateVariance(
                    f"step {k} dim {dim}: zero derivative variance with >1 cells")
            hw[k, dim] = half_width_factor * math.sqrt(max(top, 0.0))
    return WaveletGrid(m=m, d=d, bins=bins, half_widths=hw,
                       half_width_factor=half_width_factor)


def log_phi(prior: LiftedPrior, k: int, z_prev: np.ndarray, z_curr: np.ndarray) -> float:
    """Log factor potential between lifted states, constants dropped.

    ``k`` is the 1-based interval index; states are length m*d, laid out
    as (position, derivatives) blocks per observation dimension.  Returns
    -Q_k/2, plus the stationary quadratic -z^T Sigma00^{-1} z / 2 when
    k == 1.
    """
    if not 1 <= k <= prior.K:
        raise ValueError(f"interval index {k} outside 1..{prior.K}")
    m, d = prior.m, prior.d
    z_prev = np.asarray(z_prev, dtype=float).reshape(d, m)
    z_curr = np.asarray(z_curr, dtype=float).reshape(d, m)
    A = prior.A[k - 1]
    total = 0.0
    for dim in range(d):
        lam = _jitter_if_needed(prior.lambda_of(k - 1, dim))
        resid = z_curr[dim] - A @ z_prev[dim]
        total -= 0.5 * float(resid @ np.linalg.solve(lam, resid))
        if k == 1:
            s00 = prior.sigma00_of(dim)
            total -= 0.5 * float(z_prev[dim] @ np.linalg.solve(s00, z_prev[dim]))
    return total


@dataclass
class GammaTensor:
    """Log pairwise potential tensor for one interval.

    ``factors[dim]`` has shape (n_k, n_{k+1}, Mi, Mi) where Mi is the
    per-dimension cell count; the dense (n_k, n_{k+1}, M, M) tensor is the
    broadcast sum over dimensions.  Boundary log-volumes are kept so the
    oracle can contract the chain with the Haar coefficients of the
    constant-one function at the two ends.
    """

    factors: tuple[np.ndarray, ...]
    log_volume_left: float
    log_volume_right: float
    _dense: np.ndarray | None = field(default=None, repr=False)
    _kernels: dict = field(default_factory=dict, repr=False)

    @property
    def d(self) -> int:
        return len(self.factors)

    @property
    def cells_per_dim(self) -> int:
        return self.factors[0].shape[2]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        n0, n1, Mi, _ = self.factors[0].shape
        M = Mi ** self.d
        return n0, n1, M, M

    def to_dense(self) -> np.ndarray:
        if self._dense is None:
            dense = self.factors[0]
            n0, n1 = dense.shape[:2]
            for f in self.factors[1:]:
                P, Q = dense.shape[2], f.shape[2]
                dense = (dense[:, :, :, None, :, None] + f[:, :, None, :, None, :]
                         ).reshape(n0, n1, P * Q, P * Q)
            self._dense = _floor_log(dense.copy() if dense is self.factors[0] else dense)
        return self._dense


def _pair_quadratics(prior: LiftedPrior, interval: int, dim: int,
                     x0: np.ndarray, mids0: np.ndarray,
                     x1: np.ndarray, mids1: np.ndarray) -> np.ndarray:
    """Log normalized pair density on the (support x cell) product grid.

    Returns shape (n0*Mi, n1*Mi): log N(z1; A z0, Lambda), plus the
    stationary factor log N(z0; 0, Sigma00) on the first interval.
    """
    m = prior.m
    A = prior.A[interval]
    lam = _jitter_if_needed(prior.lambda_of(interval, dim))
    lam_inv = np.linalg.inv(lam)
    sign, logdet = np.linalg.slogdet(lam)
    if sign <= 0:
        raise SingularLambda("innovation covariance not positive definite")

    n0, Mi = x0.shape[0], mids0.shape[0]
    n1 = x1.shape[0]
    Z0 = np.concatenate(
        [np.repeat(x0, Mi)[:, None], np.tile(mids0, (n0, 1))], axis=1)  # (n0*Mi, m)
    Z1 = np.concatenate(
        [np.repeat(x1, Mi)[:, None], np.tile(mids1, (n1, 1))], axis=1)

    q1 = np.einsum("pi,ij,pj->p", Z1, lam_inv, Z1)
    AZ0 = Z0 @ A.T
    q0 = np.einsum("pi,ij,pj->p", AZ0, lam_inv, AZ0)
    cross = AZ0 @ lam_inv @ Z1.T                               # (N0, N1)
    out = -0.5 * (q0[:, None] + q1[None, :] - 2.0 * cross)
    out -= 0.5 * (m * math.log(2.0 * math.pi) + logdet)

    if interval == 0:
        s00 = prior.sigma00_of(dim)
        sign0, logdet0 = np.linalg.slogdet(s00)
        if sign0 <= 0:
            raise SingularLambda("initial covariance not positive definite")
        qs = np.einsum("pi,ij,pj->p", Z0, np.linalg.inv(s00), Z0)
        out -= (0.5 * (qs + m * math.log(2.0 * math.pi) + logdet0))[:, None]
    return out


def precompute_gamma(prior: LiftedPrior, grid: WaveletGrid,
                     snapshots: SnapshotSet) -> list[GammaTensor]:
    """Build the per-interval log Gamma tensors in factorized form."""
    if grid.K != prior.K or snapshots.K != prior.K:
        raise ValueError("grid, prior and snapshots must share the time grid")
    if snapshots.d != prior.d:
        raise ValueError("snapshot dimension does not match the prior")
    Mi = grid.cells_per_dim
    out = []
    for k in range(prior.K):
        factors = []
        for dim in range(prior.d):
            quad = _pair_quadratics(
                prior, k, dim,
                snapshots.supports[k][:, dim], grid.midpoints(k, dim),
                snapshots.supports[k + 1][:, dim], grid.midpoints(k + 1, dim))
            quad += 0.5 * (grid.log_volume(k, dim) + grid.log_volume(k + 1, dim))
            n0 = snapshots.supports[k].shape[0]
            n1 = snapshots.supports[k + 1].shape[0]
            f = quad.reshape(n0, Mi, n1, Mi).transpose(0, 2, 1, 3)
            factors.append(_floor_log(np.ascontiguousarray(f)))
        out.append(GammaTensor(
            factors=tuple(factors),
            log_volume_left=grid.log_volume_total(k),
            log_volume_right=grid.log_volume_total(k + 1)))
    return out


def refine_error(prior: LiftedPrior, snapshots: SnapshotSet,
                 coarse: WaveletGrid, fine: WaveletGrid) -> float:
    """Max-norm gap between Gamma-implied cost tensors at two resolutions.

    A grid-convergence diagnostic: the gap shrinks as the finer grid
    resolves the factor potentials.
    """
    from .oracle import gamma_contracted_cost_tensor

    ca = gamma_contracted_cost_tensor(precompute_gamma(prior, coarse, snapshots))
    cb = gamma_contracted_cost_tensor(precompute_gamma(prior, fine, snapshots))
    return float(np.max(np.abs(ca.log_values - cb.log_values)))


_MAGIC = b"SSBG"
_VERSION = 1


def save_gamma_cache(path, gammas: list[GammaTensor]) -> None:
    """Write dense log Gamma tensors: little-endian float64, row-major
    (x, x', cell, cell'), after a (magic, version, K, n per step,
    cell-count) header."""
    K = len(gammas)
    sizes = [g.shape[0] for g in gammas] + [gammas[-1].shape[1]]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, K))
        fh.write(struct.pack(f"<{K + 1}I", *sizes))
        fh.write(struct.pack("<I", gammas[0].shape[2]))
        for g in gammas:
            fh.write(struct.pack("<dd", g.log_volume_left, g.log_volume_right))
            fh.write(np.ascontiguousarray(g.to_dense(), dtype="<f8").tobytes())


def load_gamma_cache(path) -> list[GammaTensor]:
    """Read tensors written by :func:`save_gamma_cache` (dense form)."""
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError("not a gamma cache file")
        version, K = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"unsupported cache version {version}")
        sizes = struct.unpack(f"<{K + 1}I", fh.read(4 * (K + 1)))
        (M,) = struct.unpack("<I", fh.read(4))
        out = []
        for k in range(K):
            lv_l, lv_r = struct.unpack("<dd", fh.read(16))
            count = sizes[k] * sizes[k + 1] * M * M
            data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(
                sizes[k], sizes[k + 1], M, M)
            out.append(GammaTensor(factors=(data.astype(float),),
                                   log_volume_left=lv_l, log_volume_right=lv_r))
        return out
