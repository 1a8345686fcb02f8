"""Pairwise posterior beliefs and trajectory reconstruction.

The converged solution factorizes over adjacent pairs, so the pairwise
belief tensors

    p_k(x_k, cell_k, x_{k+1}, cell_{k+1})

are all that is needed to sample or maximize full trajectories.  Each
belief combines the rightward message and scaling at step k, the Gamma
tensor of the interval, and the scaling and leftward message at step
k+1.  The leftward messages are refreshed once with the final scalings
so the chain of beliefs is exactly marginal-consistent.

Beliefs stay in the log domain end to end; exponentiation happens only
inside per-row categorical sampling after max subtraction.  Trajectory
samples use independent per-trajectory substreams seeded by
``(seed, trajectory_index)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import NotConvergedWarning, StartNotInSupport, ZeroMarginalMass
from .gap_prior import LiftedPrior, _psd_sqrt, condition_gaussian
from .marginals import SnapshotSet
from .message_passing import MessageState, _apply, logsumexp
from .wavelet_basis import GammaTensor, WaveletGrid


@dataclass
class BeliefPair:
    """Normalized log belief over one adjacent pair of lifted states.

    Dense layout is (n_k, M, n_{k+1}, M); rows and marginals are exposed
    lazily so large instances never materialize the full tensor.
    """

    gamma: GammaTensor
    log_prefix: np.ndarray       # (n_k, M): r_k + beta_k
    log_suffix: np.ndarray       # (n_{k+1}, M): beta_{k+1} + refreshed l_{k+1}
    log_left_here: np.ndarray    # (n_k, M): refreshed l_k, for marginals
    log_right_next: np.ndarray   # (n_{k+1}, M): r_{k+1}, for marginals
    log_norm: float

    @property
    def shape(self) -> tuple[int, int, int, int]:
        n0, n1, M, _ = self.gamma.shape
        return n0, M, n1, M

    def log_dense(self) -> np.ndarray:
        dense = self.gamma.to_dense().transpose(0, 2, 1, 3)
        return (dense
                + self.log_prefix[:, :, None, None]
                + self.log_suffix.T[None, None, :, :]
                - self.log_norm)

    def left_marginal_log(self) -> np.ndarray:
        """Log marginal over (x_k, cell_k), normalized."""
        return self.log_prefix + self.log_left_here - self.log_norm

    def right_marginal_log(self) -> np.ndarray:
        """Log marginal over (x_{k+1}, cell_{k+1}), normalized."""
        return self.log_suffix + self.log_right_next - self.log_norm

    def x_marginal(self, side: str) -> np.ndarray:
        lm = self.left_marginal_log() if side == "left" else self.right_marginal_log()
        return np.exp(logsumexp(lm, axis=1))

    def conditional_row_log(self, x: int, cell: int) -> np.ndarray:
        """Unnormalized log p(x', cell' | x, cell), shape (n_{k+1}, M)."""
        cells = [f.shape[2] for f in self.gamma.factors]
        idx = np.unravel_index(cell, [cells[0]] * len(cells)) if cells else ()
        row = None
        for f, i in zip(self.gamma.factors, idx):
            part = f[x, :, i, :]                      # (n1, Mi)
            if row is None:
                row = part
            else:
                n1, P = row.shape
                row = (row[:, :, None] + part[:, None, :]).reshape(n1, P * part.shape[1])
        if row is None:
            row = np.zeros((self.gamma.shape[1], 1))
        return row + self.log_suffix


def pairwise_beliefs(state: MessageState, gammas: list[GammaTensor],
                     snapshots: SnapshotSet, method: str = "fast",
                     refresh: bool = True) -> list[BeliefPair]:
    """Assemble the pairwise beliefs from a (converged) message state.

    A non-converged state only triggers :class:`NotConvergedWarning`;
    the beliefs are then the current approximation.
    """
    if not state.converged:
        warnings.warn("messages have not converged; beliefs are approximate",
                      NotConvergedWarning)
    K = len(gammas)
    left = list(state.log_left)
    if refresh:
        for k in range(K - 1, -1, -1):
            b = state.log_beta[k + 1][:, None] + left[k + 1]
            left[k] = _apply(gammas[k], b, side="left", method=method)
    out = []
    for k in range(K):
        prefix = state.log_right[k] + state.log_beta[k][:, None]
        suffix = state.log_beta[k + 1][:, None] + left[k + 1]
        norm = float(logsumexp(prefix + left[k]))
        out.append(BeliefPair(
            gamma=gammas[k],
            log_prefix=prefix,
            log_suffix=suffix,
            log_left_here=left[k],
            log_right_next=state.log_right[k + 1],
            log_norm=norm,
        ))
    return out


@dataclass
class Trajectory:
    """One reconstructed path: support indices, cell indices, derivative
    values (cell midpoints unless refined), laid out dim-major."""

    x_indices: np.ndarray           # (K+1,) int
    cells: np.ndarray               # (K+1,) int
    y: np.ndarray                   # (K+1, (m-1)*d)

    def positions(self, snapshots: SnapshotSet) -> np.ndarray:
        return np.stack([snapshots.supports[k][self.x_indices[k]]
                         for k in range(len(self.x_indices))])


def _full_midpoint(grid: WaveletGrid, k: int, cell: int) -> np.ndarray:
    """Midpoint of a flat cell index, concatenated per observation dim."""
    if grid.m == 1:
        return np.zeros(0)
    per_dim = np.unravel_index(cell, (grid.cells_per_dim,) * grid.d)
    return np.concatenate([grid.midpoints(k, dim)[per_dim[dim]]
                           for dim in range(grid.d)])


def _sample_categorical(rng: np.random.Generator, log_p: np.ndarray) -> int:
    """Draw an index proportional to exp(log_p) (flattened)."""
    flat = log_p.ravel()
    top = np.max(flat)
    if not np.isfinite(top):
        raise ZeroMarginalMass("no admissible continuation: belief row is empty")
    w = np.exp(flat - top)
    cdf = np.cumsum(w)
    return int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))


def _rollout(beliefs: list[BeliefPair], grid: WaveletGrid,
             start: int | None, pick) -> Trajectory:
    n0, M = beliefs[0].log_prefix.shape
    p_init = beliefs[0].left_marginal_log()
    if start is None:
        flat = pick(p_init)
        x, cell = divmod(flat, M)
    else:
        if not 0 <= start < n0:
            raise StartNotInSupport(f"start index {start} not in 0..{n0 - 1}")
        x, cell = start, pick(p_init[start])
    xs, cs = [x], [cell]
    for k, belief in enumerate(beliefs):
        row = belief.conditional_row_log(xs[-1], cs[-1])
        flat = pick(row)
        x, cell = divmod(flat, row.shape[1])
        xs.append(x)
        cs.append(cell)
    xs = np.array(xs)
    cs = np.array(cs)
    y = np.stack([_full_midpoint(grid, k, c) for k, c in enumerate(cs)])
    return Trajectory(x_indices=xs, cells=cs, y=y)


def sample_trajectories(beliefs: list[BeliefPair], grid: WaveletGrid,
                        n_samples: int, start: int | None = None,
                        seed: int = 0) -> list[Trajectory]:
    """Draw trajectories from the pairwise beliefs (forward sampling).

    The chain is Markov, so sampling the initial pair marginal and then
    each conditional row reproduces the joint law.  Deterministic under a
    fixed seed; trajectory t uses the substream seeded (seed, t).
    """
    out = []
    for t in range(n_samples):
        rng = np.random.default_rng([seed, t])
        out.append(_rollout(beliefs, grid, start,
                            lambda lp, r=rng: _sample_categorical(r, lp)))
    return out


def argmax_trajectories(beliefs: list[BeliefPair], grid: WaveletGrid,
                        start: int | None = None) -> Trajectory:
    """Greedy per-step maximizer of the pairwise beliefs.

    Ties break deterministically toward the lowest support index, then
    the lowest cell index (first maximum in row-major order).
    """
    def pick(log_p: np.ndarray) -> int:
        flat = log_p.ravel()
        if not np.isfinite(np.max(flat)):
            raise ZeroMarginalMass("no admissible continuation: belief row is empty")
        return int(np.argmax(flat))

    return _rollout(beliefs, grid, start, pick)


def index_paths(trajectories: list[Trajectory]) -> np.ndarray:
    """(n_samples, K+1) support-index matrix of a trajectory batch."""
    return np.stack([t.x_indices for t in trajectories])


def refine_velocity(prior: LiftedPrior, grid: WaveletGrid, k: int,
                    pos_k: np.ndarray, pos_next: np.ndarray, cell: int,
                    rng: np.random.Generator, max_attempts: int = 1000,
                    side: str = "left") -> np.ndarray:
    """Continuous derivative sample inside a chosen cell.

    Draws from the prior's Gaussian conditional of the derivatives at
    interval k's left (or right) endpoint given both adjacent positions,
    rejection-sampled into the cell box.  Falls back to the cell midpoint
    after ``max_attempts`` draws, so termination is guaranteed.
    """
    m, d = prior.m, prior.d
    if m == 1:
        return np.zeros(0)
    step = k if side == "left" else k + 1
    per_dim = np.unravel_index(cell, (grid.cells_per_dim,) * d)
    out = np.empty((d, m - 1))
    batch = 64
    for dim in range(d):
        cov = prior.sigma2(dim) * prior.pair_cov_unit(k)
        mean, cond = condition_gaussian(
            cov, np.array([0, m]), np.array([pos_k[dim], pos_next[dim]]))
        block = slice(0, m - 1) if side == "left" else slice(m - 1, 2 * (m - 1))
        mean, cond = mean[block], cond[block, block]
        lo, hi = grid.cell_box(step, dim, per_dim[dim])
        root = _psd_sqrt(cond)
        accepted = None
        drawn = 0
        while drawn < max_attempts:
            take = min(batch, max_attempts - drawn)
            cand = mean + rng.standard_normal((take, m - 1)) @ root.T
            drawn += take
            ok = np.all((cand >= lo) & (cand < hi), axis=1)
            hits = np.nonzero(ok)[0]
            if hits.size:
                accepted = cand[hits[0]]
                break
        if accepted is None:
            accepted = grid.midpoints(k, dim)[per_dim[dim]]
        out[dim] = accepted
    return out.reshape(-1)


def refine_trajectory(prior: LiftedPrior, grid: WaveletGrid,
                      snapshots: SnapshotSet, traj: Trajectory,
                      seed: int = 0) -> Trajectory:
    """Replace cell-midpoint derivatives with conditional Gaussian draws.

    Runs after the discrete rollout completes; the last step keeps its
    midpoint (it has no downstream anchor)."""
    rng = np.random.default_rng([seed, 997])
    y = traj.y.copy()
    K = len(traj.x_indices) - 1
    for k in range(K):
        p0 = snapshots.supports[k][traj.x_indices[k]]
        p1 = snapshots.supports[k + 1][traj.x_indices[k + 1]]
        y[k] = refine_velocity(prior, grid, k, p0, p1, traj.cells[k], rng)
    return Trajectory(x_indices=traj.x_indices.copy(), cells=traj.cells.copy(), y=y)


def save_trajectories(path: str | Path, trajectories: list[Trajectory],
                      snapshots: SnapshotSet, grid: WaveletGrid) -> None:
    """Write trajectories as CSV: traj_id,t_index,x_index,dim_*,deriv_*.

    Derivative columns are dim-major: deriv_<dim>_<order>."""
    d = snapshots.d
    n_deriv = (grid.m - 1) * d
    header = ["traj_id", "t_index", "x_index"] + [f"dim_{i}" for i in range(d)]
    header += [f"deriv_{dim}_{o + 1}" for dim in range(d) for o in range(grid.m - 1)]
    lines = [",".join(header)]
    for tid, traj in enumerate(trajectories):
        pos = traj.positions(snapshots)
        for k in range(len(traj.x_indices)):
            cells = [str(tid), str(k), str(int(traj.x_indices[k]))]
            cells += [f"{v:.17g}" for v in pos[k]]
            cells += [f"{v:.17g}" for v in traj.y[k]] if n_deriv else []
            lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
