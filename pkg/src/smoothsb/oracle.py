"""Brute-force references: dense cost tensors and vanilla Sinkhorn.

Two independent routes to the discrete cost over support combinations:

* ``exact_cost_tensor`` evaluates the normalized joint Gaussian density
  of the observed coordinates from the closed-form kernel Gram matrix.
* ``gamma_contracted_cost_tensor`` chains the (finite-resolution) Gamma
  tensors, i.e. the Riemann quadrature of the same density over the
  derivative coordinates.  The two agree in the fine-grid limit.

``vanilla_sinkhorn`` runs multi-marginal Sinkhorn by dense log-domain
marginalization over such a tensor; message passing must reproduce its
iterates exactly, which is the central correctness check of the package.
Everything here is deliberately desk-scale: a hard entry cap guards
against accidental exponential blowups.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .exceptions import SingularGram, SizeCapExceeded, ZeroMarginalMass
from .gap_prior import KernelSpec, TimeGrid, joint_position_covariance
from .marginals import SnapshotSet
from .message_passing import logsumexp, _log_weights
from .wavelet_basis import GammaTensor

SIZE_CAP = 10**7


@dataclass
class CostTensor:
    """Dense log-density tensor over support combinations.

    ``log_values[x_0, ..., x_K]`` is the log joint density of the
    observed coordinates at that combination (normalized; no dangling
    constant), so exp of it plays the role of exp(-C(x)).
    """

    log_values: np.ndarray
    source: str                      # "exact" or "gamma"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.log_values.shape

    @property
    def c_max(self) -> float:
        """Dynamic range of the discrete cost (max - min of -log)."""
        return float(np.max(-self.log_values) - np.min(-self.log_values))


def _check_cap(shape, cap: int) -> None:
    if int(np.prod(shape, dtype=np.int64)) > cap:
        raise SizeCapExceeded(f"tensor of shape {tuple(shape)} exceeds cap {cap}")


def exact_cost_tensor(spec: KernelSpec, grid: TimeGrid, snapshots: SnapshotSet,
                      cap: int = SIZE_CAP) -> CostTensor:
    """Normalized log joint Gaussian density at every support combination.

    Dimensions are independent, so per-dimension log densities add.  A
    singular Gram matrix gets one jitter retry (1e-10 sigma^2 on the
    diagonal) before raising.
    """
    sizes = snapshots.sizes
    _check_cap(sizes, cap)
    steps = len(sizes)
    total = np.zeros(sizes)
    for dim in range(snapshots.d):
        gram = joint_position_covariance(spec, grid, dim=dim)
        try:
            factor = cho_factor(gram)
        except np.linalg.LinAlgError:
            gram = gram + 1e-10 * spec.sigma[dim] ** 2 * np.eye(steps)
            try:
                factor = cho_factor(gram)
            except np.linalg.LinAlgError as exc:
                raise SingularGram("position Gram matrix is singular") from exc
        prec = cho_solve(factor, np.eye(steps))
        logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
        coords = [snapshots.supports[k][:, dim] for k in range(steps)]
        quad = np.zeros(sizes)
        for a in range(steps):
            va = coords[a].reshape((1,) * a + (-1,) + (1,) * (steps - 1 - a))
            quad += prec[a, a] * va * va
            for b in range(a + 1, steps):
                vb = coords[b].reshape((1,) * b + (-1,) + (1,) * (steps - 1 - b))
                quad += 2.0 * prec[a, b] * va * vb
        total += -0.5 * (quad + steps * math.log(2.0 * math.pi) + logdet)
    return CostTensor(log_values=total, source="exact")


def gamma_contracted_cost_tensor(gammas: list[GammaTensor],
                                 cap: int = SIZE_CAP) -> CostTensor:
    """Riemann quadrature of the cost: chain the Gamma tensors.

    Contracts one cell coordinate at a time (the full cell product is
    never materialized), with the chain ends weighted by the constant
    function's Haar coefficients sqrt(cell volume).
    """
    sizes = [g.shape[0] for g in gammas] + [gammas[-1].shape[1]]
    _check_cap(sizes, cap)
    running = logsumexp(
        gammas[0].to_dense() + 0.5 * gammas[0].log_volume_left, axis=2)
    # running: (n_0, n_1, M) with the step-1 cell index last
    for k in range(1, len(gammas)):
        dense = gammas[k].to_dense()        # (n_k, n_{k+1}, M, M)
        expand = running[..., :, None, :, None] + dense[..., :, :]
        running = logsumexp(expand, axis=-2)
    result = logsumexp(running, axis=-1) + 0.5 * gammas[-1].log_volume_right
    return CostTensor(log_values=result, source="gamma")


def _broadcast(v: np.ndarray, axis: int, ndim: int) -> np.ndarray:
    return v.reshape((1,) * axis + (-1,) + (1,) * (ndim - 1 - axis))


def vanilla_sinkhorn(cost: CostTensor, snapshots: SnapshotSet, iters: int,
                     linear: bool = False,
                     ) -> tuple[list[np.ndarray], list[dict]]:
    """Multi-marginal Sinkhorn by dense marginalization, cyclic order.

    Returns the final log scalings and a per-iteration history of
    ``log_S`` / ``log_v`` lists in update order.  ``linear=True`` runs the
    same recursion with plain sums in extended precision (the reference
    side of the log/linear agreement check); it refuses instances whose
    cost dynamic range exceeds 1e6.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    logK = cost.log_values
    steps = logK.ndim
    if snapshots.sizes != logK.shape:
        raise ValueError("cost tensor shape does not match snapshot sizes")
    if linear:
        if cost.c_max > math.log(1e6):
            raise ValueError("linear mode capped to dynamic range < 1e6")
        return _vanilla_sinkhorn_linear(logK, snapshots, iters)

    log_mu = [_log_weights(w) for w in snapshots.weights]
    log_v = [np.zeros(n) for n in logK.shape]
    history: list[dict] = []
    for _ in range(iters):
        S_list, v_list = [], []
        for k in range(steps):
            scaled = logK.copy()
            for i in range(steps):
                if i != k:
                    scaled += _broadcast(log_v[i], i, steps)
            logS = logsumexp(scaled, axis=tuple(a for a in range(steps) if a != k))
            if np.any(np.isneginf(logS) & (snapshots.weights[k] > 0)):
                raise ZeroMarginalMass(f"step {k}: zero marginal mass")
            log_v[k] = np.where(snapshots.weights[k] > 0, log_mu[k] - logS, -np.inf)
            S_list.append(logS)
            v_list.append(log_v[k].copy())
        history.append({"log_S": S_list, "log_v": v_list})
    return log_v, history


def _vanilla_sinkhorn_linear(logK: np.ndarray, snapshots: SnapshotSet,
                             iters: int) -> tuple[list[np.ndarray], list[dict]]:
    Kexp = np.exp(logK.astype(np.longdouble))
    steps = logK.ndim
    v = [np.ones(n, dtype=np.longdouble) for n in logK.shape]
    history: list[dict] = []
    for _ in range(iters):
        S_list, v_list = [], []
        for k in range(steps):
            scaled = Kexp.copy()
            for i in range(steps):
                if i != k:
                    scaled *= _broadcast(v[i], i, steps)
            S = np.sum(scaled, axis=tuple(a for a in range(steps) if a != k))
            v[k] = snapshots.weights[k].astype(np.longdouble) / S
            S_list.append(np.log(S))
            v_list.append(np.log(v[k]))
        history.append({"log_S": S_list, "log_v": v_list})
    return [np.log(x) for x in v], history


def transport_from_scalings(cost: CostTensor, log_v: list[np.ndarray],
                            cap: int = SIZE_CAP,
                            ) -> tuple[np.ndarray, list[np.ndarray]]:
    """Normalized dense plan exp(-C) prod v_k and its step marginals."""
    _check_cap(cost.shape, cap)
    steps = cost.log_values.ndim
    logP = cost.log_values.copy()
    for k in range(steps):
        logP += _broadcast(log_v[k], k, steps)
    logP -= logsumexp(logP)
    plan = np.exp(logP)
    marginals = [plan.sum(axis=tuple(a for a in range(steps) if a != k))
                 for k in range(steps)]
    return plan, marginals


def entropic_objective(cost: CostTensor, plan: np.ndarray,
                       snapshots: SnapshotSet) -> float:
    """cost integral plus KL against the product of the marginals mu."""
    mask = plan > 0
    cost_term = -float(np.sum(plan[mask] * cost.log_values[mask]))
    log_prod = np.zeros(plan.shape)
    steps = plan.ndim
    for k in range(steps):
        log_prod += _broadcast(_log_weights(snapshots.weights[k]), k, steps)
    kl = float(np.sum(plan[mask] * (np.log(plan[mask]) - log_prod[mask])))
    return cost_term + kl
