"""Snapshot marginals: ingestion, serialization, synthetic generators.

A snapshot set holds, for every observation time t_k, the finite support
X_k and a probability vector mu_k over it.  Ground-truth particle labels
(when a generator produced the data) align support indices across
timesteps for tracking evaluation.

CSV schema (UTF-8, '.' decimal, LF or CRLF):

    t_index,dim_0,...,dim_{d-1}[,weight][,label]

t_index runs over 0..K; rows may appear in any order.  The writer emits
LF line endings and 17 significant digits, which round-trips float64
exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import InconsistentDimension, ParseError
from .gap_prior import KernelSpec, LiftedPrior, TimeGrid, build_lifted_prior, sample_paths

WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class SnapshotSet:
    """Observed supports X_k and weights mu_k on a time grid."""

    grid: TimeGrid
    supports: tuple[np.ndarray, ...]   # per step: (n_k, d) float
    weights: tuple[np.ndarray, ...]    # per step: (n_k,) sums to 1

    def __post_init__(self):
        if len(self.supports) != self.grid.K + 1 or len(self.weights) != self.grid.K + 1:
            raise ValueError("supports/weights must have one entry per observation time")
        supports = tuple(np.atleast_2d(np.asarray(s, dtype=float)) for s in self.supports)
        weights = tuple(np.asarray(w, dtype=float) for w in self.weights)
        object.__setattr__(self, "supports", supports)
        object.__setattr__(self, "weights", weights)
        d = supports[0].shape[1]
        for k, (pts, w) in enumerate(zip(supports, weights)):
            if pts.shape[1] != d:
                raise InconsistentDimension(
                    f"step {k} has dimension {pts.shape[1]}, expected {d}")
            if pts.shape[0] != w.shape[0]:
                raise ValueError(f"step {k}: {pts.shape[0]} points but {w.shape[0]} weights")
            if np.any(w < 0) or abs(w.sum() - 1.0) > WEIGHT_TOL:
                raise ValueError(f"step {k}: weights must be nonnegative and sum to 1")
            if len({tuple(row) for row in pts}) != pts.shape[0]:
                raise ValueError(f"step {k}: duplicate support points")

    @property
    def K(self) -> int:
        return self.grid.K

    @property
    def d(self) -> int:
        return self.supports[0].shape[1]

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(s.shape[0] for s in self.supports)

    def sigma_data(self) -> np.ndarray:
        """Per-dimension standard deviation over all points of all steps."""
        stacked = np.vstack(self.supports)
        return stacked.std(axis=0)


@dataclass(frozen=True)
class GroundTruth:
    """Particle identity of every support index, per timestep.

    labels[k][i] is the particle that occupies support point i at step k;
    at every step the labels form a permutation of 0..n-1.
    """

    labels: tuple[np.ndarray, ...]

    def __post_init__(self):
        labels = tuple(np.asarray(l, dtype=int) for l in self.labels)
        object.__setattr__(self, "labels", labels)
        n = labels[0].shape[0]
        for k, lab in enumerate(labels):
            if sorted(lab.tolist()) != list(range(n)):
                raise ValueError(f"step {k}: labels are not a permutation of 0..{n - 1}")

    @property
    def n(self) -> int:
        return self.labels[0].shape[0]

    def positions(self, snapshots: SnapshotSet) -> np.ndarray:
        """(n, K+1, d) array of true particle positions in label order."""
        n, K, d = self.n, snapshots.K, snapshots.d
        out = np.empty((n, K + 1, d))
        for k in range(K + 1):
            out[self.labels[k], k] = snapshots.supports[k]
        return out


def load_snapshots(path: str | Path) -> tuple[SnapshotSet, GroundTruth | None]:
    """Read a snapshot CSV; see the module docstring for the schema.

    Weights default to uniform 1/n_k when the column is absent.  Returns
    ground truth only when a label column is present.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", row=1) from None
        header = [h.strip() for h in header]
        dims = [h for h in header if h.startswith("dim_")]
        expected = ["t_index"] + [f"dim_{i}" for i in range(len(dims))]
        has_weight = "weight" in header
        has_label = "label" in header
        if has_weight:
            expected.append("weight")
        if has_label:
            expected.append("label")
        if header != expected:
            raise ParseError(f"unexpected header {header!r}", row=1)
        d = len(dims)
        if d == 0:
            raise ParseError("no dim_* columns", row=1)

        rows: dict[int, list[tuple[np.ndarray, float, int | None]]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected):
                raise ParseError(f"expected {len(expected)} fields, got {len(row)}", row=lineno)
            try:
                t = int(row[0])
                point = np.array([float(v) for v in row[1:1 + d]])
                w = float(row[1 + d]) if has_weight else np.nan
                lab = int(row[-1]) if has_label else None
            except ValueError as exc:
                raise ParseError(str(exc), row=lineno) from None
            if t < 0:
                raise ParseError(f"negative t_index {t}", row=lineno)
            rows.setdefault(t, []).append((point, w, lab))

    if not rows:
        raise ParseError("no data rows", row=2)
    steps = sorted(rows)
    if steps != list(range(len(steps))):
        raise ParseError(f"t_index values {steps} are not contiguous from 0")

    supports, weights, labels = [], [], []
    for t in steps:
        pts = np.array([r[0] for r in rows[t]])
        supports.append(pts)
        if has_weight:
            weights.append(np.array([r[1] for r in rows[t]]))
        else:
            weights.append(np.full(pts.shape[0], 1.0 / pts.shape[0]))
        if has_label:
            labels.append(np.array([r[2] for r in rows[t]], dtype=int))

    grid = TimeGrid.uniform(len(steps) - 1) if len(steps) > 1 else None
    if grid is None:
        raise ParseError("need at least two timesteps")
    snaps = SnapshotSet(grid=grid, supports=tuple(supports), weights=tuple(weights))
    truth = GroundTruth(tuple(labels)) if has_label else None
    return snaps, truth


def save_snapshots(path: str | Path, snapshots: SnapshotSet,
                   truth: GroundTruth | None = None,
                   write_weights: bool = False) -> None:
    """Write the snapshot CSV (LF endings, 17 significant digits)."""
    d = snapshots.d
    header = ["t_index"] + [f"dim_{i}" for i in range(d)]
    if write_weights:
        header.append("weight")
    if truth is not None:
        header.append("label")
    lines = [",".join(header)]
    for k, pts in enumerate(snapshots.supports):
        for i, pt in enumerate(pts):
            cells = [str(k)] + [f"{v:.17g}" for v in pt]
            if write_weights:
                cells.append(f"{snapshots.weights[k][i]:.17g}")
            if truth is not None:
                cells.append(str(truth.labels[k][i]))
            lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def _uniform_weights(sizes: list[int]) -> tuple[np.ndarray, ...]:
    return tuple(np.full(n, 1.0 / n) for n in sizes)


def generate_matern_dataset(spec: KernelSpec, grid: TimeGrid, n_particles: int,
                            seed: int) -> tuple[SnapshotSet, GroundTruth]:
    """Independent particles following the smooth prior itself.

    Positions are the first lifted coordinate of :func:`sample_paths`;
    each dimension is an independent copy of the scalar kernel.
    """
    prior = build_lifted_prior(spec, grid)
    paths = sample_paths(prior, n_particles, seed)  # (n, K+1, d, m)
    positions = paths[..., 0]
    supports = tuple(positions[:, k, :] for k in range(grid.K + 1))
    snaps = SnapshotSet(grid=grid, supports=supports,
                        weights=_uniform_weights([n_particles] * (grid.K + 1)))
    truth = GroundTruth(tuple(np.arange(n_particles) for _ in range(grid.K + 1)))
    return snaps, truth


# Three attraction points on the unit circle.  The pull field below is a
# documented stand-in: softmin-weighted attraction whose per-unit-distance
# gain pull/(r + rho)^2 grows as a particle nears its well, capped at
# gain_cap so the final capture is a plain exponential contraction and
# absorbed particles stay numerically distinct.  Each attractor is a
# fixed point of the field.
_TRISTABLE_ANGLES = np.deg2rad([90.0, 210.0, 330.0])
_TRISTABLE_ATTRACTORS = np.stack([np.cos(_TRISTABLE_ANGLES), np.sin(_TRISTABLE_ANGLES)], axis=1)


def tristable_drift(x: np.ndarray, pull: float = 2.0, rho: float = 0.1,
                    tau: float = 0.25, gain_cap: float = 6.0) -> np.ndarray:
    """Drift of the three-well dynamics at points x of shape (..., 2)."""
    diff = _TRISTABLE_ATTRACTORS - x[..., None, :]          # (..., 3, 2)
    r = np.linalg.norm(diff, axis=-1)                        # (..., 3)
    logits = -(r / tau) ** 2
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=-1, keepdims=True)
    gain = np.minimum(pull / (r + rho) ** 2, gain_cap)
    return np.sum(w[..., None] * gain[..., None] * diff, axis=-2)


def generate_tristable_dataset(n: int, K: int, seed: int, horizon: float = 2.0,
                               substeps: int = 40) -> tuple[SnapshotSet, GroundTruth]:
    """Particles from N(0, 0.1^2 I) absorbed into one of three wells.

    The deterministic field (see :func:`tristable_drift`) is integrated
    with classical RK4 between snapshots.
    """
    rng = np.random.default_rng(seed)
    x = 0.1 * rng.standard_normal((n, 2))
    grid = TimeGrid.uniform(K, horizon)
    h = horizon / (K * substeps)
    snaps = [x.copy()]
    for _ in range(K):
        for _ in range(substeps):
            k1 = tristable_drift(x)
            k2 = tristable_drift(x + 0.5 * h * k1)
            k3 = tristable_drift(x + 0.5 * h * k2)
            k4 = tristable_drift(x + h * k3)
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        snaps.append(x.copy())
    snapshot_set = SnapshotSet(grid=grid, supports=tuple(snaps),
                               weights=_uniform_weights([n] * (K + 1)))
    truth = GroundTruth(tuple(np.arange(n) for _ in range(K + 1)))
    return snapshot_set, truth


def generate_nbody_dataset(n_planets: int = 8, K: int = 50, seed: int = 0,
                           horizon: float = 2.0, gm: float = 4.0 * np.pi**2,
                           substeps: int = 400) -> tuple[SnapshotSet, GroundTruth]:
    """Planets on independent near-circular orbits around a central star.

    Each planet starts on a circular orbit of random radius, phase,
    inclination and direction, and is integrated with leapfrog (so the
    two-body energies are conserved to high accuracy).  Returns 3-D
    positions at K+1 equally spaced times.
    """
    rng = np.random.default_rng(seed)
    radii = rng.uniform(0.8, 1.4, size=n_planets)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n_planets)
    incl = rng.uniform(0.0, np.deg2rad(25.0), size=n_planets)
    node = rng.uniform(0.0, 2.0 * np.pi, size=n_planets)
    retro = np.where(rng.random(n_planets) < 0.5, -1.0, 1.0)

    pos = np.zeros((n_planets, 3))
    vel = np.zeros((n_planets, 3))
    for i in range(n_planets):
        r, ph = radii[i], phases[i]
        speed = np.sqrt(gm / r)
        p_plane = np.array([r * np.cos(ph), r * np.sin(ph), 0.0])
        v_plane = retro[i] * speed * np.array([-np.sin(ph), np.cos(ph), 0.0])
        ci, si = np.cos(incl[i]), np.sin(incl[i])
        cn, sn = np.cos(node[i]), np.sin(node[i])
        tilt = np.array([[1.0, 0.0, 0.0], [0.0, ci, -si], [0.0, si, ci]])
        spin = np.array([[cn, -sn, 0.0], [sn, cn, 0.0], [0.0, 0.0, 1.0]])
        rot = spin @ tilt
        pos[i] = rot @ p_plane
        vel[i] = rot @ v_plane

    def accel(p):
        r = np.linalg.norm(p, axis=1, keepdims=True)
        return -gm * p / r**3

    grid = TimeGrid.uniform(K, horizon)
    h = horizon / (K * substeps)
    snaps = [pos.copy()]
    acc = accel(pos)
    for _ in range(K):
        for _ in range(substeps):
            vel_half = vel + 0.5 * h * acc
            pos = pos + h * vel_half
            acc = accel(pos)
            vel = vel_half + 0.5 * h * acc
        snaps.append(pos.copy())
    snapshot_set = SnapshotSet(grid=grid, supports=tuple(snaps),
                               weights=_uniform_weights([n_planets] * (K + 1)))
    truth = GroundTruth(tuple(np.arange(n_planets) for _ in range(K + 1)))
    return snapshot_set, truth
