"""Tomographic slowness reconstruction from differential delay maps.

Builds the sparse differential Tx-path matrix by exact ray/cell
intersection, applies anisotropic total-variation regularization, and
minimizes the Charbonnier-smoothed L1 objective

    sum phi(L sigma - dtau) + lambda * sum phi(D sigma),
    phi(t) = sqrt(t^2 + eps^2) - eps,

with L-BFGS. The unknown is the slowness deviation from 1/c_bf, so a
zero delay vector maps to the zero solution.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize

from .geometry import ImagingGrid, TransducerArray, element_position
from .synthsim import SOS_MAX, SOS_MIN


class SolverError(RuntimeError):
    def __init__(self, msg: str, iterate: np.ndarray | None = None):
        super().__init__(msg)
        self.iterate = iterate


@dataclass(frozen=True)
class ReconConfig:
    lam: float = 0.05
    tv_axial_weight: float = 1.0
    tv_lateral_weight: float = 0.5
    l1_epsilon: float = 1e-10
    lbfgs_memory: int = 10
    max_iter: int = 500
    grad_tol: float = 1e-9
    obj_tol: float = 1e-10

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.l1_epsilon <= 0:
            raise ValueError("l1_epsilon must be > 0")
        if self.obj_tol <= 0:
            raise ValueError("obj_tol must be > 0")


@dataclass(frozen=True)
class PathMatrix:
    """Sparse differential path operator with per-row provenance."""

    matrix: sp.csr_matrix  # (n_rows, nx*nz of the slowness grid), meters
    pair_index: np.ndarray  # (n_rows,) which frame pair each row belongs to
    node_index: np.ndarray  # (n_rows,) flat node index on the measurement grid
    pairs: tuple[tuple[int, int], ...]
    slow_grid: ImagingGrid


@dataclass
class SlownessMap:
    """Slowness deviation from 1/c_bf on the slowness grid, s/m."""

    values: np.ndarray  # (nz, nx)
    grid: ImagingGrid

    def to_sos(self, c_bf: float) -> np.ndarray:
        """Absolute SoS map 1/(1/c_bf + dsigma), clamped to sanity band."""
        sos = 1.0 / (1.0 / c_bf + self.values)
        if np.any(sos < SOS_MIN) or np.any(sos > SOS_MAX):
            warnings.warn(
                "reconstructed SoS left the [1300, 1700] m/s band; clamping",
                RuntimeWarning,
            )
            sos = np.clip(sos, SOS_MIN, SOS_MAX)
        return sos


@dataclass
class ReconInfo:
    objective_trace: list[float]
    converged: bool
    iterations: int
    grad_norm: float
    message: str = ""


def ray_weights(
    p_from: tuple[float, float], p_to: tuple[float, float], grid: ImagingGrid
) -> tuple[np.ndarray, np.ndarray]:
    """Exact per-cell intersection lengths of one straight segment.

    Returns (flat cell indices, lengths in meters); the segment is
    clipped to the grid's cell-edge bounding box. A zero-length ray
    gives an empty row.
    """
    cols, lens, _ = _traverse_batch(
        np.asarray(p_from, dtype=float),
        np.asarray(p_to, dtype=float)[None, :],
        grid,
    )
    return cols, lens


def _traverse_batch(origin: np.ndarray, targets: np.ndarray, grid: ImagingGrid):
    """Cell crossings for rays from one origin to many targets.

    Returns (flat cell cols, lengths, ray row ids) ready for COO
    assembly.
    """
    ox, oz = origin
    tx = targets[:, 0]
    tz = targets[:, 1]
    dx_r = tx - ox
    dz_r = tz - oz
    seg_len = np.hypot(dx_r, dz_r)

    x_lo, x_hi = grid.x_min, grid.x_max
    z_lo, z_hi = grid.z_min, grid.z_max

    with np.errstate(divide="ignore", invalid="ignore"):
        txa = np.where(dx_r != 0, (x_lo - ox) / dx_r, -np.inf)
        txb = np.where(dx_r != 0, (x_hi - ox) / dx_r, np.inf)
        tza = np.where(dz_r != 0, (z_lo - oz) / dz_r, -np.inf)
        tzb = np.where(dz_r != 0, (z_hi - oz) / dz_r, np.inf)
    t_in = np.maximum(np.minimum(txa, txb), np.minimum(tza, tzb))
    t_out = np.minimum(np.maximum(txa, txb), np.maximum(tza, tzb))
    t_in = np.maximum(t_in, 0.0)
    t_out = np.minimum(t_out, 1.0)

    # rays parallel to an axis and outside the slab never intersect
    miss = (
        (seg_len == 0)
        | (t_in >= t_out)
        | ((dx_r == 0) & ((ox < x_lo) | (ox > x_hi)))
        | ((dz_r == 0) & ((oz < z_lo) | (oz > z_hi)))
    )

    x_edges = x_lo + np.arange(grid.nx + 1) * grid.dx
    z_edges = z_lo + np.arange(grid.nz + 1) * grid.dz
    with np.errstate(divide="ignore", invalid="ignore"):
        ts_x = (x_edges[None, :] - ox) / dx_r[:, None]
        ts_z = (z_edges[None, :] - oz) / dz_r[:, None]
    ts_x = np.where(np.isfinite(ts_x), ts_x, 0.0)
    ts_z = np.where(np.isfinite(ts_z), ts_z, 0.0)

    n = targets.shape[0]
    ts = np.concatenate(
        [t_in[:, None], t_out[:, None], ts_x, ts_z], axis=1
    )
    ts = np.clip(ts, t_in[:, None], t_out[:, None])
    ts.sort(axis=1)

    dts = np.diff(ts, axis=1)
    mids = 0.5 * (ts[:, 1:] + ts[:, :-1])
    px = ox + mids * dx_r[:, None]
    pz = oz + mids * dz_r[:, None]
    ix = np.floor((px - x_lo) / grid.dx).astype(np.int64)
    iz = np.floor((pz - z_lo) / grid.dz).astype(np.int64)
    inside = (ix >= 0) & (ix < grid.nx) & (iz >= 0) & (iz < grid.nz)
    keep = (dts > 1e-15) & inside & ~miss[:, None]

    rows = np.broadcast_to(np.arange(n)[:, None], dts.shape)[keep]
    cols = (iz * grid.nx + ix)[keep]
    lens = (dts * seg_len[:, None])[keep]
    return cols, lens, rows


def build_path_matrix(
    pairs: list[tuple[int, int]],
    meas_grid: ImagingGrid,
    slow_grid: ImagingGrid,
    masks: list[np.ndarray] | None,
    array: TransducerArray,
) -> PathMatrix:
    """Differential Tx-path matrix for a set of frame pairs.

    Row for (pair (a, b), node p) = ray_weights(pos_a, p) -
    ray_weights(pos_b, p); rows for masked-out nodes are dropped.
    Receive paths are identical between the frames of a pair and do not
    appear.
    """
    X, Z = meas_grid.meshgrid()
    nodes = np.column_stack([X.ravel(), Z.ravel()])
    n_nodes = nodes.shape[0]
    n_cells = slow_grid.nx * slow_grid.nz

    # one traversal per distinct element, shared between pairs
    elements = sorted({e for p in pairs for e in p})
    per_element: dict[int, sp.csr_matrix] = {}
    for e in elements:
        pos = np.array(element_position(array, e))
        cols, lens, rows = _traverse_batch(pos, nodes, slow_grid)
        per_element[e] = sp.coo_matrix(
            (lens, (rows, cols)), shape=(n_nodes, n_cells)
        ).tocsr()

    blocks = []
    pair_idx = []
    node_idx = []
    for m, (a, b) in enumerate(pairs):
        diff = (per_element[a] - per_element[b]).tocsr()
        if masks is None:
            keep = np.arange(n_nodes)
        else:
            keep = np.flatnonzero(np.asarray(masks[m]).ravel())
        blocks.append(diff[keep])
        pair_idx.append(np.full(keep.size, m))
        node_idx.append(keep)

    matrix = sp.vstack(blocks, format="csr") if blocks else sp.csr_matrix((0, n_cells))
    return PathMatrix(
        matrix=matrix,
        pair_index=np.concatenate(pair_idx) if pair_idx else np.empty(0, int),
        node_index=np.concatenate(node_idx) if node_idx else np.empty(0, int),
        pairs=tuple((int(a), int(b)) for a, b in pairs),
        slow_grid=slow_grid,
    )


def tv_operator(
    grid: ImagingGrid, w_axial: float = 1.0, w_lateral: float = 0.5
) -> sp.csr_matrix:
    """Stacked forward-difference operators with anisotropic weights.

    Axial differences are scaled by w_axial, lateral by w_lateral;
    boundary rows are omitted (no wraparound).
    """
    if w_axial < 0 or w_lateral < 0:
        raise ValueError("TV weights must be >= 0")
    nx, nz = grid.nx, grid.nz
    n = nx * nz
    idx = np.arange(n).reshape(nz, nx)

    a_from = idx[:-1, :].ravel()
    a_to = idx[1:, :].ravel()
    n_ax = a_from.size
    d_ax = sp.coo_matrix(
        (
            np.concatenate([-w_axial * np.ones(n_ax), w_axial * np.ones(n_ax)]),
            (
                np.concatenate([np.arange(n_ax), np.arange(n_ax)]),
                np.concatenate([a_from, a_to]),
            ),
        ),
        shape=(n_ax, n),
    )

    l_from = idx[:, :-1].ravel()
    l_to = idx[:, 1:].ravel()
    n_lat = l_from.size
    d_lat = sp.coo_matrix(
        (
            np.concatenate([-w_lateral * np.ones(n_lat), w_lateral * np.ones(n_lat)]),
            (
                np.concatenate([np.arange(n_lat), np.arange(n_lat)]),
                np.concatenate([l_from, l_to]),
            ),
        ),
        shape=(n_lat, n),
    )
    return sp.vstack([d_ax, d_lat], format="csr")


def charbonnier(t: np.ndarray, eps: float) -> np.ndarray:
    """Smoothed absolute value sqrt(t^2 + eps^2) - eps."""
    return np.sqrt(t * t + eps * eps) - eps


def objective_and_grad(
    sigma: np.ndarray,
    L: sp.csr_matrix,
    delays: np.ndarray,
    D: sp.csr_matrix,
    lam_eff: float,
    eps: float,
) -> tuple[float, np.ndarray]:
    """Smoothed L1 data + TV objective and its analytic gradient."""
    r = L @ sigma - delays
    g = D @ sigma
    f = float(np.sum(charbonnier(r, eps)) + lam_eff * np.sum(charbonnier(g, eps)))
    dr = r / np.sqrt(r * r + eps * eps)
    dg = g / np.sqrt(g * g + eps * eps)
    grad = L.T @ dr + lam_eff * (D.T @ dg)
    return f, grad


def reconstruct(
    L: PathMatrix,
    delays: np.ndarray,
    D: sp.csr_matrix,
    cfg: ReconConfig = ReconConfig(),
) -> tuple[SlownessMap, ReconInfo]:
    """Solve for the slowness deviation map from stacked delays.

    The regularization strength is normalized by the measurement/TV row
    ratio, so the default lam is comparable across grid sizes. Starts
    from sigma = 0 and runs L-BFGS until the gradient tolerance or
    iteration cap is hit.
    """
    A = L.matrix
    delays = np.asarray(delays, dtype=float).ravel()
    if delays.size != A.shape[0]:
        raise ValueError(
            f"delay vector length {delays.size} != path matrix rows {A.shape[0]}"
        )
    n = A.shape[1]
    n_tv = max(D.shape[0], 1)
    lam_eff = cfg.lam * (A.shape[0] / n_tv)
    eps = cfg.l1_epsilon

    trace: list[float] = []

    def fun(x):
        f, grad = objective_and_grad(x, A, delays, D, lam_eff, eps)
        if not np.isfinite(f) or not np.all(np.isfinite(grad)):
            raise SolverError("non-finite objective or gradient", iterate=x.copy())
        return f, grad

    def cb(xk):
        trace.append(objective_and_grad(xk, A, delays, D, lam_eff, eps)[0])

    x0 = np.zeros(n)
    trace.append(fun(x0)[0])
    res = minimize(
        fun,
        x0,
        jac=True,
        method="L-BFGS-B",
        callback=cb,
        options=dict(
            maxcor=cfg.lbfgs_memory,
            maxiter=cfg.max_iter,
            gtol=cfg.grad_tol,
            ftol=cfg.obj_tol,
        ),
    )
    converged = bool(res.success) or res.status == 0
    if res.nit >= cfg.max_iter:
        converged = False
    grad_norm = float(np.max(np.abs(res.jac))) if res.jac is not None else np.nan
    values = res.x.reshape(L.slow_grid.nz, L.slow_grid.nx)
    info = ReconInfo(
        objective_trace=trace,
        converged=converged,
        iterations=int(res.nit),
        grad_norm=grad_norm,
        message=str(res.message),
    )
    return SlownessMap(values=values, grid=L.slow_grid), info
