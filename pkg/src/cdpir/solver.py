"""Classical iterative reconstruction: SART, OS-SART, TV descent, and the
adaptive SART/TV fusion loop with a residual-targeted convex weight.

Residuals are squared L2 norms throughout. The fusion weight lambda_tv in
(0, 1] is the smallest root of the quadratic residual equation when one
exists, otherwise the feasible value whose residual is closest to the
target.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .geometry import Projector, partition_subsets


@dataclass(frozen=True)
class AsdPocsConfig:
    p_outer: int = 10  # outer iterations per solve
    q_tv: int = 1  # TV gradient steps per outer iteration
    k_subsets: int = 5
    w_residual: float = 0.8
    tv_eps: float = 1e-6
    tv_step_scale: float = 0.2
    init_iters: int = 30  # outer iterations for the initialization solve
    nonneg: bool = True
    relaxation: float = 1.0
    delta_n: float | None = None  # optional residual early-stop

    def __post_init__(self):
        if self.p_outer < 0 or self.q_tv < 0 or self.k_subsets < 1:
            raise ValueError("need p_outer >= 0, q_tv >= 0, k_subsets >= 1")
        if not 0.0 < self.w_residual < 1.0:
            raise ValueError("w_residual must be in (0, 1)")


@dataclass
class ItvState:
    lambda_tv: float = 1.0
    eps_prev: float = 0.0
    eps_sart: float = 0.0


@dataclass
class SubsetOperator:
    """Row slice of the system matrix for one view subset, with SART weights."""

    matrix: "object"  # csr_matrix rows for this subset
    y_rows: np.ndarray  # sinogram row indices
    inv_row: np.ndarray  # 1/row_sums, zero-masked
    inv_col: np.ndarray  # 1/col_sums, zero-masked


class SartSystem:
    """Precomputed subset operators for OS-SART sweeps over one projector."""

    def __init__(self, projector: Projector, k_subsets: int):
        subsets = partition_subsets(projector.geometry, k_subsets)
        self.projector = projector
        self.k = k_subsets
        self.subsets = []
        a = projector.matrix
        for views in subsets.assignment:
            rows = projector.view_rows(views)
            sub = a[rows]
            row_sums = np.asarray(sub.sum(axis=1)).ravel()
            col_sums = np.asarray(sub.sum(axis=0)).ravel()
            if row_sums.max() <= 0:
                raise ValueError("subset operator is identically zero")
            with np.errstate(divide="ignore"):
                inv_row = np.where(row_sums > 0, 1.0 / np.maximum(row_sums, 1e-300), 0.0)
                inv_col = np.where(col_sums > 0, 1.0 / np.maximum(col_sums, 1e-300), 0.0)
            self.subsets.append(
                SubsetOperator(matrix=sub, y_rows=rows, inv_row=inv_row, inv_col=inv_col)
            )


def sart_sweep(
    x: np.ndarray,
    y: np.ndarray,
    system: SartSystem,
    subset_index: int,
    relaxation: float = 1.0,
    nonneg: bool = False,
) -> np.ndarray:
    """One SART update over a view subset.

    x' = x + relax * C^-1 A_sub^T R^-1 (y_sub - A_sub x), with R/C the
    subset row/column sums; zero-weight rays and pixels are masked out.
    """
    sub = system.subsets[subset_index]
    shape = x.shape
    xf = x.ravel()
    residual = y.ravel()[sub.y_rows] - sub.matrix @ xf
    update = sub.inv_col * (sub.matrix.T @ (sub.inv_row * residual))
    out = xf + relaxation * update
    if nonneg:
        out = np.maximum(out, 0.0)
    return out.reshape(shape)


def os_sart_pass(
    x: np.ndarray,
    y: np.ndarray,
    system: SartSystem,
    relaxation: float = 1.0,
    nonneg: bool = False,
) -> np.ndarray:
    """Sequential SART sweeps over subsets 0..K-1 (one ordered-subset pass)."""
    for j in range(system.k):
        x = sart_sweep(x, y, system, j, relaxation=relaxation, nonneg=nonneg)
    return x


def _tv_diffs(x: np.ndarray):
    # forward differences with reflective (zero last row/col) boundary
    dh = np.zeros_like(x)
    dv = np.zeros_like(x)
    dh[:, :-1] = x[:, 1:] - x[:, :-1]
    dv[:-1, :] = x[1:, :] - x[:-1, :]
    return dh, dv


def tv_norm(x: np.ndarray, tv_eps: float = 1e-6) -> float:
    """Smoothed isotropic TV: sum of sqrt(dh^2 + dv^2 + tv_eps^2)."""
    dh, dv = _tv_diffs(np.asarray(x, dtype=np.float64))
    return float(np.sum(np.sqrt(dh * dh + dv * dv + tv_eps * tv_eps)))


def tv_gradient(x: np.ndarray, tv_eps: float = 1e-6) -> np.ndarray:
    """Gradient of the smoothed TV norm."""
    x = np.asarray(x, dtype=np.float64)
    dh, dv = _tv_diffs(x)
    mag = np.sqrt(dh * dh + dv * dv + tv_eps * tv_eps)
    gh = dh / mag
    gv = dv / mag
    g = np.zeros_like(x)
    g -= gh + gv
    g[:, 1:] += gh[:, :-1]
    g[1:, :] += gv[:-1, :]
    return g


def tv_descent(x: np.ndarray, q: int, step_size: float, tv_eps: float = 1e-6) -> np.ndarray:
    """q normalized TV gradient steps of magnitude step_size."""
    x = np.array(x, dtype=np.float64)
    for _ in range(q):
        g = tv_gradient(x, tv_eps)
        norm = float(np.linalg.norm(g))
        if norm == 0.0 or step_size == 0.0:
            break
        x = x - step_size * g / norm
    return x


def solve_lambda_tv(
    x_sart: np.ndarray,
    x_tv: np.ndarray,
    y: np.ndarray,
    projector: Projector,
    eps_prev: float,
    w: float,
) -> float:
    """Fusion weight in (0, 1] targeting the residual (1-w)*eps_sart + w*eps_prev.

    The residual of (1-lam)*x_sart + lam*x_tv is quadratic in lam; the
    smallest root in (0, 1] is returned, or the feasible lam whose residual
    is closest to the target when no root lies in the interval.
    """
    r = (projector.project(x_sart) - y).ravel()
    d = projector.project(x_tv - x_sart).ravel()
    eps_sart = float(r @ r)
    tau = (1.0 - w) * eps_sart + w * eps_prev

    a = float(d @ d)
    b = 2.0 * float(r @ d)
    c = eps_sart - tau
    scale = max(eps_sart, tau, 1.0)
    if a <= 1e-14 * scale:
        return 1.0  # residual is constant in lam; fusion weight irrelevant

    disc = b * b - 4.0 * a * c
    if disc >= 0.0:
        sq = np.sqrt(disc)
        roots = sorted(((-b - sq) / (2 * a), (-b + sq) / (2 * a)))
        in_range = [lam for lam in roots if 0.0 < lam <= 1.0]
        if in_range:
            return float(in_range[0])

    # no feasible root: clamp to the lam in (0, 1] with residual closest to tau
    def gap(lam):
        return abs(a * lam * lam + b * lam + c)

    candidates = [1.0]
    vertex = -b / (2.0 * a)
    if 0.0 < vertex <= 1.0:
        candidates.append(vertex)
    candidates.append(1e-9)  # open lower end of the interval
    return float(min(candidates, key=gap))


def asd_pocs_itv(
    y: np.ndarray,
    projector: Projector,
    config: AsdPocsConfig,
    x_init: np.ndarray | None = None,
    n_outer: int | None = None,
    system: SartSystem | None = None,
    log_path=None,
):
    """Full SART/TV alternating solve with adaptive residual-targeted fusion.

    Runs n_outer (default config.p_outer) outer iterations; each applies one
    ordered-subset SART pass, q_tv TV descent steps scaled by the SART update
    norm, then fuses the two images with the solved lambda_tv. Returns
    (image, ItvState, diagnostics), where diagnostics is a list of per-
    iteration dicts.
    """
    if system is None:
        system = SartSystem(projector, config.k_subsets)
    x = np.zeros(projector.grid.shape) if x_init is None else np.array(x_init, dtype=np.float64)
    p_total = config.p_outer if n_outer is None else n_outer
    state = ItvState()
    diagnostics = []

    for p in range(p_total):
        eps_prev = float(np.sum((projector.project(x) - y) ** 2))
        x_sart = os_sart_pass(x, y, system, relaxation=config.relaxation)
        eps_sart = float(np.sum((projector.project(x_sart) - y) ** 2))
        step = config.tv_step_scale * float(np.linalg.norm(x_sart - x))
        x_tv = tv_descent(x_sart, config.q_tv, step, config.tv_eps) if config.q_tv else x_sart
        lam = solve_lambda_tv(x_sart, x_tv, y, projector, eps_prev, config.w_residual)
        x = (1.0 - lam) * x_sart + lam * x_tv
        if config.nonneg:
            x = np.maximum(x, 0.0)
        eps_now = float(np.sum((projector.project(x) - y) ** 2))
        state = ItvState(lambda_tv=lam, eps_prev=eps_prev, eps_sart=eps_sart)
        diagnostics.append(
            {
                "iter": p,
                "eps_prev": eps_prev,
                "eps_sart": eps_sart,
                "tau": (1 - config.w_residual) * eps_sart + config.w_residual * eps_prev,
                "lambda_tv": lam,
                "eps": eps_now,
                "tv_norm": tv_norm(x, config.tv_eps),
                "tv_norm_sart": tv_norm(x_sart, config.tv_eps),
            }
        )
        if config.delta_n is not None and eps_now <= config.delta_n:
            break

    if log_path is not None and diagnostics:
        with open(log_path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(diagnostics[0].keys()))
            writer.writeheader()
            writer.writerows(diagnostics)
    return x, state, diagnostics
