"""Scan geometries, image grids, and the matrix-free tomographic operator pair.

The projector computes exact interval-length (Siddon-style) ray/pixel
intersections once and stores them as a sparse matrix, so forward projection
and backprojection are exact adjoints by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp


class GeometryKind(str, Enum):
    FAN_FLAT = "fan_flat"
    FAN_CURVED = "fan_curved"
    PARALLEL = "parallel"


@dataclass(frozen=True)
class ImageGrid:
    """Square-pixel image grid centered at the isocenter."""

    nx: int
    ny: int
    pixel_size: float  # mm

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError(f"grid must have at least one pixel, got {self.nx}x{self.ny}")
        if self.pixel_size <= 0:
            raise ValueError(f"pixel_size must be positive, got {self.pixel_size}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def n_pixels(self) -> int:
        return self.nx * self.ny

    @property
    def xmin(self) -> float:
        return -0.5 * self.nx * self.pixel_size

    @property
    def ymin(self) -> float:
        return -0.5 * self.ny * self.pixel_size

    @property
    def circumradius(self) -> float:
        """Radius of the circle circumscribing the grid rectangle."""
        return 0.5 * self.pixel_size * float(np.hypot(self.nx, self.ny))


@dataclass
class Image:
    """Attenuation map on a grid; values are row-major (ny, nx), row 0 at ymin."""

    grid: ImageGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.grid.shape:
            raise ValueError(
                f"image values shape {self.values.shape} does not match grid {self.grid.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("image contains non-finite values")


@dataclass(frozen=True)
class ScanGeometry:
    """Acquisition description: detector layout plus ordered view angles.

    det_spacing is mm per cell for flat/parallel detectors; for curved fan
    detectors it is arc length per cell at the detector radius (sdd), from
    which the equiangular increment det_spacing/sdd is derived.
    """

    kind: GeometryKind
    n_det: int
    det_spacing: float
    angles: np.ndarray
    sid: float | None = None  # source-to-isocenter, fan only
    sdd: float | None = None  # source-to-detector, fan only

    def __post_init__(self):
        object.__setattr__(self, "angles", np.asarray(self.angles, dtype=np.float64))
        if self.n_det < 1:
            raise ValueError("n_det must be >= 1")
        if self.det_spacing <= 0:
            raise ValueError("det_spacing must be positive")
        if self.angles.ndim != 1 or self.angles.size < 1:
            raise ValueError("angles must be a non-empty 1-D sequence")
        if np.any(np.diff(self.angles) <= 0):
            raise ValueError("angles must be strictly increasing")
        if self.angles[-1] - self.angles[0] >= 2 * np.pi:
            raise ValueError("angles must lie within one rotation")
        if self.kind in (GeometryKind.FAN_FLAT, GeometryKind.FAN_CURVED):
            if self.sid is None or self.sdd is None:
                raise ValueError("fan geometries require sid and sdd")
            if not 0 < self.sid < self.sdd:
                raise ValueError(f"fan geometry needs 0 < sid < sdd, got sid={self.sid} sdd={self.sdd}")

    @property
    def n_views(self) -> int:
        return int(self.angles.size)

    def coverage_radius(self) -> float:
        """Radius around the isocenter guaranteed to be seen by every view."""
        if self.kind == GeometryKind.PARALLEL:
            return 0.5 * self.n_det * self.det_spacing
        half_span = 0.5 * self.n_det * self.det_spacing
        if self.kind == GeometryKind.FAN_FLAT:
            half_fan = np.arctan2(half_span, self.sdd)
        else:
            half_fan = min(half_span / self.sdd, 0.5 * np.pi)
        return self.sid * float(np.sin(half_fan))


@dataclass
class Sinogram:
    """Line-integral measurements, shape (n_views, n_det), units mm x attenuation."""

    geometry: ScanGeometry
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        expected = (self.geometry.n_views, self.geometry.n_det)
        if self.values.shape != expected:
            raise ValueError(f"sinogram shape {self.values.shape}, geometry expects {expected}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("sinogram contains non-finite values")


@dataclass
class ViewSubsets:
    """Interleaved partition of view indices for ordered-subset sweeps."""

    k: int
    assignment: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.k != len(self.assignment):
            raise ValueError("assignment must contain exactly k subsets")


def uniform_angles(n_views: int, full_rotation: float = 2 * np.pi) -> np.ndarray:
    """n_views equally spaced angles in [0, full_rotation), starting at 0."""
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    return np.arange(n_views, dtype=np.float64) * (full_rotation / n_views)


def subsample_views(geometry: ScanGeometry, n_keep: int) -> ScanGeometry:
    """Keep views at indices floor(i * n_views / n_keep), i = 0..n_keep-1."""
    n = geometry.n_views
    if not 1 <= n_keep <= n:
        raise ValueError(f"n_keep must be in [1, {n}], got {n_keep}")
    idx = (np.arange(n_keep) * n) // n_keep
    return ScanGeometry(
        kind=geometry.kind,
        n_det=geometry.n_det,
        det_spacing=geometry.det_spacing,
        angles=geometry.angles[idx],
        sid=geometry.sid,
        sdd=geometry.sdd,
    )


def partition_subsets(geometry: ScanGeometry, k: int) -> ViewSubsets:
    """Interleaved view partition: view i goes to subset i mod k."""
    n = geometry.n_views
    if not 1 <= k <= n:
        raise ValueError(f"subset count must be in [1, {n}], got {k}")
    assignment = [np.arange(j, n, k) for j in range(k)]
    return ViewSubsets(k=k, assignment=assignment)


def _ray_endpoints(geometry: ScanGeometry, angle: float, grid: ImageGrid):
    """Endpoints (p0, p1) of every detector ray for one view, both (n_det, 2)."""
    n = geometry.n_det
    offsets = (np.arange(n) - (n - 1) / 2.0) * geometry.det_spacing
    if geometry.kind == GeometryKind.PARALLEL:
        # Detector axis u, ray direction v perpendicular to it.
        u = np.array([np.cos(angle), np.sin(angle)])
        v = np.array([-np.sin(angle), np.cos(angle)])
        centers = offsets[:, None] * u[None, :]
        half_len = grid.circumradius * 1.5 + geometry.det_spacing
        return centers - half_len * v, centers + half_len * v
    source = geometry.sid * np.array([np.cos(angle), np.sin(angle)])
    toward_iso = -source / geometry.sid
    u = np.array([-np.sin(angle), np.cos(angle)])
    if geometry.kind == GeometryKind.FAN_FLAT:
        det_center = source + geometry.sdd * toward_iso
        cells = det_center[None, :] + offsets[:, None] * u[None, :]
    else:
        gammas = offsets / geometry.sdd  # equiangular increments from arc spacing
        cells = (
            source[None, :]
            + geometry.sdd * np.cos(gammas)[:, None] * toward_iso[None, :]
            + geometry.sdd * np.sin(gammas)[:, None] * u[None, :]
        )
    p0 = np.broadcast_to(source, cells.shape).copy()
    return p0, cells


def _siddon_view(p0: np.ndarray, p1: np.ndarray, grid: ImageGrid):
    """Exact ray/pixel intersection lengths for a batch of rays.

    Returns (ray_index, pixel_index, length_mm) arrays. Lengths are in mm;
    pixel_index is iy * nx + ix.
    """
    nx, ny, ps = grid.nx, grid.ny, grid.pixel_size
    xmin, ymin = grid.xmin, grid.ymin
    xplanes = xmin + np.arange(nx + 1) * ps
    yplanes = ymin + np.arange(ny + 1) * ps

    d = p1 - p0
    ray_len = np.hypot(d[:, 0], d[:, 1])

    def axis_alphas(p0a, da, planes):
        with np.errstate(divide="ignore", invalid="ignore"):
            a = (planes[None, :] - p0a[:, None]) / da[:, None]
        parallel = np.abs(da) < 1e-12 * max(ps, 1.0)
        inside = (p0a >= planes[0]) & (p0a <= planes[-1])
        lo = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(a[:, 0], a[:, -1]))
        hi = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(a[:, 0], a[:, -1]))
        return a, lo, hi

    ax, axlo, axhi = axis_alphas(p0[:, 0], d[:, 0], xplanes)
    ay, aylo, ayhi = axis_alphas(p0[:, 1], d[:, 1], yplanes)

    amin = np.maximum(np.maximum(axlo, aylo), 0.0)
    amax = np.minimum(np.minimum(axhi, ayhi), 1.0)
    hit = amax > amin + 1e-12
    amin = np.where(hit, amin, 0.0)
    amax = np.where(hit, amax, 0.0)

    cross = np.concatenate([ax, ay], axis=1)
    keep = np.isfinite(cross) & (cross > amin[:, None]) & (cross < amax[:, None])
    cross = np.where(keep, cross, amin[:, None])
    alphas = np.sort(
        np.concatenate([cross, amin[:, None], amax[:, None]], axis=1), axis=1
    )

    seg = np.diff(alphas, axis=1)
    mid = 0.5 * (alphas[:, :-1] + alphas[:, 1:])
    px = p0[:, 0:1] + mid * d[:, 0:1]
    py = p0[:, 1:2] + mid * d[:, 1:2]
    ix = np.floor((px - xmin) / ps).astype(np.int64)
    iy = np.floor((py - ymin) / ps).astype(np.int64)

    good = hit[:, None] & (seg > 1e-12) & (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
    ray_ids, seg_ids = np.nonzero(good)
    lengths = seg[ray_ids, seg_ids] * ray_len[ray_ids]
    pix = iy[ray_ids, seg_ids] * nx + ix[ray_ids, seg_ids]
    return ray_ids, pix, lengths


class Projector:
    """Forward/backprojection operator pair for one (geometry, grid) pairing.

    Immutable after construction; project/backproject are pure and the pair
    is an exact adjoint with respect to the Euclidean inner products.
    """

    def __init__(self, geometry: ScanGeometry, grid: ImageGrid):
        r_grid = grid.circumradius
        if geometry.kind != GeometryKind.PARALLEL:
            if geometry.sid <= r_grid:
                raise ValueError(
                    f"source (sid={geometry.sid}) lies inside the grid circumradius {r_grid:.2f}"
                )
            if geometry.sdd - geometry.sid <= r_grid:
                raise ValueError("detector intersects the image grid")
        if geometry.coverage_radius() < r_grid:
            raise ValueError(
                f"detector span covers radius {geometry.coverage_radius():.2f} mm, "
                f"grid circumradius is {r_grid:.2f} mm"
            )
        self.geometry = geometry
        self.grid = grid
        self._matrix = self._build_matrix()
        self._row_sums = np.asarray(self._matrix.sum(axis=1)).ravel()
        self._col_sums = np.asarray(self._matrix.sum(axis=0)).ravel()

    def _build_matrix(self) -> sp.csr_matrix:
        rows, cols, vals = [], [], []
        n_det = self.geometry.n_det
        for iv, angle in enumerate(self.geometry.angles):
            p0, p1 = _ray_endpoints(self.geometry, float(angle), self.grid)
            r, c, v = _siddon_view(p0, p1, self.grid)
            rows.append(r + iv * n_det)
            cols.append(c)
            vals.append(v)
        n_rays = self.geometry.n_views * n_det
        mat = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n_rays, self.grid.n_pixels),
        )
        mat.sum_duplicates()
        return mat

    @property
    def matrix(self) -> sp.csr_matrix:
        return self._matrix

    @property
    def shape(self) -> tuple[int, int]:
        return self._matrix.shape

    def project(self, values: np.ndarray) -> np.ndarray:
        """Line integrals of an image, shape (n_views, n_det)."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.grid.shape:
            raise ValueError(f"image shape {values.shape} does not match grid {self.grid.shape}")
        out = self._matrix @ values.ravel()
        return out.reshape(self.geometry.n_views, self.geometry.n_det)

    def backproject(self, sino: np.ndarray) -> np.ndarray:
        """Exact adjoint of project, shape (ny, nx)."""
        sino = np.asarray(sino, dtype=np.float64)
        expected = (self.geometry.n_views, self.geometry.n_det)
        if sino.shape != expected:
            raise ValueError(f"sinogram shape {sino.shape} does not match geometry {expected}")
        out = self._matrix.T @ sino.ravel()
        return out.reshape(self.grid.shape)

    def row_col_sums(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-ray and per-pixel total weights (A @ 1, A.T @ 1)."""
        return self._row_sums.copy(), self._col_sums.copy()

    def view_rows(self, view_indices: np.ndarray) -> np.ndarray:
        """Sinogram row indices belonging to the given views."""
        view_indices = np.asarray(view_indices, dtype=np.int64)
        n_det = self.geometry.n_det
        return (view_indices[:, None] * n_det + np.arange(n_det)[None, :]).ravel()


def default_geometry(
    grid: ImageGrid,
    kind: GeometryKind = GeometryKind.FAN_FLAT,
    n_det: int = 256,
    n_views: int = 246,
    sid: float = 625.61 / 4,
    sdd: float = 1097.6 / 4,
    margin: float = 1.1,
) -> ScanGeometry:
    """Desk-scale geometry with detector spacing derived from grid coverage.

    The full-scale distances are divided by four; the detector spacing is
    chosen so the span covers the grid circumradius with the given margin.
    """
    r_need = grid.circumradius * margin
    angles = uniform_angles(n_views)
    if kind == GeometryKind.PARALLEL:
        spacing = 2.0 * r_need / n_det
        return ScanGeometry(kind=kind, n_det=n_det, det_spacing=spacing, angles=angles)
    if r_need >= sid:
        raise ValueError("grid does not fit inside the scan field of view")
    half_fan = np.arcsin(r_need / sid)
    if kind == GeometryKind.FAN_FLAT:
        spacing = 2.0 * sdd * np.tan(half_fan) / n_det
    else:
        spacing = 2.0 * sdd * half_fan / n_det
    return ScanGeometry(kind=kind, n_det=n_det, det_spacing=float(spacing), angles=angles, sid=sid, sdd=sdd)
