"""Multi-domain synthetic phantoms, noisy sinogram simulation, dataset builds.

Three synthetic domains stand in for heterogeneous clinical datasets:
domain 0 is piecewise-constant anatomy with smooth edges, domain 1 is
textured anatomy with sharp edges, domain 2 (held out of training) mixes
ellipses and rectangles with intermediate texture.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import Image, ImageGrid, Projector, ScanGeometry
from .tensorio import read_tensor, write_tensor


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    n_ellipses: tuple[int, int] = (3, 6)  # inclusive range
    intensity_range: tuple[float, float] = (0.15, 0.9)
    texture_amp: float = 0.0
    texture_corr_len: float = 3.0  # pixels
    edge_sharpness: float = 1.0  # boundary smoothing width in pixels
    rectangles: bool = False

    def __post_init__(self):
        if self.domain_id < 0:
            raise ValueError("domain_id must be >= 0")
        if self.texture_amp < 0 or self.n_ellipses[0] < 1:
            raise ValueError("texture amplitude must be >= 0 and ellipse count >= 1")


DOMAINS = {
    0: DomainSpec(0, n_ellipses=(3, 6), texture_amp=0.0, edge_sharpness=1.5),
    1: DomainSpec(1, n_ellipses=(4, 8), texture_amp=0.15, texture_corr_len=2.5, edge_sharpness=0.3),
    2: DomainSpec(
        2, n_ellipses=(3, 7), texture_amp=0.13, texture_corr_len=3.0,
        edge_sharpness=0.5, rectangles=True,
    ),
}


class NoiseKind(str, Enum):
    NONE = "none"
    POISSON = "poisson"
    GAUSSIAN = "gaussian"
    POISSON_GAUSSIAN = "poisson_gaussian"


@dataclass(frozen=True)
class NoiseModel:
    kind: NoiseKind = NoiseKind.NONE
    i0: float = 1e5  # incident photons per ray
    sigma_e: float = 0.0  # post-log additive std
    atten_scale: float = 1.0  # 1/mm attenuation per unit sinogram value

    def __post_init__(self):
        if self.kind in (NoiseKind.POISSON, NoiseKind.POISSON_GAUSSIAN) and self.i0 <= 0:
            raise ValueError("Poisson noise requires i0 > 0")
        if self.sigma_e < 0:
            raise ValueError("sigma_e must be >= 0")
        if self.atten_scale <= 0:
            raise ValueError("atten_scale must be positive")


def _coordinate_grids(grid: ImageGrid):
    yy, xx = np.mgrid[0 : grid.ny, 0 : grid.nx].astype(np.float64)
    # normalized coordinates in [-1, 1]
    u = (xx + 0.5) / grid.nx * 2.0 - 1.0
    v = (yy + 0.5) / grid.ny * 2.0 - 1.0
    return u, v


def _soft_ellipse(u, v, cx, cy, ax, ay, angle, width):
    """Ellipse indicator with a smooth boundary; width in normalized units."""
    ca, sa = np.cos(angle), np.sin(angle)
    xr = (u - cx) * ca + (v - cy) * sa
    yr = -(u - cx) * sa + (v - cy) * ca
    q = np.sqrt((xr / ax) ** 2 + (yr / ay) ** 2)
    return np.clip((1.0 - q) / max(width, 1e-6) + 0.5, 0.0, 1.0)


def _soft_rectangle(u, v, cx, cy, ax, ay, angle, width):
    ca, sa = np.cos(angle), np.sin(angle)
    xr = (u - cx) * ca + (v - cy) * sa
    yr = -(u - cx) * sa + (v - cy) * ca
    q = np.maximum(np.abs(xr) / ax, np.abs(yr) / ay)
    return np.clip((1.0 - q) / max(width, 1e-6) + 0.5, 0.0, 1.0)


def gen_phantom(seed: int, domain: DomainSpec, grid: ImageGrid) -> tuple[Image, int]:
    """Deterministic phantom in [0, 1] with a body outline and domain-styled
    internal structures."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, domain.domain_id]))
    u, v = _coordinate_grids(grid)
    width = domain.edge_sharpness * 2.0 / grid.nx

    body_ax = rng.uniform(0.70, 0.85)
    body_ay = rng.uniform(0.70, 0.85)
    body = _soft_ellipse(u, v, 0.0, 0.0, body_ax, body_ay, rng.uniform(0, np.pi), width)
    img = 0.2 * body

    n_shapes = int(rng.integers(domain.n_ellipses[0], domain.n_ellipses[1] + 1))
    for _ in range(n_shapes):
        cx = rng.uniform(-0.45, 0.45)
        cy = rng.uniform(-0.45, 0.45)
        ax = rng.uniform(0.08, 0.35)
        ay = rng.uniform(0.08, 0.35)
        angle = rng.uniform(0, np.pi)
        level = rng.uniform(*domain.intensity_range)
        use_rect = domain.rectangles and rng.random() < 0.5
        shape_fn = _soft_rectangle if use_rect else _soft_ellipse
        mask = shape_fn(u, v, cx, cy, ax, ay, angle, width) * body
        # blend toward the shape's level instead of accumulating
        img = img * (1.0 - mask) + level * mask

    if domain.texture_amp > 0:
        noise = rng.standard_normal(grid.shape)
        tex = gaussian_filter(noise, domain.texture_corr_len)
        tex_std = tex.std()
        if tex_std > 0:
            tex = tex / tex_std
        img = img + domain.texture_amp * tex * body

    img = np.clip(img, 0.0, 1.0)
    return Image(grid, img), domain.domain_id


def simulate_sinogram(
    image: Image,
    projector: Projector,
    noise: NoiseModel,
    seed: int = 0,
) -> np.ndarray:
    """Project an image and apply the configured measurement noise.

    The Poisson branch works in the count domain: counts drawn from
    Poisson(i0 * exp(-atten_scale * y)), clamped >= 1, then mapped back to
    line integrals via -ln(counts/i0) / atten_scale. Gaussian noise is added
    post-log. Deterministic given the seed.
    """
    y = projector.project(image.values)
    if noise.kind == NoiseKind.NONE:
        return y
    rng = np.random.default_rng(seed)
    out = y
    if noise.kind in (NoiseKind.POISSON, NoiseKind.POISSON_GAUSSIAN):
        s = noise.atten_scale
        counts = rng.poisson(noise.i0 * np.exp(-s * y)).astype(np.float64)
        counts = np.maximum(counts, 1.0)
        out = -np.log(counts / noise.i0) / s
    if noise.kind in (NoiseKind.GAUSSIAN, NoiseKind.POISSON_GAUSSIAN):
        out = out + rng.normal(scale=noise.sigma_e, size=y.shape) if noise.sigma_e > 0 else out
    return out


@dataclass
class DatasetEntry:
    phantom_file: str
    sinogram_file: str
    domain_id: int
    seed: int
    split: str


@dataclass
class DatasetManifest:
    grid: dict
    geometry: dict
    noise: dict
    entries: list[DatasetEntry] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "grid": self.grid,
                "geometry": self.geometry,
                "noise": self.noise,
                "entries": [asdict(e) for e in self.entries],
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        data = json.loads(text)
        return cls(
            grid=data["grid"],
            geometry=data["geometry"],
            noise=data["noise"],
            entries=[DatasetEntry(**e) for e in data["entries"]],
        )


@dataclass(frozen=True)
class DatasetConfig:
    out_dir: str
    nx: int = 64
    domains: tuple[int, ...] = (0, 1)
    ood_domain: int | None = 2
    n_train: int = 100  # per training domain
    n_test: int = 10  # per domain, OOD included
    base_seed: int = 0
    noise: NoiseModel = NoiseModel()
    geometry: ScanGeometry | None = None


def geometry_descriptor(geometry: ScanGeometry) -> dict:
    return {
        "kind": geometry.kind.value,
        "n_det": geometry.n_det,
        "det_spacing": geometry.det_spacing,
        "n_views": geometry.n_views,
        "angles_start": float(geometry.angles[0]),
        "angles_span": float(geometry.angles[-1] - geometry.angles[0]),
        "angles": [float(a) for a in geometry.angles],
        "sid": geometry.sid,
        "sdd": geometry.sdd,
    }


def geometry_from_descriptor(desc: dict) -> ScanGeometry:
    from .geometry import GeometryKind

    n = desc["n_views"]
    if "angles" in desc:
        angles = np.asarray(desc["angles"], dtype=np.float64)
    elif n > 1:
        angles = desc["angles_start"] + np.arange(n) * (desc["angles_span"] / (n - 1))
    else:
        angles = np.array([desc["angles_start"]])
    return ScanGeometry(
        kind=GeometryKind(desc["kind"]),
        n_det=desc["n_det"],
        det_spacing=desc["det_spacing"],
        angles=angles,
        sid=desc.get("sid"),
        sdd=desc.get("sdd"),
    )


def build_dataset(config: DatasetConfig) -> DatasetManifest:
    """Write phantom/sinogram pairs per domain plus a JSON manifest.

    The OOD domain (if any) appears only in the test split. The whole
    dataset is a pure function of the config.
    """
    from .geometry import default_geometry

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = ImageGrid(config.nx, config.nx, 1.0)
    geometry = config.geometry or default_geometry(grid, n_det=2 * config.nx, n_views=246)
    projector = Projector(geometry, grid)

    manifest = DatasetManifest(
        grid={"nx": grid.nx, "ny": grid.ny, "pixel_size": grid.pixel_size},
        geometry=geometry_descriptor(geometry),
        noise={
            "kind": config.noise.kind.value,
            "i0": config.noise.i0,
            "sigma_e": config.noise.sigma_e,
            "atten_scale": config.noise.atten_scale,
        },
    )

    test_domains = list(config.domains)
    if config.ood_domain is not None and config.ood_domain not in test_domains:
        test_domains.append(config.ood_domain)

    seed = config.base_seed
    jobs = [("train", d, config.n_train) for d in config.domains]
    jobs += [("test", d, config.n_test) for d in test_domains]
    for split, domain_id, count in jobs:
        domain = DOMAINS[domain_id]
        for i in range(count):
            entry_seed = seed
            seed += 1
            image, _ = gen_phantom(entry_seed, domain, grid)
            # simulate from the stored (float32) phantom so that re-running
            # the forward model on the written file reproduces the sinogram
            stored = image.values.astype(np.float32)
            sino = simulate_sinogram(
                Image(grid, stored.astype(np.float64)), projector, config.noise,
                seed=entry_seed + 10_000_019,
            )
            stem = f"{split}_d{domain_id}_{i:04d}"
            phantom_file = f"{stem}_phantom.ten"
            sino_file = f"{stem}_sino.ten"
            write_tensor(out / phantom_file, stored)
            write_tensor(out / sino_file, sino.astype(np.float32))
            manifest.entries.append(
                DatasetEntry(
                    phantom_file=phantom_file,
                    sinogram_file=sino_file,
                    domain_id=domain_id,
                    seed=entry_seed,
                    split=split,
                )
            )

    (out / "manifest.json").write_text(manifest.to_json())
    return manifest


def load_split(manifest: DatasetManifest, root, split: str, domains=None):
    """Phantom stack, labels, and sinogram stack for one manifest split."""
    root = Path(root)
    images, labels, sinos = [], [], []
    for e in manifest.entries:
        if e.split != split:
            continue
        if domains is not None and e.domain_id not in domains:
            continue
        images.append(read_tensor(root / e.phantom_file))
        sinos.append(read_tensor(root / e.sinogram_file))
        labels.append(e.domain_id)
    return np.stack(images), np.array(labels, dtype=np.int64), np.stack(sinos)
