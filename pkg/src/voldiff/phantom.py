"""Synthetic volumetric phantoms and low-dose degradation.

Phantoms are built from a constant background, ellipsoidal organs that
override it, and small hot spherical lesions that multiply the local
intensity. A mild multiplicative texture field plus separable Gaussian
smoothing keeps the clean targets band-limited, roughly mimicking
scanner point-spread blur.

Dose reduction is modeled as Poisson thinning in a synthetic count
domain: voxel activity v becomes Poisson(v * counts_per_unit * f)
rescaled back by 1 / (counts_per_unit * f). This is mean-preserving and
scales variance by 1/f, the first-order physics of a reduced injected
dose, without a full tomographic forward model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DataError, ParameterError
from .seeding import numpy_generator
from .volume import Volume


@dataclass
class Ellipsoid:
    center: tuple[float, float, float]  # voxel coordinates
    radii: tuple[float, float, float]   # voxels
    intensity: float


@dataclass
class Lesion:
    center: tuple[float, float, float]
    radius: float
    contrast: float  # multiplies the underlying intensity; > 1 means hot


@dataclass
class PairedSample:
    """A normal-dose volume with its low-dose counterpart."""

    x0: Volume
    y: Volume
    dose_fraction: float

    def __post_init__(self) -> None:
        if self.x0.dims != self.y.dims or self.x0.spacing != self.y.spacing:
            raise ParameterError("paired volumes must share dims and spacing")
        if not (0 < self.dose_fraction <= 1):
            raise ParameterError(f"dose_fraction must be in (0, 1], got {self.dose_fraction}")


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    background_level: float = 1.0
    organs: list[Ellipsoid] = field(default_factory=list)
    lesions: list[Lesion] = field(default_factory=list)
    smoothing_mm: float = 1.0
    texture_amplitude: float = 0.05

    def validate(self) -> None:
        if len(self.dims) != 3 or any(int(d) < 1 for d in self.dims):
            raise ParameterError(f"dims must be 3 positive ints, got {self.dims}")
        if self.background_level < 0:
            raise ParameterError("background_level must be >= 0")
        if self.smoothing_mm < 0 or self.texture_amplitude < 0:
            raise ParameterError("smoothing and texture amplitude must be >= 0")
        for organ in self.organs:
            if organ.intensity < 0:
                raise ParameterError("organ intensity must be >= 0")
            if min(organ.radii) <= 0:
                raise ParameterError("organ radii must be positive")
            if not _inside(organ.center, organ.radii, self.dims):
                raise ParameterError(f"organ at {organ.center} extends outside dims {self.dims}")
        for lesion in self.lesions:
            if lesion.contrast < 0:
                raise ParameterError("lesion contrast must be >= 0")
            if lesion.radius <= 0:
                raise ParameterError("lesion radius must be positive")
            r3 = (lesion.radius,) * 3
            if not _inside(lesion.center, r3, self.dims):
                raise ParameterError(f"lesion at {lesion.center} extends outside dims {self.dims}")


def _inside(center, radii, dims) -> bool:
    return all(0 <= c - r and c + r <= d for c, r, d in zip(center, radii, dims))


def _ellipsoid_mask(dims, center, radii) -> np.ndarray:
    grids = np.ogrid[: dims[0], : dims[1], : dims[2]]
    dist = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return dist <= 1.0


def generate_phantom(spec: PhantomSpec, seed: int) -> Volume:
    """Render a clean phantom volume, deterministic under (spec, seed)."""
    spec.validate()
    data = np.full(spec.dims, spec.background_level, dtype=np.float64)
    for organ in spec.organs:
        data[_ellipsoid_mask(spec.dims, organ.center, organ.radii)] = organ.intensity
    for lesion in spec.lesions:
        mask = _ellipsoid_mask(spec.dims, lesion.center, (lesion.radius,) * 3)
        data[mask] *= lesion.contrast

    if spec.texture_amplitude > 0:
        rng = numpy_generator(seed, "phantom-texture")
        noise = rng.standard_normal(spec.dims)
        noise = ndimage.gaussian_filter(noise, sigma=2.0, mode="reflect")
        peak = np.abs(noise).max()
        if peak > 0:
            data *= 1.0 + spec.texture_amplitude * noise / peak

    sigma_vox = [spec.smoothing_mm / s for s in spec.spacing]
    if any(s > 0 for s in sigma_vox):
        data = ndimage.gaussian_filter(data, sigma=sigma_vox, mode="reflect")
    np.clip(data, 0.0, None, out=data)
    return Volume(data.astype(np.float32), spec.spacing)


def sample_phantom_spec(
    dims: tuple[int, int, int],
    rng: np.random.Generator,
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
    background_level: float = 1.0,
    organ_count_range: tuple[int, int] = (2, 4),
    lesion_count_range: tuple[int, int] = (1, 3),
    organ_intensity_range: tuple[float, float] = (1.5, 3.0),
    lesion_contrast_range: tuple[float, float] = (1.5, 2.5),
    smoothing_mm: float = 1.0,
) -> PhantomSpec:
    """Draw a random anatomy layout for dataset generation."""
    dims = tuple(int(d) for d in dims)
    organs = []
    for _ in range(int(rng.integers(organ_count_range[0], organ_count_range[1] + 1))):
        radii = tuple(rng.uniform(0.12, 0.28) * d for d in dims)
        center = tuple(rng.uniform(r, d - r) for r, d in zip(radii, dims))
        organs.append(Ellipsoid(center, radii, float(rng.uniform(*organ_intensity_range))))
    lesions = []
    for _ in range(int(rng.integers(lesion_count_range[0], lesion_count_range[1] + 1))):
        radius = float(rng.uniform(0.04, 0.09) * min(dims))
        center = tuple(rng.uniform(radius, d - radius) for d in dims)
        lesions.append(Lesion(center, radius, float(rng.uniform(*lesion_contrast_range))))
    return PhantomSpec(
        dims=dims,
        spacing=spacing,
        background_level=background_level,
        organs=organs,
        lesions=lesions,
        smoothing_mm=smoothing_mm,
    )


def simulate_low_dose(
    v: Volume, dose_fraction: float, counts_per_unit: float, seed: int
) -> Volume:
    """Poisson-thin a clean volume down to the requested dose fraction.

    Unbiased in the mean; per-voxel variance is v / (counts_per_unit *
    dose_fraction).
    """
    if not (0 < dose_fraction <= 1):
        raise ParameterError(f"dose_fraction must be in (0, 1], got {dose_fraction}")
    if not counts_per_unit > 0:
        raise ParameterError(f"counts_per_unit must be > 0, got {counts_per_unit}")
    if np.any(v.data < 0):
        raise DataError("low-dose simulation requires nonnegative activity values")
    scale = counts_per_unit * dose_fraction
    rng = numpy_generator(seed, "low-dose")
    counts = rng.poisson(v.data.astype(np.float64) * scale)
    return Volume((counts / scale).astype(np.float32), v.spacing, v.units, v.norm_constant)
