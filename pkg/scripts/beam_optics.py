"""
Gaussian-beam model of the light leaving the micropost.

- Fundamental-mode waist of a step-index cylinder (Marcuse-type formula)
- Paraxial far-field divergence and lens collection fraction
- Far field of a supplied near-field grid by 2-D FFT onto direction cosines

Lengths are in µm throughout this module.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from device_parameters import DEFAULTS
from toolkit_errors import DomainError, ParameterError

logger = logging.getLogger(__name__)

SINGLE_MODE_V_MIN = 0.8
PARAXIAL_LIMIT_RAD = 0.5


@dataclass(frozen=True)
class FlaggedValue:
    """A computed value plus accuracy warnings attached to it."""

    value: float
    warnings: tuple = ()

    @property
    def flagged(self):
        return bool(self.warnings)


@dataclass(frozen=True)
class GaussianBeam:
    waist_w0: float
    wavelength: float
    medium_index: float = DEFAULTS['medium_index']

    def __post_init__(self):
        if not self.waist_w0 > 0:
            raise ParameterError('waist_w0', 'must be > 0')
        if not self.wavelength > 0:
            raise ParameterError('wavelength', 'must be > 0')
        if not self.medium_index >= 1:
            raise ParameterError('medium_index', 'must be >= 1')


@dataclass
class FieldGrid:
    """Complex scalar near field, amplitudes[iy, ix] (row-major, ny rows of nx samples)."""

    nx: int
    ny: int
    dx: float
    dy: float
    amplitudes: np.ndarray

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ParameterError('nx/ny', f'grid must be at least 2x2, got {self.nx}x{self.ny}')
        if not (self.dx > 0 and self.dy > 0):
            raise ParameterError('dx/dy', 'sample spacing must be > 0')
        self.amplitudes = np.asarray(self.amplitudes, dtype=complex)
        if self.amplitudes.shape != (self.ny, self.nx):
            raise ParameterError('amplitudes', f'shape {self.amplitudes.shape} != ({self.ny}, {self.nx})')
        power = self.power
        if not (np.isfinite(power) and power > 0):
            raise ParameterError('amplitudes', 'total power must be finite and > 0')

    @property
    def power(self):
        return float(np.sum(np.abs(self.amplitudes) ** 2) * self.dx * self.dy)

    def coordinates(self):
        """Sample coordinates (x, y) centered on the grid."""
        x = (np.arange(self.nx) - (self.nx - 1) / 2) * self.dx
        y = (np.arange(self.ny) - (self.ny - 1) / 2) * self.dy
        return x, y


@dataclass
class FarFieldPattern:
    ux: np.ndarray                  # kx/k
    uy: np.ndarray                  # ky/k
    intensity: np.ndarray           # power per unit (ux, uy); zero outside the propagating disk
    wavelength: float
    near_field_power: float
    propagating_power: float
    evanescent_power: float
    spectrum: np.ndarray = field(default=None, repr=False)

    @property
    def spectral_power(self):
        return self.propagating_power + self.evanescent_power


# ---------------------------------------------------------------------------
# Gaussian-beam estimates
# ---------------------------------------------------------------------------

def v_number(core_radius, n_core, n_clad, wavelength):
    return 2 * math.pi / wavelength * core_radius * math.sqrt(n_core ** 2 - n_clad ** 2)


def mode_waist_estimate(core_radius, n_core, n_clad, wavelength):
    """
    Gaussian waist w0 (1/e^2 field radius) of the fundamental guided mode.

    w0 = a (0.65 + 1.619 V^-3/2 + 2.879 V^-6). The result is flagged when V
    falls below the validity range of the approximation.
    """
    if core_radius <= 0:
        raise DomainError(f"core radius must be > 0, got {core_radius}")
    if not n_core > n_clad >= 1:
        raise DomainError(f"need n_core > n_clad >= 1, got {n_core}, {n_clad}")
    if wavelength <= 0:
        raise DomainError(f"wavelength must be > 0, got {wavelength}")
    v = v_number(core_radius, n_core, n_clad, wavelength)
    w0 = core_radius * (0.65 + 1.619 * v ** -1.5 + 2.879 * v ** -6)
    warnings = ()
    if v < SINGLE_MODE_V_MIN:
        warnings = (f"V = {v:.3f} below {SINGLE_MODE_V_MIN}: Gaussian mode approximation unreliable",)
        logger.warning(warnings[0])
    return FlaggedValue(w0, warnings)


def beam_divergence(beam):
    """Paraxial 1/e^2 far-field half-angle lambda/(pi w0 n) in the exit medium."""
    theta = beam.wavelength / (math.pi * beam.waist_w0 * beam.medium_index)
    warnings = ()
    if theta > PARAXIAL_LIMIT_RAD:
        warnings = (f"divergence {theta:.3f} rad exceeds the paraxial range",)
        logger.warning(warnings[0])
    return FlaggedValue(theta, warnings)


def _check_angle(name, angle):
    if not 0 < angle < math.pi / 2:
        raise DomainError(f"{name} must lie in (0, pi/2), got {angle}")


def lens_collection_fraction(divergence_theta, lens_half_angle):
    """Gaussian far-field power inside the lens cone, 1 - exp(-2 theta_L^2 / theta^2)."""
    _check_angle('divergence', divergence_theta)
    _check_angle('lens half-angle', lens_half_angle)
    fraction = -math.expm1(-2 * lens_half_angle ** 2 / divergence_theta ** 2)
    warnings = ()
    if divergence_theta > PARAXIAL_LIMIT_RAD:
        warnings = (f"divergence {divergence_theta:.3f} rad is non-paraxial; "
                    "collection fraction is approximate",)
    return FlaggedValue(fraction, warnings)


def calibrate_lens_half_angle(divergence_theta, target_fraction):
    """Lens half-angle whose paraxial collection fraction equals target_fraction."""
    _check_angle('divergence', divergence_theta)
    if not 0 < target_fraction < 1:
        raise DomainError(f"target fraction must lie in (0, 1), got {target_fraction}")
    theta_lens = divergence_theta * math.sqrt(-math.log1p(-target_fraction) / 2)
    warnings = ()
    if divergence_theta > PARAXIAL_LIMIT_RAD:
        warnings = (f"divergence {divergence_theta:.3f} rad is non-paraxial; "
                    "implied aperture is approximate",)
    if theta_lens >= math.pi / 2:
        raise DomainError("target fraction needs a lens half-angle beyond pi/2")
    return FlaggedValue(theta_lens, warnings)


def numerical_aperture(half_angle, medium_index=1.0):
    return medium_index * math.sin(half_angle)


# ---------------------------------------------------------------------------
# Far field
# ---------------------------------------------------------------------------

def angular_spectrum(grid, zero_pad=DEFAULTS['zero_pad_factor']):
    """
    Zero-padded, centered continuous-normalized 2-D Fourier transform of a grid.

    Returns (fx, fy, spectrum) with spatial frequencies in 1/µm; the spectrum
    is scaled by dx*dy so that sum|S|^2 dfx dfy equals the near-field power.
    """
    if int(zero_pad) < 1:
        raise DomainError(f"zero-padding factor must be >= 1, got {zero_pad}")
    nx_pad, ny_pad = int(zero_pad) * grid.nx, int(zero_pad) * grid.ny
    padded = np.zeros((ny_pad, nx_pad), dtype=complex)
    y0, x0 = (ny_pad - grid.ny) // 2, (nx_pad - grid.nx) // 2
    padded[y0:y0 + grid.ny, x0:x0 + grid.nx] = grid.amplitudes
    spectrum = np.fft.fftshift(np.fft.fft2(padded)) * grid.dx * grid.dy
    fx = np.fft.fftshift(np.fft.fftfreq(nx_pad, grid.dx))
    fy = np.fft.fftshift(np.fft.fftfreq(ny_pad, grid.dy))
    return fx, fy, spectrum


def far_field_transform(grid, wavelength, zero_pad=DEFAULTS['zero_pad_factor']):
    """
    Far-field intensity of a near-field grid on direction cosines (kx/k, ky/k).

    The sampling must satisfy dx, dy < wavelength/2 so that the whole
    propagating disk ux^2 + uy^2 <= 1 lies inside the computed spectrum.
    Evanescent components are excluded from the pattern and their power is
    reported separately.
    """
    if wavelength <= 0:
        raise DomainError(f"wavelength must be > 0, got {wavelength}")
    if grid.dx >= wavelength / 2 or grid.dy >= wavelength / 2:
        raise DomainError(
            f"grid undersampled: dx={grid.dx}, dy={grid.dy} µm must be < lambda/2 = {wavelength / 2} µm")
    fx, fy, spectrum = angular_spectrum(grid, zero_pad)
    dfx, dfy = fx[1] - fx[0], fy[1] - fy[0]
    ux, uy = wavelength * fx, wavelength * fy

    power_density = np.abs(spectrum) ** 2
    propagating = (ux[None, :] ** 2 + uy[:, None] ** 2) <= 1.0
    total = float(power_density.sum() * dfx * dfy)
    kept = float(power_density[propagating].sum() * dfx * dfy)
    intensity = np.where(propagating, power_density / wavelength ** 2, 0.0)
    logger.debug("far field: near %.6g, propagating %.6g, evanescent %.6g",
                 grid.power, kept, total - kept)
    return FarFieldPattern(ux=ux, uy=uy, intensity=intensity, wavelength=wavelength,
                           near_field_power=grid.power, propagating_power=kept,
                           evanescent_power=total - kept, spectrum=spectrum)


def far_field_divergence(pattern):
    """1/e^2 half-angle (rad) from the second moment of the intensity along ux."""
    weights = pattern.intensity.sum(axis=0)
    second = float(np.sum(weights * pattern.ux ** 2) / np.sum(weights))
    return math.asin(min(1.0, 2 * math.sqrt(second)))


def first_intensity_minimum(pattern):
    """Direction cosine of the first local minimum along +ux through the pattern center."""
    row = pattern.intensity[int(np.argmin(np.abs(pattern.uy)))]
    center = int(np.argmin(np.abs(pattern.ux)))
    profile = row[center:]
    for i in range(1, len(profile) - 1):
        if profile[i] < profile[i - 1] and profile[i] <= profile[i + 1]:
            return float(pattern.ux[center + i])
    raise DomainError("no intensity minimum inside the propagating region")


def gaussian_field_grid(nx, ny, dx, dy, waist):
    """Centered Gaussian near field exp(-r^2/w0^2)."""
    grid = FieldGrid(nx, ny, dx, dy, np.ones((ny, nx), dtype=complex))
    x, y = grid.coordinates()
    grid.amplitudes = np.exp(-(x[None, :] ** 2 + y[:, None] ** 2) / waist ** 2).astype(complex)
    return grid


def circular_aperture_grid(nx, ny, dx, dy, diameter):
    """Uniformly illuminated disk of the given diameter."""
    x = (np.arange(nx) - (nx - 1) / 2) * dx
    y = (np.arange(ny) - (ny - 1) / 2) * dy
    inside = (x[None, :] ** 2 + y[:, None] ** 2) <= (diameter / 2) ** 2
    return FieldGrid(nx, ny, dx, dy, inside.astype(complex))


def optics_summary(core_radius, n_core, n_clad, wavelength, medium_index=1.0,
                   lens_half_angle=None, calibrate_target=None):
    """Waist, divergence and (optionally) collection fraction or calibrated lens angle."""
    waist = mode_waist_estimate(core_radius, n_core, n_clad, wavelength)
    divergence = beam_divergence(GaussianBeam(waist.value, wavelength, medium_index))
    summary = {
        'v_number': v_number(core_radius, n_core, n_clad, wavelength),
        'waist_um': waist.value,
        'divergence_rad': divergence.value,
        'warnings': list(waist.warnings + divergence.warnings),
    }
    theta = min(divergence.value, math.pi / 2 * (1 - 1e-12))
    if lens_half_angle is not None:
        collection = lens_collection_fraction(theta, lens_half_angle)
        summary['lens_half_angle_rad'] = lens_half_angle
        summary['numerical_aperture'] = numerical_aperture(lens_half_angle)
        summary['collection_fraction'] = collection.value
        summary['warnings'] += list(collection.warnings)
    if calibrate_target is not None:
        implied = calibrate_lens_half_angle(theta, calibrate_target)
        summary['calibration_target'] = calibrate_target
        summary['implied_lens_half_angle_rad'] = implied.value
        summary['implied_numerical_aperture'] = numerical_aperture(implied.value)
        summary['warnings'] += list(implied.warnings)
    summary['warnings'] = sorted(set(summary['warnings']))
    return summary
