"""
Centralized device parameters for the micropost single-photon source.
Holds the measured values quoted for the device, their 1σ uncertainties,
and the documented defaults used where no measurement exists.
"""

# Measured values (value, 1σ uncertainty)
MEASURED = {
    'tau_on_ns': (4.4, 1.2),            # streak camera, on-resonance dot
    'tau_off_ns': (25.4, 1.4),          # HBT peak widths, off-resonance dots
    'q_post': (628.0, 69.0),            # Lorentzian fit, filtered luminescence
    'q_planar': (1718.0, 13.0),         # unetched planar cavity
    'q_predicted': (657.0, 0.0),        # FDTD prediction for the post
    'polarized_fraction': (0.331, 0.018),
    'detection_efficiency': (0.0302, 0.0016),  # after the lens, polarizers included
    'lens_fraction': (0.22, 0.0),
    'irf_fwhm_ps': (473.0, 29.0),       # laser-scatter correlation peak width
    'eta_max': (0.376, 0.011),
    'wavelength_nm': (855.0, 0.0),
    'post_top_diameter_um': (0.6, 0.0),
}

# Documented defaults for quantities that were never reported
DEFAULTS = {
    'rep_period_ns': 13.0,
    'p_sat_uw': 3.0,
    'background_amplitude': 0.02,
    'background_power_exponent': 2.0,
    'gamma_c_ratio': 0.0,
    'dead_time_ns': 0.0,
    'dark_count_rate_hz': 0.0,
    'bin_width_ns': 0.25,
    'window_periods': 8,
    'n_core': 3.5,                      # GaAs near 855 nm
    'n_clad': 1.0,                      # air-clad post
    'medium_index': 1.0,
    'zero_pad_factor': 4,
}

# Gaussian FWHM -> sigma
FWHM_TO_SIGMA = 1.0 / 2.354820045

# Per-detector jitter: combined two-detector response split evenly
JITTER_SIGMA_PS = MEASURED['irf_fwhm_ps'][0] * FWHM_TO_SIGMA / 2 ** 0.5

# Pump powers (in units of P_sat) used by the default efficiency-vs-power series
POWER_SERIES_SCALE = [0.1, 0.2, 0.35, 0.5, 0.75, 1.0, 1.5, 2.5, 4.0, 7.0]

# Labels used in reports and figures
QUANTITY_LABELS = {
    'purcell': 'Purcell factor F_p',
    'beta': 'Spontaneous-emission coupling β',
    'eta_extract': 'Extraction efficiency η_extract',
    'eta_expected': 'Expected efficiency β·η_extract',
    'eta_max': 'Saturated efficiency η_max',
    'p_sat': 'Saturation power P_sat (µW)',
    'g2_zero': 'g²(0) peak-area ratio',
}
