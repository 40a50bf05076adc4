"""Peak template, g2(0) fits, efficiency chain, saturation, lifetime, Q and cavity metrics."""

import math

import numpy as np
import pytest
from scipy import integrate, stats

import correlation_analysis as ca
from detection_chain import (
    ChannelEfficiencies, CorrelationHistogram, DetectorSpec, build_histogram, combined_irf_sigma, detect,
)
from source_model import (
    BackgroundParams, EmitterParams, ExcitationConfig, SourceKind, background_for_g2,
    excitation_probability, generate_stream, pulse_photon_statistics,
)
from toolkit_errors import DomainError, FitError, ModelDomainError

T = 13.0
WINDOW = 8 * T


@pytest.fixture
def template():
    return ca.PeakTemplateParams(tau_decay=4.4, sigma_irf=0.2, rep_period=T)


def model_histogram(params, area_central, area_side, bin_width=0.25, window=WINDOW):
    empty = CorrelationHistogram(bin_width, window, np.zeros(int(round(2 * window / bin_width))))
    counts = ca.design_matrix(empty, params) @ np.array([area_central, area_side])
    return CorrelationHistogram(bin_width, window, counts)


def numerical_template(t, tau, sigma):
    def integrand(s):
        return math.exp(-abs(s) / tau) / (2 * tau) * stats.norm.pdf(t - s, scale=sigma)

    lo, hi = t - 12 * sigma, t + 12 * sigma
    points = [0.0] if lo < 0 < hi else None
    value, _ = integrate.quad(integrand, lo, hi, points=points, epsabs=0, epsrel=1e-12, limit=400)
    return value


# ---------------------------------------------------------------------------
# Template and model
# ---------------------------------------------------------------------------

@pytest.mark.parametrize('sigma', [0.0, 0.142, 0.5])
@pytest.mark.parametrize('tau', [0.5, 4.4, 25.4])
def test_template_matches_numerical_convolution(tau, sigma):
    params = ca.PeakTemplateParams(tau, sigma, T)
    for t in np.linspace(-3 * tau, 3 * tau, 13):
        if sigma == 0:
            expected = math.exp(-abs(t) / tau) / (2 * tau)
        else:
            expected = numerical_template(t, tau, sigma)
        assert ca.peak_template(t, params) == pytest.approx(expected, rel=1e-6)


def test_template_without_jitter_is_two_sided_exponential():
    params = ca.PeakTemplateParams(4.4, 0.0, T)
    t = np.array([-5.0, 0.0, 2.2])
    np.testing.assert_allclose(ca.peak_template(t, params), np.exp(-np.abs(t) / 4.4) / 8.8)


def test_template_has_unit_area_and_is_symmetric(template):
    area, _ = integrate.quad(lambda t: ca.peak_template(t, template), -200, 200, points=[0.0], limit=400)
    assert area == pytest.approx(1.0, rel=1e-8)
    t = np.linspace(0, 30, 61)
    np.testing.assert_allclose(ca.peak_template(t, template), ca.peak_template(-t, template), rtol=1e-12)


def test_template_stays_finite_far_in_the_tails():
    params = ca.PeakTemplateParams(0.3, 1.0, T)
    values = ca.peak_template(np.array([-400.0, -60.0, 60.0, 400.0]), params)
    assert np.all(np.isfinite(values)) and np.all(values >= 0)


def test_side_peak_truncation_is_negligible(template):
    t = np.linspace(-WINDOW, WINDOW, 401)
    brute = sum(ca.peak_template(t - k * T, template) for k in range(-200, 201) if k != 0)
    model = ca.correlation_model(t, 0.0, 1.0, template)
    np.testing.assert_allclose(model, brute, rtol=1e-6)


def test_side_peak_count_rules(template):
    assert ca.side_peak_count(WINDOW, template) >= math.ceil(WINDOW / T) + 2
    slow = ca.PeakTemplateParams(25.4, 0.2, T)
    assert ca.side_peak_count(WINDOW, slow) > ca.side_peak_count(WINDOW, template)


def test_template_params_invariants():
    with pytest.raises(ValueError):
        ca.PeakTemplateParams(0.0, 0.2, T)
    with pytest.raises(ValueError):
        ca.PeakTemplateParams(4.4, -0.1, T)


# ---------------------------------------------------------------------------
# Peak-area fits
# ---------------------------------------------------------------------------

def test_noiseless_histogram_is_recovered_exactly(template):
    hist = model_histogram(template, 1400.0, 10_000.0)
    fit = ca.fit_peak_areas(hist, template)
    assert fit.area_central == pytest.approx(1400.0, rel=1e-9)
    assert fit.area_side == pytest.approx(10_000.0, rel=1e-9)
    assert fit.g2_zero == pytest.approx(0.14, rel=1e-9)
    assert not fit.clamped


def test_residuals_are_orthogonal_to_basis(template):
    rng = np.random.default_rng(51)
    noisy = model_histogram(template, 1400.0, 10_000.0)
    noisy.counts = rng.poisson(noisy.counts).astype(float)
    fit = ca.fit_peak_areas(noisy, template)
    X = ca.design_matrix(noisy, template, fit.n_side_peaks)
    w = 1.0 / np.maximum(noisy.counts, 1.0)
    r = noisy.counts - X @ np.array([fit.area_central, fit.area_side])
    for j in range(2):
        assert abs(X[:, j] @ (w * r)) < 1e-8 * np.linalg.norm(X[:, j]) * np.linalg.norm(w * r)


def test_fit_is_scale_equivariant(template):
    rng = np.random.default_rng(52)
    hist = model_histogram(template, 1400.0, 10_000.0)
    hist.counts = rng.poisson(hist.counts).astype(float)
    assert hist.counts.min() >= 1
    scaled = CorrelationHistogram(hist.bin_width, hist.window, 3.0 * hist.counts)
    a, b = ca.fit_peak_areas(hist, template), ca.fit_peak_areas(scaled, template)
    assert b.area_central == pytest.approx(3.0 * a.area_central, rel=1e-9)
    assert b.area_side == pytest.approx(3.0 * a.area_side, rel=1e-9)
    assert b.g2_zero == pytest.approx(a.g2_zero, rel=1e-9)


def test_negative_central_area_is_clamped(template):
    hist = model_histogram(template, 0.0, 10_000.0)
    hist.counts[np.abs(hist.centers) < 3.0] = 0.0
    fit = ca.fit_peak_areas(hist, template)
    assert fit.clamped
    assert fit.unclamped_area_central < 0
    assert fit.area_central == 0.0 and fit.g2_zero == 0.0


def test_empty_histogram_is_a_fit_error(template):
    hist = CorrelationHistogram(0.25, WINDOW, np.zeros(832))
    with pytest.raises(FitError):
        ca.fit_peak_areas(hist, template)


def test_poisson_likelihood_agrees_with_weighted_least_squares(template):
    rng = np.random.default_rng(53)
    hist = model_histogram(template, 1400.0, 10_000.0)
    hist.counts = rng.poisson(hist.counts).astype(float)
    wls = ca.fit_peak_areas(hist, template)
    mle = ca.fit_peak_areas(hist, template, likelihood='poisson')
    assert mle.likelihood == 'poisson'
    assert abs(mle.g2_zero - 0.14) < 4 * mle.g2_zero_err
    assert abs(mle.g2_zero - wls.g2_zero) < 2 * wls.g2_zero_err


def test_individual_peak_areas(template):
    hist = model_histogram(template, 1400.0, 10_000.0)
    areas = ca.fit_individual_peak_areas(hist, template)
    assert set(areas) == set(range(-8, 9))
    assert areas[0][0] == pytest.approx(1400.0, rel=1e-4)
    for k in (-7, -3, 1, 5, 7):
        assert areas[k][0] == pytest.approx(10_000.0, rel=1e-4)


def test_peak_decay_fit_recovers_lifetime():
    truth = ca.PeakTemplateParams(25.4, 0.2, T)
    hist = model_histogram(truth, 2000.0, 10_000.0)
    start = ca.PeakTemplateParams(15.0, 0.2, T)
    fit = ca.fit_peak_decay(hist, start)
    assert fit.tau_decay == pytest.approx(25.4, rel=1e-4)


# ---------------------------------------------------------------------------
# Simulated round trips
# ---------------------------------------------------------------------------

def test_coherent_light_gives_unit_g2(emitter, no_background):
    excitation = ExcitationConfig(n_pulses=400_000, rng_seed=61, source=SourceKind.COHERENT,
                                  coherent_mean=0.5)
    stream = generate_stream(emitter, excitation, no_background)
    eff = ChannelEfficiencies(beta=1.0, eta_extract=0.6, lens=1.0, detector=1.0)
    spec = DetectorSpec()
    records = detect(stream, eff, spec, np.random.default_rng(62))
    hist = build_histogram(records, 0.25, WINDOW, total_pulses=excitation.n_pulses)
    params = ca.PeakTemplateParams(4.4, combined_irf_sigma(spec), T)
    fit = ca.fit_peak_areas(hist, params)
    assert fit.g2_zero == pytest.approx(1.0, abs=0.05)


def test_antibunching_round_trip(emitter):
    power, p_sat = 15.0, 3.0
    p_exc = excitation_probability(power, p_sat)
    mu = background_for_g2(0.14, p_exc)
    background = BackgroundParams(amplitude=mu / 25.0, power_exponent=2.0, tau_bg=4.4)
    excitation = ExcitationConfig(pump_power=power, p_sat_power=p_sat, n_pulses=200_000, rng_seed=71)
    stream = generate_stream(emitter, excitation, background)
    truth = pulse_photon_statistics(stream)
    assert truth['g2_pair'] == pytest.approx(0.14, abs=0.01)

    eff = ChannelEfficiencies(beta=1.0, eta_extract=0.3, lens=1.0, detector=1.0)
    spec = DetectorSpec()
    records = detect(stream, eff, spec, np.random.default_rng(72))
    hist = build_histogram(records, 0.25, WINDOW, total_pulses=excitation.n_pulses)
    fit = ca.fit_peak_areas(hist, ca.PeakTemplateParams(4.4, combined_irf_sigma(spec), T))
    assert fit.g2_zero == pytest.approx(0.14, abs=0.03)

    rate = len(records) / (stream.duration * 1e-9)
    n_mean = ca.mean_photon_number(rate, 1e9 / T, eff.detection_efficiency(emitter.polarized_fraction))
    eta = ca.single_photon_efficiency(n_mean, fit.g2_zero)
    assert eta == pytest.approx(p_exc * 0.3, rel=0.05)
    assert truth['p_multi'] <= ca.multiphoton_bound(truth['n_mean'], truth['g2_pair']) + 1e-12


def test_g2_error_shrinks_with_the_square_root_of_pulses(emitter):
    power, p_sat = 15.0, 3.0
    mu = background_for_g2(0.14, excitation_probability(power, p_sat))
    background = BackgroundParams(amplitude=mu / 25.0, power_exponent=2.0, tau_bg=4.4)
    eff = ChannelEfficiencies(beta=1.0, eta_extract=0.3, lens=1.0, detector=1.0)
    spec = DetectorSpec()
    params = ca.PeakTemplateParams(4.4, combined_irf_sigma(spec), T)

    errors = []
    for i, n_pulses in enumerate((10_000, 100_000, 1_000_000)):
        excitation = ExcitationConfig(pump_power=power, p_sat_power=p_sat, n_pulses=n_pulses,
                                      rng_seed=170 + i)
        stream = generate_stream(emitter, excitation, background)
        records = detect(stream, eff, spec, np.random.default_rng(180 + i))
        hist = build_histogram(records, 0.25, WINDOW, total_pulses=n_pulses)
        fit = ca.fit_peak_areas(hist, params, likelihood='poisson')
        assert abs(fit.g2_zero - 0.14) < 5 * fit.g2_zero_err
        errors.append(fit.g2_zero_err)

    for coarse, fine in zip(errors, errors[1:]):
        assert coarse / fine == pytest.approx(math.sqrt(10), rel=0.35)


# ---------------------------------------------------------------------------
# Photon-number statistics and efficiency
# ---------------------------------------------------------------------------

def test_efficiency_identity():
    assert ca.single_photon_efficiency(0.406, 0.14) == pytest.approx(0.37651, abs=1e-5)
    assert ca.single_photon_efficiency(0.406, 0.0) == 0.406
    with pytest.raises(ModelDomainError):
        ca.single_photon_efficiency(0.406, 1.2)


def test_multiphoton_bound_and_suppression():
    assert ca.multiphoton_bound(0.406, 0.14) == pytest.approx(0.5 * 0.406 ** 2 * 0.14)
    assert ca.multiphoton_suppression(0.14) == pytest.approx(7.142857, rel=1e-6)
    assert ca.multiphoton_suppression(0.0) == math.inf


def test_mean_photon_number():
    assert ca.mean_photon_number(1e6, 76e6, 0.0302) == pytest.approx(1e6 / (76e6 * 0.0302))
    with pytest.raises(DomainError):
        ca.mean_photon_number(1e6, 76e6, 0.0)


def test_efficiency_point_propagates_errors():
    point = ca.efficiency_point(3.0, 0.406, 0.14, n_mean_err=0.004, g2_zero_err=0.01)
    assert point.eta == pytest.approx(0.406 * math.sqrt(0.86))
    expected = math.hypot(math.sqrt(0.86) * 0.004, 0.406 / (2 * math.sqrt(0.86)) * 0.01)
    assert point.eta_err == pytest.approx(expected)


def test_efficiency_after_lens():
    assert ca.efficiency_after_lens(0.376, 0.22) == pytest.approx(0.08272)


# ---------------------------------------------------------------------------
# Saturation fit
# ---------------------------------------------------------------------------

SATURATION_SCALE = [0.2, 0.4, 0.7, 1.0, 1.5, 3.0, 5.0, 8.0, 12.0, 20.0]


def saturation_points(eta_max, p_sat, noise=0.0, rng=None):
    points = []
    for s in SATURATION_SCALE:
        power = s * p_sat
        eta = eta_max * -math.expm1(-power / p_sat)
        err = noise * eta
        if noise:
            eta = eta + rng.normal(0.0, err)
        points.append(ca.EfficiencyPoint(power, 0.0, 0.0, eta, eta_err=err))
    return points


def test_noiseless_saturation_is_recovered():
    fit = ca.fit_saturation(saturation_points(0.376, 3.0))
    assert fit.eta_max == pytest.approx(0.376, rel=1e-8)
    assert fit.p_sat == pytest.approx(3.0, rel=1e-8)
    assert fit.identifiable


def test_saturation_fit_monte_carlo():
    rng = np.random.default_rng(81)
    successes = 0
    for _ in range(100):
        fit = ca.fit_saturation(saturation_points(0.376, 3.0, noise=0.02, rng=rng))
        if abs(fit.eta_max - 0.376) <= 0.01 and abs(fit.p_sat / 3.0 - 1) <= 0.05:
            successes += 1
    assert successes >= 95


def test_saturation_needs_three_distinct_powers():
    points = saturation_points(0.376, 3.0)[:2]
    with pytest.raises(DomainError):
        ca.fit_saturation(points)
    with pytest.raises(DomainError):
        ca.fit_saturation([points[0]] * 5)


def test_flat_efficiency_flags_unidentifiable_saturation_power():
    points = [ca.EfficiencyPoint(p, 0.0, 0.0, 0.3) for p in (5.0, 10.0, 20.0, 40.0)]
    fit = ca.fit_saturation(points)
    assert not fit.identifiable
    assert fit.p_sat_err == math.inf
    assert fit.eta_max == pytest.approx(0.3, rel=1e-3)


def test_saturation_model_and_expected_efficiency():
    assert ca.saturation_model(0.0, 0.376, 3.0) == 0.0
    assert ca.saturation_model(3.0, 0.376, 3.0) == pytest.approx(0.376 * (1 - math.exp(-1)))
    values = ca.saturation_model([1.0, 10.0, 100.0], 0.376, 3.0)
    assert np.all(np.diff(values) > 0)
    assert values[-1] == pytest.approx(0.376, rel=1e-12)
    assert ca.expected_total_efficiency(0.8268, 0.36554) == pytest.approx(0.3022, abs=1e-4)


def test_saturation_jacobian_matches_finite_differences():
    power = np.array([0.3, 1.0, 3.0, 9.0, 21.0])
    params = np.array([0.376, 3.0])
    jac = ca.saturation_jacobian(power, *params)
    for j in range(2):
        step = np.zeros(2)
        step[j] = 1e-6 * params[j]
        numeric = (ca.saturation_model(power, *(params + step))
                   - ca.saturation_model(power, *(params - step))) / (2 * step[j])
        np.testing.assert_allclose(jac[:, j], numeric, rtol=1e-6, atol=1e-10)


# ---------------------------------------------------------------------------
# Lifetime
# ---------------------------------------------------------------------------

def test_lifetime_from_binned_arrivals():
    rng = np.random.default_rng(91)
    times = rng.exponential(4.4, 100_000)
    hist = ca.arrival_histogram(times, 0.05, 50.0)
    fit = ca.fit_lifetime(hist, tail_start=0.0)
    assert fit.tail_start == 0.0
    assert fit.n_counts == int(hist.counts.sum())
    assert abs(fit.tau - 4.4) < 4 * 4.4 / math.sqrt(fit.n_counts)
    assert fit.tau_err == pytest.approx(fit.tau / math.sqrt(fit.n_counts), rel=0.05)


def test_lifetime_is_shift_invariant():
    rng = np.random.default_rng(92)
    hist = ca.arrival_histogram(rng.exponential(4.4, 50_000), 0.1, 40.0)
    shifted = ca.ArrivalHistogram(hist.edges + 10.0, hist.counts)
    assert ca.fit_lifetime(shifted).tau == pytest.approx(ca.fit_lifetime(hist).tau, rel=1e-9)


def test_lifetime_score_is_the_likelihood_gradient():
    rng = np.random.default_rng(93)
    hist = ca.arrival_histogram(rng.exponential(4.4, 20_000), 0.1, 40.0)
    a, b = hist.edges[:-1] - hist.edges[0], hist.edges[1:] - hist.edges[0]
    counts = hist.counts.astype(float)
    for tau in (2.0, 4.4, 9.0):
        h = 1e-5 * tau
        numeric = (ca.lifetime_log_likelihood(tau + h, a, b, counts)
                   - ca.lifetime_log_likelihood(tau - h, a, b, counts)) / (2 * h)
        assert ca.lifetime_score(tau, a, b, counts) == pytest.approx(numeric, rel=1e-5)


def test_lifetime_of_exact_exponential_histogram():
    edges = np.arange(0, 1001) * 0.05
    counts = 1e6 * (np.exp(-edges[:-1] / 4.4) - np.exp(-edges[1:] / 4.4))
    fit = ca.fit_lifetime(ca.ArrivalHistogram(edges, counts), tail_start=0.0)
    assert fit.tau == pytest.approx(4.4, abs=1e-6)


def test_lifetime_of_simulated_off_resonance_emission(no_background):
    emitter = EmitterParams(tau_on=25.4, tau_off=25.4, polarized_fraction=0.331)
    excitation = ExcitationConfig(pump_power=30.0, p_sat_power=3.0, n_pulses=100_000, rng_seed=95)
    stream = generate_stream(emitter, excitation, no_background)
    assert len(stream) > 99_000
    fit = ca.fit_lifetime(ca.arrival_histogram(stream.time_offset, 0.1, 400.0), tail_start=0.0)
    assert fit.tau == pytest.approx(25.4, abs=0.3)


def test_rising_histogram_has_no_lifetime():
    edges = np.arange(0.0, 10.01, 0.5)
    hist = ca.ArrivalHistogram(edges, np.arange(1, 21) * 100)
    with pytest.raises(FitError):
        ca.fit_lifetime(hist, tail_start=0.0)


def test_lifetime_from_samples():
    rng = np.random.default_rng(94)
    fit = ca.fit_lifetime_samples(rng.exponential(25.4, 50_000) + 1.0, tail_start=1.0)
    assert abs(fit.tau - 25.4) < 4 * fit.tau_err


# ---------------------------------------------------------------------------
# Lorentzian Q
# ---------------------------------------------------------------------------

def lorentzian_spectrum(q, center=855.0, noise=0.0, rng=None):
    wl = np.linspace(center - 6, center + 6, 1201)
    y = ca.lorentzian_model(wl, 1.0, center, center / q, 0.05)
    if noise:
        y = y + rng.normal(0.0, noise, len(wl))
    return [ca.SpectrumSample(w, i) for w, i in zip(wl, y)]


@pytest.mark.parametrize('q', [628.0, 1718.0])
def test_noiseless_lorentzian_is_recovered(q):
    fit = ca.fit_lorentzian(lorentzian_spectrum(q))
    assert fit.q == pytest.approx(q, rel=1e-6)
    assert fit.center_nm == pytest.approx(855.0, rel=1e-9)


@pytest.mark.parametrize('q, seed', [(628.0, 101), (1718.0, 102)])
def test_noisy_lorentzian_q(q, seed):
    fit = ca.fit_lorentzian(lorentzian_spectrum(q, noise=0.03, rng=np.random.default_rng(seed)))
    assert fit.q == pytest.approx(q, rel=0.03)
    assert fit.q_err > 0


def test_lorentzian_jacobian_matches_finite_differences():
    wl = np.linspace(850.0, 860.0, 41)
    params = np.array([1.0, 855.0, 855.0 / 628.0, 0.05])
    jac = ca.lorentzian_jacobian(wl, *params)
    for j in range(4):
        step = np.zeros(4)
        step[j] = 1e-6
        numeric = (ca.lorentzian_model(wl, *(params + step))
                   - ca.lorentzian_model(wl, *(params - step))) / 2e-6
        np.testing.assert_allclose(jac[:, j], numeric, rtol=1e-6, atol=1e-8)


def test_flat_spectrum_is_a_fit_error():
    flat = [ca.SpectrumSample(850.0 + 0.1 * i, 1.0) for i in range(50)]
    with pytest.raises(FitError):
        ca.fit_lorentzian(flat)


def test_lorentzian_needs_enough_samples():
    with pytest.raises(DomainError):
        ca.fit_lorentzian(lorentzian_spectrum(628.0)[:4])


# ---------------------------------------------------------------------------
# Cavity figures of merit
# ---------------------------------------------------------------------------

def test_cavity_metrics_for_measured_device():
    m = ca.cavity_metrics(25.4, 4.4, 628.0, 1718.0, 0.0, tau_off_err=1.4, tau_on_err=1.2,
                          q_post_err=69.0, q_planar_err=13.0, q_predicted=657.0)
    assert m.purcell == pytest.approx(25.4 / 4.4, abs=1e-6)
    assert m.beta == pytest.approx(1 - 4.4 / 25.4, abs=1e-6)
    assert m.eta_extract == pytest.approx(628.0 / 1718.0, abs=1e-6)
    assert m.eta_expected == pytest.approx((1 - 4.4 / 25.4) * 628.0 / 1718.0, abs=1e-6)
    assert m.purcell == pytest.approx(5.7727, abs=1e-4)
    assert m.beta == pytest.approx(0.8268, abs=1e-4)
    assert m.eta_extract == pytest.approx(0.36554, abs=1e-5)
    assert m.eta_expected == pytest.approx(0.3022, abs=1e-4)
    assert m.uncertainties['purcell'] == pytest.approx(1.6, abs=0.05)
    assert m.eta_extract_predicted == pytest.approx(657.0 / 1718.0)


def test_cavity_inputs_are_validated():
    with pytest.raises(DomainError):
        ca.purcell_factor(25.4, 0.0)
    with pytest.raises(DomainError):
        ca.coupling_beta(5.0, 1.5)
    with pytest.raises(DomainError):
        ca.extraction_efficiency(0.0, 1718.0)
