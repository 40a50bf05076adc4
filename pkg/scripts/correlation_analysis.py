"""
Inference chain from correlation histograms to device figures of merit.

- Peak template: two-sided exponential convolved with a Gaussian response
- g2(0) from a two-parameter (central area, common side area) linear fit
- Multi-photon bound, mean photon number and single-photon efficiency
- Saturation, lifetime and Lorentzian (cavity Q) fits
- Purcell factor, coupling coefficient and extraction efficiency
"""

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize, special

from toolkit_errors import DomainError, FitError, ModelDomainError, ParameterError

logger = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)

# Gauss-Legendre nodes for bin integration of the template
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)

# e^-16 keeps truncated tails below 1e-6 of the peak height even for overlapping peaks
TAIL_DECAY_LENGTHS = 16.0


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PeakTemplateParams:
    tau_decay: float
    sigma_irf: float
    rep_period: float

    def __post_init__(self):
        if not self.tau_decay > 0:
            raise ParameterError('tau_decay', 'must be > 0')
        if not self.sigma_irf >= 0:
            raise ParameterError('sigma_irf', 'must be >= 0')
        if not self.rep_period > 0:
            raise ParameterError('rep_period', 'must be > 0')


@dataclass
class PeakFit:
    area_central: float
    area_side: float
    g2_zero: float
    covariance: np.ndarray
    chi2_per_dof: float
    g2_zero_err: float = 0.0
    likelihood: str = 'wls'
    clamped: bool = False
    unclamped_area_central: float = 0.0
    n_side_peaks: int = 0

    @property
    def area_central_err(self):
        return math.sqrt(max(self.covariance[0, 0], 0.0))

    @property
    def area_side_err(self):
        return math.sqrt(max(self.covariance[1, 1], 0.0))

    def to_dict(self):
        d = asdict(self)
        d['covariance'] = self.covariance.tolist()
        d['area_central_err'] = self.area_central_err
        d['area_side_err'] = self.area_side_err
        return d


@dataclass
class PeakDecayFit:
    tau_decay: float
    tau_decay_err: float
    area_central: float
    area_side: float
    chi2_per_dof: float

    def to_dict(self):
        return asdict(self)


@dataclass
class EfficiencyPoint:
    pump_power: float
    n_mean: float
    g2_zero: float
    eta: float
    n_mean_err: float = 0.0
    g2_zero_err: float = 0.0
    eta_err: float = 0.0

    def to_dict(self):
        return asdict(self)


@dataclass
class SaturationFit:
    eta_max: float
    p_sat: float
    eta_max_err: float
    p_sat_err: float
    covariance: np.ndarray
    chi2_per_dof: float
    identifiable: bool = True

    def to_dict(self):
        d = asdict(self)
        d['covariance'] = self.covariance.tolist()
        return d


@dataclass
class LifetimeFit:
    tau: float
    tau_err: float
    n_counts: int
    tail_start: float

    def to_dict(self):
        return asdict(self)


@dataclass
class LorentzianFit:
    center_nm: float
    fwhm_nm: float
    q: float
    amplitude: float
    offset: float
    center_err: float
    fwhm_err: float
    q_err: float
    chi2_per_dof: float

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class SpectrumSample:
    wavelength: float
    intensity: float


@dataclass
class ArrivalHistogram:
    edges: np.ndarray
    counts: np.ndarray

    @property
    def centers(self):
        return 0.5 * (self.edges[:-1] + self.edges[1:])


@dataclass
class CavityMetrics:
    q_post: float
    q_planar: float
    purcell: float
    beta: float
    eta_extract: float
    eta_expected: float
    uncertainties: dict = field(default_factory=dict)
    eta_extract_predicted: float = None

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# Peak template and correlation model
# ---------------------------------------------------------------------------

def _one_sided(x, tau, sigma):
    """exp(s^2/2tau^2 - x/tau) * erfc((s/tau - x/s)/sqrt2), evaluated without overflow."""
    u = (sigma / tau - x / sigma) / SQRT2
    out = np.empty_like(x)
    pos = u >= 0
    out[pos] = np.exp(-x[pos] ** 2 / (2 * sigma ** 2)) * special.erfcx(u[pos])
    neg = ~pos
    out[neg] = np.exp(sigma ** 2 / (2 * tau ** 2) - x[neg] / tau) * special.erfc(u[neg])
    return out


def peak_template(t, params):
    """Unit-area two-sided exponential (1/2tau) e^(-|t|/tau) convolved with N(0, sigma_irf)."""
    t = np.asarray(t, dtype=float)
    tau, sigma = params.tau_decay, params.sigma_irf
    scalar = t.ndim == 0
    t = np.atleast_1d(t)
    if sigma == 0:
        out = np.exp(-np.abs(t) / tau) / (2 * tau)
    else:
        out = (_one_sided(t, tau, sigma) + _one_sided(-t, tau, sigma)) / (4 * tau)
    return float(out[0]) if scalar else out


def side_peak_count(window, params):
    """Side peaks per side needed to model a histogram spanning [-window, window]."""
    T = params.rep_period
    edge_rule = math.ceil(window / T) + 2
    tail_rule = math.ceil((window + TAIL_DECAY_LENGTHS * params.tau_decay + 6 * params.sigma_irf) / T)
    return max(edge_rule, tail_rule)


def _side_sum(t, params, n_side_peaks):
    T = params.rep_period
    total = np.zeros_like(t)
    for k in range(1, n_side_peaks + 1):
        total += peak_template(t - k * T, params) + peak_template(t + k * T, params)
    return total


def correlation_model(t, area_central, area_side, params, n_side_peaks=None):
    """Expected correlation density: central peak plus equal-area side peaks at k*T."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if n_side_peaks is None:
        n_side_peaks = side_peak_count(float(np.max(np.abs(t))), params)
    return area_central * peak_template(t, params) + area_side * _side_sum(t, params, n_side_peaks)


def _bin_integrals(edges, func):
    left, right = edges[:-1], edges[1:]
    half = 0.5 * (right - left)
    mid = 0.5 * (right + left)
    nodes = mid[:, None] + half[:, None] * _GL_NODES[None, :]
    values = func(nodes.ravel()).reshape(nodes.shape)
    return half * (values @ _GL_WEIGHTS)


def design_matrix(hist, params, n_side_peaks=None):
    """Bin-integrated (central, side) basis columns for a correlation histogram."""
    if n_side_peaks is None:
        n_side_peaks = side_peak_count(hist.window, params)
    edges = hist.edges
    central = _bin_integrals(edges, lambda t: peak_template(t, params))
    side = _bin_integrals(edges, lambda t: _side_sum(t, params, n_side_peaks))
    return np.column_stack([central, side])


# ---------------------------------------------------------------------------
# Peak-area fits
# ---------------------------------------------------------------------------

def _g2_with_error(a0, a_side, cov):
    g2 = a0 / a_side
    grad = np.array([1.0 / a_side, -a0 / a_side ** 2])
    return g2, math.sqrt(max(float(grad @ cov @ grad), 0.0))


def _poisson_refine(X, y, start):
    def nll(beta):
        mu = np.maximum(X @ beta, 1e-12)
        return float(np.sum(mu - y * np.log(mu)))

    def grad(beta):
        mu = np.maximum(X @ beta, 1e-12)
        return X.T @ (1.0 - y / mu)

    res = optimize.minimize(nll, start, jac=grad, method='L-BFGS-B',
                            bounds=[(0.0, None), (1e-12, None)],
                            options={'ftol': 1e-14, 'gtol': 1e-10, 'maxiter': 2000})
    if not res.success:
        raise FitError(f"Poisson likelihood fit did not converge: {res.message}",
                       {'nll': float(res.fun)})
    mu = np.maximum(X @ res.x, 1e-12)
    fisher = X.T @ (X / mu[:, None])
    return res.x, np.linalg.inv(fisher), mu


def fit_peak_areas(hist, params, likelihood='wls', n_side_peaks=None):
    """
    Fit the central-peak area and the common side-peak area of a histogram.

    The shape parameters (tau, sigma, T) are held fixed; the model is linear
    in both areas and is solved through the normal equations with Poisson
    weights 1/max(counts, 1). A negative central area is clamped to zero and
    flagged. likelihood='poisson' refines the solution by maximum likelihood.
    """
    y = np.asarray(hist.counts, dtype=float)
    if y.sum() <= 0:
        raise FitError("histogram is empty; peak areas are not identifiable", {'total': 0})
    if n_side_peaks is None:
        n_side_peaks = side_peak_count(hist.window, params)
    X = design_matrix(hist, params, n_side_peaks)
    w = 1.0 / np.maximum(y, 1.0)

    normal = X.T @ (w[:, None] * X)
    if np.linalg.cond(normal) > 1e12:
        raise FitError("singular design: central and side-peak columns are degenerate",
                       {'condition_number': float(np.linalg.cond(normal))})
    beta = np.linalg.solve(normal, X.T @ (w * y))
    cov = np.linalg.inv(normal)
    unclamped = float(beta[0])
    clamped = False
    if beta[0] < 0:
        clamped = True
        side = X[:, 1]
        norm_side = float(side @ (w * side))
        beta = np.array([0.0, float(side @ (w * y)) / norm_side])
        cov = np.array([[cov[0, 0], 0.0], [0.0, 1.0 / norm_side]])
        logger.warning("central peak area %.3g < 0, clamped to zero", unclamped)
    if beta[1] <= 0:
        raise FitError("side-peak area is not positive; no correlation peaks in histogram",
                       {'area_side': float(beta[1])})

    if likelihood == 'poisson':
        beta, cov, mu = _poisson_refine(X, y, np.maximum(beta, [0.0, 1e-12]))
        chi2 = float(np.sum((y - mu) ** 2 / np.maximum(mu, 1e-12)))
    elif likelihood == 'wls':
        chi2 = float(np.sum(w * (y - X @ beta) ** 2))
    else:
        raise DomainError(f"unknown likelihood '{likelihood}'")

    dof = max(len(y) - 2, 1)
    g2, g2_err = _g2_with_error(float(beta[0]), float(beta[1]), cov)
    return PeakFit(area_central=float(beta[0]), area_side=float(beta[1]), g2_zero=g2,
                   covariance=cov, chi2_per_dof=chi2 / dof, g2_zero_err=g2_err,
                   likelihood=likelihood, clamped=clamped, unclamped_area_central=unclamped,
                   n_side_peaks=n_side_peaks)


def fit_individual_peak_areas(hist, params):
    """
    Per-peak areas for every peak centered inside the window.

    Peaks outside the window share one area. Returns {k: (area, error)} with
    k the peak index (0 is the central peak).
    """
    y = np.asarray(hist.counts, dtype=float)
    if y.sum() <= 0:
        raise FitError("histogram is empty", {'total': 0})
    T = params.rep_period
    k_in = int(math.floor(hist.window / T))
    k_all = side_peak_count(hist.window, params)
    edges = hist.edges
    columns = [_bin_integrals(edges, lambda t, k=k: peak_template(t - k * T, params))
               for k in range(-k_in, k_in + 1)]

    def outer(t):
        total = np.zeros_like(t)
        for k in range(k_in + 1, k_all + 1):
            total += peak_template(t - k * T, params) + peak_template(t + k * T, params)
        return total

    columns.append(_bin_integrals(edges, outer))
    X = np.column_stack(columns)
    w = 1.0 / np.maximum(y, 1.0)
    normal = X.T @ (w[:, None] * X)
    beta = np.linalg.lstsq(normal, X.T @ (w * y), rcond=None)[0]
    errors = np.sqrt(np.clip(np.diag(np.linalg.pinv(normal)), 0.0, None))
    return {k: (float(beta[i]), float(errors[i])) for i, k in enumerate(range(-k_in, k_in + 1))}


def fit_peak_decay(hist, params, tau_start=None):
    """Fit (A0, A_side, tau) with sigma_irf and T fixed; returns PeakDecayFit."""
    y = np.asarray(hist.counts, dtype=float)
    if y.sum() <= 0:
        raise FitError("histogram is empty", {'total': 0})
    sqrt_w = 1.0 / np.sqrt(np.maximum(y, 1.0))
    first = fit_peak_areas(hist, params)
    tau0 = params.tau_decay if tau_start is None else tau_start

    def residuals(x):
        trial = PeakTemplateParams(x[2], params.sigma_irf, params.rep_period)
        X = design_matrix(hist, trial)
        return sqrt_w * (X @ x[:2] - y)

    res = optimize.least_squares(residuals, [first.area_central, first.area_side, tau0],
                                 bounds=([0.0, 0.0, 1e-3], [np.inf, np.inf, np.inf]),
                                 x_scale='jac', xtol=1e-12, ftol=1e-12)
    if not res.success:
        raise FitError(f"peak decay fit did not converge: {res.message}",
                       {'cost': float(res.cost)})
    dof = max(len(y) - 3, 1)
    cov = np.linalg.pinv(res.jac.T @ res.jac)
    return PeakDecayFit(tau_decay=float(res.x[2]), tau_decay_err=float(math.sqrt(max(cov[2, 2], 0.0))),
                        area_central=float(res.x[0]), area_side=float(res.x[1]),
                        chi2_per_dof=float(2 * res.cost / dof))


# ---------------------------------------------------------------------------
# Photon-number statistics and efficiency
# ---------------------------------------------------------------------------

def multiphoton_bound(n_mean, g2_zero):
    """Upper bound (1/2) <n>^2 g2(0) on P(n >= 2)."""
    if n_mean < 0 or g2_zero < 0:
        raise DomainError("n_mean and g2_zero must be >= 0")
    return 0.5 * n_mean ** 2 * g2_zero


def multiphoton_suppression(g2_zero):
    """Reduction of P(n >= 2) relative to Poissonian light of equal mean."""
    return math.inf if g2_zero == 0 else 1.0 / g2_zero


def mean_photon_number(count_rate, rep_rate, detection_eff):
    """Count rate normalized by repetition rate and collection/detection efficiency."""
    if rep_rate <= 0:
        raise DomainError(f"repetition rate must be > 0, got {rep_rate}")
    if not 0 < detection_eff <= 1:
        raise DomainError(f"detection efficiency must lie in (0, 1], got {detection_eff}")
    return count_rate / (rep_rate * detection_eff)


def single_photon_efficiency(n_mean, g2_zero):
    """eta = <n> sqrt(1 - g2(0)) for regulated photons plus a Poissonian background."""
    if g2_zero > 1:
        raise ModelDomainError(
            f"g2(0) = {g2_zero:.3f} > 1: a mixture of regulated single photons and "
            "Poissonian background cannot produce bunched light, efficiency is undefined")
    if g2_zero < 0:
        raise DomainError(f"g2(0) must be >= 0, got {g2_zero}")
    return n_mean * math.sqrt(1.0 - g2_zero)


def efficiency_point(pump_power, n_mean, g2_zero, n_mean_err=0.0, g2_zero_err=0.0):
    eta = single_photon_efficiency(n_mean, g2_zero)
    root = math.sqrt(1.0 - g2_zero)
    d_n = root
    d_g = -n_mean / (2 * root) if root > 0 else 0.0
    eta_err = math.hypot(d_n * n_mean_err, d_g * g2_zero_err)
    return EfficiencyPoint(pump_power, n_mean, g2_zero, eta, n_mean_err, g2_zero_err, eta_err)


def efficiency_after_lens(eta, lens_fraction):
    return eta * lens_fraction


# ---------------------------------------------------------------------------
# Saturation fit
# ---------------------------------------------------------------------------

def saturation_model(power, eta_max, p_sat):
    return eta_max * -np.expm1(-np.asarray(power, dtype=float) / p_sat)


def saturation_jacobian(power, eta_max, p_sat):
    """d(model)/d(eta_max, p_sat), shape (n, 2)."""
    power = np.asarray(power, dtype=float)
    decay = np.exp(-power / p_sat)
    return np.column_stack([1.0 - decay, -eta_max * decay * power / p_sat ** 2])


def fit_saturation(points):
    """
    Fit eta = eta_max (1 - exp(-P/P_sat)) to efficiency points.

    eta_max is solved in closed form for each trial P_sat, the profile is
    scanned on a log grid and refined by bounded Brent, and the pair is
    polished by Levenberg-Marquardt. Points carrying eta_err > 0 are weighted.
    """
    if len(points) < 3 or len({p.pump_power for p in points}) < 3:
        raise DomainError("saturation fit needs at least 3 points with distinct powers")
    P = np.array([p.pump_power for p in points], dtype=float)
    y = np.array([p.eta for p in points], dtype=float)
    errs = np.array([p.eta_err for p in points], dtype=float)
    weighted = bool(np.all(errs > 0))
    sigma = errs if weighted else np.ones_like(y)
    w = 1.0 / sigma ** 2

    def profile(log_ps):
        s = -np.expm1(-P / math.exp(log_ps))
        eta_max = float(np.sum(w * s * y) / np.sum(w * s * s))
        return float(np.sum(w * (y - eta_max * s) ** 2)), eta_max

    positive = P[P > 0]
    grid = np.linspace(math.log(positive.min() / 20), math.log(P.max() * 20), 241)
    ssr = np.array([profile(g)[0] for g in grid])
    i = int(np.argmin(ssr))

    if i == 0 or i == len(grid) - 1:
        _, eta_max = profile(grid[i])
        p_sat = math.exp(grid[i])
        logger.warning("P_sat not identifiable from the data (profile minimum at scan edge)")
        eta_err = float(math.sqrt(1.0 / np.sum(w)) * (1.0 if weighted else math.sqrt(ssr[i] / max(len(y) - 1, 1))))
        return SaturationFit(eta_max=eta_max, p_sat=p_sat, eta_max_err=eta_err, p_sat_err=math.inf,
                             covariance=np.array([[eta_err ** 2, 0.0], [0.0, math.inf]]),
                             chi2_per_dof=float(ssr[i] / max(len(y) - 2, 1)), identifiable=False)

    brent = optimize.minimize_scalar(lambda g: profile(g)[0], bounds=(grid[i - 1], grid[i + 1]),
                                     method='bounded', options={'xatol': 1e-12})
    _, eta_start = profile(brent.x)
    start = [eta_start, math.exp(brent.x)]

    res = optimize.least_squares(
        lambda x: (saturation_model(P, *x) - y) / sigma, start,
        jac=lambda x: saturation_jacobian(P, *x) / sigma[:, None],
        method='lm', xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000)
    if res.status <= 0 or not np.all(np.isfinite(res.x)) or res.x[1] <= 0:
        raise FitError(f"saturation fit did not converge: {res.message}",
                       {'residuals': ((saturation_model(P, *start) - y)).tolist()})

    chi2 = float(np.sum(res.fun ** 2))
    dof = max(len(y) - 2, 1)
    J = res.jac
    cov = np.linalg.pinv(J.T @ J)
    if not weighted:
        cov = cov * chi2 / dof
    return SaturationFit(eta_max=float(res.x[0]), p_sat=float(res.x[1]),
                         eta_max_err=float(math.sqrt(max(cov[0, 0], 0.0))),
                         p_sat_err=float(math.sqrt(max(cov[1, 1], 0.0))),
                         covariance=cov, chi2_per_dof=chi2 / dof)


# ---------------------------------------------------------------------------
# Lifetime fits
# ---------------------------------------------------------------------------

def arrival_histogram(times, bin_width, t_max, t_min=0.0):
    edges = np.arange(t_min, t_max + 0.5 * bin_width, bin_width)
    counts, _ = np.histogram(np.asarray(times, dtype=float), bins=edges)
    return ArrivalHistogram(edges=edges, counts=counts)


def _tail(hist, tail_start):
    edges = np.asarray(hist.edges, dtype=float)
    counts = np.asarray(hist.counts, dtype=float)
    if tail_start is None:
        tail_start = float(edges[int(np.argmax(counts))])
    first = int(np.searchsorted(edges[:-1], tail_start - 1e-9 * abs(tail_start or 1.0)))
    a = edges[first:-1] - edges[first]
    b = edges[first + 1:] - edges[first]
    return a, b, counts[first:], float(edges[first])


def lifetime_log_likelihood(tau, a, b, counts):
    """Binned log-likelihood of a truncated exponential tail (bins [a_i, b_i), a_0 = 0)."""
    delta = b - a
    span = b[-1]
    log_p = -a / tau + np.log(-np.expm1(-delta / tau)) - np.log(-np.expm1(-span / tau))
    return float(np.sum(counts * log_p))


def lifetime_score(tau, a, b, counts):
    """Analytic d(log-likelihood)/d(tau)."""
    delta = b - a
    span = b[-1]
    with np.errstate(over='ignore'):
        term = a - delta / np.expm1(delta / tau)
        norm = span / np.expm1(span / tau)
    return float((np.sum(counts * term) + counts.sum() * norm) / tau ** 2)


def fit_lifetime(hist, tail_start=None):
    """
    Maximum-likelihood decay constant of an arrival-time histogram tail.

    The tail starts at `tail_start` (default: the left edge of the most
    populated bin); the likelihood accounts for the finite histogram range.
    """
    a, b, counts, start = _tail(hist, tail_start)
    total = counts.sum()
    if total <= 0 or len(counts) < 2:
        raise FitError("arrival histogram tail has no counts", {'counts': float(total)})
    if total < 100:
        raise DomainError(f"lifetime fit needs >= 100 counts in the tail, got {int(total)}")

    def g(tau):
        return lifetime_score(tau, a, b, counts) * tau ** 2

    lo = 1e-3 * float(np.min(b - a))
    hi = float(b[-1])
    while g(hi) > 0:
        hi *= 4
        if hi > 1e6 * b[-1]:
            raise FitError("tail shows no decay; lifetime is unbounded",
                           {'mean_time': float(np.sum(counts * 0.5 * (a + b)) / total)})
    tau = optimize.brentq(g, lo, hi, xtol=1e-13, rtol=1e-14, maxiter=500)

    h = 1e-5 * tau
    slope = (lifetime_score(tau + h, a, b, counts) - lifetime_score(tau - h, a, b, counts)) / (2 * h)
    tau_err = math.sqrt(-1.0 / slope) if slope < 0 else math.inf
    return LifetimeFit(tau=float(tau), tau_err=float(tau_err), n_counts=int(total), tail_start=start)


def fit_lifetime_samples(times, tail_start=0.0):
    """Unbinned exponential MLE from raw delays >= tail_start."""
    t = np.asarray(times, dtype=float)
    t = t[t >= tail_start] - tail_start
    if len(t) == 0:
        raise FitError("no samples in the tail", {'tail_start': tail_start})
    tau = float(t.mean())
    return LifetimeFit(tau=tau, tau_err=tau / math.sqrt(len(t)), n_counts=len(t),
                       tail_start=float(tail_start))


# ---------------------------------------------------------------------------
# Lorentzian cavity-mode fit
# ---------------------------------------------------------------------------

def lorentzian_model(wl, amplitude, center, fwhm, offset):
    half = 0.5 * fwhm
    return amplitude * half ** 2 / ((wl - center) ** 2 + half ** 2) + offset


def lorentzian_jacobian(wl, amplitude, center, fwhm, offset):
    half = 0.5 * fwhm
    d = wl - center
    denom = d ** 2 + half ** 2
    return np.column_stack([
        half ** 2 / denom,
        amplitude * half ** 2 * 2 * d / denom ** 2,
        amplitude * half * d ** 2 / denom ** 2,
        np.ones_like(wl),
    ])


def fit_lorentzian(spectrum):
    """Least-squares Lorentzian plus offset; returns LorentzianFit with Q = center/FWHM."""
    if len(spectrum) < 5:
        raise DomainError(f"Lorentzian fit needs >= 5 samples, got {len(spectrum)}")
    wl = np.array([s.wavelength for s in spectrum], dtype=float)
    y = np.array([s.intensity for s in spectrum], dtype=float)
    if np.any(np.diff(wl) <= 0):
        raise DomainError("wavelengths must be strictly increasing")
    span = wl[-1] - wl[0]
    if np.ptp(y) <= 1e-12 * max(np.max(np.abs(y)), 1e-300):
        raise FitError("flat spectrum: no line to fit", {'ptp': float(np.ptp(y))})

    offset0 = float(np.min(y))
    amp0 = float(np.max(y)) - offset0
    center0 = float(wl[int(np.argmax(y))])
    above = wl[y >= offset0 + 0.5 * amp0]
    fwhm0 = max(float(above[-1] - above[0]), float(np.min(np.diff(wl))))

    res = optimize.least_squares(
        lambda x: lorentzian_model(wl, *x) - y, [amp0, center0, fwhm0, offset0],
        jac=lambda x: lorentzian_jacobian(wl, *x),
        x_scale='jac', xtol=1e-14, ftol=1e-14, gtol=1e-14, max_nfev=5000)
    amplitude, center, fwhm, offset = (float(v) for v in res.x)
    fwhm = abs(fwhm)
    if not res.success or not np.isfinite(fwhm) or fwhm == 0 or fwhm > 10 * span:
        raise FitError("Lorentzian fit did not converge to a bounded linewidth",
                       {'fwhm_nm': fwhm, 'message': res.message})

    dof = max(len(y) - 4, 1)
    chi2 = float(np.sum(res.fun ** 2))
    cov = np.linalg.pinv(res.jac.T @ res.jac) * chi2 / dof
    q = center / fwhm
    grad = np.array([0.0, 1.0 / fwhm, -center / fwhm ** 2, 0.0])
    q_err = math.sqrt(max(float(grad @ cov @ grad), 0.0))
    return LorentzianFit(center_nm=center, fwhm_nm=fwhm, q=q, amplitude=amplitude, offset=offset,
                         center_err=math.sqrt(max(cov[1, 1], 0.0)),
                         fwhm_err=math.sqrt(max(cov[2, 2], 0.0)), q_err=q_err,
                         chi2_per_dof=chi2 / dof)


# ---------------------------------------------------------------------------
# Cavity figures of merit
# ---------------------------------------------------------------------------

def purcell_factor(tau_off, tau_on):
    if tau_off <= 0 or tau_on <= 0:
        raise DomainError("lifetimes must be > 0")
    return tau_off / tau_on


def coupling_beta(purcell, gamma_c_ratio):
    """beta = 1 - (gamma_0 - gamma_c)/gamma with gamma/gamma_0 = F_p."""
    if purcell <= 0:
        raise DomainError(f"Purcell factor must be > 0, got {purcell}")
    if not 0 <= gamma_c_ratio <= 1:
        raise DomainError(f"gamma_c ratio must lie in [0, 1], got {gamma_c_ratio}")
    return 1.0 - (1.0 - gamma_c_ratio) / purcell


def extraction_efficiency(q_post, q_planar):
    if q_post <= 0 or q_planar <= 0:
        raise DomainError("quality factors must be > 0")
    return q_post / q_planar


def expected_total_efficiency(beta, eta_extract):
    return beta * eta_extract


def cavity_metrics(tau_off, tau_on, q_post, q_planar, gamma_c_ratio=0.0,
                   tau_off_err=0.0, tau_on_err=0.0, q_post_err=0.0, q_planar_err=0.0,
                   q_predicted=None):
    """All cavity figures of merit with first-order propagated 1-sigma errors."""
    fp = purcell_factor(tau_off, tau_on)
    beta = coupling_beta(fp, gamma_c_ratio)
    eta_ex = extraction_efficiency(q_post, q_planar)
    eta_exp = expected_total_efficiency(beta, eta_ex)

    fp_err = fp * math.hypot(tau_off_err / tau_off, tau_on_err / tau_on)
    beta_err = (1.0 - gamma_c_ratio) * fp_err / fp ** 2
    eta_ex_err = eta_ex * math.hypot(q_post_err / q_post, q_planar_err / q_planar)
    eta_exp_err = math.hypot(eta_ex * beta_err, beta * eta_ex_err)
    return CavityMetrics(
        q_post=q_post, q_planar=q_planar, purcell=fp, beta=beta, eta_extract=eta_ex,
        eta_expected=eta_exp,
        uncertainties={'purcell': fp_err, 'beta': beta_err, 'eta_extract': eta_ex_err,
                       'eta_expected': eta_exp_err},
        eta_extract_predicted=None if q_predicted is None else extraction_efficiency(q_predicted, q_planar))
