"""
Forward Monte Carlo model of a pulsed quantum-dot single-photon emitter.

Every laser pulse excites the dot with probability 1 - exp(-P/P_sat); an
excited dot emits exactly one photon on the regulated line with an
exponentially distributed delay (Purcell-shortened lifetime tau_on).
Independently, each pulse carries a Poissonian number of unregulated
background photons whose mean grows as a power law of the pump power.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from device_parameters import DEFAULTS, MEASURED
from toolkit_errors import DomainError, ParameterError

logger = logging.getLogger(__name__)

# Pulses per independent random substream
BLOCK_PULSES = 1 << 16

# Largest absolute time (ns) still resolved to 1 ps in float64
MAX_ABSOLUTE_TIME_NS = 2.0 ** 53 * 1e-3


class Origin(Enum):
    QD_LINE = 'QDLine'
    BACKGROUND = 'Background'


class Polarization(Enum):
    LINEAR = 'Linear'
    UNPOLARIZED = 'Unpolarized'


class SourceKind(Enum):
    QUANTUM_DOT = 'quantum_dot'
    COHERENT = 'coherent'


# integer codes used in the columnar stream
ORIGIN_CODES = {Origin.QD_LINE: 0, Origin.BACKGROUND: 1}
POLARIZATION_CODES = {Polarization.LINEAR: 0, Polarization.UNPOLARIZED: 1}
ORIGIN_NAMES = np.array([o.value for o in ORIGIN_CODES])
POLARIZATION_NAMES = np.array([p.value for p in POLARIZATION_CODES])


def _require(condition, field_name, message):
    if not condition:
        raise ParameterError(field_name, message)


@dataclass(frozen=True)
class EmitterParams:
    tau_on: float = MEASURED['tau_on_ns'][0]
    tau_off: float = MEASURED['tau_off_ns'][0]
    gamma_c_ratio: float = DEFAULTS['gamma_c_ratio']
    polarized_fraction: float = MEASURED['polarized_fraction'][0]

    def __post_init__(self):
        _require(self.tau_on > 0, 'tau_on', 'must be > 0')
        _require(self.tau_off > 0, 'tau_off', 'must be > 0')
        _require(0.0 <= self.gamma_c_ratio <= 1.0, 'gamma_c_ratio', 'must lie in [0, 1]')
        _require(0.0 <= self.polarized_fraction <= 1.0, 'polarized_fraction', 'must lie in [0, 1]')

    def is_purcell_enhanced(self):
        """True when tau_on <= tau_off, i.e. the derived Purcell factor is >= 1."""
        return self.tau_on <= self.tau_off


@dataclass(frozen=True)
class ExcitationConfig:
    rep_period: float = DEFAULTS['rep_period_ns']
    pump_power: float = DEFAULTS['p_sat_uw']
    p_sat_power: float = DEFAULTS['p_sat_uw']
    n_pulses: int = 100_000
    rng_seed: int = 0
    source: SourceKind = SourceKind.QUANTUM_DOT
    coherent_mean: float = 0.1

    def __post_init__(self):
        _require(self.rep_period > 0, 'rep_period', 'must be > 0')
        _require(self.pump_power >= 0, 'pump_power', 'must be >= 0')
        _require(self.p_sat_power > 0, 'p_sat_power', 'must be > 0')
        _require(int(self.n_pulses) == self.n_pulses and self.n_pulses >= 1,
                 'n_pulses', 'must be an integer >= 1')
        _require(0 <= self.rng_seed < 2 ** 64, 'rng_seed', 'must be a 64-bit unsigned integer')
        _require(self.coherent_mean >= 0, 'coherent_mean', 'must be >= 0')


@dataclass(frozen=True)
class BackgroundParams:
    amplitude: float = DEFAULTS['background_amplitude']
    power_exponent: float = DEFAULTS['background_power_exponent']
    tau_bg: float = MEASURED['tau_on_ns'][0]

    def __post_init__(self):
        _require(self.amplitude >= 0, 'amplitude', 'must be >= 0')
        _require(self.power_exponent >= 0, 'power_exponent', 'must be >= 0')
        _require(self.tau_bg > 0, 'tau_bg', 'must be > 0')


@dataclass(frozen=True)
class EmissionEvent:
    pulse_index: int
    time_offset: float
    origin: Origin
    polarization: Polarization

    def absolute_time(self, rep_period):
        return self.pulse_index * rep_period + self.time_offset


@dataclass
class EmissionStream:
    """Columnar emission record, sorted by absolute time."""

    emitter: EmitterParams
    excitation: ExcitationConfig
    background: BackgroundParams
    pulse_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    time_offset: np.ndarray = field(default_factory=lambda: np.zeros(0))
    origin: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int8))
    polarization: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int8))

    def __len__(self):
        return len(self.pulse_index)

    @property
    def absolute_time(self):
        return self.pulse_index * self.excitation.rep_period + self.time_offset

    @property
    def duration(self):
        """Covered time span in ns (n_pulses repetition periods)."""
        return self.excitation.n_pulses * self.excitation.rep_period

    def events(self):
        origins = list(ORIGIN_CODES)
        polarizations = list(POLARIZATION_CODES)
        for i in range(len(self)):
            yield EmissionEvent(int(self.pulse_index[i]), float(self.time_offset[i]),
                                origins[self.origin[i]], polarizations[self.polarization[i]])

    def count(self, origin):
        return int(np.count_nonzero(self.origin == ORIGIN_CODES[origin]))

    def qd_multiplicity_ok(self):
        """At most one regulated-line photon per pulse."""
        qd_pulses = self.pulse_index[self.origin == ORIGIN_CODES[Origin.QD_LINE]]
        return len(np.unique(qd_pulses)) == len(qd_pulses)


def excitation_probability(power, p_sat):
    """Saturation law 1 - exp(-P/P_sat)."""
    if p_sat <= 0:
        raise DomainError(f"P_sat must be > 0, got {p_sat}")
    if power < 0:
        raise DomainError(f"pump power must be >= 0, got {power}")
    return -math.expm1(-power / p_sat)


def background_mean(power, params, p_sat):
    """Mean background photons per pulse, b*(P/P_sat)^m."""
    if power < 0:
        raise DomainError(f"pump power must be >= 0, got {power}")
    if params.amplitude == 0:
        return 0.0
    return params.amplitude * (power / p_sat) ** params.power_exponent


def _pulse_rates(emitter, excitation, background):
    """(p_exc, mu_bg) for the configured source kind."""
    if excitation.source is SourceKind.COHERENT:
        return 0.0, excitation.coherent_mean
    p_exc = excitation_probability(excitation.pump_power, excitation.p_sat_power)
    mu_bg = background_mean(excitation.pump_power, background, excitation.p_sat_power)
    return p_exc, mu_bg


def sample_pulse(rng, pulse_index, emitter, excitation, background):
    """
    Draw the emission events of a single pulse.

    Returns a list of EmissionEvent: at most one QDLine photon followed by a
    Poissonian number of background photons.
    """
    p_exc, mu_bg = _pulse_rates(emitter, excitation, background)
    events = []
    if p_exc > 0 and rng.random() < p_exc:
        linear = rng.random() < emitter.polarized_fraction
        events.append(EmissionEvent(
            pulse_index, float(rng.exponential(emitter.tau_on)), Origin.QD_LINE,
            Polarization.LINEAR if linear else Polarization.UNPOLARIZED))
    n_bg = int(rng.poisson(mu_bg)) if mu_bg > 0 else 0
    for offset in rng.exponential(background.tau_bg, n_bg):
        events.append(EmissionEvent(pulse_index, float(offset), Origin.BACKGROUND,
                                    Polarization.UNPOLARIZED))
    return events


def _sample_block(seed_seq, first_pulse, n, p_exc, mu_bg, emitter, background):
    """Vectorized equivalent of sample_pulse over pulses [first_pulse, first_pulse + n)."""
    rng = np.random.default_rng(seed_seq)
    pulses = np.arange(first_pulse, first_pulse + n, dtype=np.int64)

    excited = rng.random(n) < p_exc
    qd_pulses = pulses[excited]
    qd_offsets = rng.exponential(emitter.tau_on, len(qd_pulses))
    qd_linear = rng.random(len(qd_pulses)) < emitter.polarized_fraction

    n_bg = rng.poisson(mu_bg, n) if mu_bg > 0 else np.zeros(n, dtype=np.int64)
    bg_pulses = np.repeat(pulses, n_bg)
    bg_offsets = rng.exponential(background.tau_bg, len(bg_pulses))

    pulse_index = np.concatenate([qd_pulses, bg_pulses])
    time_offset = np.concatenate([qd_offsets, bg_offsets])
    origin = np.concatenate([
        np.full(len(qd_pulses), ORIGIN_CODES[Origin.QD_LINE], dtype=np.int8),
        np.full(len(bg_pulses), ORIGIN_CODES[Origin.BACKGROUND], dtype=np.int8)])
    polarization = np.concatenate([
        np.where(qd_linear, POLARIZATION_CODES[Polarization.LINEAR],
                 POLARIZATION_CODES[Polarization.UNPOLARIZED]).astype(np.int8),
        np.full(len(bg_pulses), POLARIZATION_CODES[Polarization.UNPOLARIZED], dtype=np.int8)])
    return pulse_index, time_offset, origin, polarization


def generate_stream(emitter, excitation, background, threads=1):
    """
    Simulate excitation.n_pulses pulses and return the time-sorted EmissionStream.

    Pulses are processed in blocks of BLOCK_PULSES, each with its own child of
    SeedSequence(rng_seed), so the result does not depend on `threads`.
    """
    n_pulses = int(excitation.n_pulses)
    span = n_pulses * excitation.rep_period
    if span >= MAX_ABSOLUTE_TIME_NS:
        raise DomainError(
            f"stream spans {span:.3e} ns, beyond the {MAX_ABSOLUTE_TIME_NS:.3e} ns "
            "range resolved at 1 ps; reduce n_pulses or rep_period")

    p_exc, mu_bg = _pulse_rates(emitter, excitation, background)
    n_blocks = -(-n_pulses // BLOCK_PULSES)
    children = np.random.SeedSequence(excitation.rng_seed).spawn(n_blocks)
    jobs = [(children[b], b * BLOCK_PULSES, min(BLOCK_PULSES, n_pulses - b * BLOCK_PULSES))
            for b in range(n_blocks)]

    def run(job):
        return _sample_block(*job, p_exc, mu_bg, emitter, background)

    if threads > 1 and n_blocks > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            blocks = list(pool.map(run, jobs))
    else:
        blocks = [run(job) for job in jobs]

    pulse_index, time_offset, origin, polarization = (np.concatenate(cols) for cols in zip(*blocks))
    order = np.lexsort((pulse_index, pulse_index * excitation.rep_period + time_offset))
    stream = EmissionStream(emitter, excitation, background, pulse_index[order],
                            time_offset[order], origin[order], polarization[order])
    if not stream.qd_multiplicity_ok():
        raise AssertionError("more than one QDLine photon in a pulse")
    logger.debug("generated %d events over %d pulses (p_exc=%.4f, mu_bg=%.4g)",
                 len(stream), n_pulses, p_exc, mu_bg)
    return stream


def expected_g2(p_exc, mu_bg):
    """g2(0) of one regulated Bernoulli photon mixed with Poisson(mu_bg) background."""
    n = p_exc + mu_bg
    if n == 0:
        return 0.0
    return (2 * p_exc * mu_bg + mu_bg ** 2) / n ** 2


def background_for_g2(target_g2, p_exc):
    """Background mean mu giving expected_g2(p_exc, mu) == target_g2 (0 <= target < 1)."""
    if not 0 <= target_g2 < 1:
        raise DomainError(f"target g2 must lie in [0, 1), got {target_g2}")
    # (1-g) mu^2 + 2 p (1-g) mu - g p^2 = 0
    a = 1 - target_g2
    b = 2 * p_exc * (1 - target_g2)
    c = -target_g2 * p_exc ** 2
    return (-b + math.sqrt(b * b - 4 * a * c)) / (2 * a)


def pulse_photon_statistics(stream, transmission=None):
    """
    Per-pulse photon statistics computed directly on the emission stream.

    transmission: optional per-event survival probabilities. The moments are
    the exact expectations after independent thinning.

    Returns dict with n_mean, p_multi (P(n >= 2)) and g2_pair (<n(n-1)>/<n>^2).
    """
    n_pulses = stream.excitation.n_pulses
    p = np.ones(len(stream)) if transmission is None else np.asarray(transmission, dtype=float)
    s1 = np.bincount(stream.pulse_index, weights=p, minlength=n_pulses)
    s2 = np.bincount(stream.pulse_index, weights=p * p, minlength=n_pulses)
    n_mean = s1.sum() / n_pulses
    factorial2 = (s1 * s1 - s2).sum() / n_pulses
    g2 = factorial2 / n_mean ** 2 if n_mean > 0 else float('nan')

    if transmission is None:
        counts = np.bincount(stream.pulse_index, minlength=n_pulses)
        p_multi = np.count_nonzero(counts >= 2) / n_pulses
    else:
        # P(n >= 2) = 1 - prod(1-p) - sum_j p_j prod_{l != j}(1-p_l), per pulse
        q = np.clip(1 - p, 1e-300, None)
        log_p0 = np.bincount(stream.pulse_index, weights=np.log(q), minlength=n_pulses)
        ratio = np.bincount(stream.pulse_index, weights=p / q, minlength=n_pulses)
        p0 = np.exp(log_p0)
        p_multi = float(np.mean(1 - p0 - p0 * ratio))
    return {'n_mean': float(n_mean), 'p_multi': float(p_multi), 'g2_pair': float(g2)}


def stream_summary(stream):
    return {
        'n_pulses': int(stream.excitation.n_pulses),
        'events': len(stream),
        'qd_events': stream.count(Origin.QD_LINE),
        'background_events': stream.count(Origin.BACKGROUND),
    }
