"""
Lossy optical channel and Hanbury Brown-Twiss apparatus.

Photons from an EmissionStream survive the channel independently, are split
50/50 onto detectors D1 and D2, receive Gaussian timing jitter and pass a
non-paralyzable dead-time filter. Inter-detection time differences are
histogrammed either over all (D1, D2) pairs or in start-stop mode.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from device_parameters import DEFAULTS, JITTER_SIGMA_PS, MEASURED
from source_model import POLARIZATION_CODES, Polarization
from toolkit_errors import DomainError, ParameterError

logger = logging.getLogger(__name__)

# Starts processed per chunk when enumerating all pairs
PAIR_CHUNK = 1 << 18


class Detector(Enum):
    D1 = 'D1'
    D2 = 'D2'


class HistogramMode(Enum):
    ALL_PAIRS = 'AllPairs'
    START_STOP = 'StartStop'


@dataclass(frozen=True)
class ChannelEfficiencies:
    beta: float = 0.8268
    eta_extract: float = 0.3655
    lens: float = MEASURED['lens_fraction'][0]
    polarizer_linear: float = 1.0
    polarizer_unpol: float = 1.0
    detector: float = MEASURED['detection_efficiency'][0]

    def __post_init__(self):
        for name in ('beta', 'eta_extract', 'lens', 'polarizer_linear', 'polarizer_unpol', 'detector'):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ParameterError(name, f'must lie in [0, 1], got {value}')

    def detection_efficiency(self, polarized_fraction):
        """Collection and detection efficiency seen by the QD line (lens, polarizers, detector)."""
        polarizer = (polarized_fraction * self.polarizer_linear
                     + (1 - polarized_fraction) * self.polarizer_unpol)
        return self.lens * polarizer * self.detector


@dataclass(frozen=True)
class DetectorSpec:
    jitter_sigma: float = JITTER_SIGMA_PS  # ps, per detector
    dead_time: float = DEFAULTS['dead_time_ns']
    dark_count_rate: float = DEFAULTS['dark_count_rate_hz']  # s^-1, per detector

    def __post_init__(self):
        if not self.jitter_sigma >= 0:
            raise ParameterError('jitter_sigma', 'must be >= 0')
        if not self.dead_time >= 0:
            raise ParameterError('dead_time', 'must be >= 0')
        if not self.dark_count_rate >= 0:
            raise ParameterError('dark_count_rate', 'must be >= 0')


@dataclass
class DetectionRecords:
    """Per-detector sorted absolute timestamps (ns)."""

    d1: np.ndarray = field(default_factory=lambda: np.zeros(0))
    d2: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self):
        return len(self.d1) + len(self.d2)

    def times(self, detector):
        return self.d1 if detector is Detector.D1 else self.d2


@dataclass
class CorrelationHistogram:
    bin_width: float
    window: float
    counts: np.ndarray
    mode: HistogramMode = HistogramMode.ALL_PAIRS
    total_pulses: int = 0
    metadata: dict = field(default_factory=dict)

    @property
    def edges(self):
        return -self.window + self.bin_width * np.arange(len(self.counts) + 1)

    @property
    def centers(self):
        edges = self.edges
        return 0.5 * (edges[:-1] + edges[1:])

    @property
    def total(self):
        return int(self.counts.sum())


def n_bins(bin_width, window):
    return int(math.ceil(2 * window / bin_width - 1e-9))


def combined_irf_sigma(spec):
    """Sigma (ns) of the two-detector timing response of one correlation peak."""
    return math.sqrt(2.0) * spec.jitter_sigma * 1e-3


def polarizer_transmission(polarized_fraction):
    """
    Transmissions of an ideal polarizer aligned with the linear component.

    Returns (linear_T, unpol_T): 1 for Linear-tagged photons, 1/2 for the
    unpolarized remainder.
    """
    if not 0.0 <= polarized_fraction <= 1.0:
        raise DomainError(f"polarized fraction must lie in [0, 1], got {polarized_fraction}")
    return 1.0, 0.5


def ensemble_polarizer_transmission(polarized_fraction):
    linear_t, unpol_t = polarizer_transmission(polarized_fraction)
    return polarized_fraction * linear_t + (1 - polarized_fraction) * unpol_t


def polarized_fraction_from_visibility(i_max, i_min):
    """Linear-basis visibility (Imax - Imin)/(Imax + Imin) of a partially polarized line."""
    if i_max + i_min <= 0:
        raise DomainError("intensities must not both be zero")
    return (i_max - i_min) / (i_max + i_min)


def channel_transmission(eff, polarization):
    """End-to-end survival probability of one photon."""
    polarizer = eff.polarizer_linear if polarization is Polarization.LINEAR else eff.polarizer_unpol
    return eff.beta * eff.eta_extract * eff.lens * eff.detector * polarizer


def event_transmission(stream, eff):
    """Per-event survival probabilities for a whole stream."""
    linear = stream.polarization == POLARIZATION_CODES[Polarization.LINEAR]
    return np.where(linear, channel_transmission(eff, Polarization.LINEAR),
                    channel_transmission(eff, Polarization.UNPOLARIZED))


def thin(rng, n, p):
    """Boolean survival mask for n photons with survival probability p (scalar or array)."""
    return rng.random(n) < p


def apply_dead_time(times, dead_time):
    """Drop records closer than dead_time to the previously accepted record."""
    if len(times) < 2 or dead_time <= 0:
        return times
    if math.isinf(dead_time):
        return times[:1]
    if np.all(np.diff(times) >= dead_time):
        return times
    keep = np.zeros(len(times), dtype=bool)
    last = -np.inf
    for i, t in enumerate(times):
        if t - last >= dead_time:
            keep[i] = True
            last = t
    return times[keep]


def detect(stream, eff, spec, rng, duration=None):
    """
    Pass an emission stream through the channel and the HBT detectors.

    Parameters:
    -----------
    stream : EmissionStream
        Time-sorted emission events
    eff : ChannelEfficiencies
    spec : DetectorSpec
    rng : numpy.random.Generator
    duration : float, optional
        Span (ns) for dark counts; defaults to the stream duration

    Returns:
    --------
    DetectionRecords with per-detector sorted timestamps
    """
    times = stream.absolute_time
    survived = thin(rng, len(times), event_transmission(stream, eff))
    times = times[survived]
    to_d1 = rng.random(len(times)) < 0.5
    sigma_ns = spec.jitter_sigma * 1e-3
    if duration is None:
        duration = stream.duration

    out = []
    for mask in (to_d1, ~to_d1):
        t = times[mask]
        if sigma_ns > 0:
            t = t + rng.normal(0.0, sigma_ns, len(t))
        if spec.dark_count_rate > 0:
            n_dark = rng.poisson(spec.dark_count_rate * duration * 1e-9)
            t = np.concatenate([t, rng.uniform(0.0, duration, n_dark)])
        t = np.sort(t, kind='stable')
        out.append(apply_dead_time(t, spec.dead_time))
    records = DetectionRecords(out[0], out[1])
    logger.debug("detected %d of %d events (D1=%d, D2=%d)",
                 len(records), len(stream), len(records.d1), len(records.d2))
    return records


def _bin_index(dt, bin_width, window, nb):
    idx = np.floor((dt + window) / bin_width).astype(np.int64)
    return np.clip(idx, 0, nb - 1)


def build_histogram(records, bin_width, window, mode=HistogramMode.ALL_PAIRS, total_pulses=0):
    """
    Histogram of t2 - t1 over (D1, D2) record pairs with |t2 - t1| <= window.

    AllPairs counts every pair. StartStop models a stop channel delayed by
    `window`: each D1 start counts only the first D2 record at or after
    t1 - window, if it lies within t1 + window.
    """
    if bin_width <= 0 or window <= 0:
        raise DomainError(f"bin_width and window must be > 0, got {bin_width}, {window}")
    nb = n_bins(bin_width, window)
    counts = np.zeros(nb, dtype=np.int64)
    t1, t2 = np.asarray(records.d1), np.asarray(records.d2)

    if len(t1) and len(t2):
        lo = np.searchsorted(t2, t1 - window, side='left')
        hi = np.searchsorted(t2, t1 + window, side='right')
        if mode is HistogramMode.START_STOP:
            valid = lo < hi
            dt = t2[lo[valid]] - t1[valid]
            counts += np.bincount(_bin_index(dt, bin_width, window, nb), minlength=nb)
        else:
            for start in range(0, len(t1), PAIR_CHUNK):
                c_lo, c_hi = lo[start:start + PAIR_CHUNK], hi[start:start + PAIR_CHUNK]
                n_pairs = c_hi - c_lo
                total = int(n_pairs.sum())
                if total == 0:
                    continue
                owner = np.repeat(np.arange(len(c_lo)), n_pairs)
                # position of each pair inside its start's run of stops
                run_start = np.repeat(np.cumsum(n_pairs) - n_pairs, n_pairs)
                stop = np.repeat(c_lo, n_pairs) + (np.arange(total) - run_start)
                dt = t2[stop] - t1[start + owner]
                counts += np.bincount(_bin_index(dt, bin_width, window, nb), minlength=nb)

    return CorrelationHistogram(bin_width=bin_width, window=window, counts=counts, mode=mode,
                                total_pulses=int(total_pulses))


def merge_histograms(first, second):
    """Bin-wise sum of two histograms with identical binning and mode."""
    if (first.bin_width != second.bin_width or first.window != second.window
            or first.mode is not second.mode):
        raise DomainError("histograms differ in binning or mode")
    return CorrelationHistogram(first.bin_width, first.window, first.counts + second.counts,
                                first.mode, first.total_pulses + second.total_pulses,
                                dict(first.metadata))


def count_rate(records, duration):
    """Detections per second across both detectors; duration in ns."""
    if duration <= 0:
        raise DomainError(f"duration must be > 0, got {duration}")
    return len(records) / (duration * 1e-9)
