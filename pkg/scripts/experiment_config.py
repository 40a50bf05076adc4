"""
Experiment configuration: one YAML file per run.

Sections mirror the simulation and analysis stages. Quantities are stored in
interface units (ns, µW, ps for jitter, nm for wavelengths) and converted
when the module-level parameter objects are built.
"""

import hashlib
import json
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

sys.path.append(str(Path(__file__).parent))

from beam_optics import GaussianBeam
from correlation_analysis import PeakTemplateParams
from detection_chain import ChannelEfficiencies, DetectorSpec, HistogramMode, combined_irf_sigma
from device_parameters import DEFAULTS, JITTER_SIGMA_PS, MEASURED, POWER_SERIES_SCALE
from source_model import BackgroundParams, EmitterParams, ExcitationConfig, SourceKind
from toolkit_errors import ConfigError, ParameterError

ROOT_DIR = Path(__file__).parent.parent
DEFAULT_CONFIG_PATH = ROOT_DIR / 'configs' / 'micropost_defaults.yaml'
TOOLKIT_VERSION = '1.0.0'


@dataclass
class EmitterSection:
    tau_on_ns: float = MEASURED['tau_on_ns'][0]
    tau_off_ns: float = MEASURED['tau_off_ns'][0]
    gamma_c_ratio: float = DEFAULTS['gamma_c_ratio']
    polarized_fraction: float = MEASURED['polarized_fraction'][0]


@dataclass
class ExcitationSection:
    rep_period_ns: float = DEFAULTS['rep_period_ns']
    pump_power_uw: float = DEFAULTS['p_sat_uw']
    p_sat_uw: float = DEFAULTS['p_sat_uw']
    n_pulses: int = 100_000
    source: str = SourceKind.QUANTUM_DOT.value
    coherent_mean: float = 0.1
    powers_uw: list = field(default_factory=lambda: [round(s * DEFAULTS['p_sat_uw'], 6)
                                                      for s in POWER_SERIES_SCALE])


@dataclass
class BackgroundSection:
    amplitude: float = DEFAULTS['background_amplitude']
    power_exponent: float = DEFAULTS['background_power_exponent']
    tau_bg_ns: float = MEASURED['tau_on_ns'][0]


@dataclass
class ChannelSection:
    beta: float = 0.8268
    eta_extract: float = 0.3655
    lens: float = MEASURED['lens_fraction'][0]
    polarizer_linear: float = 1.0
    polarizer_unpol: float = 1.0
    detector: float = MEASURED['detection_efficiency'][0]


@dataclass
class DetectorSection:
    jitter_sigma_ps: float = round(JITTER_SIGMA_PS, 3)
    dead_time_ns: float = DEFAULTS['dead_time_ns']
    dark_count_rate_hz: float = DEFAULTS['dark_count_rate_hz']


@dataclass
class AnalysisSection:
    bin_width_ns: float = DEFAULTS['bin_width_ns']
    window_ns: float = DEFAULTS['window_periods'] * DEFAULTS['rep_period_ns']
    mode: str = HistogramMode.ALL_PAIRS.value
    n_side_peaks: int = None
    likelihood: str = 'wls'
    tau_decay_ns: float = None
    sigma_irf_ns: float = None


@dataclass
class CavitySection:
    q_post: float = MEASURED['q_post'][0]
    q_post_err: float = MEASURED['q_post'][1]
    q_planar: float = MEASURED['q_planar'][0]
    q_planar_err: float = MEASURED['q_planar'][1]
    q_predicted: float = MEASURED['q_predicted'][0]
    tau_on_err_ns: float = MEASURED['tau_on_ns'][1]
    tau_off_err_ns: float = MEASURED['tau_off_ns'][1]


@dataclass
class OpticsSection:
    core_radius_um: float = MEASURED['post_top_diameter_um'][0] / 2
    n_core: float = DEFAULTS['n_core']
    n_clad: float = DEFAULTS['n_clad']
    wavelength_nm: float = MEASURED['wavelength_nm'][0]
    medium_index: float = DEFAULTS['medium_index']
    waist_um: float = None
    lens_half_angle_rad: float = None
    calibrate_target: float = MEASURED['lens_fraction'][0]
    near_field: str = None
    zero_pad: int = DEFAULTS['zero_pad_factor']


SECTIONS = {
    'emitter': EmitterSection,
    'excitation': ExcitationSection,
    'background': BackgroundSection,
    'channel': ChannelSection,
    'detector': DetectorSection,
    'analysis': AnalysisSection,
    'cavity': CavitySection,
    'optics': OpticsSection,
}


@dataclass
class ExperimentConfig:
    emitter: EmitterSection = field(default_factory=EmitterSection)
    excitation: ExcitationSection = field(default_factory=ExcitationSection)
    background: BackgroundSection = field(default_factory=BackgroundSection)
    channel: ChannelSection = field(default_factory=ChannelSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    cavity: CavitySection = field(default_factory=CavitySection)
    optics: OpticsSection = field(default_factory=OpticsSection)
    seed: int = 0
    output_dir: str = 'results'

    # -- serialization -----------------------------------------------------

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a mapping at the top level")
        known = set(SECTIONS) | {'seed', 'output_dir'}
        for key in data:
            if key not in known:
                raise ConfigError(f"unknown configuration key '{key}'")
        kwargs = {}
        for name, section_cls in SECTIONS.items():
            kwargs[name] = _build_section(name, section_cls, data.get(name) or {})
        if 'seed' in data:
            kwargs['seed'] = data['seed']
        if 'output_dir' in data:
            kwargs['output_dir'] = str(data['output_dir'])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    # -- module parameter objects ------------------------------------------

    def emitter_params(self):
        e = self.emitter
        return EmitterParams(e.tau_on_ns, e.tau_off_ns, e.gamma_c_ratio, e.polarized_fraction)

    def excitation_config(self, pump_power=None, rng_seed=None):
        x = self.excitation
        return ExcitationConfig(
            rep_period=x.rep_period_ns,
            pump_power=x.pump_power_uw if pump_power is None else pump_power,
            p_sat_power=x.p_sat_uw,
            n_pulses=x.n_pulses,
            rng_seed=self.seed if rng_seed is None else rng_seed,
            source=SourceKind(x.source),
            coherent_mean=x.coherent_mean,
        )

    def background_params(self):
        b = self.background
        return BackgroundParams(b.amplitude, b.power_exponent, b.tau_bg_ns)

    def channel_efficiencies(self):
        return ChannelEfficiencies(**asdict(self.channel))

    def detector_spec(self):
        d = self.detector
        return DetectorSpec(d.jitter_sigma_ps, d.dead_time_ns, d.dark_count_rate_hz)

    def histogram_mode(self):
        return HistogramMode(self.analysis.mode)

    def template_params(self):
        a = self.analysis
        tau = self.emitter.tau_on_ns if a.tau_decay_ns is None else a.tau_decay_ns
        sigma = combined_irf_sigma(self.detector_spec()) if a.sigma_irf_ns is None else a.sigma_irf_ns
        return PeakTemplateParams(tau, sigma, self.excitation.rep_period_ns)

    def wavelength_um(self):
        return self.optics.wavelength_nm * 1e-3

    def gaussian_beam(self):
        o = self.optics
        if o.waist_um is None:
            return None
        return GaussianBeam(o.waist_um, self.wavelength_um(), o.medium_index)

    def validate(self):
        """Build every parameter object so each section is checked against its invariants."""
        checks = [
            ('emitter', self.emitter_params),
            ('excitation', self.excitation_config),
            ('background', self.background_params),
            ('channel', self.channel_efficiencies),
            ('detector', self.detector_spec),
            ('analysis', self.template_params),
            ('analysis', self.histogram_mode),
            ('optics', self.gaussian_beam),
        ]
        for section, build in checks:
            try:
                build()
            except ParameterError as exc:
                raise ConfigError(f"{section}.{exc}") from exc
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{section}: {exc}") from exc
        _check(isinstance(self.seed, int) and 0 <= self.seed < 2 ** 64,
               'seed', 'must be a 64-bit unsigned integer')
        a = self.analysis
        _check(a.bin_width_ns > 0, 'analysis.bin_width_ns', 'must be > 0')
        _check(a.window_ns > 0, 'analysis.window_ns', 'must be > 0')
        _check(a.likelihood in ('wls', 'poisson'), 'analysis.likelihood', "must be 'wls' or 'poisson'")
        _check(a.n_side_peaks is None or (isinstance(a.n_side_peaks, int) and a.n_side_peaks >= 1),
               'analysis.n_side_peaks', 'must be null or an integer >= 1')
        _check(all(p >= 0 for p in self.excitation.powers_uw),
               'excitation.powers_uw', 'powers must be >= 0')
        c = self.cavity
        _check(c.q_post > 0 and c.q_planar > 0, 'cavity.q_post/q_planar', 'must be > 0')
        o = self.optics
        _check(o.core_radius_um > 0, 'optics.core_radius_um', 'must be > 0')
        _check(o.n_core > o.n_clad >= 1, 'optics.n_core/n_clad', 'need n_core > n_clad >= 1')
        _check(o.wavelength_nm > 0, 'optics.wavelength_nm', 'must be > 0')
        _check(o.lens_half_angle_rad is None or 0 < o.lens_half_angle_rad < math.pi / 2,
               'optics.lens_half_angle_rad', 'must lie in (0, pi/2)')
        _check(o.calibrate_target is None or 0 < o.calibrate_target < 1,
               'optics.calibrate_target', 'must lie in (0, 1)')
        _check(int(o.zero_pad) >= 1, 'optics.zero_pad', 'must be >= 1')


def _check(condition, path, message):
    if not condition:
        raise ConfigError(f"{path}: {message}")


def _build_section(name, section_cls, values):
    if not isinstance(values, dict):
        raise ConfigError(f"section '{name}' must be a mapping")
    allowed = {f.name for f in fields(section_cls)}
    for key in values:
        if key not in allowed:
            raise ConfigError(f"unknown configuration key '{name}.{key}'")
    values = dict(values)
    if 'powers_uw' in values:
        values['powers_uw'] = list(values['powers_uw'])
    return section_cls(**values)


def load_config(path=None):
    """Read a YAML config; None loads the bundled defaults."""
    path = Path(path) if path is not None else DEFAULT_CONFIG_PATH
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, 'problem_mark', None)
        where = f", line {mark.line + 1}" if mark is not None else ''
        raise ConfigError(f"{path}{where}: invalid YAML") from exc
    return ExperimentConfig.from_dict(data)


def dump_config(cfg, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False), encoding='utf-8')
    return path


def config_hash(cfg):
    """SHA-256 of the canonical JSON form of the config."""
    canonical = json.dumps(cfg.to_dict(), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def apply_overrides(cfg, seed=None, output_dir=None):
    if seed is not None:
        cfg.seed = int(seed)
    if output_dir is not None:
        cfg.output_dir = str(output_dir)
    cfg.validate()
    return cfg
