#!/usr/bin/env python3
"""
Command-line driver for the micropost single-photon source toolkit.

Subcommands:
  simulate   emission stream + detection records for one pump power
  analyze    g2(0) and efficiency from a records or histogram file
  pipeline   efficiency versus power, saturation fit and cavity metrics
  optics     mode waist, divergence, lens collection and far field
  report     figures and summary table for a finished pipeline run

Exit codes: 0 success, 2 configuration, 3 I/O or data format, 4 fit failure,
5 domain error.
"""

import argparse
import logging
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pandas as pd

sys.path.append(str(Path(__file__).parent))

import beam_optics
import correlation_analysis as ca
import data_io
from detection_chain import build_histogram, count_rate, detect, event_transmission
from experiment_config import TOOLKIT_VERSION, apply_overrides, config_hash, dump_config, load_config
from source_model import excitation_probability, generate_stream, pulse_photon_statistics, stream_summary
from toolkit_errors import EXIT_OK, ConfigError, DataFormatError, ModelDomainError, ToolkitError

logger = logging.getLogger('photon_toolkit')

# independent child streams of the run seed
EMISSION_STREAM, DETECTION_STREAM = 0, 1


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def banner(title):
    print("=" * 80)
    print(title)
    print("=" * 80)


@contextmanager
def stage(name):
    """Tag any toolkit failure raised inside the block with the stage name."""
    try:
        yield
    except ToolkitError as exc:
        if not getattr(exc, 'stage', None):
            exc.stage = name
        raise


def point_seeds(seed, index):
    """(emission seed, detection seed) for power point `index` of a run."""
    state = np.random.SeedSequence([seed, index]).generate_state(2, dtype=np.uint64)
    return int(state[EMISSION_STREAM]), int(state[DETECTION_STREAM])


def simulate_records(cfg, pump_power=None, seeds=None, threads=1):
    """Run the source and the detection chain; returns (stream, records)."""
    emission_seed, detection_seed = seeds if seeds is not None else point_seeds(cfg.seed, 0)
    excitation = cfg.excitation_config(pump_power=pump_power, rng_seed=emission_seed)
    stream = generate_stream(cfg.emitter_params(), excitation, cfg.background_params(), threads=threads)
    records = detect(stream, cfg.channel_efficiencies(), cfg.detector_spec(),
                     np.random.default_rng(detection_seed))
    return stream, records


def histogram_from_records(cfg, records, n_pulses):
    a = cfg.analysis
    return build_histogram(records, a.bin_width_ns, a.window_ns, cfg.histogram_mode(),
                           total_pulses=n_pulses)


def fit_histogram(cfg, hist):
    """Peak-area fit plus the model curve evaluated on the histogram bins."""
    params = cfg.template_params()
    n_side = cfg.analysis.n_side_peaks
    fit = ca.fit_peak_areas(hist, params, likelihood=cfg.analysis.likelihood, n_side_peaks=n_side)
    design = ca.design_matrix(hist, params, fit.n_side_peaks)
    model = design @ np.array([fit.area_central, fit.area_side])
    return fit, model


def efficiency_from_counts(cfg, n_detected, n_pulses, pump_power, fit):
    """
    EfficiencyPoint from the detected count and the fitted g2(0).

    Returns (point, note). A bunched g2(0) leaves eta undefined: the point then
    carries eta = eta_err = nan and `note` holds the reason, otherwise note is None.
    """
    rep_rate = 1e9 / cfg.excitation.rep_period_ns
    det_eff = cfg.channel_efficiencies().detection_efficiency(cfg.emitter.polarized_fraction)
    rate = n_detected / (n_pulses * cfg.excitation.rep_period_ns * 1e-9)
    n_mean = ca.mean_photon_number(rate, rep_rate, det_eff)
    n_mean_err = math.sqrt(max(n_detected, 1)) / (n_pulses * det_eff)
    try:
        return ca.efficiency_point(pump_power, n_mean, fit.g2_zero, n_mean_err, fit.g2_zero_err), None
    except ModelDomainError as exc:
        logger.warning("P=%g: %s", pump_power, exc)
        point = ca.EfficiencyPoint(pump_power, n_mean, fit.g2_zero, math.nan, n_mean_err,
                                   fit.g2_zero_err, math.nan)
        return point, str(exc)


def new_manifest(cfg, command):
    return data_io.RunManifest(config_hash=config_hash(cfg), toolkit_version=TOOLKIT_VERSION,
                               command=command)


def finish(cfg, manifest, out_dir, paths):
    """Write config_used.yaml and manifest.json listing every output of the run."""
    paths = list(paths) + [dump_config(cfg, out_dir / 'config_used.yaml')]
    for path in paths:
        manifest.add_output(path, out_dir)
    manifest_path = manifest.write(out_dir / 'manifest.json')
    for path in paths:
        print(f"✅ Saved: {path}")
    print(f"✅ Manifest: {manifest_path}")


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(cfg, args):
    banner("SIMULATE: EMISSION STREAM AND DETECTION RECORDS")
    out_dir = Path(cfg.output_dir)
    manifest = new_manifest(cfg, 'simulate')

    with stage('simulate'):
        stream, records = simulate_records(cfg, threads=args.threads)
    summary = stream_summary(stream)
    n_pulses = cfg.excitation.n_pulses
    summary.update({
        'pump_power_uw': cfg.excitation.pump_power_uw,
        'detected': len(records),
        'detected_d1': len(records.d1),
        'detected_d2': len(records.d2),
        'count_rate_hz': count_rate(records, stream.duration),
        'expected_detected': float(np.sum(event_transmission(stream, cfg.channel_efficiencies()))),
        'seed': cfg.seed,
        'config_hash': manifest.config_hash,
    })
    print(f"✓ {summary['events']} emission events over {n_pulses} pulses "
          f"({summary['qd_events']} QD line, {summary['background_events']} background)")
    print(f"✓ {summary['detected']} detections (expected {summary['expected_detected']:.1f})")

    paths = [
        data_io.write_stream(stream, out_dir / 'emission_stream.csv'),
        data_io.write_records(records, out_dir / 'detection_records.csv'),
        data_io.write_json(summary, out_dir / 'simulate_summary.json'),
    ]
    finish(cfg, manifest, out_dir, paths)
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def _input_kind(path):
    path = Path(path)
    try:
        with open(path, encoding='utf-8') as fh:
            header = fh.readline().strip()
    except FileNotFoundError:
        raise DataFormatError(path, None, "file not found") from None
    if header == ','.join(data_io.RECORD_COLUMNS):
        return 'records'
    if header == ','.join(data_io.HISTOGRAM_COLUMNS):
        return 'histogram'
    raise DataFormatError(path, 1, f"unrecognized header '{header}'")


def cmd_analyze(cfg, args):
    banner("ANALYZE: CORRELATION HISTOGRAM FIT")
    out_dir = Path(cfg.output_dir)
    manifest = new_manifest(cfg, 'analyze')
    manifest.add_input(args.input)
    paths = []

    with stage('analyze'):
        kind = _input_kind(args.input)
        n_pulses = args.pulses if args.pulses is not None else cfg.excitation.n_pulses
        if kind == 'records':
            records = data_io.read_records(args.input)
            hist = histogram_from_records(cfg, records, n_pulses)
            print(f"✓ {len(records)} records -> {hist.total} pairs in {len(hist.counts)} bins")
            hist_path = data_io.write_histogram(hist, out_dir / 'correlation_histogram.csv', cfg.seed)
            paths += [hist_path, data_io.histogram_sidecar_path(hist_path)]
        else:
            records = None
            hist = data_io.read_histogram(args.input)
            print(f"✓ Histogram loaded: {hist.total} counts in {len(hist.counts)} bins")

        fit, model = fit_histogram(cfg, hist)
        print(f"✓ g2(0) = {fit.g2_zero:.4f} ± {fit.g2_zero_err:.4f} (χ²/dof = {fit.chi2_per_dof:.3f})")
        if fit.clamped:
            print("⚠ Central peak area was negative and has been clamped to zero")

        report = {
            'input': str(args.input),
            'seed': cfg.seed,
            'config_hash': manifest.config_hash,
            'histogram': {'bin_width': hist.bin_width, 'window': hist.window,
                          'mode': hist.mode.value, 'total': hist.total},
            'peak_fit': fit.to_dict(),
            'multiphoton_suppression': ca.multiphoton_suppression(fit.g2_zero),
        }
        if records is not None:
            point, note = efficiency_from_counts(cfg, len(records), n_pulses,
                                                 cfg.excitation.pump_power_uw, fit)
            report['n_mean'] = point.n_mean
            report['multiphoton_bound'] = ca.multiphoton_bound(point.n_mean, point.g2_zero)
            if note is None:
                report['efficiency'] = point.to_dict()
                print(f"✓ <n> = {point.n_mean:.4f}, η = {point.eta:.4f} ± {point.eta_err:.4f}")
            else:
                report['efficiency'] = None
                report['efficiency_note'] = note
                print(f"✓ <n> = {point.n_mean:.4f}")
                print(f"⚠ Efficiency not reported: {note}")

        if args.spectrum:
            manifest.add_input(args.spectrum)
            lorentz = ca.fit_lorentzian(data_io.read_spectrum(args.spectrum))
            report['cavity_mode'] = lorentz.to_dict()
            print(f"✓ Cavity mode at {lorentz.center_nm:.3f} nm, Q = {lorentz.q:.0f} ± {lorentz.q_err:.0f}")

    paths.append(data_io.write_fit_curve(hist, model, out_dir / 'fit_curve.csv'))
    paths.append(data_io.write_json(report, out_dir / 'analysis_report.json'))
    finish(cfg, manifest, out_dir, paths)
    return EXIT_OK


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

def run_power_point(cfg, index, power):
    """Simulate and analyze one pump power; returns a result dict."""
    tag = f"P={power:g}"
    with stage(f"simulate[{tag}]"):
        stream, records = simulate_records(cfg, pump_power=power, seeds=point_seeds(cfg.seed, index))
        stats = pulse_photon_statistics(stream)
    with stage(f"analyze[{tag}]"):
        n_pulses = cfg.excitation.n_pulses
        hist = histogram_from_records(cfg, records, n_pulses)
        fit, model = fit_histogram(cfg, hist)
        point, note = efficiency_from_counts(cfg, len(records), n_pulses, power, fit)

    channel = cfg.channel
    eta_true = None
    if cfg.excitation.source == 'quantum_dot':
        eta_true = excitation_probability(power, cfg.excitation.p_sat_uw) * channel.beta * channel.eta_extract
    logger.info("P=%g: g2=%.4f eta=%.4f", power, point.g2_zero, point.eta)
    return {
        'index': index,
        'pump_power_uw': power,
        'detected': len(records),
        'n_mean': point.n_mean,
        'n_mean_err': point.n_mean_err,
        'g2_zero': point.g2_zero,
        'g2_zero_err': point.g2_zero_err,
        'eta': point.eta,
        'eta_err': point.eta_err,
        'eta_note': note,
        'eta_true': eta_true,
        'p_multi': stats['p_multi'],
        'multiphoton_bound': ca.multiphoton_bound(stats['n_mean'], stats['g2_pair']),
        'g2_pair': stats['g2_pair'],
        'peak_fit': fit.to_dict(),
        '_point': point,
        '_hist': hist,
        '_model': model,
    }


def cmd_pipeline(cfg, args):
    banner("PIPELINE: EFFICIENCY VERSUS PUMP POWER")
    out_dir = Path(cfg.output_dir)
    manifest = new_manifest(cfg, 'pipeline')
    powers = [float(p) for p in (args.powers if args.powers else cfg.excitation.powers_uw)]
    print(f"✓ {len(powers)} power points, {cfg.excitation.n_pulses} pulses each, "
          f"{args.threads} thread(s)")

    if args.threads > 1 and len(powers) > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            futures = [pool.submit(run_power_point, cfg, i, p) for i, p in enumerate(powers)]
            results = [f.result() for f in futures]
    else:
        results = [run_power_point(cfg, i, p) for i, p in enumerate(powers)]

    paths = []
    for res in results:
        eta = "undefined" if res['eta_note'] else f"{res['eta']:.4f} ± {res['eta_err']:.4f}"
        print(f"  P = {res['pump_power_uw']:8.3f} µW   g2(0) = {res['g2_zero']:.4f} ± "
              f"{res['g2_zero_err']:.4f}   η = {eta}")
        paths.append(data_io.write_fit_curve(
            res['_hist'], res['_model'], out_dir / f"power_{res['index']:02d}_fit_curve.csv"))

    points = [res['_point'] for res in results if res['eta_note'] is None]
    excluded = len(results) - len(points)
    if excluded:
        print(f"⚠ {excluded} power point(s) with g2(0) > 1 left out of the saturation fit")
    if len({p.pump_power for p in points}) >= 3:
        with stage('saturation'):
            sat = ca.fit_saturation(points)
        saturation = sat.to_dict()
        note = "" if sat.identifiable else "  (P_sat not identifiable)"
        print(f"✓ Saturation fit: η_max = {sat.eta_max:.4f} ± {sat.eta_max_err:.4f}, "
              f"P_sat = {sat.p_sat:.3f} ± {sat.p_sat_err:.3f} µW{note}")
        saturation['eta_after_lens'] = ca.efficiency_after_lens(sat.eta_max, cfg.channel.lens)
    else:
        usable = len({p.pump_power for p in points})
        saturation = {'skipped': "saturation fit needs at least 3 distinct powers with "
                                 f"g2(0) <= 1, got {usable}"}
        print(f"⚠ Saturation fit skipped: {saturation['skipped']}")

    with stage('cavity'):
        c, e = cfg.cavity, cfg.emitter
        cavity = ca.cavity_metrics(e.tau_off_ns, e.tau_on_ns, c.q_post, c.q_planar, e.gamma_c_ratio,
                                   c.tau_off_err_ns, c.tau_on_err_ns, c.q_post_err, c.q_planar_err,
                                   q_predicted=c.q_predicted)
    print(f"✓ Cavity: F_p = {cavity.purcell:.4f}, β = {cavity.beta:.4f}, "
          f"η_extract = {cavity.eta_extract:.5f}, expected η = {cavity.eta_expected:.5f}")

    report = {
        'config_hash': manifest.config_hash,
        'seed': cfg.seed,
        'n_pulses': cfg.excitation.n_pulses,
        'p_sat_uw': cfg.excitation.p_sat_uw,
        'powers': [{k: v for k, v in res.items() if not k.startswith('_')} for res in results],
        'saturation': saturation,
        'cavity': cavity.to_dict(),
    }
    table = pd.DataFrame([{k: res[k] for k in ('pump_power_uw', 'n_mean', 'g2_zero',
                                                       'g2_zero_err', 'eta', 'eta_err')}
                                  for res in results])
    paths.append(data_io.write_table(table, out_dir / 'efficiency_vs_power.csv'))
    paths.append(data_io.write_json(report, out_dir / 'pipeline_report.json'))
    finish(cfg, manifest, out_dir, paths)
    return EXIT_OK


# ---------------------------------------------------------------------------
# optics
# ---------------------------------------------------------------------------

def cmd_optics(cfg, args):
    banner("OPTICS: GAUSSIAN-BEAM COLLECTION ESTIMATE")
    out_dir = Path(cfg.output_dir)
    manifest = new_manifest(cfg, 'optics')
    o = cfg.optics
    wavelength = cfg.wavelength_um()
    paths = []

    with stage('optics'):
        if o.waist_um is not None:
            beam = cfg.gaussian_beam()
            divergence = beam_optics.beam_divergence(beam)
            report = {'waist_um': beam.waist_w0, 'divergence_rad': divergence.value,
                      'warnings': list(divergence.warnings)}
            theta = min(divergence.value, math.pi / 2 * (1 - 1e-12))
            if o.lens_half_angle_rad is not None:
                coll = beam_optics.lens_collection_fraction(theta, o.lens_half_angle_rad)
                report['collection_fraction'] = coll.value
                report['warnings'] += list(coll.warnings)
            if args.calibrate and o.calibrate_target is not None:
                implied = beam_optics.calibrate_lens_half_angle(theta, o.calibrate_target)
                report['implied_lens_half_angle_rad'] = implied.value
                report['implied_numerical_aperture'] = beam_optics.numerical_aperture(implied.value)
        else:
            report = beam_optics.optics_summary(
                o.core_radius_um, o.n_core, o.n_clad, wavelength, o.medium_index,
                lens_half_angle=o.lens_half_angle_rad,
                calibrate_target=o.calibrate_target if args.calibrate else None)
        print(f"✓ Waist w0 = {report['waist_um']:.5f} µm, divergence θ = {report['divergence_rad']:.4f} rad")
        if 'collection_fraction' in report:
            print(f"✓ Lens collection fraction = {report['collection_fraction']:.4f}")
        if 'implied_lens_half_angle_rad' in report:
            print(f"✓ Implied lens half-angle = {report['implied_lens_half_angle_rad']:.4f} rad "
                  f"(NA = {report['implied_numerical_aperture']:.3f})")
        for warning in report['warnings']:
            print(f"⚠ {warning}")

    near_field = args.near_field or o.near_field
    if near_field:
        manifest.add_input(near_field)
        with stage('far field'):
            grid = data_io.read_near_field(near_field)
            pattern = beam_optics.far_field_transform(grid, wavelength, o.zero_pad)
        report['far_field'] = {
            'divergence_rad': beam_optics.far_field_divergence(pattern),
            'near_field_power': pattern.near_field_power,
            'propagating_power': pattern.propagating_power,
            'evanescent_power': pattern.evanescent_power,
        }
        print(f"✓ Far-field divergence = {report['far_field']['divergence_rad']:.4f} rad")
        paths.append(data_io.write_far_field(pattern, out_dir / 'far_field.csv'))

    report['config_hash'] = manifest.config_hash
    paths.append(data_io.write_json(report, out_dir / 'optics_report.json'))
    finish(cfg, manifest, out_dir, paths)
    return EXIT_OK


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(cfg, args):
    banner("REPORT: FIGURES AND SUMMARY TABLE")
    import report_figures

    run_dir = Path(args.run_dir or cfg.output_dir)
    with stage('report'):
        report_figures.make_report(run_dir)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help="YAML config (default: bundled micropost defaults)")
    common.add_argument('--seed', type=int, help="override the config seed")
    common.add_argument('--out', help="output directory (default: config output_dir)")
    common.add_argument('--threads', type=int, default=1, help="worker threads")
    common.add_argument('--verbose', '-v', action='store_true', help="debug logging")

    parser = argparse.ArgumentParser(
        prog='photon_toolkit',
        description="Simulate and analyze a pulsed quantum-dot micropost single-photon source")
    sub = parser.add_subparsers(dest='command', required=True)

    sub.add_parser('simulate', parents=[common], help="emission stream and detection records")

    p = sub.add_parser('analyze', parents=[common], help="fit g2(0) from records or a histogram")
    p.add_argument('input', help="detection records CSV or histogram CSV")
    p.add_argument('--pulses', type=int, help="pulses covered by the records (default: config)")
    p.add_argument('--spectrum', help="spectrum CSV (wavelength_nm,intensity) for a Q fit")

    p = sub.add_parser('pipeline', parents=[common], help="efficiency versus pump power")
    p.add_argument('--powers', type=float, nargs='+', help="pump powers in µW (default: config)")

    p = sub.add_parser('optics', parents=[common], help="Gaussian-beam and far-field estimates")
    p.add_argument('--near-field', help="near-field grid file (.csv or binary)")
    p.add_argument('--calibrate', action='store_true',
                   help="solve for the lens half-angle reproducing optics.calibrate_target")

    p = sub.add_parser('report', parents=[common], help="figures for a pipeline run")
    p.add_argument('--run-dir', help="run directory (default: output directory)")
    return parser


COMMANDS = {
    'simulate': cmd_simulate,
    'analyze': cmd_analyze,
    'pipeline': cmd_pipeline,
    'optics': cmd_optics,
    'report': cmd_report,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format='%(levelname)s %(name)s: %(message)s')
    start = time.time()
    try:
        with stage('config'):
            cfg = apply_overrides(load_config(args.config), seed=args.seed, output_dir=args.out)
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
        code = COMMANDS[args.command](cfg, args)
    except ToolkitError as exc:
        print(f"❌ {getattr(exc, 'stage', args.command)}: {exc}", file=sys.stderr)
        if getattr(exc, 'diagnostics', None):
            print(f"   diagnostics: {exc.diagnostics}", file=sys.stderr)
        return exc.exit_code
    print(f"\n✅ {args.command} completed in {time.time() - start:.1f} s")
    return code


if __name__ == '__main__':
    sys.exit(main())
