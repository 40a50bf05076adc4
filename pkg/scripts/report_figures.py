#!/usr/bin/env python3
"""
Report figures for a finished pipeline run.

Three-panel figure showing:
a) Correlation histogram at the operating power with the fitted model
b) g2(0) versus pump power
c) Single-photon efficiency versus pump power with the saturation fit

Data: pipeline_report.json and power_<idx>_fit_curve.csv in the run directory
"""

import sys
from pathlib import Path

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

sys.path.append(str(Path(__file__).parent))

from correlation_analysis import saturation_model
from data_io import read_fit_curve, read_json, write_table
from device_parameters import QUANTITY_LABELS
from toolkit_errors import DataFormatError

# Configuration
plt.rcParams['font.family'] = 'sans-serif'
plt.rcParams['font.size'] = 10

COLORS = {
    'data': '#4C72B0',      # blue
    'model': '#C44E52',     # red
    'truth': '#55A868',     # green
}

SUMMARY_COLUMNS = ['pump_power_uw', 'n_mean', 'g2_zero', 'g2_zero_err', 'eta', 'eta_err',
                   'eta_true', 'p_multi', 'multiphoton_bound']


def load_run(run_dir):
    report_path = Path(run_dir) / 'pipeline_report.json'
    if not report_path.exists():
        raise DataFormatError(report_path, None, "pipeline report not found; run 'pipeline' first")
    report = read_json(report_path)
    table = pd.DataFrame([{c: p.get(c) for c in SUMMARY_COLUMNS} for p in report['powers']],
                         columns=SUMMARY_COLUMNS).astype(float)
    print(f"✓ Run loaded: {len(table)} power points")
    return report, table


def operating_point(report):
    """Index of the power point closest to P_sat."""
    p_sat = report['p_sat_uw']
    powers = [p['pump_power_uw'] for p in report['powers']]
    return int(np.argmin(np.abs(np.asarray(powers) - p_sat)))


def plot_correlation(ax, curve, title):
    """Panel a) histogram counts with the fitted peak-template model."""
    ax.bar(curve['bin_center_ns'], curve['counts'], width=np.diff(curve['bin_center_ns']).mean(),
           color=COLORS['data'], alpha=0.6, linewidth=0, label='Coincidences')
    ax.plot(curve['bin_center_ns'], curve['model'], color=COLORS['model'], linewidth=1.2,
            label='Peak-template fit')
    ax.set_xlabel('Delay τ (ns)', fontsize=12, fontweight='bold')
    ax.set_ylabel('Counts per bin', fontsize=12, fontweight='bold')
    ax.set_title(title, fontsize=12, fontweight='bold', loc='left', pad=10)
    ax.legend(fontsize=9, frameon=True, framealpha=0.9)
    ax.grid(True, alpha=0.3, linestyle='--', linewidth=0.5)
    ax.set_axisbelow(True)


def plot_g2_vs_power(ax, table):
    """Panel b) g2(0) against pump power."""
    ax.errorbar(table['pump_power_uw'], table['g2_zero'], yerr=table['g2_zero_err'],
                fmt='o', color=COLORS['data'], ecolor='black', capsize=3, markersize=5)
    ax.axhline(1.0, color='gray', linestyle=':', linewidth=1)
    ax.set_xlabel('Pump power (µW)', fontsize=12, fontweight='bold')
    ax.set_ylabel(QUANTITY_LABELS['g2_zero'], fontsize=12, fontweight='bold')
    ax.set_title('b)', fontsize=12, fontweight='bold', loc='left', pad=10)
    ax.set_ylim(bottom=0)
    ax.grid(True, alpha=0.3, linestyle='--', linewidth=0.5)
    ax.set_axisbelow(True)


def plot_efficiency_vs_power(ax, table, saturation):
    """Panel c) efficiency with the saturation fit, when one was made."""
    ax.errorbar(table['pump_power_uw'], table['eta'], yerr=table['eta_err'],
                fmt='o', color=COLORS['data'], ecolor='black', capsize=3, markersize=5,
                label='η = ⟨n⟩√(1−g²(0))')
    if table['eta_true'].notna().all():
        ax.plot(table['pump_power_uw'], table['eta_true'], 'x', color=COLORS['truth'],
                label='Simulated truth')
    if saturation and 'eta_max' in saturation:
        p = np.linspace(0, table['pump_power_uw'].max() * 1.05, 200)
        ax.plot(p, saturation_model(p, saturation['eta_max'], saturation['p_sat']),
                color=COLORS['model'], linewidth=1.5,
                label=f"Saturation fit, η_max = {saturation['eta_max']:.3f}")
    ax.set_xlabel('Pump power (µW)', fontsize=12, fontweight='bold')
    ax.set_ylabel('Efficiency η', fontsize=12, fontweight='bold')
    ax.set_title('c)', fontsize=12, fontweight='bold', loc='left', pad=10)
    ax.set_ylim(bottom=0)
    ax.legend(fontsize=9, frameon=True, framealpha=0.9, loc='lower right')
    ax.grid(True, alpha=0.3, linestyle='--', linewidth=0.5)
    ax.set_axisbelow(True)


def make_report(run_dir):
    """Write the run figure (PNG + PDF) and summary_table.csv; returns the written paths."""
    run_dir = Path(run_dir)
    report, table = load_run(run_dir)
    idx = operating_point(report)
    curve = read_fit_curve(run_dir / f"power_{idx:02d}_fit_curve.csv")

    print("\n🎨 Creating 3-panel figure...")
    fig, (ax1, ax2, ax3) = plt.subplots(1, 3, figsize=(16, 5))
    plot_correlation(ax1, curve, f"a)  P = {report['powers'][idx]['pump_power_uw']:g} µW")
    plot_g2_vs_power(ax2, table)
    plot_efficiency_vs_power(ax3, table, report.get('saturation'))
    plt.tight_layout()

    png_path = run_dir / 'report_figure.png'
    fig.savefig(png_path, dpi=300, bbox_inches='tight', facecolor='white')
    print(f"\n✅ PNG: {png_path}")
    pdf_path = run_dir / 'report_figure.pdf'
    fig.savefig(pdf_path, bbox_inches='tight', facecolor='white')
    print(f"✅ PDF: {pdf_path}")
    plt.close(fig)

    table_path = write_table(table, run_dir / 'summary_table.csv')
    print(f"✅ Table: {table_path}")
    return [png_path, pdf_path, table_path]
