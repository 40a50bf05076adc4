"""
Readers and writers for every file the toolkit produces or consumes.

CSV files are written with fixed float formats and '\\n' line endings so
that equal data give byte-identical files. Readers report the 1-based line
number of the first malformed row.
"""

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pandas as pd

from beam_optics import FieldGrid
from correlation_analysis import SpectrumSample
from detection_chain import CorrelationHistogram, DetectionRecords, HistogramMode
from source_model import ORIGIN_NAMES, POLARIZATION_NAMES
from toolkit_errors import DataFormatError, OutputError

STREAM_COLUMNS = ['pulse_index', 'time_ns', 'origin', 'polarization']
RECORD_COLUMNS = ['detector', 'time_ns']
HISTOGRAM_COLUMNS = ['bin_center_ns', 'counts']
SPECTRUM_COLUMNS = ['wavelength_nm', 'intensity']
FAR_FIELD_COLUMNS = ['kx_over_k', 'ky_over_k', 'intensity']
NEAR_FIELD_HEADER = ['nx', 'ny', 'dx_um', 'dy_um']

NEAR_FIELD_MAGIC = b'NFG1'
NEAR_FIELD_HEADER_DTYPE = np.dtype([('magic', 'S4'), ('nx', '<u4'), ('ny', '<u4'),
                                    ('dx', '<f8'), ('dy', '<f8')])

TIME_FORMAT = '%.6f'


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _ensure_parent(path):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"cannot create output directory {path.parent}: {exc.strerror}") from exc
    return path


def write_table(df, path, float_format='%.10g'):
    path = _ensure_parent(path)
    try:
        df.to_csv(path, index=False, float_format=float_format, lineterminator='\n')
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror}") from exc
    return path


def _read_frame(path, columns, numeric, skiprows=None, first_line=2, nrows=None):
    """Read a CSV with an exact header; numeric columns must parse on every row."""
    path = Path(path)
    if not path.exists():
        raise DataFormatError(path, None, "file not found")
    try:
        df = pd.read_csv(path, skiprows=skiprows, nrows=nrows, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise DataFormatError(path, first_line - 1, "file is empty, expected header "
                              + ','.join(columns)) from None
    except pd.errors.ParserError as exc:
        match = re.search(r'line (\d+)', str(exc))
        line = int(match.group(1)) + (first_line - 2) if match else None
        raise DataFormatError(path, line, "wrong number of fields") from None
    if list(df.columns) != columns:
        raise DataFormatError(path, first_line - 1,
                              f"expected header {','.join(columns)}, got {','.join(df.columns)}")
    for col in numeric:
        values = pd.to_numeric(df[col].str.strip(), errors='coerce')
        bad = np.flatnonzero(values.isna().to_numpy())
        if len(bad):
            row = int(bad[0])
            raise DataFormatError(path, row + first_line,
                                  f"column '{col}': cannot parse '{df[col].iloc[row]}' as a number")
        df[col] = values
    return df


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    if hasattr(obj, 'value'):
        return obj.value
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _clean_floats(obj):
    if isinstance(obj, float) and not np.isfinite(obj):
        return None if np.isnan(obj) else ('inf' if obj > 0 else '-inf')
    if isinstance(obj, dict):
        return {k: _clean_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean_floats(v) for v in obj]
    return obj


def write_json(payload, path):
    path = _ensure_parent(path)
    payload = json.loads(json.dumps(payload, default=_json_default))
    try:
        path.write_text(json.dumps(_clean_floats(payload), indent=2) + '\n', encoding='utf-8')
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror}") from exc
    return path


def read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding='utf-8'))
    except FileNotFoundError:
        raise DataFormatError(path, None, "file not found") from None
    except json.JSONDecodeError as exc:
        raise DataFormatError(path, exc.lineno, exc.msg) from None


# ---------------------------------------------------------------------------
# Emission streams and detection records
# ---------------------------------------------------------------------------

def write_stream(stream, path):
    """Columns pulse_index, time_ns (offset from the pulse), origin, polarization."""
    df = pd.DataFrame({
        'pulse_index': stream.pulse_index,
        'time_ns': stream.time_offset,
        'origin': ORIGIN_NAMES[stream.origin.astype(int)],
        'polarization': POLARIZATION_NAMES[stream.polarization.astype(int)],
    }, columns=STREAM_COLUMNS)
    return write_table(df, path, TIME_FORMAT)


def read_stream_table(path):
    df = _read_frame(path, STREAM_COLUMNS, numeric=['pulse_index', 'time_ns'])
    for col, names in (('origin', ORIGIN_NAMES), ('polarization', POLARIZATION_NAMES)):
        bad = np.flatnonzero(~df[col].isin(names).to_numpy())
        if len(bad):
            raise DataFormatError(path, int(bad[0]) + 2, f"unknown {col} '{df[col].iloc[bad[0]]}'")
    return df


def write_records(records, path):
    df = pd.DataFrame({
        'detector': ['D1'] * len(records.d1) + ['D2'] * len(records.d2),
        'time_ns': np.concatenate([records.d1, records.d2]),
    }, columns=RECORD_COLUMNS)
    return write_table(df, path, TIME_FORMAT)


def read_records(path):
    df = _read_frame(path, RECORD_COLUMNS, numeric=['time_ns'])
    bad = np.flatnonzero(~df['detector'].isin(['D1', 'D2']).to_numpy())
    if len(bad):
        raise DataFormatError(path, int(bad[0]) + 2, f"unknown detector '{df['detector'].iloc[bad[0]]}'")
    times = df['time_ns'].to_numpy(dtype=float)
    is_d1 = (df['detector'] == 'D1').to_numpy()
    return DetectionRecords(np.sort(times[is_d1]), np.sort(times[~is_d1]))


# ---------------------------------------------------------------------------
# Correlation histograms
# ---------------------------------------------------------------------------

def histogram_sidecar_path(path):
    return Path(path).with_suffix('.json')


def write_histogram(hist, path, seed=None):
    """
    CSV bin_center_ns,counts plus a JSON sidecar with the binning metadata.

    Integral counts are written as integers, anything else (merged or
    rescaled histograms) at full float precision.
    """
    counts = np.asarray(hist.counts)
    if np.all(counts == np.rint(counts)):
        counts = counts.astype(np.int64)
    else:
        counts = np.char.mod('%.17g', counts.astype(float))
    df = pd.DataFrame({'bin_center_ns': hist.centers, 'counts': counts}, columns=HISTOGRAM_COLUMNS)
    path = write_table(df, path, TIME_FORMAT)
    meta = {'bin_width': hist.bin_width, 'window': hist.window, 'mode': hist.mode.value,
            'total_pulses': int(hist.total_pulses), 'seed': seed}
    meta.update({k: v for k, v in hist.metadata.items() if k not in meta})
    write_json(meta, histogram_sidecar_path(path))
    return path


def read_histogram(path):
    """Read a histogram CSV; binning comes from the sidecar, or from the centers if absent."""
    df = _read_frame(path, HISTOGRAM_COLUMNS, numeric=HISTOGRAM_COLUMNS)
    centers = df['bin_center_ns'].to_numpy(dtype=float)
    counts = df['counts'].to_numpy(dtype=float)
    if len(centers) < 2:
        raise DataFormatError(path, len(centers) + 1, "histogram needs at least 2 bins")
    if np.any(counts < 0):
        raise DataFormatError(path, int(np.flatnonzero(counts < 0)[0]) + 2, "negative count")
    sidecar = histogram_sidecar_path(path)
    if sidecar.exists():
        meta = read_json(sidecar)
        bin_width, window = float(meta['bin_width']), float(meta['window'])
        mode = HistogramMode(meta.get('mode', HistogramMode.ALL_PAIRS.value))
        total_pulses = int(meta.get('total_pulses') or 0)
        extra = {k: v for k, v in meta.items()
                 if k not in ('bin_width', 'window', 'mode', 'total_pulses')}
    else:
        bin_width = float(centers[1] - centers[0])
        window = float(-(centers[0] - 0.5 * bin_width))
        mode, total_pulses, extra = HistogramMode.ALL_PAIRS, 0, {}
    if np.all(counts == np.round(counts)):
        counts = counts.astype(np.int64)
    return CorrelationHistogram(bin_width, window, counts, mode, total_pulses, extra)


def write_fit_curve(hist, model_counts, path):
    df = pd.DataFrame({'bin_center_ns': hist.centers, 'counts': hist.counts,
                       'model': model_counts})
    return write_table(df, path)


def read_fit_curve(path):
    return _read_frame(path, ['bin_center_ns', 'counts', 'model'],
                       numeric=['bin_center_ns', 'counts', 'model'])


# ---------------------------------------------------------------------------
# Spectra and far fields
# ---------------------------------------------------------------------------

def read_spectrum(path):
    df = _read_frame(path, SPECTRUM_COLUMNS, numeric=SPECTRUM_COLUMNS)
    return [SpectrumSample(float(w), float(i))
            for w, i in zip(df['wavelength_nm'], df['intensity'])]


def write_spectrum(samples, path):
    df = pd.DataFrame({'wavelength_nm': [s.wavelength for s in samples],
                       'intensity': [s.intensity for s in samples]}, columns=SPECTRUM_COLUMNS)
    return write_table(df, path)


def write_far_field(pattern, path):
    """Propagating samples only, as kx_over_k,ky_over_k,intensity."""
    ux, uy = np.meshgrid(pattern.ux, pattern.uy)
    inside = ux ** 2 + uy ** 2 <= 1.0
    df = pd.DataFrame({'kx_over_k': ux[inside], 'ky_over_k': uy[inside],
                       'intensity': pattern.intensity[inside]}, columns=FAR_FIELD_COLUMNS)
    return write_table(df, path)


# ---------------------------------------------------------------------------
# Near-field grids
# ---------------------------------------------------------------------------

def write_near_field_csv(grid, path):
    """
    Line 1: nx,ny,dx_um,dy_um; line 2: their values; line 3: real,imag;
    then nx*ny rows of samples in row-major order (x fastest).
    """
    path = _ensure_parent(path)
    flat = grid.amplitudes.ravel()
    lines = [','.join(NEAR_FIELD_HEADER), f"{grid.nx},{grid.ny},{float(grid.dx)!r},{float(grid.dy)!r}", 'real,imag']
    lines += [f"{float(z.real)!r},{float(z.imag)!r}" for z in flat]
    try:
        path.write_text('\n'.join(lines) + '\n', encoding='utf-8')
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror}") from exc
    return path


def write_near_field_binary(grid, path):
    """
    Little-endian layout: 4-byte magic b'NFG1', uint32 nx, uint32 ny,
    float64 dx_um, float64 dy_um, then nx*ny (real, imag) float64 pairs,
    row-major with x fastest.
    """
    path = _ensure_parent(path)
    header = np.array([(NEAR_FIELD_MAGIC, grid.nx, grid.ny, grid.dx, grid.dy)],
                      dtype=NEAR_FIELD_HEADER_DTYPE)
    samples = np.empty(2 * grid.nx * grid.ny, dtype='<f8')
    flat = grid.amplitudes.ravel()
    samples[0::2], samples[1::2] = flat.real, flat.imag
    try:
        path.write_bytes(header.tobytes() + samples.tobytes())
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror}") from exc
    return path


def _make_grid(path, nx, ny, dx, dy, real, imag, line=None):
    try:
        return FieldGrid(int(nx), int(ny), float(dx), float(dy),
                         (np.asarray(real) + 1j * np.asarray(imag)).reshape(int(ny), int(nx)))
    except ValueError as exc:
        raise DataFormatError(path, line, str(exc)) from None


def read_near_field_csv(path):
    header = _read_frame(path, NEAR_FIELD_HEADER, numeric=NEAR_FIELD_HEADER, nrows=1)
    if len(header) < 1:
        raise DataFormatError(path, 2, "missing grid dimensions")
    nx, ny, dx, dy = (header[c].iloc[0] for c in NEAR_FIELD_HEADER)
    samples = _read_frame(path, ['real', 'imag'], numeric=['real', 'imag'],
                          skiprows=2, first_line=4)
    if len(samples) != int(nx) * int(ny):
        raise DataFormatError(path, len(samples) + 4,
                              f"expected {int(nx) * int(ny)} samples, found {len(samples)}")
    return _make_grid(path, nx, ny, dx, dy, samples['real'].to_numpy(float),
                      samples['imag'].to_numpy(float), line=2)


def read_near_field_binary(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise DataFormatError(path, None, "file not found") from None
    size = NEAR_FIELD_HEADER_DTYPE.itemsize
    if len(raw) < size:
        raise DataFormatError(path, None, f"truncated header ({len(raw)} of {size} bytes)")
    header = np.frombuffer(raw[:size], dtype=NEAR_FIELD_HEADER_DTYPE)[0]
    if bytes(header['magic']) != NEAR_FIELD_MAGIC:
        raise DataFormatError(path, None, "bad magic, not a near-field grid file")
    nx, ny = int(header['nx']), int(header['ny'])
    expected = size + 16 * nx * ny
    if len(raw) != expected:
        raise DataFormatError(path, None, f"byte {min(len(raw), expected)}: expected {expected} "
                                          f"bytes for a {nx}x{ny} grid, found {len(raw)}")
    samples = np.frombuffer(raw[size:], dtype='<f8')
    return _make_grid(path, nx, ny, header['dx'], header['dy'], samples[0::2], samples[1::2])


def read_near_field(path):
    path = Path(path)
    if path.suffix.lower() == '.csv':
        return read_near_field_csv(path)
    return read_near_field_binary(path)


# ---------------------------------------------------------------------------
# Run manifest
# ---------------------------------------------------------------------------

def sha256_file(path):
    digest = hashlib.sha256()
    with open(path, 'rb') as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def _now():
    return datetime.now(timezone.utc).isoformat(timespec='seconds')


@dataclass
class RunManifest:
    config_hash: str
    toolkit_version: str
    command: str
    started: str = field(default_factory=_now)
    finished: str = None
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)

    def add_input(self, path):
        self.inputs.append(str(path))

    def add_output(self, path, root):
        path = Path(path)
        self.outputs.append({'path': path.relative_to(root).as_posix(),
                             'size': path.stat().st_size,
                             'sha256': sha256_file(path)})

    def write(self, path):
        self.finished = _now()
        return write_json(asdict(self), path)


def verify_manifest(path):
    """Problems found when checking listed outputs against size and checksum (empty if none)."""
    path = Path(path)
    data = read_json(path)
    problems = []
    for entry in data.get('outputs', []):
        target = path.parent / entry['path']
        if not target.exists():
            problems.append(f"missing: {entry['path']}")
        elif target.stat().st_size != entry['size']:
            problems.append(f"size mismatch: {entry['path']}")
        elif sha256_file(target) != entry['sha256']:
            problems.append(f"checksum mismatch: {entry['path']}")
    return problems
