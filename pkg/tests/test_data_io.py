"""File formats: streams, records, histograms, spectra, near-field grids and manifests."""

import numpy as np
import pytest

import data_io
from beam_optics import circular_aperture_grid, gaussian_field_grid
from correlation_analysis import SpectrumSample
from detection_chain import CorrelationHistogram, DetectionRecords, HistogramMode
from source_model import ExcitationConfig, generate_stream
from toolkit_errors import EXIT_IO, DataFormatError


def test_stream_table_columns(tmp_path, emitter, no_background):
    stream = generate_stream(emitter, ExcitationConfig(n_pulses=2000, rng_seed=5), no_background)
    path = data_io.write_stream(stream, tmp_path / 'stream.csv')
    df = data_io.read_stream_table(path)
    assert list(df.columns) == data_io.STREAM_COLUMNS
    assert len(df) == len(stream)
    np.testing.assert_allclose(df['time_ns'], stream.time_offset, atol=5e-7)
    assert set(df['origin']) <= {'QDLine', 'Background'}


def test_empty_stream_writes_header_only(tmp_path, emitter, no_background):
    stream = generate_stream(emitter, ExcitationConfig(pump_power=0.0, n_pulses=1), no_background)
    path = data_io.write_stream(stream, tmp_path / 'stream.csv')
    assert path.read_text() == 'pulse_index,time_ns,origin,polarization\n'


def test_records_split_by_detector(tmp_path):
    records = DetectionRecords(np.array([1.5, 20.25]), np.array([3.0]))
    path = data_io.write_records(records, tmp_path / 'records.csv')
    back = data_io.read_records(path)
    np.testing.assert_array_equal(back.d1, [1.5, 20.25])
    np.testing.assert_array_equal(back.d2, [3.0])


def test_malformed_row_reports_line(tmp_path):
    path = tmp_path / 'records.csv'
    path.write_text('detector,time_ns\nD1,1.0\nD2,abc\n', encoding='utf-8')
    with pytest.raises(DataFormatError) as excinfo:
        data_io.read_records(path)
    assert excinfo.value.line == 3
    assert excinfo.value.exit_code == EXIT_IO


def test_unknown_detector_label(tmp_path):
    path = tmp_path / 'records.csv'
    path.write_text('detector,time_ns\nD1,1.0\nD3,2.0\n', encoding='utf-8')
    with pytest.raises(DataFormatError, match='D3') as excinfo:
        data_io.read_records(path)
    assert excinfo.value.line == 3


def test_wrong_header_is_line_one(tmp_path):
    path = tmp_path / 'spectrum.csv'
    path.write_text('lambda,counts\n855.0,1.0\n', encoding='utf-8')
    with pytest.raises(DataFormatError, match='expected header') as excinfo:
        data_io.read_spectrum(path)
    assert excinfo.value.line == 1


def test_missing_file(tmp_path):
    with pytest.raises(DataFormatError, match='not found'):
        data_io.read_histogram(tmp_path / 'absent.csv')


def test_histogram_with_sidecar(tmp_path):
    counts = np.arange(832) % 7
    hist = CorrelationHistogram(0.25, 104.0, counts, HistogramMode.START_STOP, total_pulses=1000)
    path = data_io.write_histogram(hist, tmp_path / 'hist.csv', seed=3)
    assert data_io.histogram_sidecar_path(path).exists()
    back = data_io.read_histogram(path)
    assert back.bin_width == 0.25 and back.window == 104.0
    assert back.mode is HistogramMode.START_STOP
    assert back.total_pulses == 1000
    assert back.metadata['seed'] == 3
    np.testing.assert_array_equal(back.counts, counts)


def test_fractional_histogram_counts_survive_a_round_trip(tmp_path):
    counts = np.full(832, 2.5)
    counts[::3] = 1.0 / 3.0
    hist = CorrelationHistogram(0.25, 104.0, counts)
    path = data_io.write_histogram(hist, tmp_path / 'hist.csv')
    np.testing.assert_allclose(data_io.read_histogram(path).counts, counts, rtol=1e-15)

    hist = CorrelationHistogram(0.25, 104.0, np.full(832, 4.0))
    path = data_io.write_histogram(hist, tmp_path / 'integral.csv')
    assert path.read_text().splitlines()[1].endswith(',4')


def test_histogram_without_sidecar_infers_binning(tmp_path):
    path = tmp_path / 'hist.csv'
    centers = np.arange(-9.5, 10.0, 1.0)
    rows = ''.join(f'{c},{i}\n' for i, c in enumerate(centers))
    path.write_text('bin_center_ns,counts\n' + rows, encoding='utf-8')
    hist = data_io.read_histogram(path)
    assert hist.bin_width == pytest.approx(1.0)
    assert hist.window == pytest.approx(10.0)
    assert len(hist.counts) == 20


def test_negative_count_is_rejected(tmp_path):
    path = tmp_path / 'hist.csv'
    path.write_text('bin_center_ns,counts\n-0.5,1\n0.5,-2\n', encoding='utf-8')
    with pytest.raises(DataFormatError) as excinfo:
        data_io.read_histogram(path)
    assert excinfo.value.line == 3


def test_spectrum_file(tmp_path):
    samples = [SpectrumSample(850.0 + 0.5 * i, float(i)) for i in range(5)]
    back = data_io.read_spectrum(data_io.write_spectrum(samples, tmp_path / 'spectrum.csv'))
    assert [s.wavelength for s in back] == [s.wavelength for s in samples]
    assert [s.intensity for s in back] == [s.intensity for s in samples]


@pytest.mark.parametrize('writer, name', [
    (data_io.write_near_field_csv, 'grid.csv'),
    (data_io.write_near_field_binary, 'grid.bin'),
])
def test_near_field_files(tmp_path, writer, name):
    grid = gaussian_field_grid(6, 4, 0.1, 0.2, waist=0.3)
    grid.amplitudes = grid.amplitudes * np.exp(0.3j)
    back = data_io.read_near_field(writer(grid, tmp_path / name))
    assert (back.nx, back.ny) == (6, 4)
    assert back.dx == pytest.approx(0.1, rel=1e-15) and back.dy == pytest.approx(0.2, rel=1e-15)
    np.testing.assert_allclose(back.amplitudes, grid.amplitudes, rtol=1e-15, atol=0)


def test_binary_near_field_layout(tmp_path):
    grid = circular_aperture_grid(3, 2, 0.1, 0.1, 0.5)
    raw = data_io.write_near_field_binary(grid, tmp_path / 'grid.bin').read_bytes()
    assert raw[:4] == b'NFG1'
    assert len(raw) == 28 + 16 * 6


def test_truncated_binary_near_field(tmp_path):
    grid = gaussian_field_grid(4, 4, 0.1, 0.1, waist=0.2)
    path = data_io.write_near_field_binary(grid, tmp_path / 'grid.bin')
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(DataFormatError, match='expected'):
        data_io.read_near_field(path)
    path.write_bytes(b'XXXX' + bytes(24))
    with pytest.raises(DataFormatError, match='magic'):
        data_io.read_near_field(path)


def test_near_field_csv_sample_count(tmp_path):
    path = tmp_path / 'grid.csv'
    path.write_text('nx,ny,dx_um,dy_um\n2,2,0.1,0.1\nreal,imag\n1,0\n1,0\n1,0\n', encoding='utf-8')
    with pytest.raises(DataFormatError, match='expected 4 samples'):
        data_io.read_near_field(path)


def test_json_handles_infinities_and_numpy(tmp_path):
    path = data_io.write_json({'err': float('inf'), 'x': np.float64(1.5), 'a': np.arange(3),
                               'mode': HistogramMode.ALL_PAIRS, 'nan': float('nan')},
                              tmp_path / 'report.json')
    back = data_io.read_json(path)
    assert back == {'err': 'inf', 'x': 1.5, 'a': [0, 1, 2], 'mode': 'AllPairs', 'nan': None}


def test_manifest_detects_modified_output(tmp_path):
    out = tmp_path / 'out.csv'
    out.write_text('a\n1\n', encoding='utf-8')
    manifest = data_io.RunManifest('abc', '1.0.0', 'simulate')
    manifest.add_output(out, tmp_path)
    manifest.write(tmp_path / 'manifest.json')
    assert data_io.verify_manifest(tmp_path / 'manifest.json') == []
    out.write_text('a\n2\n', encoding='utf-8')
    assert data_io.verify_manifest(tmp_path / 'manifest.json') == ['checksum mismatch: out.csv']
    out.unlink()
    assert data_io.verify_manifest(tmp_path / 'manifest.json') == ['missing: out.csv']
