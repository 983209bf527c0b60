"""CSV round-trips, metric-log invariants, sweep table behavior."""

import numpy as np
import pytest

from thriftynet.errors import ConfigurationError, DataError
from thriftynet.metrics import (
    METRIC_COLUMNS,
    MetricLog,
    MetricRow,
    parse_manifest,
    read_csv,
    read_metric_log,
    write_csv,
    write_matrix_csv,
    write_metric_log,
)


def sample_row(epoch=0, **overrides):
    values = dict(epoch=epoch, lr=0.1, train_loss=2.3, train_acc=10.0,
                  test_acc=11.5, lam=3e-4, wall_time_s=1.25)
    values.update(overrides)
    return MetricRow(**values)


class TestMetricLog:
    def test_epochs_strictly_increasing(self):
        log = MetricLog()
        log.append(sample_row(0))
        log.append(sample_row(1))
        with pytest.raises(ConfigurationError):
            log.append(sample_row(1))

    def test_accuracy_range_checked(self):
        log = MetricLog()
        with pytest.raises(ConfigurationError):
            log.append(sample_row(0, test_acc=101.0))

    def test_empty_log_writes_header_only(self, tmp_path):
        path = tmp_path / "empty.csv"
        write_metric_log(MetricLog(), path)
        assert path.read_text() == ",".join(METRIC_COLUMNS) + "\n"

    def test_round_trip_exact(self, tmp_path):
        log = MetricLog()
        log.append(sample_row(0, train_loss=1 / 3, lam=3e-4 * 1.00015 ** 977))
        log.append(sample_row(1, train_loss=0.1 + 0.2))
        path = tmp_path / "log.csv"
        write_metric_log(log, path)
        parsed = read_metric_log(path)
        for row, values in zip(log.rows, parsed):
            assert values == row.values()

    def test_wall_time_not_in_metric_csv(self, tmp_path):
        log = MetricLog()
        log.append(sample_row(0, wall_time_s=123.456))
        path = tmp_path / "log.csv"
        write_metric_log(log, path)
        assert "123.456" not in path.read_text()


class TestCsv:
    def test_floats_survive_reparse(self, tmp_path):
        rows = [[np.pi, 1e-300, 7.0], [1 / 7, 2.5e17, -0.0]]
        path = tmp_path / "vals.csv"
        write_csv(path, ("a", "b", "c"), rows)
        _, parsed = read_csv(path)
        for row, expect in zip(parsed, rows):
            for value, target in zip(row, expect):
                assert abs(value - target) <= 1e-9 * max(1.0, abs(target))

    def test_newline_terminated(self, tmp_path):
        path = tmp_path / "t.csv"
        write_csv(path, ("x",), [[1.0]])
        assert path.read_text().endswith("\n")

    def test_matrix_layout(self, tmp_path):
        matrix = np.arange(12, dtype=np.float32).reshape(3, 4)
        path = tmp_path / "m.csv"
        write_matrix_csv(matrix, path)
        header, rows = read_csv(path)
        assert header == ["t", "c0", "c1", "c2", "c3"]
        assert len(rows) == 3
        np.testing.assert_allclose([r[1:] for r in rows], matrix)

    def test_byte_identical_reruns(self, tmp_path):
        rows = [[1 / 3, 2 / 7], [0.1, 0.2]]
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        write_csv(a, ("u", "v"), rows)
        write_csv(b, ("u", "v"), rows)
        assert a.read_bytes() == b.read_bytes()

    def test_read_empty_rejected(self, tmp_path):
        path = tmp_path / "e.csv"
        path.write_text("")
        with pytest.raises(DataError):
            read_csv(path)


class TestManifest:
    def test_parses_lines(self, tmp_path):
        path = tmp_path / "sweep.txt"
        path.write_text(
            "# comment\n"
            "filters=8 iterations=4 pools=1\n"
            "\n"
            "filters=12, iterations=6, history=2\n"
        )
        entries = parse_manifest(path)
        assert entries == [
            {"filters": "8", "iterations": "4", "pools": "1"},
            {"filters": "12", "iterations": "6", "history": "2"},
        ]

    def test_malformed_token_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("filters 8\n")
        with pytest.raises(DataError):
            parse_manifest(path)
