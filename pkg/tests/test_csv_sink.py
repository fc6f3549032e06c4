import pytest

from madformer.infrastructure.csv_sink import CsvSink

COLUMNS = ["step", "loss"]


def _write(sink: CsvSink, steps, keep_through=None) -> None:
    sink.begin(COLUMNS, keep_through=keep_through)
    for step in steps:
        sink.append({"step": step, "loss": step / 10})
    sink.close()


def test_writes_header_and_rows(tmp_path):
    path = tmp_path / "out" / "metrics.csv"

    _write(CsvSink(path), [1, 2])

    assert path.read_text() == "step,loss\n1,0.1\n2,0.2\n"


def test_missing_columns_are_blank(tmp_path):
    sink = CsvSink(tmp_path / "rows.csv")

    sink.begin(COLUMNS)
    sink.append({"step": 3})
    sink.close()

    assert (tmp_path / "rows.csv").read_text() == "step,loss\n3,\n"


def test_keep_through_continues_an_earlier_file(tmp_path):
    path = tmp_path / "metrics.csv"
    _write(CsvSink(path), [1, 2, 3, 4])

    _write(CsvSink(path), [3, 4], keep_through=2)

    assert path.read_text() == "step,loss\n1,0.1\n2,0.2\n3,0.3\n4,0.4\n"


def test_without_keep_through_the_file_starts_over(tmp_path):
    path = tmp_path / "metrics.csv"
    _write(CsvSink(path), [1, 2])

    _write(CsvSink(path), [5])

    assert path.read_text() == "step,loss\n5,0.5\n"


def test_different_header_discards_old_rows(tmp_path):
    path = tmp_path / "metrics.csv"
    path.write_text("epoch,loss\n1,0.1\n")

    _write(CsvSink(path), [], keep_through=10)

    assert path.read_text() == "step,loss\n"


def test_append_before_begin_fails(tmp_path):
    with pytest.raises(RuntimeError):
        CsvSink(tmp_path / "rows.csv").append({"step": 1})
