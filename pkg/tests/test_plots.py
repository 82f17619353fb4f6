import re

import pytest

from multiloss.plots import Series, emit_plots, line_plot_svg


def test_empty_series_rejected():
    with pytest.raises(ValueError):
        line_plot_svg([])


def test_one_series_one_polyline():
    svg = line_plot_svg([Series("acc", [1, 2, 3, 4], [0.9, 0.92, 0.93, 0.95])], "t", "M", "acc")
    polylines = re.findall(r'<polyline[^>]*points="([^"]*)"', svg)
    assert len(polylines) == 1
    assert len(polylines[0].split()) == 4
    assert "http" not in svg.replace("http://www.w3.org/2000/svg", "")


def test_identical_inputs_identical_bytes(tmp_path):
    s = [Series("a", [1, 2], [0.5, 0.6], [0.01, 0.02]), Series("b", [1, 2], [0.4, 0.7])]
    emit_plots(s, tmp_path / "a.svg", title="x")
    emit_plots(s, tmp_path / "b.svg", title="x")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()


def test_mismatched_lengths():
    with pytest.raises(ValueError):
        line_plot_svg([Series("a", [1, 2], [0.5])])
