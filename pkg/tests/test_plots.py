import numpy as np

from mcseg.plots import Series, svg_line_plot


def test_svg_output_is_deterministic(tmp_path):
    x = np.linspace(0, 1, 50)
    series = [
        Series(label="a", x=x, y=np.sin(x * 6)),
        Series(label="b", x=x, y=np.cos(x * 6)),
    ]
    svg_line_plot(tmp_path / "p1.svg", series, "title", "x", "y")
    svg_line_plot(tmp_path / "p2.svg", series, "title", "x", "y")
    a = (tmp_path / "p1.svg").read_bytes()
    assert a == (tmp_path / "p2.svg").read_bytes()
    text = a.decode("ascii")
    assert text.startswith("<svg")
    assert "polyline" in text
    assert "title" in text


def test_svg_handles_constant_series(tmp_path):
    series = [Series(label="flat", x=np.arange(5.0), y=np.ones(5))]
    svg_line_plot(tmp_path / "flat.svg", series, "flat", "x", "y")
    assert (tmp_path / "flat.svg").exists()
