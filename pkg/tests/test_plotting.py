import numpy as np
import pytest

from smap.plotting import chart_file, moving_average


def test_moving_average_matches_window_loop():
    y = np.random.default_rng(0).normal(size=37)
    want = [float(np.mean(y[max(0, i - 4):i + 1])) for i in range(len(y))]
    assert np.allclose(moving_average(y, 5), want, atol=1e-12)
    assert moving_average([], 3) == []


def test_chart_file_writes_svg(tmp_path):
    pytest.importorskip("matplotlib")
    path = str(tmp_path / "c.svg")
    chart_file(path, {"a": ([1, 2, 3], [1.0, 0.5, 0.2]), "b": ([1, 2, 3], [2.0, 1.0, 0.1])}, "t", "x", "y", log_y=True)
    text = open(path).read()
    assert text.lstrip().startswith("<?xml") and "<svg" in text
