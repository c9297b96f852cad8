import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ndae.data import (NoiseSpec, Trajectory, TrajectoryFormatError, add_noise, meta_path, mse,
                       noise_variance, read_csv, read_report, write_csv, write_report,
                       write_svg_lineplot)
from ndae.reference import simulate_manifold, simulate_network, ManifoldSpec

SVG = "{http://www.w3.org/2000/svg}"


def make(n=5, nx=2, ny=1, nu=1, seed=0, dt=0.5):
    rng = np.random.default_rng(seed)
    return Trajectory(np.arange(n) * dt, rng.normal(size=(n, nx)), rng.normal(size=(n, ny)),
                      rng.normal(size=(n, nu)), {"system": "test"})


# -- Trajectory ------------------------------------------------------------------------

def test_trajectory_shapes_and_dt():
    t = make()
    assert len(t) == 5 and (t.n_x, t.n_y, t.n_u) == (2, 1, 1)
    assert t.dt == 0.5


def test_trajectory_rejects_row_mismatch():
    with pytest.raises(ValueError, match="rows"):
        Trajectory(np.arange(3.0), np.zeros((3, 1)), np.zeros((2, 1)), np.zeros((3, 0)))


@pytest.mark.parametrize("times", [[0.0, 1.0, 0.5], [0.0, 1.0, 2.5], [0.0, 0.0, 1.0]])
def test_trajectory_rejects_bad_times(times):
    with pytest.raises(ValueError, match="times"):
        Trajectory(times, np.zeros((3, 1)), np.zeros((3, 1)), np.zeros((3, 0)))


def test_trajectory_copy_is_independent():
    t = make()
    c = t.copy()
    c.X[0, 0] += 1.0
    c.meta["system"] = "other"
    assert t.X[0, 0] != c.X[0, 0] and t.meta["system"] == "test"


# -- noise ------------------------------------------------------------------------------

def test_infinite_snr_is_identity():
    t = make()
    assert add_noise(t, NoiseSpec()).equals(t)


def test_constant_signal_noise_variance():
    n = 2000
    t = Trajectory(np.arange(n, dtype=float), np.ones((n, 1)), np.ones((n, 1)), np.ones((n, 1)))
    noisy = add_noise(t, NoiseSpec(20.0, seed=11))
    for d in (noisy.X - 1.0, noisy.Y - 1.0):
        assert abs(np.var(d) - 0.01) <= 0.1 * 0.01


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32), snr=st.floats(0.0, 40.0), scale=st.floats(0.1, 10.0))
def test_noise_power_per_channel(seed, snr, scale):
    n = 4000
    rng = np.random.default_rng(seed)
    X = scale * (1.0 + rng.uniform(size=(n, 3)))
    t = Trajectory(np.arange(n, dtype=float), X, np.zeros((n, 0)), np.zeros((n, 0)))
    noisy = add_noise(t, NoiseSpec(snr, seed=seed, channels="x"))
    expected = np.mean(X ** 2, axis=0) / 10 ** (snr / 10)
    got = np.mean((noisy.X - X) ** 2, axis=0)
    assert np.all(np.abs(got / expected - 1.0) <= 0.1)


def test_noise_is_deterministic_and_pure():
    t = make(n=50)
    before = t.copy()
    a = add_noise(t, NoiseSpec(20.0, seed=3))
    b = add_noise(t, NoiseSpec(20.0, seed=3))
    assert a.equals(b)
    assert t.equals(before)
    assert not add_noise(t, NoiseSpec(20.0, seed=4)).equals(a)


@pytest.mark.parametrize("channels", ["x", "y", "xy"])
def test_noise_channels_and_inputs_untouched(channels):
    t = make(n=50)
    noisy = add_noise(t, NoiseSpec(10.0, seed=0, channels=channels))
    np.testing.assert_array_equal(noisy.U, t.U)
    np.testing.assert_array_equal(noisy.times, t.times)
    assert noisy.X.shape == t.X.shape and noisy.Y.shape == t.Y.shape
    assert np.array_equal(noisy.X, t.X) == ("x" not in channels)
    assert np.array_equal(noisy.Y, t.Y) == ("y" not in channels)


def test_noise_variance_definition():
    sig = np.array([[1.0, 2.0], [3.0, 0.0]])
    np.testing.assert_allclose(noise_variance(sig, 10.0), [0.5, 0.2], rtol=1e-15)


def test_noise_validation():
    with pytest.raises(ValueError):
        NoiseSpec(math.nan)
    with pytest.raises(ValueError):
        NoiseSpec(20.0, channels="u")
    empty = Trajectory(np.zeros(0), np.zeros((0, 1)), np.zeros((0, 1)), np.zeros((0, 0)))
    with pytest.raises(ValueError, match="empty"):
        add_noise(empty, NoiseSpec(20.0))


# -- mse ----------------------------------------------------------------------------------

def test_mse_identical_is_zero():
    t = make()
    for g in ("x", "y", "both"):
        assert mse(t, t, g) == 0.0


def test_mse_constant_offset_on_one_channel():
    t = make(nx=4, ny=1)
    s = t.copy()
    s.X[:, 2] += 0.1
    assert mse(s, t, "x") == pytest.approx(0.01 / 4, rel=1e-12)
    assert mse(s, t, "both") == pytest.approx(0.01 / 5, rel=1e-12)
    assert mse(s, t, "y") == 0.0


def test_mse_hand_recomputation():
    a, b = make(seed=1), make(seed=2)
    cells = []
    for k in range(5):
        for j in range(2):
            cells.append((a.X[k, j] - b.X[k, j]) ** 2)
        cells.append((a.Y[k, 0] - b.Y[k, 0]) ** 2)
    assert mse(a, b) == pytest.approx(sum(cells) / len(cells), rel=1e-14)


def test_mse_errors():
    with pytest.raises(ValueError, match="lengths"):
        mse(make(n=4), make(n=5))
    with pytest.raises(ValueError, match="group"):
        mse(make(), make(), "u")


# -- CSV ----------------------------------------------------------------------------------

def test_csv_round_trip(tmp_path):
    t = make(n=7)
    t.meta["seed"] = 3
    p = tmp_path / "a.csv"
    write_csv(t, p)
    back = read_csv(p)
    assert back.equals(t)
    assert back.meta["system"] == "test" and back.meta["seed"] == 3
    assert meta_path(p).exists()
    assert p.read_text().splitlines()[0] == "t,x1,x2,y1,u1"


def test_csv_round_trip_for_simulated_systems(tmp_path):
    for traj in (simulate_manifold(ManifoldSpec(horizon=20.0)), simulate_network()):
        write_csv(traj, tmp_path / "s.csv")
        assert read_csv(tmp_path / "s.csv").equals(traj)


@settings(max_examples=30, deadline=None)
@given(X=arrays(np.float64, (4, 2), elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_csv_round_trip_is_lossless_for_finite_doubles(tmp_path_factory, X):
    t = Trajectory(np.arange(4.0), X, np.zeros((4, 1)), np.zeros((4, 0)))
    p = tmp_path_factory.mktemp("csv") / "h.csv"
    write_csv(t, p)
    np.testing.assert_array_equal(read_csv(p).X, X)


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n")
    return path


def test_csv_nan_rejected_with_line_number(tmp_path):
    p = write_lines(tmp_path / "n.csv", ["t,x1,y1", "0,1,2", "1,nan,2"])
    with pytest.raises(TrajectoryFormatError, match="line 3"):
        read_csv(p)


def test_csv_column_count_mismatch(tmp_path):
    p = write_lines(tmp_path / "c.csv", ["t,x1,y1", "0,1,2", "1,2"])
    with pytest.raises(TrajectoryFormatError, match="line 3.*columns"):
        read_csv(p)


@pytest.mark.parametrize("lines,match", [
    ([], "line 1"),
    (["x1,t", "1,0"], "line 1"),
    (["t,x2", "0,1"], "unexpected column"),
    (["t,y1,x1", "0,1,2"], "ordered"),
    (["t,x1", "0,abc"], "line 2"),
])
def test_csv_malformed_files(tmp_path, lines, match):
    p = tmp_path / "m.csv"
    p.write_text("\n".join(lines))
    with pytest.raises(TrajectoryFormatError, match=match):
        read_csv(p)


# -- reports and plots ------------------------------------------------------------------

def test_report_round_trip(tmp_path):
    rep = {"mse": 0.0123456789012345678, "history": np.array([3.0, 2.0, 1.5]),
           "n": np.int64(4), "nested": {"a": [1, 2]}, "bad": math.inf}
    write_report(rep, tmp_path / "r.json")
    back = read_report(tmp_path / "r.json")
    assert back["mse"] == rep["mse"]
    assert back["history"] == [3.0, 2.0, 1.5] and back["n"] == 4
    assert back["nested"] == {"a": [1, 2]} and back["bad"] == "inf"


def test_svg_single_series(tmp_path):
    p = tmp_path / "p.svg"
    xs = np.linspace(0, 1, 11)
    write_svg_lineplot([("y=x", xs, xs)], p, title="t & <u>", xlabel="x", ylabel="y")
    root = ET.parse(p).getroot()
    assert root.tag == SVG + "svg" and root.get("version") == "1.1"
    assert len(root.findall(SVG + "polyline")) == 1
    assert any(el.text == "y=x" for el in root.iter(SVG + "text"))


def test_svg_multiple_series_and_dashes(tmp_path):
    p = tmp_path / "q.svg"
    series = [(f"s{i}", [0.0, 1.0, 2.0], [i, i + 1.0, i * 2.0]) for i in range(3)]
    write_svg_lineplot(series, p, dashed=("s1",))
    polys = ET.parse(p).getroot().findall(SVG + "polyline")
    assert len(polys) == 3
    assert [pl.get("stroke-dasharray") for pl in polys] == [None, "6,4", None]


@pytest.mark.parametrize("series", [[], [("a", [], [])], [("a", [0.0, 1.0], [1.0])]])
def test_svg_rejects_bad_series(tmp_path, series):
    with pytest.raises(ValueError):
        write_svg_lineplot(series, tmp_path / "e.svg")
