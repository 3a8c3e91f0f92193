import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wavefield.coregeo import (ArrayGeometry, Direction, FrequencyGrid, plane_wave_pressure, steering_tensor,
                               steering_vector, unit_vectors)
from wavefield.dictionary import em32_sphere

GRID = FrequencyGrid(16000.0, 1024)
angles = st.floats(0, 2 * math.pi, allow_nan=False)
polar = st.floats(0, math.pi, allow_nan=False)


@given(angles, polar)
def test_direction_unit_norm(az, el):
    d = Direction(az, el)
    assert abs(np.linalg.norm(d.unit) - 1) <= 1e-12
    assert 0 <= d.azimuth < 2 * math.pi and 0 <= d.elevation <= math.pi


def test_direction_rejects_bad_elevation():
    with pytest.raises(ValueError):
        Direction(0.0, 4.0)
    with pytest.raises(ValueError):
        Direction(float("nan"), 1.0)


def test_direction_from_vector_roundtrip():
    d = Direction.from_degrees(123.0, 47.0)
    e = Direction.from_vector(3 * d.unit)
    assert np.allclose(d.unit, e.unit, atol=1e-14)


def test_geometry_validation():
    with pytest.raises(ValueError):
        ArrayGeometry(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        ArrayGeometry(np.array([[0, 0, np.inf]]))
    with pytest.raises(ValueError):
        ArrayGeometry(np.zeros((0, 3)))


def test_geometry_json_roundtrip(tmp_path):
    g = ArrayGeometry(np.array([[0.1, 0, 0], [0, 0.1, 0]]), labels=("a", "b"))
    g.save(tmp_path / "g.json")
    obj = json.loads((tmp_path / "g.json").read_text())
    assert set(obj) == {"positions_m", "labels"}
    h = ArrayGeometry.load(tmp_path / "g.json")
    assert np.array_equal(h.positions, g.positions) and h.labels == g.labels


def test_frequency_grid():
    assert GRID.num_bins == 513
    k = GRID.wavenumber(GRID.bins[10])
    assert k == pytest.approx(2 * math.pi * GRID.bins[10] / 343.0, rel=1e-15)
    with pytest.raises(ValueError):
        FrequencyGrid(16000.0, 1023)


def test_plane_wave_examples():
    d = Direction.from_degrees(40, 70)
    assert plane_wave_pressure(1.0, 1234.0, GRID, d, (0, 0, 0)) == 1 + 0j
    assert plane_wave_pressure(1.0, 0.0, GRID, d, (1.0, -2.0, 3.0)) == 1 + 0j
    f = 1000.0
    lam = 343.0 / f
    # half a wavelength along the propagation direction (= minus arrival)
    p = plane_wave_pressure(1.0, f, GRID, d, -0.5 * lam * d.unit)
    assert abs(p - (-1)) < 1e-12


def test_plane_wave_rejects_non_finite():
    with pytest.raises(ValueError):
        plane_wave_pressure(1.0, float("nan"), GRID, Direction(0, 0), (0, 0, 0))
    with pytest.raises(ValueError):
        plane_wave_pressure(1.0, 100.0, GRID, Direction(0, 0), (0, np.inf, 0))


@given(st.floats(-10, 10).filter(lambda c: c != 0), angles, polar, st.floats(0, 8000))
def test_plane_wave_scales_with_p0(c, az, el, f):
    pos = np.array([0.03, -0.02, 0.05])
    d = Direction(az, el)
    a = plane_wave_pressure(1.0, f, GRID, d, pos)
    b = plane_wave_pressure(c, f, GRID, d, pos)
    assert b == c * a
    assert abs(abs(b) - abs(c)) <= 1e-12 * abs(c)


def test_steering_single_mic_and_symmetric_pair():
    d = Direction.from_degrees(10, 80)
    assert np.array_equal(steering_vector(ArrayGeometry([[0, 0, 0]]), 900.0, GRID, d), [1 + 0j])
    pair = ArrayGeometry(np.stack([0.05 * d.unit, -0.05 * d.unit]))
    v = steering_vector(pair, 900.0, GRID, d)
    assert abs(v[0] - v[1].conjugate()) < 1e-14


def test_phase_lead_for_mic_closest_to_source():
    # 2-mic line array on x; source arriving from +x
    geom = ArrayGeometry([[0.05, 0, 0], [-0.05, 0, 0]])
    v = steering_vector(geom, 500.0, GRID, Direction(0.0, math.pi / 2))
    assert np.angle(v[0]) > 0 > np.angle(v[1])


def test_steering_matches_geometric_delay():
    geom = em32_sphere().geometry
    d = Direction.from_degrees(200, 35)
    f = 1000.0
    v = steering_vector(geom, f, GRID, d)
    assert np.allclose(np.abs(v), 1.0, rtol=0, atol=1e-12)
    # a plane wave from d reaches point r earlier than the origin by (u . r)/c
    lead = geom.positions @ d.unit / 343.0
    oracle = np.exp(1j * 2 * math.pi * f * lead)
    assert np.allclose(v, oracle, atol=1e-12)
    dphase = np.angle(v[1:] * v[0].conj())
    assert np.allclose(dphase, np.angle(np.exp(2j * math.pi * f * (lead[1:] - lead[0]))), atol=1e-10)


def test_steering_tensor_matches_vector():
    geom = em32_sphere().geometry
    dirs = [Direction.from_degrees(a, e) for a, e in [(0, 0), (45, 90), (300, 170)]]
    f = GRID.bins[[5, 64, 200]]
    T = steering_tensor(geom.positions, f, unit_vectors(dirs), 343.0)
    for i, fi in enumerate(f):
        for j, d in enumerate(dirs):
            assert np.allclose(T[i, j], steering_vector(geom, fi, GRID, d), atol=1e-12)
