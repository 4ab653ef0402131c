import numpy as np
import pytest

from auditors.surfaces import (MIN_SAMPLES, Annulus, Circle, Cylinder, Segment, SurfaceSamples, TimeSlice, Tube,
                               polyline_distance)
from field_core.errors import InputError, PreconditionError


def _flux(samples: SurfaceSamples, field) -> float:
    values = field(samples.points, samples.times)
    return float(np.sum(values * samples.normals))


def test_circle_normals_enclose_its_area():
    circle = Circle(0.5, 1.0, 0.3, time_weight=2.0)
    samples = circle.discretize(1024)
    # divergence of (q - q_c, 0) is one, so the outward flux is the enclosed area
    flux = _flux(samples, lambda q, t: np.stack([q[:, 0] - 0.5, np.zeros_like(t)], axis=1))
    assert flux == pytest.approx(np.pi * 0.3 * 0.3 / 2.0, rel=1e-10)
    assert np.allclose(samples.normals.sum(axis=0), 0.0, atol=1e-12)


def test_circle_sides():
    circle = Circle(1.0, 0.0, 0.1)
    assert circle.inside(np.array([[1.0]]), np.array([0.05]))[0]
    assert not circle.inside(np.array([[1.2]]), np.array([0.0]))[0]
    assert circle.feature_size == pytest.approx(0.1)
    with pytest.raises(InputError):
        Circle(0.0, 0.0, 0.0)


def test_segment_normal_points_to_the_right_of_its_direction():
    samples = Segment((0.0, 0.0), (0.0, 2.0)).discretize()
    assert samples.size == MIN_SAMPLES
    np.testing.assert_allclose(samples.normals.sum(axis=0), [2.0, 0.0])
    assert samples.times.min() > 0.0 and samples.times.max() < 2.0
    with pytest.raises(InputError):
        Segment((1.0, 1.0), (1.0, 1.0))
    with pytest.raises(PreconditionError):
        Segment((0.0, 0.0), (0.0, 1.0)).side(np.zeros((1, 1)), np.zeros(1))


def test_time_slice_measures_its_extent():
    one = TimeSlice(0.25, [(-2.0, 3.0)]).discretize()
    assert one.normals[:, 1].sum() == pytest.approx(5.0)
    assert np.all(one.times == 0.25)
    two = TimeSlice(0.0, [(-1.0, 1.0), (0.0, 0.5)]).discretize()
    assert two.points.shape[1] == 2
    assert two.normals[:, 2].sum() == pytest.approx(1.0)
    with pytest.raises(InputError):
        TimeSlice(0.0, [(1.0, 1.0)])


def test_tube_flux_matches_divergence_theorem():
    path = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 2.0]])
    tube = Tube(path, 0.5)
    samples = tube.discretize(1024)
    flux = _flux(samples, lambda q, t: np.concatenate([q, np.zeros((t.size, 1))], axis=1))
    # div (q1, q2, 0) = 2 over a cylinder of radius 0.5 and length 2
    assert flux == pytest.approx(2.0 * np.pi * 0.25 * 2.0, rel=1e-6)
    assert tube.inside(np.array([[0.1, 0.1]]), np.array([1.0]))[0]
    assert not tube.inside(np.array([[0.6, 0.0]]), np.array([1.0]))[0]


def test_tube_rejects_bad_paths():
    with pytest.raises(InputError):
        Tube(np.array([[0.0, 0.0, 0.0]]), 0.1)
    with pytest.raises(InputError):
        Tube(np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]), 0.1)
    with pytest.raises(InputError):
        Tube(np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 1.0]]), -0.1)


def test_cylinder_flux_and_side():
    cylinder = Cylinder([1.0, 0.0], 0.5, (0.0, 3.0))
    samples = cylinder.discretize(1024)
    flux = _flux(samples, lambda q, t: np.concatenate([q - np.array([1.0, 0.0]), np.zeros((t.size, 1))], axis=1))
    assert flux == pytest.approx(2.0 * np.pi * 0.25 * 3.0, rel=1e-8)
    side = cylinder.side(np.array([[1.0, 0.0], [2.0, 0.0]]), np.zeros(2))
    assert side[0] < 0.0 < side[1]


def test_annulus_boundary_orientation():
    region = Annulus(radius=3.0, holes=((1.0,),), delta=0.2)
    points, normals = region.spatial_boundary(1)
    np.testing.assert_allclose(points[:, 0], [-3.0, 3.0, 0.8, 1.2])
    np.testing.assert_allclose(normals[:, 0], [-1.0, 1.0, 1.0, -1.0])

    disk = Annulus(radius=2.0, holes=((0.5, 0.5),), delta=0.1)
    points, normals = disk.spatial_boundary(2)
    outer = np.linalg.norm(points, axis=1) > 1.5
    assert np.sum(np.linalg.norm(normals[outer], axis=1)) == pytest.approx(2.0 * np.pi * 2.0)
    assert np.sum(np.linalg.norm(normals[~outer], axis=1)) == pytest.approx(2.0 * np.pi * 0.1)
    np.testing.assert_allclose(normals.sum(axis=0), 0.0, atol=1e-12)


def test_annulus_validation():
    with pytest.raises(InputError):
        Annulus(radius=0.0)
    with pytest.raises(InputError):
        Annulus(radius=1.0, holes=((0.0,),))


def test_samples_concatenate_and_restrict():
    empty = SurfaceSamples.concatenate([], 2)
    assert empty.size == 0 and empty.normals.shape == (0, 3)
    parts = [Segment((0.0, 0.0), (0.0, 1.0)).discretize(), Segment((1.0, 0.0), (1.0, 1.0)).discretize()]
    joined = SurfaceSamples.concatenate(parts, 1)
    assert joined.size == 2 * MIN_SAMPLES
    early = joined.restricted(joined.times < 0.5)
    assert early.size == MIN_SAMPLES


def test_polyline_distance_uses_the_weighted_metric():
    path = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    points = np.array([[1.0, 0.0, 0.5], [0.0, 0.0, 3.0]])
    np.testing.assert_allclose(polyline_distance(points, path, np.ones(3)), [1.0, 2.0])
    np.testing.assert_allclose(polyline_distance(points, path, np.array([1.0, 1.0, 0.5])), [1.0, 1.0])
