from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from flowtrack.errors import ArtifactError, ImageRequiredError
from flowtrack.features import (
    FeatureProvider,
    GradientHistogramFeature,
    IntensityPatchFeature,
    PositionFeature,
    extract_frame,
    make_provider,
)
from flowtrack.volumes import VolumeImage, read_volume, write_volume


def _textured_volume(seed: int = 3, shape: tuple[int, int, int] = (20, 20, 20)) -> VolumeImage:
    rng = np.random.default_rng(seed)
    return VolumeImage(voxels=rng.normal(size=shape), spacing=(1.0, 1.0, 1.0))


def test_voxel_index_rounds_to_the_nearest_centre() -> None:
    volume = VolumeImage(voxels=np.zeros((4, 4, 4)), spacing=(2.0, 2.0, 2.0), origin=(-1.0, 0, 0))
    np.testing.assert_array_equal(volume.voxel_index(np.array([0.2, 2.9, 3.1])), [1, 1, 2])


def test_patch_replicates_edge_voxels() -> None:
    voxels = np.arange(27, dtype=np.float64).reshape(3, 3, 3)
    patch = VolumeImage(voxels=voxels).patch(np.array([0, 0, 0]), 1)
    assert patch.shape == (3, 3, 3)
    assert patch[0, 0, 0] == voxels[0, 0, 0]
    assert patch[2, 2, 2] == voxels[1, 1, 1]


def test_volume_file_keeps_geometry_and_values(tmp_path: Path) -> None:
    volume = VolumeImage(
        voxels=np.arange(24, dtype=np.float64).reshape(2, 3, 4),
        spacing=(0.5, 1.0, 2.0),
        origin=(1.0, -2.0, 3.5),
    )
    path = tmp_path / "frame_001.vol"
    write_volume(path, volume)
    loaded = read_volume(path)
    assert loaded.dims == (2, 3, 4)
    assert loaded.spacing == (0.5, 1.0, 2.0)
    assert loaded.origin == (1.0, -2.0, 3.5)
    np.testing.assert_array_equal(loaded.voxels, volume.voxels)


def test_truncated_volume_file_is_rejected(tmp_path: Path) -> None:
    path = tmp_path / "broken.vol"
    write_volume(path, VolumeImage(voxels=np.ones((2, 2, 2))))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(ArtifactError, match="header declares 8"):
        read_volume(path)
    with pytest.raises(ArtifactError):
        read_volume(tmp_path / "missing.vol")


def test_providers_satisfy_the_protocol() -> None:
    for name in ("position", "intensity", "gradient"):
        assert isinstance(make_provider(name), FeatureProvider)
    with pytest.raises(ValueError):
        make_provider("colour")


def test_position_feature_is_constant() -> None:
    provider = PositionFeature()
    features = extract_frame(provider, np.random.default_rng(0).normal(size=(4, 3)))
    assert features.shape == (4, 1)
    assert np.all(provider.pairwise(features, features) == 0.0)


def test_intensity_distance_is_zero_on_itself_and_symmetric() -> None:
    volume = _textured_volume()
    provider = IntensityPatchFeature(patch_radius=2)
    points = np.array([[5.0, 5.0, 5.0], [12.0, 9.0, 7.0], [9.0, 14.0, 10.0]])
    features = extract_frame(provider, points, volume)
    assert features.shape == (3, 125)
    distances = provider.pairwise(features, features)
    np.testing.assert_allclose(np.diag(distances), 0.0, atol=1e-12)
    np.testing.assert_allclose(distances, distances.T, atol=1e-12)
    assert np.all(distances >= 0.0)
    assert provider.distance(features[0], features[1]) == pytest.approx(distances[0, 1])


def test_intensity_distance_ignores_gain_and_offset() -> None:
    volume = _textured_volume()
    brighter = VolumeImage(voxels=3.0 * volume.voxels + 7.0)
    provider = IntensityPatchFeature(patch_radius=2)
    point = np.array([8.0, 8.0, 8.0])
    a = provider.extract(point, volume)
    b = provider.extract(point, brighter)
    assert provider.distance(a, b) == pytest.approx(0.0, abs=1e-12)
    assert provider.distance(a, -a) == pytest.approx(2.0)


def test_flat_patches_match_only_themselves() -> None:
    provider = IntensityPatchFeature(patch_radius=1)
    flat = np.full(27, 4.0)
    other = np.full(27, 5.0)
    assert provider.distance(flat, flat) == 0.0
    assert provider.distance(flat, other) == 1.0


def test_image_features_need_a_volume() -> None:
    with pytest.raises(ImageRequiredError):
        IntensityPatchFeature().extract(np.zeros(3), None)
    with pytest.raises(ImageRequiredError):
        GradientHistogramFeature().extract(np.zeros(3), None)


def test_gradient_histogram_of_a_ramp_fills_one_bin() -> None:
    ramp = np.broadcast_to(0.25 * np.arange(16.0)[:, None, None], (16, 16, 16))
    provider = GradientHistogramFeature(patch_radius=2, bins=8, max_magnitude=1.0)
    histogram = provider.extract(np.array([8.0, 8.0, 8.0]), VolumeImage(voxels=ramp))
    assert histogram.shape == (8,)
    assert histogram.sum() == pytest.approx(1.0)
    assert histogram[2] == pytest.approx(1.0)
