from __future__ import annotations

import math

import numpy as np
import pytest

from flowtrack.dense_field import (
    NO_REGULARIZATION,
    RbfModel,
    RegularizationWeights,
    collocation_grid,
    default_support_radius,
    divergence,
    evaluate_field,
    evaluate_jacobian,
    fit_displacement_fields,
    fit_rbf,
    rbf_objective,
    trajectory_positions,
    wendland,
    wendland_derivative,
)
from flowtrack.errors import DegenerateSystemError
from flowtrack.models import FrameSequence, PointId, Trajectory
from flowtrack.phantoms import analytic_strain, gen_cyclic_shells
from flowtrack.strain import LvAxes, strain_field


def _grid(n: int, spacing: float = 1.0) -> np.ndarray:
    axis = spacing * np.arange(n, dtype=np.float64)
    mesh = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def _random_model(rng: np.random.Generator, count: int = 12, radius: float = 0.8) -> RbfModel:
    return RbfModel(
        centers=rng.uniform(0.0, 1.0, size=(count, 3)),
        coefficients=rng.normal(size=(count, 3)),
        support_radius=radius,
    )


def test_wendland_kernel_values() -> None:
    np.testing.assert_allclose(wendland(np.array([0.0, 0.5, 1.0, 1.5])), [1.0, 0.1875, 0.0, 0.0])
    assert wendland_derivative(np.array([0.0]))[0] == 0.0
    q = np.linspace(0.05, 0.95, 19)
    numeric = (wendland(q + 1e-6) - wendland(q - 1e-6)) / 2e-6
    np.testing.assert_allclose(wendland_derivative(q), numeric, rtol=1e-6, atol=1e-9)


def test_field_sums_overlapping_kernels() -> None:
    model = RbfModel(
        centers=np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]),
        coefficients=np.array([[1.0, 0.0, -1.0], [1.0, 0.0, -1.0]]),
        support_radius=2.0,
    )
    np.testing.assert_allclose(evaluate_field(model, np.array([1.0, 0.0, 0.0])), [0.375, 0, -0.375])


def test_field_vanishes_outside_every_support() -> None:
    model = RbfModel(centers=np.zeros((1, 3)), coefficients=np.ones((1, 3)), support_radius=1.0)
    far = np.array([[1.5, 0.0, 0.0], [0.0, -3.0, 0.0]])
    np.testing.assert_array_equal(evaluate_field(model, far), np.zeros((2, 3)))
    np.testing.assert_array_equal(evaluate_jacobian(model, far), np.zeros((2, 3, 3)))


def test_single_sample_at_its_centre_is_reproduced() -> None:
    model = fit_rbf(np.zeros((1, 3)), np.array([[1.0, -2.0, 0.5]]), support_radius=1.0)
    np.testing.assert_allclose(evaluate_field(model, np.zeros(3)), [1.0, -2.0, 0.5], atol=1e-6)


def test_zero_displacements_give_zero_coefficients() -> None:
    positions = _grid(4)
    model = fit_rbf(positions, np.zeros_like(positions), reg=RegularizationWeights())
    assert np.all(model.coefficients == 0.0)


def test_jacobian_matches_central_differences(rng) -> None:
    for _ in range(100):
        model = _random_model(rng)
        query = rng.uniform(0.0, 1.0, size=3)
        analytic = evaluate_jacobian(model, query)
        step = 1e-4 * model.support_radius
        numeric = np.empty((3, 3))
        for b in range(3):
            offset = np.zeros(3)
            offset[b] = step
            numeric[:, b] = (
                evaluate_field(model, query + offset) - evaluate_field(model, query - offset)
            ) / (2.0 * step)
        scale = max(np.linalg.norm(analytic), 1e-3)
        assert np.linalg.norm(numeric - analytic) / scale < 1e-4


def test_divergence_is_the_jacobian_trace(rng) -> None:
    model = _random_model(rng)
    queries = rng.uniform(0.0, 1.0, size=(5, 3))
    np.testing.assert_allclose(
        divergence(model, queries), np.trace(evaluate_jacobian(model, queries), axis1=1, axis2=2)
    )


def test_translation_is_reproduced_with_negligible_divergence() -> None:
    positions = _grid(11)
    displacements = np.tile([1.0, 0.0, 0.0], (len(positions), 1))
    reg = RegularizationWeights(lambda_sparse=0.0, lambda_div=0.0, lambda_grad=1e-6)
    model = fit_rbf(positions, displacements, support_radius=1.5, reg=reg, collocation=positions)
    interior = positions[np.all((positions >= 3.0) & (positions <= 7.0), axis=1)]
    errors = np.linalg.norm(evaluate_field(model, interior) - [1.0, 0.0, 0.0], axis=1)
    assert errors.mean() < 0.05
    assert np.abs(divergence(model, interior)).mean() < 1e-3


def test_divergence_penalty_suppresses_spurious_sources(rng) -> None:
    positions = _grid(6)
    solenoidal = np.stack(
        [np.sin(positions[:, 1]), np.sin(positions[:, 2]), np.sin(positions[:, 0])], axis=1
    )
    noisy = solenoidal + rng.normal(0.0, 0.1, size=solenoidal.shape)
    collocation = collocation_grid(positions, 1000)

    def mean_divergence(lambda_div: float) -> float:
        reg = RegularizationWeights(lambda_sparse=0.0, lambda_div=lambda_div, lambda_grad=0.0)
        model = fit_rbf(positions, noisy, support_radius=2.0, reg=reg, collocation=collocation)
        return float(np.abs(divergence(model, collocation)).mean())

    assert mean_divergence(1.0) <= 0.5 * mean_divergence(0.0)


def test_sparsity_grows_with_the_l1_weight(rng) -> None:
    positions = _grid(4)
    displacements = rng.uniform(-1.0, 1.0, size=positions.shape)
    counts = []
    for lam in (0.0, 0.1, 0.5, 1.0, 2.0):
        reg = RegularizationWeights(lambda_sparse=lam, lambda_div=0.0, lambda_grad=0.0)
        model = fit_rbf(positions, displacements, support_radius=0.5, reg=reg)
        counts.append(int(np.count_nonzero(np.abs(model.coefficients) > 1e-8)))
    assert counts == sorted(counts, reverse=True)
    assert counts[0] == displacements.size
    # with a diagonal basis the optimum is the soft threshold of the data at lambda / 2
    expected = int(np.count_nonzero(np.abs(displacements) > 1.0))
    assert counts[-1] == expected


def test_sample_order_does_not_change_the_objective(rng) -> None:
    positions = rng.uniform(0.0, 4.0, size=(40, 3))
    displacements = rng.normal(size=(40, 3))
    order = rng.permutation(40)
    reg = RegularizationWeights(
        lambda_sparse=0.0, lambda_div=1e-2, lambda_grad=1e-3, grid_points=512
    )
    collocation = collocation_grid(positions, reg.grid_points)
    kwargs = {"centers": positions, "support_radius": 1.5, "reg": reg, "collocation": collocation}
    first = fit_rbf(positions, displacements, **kwargs)
    second = fit_rbf(positions[order], displacements[order], **kwargs)
    a = rbf_objective(first, positions, displacements, reg, collocation)
    b = rbf_objective(second, positions, displacements, reg, collocation)
    assert abs(a - b) <= 1e-9 * max(1.0, abs(a))


def test_samples_outside_every_support_are_degenerate() -> None:
    with pytest.raises(DegenerateSystemError):
        fit_rbf(
            np.array([[10.0, 0.0, 0.0]]),
            np.ones((1, 3)),
            centers=np.zeros((1, 3)),
            support_radius=1.0,
        )


def test_default_support_radius_scales_the_median_spacing() -> None:
    assert default_support_radius(_grid(3, spacing=1.5)) == pytest.approx(3.0)
    with pytest.raises(DegenerateSystemError):
        default_support_radius(np.zeros((1, 3)))
    with pytest.raises(DegenerateSystemError):
        default_support_radius(np.zeros((3, 3)))


def test_support_radius_can_reach_further_neighbours() -> None:
    grid = _grid(3, spacing=1.5)
    assert default_support_radius(grid, neighbors=6) == pytest.approx(3.0 * math.sqrt(2.0))
    pair = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    assert default_support_radius(pair, neighbors=8) == pytest.approx(4.0)
    with pytest.raises(ValueError):
        default_support_radius(grid, neighbors=0)
    with pytest.raises(ValueError):
        RegularizationWeights(support_neighbors=0)


def test_collocation_grid_stays_within_budget_and_bounds() -> None:
    points = np.array([[0.0, 0.0, 0.0], [2.0, 3.0, 4.0]])
    grid = collocation_grid(points, 10_000)
    assert len(grid) == 21**3
    np.testing.assert_allclose(grid.min(axis=0), [0.0, 0.0, 0.0])
    np.testing.assert_allclose(grid.max(axis=0), [2.0, 3.0, 4.0])


def test_model_dict_round_trip_is_read_only() -> None:
    model = RbfModel(centers=np.eye(3), coefficients=np.ones((3, 3)), support_radius=1.25)
    payload = model.to_dict()
    assert payload["kernel"] == "wendland-c2"
    restored = RbfModel.from_dict(payload)
    np.testing.assert_array_equal(restored.centers, model.centers)
    assert restored.support_radius == 1.25
    with pytest.raises(ValueError):
        restored.coefficients[0, 0] = 2.0
    with pytest.raises(ValueError):
        RbfModel(centers=np.eye(3), coefficients=np.ones((2, 3)), support_radius=1.0)


def test_displacement_fields_anchor_on_frame_one() -> None:
    base = _grid(3, spacing=2.0)
    shift = np.array([0.5, 0.0, 0.0])
    sequence = FrameSequence(frames=(base, base + shift, base + 2 * shift))
    trajectories = [
        Trajectory(points=tuple(PointId(t, i) for t in (1, 2, 3))) for i in range(1, len(base) + 1)
    ]
    tracked = trajectory_positions(sequence, trajectories)
    assert tracked.shape == (3, len(base), 3)

    models = fit_displacement_fields(sequence, trajectories, NO_REGULARIZATION, threads=2)
    assert len(models) == 3
    assert np.all(models[0].coefficients == 0.0)
    np.testing.assert_allclose(
        evaluate_field(models[2], base), np.tile(2 * shift, (len(base), 1)), atol=1e-9
    )
    assert all(model.support_radius == models[0].support_radius for model in models)
    with pytest.raises(DegenerateSystemError):
        fit_displacement_fields(sequence, [], NO_REGULARIZATION)


def test_affine_tail_adds_to_field_and_jacobian() -> None:
    affine = np.array([[0.1, 0.0, 0.0, 1.0], [0.0, -0.2, 0.0, 0.0], [0.0, 0.3, 0.0, -1.0]])
    model = RbfModel(
        centers=np.zeros((1, 3)), coefficients=np.zeros((1, 3)), support_radius=1.0, affine=affine
    )
    point = np.array([5.0, 2.0, -1.0])
    np.testing.assert_allclose(evaluate_field(model, point), [1.5, -0.4, -0.4])
    np.testing.assert_allclose(evaluate_jacobian(model, point), affine[:, :3])
    restored = RbfModel.from_dict(model.to_dict())
    np.testing.assert_array_equal(restored.affine, affine)
    assert "affine" not in RbfModel(
        centers=np.zeros((1, 3)), coefficients=np.zeros((1, 3)), support_radius=1.0
    ).to_dict()
    with pytest.raises(ValueError):
        RbfModel(
            centers=np.zeros((1, 3)),
            coefficients=np.zeros((1, 3)),
            support_radius=1.0,
            affine=np.zeros((3, 3)),
        )


def test_affine_fit_recovers_a_linear_map_exactly() -> None:
    positions = _grid(5)
    linear = np.array([[0.1, 0.02, 0.0], [0.0, -0.05, 0.0], [0.01, 0.0, 0.2]])
    offset = np.array([1.0, -2.0, 0.5])
    displacements = positions @ linear.T + offset
    model = fit_rbf(positions, displacements, support_radius=1.5, affine=True)
    assert model.affine is not None
    np.testing.assert_allclose(model.affine[:, :3], linear, atol=1e-6)
    np.testing.assert_allclose(model.affine[:, 3], offset, atol=1e-6)
    np.testing.assert_allclose(model.coefficients, 0.0, atol=1e-6)
    assert rbf_objective(model, positions, displacements) < 1e-10


def test_shell_end_systole_strain_matches_the_analytic_value() -> None:
    phantom = gen_cyclic_shells(10, 12, 4, 0.15, 0.1, 7, with_volumes=False)
    sequence = phantom.sequence
    trajectories = [
        Trajectory(points=tuple(PointId(t, i) for t in range(1, sequence.T + 1)))
        for i in range(1, len(sequence.frames[0]) + 1)
    ]
    models = fit_displacement_fields(
        sequence, trajectories, RegularizationWeights(grid_points=1000), threads=2
    )
    phase = phantom.motion.es_frame - 1
    samples, skipped = strain_field(models[phase], LvAxes(), sequence.frames[0])
    assert skipped == []
    expected = analytic_strain(phase, phantom.motion)
    assert expected == pytest.approx(-0.13875)
    for values in (
        [s.radial for s in samples],
        [s.circumferential for s in samples],
    ):
        errors = np.abs(np.asarray(values) - expected)
        assert np.median(errors) < 0.01
        assert np.percentile(errors, 90) < 0.01
    assert np.median(np.abs([s.longitudinal for s in samples])) < 0.01
