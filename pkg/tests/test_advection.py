import numpy as np
import pytest

from latent_advection.advection import (
    FieldSequence,
    LatentState,
    advect_rollout,
    advect_step,
    sample_field,
    streamlines,
)
from latent_advection.tensor import ShapeError, Tape, Tensor, domain_grid


def latent(values):
    return LatentState(Tensor(np.asarray(values, dtype=np.float64)))


def constant_fields(n, h, w, wx, wy, dt=0.1):
    arr = np.zeros((n, 1, h, w, 2))
    arr[..., 0] = wx
    arr[..., 1] = wy
    return FieldSequence.from_array(arr, dt)


def test_zero_field_is_identity(rng):
    z = latent(rng.normal(size=(2, 7, 5, 1)))
    states = advect_rollout(z, FieldSequence.zeros(3, 2, 7, 5, 0.1))
    assert len(states) == 4
    for s in states:
        np.testing.assert_array_equal(s.numpy(), z.numpy())


def test_constant_state_is_preserved(rng):
    z = latent(np.full((1, 8, 8, 1), -0.25))
    w = Tensor(rng.normal(scale=4.0, size=(1, 8, 8, 2)))
    np.testing.assert_array_equal(advect_step(z, w, 0.1).numpy(), z.numpy())


def test_one_cell_shift_along_x(rng):
    h, w, dt = 6, 9, 0.1
    z = latent(rng.normal(size=(1, h, w, 1)))
    field = constant_fields(1, h, w, 1.0 / (w - 1) / dt, 0.0, dt)
    out = advect_step(z, field[0], dt).numpy()[0, ..., 0]
    src = z.numpy()[0, ..., 0]
    np.testing.assert_allclose(out[:, 1:], src[:, :-1], atol=1e-12)
    # inflow edge takes the boundary value
    np.testing.assert_allclose(out[:, 0], src[:, 0], atol=1e-12)


def test_one_cell_shift_along_y(rng):
    h, w, dt = 7, 5, 0.1
    z = latent(rng.normal(size=(1, h, w, 1)))
    field = constant_fields(1, h, w, 0.0, -1.0 / (h - 1) / dt, dt)
    out = advect_step(z, field[0], dt).numpy()[0, ..., 0]
    src = z.numpy()[0, ..., 0]
    np.testing.assert_allclose(out[:-1], src[1:], atol=1e-12)


def test_maximum_principle(rng):
    for _ in range(200):
        h, w = rng.integers(2, 10, size=2)
        z = rng.normal(size=(1, h, w, 1))
        field = Tensor(rng.normal(scale=5.0, size=(1, h, w, 2)))
        out = advect_step(latent(z), field, float(rng.uniform(0.01, 1.0))).numpy()
        slack = 8 * np.finfo(np.float64).eps * np.abs(z).max()
        assert out.max() <= z.max() + slack
        assert out.min() >= z.min() - slack


def test_field_shape_must_match_state(rng):
    z = latent(rng.normal(size=(1, 4, 4, 1)))
    with pytest.raises(ShapeError):
        advect_step(z, Tensor(np.zeros((1, 4, 5, 2))), 0.1)


def test_field_sequence_rejects_mixed_shapes():
    with pytest.raises(ShapeError):
        FieldSequence((Tensor(np.zeros((1, 4, 4, 2))), Tensor(np.zeros((1, 4, 3, 2)))), 0.1)


def test_field_sequence_total_time():
    ws = FieldSequence.zeros(10, 1, 4, 4, 0.1)
    assert len(ws) == 10
    assert ws.total_time == pytest.approx(1.0)
    assert ws.as_array().shape == (10, 1, 4, 4, 2)


def test_rollout_gradient_reaches_fields(rng):
    z = latent(rng.normal(size=(1, 6, 6, 1)))
    w = Tensor(rng.uniform(-0.5, 0.5, size=(1, 6, 6, 2)), requires_grad=True)
    with Tape() as tape:
        states = advect_rollout(z, FieldSequence((w, w), 0.1))
        loss = states[-1].values.square().sum()
    grad = tape.backward(loss)[w]
    assert grad.shape == w.shape
    assert np.any(grad != 0)


def test_sample_field_interpolates_bilinearly():
    field = np.zeros((2, 2, 2))
    field[..., 0] = [[0.0, 1.0], [2.0, 3.0]]
    out = sample_field(field, np.array([[0.5, 0.5], [1.0, 0.0]]))
    np.testing.assert_allclose(out[:, 0], [1.5, 1.0])


def test_streamline_follows_constant_field():
    ws = constant_fields(4, 8, 8, 0.5, 0.0)
    (line,) = streamlines(ws, [[0.1, 0.5]])
    np.testing.assert_allclose(line[0], [0.1, 0.5])
    np.testing.assert_allclose(line[-1], [0.3, 0.5], atol=1e-12)
    assert len(line) == 17


def test_streamline_stops_at_boundary():
    ws = constant_fields(4, 8, 8, 1.0, 0.0)
    (line,) = streamlines(ws, [[0.95, 0.5]])
    assert line[-1][0] == pytest.approx(1.0)
    assert line[-1][1] == pytest.approx(0.5)
    assert len(line) < 17


def test_streamline_seed_outside_is_empty():
    ws = constant_fields(2, 4, 4, 1.0, 0.0)
    lines = streamlines(ws, [[1.5, 0.5], [0.5, 0.5]])
    assert lines[0].shape == (0, 2)
    assert len(lines[1]) > 1


def test_streamline_stops_where_velocity_vanishes():
    ws = constant_fields(3, 4, 4, 0.0, 0.0)
    (line,) = streamlines(ws, [[0.5, 0.5]])
    assert len(line) == 1


def test_centre_bump_moves_by_velocity_times_dt():
    n = 41
    grid = domain_grid(n, n, dtype=np.float64)
    bump = np.exp(-((grid[..., 0] - 0.5) ** 2 + (grid[..., 1] - 0.5) ** 2) / (2 * 0.05**2))
    z = latent(bump[None, ..., None])
    w = Tensor(np.broadcast_to([0.5, 0.0], (1, n, n, 2)).copy())
    moved = advect_step(z, w, 0.1).numpy()[0, ..., 0]

    # resample each row at x - 0.05 by hand
    expected = np.empty_like(bump)
    for j in range(n):
        pos = min(max(grid[0, j, 0] - 0.05, 0.0), 1.0) * (n - 1)
        lo = min(int(np.floor(pos)), n - 2)
        frac = pos - lo
        expected[:, j] = (1 - frac) * bump[:, lo] + frac * bump[:, lo + 1]
    np.testing.assert_allclose(moved, expected, atol=1e-6)

    centre_x = (moved * grid[..., 0]).sum() / moved.sum()
    assert centre_x == pytest.approx(0.55, abs=1e-6)


def test_rotation_streamline_keeps_its_radius():
    n, omega, centre = 33, np.pi / 2, np.array([0.5, 0.5])
    grid = domain_grid(n, n, dtype=np.float64)
    field = np.stack([-omega * (grid[..., 1] - centre[1]), omega * (grid[..., 0] - centre[0])], axis=-1)
    # ten steps of 0.1 make one quarter turn
    ws = FieldSequence.from_array(np.broadcast_to(field, (10, n, n, 2)).copy(), 0.1)
    (line,) = streamlines(ws, [[0.75, 0.5]])
    assert len(line) == 41
    radius = np.linalg.norm(line - centre, axis=1)
    np.testing.assert_allclose(radius, 0.25, rtol=1e-2)
    np.testing.assert_allclose(line[-1], [0.5, 0.75], atol=1e-3)
