import numpy as np
import pytest
from scipy.interpolate import LinearNDInterpolator, NearestNDInterpolator

from meshrom.config import DataConfig
from meshrom.datagen import (SimConfig, TransportOperator, cell_integral, choose_inner_step, generate_dataset,
                             generate_trajectory, make_fv_mesh, make_mesh, velocity)
from meshrom.errors import ConfigError, ValidationError


@pytest.fixture(scope="module")
def square():
    return make_fv_mesh("unit_square", 300, seed=0)


@pytest.fixture(scope="module")
def disk():
    return make_fv_mesh("disk_with_hole", 400, seed=1)


def _thousand_steps(cfg):
    h = choose_inner_step(cfg)
    cfg.dt_inner, cfg.dt, cfg.t_end = h, 10 * h, 1000 * h
    return generate_trajectory(cfg)


def test_unit_square_graph(square):
    g = make_mesh("unit_square", 100, seed=0)
    assert 80 <= g.node_count <= 120
    assert g.n_components == 1
    assert np.all(g.face_measure > 0)
    assert np.all(square.areas > 0)


def test_disk_has_no_cells_in_hole(disk):
    r = np.hypot(*disk.centroids.T)
    assert r.min() > 0.2 and r.max() < 1.0
    assert disk.graph.n_components == 1


def test_step_channel_extent():
    m = make_fv_mesh("step_channel", 300, seed=0)
    x0, x1, y0, y1 = m.domain.bbox
    assert (x0, x1) == (-5.0, 10.0)
    v = m.vertices
    assert v[:, 0].min() == pytest.approx(-5.0) and v[:, 0].max() == pytest.approx(10.0)
    # nothing inside the step
    c = m.centroids
    assert not np.any((c[:, 0] < 0) & (c[:, 1] < 1.0))
    tags = set(m.graph.boundary.values())
    assert {"inlet", "outlet", "wall"} <= tags


def test_unknown_kind_rejected():
    with pytest.raises(ValidationError):
        make_fv_mesh("hexagon", 100)


def test_closed_flow_balances_every_cell(square):
    op = TransportOperator(SimConfig(square, "taylor_green", 0.0), 1e-3)
    # area-weighted column sums preserve the integral; unit row sums preserve constants
    np.testing.assert_allclose(square.areas @ op.A, square.areas, rtol=1e-12)
    np.testing.assert_allclose(np.asarray(op.A.sum(axis=1)).ravel(), 1.0, atol=1e-12)


def test_open_flow_keeps_inflow_constant():
    m = make_fv_mesh("step_channel", 300, seed=0)
    op = TransportOperator(SimConfig(m, "channel_shear", 0.01, boundary="open", inflow_value=3.0), 1e-3)
    np.testing.assert_allclose(op.step(np.full(m.triangles.shape[0], 3.0)), 3.0, rtol=1e-12)


def test_zero_velocity_zero_diffusion_is_constant(square):
    t = generate_trajectory(SimConfig(square, "uniform", 0.0, dt=0.1, t_end=1.0, velocity_scale=0.0,
                                      dt_inner=0.1))
    for s in t.snapshots:
        assert np.array_equal(s.values[0], t.snapshots[0].values[0])


def test_uniform_scalar_stays_uniform(square):
    cfg = SimConfig(square, "taylor_green", 0.01, dt=0.05, t_end=1.0, initial_values=np.full(
        square.triangles.shape[0], 2.5))
    last = generate_trajectory(cfg).snapshots[-1].values[0]
    np.testing.assert_allclose(last, 2.5, rtol=0, atol=1e-12)


def test_conservation_over_thousand_steps(square):
    t = _thousand_steps(SimConfig(square, "taylor_green", 0.005, initial_condition="random_smooth", seed=4))
    assert t.info["n_inner"] * (len(t) - 1) == 1000
    q0 = cell_integral(square, t.snapshots[0].values[0])
    q1 = cell_integral(square, t.snapshots[-1].values[0])
    assert abs(q1 - q0) / abs(q0) < 1e-8


def test_maximum_principle(disk):
    t = _thousand_steps(SimConfig(disk, "taylor_green", 0.002, initial_condition="random_smooth", seed=2))
    phi0 = t.snapshots[0].values[0]
    lo, hi = phi0.min(), phi0.max()
    for s in t.snapshots:
        assert s.values[0].min() >= lo - 1e-10 and s.values[0].max() <= hi + 1e-10


def test_open_channel_respects_inflow_bounds():
    m = make_fv_mesh("step_channel", 300, seed=0)
    t = generate_trajectory(SimConfig(m, "channel_shear", 0.01, dt=0.5, t_end=5.0, boundary="open",
                                      inflow_value=1.0, initial_condition="random_smooth", seed=1))
    hi = max(1.0, t.snapshots[0].values[0].max())
    lo = min(0.0, t.snapshots[0].values[0].min())
    for s in t.snapshots:
        assert lo - 1e-10 <= s.values[0].min() and s.values[0].max() <= hi + 1e-10


def test_diffusion_matches_refined_oracle():
    # independent oracle: the same problem on a 4x finer mesh, transferred piecewise linearly
    coarse = make_fv_mesh("unit_square", 600, seed=0)
    fine = make_fv_mesh("unit_square", 2400, seed=0)

    def final(m):
        cfg = SimConfig(m, "uniform", 0.01, dt=0.05, t_end=0.5, velocity_scale=0.0,
                        initial_condition="gaussian_blob", seed=3)
        return generate_trajectory(cfg).snapshots[-1].values[0]

    fc, ff = final(coarse), final(fine)
    ref = LinearNDInterpolator(fine.centroids, ff)(coarse.centroids)
    miss = np.isnan(ref)
    ref[miss] = NearestNDInterpolator(fine.centroids, ff)(coarse.centroids[miss])
    assert np.linalg.norm(fc - ref) / np.linalg.norm(ref) < 0.05


def test_cfl_violation_rejected(square):
    cfg = SimConfig(square, "taylor_green", 0.0, dt=0.5, t_end=1.0, dt_inner=0.5, velocity_scale=5.0)
    with pytest.raises(ConfigError):
        generate_trajectory(cfg)


def test_stride_must_divide(square):
    cfg = SimConfig(square, "taylor_green", 0.01, dt=0.05, t_end=1.0, dt_inner=0.03)
    with pytest.raises(ConfigError):
        generate_trajectory(cfg)


def test_velocity_channels_and_times(square):
    t = generate_trajectory(SimConfig(square, "taylor_green", 0.01, dt=0.05, t_end=0.5))
    u, v = velocity("taylor_green", square.domain.bbox, 1.0, square.centroids)
    assert len(t) == 11
    np.testing.assert_array_equal(t.snapshots[3].values[1], u)
    np.testing.assert_array_equal(t.snapshots[3].values[2], v)
    np.testing.assert_allclose([s.time for s in t.snapshots], np.arange(11) * 0.05)
    assert t.param[0] == pytest.approx(1.0 / 0.01)


def test_generation_is_deterministic():
    cfg = DataConfig(mesh_kind="unit_square", target_nodes=120, n_trajectories=2, n_snapshots=6)
    a, b = generate_dataset(cfg), generate_dataset(cfg)
    assert a.graph.same_as(b.graph)
    for x, y in zip(a.values, b.values):
        assert np.array_equal(x, y)
    assert [p[0] for p in a.params] == pytest.approx([200.0, 100.0])
