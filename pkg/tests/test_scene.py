import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crowdflow.scene import (Bounds, Episode, ObjectOfInterest, Obstacle, SceneConfigError, SceneEnvironment,
                             TrajectoryFormatError, build_density_grid, build_lighting_grid, episode_from_positions,
                             load_scene, load_trajectories, save_scene, save_trajectories)


def _episode(xs, ys=None, dt=0.1):
    xs = np.asarray(xs, dtype=float)
    ys = np.zeros_like(xs) if ys is None else np.asarray(ys, dtype=float)
    pos = np.stack([xs, ys], axis=-1)[None]
    return episode_from_positions([0], np.arange(len(xs)), pos, np.ones((1, len(xs)), bool), dt)


def test_constant_velocity_derivatives():
    ep = _episode(np.arange(6) * 0.1)
    inner = ep.has_vel[0]
    assert inner.tolist() == [False, True, True, True, True, False]
    np.testing.assert_allclose(ep.vel[0, inner], [[1.0, 0.0]] * 4, atol=1e-12)
    np.testing.assert_allclose(ep.acc[0, ep.has_acc[0]], 0.0, atol=1e-9)


def test_quadratic_path_has_unit_acceleration():
    t = np.arange(8.0)
    ep = _episode(0.5 * t ** 2, dt=1.0)
    np.testing.assert_allclose(ep.acc[0, ep.has_acc[0]], [[1.0, 0.0]] * ep.has_acc[0].sum(), atol=1e-12)


def test_single_frame_pedestrian_has_no_derivatives():
    ep = _episode([1.0])
    assert not ep.has_vel.any() and not ep.has_acc.any()
    np.testing.assert_array_equal(ep.destinations[0], [1.0, 0.0])


def test_window_and_state_access():
    ep = _episode(np.arange(10) * 0.1)
    w = ep.window(2, 5)
    assert w.n_frames == 3 and w.frames.tolist() == [2, 3, 4]
    assert ep.state(0, 0) is None
    np.testing.assert_allclose(ep.state(0, 3).v, [1.0, 0.0])
    assert ep.states(3).shape == (1, 6)


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    pos = rng.normal(size=(2, 5, 2))
    has = np.array([[1, 1, 1, 1, 0], [0, 1, 1, 1, 1]], bool)
    ep = episode_from_positions([3, 7], [10, 11, 12, 13, 14], pos, has, 0.4)
    save_trajectories(ep, tmp_path / "t.csv")
    back = load_trajectories(tmp_path / "t.csv", 0.4)
    assert back.ped_ids.tolist() == [3, 7] and back.frames.tolist() == [10, 11, 12, 13, 14]
    np.testing.assert_array_equal(back.has_pos, has)
    np.testing.assert_array_equal(back.pos[has], pos[has])


@pytest.mark.parametrize("body,match", [
    ("frame,ped_id,x,y\n0,1,0.0\n", r":2: expected 4 fields"),
    ("frame,ped_id,x,y\n0,1,0.0,0.0\n1,1,a,0\n", r":3: malformed row"),
    ("frame,ped_id,x,y\n1,1,0,0\n0,1,0,0\n", "not strictly increasing"),
    ("frame,ped_id,x,y\n0,1,0,0\n2,1,0,0\n1,2,0,0\n", "gap"),
    ("f,p,x,y\n", "header"),
])
def test_malformed_trajectories(tmp_path, body, match):
    path = tmp_path / "bad.csv"
    path.write_text(body)
    with pytest.raises(TrajectoryFormatError, match=match):
        load_trajectories(path, 0.4)


def test_lighting_uniform_and_checkerboard():
    grid = build_lighting_grid(np.full((4, 6), 128), 2)
    assert grid.dims == (2, 3)
    np.testing.assert_allclose(grid.stats, 128 / 255)
    board = (np.indices((4, 4)).sum(axis=0) % 2) * 255
    stats = build_lighting_grid(board, 2).stats
    np.testing.assert_allclose(stats.reshape(-1, 3), [[0.5, 1.0, 0.0]] * 4)


def test_lighting_dims_rule():
    assert build_lighting_grid(np.zeros((576, 720)), 110).dims == (6, 7)
    assert build_lighting_grid(np.zeros((576, 720)), 110, dims=(6, 8)).dims == (6, 8)
    assert build_lighting_grid(np.zeros((4, 4)), 2).features("mean").shape == (4,)


def test_density_grid():
    b = Bounds(0, 0, 2, 2)
    np.testing.assert_array_equal(build_density_grid(np.zeros((0, 2)), b, 3), 0.0)
    g = build_density_grid(np.array([[1.0, 1.0]]), b, 2)
    assert g.sum() == 1 and g.max() == 1
    # out-of-bounds positions are clamped; upper bound maps to the last cell
    g = build_density_grid(np.array([[-5.0, 0.1], [2.0, 2.0]]), b, 2)
    assert g[0, 0] == 1 and g[1, 1] == 1


@given(st.lists(st.tuples(st.floats(-1, 3), st.floats(-1, 3)), max_size=20), st.integers(1, 5))
@settings(max_examples=100, deadline=None)
def test_density_grid_counts_everyone(points, K):
    g = build_density_grid(np.array(points, dtype=float).reshape(-1, 2), Bounds(0, 0, 2, 2), K)
    assert g.sum() == len(points)


def _scene(**kw):
    image = np.arange(16, dtype=np.uint8).reshape(4, 4) * 10
    args = dict(bounds=Bounds(0, 0, 4, 4), lighting=build_lighting_grid(image, 2), lighting_image=image)
    args.update(kw)
    return SceneEnvironment(**args)


def test_scene_validation():
    assert _scene().embedding_ids == ["scene"]
    _scene(obstacles=[Obstacle("corner", (4.0, 4.0), "pillar")])
    with pytest.raises(SceneConfigError, match="'far'"):
        _scene(oois=[ObjectOfInterest("far", (5.0, 1.0), "kiosk")])
    with pytest.raises(SceneConfigError):
        _scene(transform=np.zeros((2, 3)))
    with pytest.raises(SceneConfigError):
        Bounds(0, 0, 0, 1)


def test_scene_round_trip(tmp_path):
    scene = _scene(obstacles=[Obstacle("o1", (1.0, 2.0), "pillar")],
                   oois=[ObjectOfInterest("k", (3.0, 0.5), "kiosk")],
                   transform=np.array([[0.5, 0.0, 1.0], [0.0, 0.5, -1.0]]), scene_embedding="hall")
    save_scene(scene, tmp_path / "s.yaml")
    assert load_scene(tmp_path / "s.yaml") == scene
    np.testing.assert_allclose(scene.pixel_to_meter([2.0, 2.0]), [2.0, 0.0])


def test_scene_missing_image(tmp_path):
    (tmp_path / "s.yaml").write_text("bounds: [0, 0, 1, 1]\nlighting: {image: nope.pgm, cell_px: 2}\n")
    with pytest.raises(SceneConfigError, match="not found"):
        load_scene(tmp_path / "s.yaml")
