import numpy as np
import pytest

from crowdflow.autodiff import Value
from crowdflow.container import load_records
from crowdflow.physics import destination_force, integrate
from crowdflow.scene import Bounds, SceneEnvironment, build_lighting_grid
from crowdflow.training import (Start, Trainer, TrainingError, load_sources, make_segments, run_training, simulate,
                                simulate_window, starts_from_episode, validation_mae, weighted_loss)

from helpers import tiny_config


def test_loss_examples():
    a_hat = Value(np.array([[1.0, 0.0]]))
    p_hat = Value(np.array([[0.0, 2.0]]))
    zero = np.zeros((1, 2))
    ok = np.array([True])
    assert weighted_loss(a_hat, zero, p_hat, zero, ok, 1.0, 1.0).item() == 5.0
    assert weighted_loss(a_hat, zero, p_hat, zero, ok, 1.0, 0.0).item() == 1.0
    assert weighted_loss(Value(zero), zero, Value(zero), zero, ok, 1.0, 1.0).item() == 0.0
    with pytest.raises(TrainingError):
        weighted_loss(a_hat, zero, p_hat, zero, np.array([False]), 1.0, 1.0)


def test_invalid_rows_leave_numerator_and_count():
    a_hat = Value(np.array([[1.0, 0.0], [50.0, 50.0]]))
    a = np.array([[0.0, 0.0], [np.nan, np.nan]])
    loss = weighted_loss(a_hat, a, Value(np.zeros((2, 2))), np.zeros((2, 2)), np.array([True, False]), 1.0, 1.0)
    assert loss.item() == 1.0


def test_segments_stay_inside_training_split():
    cfg = tiny_config()
    sources = load_sources(cfg)
    segs = make_segments(sources, cfg)
    assert segs
    for s in segs:
        assert s.t + cfg.training.horizon < sources[s.source].train_end
        assert s.t >= cfg.training.skip_frames + cfg.model.history.length - 1


def test_training_is_deterministic():
    cfg = tiny_config()
    _, r1 = run_training(cfg)
    _, r2 = run_training(cfg)
    assert [r.loss for r in r1] == [r.loss for r in r2]
    assert r1[-1].val_mae == r2[-1].val_mae and np.isfinite(r1[-1].val_mae)


def test_resume_is_bit_exact(tmp_path):
    cfg = tiny_config(training={"epochs": 4, "eval_every": 2})
    full, _ = run_training(cfg, out_dir=tmp_path / "full")
    half_cfg = cfg.replace(**{"training.epochs": 2})
    run_training(half_cfg, out_dir=tmp_path / "part")
    resumed, _ = run_training(cfg, out_dir=tmp_path / "part", resume=tmp_path / "part" / "checkpoint-0002.esdf")
    for name, p in full.model.parameters().items():
        np.testing.assert_array_equal(resumed.model.parameters()[name].data, p.data)
    assert (tmp_path / "full" / "last.esdf").read_bytes() == (tmp_path / "part" / "last.esdf").read_bytes()
    assert (tmp_path / "full" / "metrics.csv").read_text() == (tmp_path / "part" / "metrics.csv").read_text()


def test_zero_epochs_writes_initial_checkpoint_only(tmp_path):
    cfg = tiny_config(training={"epochs": 0})
    trainer, results = run_training(cfg, out_dir=tmp_path)
    assert results == []
    assert sorted(p.name for p in tmp_path.glob("checkpoint-*")) == ["checkpoint-0000.esdf"]
    rec = load_records(tmp_path / "checkpoint-0000.esdf")
    assert rec["train/epoch"][0] == 0
    assert (tmp_path / "metrics.csv").read_text() == "epoch,loss,val_mae,lr\n"


def test_lr_schedule():
    trainer = Trainer(tiny_config(training={"lr_gamma": 0.5, "lr_step": 2}), load_sources(tiny_config()))
    assert [trainer.lr_at(e) for e in range(5)] == [1e-3, 1e-3, 5e-4, 5e-4, 2.5e-4]


def test_nan_loss_names_the_segment():
    cfg = tiny_config(training={"horizon": 1})
    trainer = Trainer(cfg, load_sources(cfg))
    trainer.model.denoiser.head.bias.data[0] = np.nan
    with pytest.raises(TrainingError, match=r"source=corridor/seed0 frame=\d+"):
        trainer.run_epoch()


def test_too_short_episode():
    cfg = tiny_config(training={"skip_frames": 70})
    with pytest.raises(TrainingError, match="no training segments"):
        Trainer(cfg, load_sources(cfg))


def _open_scene():
    img = np.full((4, 4), 128, dtype=np.uint8)
    return SceneEnvironment(Bounds(-5, -5, 15, 15), build_lighting_grid(img, 2), img)


def _zero_model(cfg, scene):
    from crowdflow.model import CrowdModel
    model = CrowdModel.for_scenes(cfg, [scene])
    model.zero_parameters()
    return model


def test_zero_model_reduces_to_destination_force():
    cfg = tiny_config()
    scene = _open_scene()
    model = _zero_model(cfg, scene)
    L = cfg.model.history.length
    hist = np.zeros((L, 6))
    hist[-1, 2:4] = [0.3, 0.0]
    start = Start(0, 0, hist, np.array([False] * (L - 1) + [True]), np.array([10.0, 4.0]), 1.3)
    ep = simulate(model, scene, [start], 50, seed=0)
    p, v = np.zeros(2), np.array([0.3, 0.0])
    for f in range(1, 50):
        p, v = integrate(p, v, destination_force(p, v, start.destination, 1.3), 0.1)
        np.testing.assert_allclose(ep.pos[0, f], p, atol=1e-12)


def test_single_agent_reaches_goal():
    cfg = tiny_config()
    scene = _open_scene()
    model = _zero_model(cfg, scene)
    L = cfg.model.history.length
    hist = np.zeros((L, 6))
    start = Start(0, 0, hist, np.array([False] * (L - 1) + [True]), np.array([10.0, 4.0]), 1.3)
    ep = simulate(model, scene, [start], 201, seed=0)
    track = ep.pos[0]
    assert np.linalg.norm(track[-1] - start.destination) < 0.1
    # heading stays on the start-goal line up to roundoff
    d = start.destination / np.linalg.norm(start.destination)
    assert np.abs(track @ np.array([-d[1], d[0]])).max() < 1e-7


def test_simulation_determinism_and_entries():
    cfg = tiny_config()
    trainer = Trainer(cfg, load_sources(cfg))
    src = trainer.sources[0]
    a, gt = simulate_window(trainer.model, src, src.train_end, src.episode.n_frames, seed=5)
    b, _ = simulate_window(trainer.model, src, src.train_end, src.episode.n_frames, seed=5)
    np.testing.assert_array_equal(a.pos, b.pos)
    starts = starts_from_episode(src.episode, src.train_end, src.episode.n_frames, cfg.model.history.length)
    # each pedestrian enters with its ground-truth state
    for i, s in enumerate(starts):
        j = list(gt.ped_ids).index(s.ped_id)
        np.testing.assert_array_equal(a.pos[i, s.frame], gt.pos[j, s.frame])
    assert np.isfinite(validation_mae(trainer.model, trainer.sources, 0))
