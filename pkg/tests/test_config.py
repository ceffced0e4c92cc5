import pytest

from crowdflow.config import ConfigError, RunConfig, dump_config, from_dict, load_config

DEFAULTS = {
    'seed': 0,
    'out_dir': 'runs/default',
    'data': {'frame_interval': 0.1, 'val_fraction': 0.2, 'sources': []},
    'model': {'dest_in_condition': False,
              'env': {'obstacles': True, 'ooi': True, 'channel': 'lighting', 'lighting_stats': 'mean_max_min',
                      'embedding_dim': 16, 'scene_proj_dim': 16, 'd1': 16, 'd2': 16, 'd_light': 8, 'd_env': 16,
                      'hidden': 32, 'density_k': 16, 'relative_values': True, 'rel_scale': 1.0,
                      'embeddings': 'learned', 'embedding_file': None},
              'igi': {'top_k': 6, 'layers': 3, 'hidden': 32, 'd_social': 16, 'noise_dim': 2,
                      'use_rij': True, 'use_sim1': True, 'use_sim2': True, 'use_sim3': True},
              'history': {'length': 8, 'hidden': 32, 'input_dim': 16, 'relative': True},
              'denoiser': {'width': 64, 'depth': 2, 'time_dim': 16, 'cond_dim': 32}},
    'diffusion': {'steps': 70, 'beta_start': 0.0001, 'beta_end': 0.05, 'schedule': 'linear', 'sampler': 'ddim',
                  'ddim_steps': 50},
    'physics': {'m': 1.0, 'mu': 0.5, 'freeze_radius': 0.0,
                'repulsion': {'enabled': False, 'strength': 1.0, 'sigma': 0.5}},
    'training': {'epochs': 160, 'batch_size': 32, 'lr': 1e-05, 'weight_decay': 1e-05, 'lr_gamma': 0.999,
                 'lr_step': 10, 'horizon': 4, 'lambda_a': 1.0, 'lambda_p': 1.0, 'skip_frames': 25,
                 'segment_stride': 1, 'max_batches_per_epoch': 0, 'checkpoint_every': 10, 'eval_every': 0},
    'metrics': {'ot_epsilon': 0.01, 'ot_debiased': False, 'mmd_bandwidth': 0.0, 'd_thres': 0.5},
}


def test_default_snapshot():
    assert RunConfig().to_dict() == DEFAULTS


def test_published_constants():
    c = RunConfig()
    assert c.model.igi.top_k == 6
    assert c.diffusion.steps == 70 and c.diffusion.sampler == "ddim" and c.diffusion.ddim_steps == 50
    assert c.model.igi.layers == 3
    assert c.model.history.length == 8
    assert c.training.batch_size == 32
    assert c.training.lr == 1e-5 and c.training.weight_decay == 1e-5
    assert c.training.lr_gamma == 0.999 and c.training.lr_step == 10


def test_yaml_round_trip_and_digest(tmp_path):
    cfg = RunConfig().replace(**{"training.epochs": 3, "model.igi.top_k": 2})
    path = tmp_path / "c.yaml"
    path.write_text(dump_config(cfg))
    back = load_config(path)
    assert back == cfg and back.digest() == cfg.digest()
    assert back.digest() != RunConfig().digest()


def test_overrides_and_relative_sources(tmp_path):
    (tmp_path / "c.yaml").write_text("data:\n  sources:\n    - {trajectories: t.csv, scene: s.yaml}\n")
    cfg = load_config(tmp_path / "c.yaml", ["training.lr=0.001", "model.env.channel=density"])
    assert cfg.training.lr == 0.001 and cfg.model.env.channel == "density"
    assert cfg.data.sources[0].trajectories == str(tmp_path / "t.csv")
    assert cfg.data.sources[0].agents == 20


@pytest.mark.parametrize("tree,match", [
    ({"bogus": 1}, "unknown keys"),
    ({"training": {"epochs": 1.5}}, "integer"),
    ({"diffusion": {"sampler": "euler"}}, "one of"),
    ({"diffusion": {"ddim_steps": 80}}, "ddim_steps"),
    ({"training": {"lambda_a": 0.0, "lambda_p": 0.0}}, "not both zero"),
    ({"data": {"sources": [{"template": "corridor", "trajectories": "x.csv"}]}}, "either"),
    ({"model": {"env": {"embeddings": "file"}}}, "embedding_file"),
])
def test_validation_errors(tree, match):
    with pytest.raises(ConfigError, match=match):
        from_dict(tree)


def test_bad_override():
    with pytest.raises(ConfigError):
        load_config(None, ["training.nope=1"])
    with pytest.raises(ConfigError):
        load_config(None, ["training.epochs"])
