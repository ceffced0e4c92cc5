"""Small configurations that keep training tests fast."""

from crowdflow.config import from_dict

TINY_MODEL = {
    "env": {"embedding_dim": 4, "scene_proj_dim": 4, "d1": 4, "d2": 4, "d_light": 2, "d_env": 4, "hidden": 6},
    "igi": {"top_k": 2, "layers": 1, "hidden": 6, "d_social": 4},
    "history": {"length": 3, "hidden": 6, "input_dim": 4},
    "denoiser": {"width": 8, "depth": 1, "time_dim": 4, "cond_dim": 6},
}


def tiny_config(template="corridor", **sections):
    tree = {
        "seed": 0,
        "data": {"sources": [{"template": template, "agents": 5, "frames": 80, "seed": 0}]},
        "model": TINY_MODEL,
        "diffusion": {"ddim_steps": 5},
        "training": {"epochs": 2, "batch_size": 8, "lr": 1e-3, "horizon": 2, "skip_frames": 5,
                     "segment_stride": 4, "checkpoint_every": 1},
    }
    for key, value in sections.items():
        tree.setdefault(key, {})
        tree[key] = {**tree[key], **value} if isinstance(value, dict) else value
    return from_dict(tree)
