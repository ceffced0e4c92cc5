"""Generate a corridor scenario, train a small model, roll it out and score it.

Run from the repository root:  python demos/quickstart.py [out_dir]
"""

import sys
from pathlib import Path

from crowdflow.config import from_dict
from crowdflow.metrics import evaluate
from crowdflow.training import Trainer, load_sources, run_training, simulate_window, validation_mae


def main(out_dir="demo-out"):
    out = Path(out_dir)
    cfg = from_dict({
        "seed": 0,
        "data": {"sources": [{"template": "corridor", "agents": 12, "frames": 300}]},
        "training": {"epochs": 30, "lr": 1e-3, "segment_stride": 3, "checkpoint_every": 10},
    })
    sources = load_sources(cfg)
    src = sources[0]
    print(f"corridor: {src.episode.n_peds} pedestrians, {src.episode.n_frames} frames, "
          f"validation starts at frame {src.train_end}")

    untrained = validation_mae(Trainer(cfg, sources).model, sources, cfg.seed)
    trainer, results = run_training(cfg, sources=sources, out_dir=out)
    for r in results[::10] + results[-1:]:
        print(f"epoch {r.epoch:3d}  loss {r.loss:.4f}")
    print(f"validation MAE: untrained {untrained:.3f} m, trained {results[-1].val_mae:.3f} m")

    pred, gt = simulate_window(trainer.model, src, src.train_end, src.episode.n_frames, cfg.seed)
    report = evaluate(pred, gt, cfg.metrics.ot_epsilon, cfg.metrics.ot_debiased,
                      cfg.metrics.mmd_bandwidth, cfg.metrics.d_thres)
    print(report.to_json())
    print(f"checkpoints and metrics.csv written to {out}/")


if __name__ == "__main__":
    main(*sys.argv[1:])
