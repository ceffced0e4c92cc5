"""``crowdflow`` command line.

Failures print one JSON line ``{"error": <type>, "message": <text>}`` to
stderr and exit with status 2.  ``CROWDFLOW_THREADS`` caps BLAS threads and
the number of concurrent ablation trainings (default 1).
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from threadpoolctl import threadpool_limits

from .config import RunConfig, from_dict, load_config
from .metrics import MetricReport, evaluate
from .scenarios import ScenarioSpec, write_scenario
from .scene import load_trajectories, save_trajectories
from .training import (Source, load_checkpoint_model, load_sources, run_training, simulate_window)

TOGGLE_GROUPS = {
    "env": ("obs", "ooi", "light"),
    "igi": ("rij", "sim1", "sim2", "sim3"),
    "repulsion": ("repulsion",),
    "density": ("density",),
}
TOGGLES = ("obs", "ooi", "light", "rij", "sim1", "sim2", "sim3", "repulsion", "density")


def thread_cap() -> int:
    raw = os.environ.get("CROWDFLOW_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"CROWDFLOW_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"CROWDFLOW_THREADS must be a positive integer, got {raw!r}")
    return n


def _config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None), getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


# commands


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.out_dir)
    _, results = run_training(cfg, out_dir=out, resume=args.resume)
    last = results[-1] if results else None
    summary = {"out_dir": str(out), "epochs": cfg.training.epochs,
               "final_loss": last.loss if last else None, "val_mae": last.val_mae if last else None}
    print(json.dumps(summary))
    return 0


def _window(source: Source, which: str) -> tuple[int, int]:
    if which == "val":
        return source.train_end, source.episode.n_frames
    if which == "train":
        return 0, source.train_end
    return 0, source.episode.n_frames


def cmd_simulate(args) -> int:
    cfg = _config(args)
    model = load_checkpoint_model(args.checkpoint, cfg)
    sources = load_sources(cfg)
    if not 0 <= args.source < len(sources):
        raise IndexError(f"--source {args.source} out of range for {len(sources)} sources")
    src = sources[args.source]
    start, stop = _window(src, args.window)
    pred, gt = simulate_window(model, src, start, stop, cfg.seed)
    save_trajectories(pred, args.output)
    if args.gt_out:
        save_trajectories(gt, args.gt_out)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    pred = load_trajectories(args.pred, cfg.data.frame_interval)
    gt = load_trajectories(args.gt, cfg.data.frame_interval)
    m = cfg.metrics
    report = evaluate(pred, gt, m.ot_epsilon, m.ot_debiased, m.mmd_bandwidth, m.d_thres)
    out = Path(args.output)
    out.write_text(report.to_json())
    out.with_suffix(".csv").write_text(report.csv_header() + "\n" + report.csv_row() + "\n")
    print(report.csv_row())
    return 0


def expand_grid(grid: str) -> list[str]:
    names: list[str] = []
    for item in (g.strip() for g in grid.split(",")):
        if not item:
            continue
        if item in TOGGLE_GROUPS:
            members = TOGGLE_GROUPS[item]
        elif item in TOGGLES:
            members = (item,)
        else:
            raise ValueError(f"unknown ablation toggle {item!r}; choose from {sorted(TOGGLE_GROUPS) + list(TOGGLES)}")
        names.extend(m for m in members if m not in names)
    return names


def current_toggles(cfg: RunConfig) -> dict[str, bool]:
    env, igi = cfg.model.env, cfg.model.igi
    return {
        "obs": env.obstacles, "ooi": env.ooi, "light": env.channel != "none",
        "rij": igi.use_rij, "sim1": igi.use_sim1, "sim2": igi.use_sim2, "sim3": igi.use_sim3,
        "repulsion": cfg.physics.repulsion.enabled, "density": env.channel == "density",
    }


def apply_toggles(cfg: RunConfig, toggles: dict[str, bool]) -> RunConfig:
    """Resolve a toggle assignment into a concrete config."""
    t = {**current_toggles(cfg), **toggles}
    channel = "none" if not t["light"] else ("density" if t["density"] else "lighting")
    return cfg.replace(**{
        "model.env.obstacles": t["obs"], "model.env.ooi": t["ooi"], "model.env.channel": channel,
        "model.igi.use_rij": t["rij"], "model.igi.use_sim1": t["sim1"], "model.igi.use_sim2": t["sim2"],
        "model.igi.use_sim3": t["sim3"], "physics.repulsion.enabled": t["repulsion"],
    })


def training_digest(cfg: RunConfig) -> str:
    """Digest of everything that influences training (simulation-only physics and metrics excluded)."""
    tree = cfg.to_dict()
    tree["physics"]["repulsion"] = None
    tree["physics"]["freeze_radius"] = None
    tree["metrics"] = None
    tree["out_dir"] = None
    return hashlib.sha256(json.dumps(tree, sort_keys=True).encode()).hexdigest()[:16]


def _train_one(tree: dict, out_dir: str) -> str:
    cfg = from_dict(tree)
    ckpt = Path(out_dir) / "last.esdf"
    if not ckpt.exists():
        with threadpool_limits(1):
            run_training(cfg, out_dir=out_dir)
    return str(ckpt)


def evaluate_checkpoint(cfg: RunConfig, checkpoint, sources: list[Source]) -> MetricReport:
    model = load_checkpoint_model(checkpoint, cfg)
    m = cfg.metrics
    reports = []
    for src in sources:
        pred, gt = simulate_window(model, src, src.train_end, src.episode.n_frames, cfg.seed)
        reports.append(evaluate(pred, gt, m.ot_epsilon, m.ot_debiased, m.mmd_bandwidth, m.d_thres))
    n = len(reports)
    return MetricReport(
        mae=sum(r.mae for r in reports) / n, fde=sum(r.fde for r in reports) / n,
        ot=sum(r.ot for r in reports) / n, mmd=sum(r.mmd for r in reports) / n,
        dtw=sum(r.dtw for r in reports) / n, col=sum(r.col for r in reports),
        ot_epsilon=m.ot_epsilon, ot_debiased=m.ot_debiased, mmd_bandwidth=m.mmd_bandwidth, d_thres=m.d_thres,
    )


def ablation_rows(cfg: RunConfig, names: list[str]) -> list[tuple[dict[str, bool], RunConfig]]:
    rows = []
    for values in itertools.product([False, True], repeat=len(names)):
        toggles = dict(zip(names, values))
        rows.append((toggles, apply_toggles(cfg, toggles)))
    return rows


def cmd_ablate(args) -> int:
    cfg = _config(args)
    names = expand_grid(args.grid)
    rows = ablation_rows(cfg, names)
    root = Path(args.out or Path(cfg.out_dir) / "ablate")
    root.mkdir(parents=True, exist_ok=True)
    jobs = {}
    for _, rcfg in rows:
        jobs.setdefault(training_digest(rcfg), rcfg)
    workers = min(thread_cap(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {d: pool.submit(_train_one, c.to_dict(), str(root / d)) for d, c in jobs.items()}
            ckpts = {d: f.result() for d, f in futures.items()}
    else:
        ckpts = {d: _train_one(c.to_dict(), str(root / d)) for d, c in jobs.items()}
    sources = load_sources(cfg)
    header = names + ["digest"] + list(MetricReport.FIELDS)
    lines = [",".join(header)]
    for toggles, rcfg in rows:
        digest = training_digest(rcfg)
        report = evaluate_checkpoint(rcfg, ckpts[digest], sources)
        lines.append(",".join([str(toggles[n]).lower() for n in names] + [digest, report.csv_row()]))
    text = "\n".join(lines) + "\n"
    (root / "report.csv").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_gen_scenario(args) -> int:
    spec = ScenarioSpec(args.template, args.agents, args.frames, args.noise, args.seed)
    paths = write_scenario(spec, args.output)
    print(json.dumps({k: str(v) for k, v in paths.items()}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crowdflow", description="Diffusion-based crowd simulation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("-c", "--config", help="YAML run configuration")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        if seed:
            p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("train", help="train a model and write checkpoints and metrics.csv")
    common(p)
    p.add_argument("--out", help="output directory (default: config out_dir)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="roll out a checkpoint over a data source window")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("-o", "--output", required=True, help="predicted trajectory CSV")
    p.add_argument("--source", type=int, default=0, help="index into data.sources")
    p.add_argument("--window", choices=("val", "train", "all"), default="val")
    p.add_argument("--gt-out", help="also write the matching ground-truth window CSV")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="compare predicted and ground-truth trajectory CSVs")
    common(p, seed=False)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("-o", "--output", required=True, help="JSON report path; a .csv twin is written alongside")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and evaluate every toggle combination")
    common(p)
    p.add_argument("--grid", required=True, help="comma list of groups (env, igi) or toggles")
    p.add_argument("--out", help="output directory (default: <out_dir>/ablate)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gen-scenario", help="write a synthetic scenario (CSV, scene YAML, lighting image)")
    p.add_argument("--template", required=True)
    p.add_argument("-n", "--agents", type=int, default=20)
    p.add_argument("--frames", type=int, default=600)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_gen_scenario)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with threadpool_limits(thread_cap()):
            return args.func(args)
    except Exception as exc:  # every failure becomes one parsable line
        msg = " ".join(str(exc).split()) or exc.__class__.__name__
        sys.stderr.write(json.dumps({"error": exc.__class__.__name__, "message": msg}) + "\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
