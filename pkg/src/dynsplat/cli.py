"""Pipeline driver: gen -> pretrain -> uncert -> graph -> optimize -> render / eval."""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import warnings
from pathlib import Path


from .config import PipelineConfig, apply_override
from .scene import ConfigError, SyntheticScene, make_orbit_scene, MOTION_PRESETS

ENV_OUT = "DYNSPLAT_OUT"

FILES = {
    "gen": "scene.json",
    "pretrain": "snapshot.json",
    "uncert": "field.json",
    "graph": "graph.json",
    "optimize": "checkpoint.json",
}


class StageError(RuntimeError):
    def __init__(self, code, message, **extra):
        super().__init__(message)
        self.code = code
        self.extra = extra


def _dump(path, obj):
    Path(path).write_text(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")


def _load(out, stage, needed_by):
    p = Path(out) / FILES[stage]
    if not p.exists():
        raise StageError("missing-dependency", f"stage {needed_by} requires output of stage {stage} ({p})",
                         stage=needed_by, requires=stage, path=str(p))
    return json.loads(p.read_text())


def _config(args) -> PipelineConfig:
    """--config, else the config left in the output directory by an earlier stage, else defaults;
    then --set / --preset / --seed overrides."""
    out = args.out or os.environ.get(ENV_OUT)
    prior = Path(out or PipelineConfig().output_dir) / "config.json"
    if args.config:
        cfg = PipelineConfig.from_json(Path(args.config).read_text())
    elif prior.exists():
        cfg = PipelineConfig.from_json(prior.read_text())
    else:
        cfg = PipelineConfig()
    for s in args.set or []:
        cfg = apply_override(cfg, s)
    if getattr(args, "preset", None):
        cfg.scene.motion = args.preset
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if out:
        cfg.output_dir = out
    cfg.validate()
    return cfg.resolved()


def _scene(cfg, out, stage):
    return SyntheticScene.from_dict(_load(out, "gen", stage)["scene"])


def _truth(scene):
    from .optim import ground_truth_images
    return ground_truth_images(scene)


# ---------------------------------------------------------------------------
# stages

def cmd_gen(cfg, out, args):
    from .renderer import write_ppm
    scene = make_orbit_scene(cfg.scene)
    _dump(out / FILES["gen"], {"config_hash": cfg.hash(), "scene": scene.to_dict()})
    gt = out / "gt"
    gt.mkdir(exist_ok=True)
    for t, img in enumerate(_truth(scene)):
        write_ppm(gt / f"frame_{t:04d}.ppm", img, f"config_hash={cfg.hash()}")
    _dump(gt / "manifest.json", {"config_hash": cfg.hash(), "frames": scene.T})
    return {"scene": str(out / FILES["gen"]), "frames": scene.T}


def cmd_pretrain(cfg, out, args):
    from .losses import LossReport
    from .optim import pretrain_vanilla, simulate_pretrained_drift
    scene = _scene(cfg, out, "pretrain")
    if args.mode == "drift":
        _, snap = simulate_pretrained_drift(scene, cfg.drift)
        hist = []
    else:
        sched = dataclasses.replace(cfg.schedule, iterations=cfg.pretrain.iterations, seed=cfg.pretrain.seed)
        _, snap, hist = pretrain_vanilla(scene, cfg.pretrain, sched, cfg.losses)
    _dump(out / FILES["pretrain"], {"config_hash": cfg.hash(), "snapshot": snap.to_dict()})
    if hist:
        (out / "pretrain_loss.csv").write_text(LossReport.to_csv(hist))
    return {"snapshot": str(out / FILES["pretrain"]), "provenance": snap.provenance}


def _snapshot(out, stage):
    from .optim import PretrainedSnapshot
    return PretrainedSnapshot.from_dict(_load(out, "pretrain", stage)["snapshot"])


def cmd_uncert(cfg, out, args):
    from .uncertainty import estimate_field
    snap = _snapshot(out, "uncert")
    scene = _scene(cfg, out, "uncert")
    field = estimate_field(snap.model, scene, cfg.uncertainty)
    _dump(out / FILES["uncert"], {"config_hash": cfg.hash(), "field": field.to_dict()})
    finite = field.u < field.phi
    return {"field": str(out / FILES["uncert"]), "finite_fraction": float(finite.mean())}


def _field(out, scene, stage):
    from .uncertainty import UncertaintyField
    return UncertaintyField.from_dict(_load(out, "uncert", stage)["field"], scene.input_cameras)


def cmd_graph(cfg, out, args):
    from .graph import build_graph
    snap = _snapshot(out, "graph")
    scene = _scene(cfg, out, "graph")
    field = _field(out, scene, "graph")
    g = build_graph(snap.positions, field, cfg.graph)
    _dump(out / FILES["graph"], {"config_hash": cfg.hash(), "graph": g.to_dict()})
    return {"graph": str(out / FILES["graph"]), "keys": len(g.keys), "key_fraction": len(g.keys) / g.n}


def cmd_optimize(cfg, out, args):
    from .graph import MotionGraph
    from .losses import LossReport
    from .optim import optimize, OptimizerState, checkpoint_dict
    snap = _snapshot(out, "optimize")
    scene = _scene(cfg, out, "optimize")
    field = _field(out, scene, "optimize")
    g = MotionGraph.from_dict(_load(out, "graph", "optimize")["graph"], snap.model.n)
    s = cfg.schedule
    state = OptimizerState(s.lr(), s.beta1, s.beta2, s.eps)
    model, hist = optimize(snap.model.copy(), snap, field, g, scene, s, cfg.losses, state=state)
    _dump(out / FILES["optimize"], {"config_hash": cfg.hash(), "checkpoint": checkpoint_dict(model)})
    _dump(out / "optimizer.json", {"config_hash": cfg.hash(), "state": state.to_dict()})
    (out / "loss.csv").write_text(f"# config_hash={cfg.hash()}\n" + LossReport.to_csv(hist))
    return {"checkpoint": str(out / FILES["optimize"]), "iterations": len(hist),
            "final_total": hist[-1].total if hist else None}


def _model(out, args, stage):
    from .optim import model_from_checkpoint
    src = getattr(args, "model", "checkpoint")
    if src == "snapshot":
        d = _load(out, "pretrain", stage)
        return _snapshot(out, stage).model, d["config_hash"]
    if src == "truth":
        d = _load(out, "gen", stage)
        return SyntheticScene.from_dict(d["scene"]).gaussians, d["config_hash"]
    d = _load(out, "optimize", stage)
    return model_from_checkpoint(d["checkpoint"]), d["config_hash"]


def cmd_render(cfg, out, args):
    from .renderer import render_frame, write_ppm, write_png
    model, _ = _model(out, args, "render")
    scene = _scene(cfg, out, "render")
    dest = out / "render" / args.views
    dest.mkdir(parents=True, exist_ok=True)
    if args.views == "input":
        jobs = [(f"input_{t:04d}", t, cam) for t, cam in enumerate(scene.input_cameras)]
    else:
        jobs = [(f"eval_{ev.frame:04d}_{int(round(ev.offset_deg)):03d}", ev.frame, ev.camera)
                for ev in scene.eval_views]
    for name, t, cam in jobs:
        img, _ = render_frame(model.frame(t), cam)
        if args.format == "png":
            write_png(dest / f"{name}.png", img, f"config_hash={cfg.hash()}")
        else:
            write_ppm(dest / f"{name}.ppm", img, f"config_hash={cfg.hash()}")
    return {"dir": str(dest), "frames": len(jobs)}


def cmd_eval(cfg, out, args):
    from .evaluate import view_range_eval
    model, h_model = _model(out, args, "eval")
    d_scene = _load(out, "gen", "eval")
    if h_model != d_scene["config_hash"] and not args.force:
        raise StageError("config-mismatch", "eval inputs come from different configs; pass --force to proceed",
                         model_hash=h_model, scene_hash=d_scene["config_hash"])
    scene = SyntheticScene.from_dict(d_scene["scene"])
    rep = view_range_eval(model, scene, cfg.eval.pck_fraction, cfg.eval.pck_abs)
    rep.meta = {"config_hash": cfg.hash(), "model": args.model}
    (out / "metrics.csv").write_text(f"# config_hash={cfg.hash()}\n" + rep.to_csv())
    (out / "metrics.json").write_text(rep.to_json() + "\n")
    return {"metrics": str(out / "metrics.json"),
            "buckets": {k: v["psnr"] for k, v in rep.buckets.items() if not isinstance(v["psnr"], str)}}


def cmd_selftest(cfg, out, args):
    from .selftest import run_all
    results = run_all()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name} {detail}")
    failed = [n for n, ok, _ in results if not ok]
    if failed:
        raise StageError("selftest-failed", f"{len(failed)} self-test(s) failed", failed=failed)
    return {"passed": len(results)}


COMMANDS = {"gen": cmd_gen, "pretrain": cmd_pretrain, "uncert": cmd_uncert, "graph": cmd_graph,
            "optimize": cmd_optimize, "render": cmd_render, "eval": cmd_eval, "selftest": cmd_selftest}


def build_parser():
    p = argparse.ArgumentParser(prog="dynsplat", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON (defaults for anything missing)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry, e.g. graph.k=6")
    common.add_argument("--out", help=f"output directory (else ${ENV_OUT}, else the config's output_dir)")
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("--threads", type=int, default=1, help="worker threads (1 gives bit-reproducible output)")
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen", parents=[common], help="generate a synthetic scene and ground-truth frames")
    g.add_argument("--preset", choices=MOTION_PRESETS)
    pt = sub.add_parser("pretrain", parents=[common], help="produce the pretrained snapshot")
    pt.add_argument("--mode", choices=("vanilla", "drift"), default="drift")
    for name in ("uncert", "graph", "optimize", "selftest"):
        sub.add_parser(name, parents=[common])
    r = sub.add_parser("render", parents=[common], help="render frames of a model")
    r.add_argument("--model", choices=("checkpoint", "snapshot", "truth"), default="checkpoint")
    r.add_argument("--views", choices=("input", "eval"), default="eval")
    r.add_argument("--format", choices=("ppm", "png"), default="ppm")
    e = sub.add_parser("eval", parents=[common], help="image and tracking metrics")
    e.add_argument("--model", choices=("checkpoint", "snapshot", "truth"), default="checkpoint")
    e.add_argument("--force", action="store_true", help="accept inputs with different config hashes")
    return p


def _set_threads(n):
    import torch
    torch.set_num_threads(max(1, n))
    try:
        import numba
        numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))
    except (ImportError, ValueError):
        pass


def main(argv=None):
    args = build_parser().parse_args(argv)
    # stderr carries the JSON error line; numba's threading-layer notice is not an error
    warnings.filterwarnings("ignore", message="The TBB threading layer")
    try:
        _set_threads(args.threads)
        cfg = _config(args)
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.to_json() + "\n")
        info = COMMANDS[args.command](cfg, out, args)
    except StageError as e:
        print(json.dumps({"error": e.code, "command": args.command, "message": str(e), **e.extra}), file=sys.stderr)
        return 2
    except (ConfigError, ValueError, RuntimeError, OSError) as e:
        print(json.dumps({"error": type(e).__name__, "command": args.command, "message": str(e)}), file=sys.stderr)
        return 1
    print(json.dumps({"ok": args.command, "config_hash": cfg.hash(), **info}, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
