"""Command-line entry point: synth, train, infer, eval and plot."""

import argparse
import sys
from pathlib import Path

import numpy as np

from .data import (
    read_dataset,
    read_flow,
    read_scene,
    scene_dirs,
    splat_image,
    synth_dataset,
    write_dataset,
    write_flags,
    write_flow,
    write_ppm,
)
from .errors import CheckpointError, ContractError, NonFiniteError, SceneFormatError
from .metrics import aggregate_metrics, compute_metrics, format_report
from .model import ModelConfig, check_checkpointable, forward, init_params, load_checkpoint, save_checkpoint
from .numerics import no_grad
from .training import TrainConfig, train

OUT3D_EPE = 0.3  # ramp saturation, the outlier threshold in metres


def error_colors(epe):
    """Linear blue (0, 0, 1) to red (1, 0, 0) ramp, saturated at 0.3 m."""
    s = np.clip(np.asarray(epe, dtype=np.float64) / OUT3D_EPE, 0.0, 1.0)
    return np.stack([s, np.zeros_like(s), 1.0 - s], axis=1)


def render_error_map(scene, est, cam=None):
    """Per-point EPE3D splatted at the frame-t projections on a black canvas."""
    cam = scene.cam if cam is None else cam
    flow = getattr(est, "flow", est)
    flow = np.asarray(getattr(flow, "data", flow), dtype=np.float64)
    epe = np.linalg.norm(flow - scene.gt_flow, axis=1)
    return splat_image(scene.pc_t, error_colors(epe), cam)


def _model_config(args):
    base = ModelConfig.paper if args.arch == "paper" else ModelConfig
    return base(knn=args.knn, sinkhorn_k=args.sinkhorn_k, d_max=args.dmax, fusion=args.fusion,
                mlps=args.mlps, pin_epsilon=args.pin_epsilon, pin_lambda=args.pin_lambda)


def cmd_synth(args):
    scenes = synth_dataset(args.seed, args.scenes, args.points, args.max_t, args.max_deg,
                           args.coplanar_frac, args.occlusion)
    write_dataset(scenes, args.out)
    print(f"wrote {len(scenes)} scenes to {args.out}")


def cmd_train(args):
    dirs = scene_dirs(args.data)
    data = [read_scene(d) for d in dirs]
    val = read_dataset(args.val)
    config = TrainConfig(epochs=args.epochs, batch_size=args.batch, lr=args.lr,
                         lr_drop_epoch=args.lr_drop_epoch, seed=args.seed)
    model_config = _model_config(args)
    check_checkpointable(model_config)  # fail before training, not at save time
    params = init_params(args.seed, model_config)
    log_fh = open(args.log, "w", encoding="ascii") if args.log else None

    def emit(line):
        print(line, flush=True)
        if log_fh:
            log_fh.write(line + "\n")
            log_fh.flush()

    try:
        train(data, config, params, val, names=[d.name for d in dirs], log=emit)
    finally:
        if log_fh:
            log_fh.close()
    save_checkpoint(params, args.checkpoint)
    print(f"saved {params.count_parameters()} parameters to {args.checkpoint}")


def cmd_infer(args):
    params = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    with no_grad():
        for d in scene_dirs(args.data):
            flow, _ = forward(read_scene(d), params)
            target = out / d.name
            target.mkdir(parents=True, exist_ok=True)
            write_flow(target / "flow_est.txt", flow.flow.data)
            write_flags(target / "unmatched.txt", flow.unmatched)
    print(f"wrote predictions to {out}")


def cmd_eval(args):
    per_scene = []
    for d in scene_dirs(args.data):
        scene = read_scene(d)
        est = read_flow(Path(args.pred) / d.name / "flow_est.txt", expected=len(scene.pc_t))
        mask = None if args.all_points else scene.mask
        per_scene.append((d.name, compute_metrics(est, scene.gt_flow, scene.pc_t, scene.cam, mask,
                                                  args.acc_semantics)))
    report = format_report(aggregate_metrics([m for _, m in per_scene]), per_scene)
    if args.report:
        Path(args.report).write_text(report, encoding="ascii")
    sys.stdout.write(report)


def cmd_plot(args):
    scene = read_scene(args.scene)
    est = read_flow(args.pred, expected=len(scene.pc_t))
    write_ppm(args.out, render_error_map(scene, est))
    print(f"wrote {args.out}")


def build_parser():
    parser = argparse.ArgumentParser(prog="sceneflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--points", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--max-t", type=float, default=1.0)
    p.add_argument("--max-deg", type=float, default=10.0)
    p.add_argument("--coplanar-frac", type=float, default=0.2)
    p.add_argument("--occlusion", type=float, default=0.1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr-drop-epoch", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fusion", choices=("late", "early", "none"), default="late")
    p.add_argument("--mlps", type=int, choices=(1, 2), default=1)
    p.add_argument("--sinkhorn-k", type=int, default=1)
    p.add_argument("--knn", type=int, default=32)
    p.add_argument("--dmax", type=float, default=10.0)
    p.add_argument("--acc-semantics", choices=("or", "and"), default="or")
    p.add_argument("--arch", choices=("desk", "paper"), default="desk")
    p.add_argument("--pin-epsilon", type=float, default=-1.0)
    p.add_argument("--pin-lambda", type=float, default=-1.0)
    p.add_argument("--log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict flow for every scene of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--data", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--report")
    p.add_argument("--acc-semantics", choices=("or", "and"), default="or")
    p.add_argument("--all-points", action="store_true", help="include points whose match is occluded")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="render a per-point error map")
    p.add_argument("--scene", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ContractError, SceneFormatError, CheckpointError, NonFiniteError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
