"""Command-line interface: ``shearsplat {synth,fit,render,eval,inspect}``.

Exit status is 0 on success, 2 for usage or configuration errors, 3 when
training diverges, 4 for unreadable checkpoints and 5 for other I/O errors.
``SHEARSPLAT_THREADS`` overrides the thread count from flags and config.
"""

import argparse
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import scenes
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CheckpointError, ConfigurationError, DivergenceError
from .render import render, slice_gaussians
from .training import METRICS_HEADER, evaluate, fit, psnr, ssim

THREADS_ENV = "SHEARSPLAT_THREADS"
EXIT_USAGE, EXIT_DIVERGED, EXIT_CHECKPOINT, EXIT_IO = 2, 3, 4, 5


def _times(text):
    try:
        out = [float(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid time list {text!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("time list is empty")
    return out


def thread_count(flag=None, config=None):
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigurationError(f"expected an integer, got {env!r}", THREADS_ENV) from None
    else:
        n = flag if flag is not None else (config if config is not None else 1)
    if n < 1:
        raise ConfigurationError("thread count must be >= 1", THREADS_ENV if env else "threads")
    return n


def cmd_synth(args):
    if args.preset:
        spec = scenes.parse_scene(scenes.PRESETS[args.preset])
    elif args.spec:
        spec = scenes.load_scene(args.spec)
    else:
        raise ConfigurationError("one of --spec or --preset is required", "synth")
    ds = scenes.synth_scene(spec)
    scenes.save_dataset(ds, args.out)
    print(f"wrote {len(ds.frames)} frames ({len(ds.cameras)} cameras x {len(ds.times)} times) to {args.out}")
    return 0


def cmd_fit(args):
    ck = load_checkpoint(args.resume) if args.resume else None
    if args.config:
        cfg = scenes.load_config(args.config)
    elif ck is not None and ck.config_text:
        cfg = scenes.RunConfig.from_text(ck.config_text)
    else:
        cfg = scenes.RunConfig()
    ds = scenes.load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "checkpoint.bin")
    metrics_path = os.path.join(args.out, "metrics.tsv")
    with open(os.path.join(args.out, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())
    state = None
    if ck is not None:
        model, state = ck.model, ck.state
        if state is None:
            raise CheckpointError("checkpoint holds no optimizer state to resume from", None)
    else:
        model = scenes.init_model(cfg, ds)
    text = cfg.to_text()

    def save(m, st, path=ckpt_path):
        save_checkpoint(path, m, st, text, ds.cameras)

    def diverged(m, st):
        save(m, st, os.path.join(args.out, "diverged.bin"))

    mode = "a" if state is not None and os.path.exists(metrics_path) else "w"
    with open(metrics_path, mode, encoding="utf-8") as log, threadpool_limits(thread_count(args.threads, cfg.threads)):
        if state is not None and mode == "w":
            log.write(METRICS_HEADER + "\n")
        try:
            res = fit(model, ds.train_views(), cfg.fit_config(), ds.test_views(), state=state, log=log,
                      on_divergence=diverged, seed=cfg.seed, on_checkpoint=save,
                      checkpoint_every=cfg.checkpoint_every)
        except DivergenceError as exc:
            exc.checkpoint_path = os.path.join(args.out, "diverged.bin")
            print(f"error: {exc}; last good state saved to {exc.checkpoint_path}", file=sys.stderr)
            return EXIT_DIVERGED
    save(res.model, res.state)
    if res.records:
        print(res.records[-1])
    return 0


def cmd_render(args):
    ck = load_checkpoint(args.ckpt)
    if not 0 <= args.camera < len(ck.cameras):
        raise ConfigurationError(f"camera {args.camera} not in checkpoint ({len(ck.cameras)} cameras)", "--camera")
    cam = ck.cameras[args.camera]
    os.makedirs(args.out, exist_ok=True)
    with threadpool_limits(thread_count(args.threads)):
        for i, t in enumerate(args.times):
            path = os.path.join(args.out, f"c{args.camera:02d}_f{i:03d}.ppm")
            render(ck.model, cam, t).write_ppm(path)
            print(f"{path}\t{t!r}")
    return 0


def cmd_eval(args):
    ds = scenes.load_dataset(args.data)
    print("split\tpsnr\tssim")
    if args.reference:
        ref = scenes.load_dataset(args.reference)
        for split, cams in (("train", ds.train_cameras), ("test", ds.test_cameras)):
            keys = [(c, i) for c in cams for i in range(len(ds.times))]
            if keys:
                p = np.mean([psnr(ds.frames[k], ref.frames[k]) for k in keys])
                s = np.mean([ssim(ds.frames[k], ref.frames[k]) for k in keys])
                print(f"{split}\t{p:.4f}\t{s:.6f}")
        return 0
    if not args.ckpt:
        raise ConfigurationError("one of --ckpt or --reference is required", "eval")
    ck = load_checkpoint(args.ckpt)
    with threadpool_limits(thread_count(args.threads)):
        for split, views in (("train", ds.train_views()), ("test", ds.test_views())):
            if views:
                p, s = evaluate(ck.model, views)
                print(f"{split}\t{p:.4f}\t{s:.6f}")
        rmse = scenes.trajectory_rmse(ck.model, ds)
    print(f"trajectory_rmse\t{rmse:.6f}\t{rmse / ds.extent:.6f}")
    return 0


INSPECT_HEADER = "t\tvisible\tkernel\tx\ty\tz\tc_xx\tc_xy\tc_xz\tc_yy\tc_yz\tc_zz\topacity"


def cmd_inspect(args):
    ck = load_checkpoint(args.ckpt)
    model = ck.model
    if not 0 <= args.gaussian < len(model):
        raise ConfigurationError(f"gaussian {args.gaussian} out of range (model has {len(model)})", "--gaussian")
    one = _single(model, args.gaussian)
    print(INSPECT_HEADER)
    for t in args.times:
        sl = slice_gaussians(one, t)
        if len(sl.index) == 0:
            print(f"{t!r}\t0" + "\tnan" * 11)
            continue
        c = sl.cov3[0]
        vals = [sl.cache["kernel"][0], *sl.mean3[0], c[0, 0], c[0, 1], c[0, 2], c[1, 1], c[1, 2], c[2, 2],
                sl.opacity[0]]
        print(f"{t!r}\t1\t" + "\t".join(repr(float(v)) for v in vals))
    return 0


def _single(model, i):
    from .motion import VelocityTrack
    from .render import SceneModel
    tr = model.track
    anchors = tr.anchors[i:i + 1] if tr.per_gaussian else tr.anchors
    return SceneModel(model.gaussians.subset([i]), VelocityTrack(anchors.copy(), tr.t_start, tr.t_end),
                      model.net, model.use_velocity, model.use_net, model.modulate_opacity, model.background)


def build_parser():
    p = argparse.ArgumentParser(prog="shearsplat", description="Velocity-decoupled 4D Gaussian splatting (CPU).")
    p.add_argument("--threads", type=int, default=None,
                   help=f"BLAS thread count (overridden by ${THREADS_ENV})")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic dataset from a scene spec")
    s.add_argument("--spec", help="scene spec file")
    s.add_argument("--preset", choices=sorted(scenes.PRESETS), help="built-in scene instead of --spec")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    f = sub.add_parser("fit", help="fit a model to a dataset")
    f.add_argument("--data", required=True)
    f.add_argument("--config", help="run config file (defaults when omitted)")
    f.add_argument("--out", required=True)
    f.add_argument("--resume", help="checkpoint to continue from")
    f.set_defaults(func=cmd_fit)

    r = sub.add_parser("render", help="render frames from a checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--camera", type=int, required=True)
    r.add_argument("--times", type=_times, required=True, help="comma-separated times")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="PSNR/SSIM on train/test views and trajectory RMSE")
    e.add_argument("--ckpt")
    e.add_argument("--data", required=True)
    e.add_argument("--reference", help="compare the frames of --data against this dataset instead")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="sliced moments of one Gaussian over a time sweep")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--gaussian", type=int, required=True)
    i.add_argument("--times", type=_times, required=True)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
