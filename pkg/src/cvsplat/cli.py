"""``cvsplat`` command line: scene generation, training, uncertainty, rendering, evaluation.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import io as uio

log = logging.getLogger("cvsplat")

EXIT_USAGE, EXIT_RUNTIME = 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _key_value(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="overrides the seed in the config or scene spec")
    common.add_argument("--threads", type=int, default=None, help="worker threads for rendering")
    common.add_argument("--quiet", action="store_true", help="only print warnings and errors")

    cfg = argparse.ArgumentParser(add_help=False)
    cfg.add_argument("--config", type=Path, help="key=value training config file")
    cfg.add_argument("--set", dest="overrides", type=_key_value, action="append", default=[], metavar="KEY=VALUE",
                     help="override one config entry (repeatable)")

    p = _Parser(prog="cvsplat", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("generate-scene", parents=[common], help="procedural street scene with ground truth")
    s.add_argument("--spec", type=Path, help="key=value scene spec; defaults are used when omitted")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--points", type=int, default=6000, help="size of the initialization point cloud")

    s = sub.add_parser("train", parents=[common, cfg], help="train one field in a given regime")
    s.add_argument("--manifest", type=Path, required=True)
    s.add_argument("--regime", choices=("ground", "joint", "uc"), required=True)
    s.add_argument("--out", type=Path, required=True, help="output checkpoint (.gsuc)")
    s.add_argument("--weights", type=Path, help="aerial weight maps; defaults to <manifest dir>/weights")
    s.add_argument("--trace", type=Path, help="loss trace CSV; defaults to <out>.trace.csv")

    s = sub.add_parser("train-ensemble", parents=[common, cfg], help="train M ground-only members")
    s.add_argument("--manifest", type=Path, required=True)
    s.add_argument("--members", type=int, default=None)
    s.add_argument("--out", type=Path, required=True, help="output directory")
    s.add_argument("--workers", type=int, default=1)

    s = sub.add_parser("uncertainty", parents=[common, cfg], help="ensemble -> aerial weight maps")
    s.add_argument("--ensemble", type=Path, required=True, help="directory of member_*.gsuc")
    s.add_argument("--manifest", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--n", type=int, default=None, help="root exponent of the normalization")

    s = sub.add_parser("render", parents=[common, cfg], help="render a checkpoint at a manifest camera")
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--manifest", type=Path, required=True)
    s.add_argument("--camera", required=True)
    s.add_argument("--out", type=Path, required=True, help="output PNG")

    s = sub.add_parser("evaluate", parents=[common, cfg], help="PSNR / SSIM of a checkpoint on one split")
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--manifest", type=Path, required=True)
    s.add_argument("--split", default="held-out")
    s.add_argument("--out", type=Path, help="optional per-view CSV")

    s = sub.add_parser("protocol", parents=[common, cfg], help="all regimes x seeds x test splits")
    s.add_argument("--manifest", type=Path, required=True)
    s.add_argument("--out", type=Path, default=Path("protocol"))
    s.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    s.add_argument("--ensemble", type=Path, help="reuse trained members instead of training new ones")
    s.add_argument("--workers", type=int, default=1)

    s = sub.add_parser("ablate-n", parents=[common, cfg], help="uncertainty-weighted training for several n")
    s.add_argument("--manifest", type=Path, required=True)
    s.add_argument("--values", type=_int_list, default=[1, 2, 3, 4, 6, 8, 10])
    s.add_argument("--out", type=Path, default=Path("ablation"))
    s.add_argument("--ensemble", type=Path)
    s.add_argument("--workers", type=int, default=1)
    return p


def load_config(args):
    from .trainer import TrainConfig

    cfg = TrainConfig.from_file(args.config) if getattr(args, "config", None) else TrainConfig()
    over = dict(getattr(args, "overrides", []) or [])
    if args.seed is not None:
        over["seed"] = args.seed
    if args.threads is not None:
        over["threads"] = args.threads
    return TrainConfig.from_mapping(over, cfg) if over else cfg


def _weights_for(args, data):
    from .uncertainty import load_weight_maps

    wdir = args.weights or args.manifest.parent / "weights"
    if not wdir.is_dir():
        raise FileNotFoundError(
            f"no uncertainty weight maps at {wdir}. Run `cvsplat train-ensemble --manifest {args.manifest} "
            f"--out ENS` and `cvsplat uncertainty --ensemble ENS --manifest {args.manifest} --out {wdir}` first, "
            "or pass --weights DIR")
    return load_weight_maps(wdir, [i for i, _, _ in data.aerial])


def cmd_generate_scene(args):
    from .scenegen import SceneSpec, generate, save_bundle

    spec = SceneSpec.from_dict(uio.read_kv(args.spec)) if args.spec else SceneSpec()
    if args.seed is not None:
        spec = SceneSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    path = save_bundle(generate(spec, init_points=args.points), args.out)
    print(path)


def cmd_train(args):
    from .evaluation import SceneData
    from .gaussians import save_checkpoint
    from .trainer import init_field, train, write_trace

    cfg = load_config(args)
    data = SceneData.load(args.manifest, splits=())
    weights = _weights_for(args, data) if args.regime == "uc" else None
    ts = data.training_set(args.regime, weights)
    field_, trace = train(init_field(data.points, data.colors, cfg), ts, cfg)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(field_, args.out)
    write_trace(args.trace or args.out.with_suffix(".trace.csv"), trace)
    cfg.save(args.out.with_suffix(".config.txt"))
    log.info("wrote %s (%d Gaussians, final loss %.5f)", args.out, len(field_), trace[-1].total)


def cmd_train_ensemble(args):
    from .evaluation import SceneData, fit_ensemble

    cfg = load_config(args)
    data = SceneData.load(args.manifest, splits=())
    fields = fit_ensemble(data, cfg, members=args.members, out_dir=args.out, workers=args.workers)
    cfg.save(args.out / "config.txt")
    (args.out / "ensemble.txt").write_text("".join(f"member_{k:02d}.gsuc\n" for k in range(len(fields))))
    log.info("wrote %d members to %s", len(fields), args.out)


def cmd_uncertainty(args):
    from .evaluation import SceneData, build_weights, load_ensemble

    cfg = load_config(args)
    data = SceneData.load(args.manifest, splits=())
    w = build_weights(data, load_ensemble(args.ensemble), cfg, n_root=args.n, out_dir=args.out)
    log.info("wrote %d aerial weight maps to %s", len(w.weights), args.out)


def cmd_render(args):
    from .gaussians import load_checkpoint
    from .rasterizer import render
    from .scenegen import load_manifest

    import numpy as np

    cfg = load_config(args)
    cam = load_manifest(args.manifest).view(args.camera).camera
    out = render(load_checkpoint(args.ckpt), cam, np.asarray(cfg.background, np.float32), cfg.raster,
                 n_threads=cfg.threads)
    uio.write_png(args.out, out.color)
    log.info("wrote %s", args.out)


def cmd_evaluate(args):
    import csv

    from .evaluation import SceneData, evaluate_field
    from .gaussians import load_checkpoint

    cfg = load_config(args)
    data = SceneData.load(args.manifest, splits=(args.split,))
    p, s, rows = evaluate_field(load_checkpoint(args.ckpt), data.tests[args.split], cfg)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["view", "psnr", "ssim"])
            w.writerows([vid, repr(a), repr(b)] for vid, a, b in rows)
    print(f"{args.split}: PSNR {p:.4f} SSIM {s:.5f} ({len(rows)} views)")


def cmd_protocol(args):
    from .evaluation import load_ensemble, run_protocol

    cfg = load_config(args)
    ens = load_ensemble(args.ensemble) if args.ensemble else None
    res = run_protocol(args.manifest, cfg, seeds=args.seeds, out_dir=args.out, ensemble=ens, workers=args.workers)
    print(res.summary(), end="")


def cmd_ablate_n(args):
    from .evaluation import load_ensemble, run_n_ablation

    cfg = load_config(args)
    ens = load_ensemble(args.ensemble) if args.ensemble else None
    res = run_n_ablation(args.manifest, cfg, values=args.values, ensemble=ens, out_dir=args.out,
                         workers=args.workers)
    print(res.summary(), end="")


COMMANDS = {
    "generate-scene": cmd_generate_scene,
    "train": cmd_train,
    "train-ensemble": cmd_train_ensemble,
    "uncertainty": cmd_uncertainty,
    "render": cmd_render,
    "evaluate": cmd_evaluate,
    "protocol": cmd_protocol,
    "ablate-n": cmd_ablate_n,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", force=True)
    for name in ("threads", "workers", "members", "n"):
        v = getattr(args, name, None)
        if v is not None and v < 1:
            parser.error(f"--{name} must be >= 1")
    try:
        COMMANDS[args.command](args)
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:
        print(f"cvsplat {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
