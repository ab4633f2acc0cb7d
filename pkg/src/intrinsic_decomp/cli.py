"""Command-line entry point.

Subcommands: synth, train, infer, flatten, eval, gradcheck. Options may
also come from a ``key = value`` config file (``--config``); keys are the
long option names with dashes or underscores. Explicit flags win over the
file. Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""
import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__

log = logging.getLogger("intrinsic_decomp")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ValidationError(Exception):
    pass


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (p.strip() for p in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def write_resolved_config(args, path):
    skip = {"func", "config", "command", "verbose"}
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in sorted(vars(args).items()):
            if k in skip or v is None:
                continue
            fh.write(f"{k} = {v}\n")


# ---------------------------------------------------------------- commands


def cmd_synth(args):
    from .synth import SynthConfig, export_dataset, generate_dataset

    try:
        cfg = SynthConfig(image_size=args.size, region_count=args.regions, shading_bumps=args.bumps,
                          shading_amplitude=args.amplitude, judgement_pairs=args.pairs, seed=args.seed)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    if args.n < 1:
        raise ValidationError("--n must be at least 1")
    samples = generate_dataset(cfg, args.n)
    export_dataset(samples, args.out, cfg)
    write_resolved_config(args, os.path.join(args.out, "config.txt"))
    print(f"wrote {len(samples)} samples to {args.out}")


def _net_configs(args, mode):
    from .domain_filter import FilterParams
    from .nets import GuidanceConfig, NetConfig

    output_mode = "dual" if mode == "dense" else "scalar"
    try:
        net = NetConfig(residual_blocks=args.blocks, channels=args.channels, dilation=args.dilation,
                        output_mode=output_mode, branch_split=min(args.branch_split, args.blocks))
        guide = GuidanceConfig(layers=args.guide_layers, channels=args.guide_channels, dilation=args.dilation)
        fp = FilterParams(args.sigma_s, args.sigma_r, args.iterations)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    return net, guide, fp


def cmd_train(args):
    from .losses import LossWeights
    from .pipeline import Model, TrainingData, load_model, train, write_loss_csv
    from .synth import load_dataset

    if not os.path.isdir(args.data):
        raise ValidationError(f"dataset directory {args.data} not found")
    samples = load_dataset(args.data)
    if args.loss in ("iiw", "joint") and any(s.judgements is None for s in samples):
        raise ValidationError("iiw/joint training needs judgements for every sample")
    if args.loss in ("dense", "joint") and any(s.albedo is None or s.shading is None for s in samples):
        raise ValidationError("dense/joint training needs albedo and shading for every sample")
    if args.steps < 0 or args.batch_size < 1 or not args.lr > 0 or args.decay_steps < 0:
        raise ValidationError("need steps >= 0, batch-size >= 1, lr > 0 and decay-steps >= 0")
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "checkpoint.bin")
    if args.resume:
        model, state, meta = load_model(args.resume)
        if meta.get("loss") not in (None, args.loss):
            raise ValidationError(f"checkpoint was trained with --loss {meta.get('loss')}")
    else:
        net, guide, fp = _net_configs(args, args.loss)
        model = Model.create(net, guide, fp, seed=args.seed)
        state = None
    weights = LossWeights.dense() if args.loss == "dense" else LossWeights.iiw()
    weights = LossWeights(weights.lambda1, weights.lambda2, args.delta, args.xi, args.joint_scale)
    data = TrainingData(samples, model.filter)
    rows = []
    state = train(model, data, args.loss, args.steps, weights, lr=args.lr, seed=args.seed, state=state,
                  log_rows=rows, checkpoint_path=ckpt, checkpoint_every=args.checkpoint_every,
                  progress_every=args.log_every, extra_meta={"loss": args.loss, "seed": args.seed},
                  batch_size=args.batch_size, decay_steps=args.decay_steps)
    write_loss_csv(rows, os.path.join(args.out, "loss.csv"))
    write_resolved_config(args, os.path.join(args.out, "config.txt"))
    if rows:
        print(f"step {state.step}: first total {rows[0]['total']:.6f}, last total {rows[-1]['total']:.6f}")


def _load(path):
    from .dataio import ImageFormatError, load_image

    if not os.path.isfile(path):
        raise ValidationError(f"{path} not found")
    try:
        return load_image(path)
    except ImageFormatError as exc:
        raise ValidationError(str(exc)) from exc


def _rgb(img, path):
    if img.shape[0] == 1:
        return np.repeat(img, 3, axis=0)
    if img.shape[0] != 3:
        raise ValidationError(f"{path}: expected 1 or 3 channels")
    return img


def cmd_infer(args):
    from .dataio import save_image
    from .pipeline import load_model, predict

    if not os.path.isfile(args.checkpoint):
        raise ValidationError(f"{args.checkpoint} not found")
    model, _, _ = load_model(args.checkpoint)
    image = _rgb(_load(args.image), args.image)
    out = predict(model, image)
    os.makedirs(args.out, exist_ok=True)
    depth = args.bit_depth
    save_image(out["albedo"], os.path.join(args.out, "albedo.png"), depth)
    save_image(out["shading"], os.path.join(args.out, "shading.png"), depth)
    save_image(out["guidance"], os.path.join(args.out, "edge.png"), depth)
    save_image(out["filtered"], os.path.join(args.out, "flat-albedo.png"), depth)
    write_resolved_config(args, os.path.join(args.out, "config.txt"))
    print(f"wrote albedo, shading, edge and flat-albedo to {args.out}")


def cmd_flatten(args):
    from .dataio import save_image
    from .domain_filter import FilterParams, domain_filter_2d
    from .nets import edge_map

    try:
        fp = FilterParams(args.sigma_s, args.sigma_r, args.iterations)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    image = _load(args.image).astype(np.float64)
    if args.guidance:
        guide = _load(args.guidance).astype(np.float64)
        edges = guide.mean(axis=0, keepdims=True) * args.guidance_scale if guide.shape[0] != 1 \
            else guide * args.guidance_scale
    else:
        edges = edge_map(image)
    if edges.shape[1:] != image.shape[1:]:
        raise ValidationError("guidance and image sizes differ")
    out = domain_filter_2d(image, edges, fp)
    save_image(out, args.out, args.bit_depth)
    print(f"wrote {args.out}")


def cmd_eval(args):
    from .dataio import JudgementError, load_judgements
    from .metrics import MetricsReport, dense_report, whdr

    report = MetricsReport()
    albedo = _load(args.albedo)
    if args.judgements:
        try:
            judgements = load_judgements(args.judgements)
        except (JudgementError, OSError) as exc:
            raise ValidationError(str(exc)) from exc
        report.whdr = whdr(albedo, judgements, args.delta)
    if args.gt_albedo or args.gt_shading:
        if not (args.shading and args.gt_albedo and args.gt_shading):
            raise ValidationError("dense evaluation needs --shading, --gt-albedo and --gt-shading")
        shading = _load(args.shading)
        gt_a, gt_s = _load(args.gt_albedo), _load(args.gt_shading)
        mask = None
        if args.mask:
            mask = (_load(args.mask)[:1] > 0.5).astype(np.float64)
        shapes = {albedo.shape, shading.shape, gt_a.shape, gt_s.shape}
        if len(shapes) != 1:
            raise ValidationError(f"prediction and ground-truth shapes disagree: {sorted(shapes)}")
        dense_report(albedo, shading, gt_a, gt_s, mask, args.scale_invariant, report=report)
    if not args.judgements and not args.gt_albedo:
        raise ValidationError("give --judgements and/or dense ground truth")
    text = report.to_json()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)


def cmd_gradcheck(args):
    from .gradcheck import TOLERANCE, corrupted_filter_adjoint, run_suite

    if args.corrupt_adjoint:
        with corrupted_filter_adjoint():
            results = run_suite(args.seed, args.coords)
    else:
        results = run_suite(args.seed, args.coords)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:32s} max_rel_err={r.max_rel_error:.3e} ({r.seconds:.2f}s)")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks below {TOLERANCE:g}")
    return EXIT_OK if not failed else EXIT_INVALID


# ---------------------------------------------------------------- parser


def _filter_args(p):
    p.add_argument("--sigma-s", type=float, default=60.0, help="spatial scale of the domain filter (pixels)")
    p.add_argument("--sigma-r", type=float, default=0.1, help="range scale of the domain filter")
    p.add_argument("--iterations", type=int, default=3, help="domain-filter iterations")


def build_parser():
    parser = argparse.ArgumentParser(prog="intrinsic-decomp", description="Intrinsic image decomposition: synthetic data, training, "
                                     "inference, guided flattening and evaluation.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = {"formatter_class": argparse.ArgumentDefaultsHelpFormatter}

    p = sub.add_parser("synth", help="generate a synthetic Mondrian dataset", **fmt)
    p.add_argument("--n", type=int, default=8, help="number of samples")
    p.add_argument("--size", type=int, default=64, help="image size in pixels (>= 16)")
    p.add_argument("--regions", type=int, default=8, help="piecewise-constant albedo regions per image")
    p.add_argument("--bumps", type=int, default=3, help="Gaussian shading bumps per image")
    p.add_argument("--amplitude", type=float, default=0.6, help="shading bump amplitude, in (0, 1)")
    p.add_argument("--pairs", type=int, default=100, help="judgement pairs per image")
    p.add_argument("--seed", type=int, default=0, help="dataset seed; sample i depends only on (seed, i)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the full pipeline", **fmt)
    p.add_argument("--data", required=True, help="dataset directory written by synth")
    p.add_argument("--loss", choices=("iiw", "dense", "joint"), required=True,
                   help="pairwise judgements, dense ground truth, or both")
    p.add_argument("--steps", type=int, default=100, help="optimizer steps to run")
    p.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    p.add_argument("--batch-size", type=int, default=1, help="images per optimizer step")
    p.add_argument("--decay-steps", type=int, default=0,
                   help="cosine learning-rate decay horizon in steps (0: constant rate)")
    p.add_argument("--seed", type=int, default=0, help="initialisation and data-order seed")
    p.add_argument("--out", required=True, help="directory for checkpoint.bin, loss.csv and config.txt")
    p.add_argument("--checkpoint-every", type=int, default=0, help="also checkpoint every N steps (0: only at the end)")
    p.add_argument("--log-every", type=int, default=0, help="log the loss every N steps (with -v)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--blocks", type=int, default=4, help="residual blocks in the direct network")
    p.add_argument("--channels", type=int, default=16, help="feature channels in the direct network")
    p.add_argument("--dilation", type=int, default=2, help="dilation of the residual and guidance convolutions")
    p.add_argument("--branch-split", type=int, default=2, help="shared blocks before the albedo/shading branches (dense)")
    p.add_argument("--guide-layers", type=int, default=6, help="convolution layers in the guidance network")
    p.add_argument("--guide-channels", type=int, default=16, help="channels in the guidance network")
    p.add_argument("--delta", type=float, default=0.1, help="equal-reflectance threshold of the pair rule")
    p.add_argument("--xi", type=float, default=0.05, help="hinge margin")
    p.add_argument("--joint-scale", type=float, default=2.0, help="weight of the iiw term in joint mode")
    _filter_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="decompose an image with a trained checkpoint", **fmt)
    p.add_argument("--checkpoint", required=True, help="checkpoint.bin written by train")
    p.add_argument("--image", required=True, help="input PNG/PPM/PGM")
    p.add_argument("--out", required=True, help="directory for albedo, shading, edge and flat-albedo PNGs")
    p.add_argument("--bit-depth", type=int, choices=(8, 16), default=16, help="PNG bit depth")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("flatten", help="apply the guided domain filter to an image", **fmt)
    p.add_argument("--image", required=True, help="image to flatten")
    p.add_argument("--guidance", help="guidance image; defaults to the image's own edge map")
    p.add_argument("--guidance-scale", type=float, default=1.0, help="multiplier applied to the guidance image")
    p.add_argument("--out", required=True, help="output image path")
    p.add_argument("--bit-depth", type=int, choices=(8, 16), default=16, help="output bit depth")
    _filter_args(p)
    p.set_defaults(func=cmd_flatten)

    p = sub.add_parser("eval", help="score predictions", **fmt)
    p.add_argument("--albedo", required=True, help="predicted albedo image")
    p.add_argument("--shading", help="predicted shading image (dense metrics)")
    p.add_argument("--judgements", help="judgement JSON; enables WHDR")
    p.add_argument("--gt-albedo", help="ground-truth albedo (dense metrics)")
    p.add_argument("--gt-shading", help="ground-truth shading (dense metrics)")
    p.add_argument("--mask", help="validity mask image; pixels > 0.5 are scored")
    p.add_argument("--scale-invariant", action="store_true", help="fit a global scale before MSE")
    p.add_argument("--delta", type=float, default=0.1, help="WHDR equal-reflectance threshold")
    p.add_argument("--out", help="write the MetricsReport JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite", **fmt)
    p.add_argument("--seed", type=int, default=0, help="seed for inputs and probed coordinates")
    p.add_argument("--coords", type=int, default=10, help="coordinates probed per input")
    p.add_argument("--corrupt-adjoint", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    for action in sub.choices.values():
        action.add_argument("--config", help="key = value file with option defaults")
    return parser


def _config_path(argv):
    for k, tok in enumerate(argv):
        if tok == "--config" and k + 1 < len(argv):
            return argv[k + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(parser, argv):
    """Parse ``argv``, taking option defaults from ``--config`` if given.

    Config values only fill in options not given on the command line; keys
    that are not options of the chosen subcommand are rejected.
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    path = _config_path(argv)
    commands = parser._subparsers._group_actions[0].choices
    command = next((tok for tok in argv if tok in commands), None)
    if path is None or command is None:
        return parser.parse_args(argv)
    try:
        values = read_config_file(path)
    except OSError as exc:
        raise ValidationError(f"cannot read config file: {exc}") from exc
    subparser = commands[command]
    known = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, raw in values.items():
        if key not in known or key in ("help", "config"):
            raise ValidationError(f"unknown config key {key!r} for {command}")
        action = known[key]
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        else:
            try:
                defaults[key] = action.type(raw) if action.type else raw
            except ValueError as exc:
                raise ValidationError(f"invalid value {raw!r} for {key}") from exc
            if action.choices and defaults[key] not in action.choices:
                raise ValidationError(f"invalid value {raw!r} for {key}")
        action.required = False
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None):
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .checkpoint import CheckpointError
    from .dataio import ImageFormatError, JudgementError

    try:
        code = args.func(args)
    except (ValidationError, CheckpointError, ImageFormatError, JudgementError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        log.exception("command failed")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return code or EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
