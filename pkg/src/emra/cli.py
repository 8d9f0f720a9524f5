"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data or file-format
error, 3 numeric failure (non-finite training, failed gradient check).
"""
import argparse
import dataclasses
import os
import sys

import numpy as np

from . import config as cfgmod
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import load_dataset, save_dataset
from .encoder import PRESETS
from .errors import ConfigError, DataError, EmraError, NumericError
from .gradcheck import model_grad_check, tiny_problem
from .head import multiscale_infer
from .metrics import LabelCodec, format_kv, format_report
from .model import SegmentationModel
from .netpbm import load_image, save_image
from .render import render_class_attention, render_entropy, render_prediction
from .synthetic import gen_synthetic
from .tensor import resize_array
from .train import TrainConfig, evaluate, train

GRADCHECK_TOL = 1e-5


class UsageError(EmraError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text):
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("need at least one value")
    return vals


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value config file")
    common.add_argument("--seed", type=int, help="seed for data, initialisation and training")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--model", choices=sorted(PRESETS), help="architecture preset")
    common.add_argument("--scales", type=_floats, metavar="LIST", help="inference scales, e.g. 0.75,1,1.25")
    common.add_argument("--flip", action="store_true", default=None, help="add mirrored inference")
    common.add_argument("--window", type=int, metavar="N", help="sliding-window size")
    common.add_argument("--stride", type=int, metavar="N", help="sliding-window stride")
    common.add_argument("--data", metavar="DIR", help="dataset directory")
    common.add_argument("--checkpoint", metavar="PATH", help="checkpoint file")
    common.add_argument("--epochs", type=int, metavar="N", help="training epochs")

    parser = _Parser(prog="emra", description="Region-proxy ViT segmentation toolkit.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--resume", action="store_true", help="continue from --checkpoint")
    sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset")
    p = sub.add_parser("infer", parents=[common], help="predict one image")
    p.add_argument("--input", metavar="PATH", required=True, help="P6 image")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the tiny model")
    p = sub.add_parser("export-maps", parents=[common], help="write proxy maps for one image")
    p.add_argument("--input", metavar="PATH", required=True, help="P6 image")
    return parser


def resolve(args):
    """Defaults, then the config file, then flags."""
    run = cfgmod.RunConfig()
    if args.config:
        run = cfgmod.load(args.config, run)
    if args.model:
        run.use_preset(args.model)
    if args.seed is not None:
        run.train.seed = args.seed
        run.data.seed = args.seed
    if args.out:
        run.paths.out = args.out
    if args.data:
        run.paths.data = args.data
    if args.checkpoint:
        run.paths.checkpoint = args.checkpoint
    if args.epochs is not None:
        run.train.epochs = args.epochs
    if args.scales:
        run.infer.scales = args.scales
    if args.flip:
        run.infer.flip = True
    if args.window is not None:
        run.infer.window = args.window
    if args.stride is not None:
        run.infer.stride = args.stride
    return run


def _train_config(run):
    return TrainConfig(**dataclasses.asdict(run.train))


def _load_model(run):
    ck = load_checkpoint(run.paths.checkpoint)
    return SegmentationModel(ck.model, ck.params), ck


def _infer_kwargs(run, model):
    window = run.infer.window or model.config.encoder.image_size
    return dict(scales=run.infer.scales, flip=run.infer.flip, window=window,
                stride=run.infer.stride or None)


def cmd_gen_data(run, args, out):
    pairs = gen_synthetic(run.synthetic_spec())
    directory = args.out or run.paths.data
    save_dataset(directory, pairs)
    print(f"wrote {len(pairs)} image/label pairs to {directory}", file=out)


def _dataset(run):
    if os.path.isdir(run.paths.data):
        return load_dataset(run.paths.data)
    raise DataError(f"dataset directory {run.paths.data} does not exist (run gen-data first)")


def cmd_train(run, args, out):
    data = _dataset(run)
    tcfg = _train_config(run)
    state = None
    if args.resume:
        model, ck = _load_model(run)
        state = ck.state
        tcfg = dataclasses.replace(ck.train, epochs=tcfg.epochs)
    else:
        model = SegmentationModel.create(run.model_config(), seed=tcfg.seed, dtype=tcfg.dtype)
    os.makedirs(os.path.dirname(run.paths.checkpoint) or ".", exist_ok=True)

    def report(entry, st):
        print(f"epoch={entry.epoch} lr={entry.lr:.6g} loss={entry.loss:.6f} pixel_acc={entry.pixel_acc:.4f}",
              file=out)
        save_checkpoint(run.paths.checkpoint, model.config, model.params, tcfg, st)

    result = train(model, data, tcfg, state=state, on_epoch=report)
    save_checkpoint(run.paths.checkpoint, model.config, result.params, tcfg, result.state)
    print(f"saved checkpoint {run.paths.checkpoint} after {result.state.epoch} epochs", file=out)


def cmd_eval(run, args, out):
    model, _ = _load_model(run)
    data = _dataset(run)
    kw = _infer_kwargs(run, model)
    conf, result = evaluate(model, data, kw["scales"], kw["flip"], kw["window"], kw["stride"])
    names = LabelCodec().subset(model.config.encoder.num_classes).names
    print(format_report(result, names), file=out)
    os.makedirs(run.paths.out, exist_ok=True)
    with open(os.path.join(run.paths.out, "metrics.txt"), "w", encoding="utf-8") as fh:
        fh.write(format_kv(result, names))


def _predict(model, run, image):
    return multiscale_infer(model.predict_probs, image, **_infer_kwargs(run, model))


def cmd_infer(run, args, out):
    model, _ = _load_model(run)
    image = load_image(args.input)
    pred = _predict(model, run, image)
    os.makedirs(run.paths.out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.input))[0]
    path = os.path.join(run.paths.out, f"{stem}_pred.ppm")
    codec = LabelCodec().subset(model.config.encoder.num_classes)
    save_image(path, render_prediction(pred.class_map, codec))
    print(f"wrote {path}", file=out)


def cmd_export_maps(run, args, out):
    model, _ = _load_model(run)
    enc = model.config.encoder
    image = load_image(args.input)
    # proxy maps describe one model-sized view; other sizes are resampled
    view = resize_array(image.astype(np.float32) / np.float32(255.0), enc.image_size, enc.image_size)
    fwd = model.logits(view)
    os.makedirs(run.paths.out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.input))[0]
    written = []
    if fwd.association is not None:
        path = os.path.join(run.paths.out, f"{stem}_hsmf_entropy.pgm")
        save_image(path, render_entropy(fwd.association.q.data[0]))
        written.append(path)
    if fwd.gca is not None:
        codec = LabelCodec().subset(enc.num_classes)
        maps = render_class_attention(fwd.gca.refined_class_to_patch.data[0], enc.grid, enc.patch_size)
        for name, img in zip(codec.names, maps):
            path = os.path.join(run.paths.out, f"{stem}_gca_{name}.pgm")
            save_image(path, img)
            written.append(path)
    pred = _predict(model, run, image)
    path = os.path.join(run.paths.out, f"{stem}_pred.ppm")
    save_image(path, render_prediction(pred.class_map, LabelCodec().subset(enc.num_classes)))
    written.append(path)
    for p in written:
        print(f"wrote {p}", file=out)


def cmd_gradcheck(run, args, out):
    cfg = run.model_config()
    seed = run.train.seed
    params, image, label = tiny_problem(cfg, seed)
    report = model_grad_check(cfg, params, image, label)
    for group, err in sorted(report.by_group().items()):
        print(f"{group:28s} {err:.3e}", file=out)
    verdict = "PASS" if report.max_error <= GRADCHECK_TOL else "FAIL"
    print(f"max_rel_error={report.max_error:.3e} tol={GRADCHECK_TOL:g} {verdict} "
          f"({report.refined} coordinates re-probed in extended precision, {report.seconds:.1f}s)", file=out)
    if report.max_error > GRADCHECK_TOL:
        raise NumericError(f"gradient check failed: {report.max_error:.3e} > {GRADCHECK_TOL:g}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "gradcheck": cmd_gradcheck,
    "export-maps": cmd_export_maps,
}


def main(argv=None, out=None, err=None):
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_usage(err)
            return 1
        run = resolve(args)
        COMMANDS[args.command](run, args, out)
        return 0
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=err)
        if isinstance(exc, UsageError):
            parser.print_usage(err)
        return 1
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=err)
        return 2
    except NumericError as exc:
        print(f"error: {exc}", file=err)
        return 3


if __name__ == "__main__":
    sys.exit(main())
