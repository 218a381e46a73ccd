"""``densereg`` command-line front end.

Every subcommand that produces artifacts also writes a run manifest (JSON,
no timestamps) next to them; ``densereg replay MANIFEST`` re-runs it. Errors
end with a nonzero exit and one line on stderr of the form
``error: E_CODE: message``.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import shlex
import sys
from dataclasses import asdict

import numpy as np

from . import __version__

EXIT_USAGE = 2
EXIT_FAILURE = 1


class CLIError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError("E_USAGE", message)


# ---------------------------------------------------------------- helpers

def _floats(text, n=None, what="value"):
    try:
        vals = [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise CLIError("E_USAGE", f"bad {what} list {text!r}") from None
    if n is not None and len(vals) != n:
        raise CLIError("E_USAGE", f"{what} needs {n} comma-separated numbers")
    return vals


def _ints(text, what="value"):
    try:
        return [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise CLIError("E_USAGE", f"bad {what} list {text!r}") from None


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment; keys may use dashes or underscores."""
    out = {}
    try:
        with open(path) as fp:
            lines = fp.readlines()
    except OSError as exc:
        raise CLIError("E_IO", f"cannot read config {path}: {exc.strerror}") from None
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CLIError("E_CONFIG", f"{path}:{n}: expected key = value")
        key, val = (t.strip() for t in line.split("=", 1))
        if len(val) >= 2 and val[0] == val[-1] and val[0] in "\"'":
            val = val[1:-1]
        out[key.replace("-", "_")] = val
    return out


def _dump_json(path, obj):
    with open(path, "w") as fp:
        json.dump(obj, fp, sort_keys=True, indent=1)
        fp.write("\n")


def _manifest(path, command, args, inputs, outputs, seed=None):
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command", "config")}
    _dump_json(path, {
        "command": command,
        "config": config,
        "inputs": list(inputs),
        "outputs": list(outputs),
        "seed": seed,
        "version": __version__,
    })


def _check_magic(path, magic):
    with open(path, "rb") as fp:
        head = fp.read(len(magic))
    if head != magic:
        raise CLIError("E_OUTPUT", f"{path} failed its format check")


def _open_text(path):
    try:
        return open(path, newline="")
    except OSError as exc:
        raise CLIError("E_IO", f"cannot open {path}: {exc.strerror}") from None


def _open_bin(path):
    try:
        return open(path, "rb")
    except OSError as exc:
        raise CLIError("E_IO", f"cannot open {path}: {exc.strerror}") from None


def _parent(path):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)


def _manifest_path(out):
    return out + ".manifest.json"


# ---------------------------------------------------------------- templates

def _load_template(args):
    from .atlas import load_mesh, read_atlas_csv
    from .synth import grid_patch_template, head_template

    if args.mesh:
        with _open_text(args.mesh) as fp:
            mesh = load_mesh(fp.read())
        atlas = None
        if getattr(args, "atlas", None):
            with _open_text(args.atlas) as fp:
                atlas = read_atlas_csv(fp)
        return mesh, atlas, None
    if args.template == "head":
        mesh, atlas, axis = head_template()
        return mesh, atlas, axis
    if args.template == "grid":
        mesh = grid_patch_template()
        return mesh, None, None
    raise CLIError("E_USAGE", "give --mesh or --template")


# ---------------------------------------------------------------- commands

def cmd_unwrap(args):
    from .atlas import Axis, cylindrical_unwrap, patch_mds_unwrap, write_atlas_csv

    mesh, _, axis = _load_template(args)
    if args.method == "cylinder":
        if args.axis_origin or args.axis_direction or args.axis_reference:
            origin = _floats(args.axis_origin or "0,0,0", 3, "axis origin")
            direction = _floats(args.axis_direction or "0,1,0", 3, "axis direction")
            ref = _floats(args.axis_reference, 3, "axis reference") if args.axis_reference else None
            axis = Axis(origin, direction, ref)
        elif axis is None:
            axis = Axis((0.0, 0.0, 0.0), (0.0, 1.0, 0.0))
        atlas = cylindrical_unwrap(mesh, axis)
    else:
        atlas = patch_mds_unwrap(mesh, metric=args.metric)
    _parent(args.out)
    with open(args.out, "w", newline="") as fp:
        write_atlas_csv(atlas, fp)
    with open(args.out) as fp:
        if not fp.readline().startswith("vertex,patch,u,v"):
            raise CLIError("E_OUTPUT", f"{args.out} failed its format check")
    _manifest(_manifest_path(args.out), "unwrap", args, [args.mesh or f"template:{args.template}"], [args.out])
    print(f"wrote {args.out} ({mesh.n_vertices} vertices, {atlas.n_patches} charts)")


def _camera(args, size):
    from .fields import Camera

    if args.camera:
        with _open_text(args.camera) as fp:
            try:
                return Camera.from_dict(json.load(fp))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CLIError("E_FORMAT", f"bad camera file {args.camera}: {exc}") from None
    return Camera.looking_down_z(size, size, args.focal)


def cmd_rasterize(args):
    from .fields import write_field
    from .raster import rasterize_correspondence
    from .synth import Pose, pose_vertices

    mesh, atlas, _ = _load_template(args)
    if atlas is None:
        raise CLIError("E_USAGE", "rasterize needs --atlas with --mesh")
    if args.pose:
        with _open_text(args.pose) as fp:
            try:
                pose = Pose(**json.load(fp))
            except (json.JSONDecodeError, TypeError) as exc:
                raise CLIError("E_FORMAT", f"bad pose file {args.pose}: {exc}") from None
    else:
        pose = Pose(args.yaw, args.pitch, args.roll, args.scale, args.tx, args.ty, args.tz)
    cam = _camera(args, args.size)
    fld = rasterize_correspondence(pose_vertices(mesh.vertices, pose), mesh, atlas, cam)
    _parent(args.out)
    with open(args.out, "wb") as fp:
        write_field(fp, fld)
    _check_magic(args.out, b"DRF1")
    _manifest(_manifest_path(args.out), "rasterize", args, [args.mesh or f"template:{args.template}"], [args.out])
    print(f"wrote {args.out} ({int(fld.mask.sum())} foreground pixels)")


def _synth_params(args):
    from .synth import SynthParams

    p = SynthParams(size=args.size, noise=args.noise)
    return p.validate()


def cmd_synth(args):
    from .synth import head_landmarks, synth_dataset, write_dataset

    if args.count < 1:
        raise CLIError("E_USAGE", "--count must be at least 1")
    params = _synth_params(args)
    samples = synth_dataset(args.seed, args.count, params)
    written = write_dataset(args.out, samples, head_landmarks().names)
    lm_path = os.path.join(args.out, "landmarks.json")
    _dump_json(lm_path, head_landmarks().to_dict())
    for name in written:
        if name.endswith(".drf"):
            _check_magic(os.path.join(args.out, name), b"DRF1")
        elif name.endswith(".ppm"):
            _check_magic(os.path.join(args.out, name), b"P6")
    _manifest(os.path.join(args.out, "manifest.json"), "synth", args, [],
              written + ["landmarks.json"], seed=args.seed)
    print(f"wrote {args.count} samples to {args.out}")


def _train_config(args):
    from .codec import LossConfig
    from .regressor import TrainConfig

    try:
        return TrainConfig(
            seed=args.seed, epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
            decay_power=args.decay_power, warm_epochs=args.warm_epochs, warm_factor=args.warm_factor,
            momentum=args.momentum, clip_norm=args.clip_norm or None,
            loss=LossConfig(w_cls=args.w_cls, w_res=args.w_res), sigma=args.sigma,
        )
    except ValueError as exc:
        raise CLIError("E_CONFIG", str(exc)) from None


def _model(args, n_landmarks=0):
    from .regressor import CascadeModel, TinyFCN

    stage1 = TinyFCN(args.k, 1, _ints(args.channels, "channel"), act=args.act, padding=args.padding)
    if args.cascade:
        return CascadeModel(stage1, n_landmarks, _ints(args.stage2_channels, "channel"))
    return stage1


def cmd_train(args):
    from .regressor import make_batch, save_checkpoint, train
    from .regressor.train import write_loss_csv
    from .synth import read_dataset

    try:
        samples = read_dataset(args.data)
    except FileNotFoundError as exc:
        raise CLIError("E_IO", str(exc)) from None
    cfg = _train_config(args)
    n_lm = len(samples[0].landmarks)
    if args.cascade and n_lm == 0:
        raise CLIError("E_DATA", "cascade training needs landmarks in the dataset")
    model = _model(args, n_lm)
    data = make_batch(samples, args.k, 1, with_heatmaps=args.cascade, sigma=cfg.sigma)
    model, tlog = train(model, data, cfg)
    _parent(args.out)
    with open(args.out, "wb") as fp:
        save_checkpoint(fp, model)
    _check_magic(args.out, b"DRM1")
    loss_csv = args.loss_csv or os.path.splitext(args.out)[0] + "_loss.csv"
    with open(loss_csv, "w", newline="") as fp:
        write_loss_csv(fp, tlog)
    _manifest(_manifest_path(args.out), "train", args, [args.data], [args.out, loss_csv], seed=args.seed)
    print(f"wrote {args.out}; final loss {tlog.rows[-1]['total']:.6g}")


def cmd_predict(args):
    from .fields import read_ppm, write_field
    from .regressor import CascadeModel, load_checkpoint, predict_field
    from .regressor.model import HeadOutputs

    with _open_bin(args.model) as fp:
        model = load_checkpoint(fp)
    stage1 = model.stage1 if isinstance(model, CascadeModel) else model
    images = args.image
    outs = args.out
    if len(images) != len(outs):
        raise CLIError("E_USAGE", "give one --out per --image")
    for img_path, out in zip(images, outs):
        with _open_bin(img_path) as fp:
            img = read_ppm(fp).astype(np.float64) / 255.0
        if isinstance(model, CascadeModel):
            _, dense, _, _ = model.forward(img[None])
            fld = predict_field(HeadOutputs.split(dense, stage1.K)[0])
        else:
            fld = predict_field(model, img)
        _parent(out)
        with open(out, "wb") as fp:
            write_field(fp, fld)
        _check_magic(out, b"DRF1")
    _manifest(_manifest_path(outs[0]), "predict", args, [args.model] + list(images), list(outs))
    print(f"wrote {len(outs)} field(s)")


def _field_pairs(pred, gt):
    if os.path.isdir(gt):
        names = sorted(f for f in os.listdir(gt) if f.endswith(".drf"))
        if not os.path.isdir(pred):
            raise CLIError("E_USAGE", "--pred must be a directory when --gt is")
        return [(os.path.join(pred, n), os.path.join(gt, n)) for n in names]
    return [(pred, gt)]


def cmd_eval(args):
    from .evaluation import (
        best_detections,
        ced_metrics,
        extract_landmarks,
        uv_errors,
        write_ced_csv,
    )
    from .fields import read_field, read_landmarks_csv
    from .supervision import LandmarkSet

    pairs = _field_pairs(args.pred, args.gt)
    if not pairs:
        raise CLIError("E_IO", f"no .drf fields under {args.gt}")
    errs = []
    lm_errors = []
    lmset = None
    lm_file = os.path.join(args.gt, "landmarks.json") if os.path.isdir(args.gt) else None
    if lm_file and os.path.exists(lm_file):
        with open(lm_file) as fp:
            lmset = LandmarkSet.from_dict(json.load(fp))
    for p, g in pairs:
        with _open_bin(p) as fp:
            pf = read_field(fp)
        with _open_bin(g) as fp:
            gf = read_field(fp)
        if pf.mask.shape != gf.mask.shape:
            raise CLIError("E_DATA", f"{p} and {g} differ in size")
        errs.append(uv_errors(pf, gf))
        gl = g[:-4] + "_landmarks.csv"
        if lmset is not None and os.path.exists(gl):
            with open(gl, newline="") as fp:
                names, pos, vis = read_landmarks_csv(fp)
            det, found = best_detections(extract_landmarks(pf, lmset, args.tau))
            i_r, i_l = names.index("right_eye"), names.index("left_eye")
            iod = float(np.hypot(*(pos[i_r] - pos[i_l])))
            ok = vis & (iod > 0)
            if ok.any():
                d = np.where(found, np.hypot(*(det - pos).T), np.inf)[ok]
                lm_errors.append(float(np.sqrt(np.mean(d**2))) / iod if np.all(np.isfinite(d)) else np.inf)
    errors = np.concatenate(errs) if errs else np.zeros(0)
    if errors.size == 0:
        raise CLIError("E_DATA", "ground truth has no foreground pixels")
    os.makedirs(args.out_dir, exist_ok=True)
    curve, auc, fail = ced_metrics(errors, max_error=args.max_error)
    ced_path = os.path.join(args.out_dir, "uv_ced.csv")
    with open(ced_path, "w", newline="") as fp:
        write_ced_csv(fp, curve)
    rows = [("uv", "auc", auc), ("uv", "failure_pct", fail), ("uv", "pixels", errors.size),
            ("uv", "max_error", args.max_error)]
    outputs = [ced_path]
    if lm_errors:
        lcurve, lauc, lfail = ced_metrics(np.array(lm_errors), max_error=args.max_error)
        lpath = os.path.join(args.out_dir, "landmark_ced.csv")
        with open(lpath, "w", newline="") as fp:
            write_ced_csv(fp, lcurve)
        rows += [("landmarks", "auc", lauc), ("landmarks", "failure_pct", lfail),
                 ("landmarks", "samples", len(lm_errors))]
        outputs.append(lpath)
    mpath = os.path.join(args.out_dir, "metrics.csv")
    with open(mpath, "w", newline="") as fp:
        w = csv.writer(fp, lineterminator="\n")
        w.writerow(["scope", "metric", "value"])
        for r in rows:
            w.writerow([r[0], r[1], f"{r[2]:.9g}"])
    outputs.insert(0, mpath)
    _manifest(os.path.join(args.out_dir, "manifest.json"), "eval", args, [args.pred, args.gt], outputs)
    print(f"uv auc {auc:.4f} failure {fail:.2f}%")


def cmd_sweep(args):
    from .codec import LossConfig  # noqa: F401  (config round trip)
    from .evaluation import granularity_sweep, write_sweep_csv
    from .synth import read_dataset, synth_dataset

    ks = _ints(args.k, "K")
    if args.train_data:
        train_samples = read_dataset(args.train_data)
        test_samples = read_dataset(args.test_data) if args.test_data else None
        if test_samples is None:
            raise CLIError("E_USAGE", "--train-data needs --test-data")
    else:
        params = _synth_params(args)
        train_samples = synth_dataset(args.seed, args.train_count, params)
        test_samples = synth_dataset(args.seed + 1, args.test_count, params)
    cfg = _train_config(args)
    seeds = list(range(args.seeds))

    def progress(K, seed, rows):
        if not args.quiet:
            print(f"K={K} seed={seed} " + " ".join(f"{r['branch']}={r['auc']:.4f}" for r in rows), flush=True)

    try:
        res = granularity_sweep(train_samples, test_samples, ks, cfg, seeds,
                                {"channels": _ints(args.channels), "act": args.act, "padding": args.padding},
                                max_error=args.max_error, progress=progress)
    except ValueError as exc:
        raise CLIError("E_CONFIG", str(exc)) from None
    _parent(args.out)
    with open(args.out, "w", newline="") as fp:
        write_sweep_csv(fp, res)
    _manifest(_manifest_path(args.out), "sweep", args, [args.train_data or "synthetic"], [args.out], seed=args.seed)
    for (K, b), v in res.table().items():
        print(f"median K={K} {b}: {v:.4f}")


def _read_csv(path):
    with _open_text(path) as fp:
        rows = list(csv.DictReader(fp))
    if not rows:
        raise CLIError("E_FORMAT", f"{path} has no rows")
    return rows


def cmd_plot(args):
    from .plot import bar_chart, line_chart

    series = []
    try:
        if args.kind == "ced":
            for path in args.csv:
                rows = _read_csv(path)
                series.append((os.path.basename(path), [float(r["threshold"]) for r in rows],
                               [float(r["fraction"]) for r in rows]))
            svg = line_chart(series, args.title or "Cumulative error distribution", "error", "fraction",
                             ylim=(0.0, 1.0))
        elif args.kind == "loss":
            for path in args.csv:
                rows = _read_csv(path)
                for col in ("total", "cls_loss", "res_loss", "heatmap_loss"):
                    ys = [float(r[col]) for r in rows]
                    if any(ys):
                        series.append((f"{os.path.basename(path)}:{col}", [float(r["epoch"]) for r in rows], ys))
            svg = line_chart(series, args.title or "Training loss", "epoch", "loss")
        else:
            rows = [r for path in args.csv for r in _read_csv(path)]
            ks = sorted({int(r["K"]) for r in rows})
            vals = []
            for k in ks:
                vals.append([float(np.median([float(r["auc"]) for r in rows if int(r["K"]) == k and r["branch"] == b]
                                             or [0.0])) for b in ("q", "q+r")])
            svg = bar_chart([f"K={k}" for k in ks], ["q", "q+r"], vals, args.title or "Median AUC per granularity",
                            "K", "AUC")
    except (KeyError, ValueError) as exc:
        raise CLIError("E_FORMAT", f"unexpected CSV layout: {exc}") from None
    _parent(args.out)
    with open(args.out, "w") as fp:
        fp.write(svg)
    _check_magic(args.out, b"<svg")
    _manifest(_manifest_path(args.out), "plot", args, list(args.csv), [args.out])
    print(f"wrote {args.out}")


def cmd_replay(args):
    with _open_text(args.manifest) as fp:
        try:
            man = json.load(fp)
        except json.JSONDecodeError as exc:
            raise CLIError("E_FORMAT", f"bad manifest: {exc}") from None
    cmd = man.get("command")
    parser = build_parser()
    sub = _subparsers(parser)[cmd] if cmd in _subparsers(parser) else None
    if sub is None:
        raise CLIError("E_FORMAT", f"manifest names unknown command {cmd!r}")
    ns = sub.parse_args([a for a in _required_argv(sub, man["config"])])
    for k, v in man["config"].items():
        setattr(ns, k, v)
    ns.command = cmd
    ns.func = COMMANDS[cmd]
    return ns.func(ns)


def _required_argv(sub, config):
    argv = []
    for action in sub._actions:
        if action.required and action.dest in config:
            v = config[action.dest]
            argv.append(action.option_strings[0])
            argv.extend(str(x) for x in (v if isinstance(v, list) else [v]))
    return argv


COMMANDS = {
    "unwrap": cmd_unwrap,
    "rasterize": cmd_rasterize,
    "synth": cmd_synth,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "plot": cmd_plot,
    "replay": cmd_replay,
}


# ---------------------------------------------------------------- parser

def _add_template(p, atlas=False):
    p.add_argument("--mesh", help="template mesh (OBJ)")
    p.add_argument("--template", choices=("head", "grid"), default="head", help="built-in template when --mesh is absent")
    if atlas:
        p.add_argument("--atlas", help="atlas CSV for --mesh")


def _add_synth(p):
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.03)


def _add_model(p, with_k=True):
    if with_k:
        p.add_argument("--k", dest="k", type=int, default=8, help="bins per axis (1 = plain regression)")
    p.add_argument("--channels", default="16,16,16,16")
    p.add_argument("--act", choices=("tanh", "relu", "elu", "softplus"), default="tanh")
    p.add_argument("--padding", choices=("zero", "wrap"), default="zero")


def _add_train(p):
    from .regressor import TrainConfig

    d = TrainConfig()
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--decay-power", type=float, default=d.decay_power)
    p.add_argument("--warm-epochs", type=int, default=d.warm_epochs)
    p.add_argument("--warm-factor", type=float, default=d.warm_factor)
    p.add_argument("--momentum", type=float, default=d.momentum)
    p.add_argument("--clip-norm", type=float, default=d.clip_norm or 0.0)
    p.add_argument("--w-cls", type=float, default=d.loss.w_cls)
    p.add_argument("--w-res", type=float, default=None)
    p.add_argument("--sigma", type=float, default=d.sigma)


def build_parser():
    parser = _Parser(prog="densereg", description="Dense template correspondence by quantized regression.")
    parser.add_argument("--version", action="version", version=f"densereg {__version__}")
    subs = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = subs.add_parser("unwrap", help="template mesh -> atlas CSV")
    _add_template(p)
    p.add_argument("--method", choices=("cylinder", "mds"), default="cylinder")
    p.add_argument("--metric", choices=("exact", "edge"), default="exact")
    p.add_argument("--axis-origin")
    p.add_argument("--axis-direction")
    p.add_argument("--axis-reference")
    p.add_argument("--out", required=True)

    p = subs.add_parser("rasterize", help="posed template -> DRF1 field")
    _add_template(p, atlas=True)
    p.add_argument("--pose", help="pose JSON (yaw, pitch, roll, scale, tx, ty, tz)")
    for name, default in (("yaw", 0.0), ("pitch", 0.0), ("roll", 0.0), ("scale", 1.0), ("tx", 0.0), ("ty", 0.0), ("tz", 4.5)):
        p.add_argument(f"--{name}", type=float, default=default)
    p.add_argument("--camera", help="camera JSON")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--focal", type=float, default=110.0)
    p.add_argument("--out", required=True)

    p = subs.add_parser("synth", help="seeded synthetic dataset directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=64)
    _add_synth(p)
    p.add_argument("--out", required=True)

    p = subs.add_parser("train", help="dataset -> DRM1 checkpoint + loss CSV")
    p.add_argument("--data", required=True)
    _add_model(p)
    _add_train(p)
    p.add_argument("--cascade", action="store_true", help="add the landmark heatmap stage")
    p.add_argument("--stage2-channels", default="16")
    p.add_argument("--out", required=True)
    p.add_argument("--loss-csv")

    p = subs.add_parser("predict", help="checkpoint + image(s) -> DRF1 field(s)")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True, action="append")
    p.add_argument("--out", required=True, action="append")

    p = subs.add_parser("eval", help="predicted vs ground-truth fields -> metric CSVs")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--tau", type=float, default=0.04)
    p.add_argument("--max-error", type=float, default=0.1)
    p.add_argument("--out-dir", required=True)

    p = subs.add_parser("sweep", help="granularity sweep -> CSV K,branch,seed,auc")
    p.add_argument("--k", default="1,2,4,8")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--train-data")
    p.add_argument("--test-data")
    p.add_argument("--train-count", type=int, default=256)
    p.add_argument("--test-count", type=int, default=64)
    p.add_argument("--max-error", type=float, default=0.1)
    p.add_argument("--quiet", action="store_true")
    _add_synth(p)
    _add_model(p, with_k=False)
    _add_train(p)
    p.add_argument("--out", required=True)

    p = subs.add_parser("plot", help="CSV -> SVG chart")
    p.add_argument("--kind", choices=("ced", "loss", "sweep"), required=True)
    p.add_argument("--csv", required=True, action="append")
    p.add_argument("--title")
    p.add_argument("--out", required=True)

    p = subs.add_parser("replay", help="re-run a manifest")
    p.add_argument("manifest")

    for name, sp in _subparsers(parser).items():
        sp.add_argument("--config", help="key = value file; flags win on conflict")
        sp.set_defaults(func=COMMANDS[name])
    return parser


def _subparsers(parser):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return dict(action.choices)
    return {}


def _apply_config(parser, argv):
    """Defaults from ``--config`` files, so explicit flags still win."""
    if "--config" not in argv and not any(a.startswith("--config=") for a in argv):
        return
    pre = _Parser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    values = read_config_file(known.config)
    cmd = next((a for a in argv if not a.startswith("-")), None)
    sub = _subparsers(parser).get(cmd)
    if sub is None:
        return
    dests = {a.dest: a for a in sub._actions}
    for key, raw in values.items():
        if key not in dests or key in ("help", "config", "func"):
            raise CLIError("E_CONFIG", f"unknown config key {key!r} for {cmd}")
        action = dests[key]
        if isinstance(action, argparse._StoreTrueAction):
            val = raw.lower() in ("1", "true", "yes", "on")
        elif isinstance(action, argparse._AppendAction):
            val = shlex.split(raw)
        elif action.type is not None:
            try:
                val = action.type(raw)
            except ValueError:
                raise CLIError("E_CONFIG", f"bad value for {key}: {raw!r}") from None
        else:
            val = raw
        if action.choices is not None and val not in action.choices:
            raise CLIError("E_CONFIG", f"{key} must be one of {sorted(action.choices)}")
        sub.set_defaults(**{key: val})
        if action.required:
            action.required = False


def _limit_threads():
    n = os.environ.get("DENSEREG_THREADS", "1")
    try:
        n = int(n)
    except ValueError:
        raise CLIError("E_CONFIG", f"DENSEREG_THREADS must be an integer, got {n!r}") from None
    if n < 1:
        raise CLIError("E_CONFIG", "DENSEREG_THREADS must be at least 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    from .atlas import MeshError
    from .fields import FormatError
    from .regressor import TrainingError
    from .supervision import LandmarkError
    from .synth import SynthError

    try:
        parser = build_parser()
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise CLIError("E_USAGE", "missing subcommand")
        with _limit_threads():
            args.func(args)
        return 0
    except CLIError as exc:
        code, msg = exc.code, str(exc)
    except MeshError as exc:
        code, msg = "E_MESH", str(exc)
    except FormatError as exc:
        code, msg = "E_FORMAT", str(exc)
    except TrainingError as exc:
        code, msg = "E_TRAIN", str(exc)
    except SynthError as exc:
        code, msg = "E_SYNTH", str(exc)
    except LandmarkError as exc:
        code, msg = "E_LANDMARK", str(exc)
    except FileNotFoundError as exc:
        code, msg = "E_IO", f"{exc.filename or exc}: not found"
    except OSError as exc:
        code, msg = "E_IO", str(exc)
    except (ValueError, np.linalg.LinAlgError) as exc:
        code, msg = "E_INVARIANT", str(exc)
    msg = " ".join(msg.split())
    print(f"error: {code}: {msg}", file=sys.stderr)
    return EXIT_USAGE if code == "E_USAGE" else EXIT_FAILURE


def run(argv):
    """Run with captured output: ``(status, stdout, stderr)``."""
    out, err = io.StringIO(), io.StringIO()
    old = sys.stdout, sys.stderr
    sys.stdout, sys.stderr = out, err
    try:
        status = main(argv)
    except SystemExit as exc:  # --help / --version
        status = int(exc.code or 0)
    finally:
        sys.stdout, sys.stderr = old
    return status, out.getvalue(), err.getvalue()


if __name__ == "__main__":
    sys.exit(main())
