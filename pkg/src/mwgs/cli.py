"""``mwgs`` command line: synthesis, training, rendering, evaluation and diagnostics.

Exit codes: 0 success, 1 self-test failure, 2 config or input error,
3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, io, selftest
from .config import RunConfig, describe_defaults, load_config
from .errors import InvalidConfig, MissingEntry, MWGSError, TrainingDivergence

EXIT_OK, EXIT_SELFTEST, EXIT_INPUT, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(MWGSError):
    pass


# --------------------------------------------------------------------------
# configuration plumbing


def _threads(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get("MWGS_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise InvalidConfig(f"MWGS_THREADS must be an integer, got {env!r}") from None
    return None


def run_config(args) -> RunConfig:
    """Defaults, then ``--config``, then ``--set`` pairs, then dedicated flags."""
    cfg = load_config(args.config) if args.config else RunConfig()
    pairs = list(args.set or [])
    for flag in ("dataset", "checkpoint", "output", "seed", "steps"):
        val = getattr(args, flag, None)
        if val is not None:
            pairs.append(f"{flag}={json.dumps(val)}")
    threads = _threads(args)
    if threads is not None:
        pairs.append(f"threads={threads}")
    return cfg.with_overrides(pairs)


def _load_trained(args):
    """Checkpoint model with run-time keys (threads, tile size) taken from the command line."""
    from .synth import load_dataset
    from .train import load_checkpoint

    cfg = run_config(args)
    if not cfg.checkpoint:
        raise UsageError("a checkpoint is required (--checkpoint or the 'checkpoint' config key)")
    path = Path(cfg.checkpoint)
    model, _, saved = load_checkpoint(path)
    runtime = saved.to_dict()
    runtime.update(threads=cfg.threads, tile_size=cfg.tile_size, checkpoint=str(path))
    model.cfg = RunConfig.from_dict(runtime)
    root = cfg.dataset or saved.dataset
    if not root:
        raise UsageError("a dataset is required (--dataset)")
    return model, load_dataset(root)


def _camera(ds, args):
    from .scene import Camera

    if getattr(args, "camera", None):
        return Camera.from_dict(json.loads(Path(args.camera).read_text()))
    view = args.view or ds.split_ids("train")[0]
    if view not in ds.cameras:
        raise MissingEntry(f"unknown view id {view!r}")
    return ds.cameras[view]


def _bundle(model, ds, image_id):
    from .train import reference_image

    if image_id not in ds.images:
        raise MissingEntry(f"unknown image id {image_id!r}")
    if model.encoder.mode == "grid" and image_id not in model.encoder.image_ids(model.params):
        raise MissingEntry(f"image {image_id!r} has no learned bundle (grid mode knows training views only)")
    return model.encode(image_id, reference_image(model, ds, image_id))


def _default_bundle_id(ds, args):
    if args.bundle:
        return args.bundle
    view = getattr(args, "view", None) or ds.split_ids("train")[0]
    return view if ds.splits.get(view) == "train" else ds.references.get(view, view)


def _write_json(obj, path=None):
    text = json.dumps(obj, indent=1, sort_keys=True)
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text + "\n")
    print(text)


# --------------------------------------------------------------------------
# commands


def cmd_synth(args):
    from .synth import SyntheticSceneSpec, synthesize

    doc = {}
    if args.spec:
        doc = _read_json(args.spec)
    if args.seed is not None:
        doc["seed"] = args.seed
    spec = SyntheticSceneSpec.from_dict(doc)
    manifest = synthesize(spec, args.out)
    digest = io.sha256(Path(args.out) / "manifest.json")
    n_images = sum(f.startswith("images/") for f in manifest["files"])
    print(json.dumps({"out": str(args.out), "images": n_images, "manifest_sha256": digest}))
    return EXIT_OK


def cmd_train(args):
    from .train import train

    cfg = run_config(args)
    if not cfg.dataset:
        raise UsageError("a dataset is required (--dataset or the 'dataset' config key)")
    trainer = train(cfg)
    print(json.dumps(trainer.summary, sort_keys=True))
    return EXIT_OK


def cmd_eval(args):
    from .train import evaluate

    model, ds = _load_trained(args)
    _write_json(evaluate(model, ds, args.split), args.out)
    return EXIT_OK


def cmd_render(args):
    model, ds = _load_trained(args)
    cam = _camera(ds, args)
    img = model.render_view(cam, _bundle(model, ds, _default_bundle_id(ds, args))).image
    io.write_image(args.out, img)
    return EXIT_OK


def cmd_transfer(args):
    model, ds = _load_trained(args)
    cam = _camera(ds, args)
    ref = args.reference
    if ref in ds.images:
        bundle = _bundle(model, ds, ref)
    elif Path(ref).is_file():
        if model.encoder.mode == "grid":
            raise UsageError("external reference images need the conv encoder; "
                             "grid mode only has bundles for training image ids")
        bundle = model.encode(None, io.read_image(ref))
    else:
        raise MissingEntry(f"reference {ref!r} is neither a dataset image id nor a file")
    io.write_image(args.out, model.render_view(cam, bundle).image)
    return EXIT_OK


def cmd_tune(args):
    model, ds = _load_trained(args)
    cam = _camera(ds, args)
    overrides = {"f_g": args.fg, "f_r": args.fr, "omega_r": args.omega_r, "omega_v": args.omega_v}
    bundle = _bundle(model, ds, _default_bundle_id(ds, args))
    io.write_image(args.out, model.render_view(cam, bundle, overrides).image)
    return EXIT_OK


def cmd_bench(args):
    from .bench import bench, replicate_anchors

    model, ds = _load_trained(args)
    if args.replicate > 1:
        model = replicate_anchors(model, args.replicate, seed=model.cfg.seed)
    cam = _camera(ds, args)
    bid = _default_bundle_id(ds, args)
    report = bench(model, cam, lambda: _bundle(model, ds, bid), frames=args.frames,
                   warmup=args.warmup, dtype=np.float32 if args.float32 else np.float64)
    _write_json(report, args.out)
    return EXIT_OK


def cmd_selftest(args):
    names = args.checks or list(selftest.CHECKS)
    unknown = sorted(set(names) - set(selftest.CHECKS))
    if unknown:
        raise UsageError(f"unknown checks {unknown}; choose from {sorted(selftest.CHECKS)}")
    results = selftest.run(names)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"selftest failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_SELFTEST
    return EXIT_OK


def cmd_dump_attention(args):
    model, ds = _load_trained(args)
    hist = model.attention(_camera(ds, args))
    peak = max(int(hist.max()), 1)
    io.write_ppm(args.out, hist / peak)
    io.write_raw(str(args.out) + ".raw", hist.astype(np.float64))
    print(json.dumps({"out": str(args.out), "total_samples": int(hist.sum()), "peak": peak}))
    return EXIT_OK


def cmd_dump_bundle(args):
    model, ds = _load_trained(args)
    image_id = args.bundle or ds.split_ids("train")[0]
    b = _bundle(model, ds, image_id)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "f_g.json").write_text(json.dumps(b.f_g.tolist()))
    io.write_raw(out / "fmap.raw", b.fmap)
    io.write_raw(out / "vm.raw", b.vm)
    print(json.dumps({"out": str(out), "image_id": image_id, "fmap_shape": list(b.fmap.shape)}))
    return EXIT_OK


def _read_json(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise InvalidConfig(f"{path}: expected a JSON object")
    return doc


# --------------------------------------------------------------------------
# parser


def _common(p, dataset=True, checkpoint=True):
    p.add_argument("--config", help="JSON run config (keys listed under 'mwgs --help')")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="render threads (falls back to $MWGS_THREADS)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key; VALUE is parsed as JSON when possible")
    if dataset:
        p.add_argument("--dataset")
    if checkpoint:
        p.add_argument("--checkpoint")


def _view_args(p):
    p.add_argument("--view", help="dataset image id whose camera is rendered")
    p.add_argument("--camera", help="camera JSON file instead of a dataset view")


def build_parser():
    epilog = "config keys and defaults:\n" + describe_defaults()
    parser = argparse.ArgumentParser(
        prog="mwgs", description=__doc__.splitlines()[0], epilog=epilog,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"mwgs {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=epilog,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(fn=fn)
        return p

    p = add("synth", cmd_synth, "generate a synthetic multi-appearance dataset")
    p.add_argument("spec", nargs="?", help="JSON scene spec (defaults used when omitted)")
    p.add_argument("out")
    p.add_argument("--seed", type=int)

    p = add("train", cmd_train, "train a model; writes checkpoint, log and summary")
    _common(p)
    p.add_argument("--output")
    p.add_argument("--steps", type=int)

    p = add("eval", cmd_eval, "PSNR/SSIM table for a split")
    _common(p)
    p.add_argument("--split", default="train", choices=["train", "test", "all"])
    p.add_argument("--out")

    p = add("render", cmd_render, "render one view")
    _common(p)
    _view_args(p)
    p.add_argument("--bundle", help="image id whose appearance is used")
    p.add_argument("--out", required=True)

    p = add("transfer", cmd_transfer, "render a view under another image's appearance")
    _common(p)
    _view_args(p)
    p.add_argument("--reference", required=True, help="dataset image id or image file (conv mode)")
    p.add_argument("--out", required=True)

    p = add("tune", cmd_tune, "render with scaled appearance weights")
    _common(p)
    _view_args(p)
    p.add_argument("--bundle")
    for flag in ("--fg", "--fr", "--omega-r", "--omega-v"):
        p.add_argument(flag, type=float, default=1.0)
    p.add_argument("--out", required=True)

    p = add("bench", cmd_bench, "frame-time report including feature extraction")
    _common(p)
    _view_args(p)
    p.add_argument("--bundle")
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--replicate", type=int, default=1, help="repeat every anchor N times")
    p.add_argument("--float32", action="store_true", help="rasterize in 32-bit floats")
    p.add_argument("--out")

    p = add("selftest", cmd_selftest, "numerical self-checks")
    p.add_argument("checks", nargs="*", help=f"subset of {', '.join(selftest.CHECKS)}")

    p = add("dump-attention", cmd_dump_attention, "per-texel sample-count map as PPM")
    _common(p)
    _view_args(p)
    p.add_argument("--out", required=True)

    p = add("dump-bundle", cmd_dump_bundle, "write f_g, feature map and visibility map")
    _common(p)
    p.add_argument("--bundle")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        from threadpoolctl import threadpool_limits

        # renders are multithreaded per tile; BLAS stays single-threaded so
        # reductions are the same whatever --threads says
        with threadpool_limits(1):
            return args.fn(args)
    except TrainingDivergence as exc:
        print(f"error: {exc}; state dumped to {exc.dump_path}", file=sys.stderr)
        return EXIT_DIVERGED
    except MWGSError as exc:
        msg = exc.args[0] if exc.args else exc.__class__.__name__
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INPUT
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
