"""Command-line entry point: ``riginv <subcommand> ...``.

Exit codes: 0 ok, 1 usage, 2 data/config error, 3 numeric-check failure.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import RunConfig
from .datagen import (DatasetConfig, PerturbConfig, Synthesizer, load_manifest, preprocess_image,
                      synthesize_dataset)
from .mesh import RigidConfig, read_obj, write_obj
from .nnet.checkpoint import load_checkpoint
from .nnet.gradcheck import gradcheck_model
from .nnet.model import DEFAULT_FROZEN, DualBranchRegressor, ModelConfig, set_frozen
from .render import ImageRGB8
from .rig import demo_rig, load_rig, random_rig, rig_forward, save_rig
from .train import (direct_fit, evaluate, iterations_per_epoch, predict, train_loop)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("riginv")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _read_params(path) -> np.ndarray:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return np.asarray(data["values"] if isinstance(data, dict) else data, dtype=np.float64)


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1), encoding="utf-8")


def _rig_for(args, cfg: RunConfig, manifest=None):
    path = args.rig or cfg.get("rig") or (manifest or {}).get("rig")
    if not path:
        raise UsageError("no rig given (use --rig, the config file, or a dataset manifest)")
    return load_rig(path), str(path)


# -- subcommands --------------------------------------------------------------

def cmd_make_rig(args, cfg: RunConfig) -> int:
    if args.kind == "demo":
        rig = demo_rig(seed=args.seed)
    else:
        rig = random_rig(args.vertices, seed=args.seed)
    path = save_rig(rig, args.out)
    print(f"wrote {args.kind} rig with {rig.n_targets} controls, {rig.n_vertices} vertices: {path}")
    return EXIT_OK


def cmd_gen_data(args, cfg: RunConfig) -> int:
    cfg.set(args.rig, "rig")
    cfg.set(args.samples, "dataset", "total_samples")
    cfg.set(args.seed, "dataset", "seed")
    cfg.set(args.resolution, "dataset", "resolution")
    cfg.set(args.canonical, "dataset", "canonical_path")
    cfg.set(args.normal_space, "dataset", "normal_space")
    if args.rigid is not None:
        cfg.set(args.rigid, "dataset", "rigid", "max_rotation_deg")
        if args.rigid == 0 and args.translate is None:
            cfg.set(0.0, "dataset", "rigid", "max_translation_frac")
    cfg.set(args.translate, "dataset", "rigid", "max_translation_frac")
    if args.no_perturb:
        for key in ("p_drop", "p_add", "p_replace"):
            cfg.set(0.0, "perturb", key)
    if cfg.get("dataset", "seed") is None:
        raise UsageError("--seed is required for gen-data")
    rig, rig_path = _rig_for(args, cfg)
    ds = cfg.get("dataset")
    dcfg = DatasetConfig(total_samples=ds["total_samples"], resolution=ds["resolution"],
                         rigid=cfg.rigid(), seed=ds["seed"], canonical_path=ds["canonical_path"],
                         output_dir=args.out, normal_space=ds["normal_space"])
    manifest = synthesize_dataset(rig, dcfg, cfg.perturb(), rig_path=rig_path,
                                  threads=1 if args.deterministic else args.threads)
    cfg.write_echo(args.out)
    print(f"{len(manifest['samples'])} samples written to {args.out}")
    return EXIT_OK


def _freeze_groups(spec: str) -> tuple:
    if spec == "default":
        return DEFAULT_FROZEN
    if spec == "none":
        return ()
    return tuple(s for s in spec.split(",") if s)


def cmd_train(args, cfg: RunConfig) -> int:
    cfg.set(args.seed, "train", "seed")
    cfg.set(args.epochs, "train", "epochs")
    cfg.set(args.batch, "train", "batch_size")
    cfg.set(args.lr, "train", "lr")
    cfg.set(args.max_steps, "train", "max_steps")
    cfg.set(args.checkpoint_every, "train", "checkpoint_every")
    cfg.set(args.lambda_mesh, "loss", "lambda_mesh")
    if args.freeze is not None:
        cfg.set(list(_freeze_groups(args.freeze)), "train", "freeze")
    if args.seed is None and "train.seed" not in cfg.provenance:
        raise UsageError("--seed is required for train")
    cfg.set(args.data, "data", "path")
    cfg.set(args.limit, "data", "limit")
    data, limit = cfg.get("data", "path"), cfg.get("data", "limit")
    if not data:
        raise UsageError("no dataset given (use --data or the config file)")
    manifest = load_manifest(data)
    if limit is not None:
        if limit < 1:
            raise UsageError("--limit must be positive")
        manifest["samples"] = manifest["samples"][:limit]
    rig, rig_path = _rig_for(args, cfg, manifest)
    cfg.set(rig_path, "rig")
    if "model.resolution" not in cfg.provenance:
        cfg.set(manifest["resolution"], "model", "resolution")
    tcfg = cfg.train()

    if args.resume:
        model, _ = load_checkpoint(args.resume)
    else:
        model = DualBranchRegressor(cfg.model(), seed=tcfg.seed)
        set_frozen(model, tcfg.freeze)
    print("frozen groups: " + (", ".join(sorted(model.frozen)) or "(none)"))
    n = len(manifest["samples"])
    print(f"{n} samples, batch {tcfg.batch_size}: {iterations_per_epoch(n, tcfg.batch_size)} "
          f"iterations/epoch")
    cfg.write_echo(args.out)
    result = train_loop(manifest, model, tcfg, cfg.loss(), rig, args.out, resume=args.resume)
    final = result.rows[-1][4] if result.rows else float("nan")
    print(f"trained to step {result.steps}; last loss {final:.6g}; "
          f"checkpoint {result.checkpoints[-1] if result.checkpoints else '-'}")
    return EXIT_OK


def cmd_infer(args, cfg: RunConfig) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    res = model.cfg.resolution
    ia = preprocess_image(ImageRGB8.load_png(args.appearance), res)
    inn = preprocess_image(ImageRGB8.load_png(args.normal), res)
    values = predict(model, ia[None], inn[None])[0]
    payload = {"values": values.tolist()}
    if args.out:
        _write_json(args.out, payload)
    else:
        print(json.dumps(payload))
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    manifest = load_manifest(args.data)
    rig, rig_path = _rig_for(args, cfg, manifest)
    cfg.set(rig_path, "rig")
    model, _ = load_checkpoint(args.checkpoint)
    report = evaluate(model, manifest, rig, args.out, render=not args.no_render)
    cfg.write_echo(args.out)
    print(f"{len(report.samples)} samples; param MSE {report.param_mse}; "
          f"vertex L1 {report.vertex_l1}; vertex L2 {report.vertex_l2}")
    return EXIT_OK


def cmd_render(args, cfg: RunConfig) -> int:
    rig, rig_path = _rig_for(args, cfg)
    cfg.set(rig_path, "rig")
    cfg.set(args.resolution, "dataset", "resolution")
    params = _read_params(args.params)
    ds = cfg.get("dataset")
    synth = Synthesizer(rig, DatasetConfig(resolution=ds["resolution"], rigid=RigidConfig(0, 0),
                                           normal_space=ds["normal_space"]),
                        PerturbConfig.disabled())
    appearance, normal = synth.render_pair(params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    appearance.save_png(out / "appearance.png")
    normal.save_png(out / "normal.png")
    if args.mesh:
        write_obj(rig_forward(rig, params), out / "mesh.obj")
    cfg.write_echo(out)
    print(f"rendered {out / 'appearance.png'} and {out / 'normal.png'}")
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    mcfg = cfg.model()
    if args.resolution:
        mcfg = ModelConfig.from_dict({**mcfg.to_dict(), "resolution": args.resolution})
    tol = args.tol if args.tol is not None else (1e-5 if args.double else 1e-3)
    report = gradcheck_model(mcfg, n_weights=args.weights, seed=args.seed, double=args.double)
    ok = report.ok(tol)
    print(f"{'double' if args.double else 'single'} precision, {report.n_checked} weights: "
          f"max relative error {report.max_rel_error:.3e} (tol {tol:g}) "
          f"{'PASS' if ok else 'FAIL'}; worst {report.worst}")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_direct_fit(args, cfg: RunConfig) -> int:
    rig, rig_path = _rig_for(args, cfg)
    cfg.set(rig_path, "rig")
    truth = None
    if args.target:
        target = read_obj(args.target)
    elif args.params:
        truth = _read_params(args.params)
        target = rig_forward(rig, truth)
    else:
        raise UsageError("direct-fit needs --target OBJ or --params JSON")
    p = direct_fit(rig, target, steps=args.steps, lr=args.lr)
    residual = float(np.sqrt(np.mean((rig_forward(rig, p).positions - target.positions) ** 2)))
    result = {"values": p.tolist(), "rms_vertex_error": residual}
    if truth is not None:
        result["linf_param_error"] = float(np.abs(p - truth).max())
    if args.out:
        _write_json(Path(args.out) / "params.json", {"values": p.tolist()})
        _write_json(Path(args.out) / "fit.json", result)
        cfg.write_echo(args.out)
    msg = f"rms vertex error {residual:.3e}"
    if truth is not None:
        msg += f"; L-inf parameter error {result['linf_param_error']:.3e}"
    print(msg)
    if truth is not None and args.tol is not None and result["linf_param_error"] > args.tol:
        return EXIT_NUMERIC
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="riginv", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON config file (default: $RIGINV_CONFIG)")
    parser.add_argument("--threads", type=int, default=1, help="cap for BLAS/worker threads")
    parser.add_argument("--deterministic", action="store_true",
                        help="serial execution, one BLAS thread")
    parser.add_argument("-v", "--verbose", action="store_true")
    # the run-mode flags are accepted after the subcommand as well
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    common.add_argument("--deterministic", action="store_true", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    p = add("make-rig", help="write a procedural demo or random rig")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=("demo", "random"), default="demo")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vertices", type=int, default=200, help="random rigs only")
    p.set_defaults(func=cmd_make_rig)

    p = add("gen-data", help="synthesize the paired-render corpus")
    p.add_argument("--rig")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--canonical", help="canonical expressions JSON")
    p.add_argument("--no-perturb", action="store_true")
    p.add_argument("--rigid", type=float, help="rotation bound in degrees; 0 disables rigid augmentation")
    p.add_argument("--translate", type=float, help="translation bound, fraction of bbox diagonal")
    p.add_argument("--normal-space", choices=("tangent", "camera"))
    p.set_defaults(func=cmd_gen_data)

    p = add("train", help="train the dual-branch regressor")
    p.add_argument("--data", help="dataset directory or manifest.json")
    p.add_argument("--out", required=True)
    p.add_argument("--rig")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-mesh", type=float)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--freeze", help="'default', 'none' or comma-separated groups")
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.add_argument("--limit", type=int, help="train on the first N manifest samples only")
    p.set_defaults(func=cmd_train)

    p = add("infer", help="predict rig parameters from an image pair")
    p.add_argument("--appearance", required=True)
    p.add_argument("--normal", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_infer)

    p = add("eval", help="metrics and side-by-side renders on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rig")
    p.add_argument("--no-render", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = add("render", help="render both modalities for a parameter vector")
    p.add_argument("--rig")
    p.add_argument("--params", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int)
    p.add_argument("--mesh", action="store_true", help="also write the decoded mesh as OBJ")
    p.set_defaults(func=cmd_render)

    p = add("gradcheck", help="finite-difference check of the full network")
    p.add_argument("--double", action="store_true")
    p.add_argument("--weights", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float)
    p.add_argument("--resolution", type=int)
    p.set_defaults(func=cmd_gradcheck)

    p = add("direct-fit", help="fit rig parameters to a mesh by gradient descent")
    p.add_argument("--rig")
    p.add_argument("--target", help="target mesh OBJ (rig vertex order)")
    p.add_argument("--params", help="ground-truth params JSON; target = rig(params)")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--tol", type=float, help="fail (exit 3) above this L-inf error")
    p.add_argument("--out")
    p.set_defaults(func=cmd_direct_fit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:   # --help (0) or a usage error (1)
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = 1 if args.deterministic else max(1, args.threads)
    try:
        cfg = RunConfig.load(args.config)
        with threadpool_limits(threads) if threads else contextlib.nullcontext():
            return args.func(args, cfg)
    except UsageError as exc:
        print(f"riginv: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"riginv {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
