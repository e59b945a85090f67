"""``polarseg`` command line: synth, dsp, train, eval, infer, render, bench, gradcheck.

Every subcommand accepts ``--config file.json``; keys are flag names (dashes or
underscores) and explicit flags win over the file. ``train`` additionally reads
nested ``model`` and ``train`` objects, ``synth`` a nested ``params`` object.
Exit codes: 0 ok, 1 runtime error, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import resource
import sys
import threading
import time
from pathlib import Path

import numpy as np

from . import radar_dsp as dsp
from . import rten
from .dataset import load_split
from .polarnet import REFERENCE_PARAMS, ModelConfig, build_model, predict_mask
from .synth_scene import DifficultyParams, generate_dataset
from .trainer import (Checkpoint, TrainConfig, evaluate, init_checkpoint, load_checkpoint,
                      prepare_input, save_checkpoint, train)

log = logging.getLogger("polarseg")

GREEN = (0, 200, 0)
RED = (220, 0, 0)


class UsageError(Exception):
    pass


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    params = DifficultyParams.named(args.difficulty)
    if args.params:
        params = DifficultyParams.from_dict({**params.to_dict(), **args.params})
    manifest = generate_dataset(args.frames, args.seed, args.out, params, args.ra_mode,
                                args.sequences, args.test_fraction)
    log.info("wrote %d frames to %s", manifest["n_frames"], args.out)
    return 0


def cmd_dsp(args) -> int:
    sca = rten.read(args.inp)
    if not np.iscomplexobj(sca) or sca.ndim != 3:
        raise ValueError(f"{args.inp}: expected a complex [samples, chirps, antennas] cube, "
                         f"got {sca.dtype} {list(sca.shape)}")
    rda = dsp.sca_to_rda(sca.astype(np.complex128))
    if args.mode == "rad":
        out = dsp.rda_to_rad(rda)
    else:
        out = dsp.rda_to_ra(rda, args.mode).data
    rten.write(args.out, out.astype(np.float32))
    return 0


def cmd_train(args) -> int:
    ckpt = None
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        model_cfg = ckpt.model.config
        train_cfg = TrainConfig.from_dict({**ckpt.train_config.to_dict(), **args.train_overrides})
        ckpt.train_config = train_cfg
    else:
        train_cfg = TrainConfig.from_dict({**args.train, **args.train_overrides})
        model_cfg = ModelConfig.from_dict(
            {**ModelConfig.for_input(train_cfg.input).to_dict(), **args.model})
    train_set = load_split(args.data, "train", train_cfg.input)
    eval_set = load_split(args.data, "test", train_cfg.input) if args.eval else None
    result = train(train_set, model_cfg, train_cfg, args.out, eval_set, ckpt)
    summary = {"step": result.checkpoint.step, "best_miou": result.best_miou,
               "final_loss": next((h["loss"] for h in reversed(result.history) if "loss" in h), None)}
    _emit(summary)
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    kind = "RAD" if ckpt.model.config.input_channels > 1 else "RA"
    split = None if args.split == "all" else args.split
    frames = load_split(args.data, split, kind)
    report = evaluate(frames, ckpt, args.batch_size, args.split)
    report["step"] = ckpt.step
    _emit(report)
    return 0


def _input_for(arr: np.ndarray, ckpt: Checkpoint) -> np.ndarray:
    """Accept an SCA cube, an RA map or an RAD cube and return one [1, H, W, C] frame."""
    cfg = ckpt.model.config
    if np.iscomplexobj(arr):
        rda = dsp.sca_to_rda(arr.astype(np.complex128))
        arr = dsp.rda_to_rad(rda) if cfg.input_channels > 1 else \
            dsp.rda_to_ra(rda, ckpt.train_config.ra_mode).data
    if arr.ndim == 2:
        arr = arr[..., None]
    want = (*cfg.input_size, cfg.input_channels)
    if arr.shape != want:
        raise ValueError(f"input of shape {list(arr.shape)} does not fit model input {list(want)}")
    return prepare_input(arr[None].astype(np.float64), ckpt.model.dtype)


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    probs, _ = ckpt.model.forward(_input_for(rten.read(args.inp), ckpt), "infer")
    mask = predict_mask(probs)[0]
    rten.write_pgm(args.out, mask * 255)
    if args.probs:
        rten.write(args.probs, probs[0].astype(np.float32))
    if args.cartesian:
        cart = dsp.polar_cartesian_resample(mask, "polar_to_cart", "nearest", fill=0)
        rten.write_pgm(args.cartesian, cart.astype(np.uint8) * 255)
    return 0


def render_mask(mask: np.ndarray, cartesian: bool = False) -> np.ndarray:
    """RGB image: green open, red occupied, black outside the sensor wedge."""
    open_ = (np.asarray(mask) > 127).astype(np.float64)
    valid = np.ones_like(open_)
    if cartesian:
        valid = dsp.polar_cartesian_resample(valid, "polar_to_cart", "nearest", fill=0)
        open_ = dsp.polar_cartesian_resample(open_, "polar_to_cart", "nearest", fill=0)
    rgb = np.zeros((*open_.shape, 3), dtype=np.uint8)
    rgb[(valid > 0) & (open_ > 0)] = GREEN
    rgb[(valid > 0) & (open_ == 0)] = RED
    return rgb


def cmd_render(args) -> int:
    rten.write_ppm(args.out, render_mask(rten.read_pgm(args.mask), args.cartesian))
    return 0


def bench(model, iters: int = 50, warmup: int = 5, threads: int = 1, seed: int = 0) -> dict:
    """Batch-1 infer-mode forward throughput over ``threads`` independent loops."""
    cfg = model.config
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, *cfg.input_size, cfg.input_channels)).astype(model.dtype)
    for _ in range(warmup):
        model.forward(x, "infer")
    latencies: list[list[float]] = [[] for _ in range(threads)]

    def loop(k: int) -> None:
        for _ in range(iters):
            t0 = time.perf_counter()
            model.forward(x, "infer")
            latencies[k].append(time.perf_counter() - t0)

    t0 = time.perf_counter()
    if threads == 1:
        loop(0)
    else:
        workers = [threading.Thread(target=loop, args=(k,)) for k in range(threads)]
        for w in workers:
            w.start()
        for w in workers:
            w.join()
    wall = time.perf_counter() - t0
    lat_ms = np.concatenate(latencies) * 1e3
    kind = "RAD" if cfg.input_channels > 1 else "RA"
    return {
        "input": kind,
        "iters": iters,
        "threads": threads,
        "warmup": warmup,
        "fps": iters * threads / wall,
        "latency_ms": {f"p{q}": float(np.percentile(lat_ms, q)) for q in (50, 90, 99)},
        "param_count": model.param_count(),
        "reference_param_count": REFERENCE_PARAMS[kind],
        # ru_maxrss is KiB on Linux
        "peak_rss_bytes": resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024,
    }


def cmd_bench(args) -> int:
    if args.ckpt:
        model = load_checkpoint(args.ckpt).model
    else:
        model = build_model(ModelConfig.for_input(args.input), np.random.default_rng(args.seed))
    _emit(bench(model, args.iters, args.warmup, args.threads, args.seed))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite
    worst = run_suite(range(args.seeds), include_model=not args.no_model)
    ops = {k: v for k, v in worst.items() if k != "polarnet_end_to_end"}
    report = {"seeds": args.seeds, "max_rel_err": worst,
              "op_tolerance": args.op_tol, "model_tolerance": args.model_tol,
              "ops_pass": all(v < args.op_tol for v in ops.values())}
    if "polarnet_end_to_end" in worst:
        report["model_pass"] = worst["polarnet_end_to_end"] < args.model_tol
    report["pass"] = report["ops_pass"] and report.get("model_pass", True)
    _emit(report)
    return 0 if report["pass"] else 1


# ------------------------------------------------------------------ parsing

def _json_arg(text: str) -> dict:
    try:
        val = json.loads(text)
    except json.JSONDecodeError as exc:
        raise argparse.ArgumentTypeError(f"invalid JSON: {exc}") from exc
    if not isinstance(val, dict):
        raise argparse.ArgumentTypeError("expected a JSON object")
    return val


TRAIN_FLAGS = {"steps": "total_steps", "batch_size": "batch_size", "lr": "lr0",
               "decay_every": "decay_every_steps", "decay_factor": "decay_factor",
               "loss": "loss", "input": "input", "seed": "seed", "eval_every": "eval_every"}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="polarseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", type=Path, help="JSON file of flag defaults")
        sp.set_defaults(func=func)
        return sp

    s = add("synth", cmd_synth, "generate a synthetic dataset directory")
    s.add_argument("--frames", type=int, default=10)
    s.add_argument("--seed", type=int, default=0, help="seed of the first frame")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--difficulty", choices=("default", "clean", "empty"), default="default")
    s.add_argument("--ra-mode", choices=("max", "sum_log"), default="max")
    s.add_argument("--sequences", type=int, default=10)
    s.add_argument("--test-fraction", type=float, default=0.2)
    s.add_argument("--params", type=_json_arg, default={}, help="DifficultyParams overrides")

    s = add("dsp", cmd_dsp, "SCA cube -> RA map (sum_log/max) or RAD cube")
    s.add_argument("--in", dest="inp", required=True, type=Path)
    s.add_argument("--mode", choices=("sum_log", "max", "rad"), default="sum_log")
    s.add_argument("--out", required=True, type=Path)

    s = add("train", cmd_train, "train PolarNet on a synth dataset directory")
    s.add_argument("--data", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--steps", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--decay-every", type=int)
    s.add_argument("--decay-factor", type=float)
    s.add_argument("--loss", choices=("smce_train", "smce", "lovasz"))
    s.add_argument("--input", choices=("RA", "RAD"))
    s.add_argument("--seed", type=int)
    s.add_argument("--eval-every", type=int)
    s.add_argument("--eval", action="store_true", help="track held-out mIoU, keep best checkpoint")
    s.add_argument("--resume", type=Path, help="checkpoint directory to continue from")
    s.add_argument("--model", type=_json_arg, default={}, help="ModelConfig overrides")
    s.add_argument("--train", type=_json_arg, default={}, help="TrainConfig overrides")

    s = add("eval", cmd_eval, "mIoU of a checkpoint on a dataset split (JSON)")
    s.add_argument("--data", required=True, type=Path)
    s.add_argument("--ckpt", required=True, type=Path)
    s.add_argument("--split", choices=("train", "test", "all"), default="test")
    s.add_argument("--batch-size", type=int, default=16)

    s = add("infer", cmd_infer, "predict the open-space mask of one frame")
    s.add_argument("--in", dest="inp", required=True, type=Path, help="SCA, RA or RAD RTEN file")
    s.add_argument("--ckpt", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path, help="polar mask PGM")
    s.add_argument("--cartesian", type=Path, help="also write a Cartesian BEV mask PGM")
    s.add_argument("--probs", type=Path, help="also write probabilities as RTEN")

    s = add("render", cmd_render, "colour a mask PGM as PPM (green open, red occupied)")
    s.add_argument("--mask", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--cartesian", action="store_true")

    s = add("bench", cmd_bench, "forward-pass throughput and parameter report (JSON)")
    s.add_argument("--ckpt", type=Path, help="checkpoint; default is a fresh model")
    s.add_argument("--input", choices=("RA", "RAD"), default="RA")
    s.add_argument("--iters", type=int, default=50)
    s.add_argument("--warmup", type=int, default=5)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)

    s = add("gradcheck", cmd_gradcheck, "finite-difference gradient suite (JSON)")
    s.add_argument("--seeds", type=int, default=10)
    s.add_argument("--no-model", action="store_true", help="skip the end-to-end PolarNet check")
    s.add_argument("--op-tol", type=float, default=1e-5)
    s.add_argument("--model-tol", type=float, default=1e-4)
    return p


def _finish(args: argparse.Namespace) -> argparse.Namespace:
    if args.command == "train":
        args.train_overrides = {TRAIN_FLAGS[k]: getattr(args, k) for k in TRAIN_FLAGS
                                if getattr(args, k) is not None}
    return args


def _subparser(parser: argparse.ArgumentParser, argv: list[str]):
    choices = parser._subparsers._group_actions[0].choices
    cmd = next((a for a in argv if a in choices), None)
    return cmd, (choices[cmd] if cmd else None)


def parse_args(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Two-pass parse: find ``--config``, install its values as defaults, parse again."""
    cmd, sub = _subparser(parser, argv)
    if sub is None or not any(a == "--config" or a.startswith("--config=") for a in argv):
        return parser.parse_args(argv)
    # required flags may be supplied by the file, so relax them for the first pass
    saved = [(a, a.required) for a in sub._actions]
    for a, _ in saved:
        a.required = False
    try:
        first = parser.parse_args(argv)
    finally:
        for a, req in saved:
            a.required = req
    try:
        conf = json.loads(first.config.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"--config {first.config}: {exc}") from exc
    if not isinstance(conf, dict):
        raise UsageError(f"--config {first.config}: expected a JSON object")
    by_dest = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, val in conf.items():
        dest = key.replace("-", "_")
        dest = "inp" if dest == "in" else dest
        action = by_dest.get(dest)
        if action is None or dest in ("config", "help"):
            raise UsageError(f"--config {first.config}: unknown key {key!r} for {cmd}")
        if action.type is Path and val is not None:
            val = Path(val)
        defaults[dest] = val
    sub.set_defaults(**defaults)
    for dest in defaults:
        by_dest[dest].required = False
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parse_args(parser, argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"polarseg: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        # argparse exits 0 for --help and 2 for usage errors
        return 0 if exc.code in (0, None) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.func(_finish(args))
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"polarseg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
