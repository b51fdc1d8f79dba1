"""``diaforge`` command line: train, immunize, edit, bench, selftest.

Exit codes: 0 on success, 1 when a run fails, 2 for usage or config errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .attacks import OBJECTIVES, AttackConfig, AttackContext, AttackError, check_ball, immunize
from .diffusion import build_schedule
from .harness import (BenchConfig, EditTask, HarnessError, edit_ddim, psnr, read_pgm,
                      run_benchmark, to_csv, write_pgm)
from .models import (Condition, IdentityCodec, MlpDenoiser, ModelError, diffusion_loss, heldout_batch,
                     load_model, make_toy_dataset, save_model, train_denoiser, train_linear_codec)
from .numerics import NumericsError, Rng, load_tensor, save_tensor
from .trajgrad import GRAD_MODES


class UsageError(Exception):
    """Bad flags, missing inputs or malformed configs (exit code 2)."""


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    tool_version: str = __version__
    outputs: list = field(default_factory=list)
    wall_time: float = 0.0

    def write(self, path) -> None:
        """Write atomically: a temp file in the same directory, then rename."""
        text = json.dumps(asdict(self), sort_keys=True, indent=1) + "\n"
        directory = os.path.dirname(os.path.abspath(path))
        fd, tmp = tempfile.mkstemp(prefix=".manifest-", dir=directory)
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)


def config_hash(obj) -> str:
    """SHA-256 of canonical JSON (sorted keys, no whitespace)."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _flags_for_hash(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "jobs")}


def _load_model(path):
    if not os.path.exists(path):
        raise UsageError(f"model file not found: {path}")
    try:
        return load_model(path)
    except (ModelError, ValueError) as exc:
        raise UsageError(f"cannot read model {path}: {exc}") from exc


def _load_input(args, size: int):
    """The input image and its class, from ``--image`` or from the toy generator."""
    if args.image:
        if not os.path.exists(args.image):
            raise UsageError(f"image file not found: {args.image}")
        try:
            x = read_pgm(args.image)
        except HarnessError as exc:
            raise UsageError(str(exc)) from exc
        return x, Condition(args.source_class)
    x, cond = make_toy_dataset(args.toy_index + 1, size, args.toy_seed)[args.toy_index]
    if args.source_class is not None:
        cond = Condition(args.source_class)
    return x, cond


def _image_size(codec) -> int:
    return int(codec.image_shape[0])


# -- commands ----------------------------------------------------------------


def cmd_train(args) -> int:
    t0 = time.time()
    s = build_schedule()
    data = make_toy_dataset(args.count, args.size, args.data_seed)
    if args.codec == "linear":
        codec = train_linear_codec([x for x, _ in data], args.latent_dim)
    else:
        codec = IdentityCodec((args.size, args.size))
    latents = [(codec.encode(x), c) for x, c in data]
    held_out = [(codec.encode(x), c) for x, c in make_toy_dataset(256, args.size, args.data_seed + 1)]
    held = heldout_batch(held_out, s, Rng(args.seed).split("heldout"))
    rng = Rng(args.seed)
    initial = MlpDenoiser(np.shape(latents[0][0]), s, rng=rng.split("init"))
    before = diffusion_loss(initial, *held)
    model = train_denoiser(latents, s, args.epochs, rng)
    after = diffusion_loss(model, *held)
    save_model(args.out, model, codec)
    print(f"held-out loss: initial {before:.6f} final {after:.6f}")
    _manifest(args, "train", [args.out], t0)
    return 0


def cmd_immunize(args) -> int:
    t0 = time.time()
    denoiser, codec = _load_model(args.model)
    x, cond = _load_input(args, _image_size(codec))
    try:
        cfg = AttackConfig(epsilon=args.eps, step_size=args.step_size, iterations=args.iters,
                           objective=args.objective, traj_steps=args.traj_steps, seed=args.seed,
                           random_start=args.random_start, grad_mode=args.grad_mode)
    except AttackError as exc:
        raise UsageError(str(exc)) from exc
    result = immunize(x, cfg, AttackContext(codec, denoiser, cond, args.guidance))
    check_ball(result, x, cfg.epsilon)
    out = args.out
    paths = [out + ".pgm", out + ".delta.dft1", out + ".image.dft1", out + ".loss.json"]
    write_pgm(paths[0], result.immunized)
    save_tensor(paths[1], result.delta)
    save_tensor(paths[2], result.immunized)
    curve = {"objective": result.objective, "initial": result.initial_loss, "curve": result.loss_curve,
             "config": json.loads(cfg.to_json())}
    with open(paths[3], "w", encoding="utf-8", newline="\n") as fh:
        json.dump(curve, fh, sort_keys=True, indent=1)
        fh.write("\n")
    # the stored delta must still respect the budget after a round trip through disk
    if np.max(np.abs(load_tensor(paths[1]))) > cfg.epsilon + 1e-12:
        raise NumericsError("stored perturbation exceeds the budget")
    print(f"{result.objective}: loss {result.initial_loss:.6g} -> {result.final_loss:.6g}, "
          f"linf {np.max(np.abs(result.delta)):.6g}")
    _manifest(args, "immunize", paths, t0, default_path=out + ".manifest.json")
    return 0


def cmd_edit(args) -> int:
    if args.grad_mode is not None:
        raise UsageError("--grad-mode only applies to immunize; editing does not differentiate")
    denoiser, codec = _load_model(args.model)
    x, cond = _load_input(args, _image_size(codec))
    target = Condition(args.target_class) if args.target_class is not None else cond
    task = EditTask(cond, target, args.steps, args.guidance)
    out = edit_ddim(x, task, codec, denoiser)
    write_pgm(args.out, out)
    print(f"psnr {psnr(x, out):.4f} dB")
    return 0


def _read_bench_config(path):
    if path == "default":
        path = os.path.join(os.path.dirname(os.path.abspath(__file__)), "configs", "bench_default.json")
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    try:
        return obj, BenchConfig.from_dict(obj, os.path.dirname(os.path.abspath(path)))
    except (HarnessError, AttackError, KeyError, TypeError) as exc:
        raise UsageError(f"{path}: {exc}") from exc


def cmd_bench(args) -> int:
    t0 = time.time()
    obj, cfg = _read_bench_config(args.config)
    jobs = args.jobs
    env = os.environ.get("DIA_FORGE_THREADS")
    if env:
        try:
            jobs = int(env)
        except ValueError as exc:
            raise UsageError(f"DIA_FORGE_THREADS must be an integer, got {env!r}") from exc
    if jobs < 1:
        raise UsageError("--jobs must be at least 1")
    records = run_benchmark(cfg, jobs=jobs)
    text = to_csv(records)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    n_images = sum(1 for r in records if r.image_id != "median")
    print(f"wrote {n_images} records and {len(records) - n_images} aggregate rows to {args.out}")
    _manifest(args, "bench", [args.out], t0, config=obj, seed=cfg.seed)
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return 0 if run_selftest(print) else 1


def _manifest(args, command, outputs, t0, config=None, seed=None, default_path=None) -> None:
    path = getattr(args, "manifest", None) or default_path or outputs[0] + ".manifest.json"
    cfg = config if config is not None else _flags_for_hash(args)
    RunManifest(command, config_hash(cfg), int(seed if seed is not None else getattr(args, "seed", 0)),
                outputs=list(outputs), wall_time=round(time.time() - t0, 3)).write(path)


# -- parser ------------------------------------------------------------------


def _input_flags(p) -> None:
    p.add_argument("--model", required=True, help="model JSON written by `train`")
    p.add_argument("--image", help="input PGM; defaults to a generated toy image")
    p.add_argument("--toy-index", type=int, default=0, help="which generated toy image to use")
    p.add_argument("--toy-seed", type=int, default=42)
    p.add_argument("--source-class", type=int, default=None, help="class of the input (required with --image)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diaforge", description=__doc__.splitlines()[0].replace("``", ""))
    parser.add_argument("--version", action="version", version=f"diaforge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a toy denoiser (and codec)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--count", type=int, default=2048, help="training images")
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--data-seed", type=int, default=1)
    p.add_argument("--codec", choices=("identity", "linear"), default="identity")
    p.add_argument("--latent-dim", type=int, default=16)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("immunize", help="perturb an image against DDIM editing")
    _input_flags(p)
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--objective", choices=OBJECTIVES, default="dia_pt")
    p.add_argument("--eps", type=float, default=0.05)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--traj-steps", type=int, default=10)
    p.add_argument("--step-size", type=float, default=None, help="defaults to eps/10")
    p.add_argument("--grad-mode", choices=GRAD_MODES, default="decomposed")
    p.add_argument("--guidance", type=float, default=1.0)
    p.add_argument("--random-start", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_immunize)

    p = sub.add_parser("edit", help="DDIM invert-then-resample edit")
    _input_flags(p)
    p.add_argument("--out", required=True, help="output PGM")
    p.add_argument("--target-class", type=int, default=None, help="defaults to the source class")
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--guidance", type=float, default=1.0)
    p.add_argument("--grad-mode", default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("bench", help="run a benchmark config and write a CSV report")
    p.add_argument("config", help="benchmark JSON, or `default` for the bundled sample")
    p.add_argument("--out", default="bench.csv")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (DIA_FORGE_THREADS overrides)")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("selftest", help="run identity, decomposition and gradient checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "image", None) and args.source_class is None:
        parser.error("--image needs --source-class")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"diaforge {args.command}: {exc}", file=sys.stderr)
        return 2
    except (NumericsError, ModelError, HarnessError, AttackError, OSError) as exc:
        print(f"diaforge {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
