"""Command-line entry point: ``medvkan <subcommand> ...``.

Every subcommand writes ``<out>/result.json``.  Exit status is 0 on success,
1 for invalid input (bad flags, files or configs) and 2 for internal errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import secrets
import sys
import time
from pathlib import Path

import numpy as np

from . import gradcheck
from .data import ManifestError, TensorFormatError, load_manifest, read_tensor, synth_dataset, write_dataset, write_tensor
from .init import make_rng
from .kan import EFCONV_MODES
from .model import ModelConfig, param_count
from .scan import init_s6, scan_states, selective_scan
from .training import CheckpointError, TrainConfig, checkpoint_load, evaluate, predict_labels, train

log = logging.getLogger("medvkan")

REFERENCE_PARAMS = 51_000_000
SCAN_TOL = 1e-10


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _seed(args) -> int:
    if args.seed is None:
        args.seed = secrets.randbelow(2**31)
        log.warning("no --seed given; using random seed %d", args.seed)
    return args.seed


def _write_result(out, payload) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "result.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read config {path}: {exc}") from exc


def _split_config(doc):
    """A config file is either a bare model config or {"model": ..., "train": ...}."""
    if "model" in doc or "train" in doc:
        extra = set(doc) - {"model", "train"}
        if extra:
            raise ValueError(f"unknown top-level config keys: {sorted(extra)}")
        return doc.get("model", {}), doc.get("train", {})
    return doc, {}


# -- subcommands -------------------------------------------------------------

def cmd_synth(args):
    seed = _seed(args)
    samples = synth_dataset(seed, args.n, args.size, args.classes, args.in_channels)
    manifest = write_dataset(samples, args.out, args.classes)
    print(f"wrote {len(samples)} samples and {manifest}")
    return {"seed": seed, "n": args.n, "size": args.size, "classes": args.classes, "manifest": str(manifest)}


def cmd_train(args):
    model_doc, train_doc = _split_config(_read_json(args.config)) if args.config else ({}, {})
    if args.tiny:
        model = ModelConfig.tiny(**model_doc)
    else:
        model = ModelConfig.from_dict(model_doc)
    manifest, samples = load_manifest(args.manifest)
    overrides = {"num_classes": manifest.num_classes, "in_channels": samples[0].image.shape[0]}
    if args.efconv_mode is not None:
        overrides["efconv_mode"] = args.efconv_mode
    model = ModelConfig.from_dict({**model.to_dict(), **overrides})

    train_fields = dict(train_doc)
    for flag, key in (("lr", "lr0"), ("lr_min", "lr_min"), ("weight_decay", "weight_decay"),
                      ("batch_size", "batch_size"), ("epochs", "epochs"), ("steps", "max_steps"),
                      ("checkpoint_every", "checkpoint_every"), ("grad_clip", "grad_clip")):
        if getattr(args, flag) is not None:
            train_fields[key] = getattr(args, flag)
    if args.seed is None and "seed" in train_fields:
        args.seed = train_fields["seed"]
    train_fields["seed"] = _seed(args)
    try:
        train_config = TrainConfig(**train_fields)
    except TypeError as exc:
        raise ValueError(f"bad train config: {exc}") from exc

    t0 = time.perf_counter()
    result = train(model, train_config, samples, out_dir=args.out, resume=args.resume,
                   callback=lambda r: log.info("step %d loss %.4f lr %.3g", r["step"], r["loss"], r["lr"]))
    elapsed = time.perf_counter() - t0
    last = result.history[-1]["loss"] if result.history else None
    print(f"trained {len(result.history)} steps in {elapsed:.1f}s, final loss {last}")
    print(f"checkpoint: {result.checkpoint_path}")
    return {
        "seed": train_config.seed,
        "model": model.to_dict(),
        "train": train_config.to_dict(),
        "steps": result.optimizer_state.t,
        "final_loss": last,
        "history": result.history,
        "checkpoint": str(result.checkpoint_path),
        "seconds": elapsed,
    }


def cmd_eval(args):
    _, samples = load_manifest(args.manifest)
    report = evaluate(args.checkpoint, samples, tau=args.tau)
    print(f"foreground dice {report.mean_foreground_dice:.4f}  iou {report.mean_foreground_iou:.4f}  "
          f"nsd {report.mean_foreground_nsd:.4f}  f1 {report.f1:.4f}")
    return report.to_dict()


def cmd_predict(args):
    ckpt = checkpoint_load(args.checkpoint)
    image = read_tensor(args.image)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3:
        raise ValueError(f"image must be C×H×W or H×W, got shape {image.shape}")
    labels = predict_labels(ckpt.params, ckpt.config, image[None])[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "prediction.vkt"
    write_tensor(path, labels.astype(np.uint8))
    counts = np.bincount(labels.ravel(), minlength=ckpt.config.num_classes)
    print(f"wrote {path}; pixels per class {counts.tolist()}")
    return {"prediction": str(path), "shape": list(labels.shape), "class_pixels": counts.tolist()}


def cmd_gradcheck(args):
    seed = _seed(args)
    errors = gradcheck.run((args.module,), seed=seed)
    failed = []
    for name, err in errors.items():
        tol = gradcheck.tolerance(name)
        ok = err <= tol
        if not ok:
            failed.append(name)
        print(f"{name:28s} {err:.3e}  (tol {tol:.0e})  {'ok' if ok else 'FAIL'}")
    payload = {"seed": seed, "module": args.module, "max_rel_error": errors, "failed": failed}
    if failed:
        payload["_exit"] = 1
    return payload


def cmd_bench_scan(args):
    seed = _seed(args)
    rng = make_rng(seed, 0)
    params = init_s6(rng, args.D, args.N, np.float64)
    x = rng.normal(size=(1, args.L, args.D))
    timings, outputs = {}, {}
    for mode in ("naive", "blocked"):
        t0 = time.perf_counter()
        for _ in range(args.repeat):
            outputs[mode] = selective_scan(x, params, mode).value
        timings[mode] = (time.perf_counter() - t0) / args.repeat
    # the raw recurrences too, so a bug cancelled by the projections cannot hide
    delta = rng.uniform(1e-3, 1.0, size=(1, args.L, args.D))
    a = -np.exp(params["a_log"].value)
    b = rng.normal(size=(1, args.L, args.N))
    raw = [scan_states(x, delta, a, b, mode) for mode in ("naive", "blocked")]
    divergence = max(float(np.max(np.abs(outputs["naive"] - outputs["blocked"]))),
                     float(np.max(np.abs(raw[0] - raw[1]))))
    shown = ("naive", "blocked") if args.mode == "both" else (args.mode,)
    for mode in shown:
        print(f"{mode:8s} {timings[mode] * 1e3:9.3f} ms   (L={args.L}, D={args.D}, N={args.N})")
    print(f"max |naive - blocked| = {divergence:.3e}")
    payload = {"seed": seed, "L": args.L, "D": args.D, "N": args.N,
               "seconds": {m: timings[m] for m in shown}, "max_abs_divergence": divergence}
    if not divergence <= SCAN_TOL:
        payload["_exit"] = 2
        print(f"blocked and naive scans diverge beyond {SCAN_TOL:g}", file=sys.stderr)
    return payload


def cmd_params(args):
    doc = _read_json(args.config) if args.config else {}
    model_doc, _ = _split_config(doc)
    if args.efconv_mode is not None:
        model_doc = {**model_doc, "efconv_mode": args.efconv_mode}
    config = ModelConfig.from_dict(model_doc)
    total, breakdown = param_count(config)
    width = max(len(k) for k in breakdown)
    for name, n in breakdown.items():
        print(f"{name:{width}s} {n:>12,d}")
    print(f"{'total':{width}s} {total:>12,d}")
    print(f"reference (reported): 51M; this config: {total / 1e6:.2f}M ({total / REFERENCE_PARAMS:.1%} of 51M)")
    return {"total": total, "breakdown": breakdown, "reference": REFERENCE_PARAMS,
            "ratio_to_reference": total / REFERENCE_PARAMS, "config": config.to_dict()}


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="medvkan", description="Hybrid state-space / KAN segmentation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="SUBCOMMAND")
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic dataset and manifest")
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--in-channels", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a manifest")
    p.add_argument("--config", help="JSON model config, or {\"model\": ..., \"train\": ...}")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--tiny", action="store_true", help="start from the tiny preset instead of the full config")
    p.add_argument("--efconv-mode", choices=EFCONV_MODES)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-min", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps", type=int, help="total optimizer steps (overrides --epochs)")
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--grad-clip", type=float)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write the predicted label map of one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="float64 finite-difference gradient suites")
    p.add_argument("--module", choices=("all",) + gradcheck.MODULES, default="all")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench-scan", help="time naive vs blocked selective scans and compare them")
    p.add_argument("--L", type=int, default=256)
    p.add_argument("--D", type=int, default=16)
    p.add_argument("--N", type=int, default=16)
    p.add_argument("--mode", choices=("naive", "blocked", "both"), default="both")
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_bench_scan)

    p = sub.add_parser("params", help="parameter count with per-module breakdown")
    p.add_argument("--config", help="JSON model config (default: full configuration)")
    p.add_argument("--efconv-mode", choices=EFCONV_MODES)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_params)
    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        payload = args.func(args)
    except (ValueError, ManifestError, TensorFormatError, CheckpointError, FileNotFoundError,
            IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        _write_result(getattr(args, "out", "."), {"command": args.command, "error": str(exc), "exit": 1})
        return 1
    except Exception as exc:  # noqa: BLE001 - report anything else as internal
        log.exception("internal error")
        print(f"internal error: {exc!r}", file=sys.stderr)
        try:
            _write_result(getattr(args, "out", "."), {"command": args.command, "error": repr(exc), "exit": 2})
        except OSError:
            pass
        return 2
    code = payload.pop("_exit", 0)
    payload.update(command=args.command, exit=code)
    _write_result(args.out, payload)
    return code


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
