"""Command-line entry point: ``promptiml {gen,train,eval,ablate,gradcheck,infer}``.

Every run writes ``config.json`` (the resolved configuration) next to its
outputs.  Exit codes: 0 success, 2 configuration error, 3 data or checkpoint
error, 4 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image

from promptiml.config import ConfigError, RunConfig, load_config
from promptiml.data import PERTURBATIONS, SEVERITIES, DataError, generate, load_dataset, perturb, \
    sample_seed, save_dataset
from promptiml.metrics import mean_auc, mean_f1

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_VERIFY = 4

DATA_ROOT_ENV = "PROMPTIML_DATA_ROOT"
CHECKPOINT_NAME = "model.pimlckpt"
METRIC_FIELDS = ["dataset", "perturbation", "severity", "F1", "AUC"]

log = logging.getLogger("promptiml")


class VerificationError(RuntimeError):
    pass


# ------------------------------------------------------------------ helpers
def resolve_config_path(name):
    """A file path, or the name of a bundled config such as ``overfit``."""
    if name is None:
        return None
    p = Path(name)
    if p.is_file():
        return p
    bundled = resources.files("promptiml") / "configs" / f"{name}.json"
    if bundled.is_file():
        return Path(str(bundled))
    raise ConfigError(f"config {name!r} is neither a file nor a bundled config")


def run_config(args) -> RunConfig:
    overrides = list(args.override or [])
    if args.seed is not None:
        overrides += [f"model.seed={args.seed}", f"train.seed={args.seed}", f"data.seed={args.seed}"]
    cfg = load_config(resolve_config_path(args.config), overrides)
    if cfg.data.get("image_size", cfg.model.image_size) != cfg.model.image_size:
        raise ConfigError("data.image_size must equal model.image_size")
    return cfg


def out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise DataError(f"output directory {out} is not writable")
    return out


def data_root(arg) -> Path | None:
    if arg is not None:
        return Path(arg)
    env = os.environ.get(DATA_ROOT_ENV)
    return Path(env) if env else None


def dataset(args, cfg: RunConfig):
    """Samples from ``--data`` (or the env data root), else generated from the config."""
    root = data_root(args.data)
    if root is not None:
        return root.name, load_dataset(root)
    d = cfg.data
    return "synthetic", generate(int(d["count"]), int(d["seed"]), int(d.get("image_size", 64)))


def save_mask(prob: np.ndarray, path: Path) -> None:
    Image.fromarray(np.where(prob > 0.5, 255, 0).astype(np.uint8), mode="L").save(path)


def write_csv(path: Path, fields, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)


# -------------------------------------------------------------- subcommands
def cmd_gen(args) -> int:
    cfg = run_config(args)
    out = out_dir(args)
    count = args.count if args.count is not None else int(cfg.data["count"])
    samples = generate(count, int(cfg.data["seed"]), cfg.model.image_size)
    save_dataset(samples, out)
    cfg.save(out / "config.json")
    log.info("wrote %d samples to %s", count, out)
    return EXIT_OK


def cmd_train(args) -> int:
    from promptiml.train import build_model, evaluate, save_checkpoint, train

    cfg = run_config(args)
    out = out_dir(args)
    cfg.save(out / "config.json")
    name, samples = dataset(args, cfg)
    model = build_model(cfg.model)
    before = model.frozen_checksum()
    history = train(model, samples, cfg.train, steps=args.steps)
    after = model.frozen_checksum()
    write_csv(out / "train_log.csv", ["step", "loss", "lr"], history)
    ev = evaluate(model, samples)
    summary = {"dataset": name, "steps": len(history), "final_loss": history[-1]["loss"],
               "train_f1": ev["f1"], "train_auc": ev["auc"],
               "frozen_checksum_pre": before, "frozen_checksum_post": after,
               "frozen_unchanged": before == after}
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    save_checkpoint(model, out / CHECKPOINT_NAME, extra=summary)
    log.info("trained %d steps, train F1 %.3f", len(history), ev["f1"])
    if before != after:
        log.error("frozen backbone changed during training")
        return EXIT_VERIFY
    return EXIT_OK


def _metric_row(name, kind, severity, probs, masks) -> dict:
    return {"dataset": name, "perturbation": kind, "severity": severity,
            "F1": mean_f1(probs, masks), "AUC": mean_auc(probs, masks)}


def cmd_eval(args) -> int:
    from promptiml.train import CheckpointError, load_checkpoint, predict

    cfg = run_config(args)
    out = out_dir(args)
    try:
        model, _ = load_checkpoint(args.checkpoint)
    except (OSError, CheckpointError) as exc:
        raise DataError(str(exc)) from exc
    cfg.model = model.cfg
    cfg.save(out / "config.json")
    name, samples = dataset(args, cfg)
    images = np.stack([s.image for s in samples])
    masks = [s.mask for s in samples]
    clean = predict(model, images)
    rows = [_metric_row(name, "none", 0, clean, masks)]
    mask_dir = out / "masks"
    mask_dir.mkdir(exist_ok=True)
    for k, (s, p) in enumerate(zip(samples, clean)):
        save_mask(p, mask_dir / f"{s.provenance.get('id', f'{k:05d}')}.png")
    if args.sweep:
        plan = [(kind, sev) for kind in PERTURBATIONS for sev in SEVERITIES]
    elif args.perturbation is not None:
        if args.perturbation not in PERTURBATIONS:
            raise DataError(f"unknown perturbation {args.perturbation!r}")
        sevs = [args.severity] if args.severity is not None else list(SEVERITIES)
        plan = [(args.perturbation, s) for s in sevs]
    else:
        plan = []
    for kind, sev in plan:
        pert = np.stack([perturb(img, kind, sev, sample_seed(cfg.data.get("seed", 0), k))
                         for k, img in enumerate(images)])
        rows.append(_metric_row(name, kind, sev, predict(model, pert), masks))
    write_csv(out / "metrics.csv", METRIC_FIELDS, rows)
    log.info("clean F1 %.3f AUC %.3f (%d rows)", rows[0]["F1"], rows[0]["AUC"], len(rows))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from promptiml.ablation import run_ablation, write_table

    cfg = run_config(args)
    out = out_dir(args)
    cfg.save(out / "config.json")
    _, train_samples = dataset(args, cfg)
    rows = run_ablation(train_samples, train_samples, cfg.model, cfg.train, steps=args.steps)
    write_table(rows, out)
    for r in rows:
        log.info("setting %d: F1 %.3f AUC %.3f", r["setting"], r["f1"], r["auc"])
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from promptiml.verify import TOLERANCE, gradient_suite

    out = out_dir(args)
    tol = args.tolerance if args.tolerance is not None else TOLERANCE
    (out / "config.json").write_text(json.dumps({"tolerance": tol}, indent=2) + "\n")
    results = gradient_suite(tol)
    (out / "gradcheck.json").write_text(json.dumps(results, indent=2) + "\n")
    for r in results:
        log.info("%-30s %.2e %s", r["name"], r["max_rel_error"], "ok" if r["passed"] else "FAIL")
    if not all(r["passed"] for r in results):
        raise VerificationError("gradient check exceeded tolerance")
    return EXIT_OK


def cmd_infer(args) -> int:
    from promptiml.train import CheckpointError, load_checkpoint, predict

    out = out_dir(args)
    try:
        model, _ = load_checkpoint(args.checkpoint)
    except (OSError, CheckpointError) as exc:
        raise DataError(str(exc)) from exc
    RunConfig(model=model.cfg).save(out / "config.json")
    size = model.cfg.image_size
    for path in args.images:
        try:
            img = Image.open(path).convert("RGB")
        except OSError as exc:
            raise DataError(f"cannot read image {path}: {exc}") from exc
        if img.size != (size, size):
            raise DataError(f"{path}: expected {size}x{size}, got {img.size[0]}x{img.size[1]}")
        prob = predict(model, np.asarray(img)[None])[0]
        save_mask(prob, out / f"{Path(path).stem}_mask.png")
    return EXIT_OK


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptiml", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON config file or bundled config name (default, overfit)")
            p.add_argument("--override", action="append", metavar="SECTION.KEY=VALUE",
                           help="override one config value; repeatable")
            p.add_argument("--seed", type=int, help="sets model, train and data seeds")
        p.add_argument("--out", required=True, help="output directory")
        return p

    p = common(sub.add_parser("gen", help="generate a synthetic tampered dataset"))
    p.add_argument("--count", type=int)
    p.set_defaults(func=cmd_gen)

    p = common(sub.add_parser("train", help="train a model and write a checkpoint"))
    p.add_argument("--data", help=f"dataset directory (default ${DATA_ROOT_ENV}, else generated)")
    p.add_argument("--steps", type=int, help="number of optimizer steps (default: epochs)")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="evaluate a checkpoint, optionally under perturbations"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--perturbation", help="one of: " + ", ".join(PERTURBATIONS))
    p.add_argument("--severity", type=int, choices=list(SEVERITIES))
    p.add_argument("--sweep", action="store_true", help="all perturbations at severities 0-9")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("ablate", help="train and evaluate the six ablation settings"))
    p.add_argument("--data")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_ablate)

    p = common(sub.add_parser("gradcheck", help="run the gradient verification suite"), config=False)
    p.add_argument("--tolerance", type=float)
    p.set_defaults(func=cmd_gradcheck)

    p = common(sub.add_parser("infer", help="predict masks for PNG images"), config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except DataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except VerificationError as exc:
        log.error("verification failed: %s", exc)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
