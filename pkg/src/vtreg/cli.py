"""Command-line entry point: ``vtreg {train,register,evaluate,vessels,diffmap,synth}``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import load_config
from .dataio import (
    PairManifest,
    PairRecord,
    ThetaRange,
    load_manifest,
    load_pair,
    make_synthetic_set,
    orient,
    read_image,
    read_theta_table,
    write_image,
    write_manifest,
    write_theta_table,
)
from .errors import ConfigError, DataError, InvalidParameterError, NumericalAbort, ValidationError

log = logging.getLogger("vtreg")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. train.epochs=5 (repeatable)")
    p.add_argument("--seed", type=int, help="shorthand for --set train.seed=N")


def _config(args):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    return load_config(args.config, overrides)


def _load_tensors(manifest: PairManifest, size: int, direction: str, split: str | None):
    fixed, moving, ids = [], [], []
    for rec in manifest:
        if split and rec.split != split:
            continue
        visible, thermal = load_pair(rec, manifest, size)
        a, b = orient(visible, thermal, direction)
        fixed.append(a)
        moving.append(b)
        ids.append(rec.pair_id)
    if not fixed:
        raise DataError("no pairs to train on")
    return torch.stack(fixed), torch.stack(moving), ids


# --------------------------------------------------------------------------
# Subcommands


def cmd_train(args) -> int:
    from .trainer import Trainer

    cfg = _config(args)
    manifest = load_manifest(args.manifest)
    fixed, moving, _ = _load_tensors(manifest, cfg.train.image_size, cfg.train.direction, args.split)
    trainer = Trainer(cfg)
    history = trainer.fit(fixed, moving, run_dir=args.out, steps=args.steps)
    last = history[-1].to_dict() if history else {}
    log.info("trained %d steps; final total_g %.4f", len(history), last.get("total_g", float("nan")))
    return EXIT_OK


def cmd_register(args) -> int:
    from .trainer import register_dataset

    manifest = load_manifest(args.manifest)
    _, skipped = register_dataset(manifest, args.checkpoint, args.out, args.direction)
    if skipped:
        log.error("skipped %d unreadable pair(s): %s", len(skipped), ", ".join(skipped))
        return EXIT_DATA
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .metrics import EvalReport, evaluate_pair

    cfg = _config(args)
    manifest = load_manifest(args.manifest)
    feat = None
    if args.lpips:
        from .losses import FeatureExtractor

        feat = FeatureExtractor(cfg.loss.features, cfg.loss.pretrained_features, cfg.loss.feature_seed)
    report = EvalReport()
    for rec in manifest:
        visible, thermal = load_pair(rec, manifest, args.size or cfg.train.image_size)
        report.rows.append(evaluate_pair(rec.pair_id, visible, thermal, cfg.metrics.mi_bins, feat))
    report.write(args.out)
    if args.truth:
        summary = corner_error_summary(args.truth, args.sidecar, args.size or cfg.train.image_size)
        (Path(args.out) / "corner_error.json").write_text(json.dumps(summary, indent=2))
        log.info("corner error %.3f px (identity baseline %.3f px)", summary["mean_error"], summary["baseline_error"])
    return EXIT_OK


def corner_error_summary(truth_path, sidecar_path, size: int) -> dict:
    """Mean corner error of registered thetas against synthetic ground truth."""
    from .benchmark import baseline_errors, corner_errors

    truth = read_theta_table(truth_path)
    ids = sorted(truth)
    true = torch.stack([truth[i] for i in ids])
    out = {"n_pairs": len(ids), "baseline_error": float(baseline_errors(true, size).mean())}
    if sidecar_path:
        pred = read_theta_table(sidecar_path)
        missing = [i for i in ids if i not in pred]
        if missing:
            raise DataError(f"sidecar lacks pair(s): {', '.join(missing)}")
        est = torch.stack([pred[i] for i in ids])
        out["mean_error"] = float(corner_errors(est, true, size).mean())
    else:
        out["mean_error"] = out["baseline_error"]
    return out


def cmd_vessels(args) -> int:
    from PIL import Image

    from .vessels import identity_similarity, vessel_map

    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    images = [read_image(p, args.size, channels=1) for p in args.images]
    for path, img in zip(args.images, images):
        vm = vessel_map(img, cfg.vessels)
        Image.fromarray(np.round(vm * 255).astype(np.uint8)).save(out / f"{Path(path).stem}_vessels.png")
    if len(images) == 2:
        score = identity_similarity(images[0], images[1], cfg.vessels)
        (out / "identity_similarity.json").write_text(json.dumps({"psnr": "inf" if score == float("inf") else score}))
        print(f"vessel PSNR: {score:.3f} dB")
    return EXIT_OK


def cmd_diffmap(args) -> int:
    from .metrics import difference_map

    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    for rec in manifest:
        visible, thermal = load_pair(rec, manifest, args.size)
        difference_map(visible, thermal, out / f"{rec.pair_id}.png")
    return EXIT_OK


def cmd_synth(args) -> int:
    theta_range = ThetaRange(args.rotation, args.scale, args.translation, args.shear)
    data = make_synthetic_set(args.n, args.size, args.seed, theta_range, visible_gain=args.visible_gain)
    out = Path(args.out)
    manifest = PairManifest(root=out)
    for pid, fixed, moving in zip(data.pair_ids, data.fixed, data.moving):
        write_image(fixed, out / "visible" / f"{pid}.png")
        write_image(moving, out / "thermal" / f"{pid}.png")
        lighting = "hard" if args.visible_gain >= 1.0 else "none"
        manifest.records.append(PairRecord(pid, f"visible/{pid}.png", f"thermal/{pid}.png", pid, lighting, "train"))
    write_manifest(manifest, out / "manifest.csv")
    write_theta_table(out / "theta_true.csv", data.pair_ids, data.theta_true)
    log.info("wrote %d synthetic pairs to %s", args.n, out)
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vtreg", description="Visible-thermal image registration toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the GANs and the registration network")
    _add_config_args(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--steps", type=int, help="stop after this many updates")
    p.add_argument("--split", default="train", help="manifest split to train on ('' for all)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="warp every pair with a trained checkpoint")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint or run directory")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--direction", choices=("t2v", "v2t"))
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", help="edge SSIM/NCC, MI and PSNR per pair")
    _add_config_args(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--size", type=int, help="evaluation resolution (default train.image_size)")
    p.add_argument("--lpips", action="store_true", help="also report the perceptual distance")
    p.add_argument("--truth", type=Path, help="theta_true.csv from synth")
    p.add_argument("--sidecar", type=Path, help="theta_sidecar.csv from register")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("vessels", help="vessel maps of one or two thermal images")
    _add_config_args(p)
    p.add_argument("images", nargs="+", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--size", type=int, default=None)
    p.set_defaults(func=cmd_vessels)

    p = sub.add_parser("diffmap", help="red/blue difference maps for every pair")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--size", type=int, default=256)
    p.set_defaults(func=cmd_diffmap)

    p = sub.add_parser("synth", help="write a synthetic misaligned phantom dataset")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--rotation", type=float, default=10.0, help="max |rotation| in degrees")
    p.add_argument("--scale", type=float, default=0.15, help="max relative scale change")
    p.add_argument("--translation", type=float, default=0.2, help="max |tx|, |ty| in normalised units")
    p.add_argument("--shear", type=float, default=0.0)
    p.add_argument("--visible-gain", type=float, default=1.0, help="darken the visible rendering (0.1 = no light)")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NumericalAbort as exc:
        log.error("numerical abort: %s", exc)
        return EXIT_NUMERIC
    except (DataError, ValidationError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (ConfigError, InvalidParameterError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
