"""Command-line interface.

Subcommands cover the full pipeline: decoder pretraining, scene training with
watermark embedding, rendering, bit extraction, evaluation, attack suites,
capacity sweeps, and report figures.  Validation problems (bad arguments,
missing files, malformed configs) exit with status 1 and a one-line
diagnostic; unexpected runtime failures exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class ValidationError(Exception):
    """User-facing input problem; maps to exit status 1."""


def _load_scene_arg(path, downscale: int = 1):
    from .scenes import load_scene

    root = Path(path)
    if not root.is_dir():
        raise ValidationError(f"scene folder not found: {root}")
    try:
        return load_scene(root, downscale=downscale)
    except (FileNotFoundError, ValueError, KeyError) as e:
        raise ValidationError(f"cannot load scene {root}: {e}") from e


def _load_config_arg(path, overrides: dict):
    from .config import TrainConfig

    try:
        cfg = TrainConfig.from_file(path) if path else TrainConfig()
        if overrides:
            cfg = cfg.replace(**overrides)
        return cfg
    except (OSError, ValueError, TypeError, json.JSONDecodeError) as e:
        raise ValidationError(f"bad config: {e}") from e


def _load_decoder_arg(path):
    from .checkpoint import CheckpointError, load_decoder

    try:
        decoder, _ = load_decoder(path)
        return decoder
    except CheckpointError as e:
        raise ValidationError(str(e)) from e


def _load_model_arg(path):
    from .checkpoint import CheckpointError, load_scene_model, registry_from_manifest

    try:
        model, manifest = load_scene_model(path)
    except CheckpointError as e:
        raise ValidationError(str(e)) from e
    return model, manifest, registry_from_manifest(manifest)


def _render_options_from_manifest(manifest: dict) -> dict:
    scene = manifest.get("scene") or {}
    cfg = manifest.get("config") or {}
    if "near" not in scene or "far" not in scene:
        raise ValidationError("model checkpoint lacks scene near/far metadata")
    return {
        "near": scene["near"], "far": scene["far"],
        "num_samples": cfg.get("samples_per_ray", 64),
        "white_background": cfg.get("white_background", True),
        "weight_threshold": cfg.get("weight_threshold", 0.0),
    }


# ---------------------------------------------------------------------------
# subcommand handlers

def cmd_pretrain_decoder(args) -> int:
    from .augment import default_pool
    from .checkpoint import save_decoder
    from .config import DecoderPretrainConfig
    from .decoder import pretrain_decoder
    from .scenes import generate_texture_corpus, load_image_folder

    try:
        config = DecoderPretrainConfig(
            num_bits=args.bits, steps=args.steps, tile=args.tile,
            noise=not args.no_noise, target_accuracy=args.target_accuracy,
            seed=args.seed)
    except ValueError as e:
        raise ValidationError(str(e)) from e
    if args.corpus is not None:
        corpus = load_image_folder(args.corpus, min_count=config.min_corpus)
    else:
        rng = np.random.default_rng(args.seed)
        corpus = generate_texture_corpus(args.corpus_size, args.tile * 2, rng)
    pool = default_pool() if config.noise else None
    decoder = pretrain_decoder(corpus, config, noise_pool=pool)

    if args.whiten:
        from .decoder import fit_whitening

        rng = np.random.default_rng(args.seed + 1)
        tiles = generate_texture_corpus(max(10 * args.bits + 40, 200), args.tile, rng)
        decoder, _ = fit_whitening(decoder, tiles)
    save_decoder(args.out, decoder, extra={"steps": args.steps})
    print(f"wrote decoder ({args.bits} bits, whitened={bool(args.whiten)}) to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .training import TrainingDivergedError, run_training

    overrides = {}
    if args.num_watermarks is not None:
        overrides["num_watermarks"] = args.num_watermarks
    if args.bits is not None:
        overrides["message_bits"] = args.bits
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = _load_config_arg(args.config, overrides)
    scene = _load_scene_arg(args.scene, downscale=args.downscale)
    decoder = _load_decoder_arg(args.decoder) if args.decoder else None
    try:
        result = run_training(scene, cfg, decoder, out_dir=args.out,
                              resume_from=args.resume)
    except TrainingDivergedError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(f"trained {cfg.num_watermarks} watermark(s); "
          f"checkpoint at {result.checkpoint_path}, log at {result.log_path}")
    return 0


def cmd_render(args) -> int:
    from .rendering import render_image
    from .scenes import cameras_from_meta, save_png

    model, manifest, registry = _load_model_arg(args.model)
    opts = _render_options_from_manifest(manifest)
    cams = cameras_from_meta(manifest["scene"], args.split)
    if not 0 <= args.pose < len(cams):
        raise ValidationError(f"pose {args.pose} outside [0, {len(cams)}) for split {args.split!r}")
    if args.wm_id is not None:
        limit = registry.num_messages if registry else model.spec.num_ids
        if not 0 <= args.wm_id < limit:
            raise ValidationError(f"watermark id {args.wm_id} outside [0, {limit})")
    import torch

    with torch.no_grad():
        img = render_image(model, cams[args.pose], args.wm_id, **opts)
    save_png(args.out, img.numpy())
    tag = "clean" if args.wm_id is None else f"id {args.wm_id}"
    print(f"rendered pose {args.pose} ({tag}) to {args.out}")
    return 0


def cmd_extract(args) -> int:
    from .decoder import bit_accuracy, decode_logits
    from .scenes import load_png

    decoder = _load_decoder_arg(args.decoder)
    img_path = Path(args.image)
    if not img_path.exists():
        raise ValidationError(f"image not found: {img_path}")
    image = load_png(img_path)
    logits = decode_logits(decoder, image)
    bits = (logits.numpy() > 0).astype(int)

    registry = None
    if args.model:
        _, _, registry = _load_model_arg(args.model)
        if registry is None:
            raise ValidationError(f"{args.model} carries no message registry")
        if registry.num_bits != decoder.num_bits:
            raise ValidationError(
                f"registry holds {registry.num_bits}-bit messages, decoder "
                f"extracts {decoder.num_bits}")
    print("bits=" + "".join(map(str, bits)))
    if registry is not None:
        best, agreement = registry.best_match(bits)
        if args.wm_id is not None:
            if not 0 <= args.wm_id < registry.num_messages:
                raise ValidationError(
                    f"watermark id {args.wm_id} outside [0, {registry.num_messages})")
            acc = bit_accuracy(registry.message_for(args.wm_id), logits)
            print(f"bit_accuracy={acc:.4f} (against id {args.wm_id})")
        print(f"best_id={best} agreement={agreement:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    from .evaluation import cross_id_matrix, evaluate_bit_accuracy, image_metrics
    from .rendering import render_image
    from .reporting import write_csv, write_json
    import torch

    model, manifest, registry = _load_model_arg(args.model)
    if registry is None:
        raise ValidationError(f"{args.model} carries no message registry")
    decoder = _load_decoder_arg(args.decoder)
    scene = _load_scene_arg(args.scene, downscale=args.downscale)
    views = scene.views(args.split)
    opts = _render_options_from_manifest(manifest)

    result = evaluate_bit_accuracy(model, decoder, views, registry,
                                   render_options=opts)
    quality = []
    for gt, cam in views:
        with torch.no_grad():
            img = render_image(model, cam, 0, **opts)
        quality.append(image_metrics(img, gt))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(out_dir / "bit_accuracy.csv", result["rows"])
    summary = {
        "bit_acc_mean": result["mean"],
        "psnr_mean": float(np.mean([q["psnr"] for q in quality])),
        "ssim_mean": float(np.mean([q["ssim"] for q in quality])),
    }
    if registry.num_messages > 1:
        matrix = cross_id_matrix(model, decoder, views, registry, render_options=opts)
        from .reporting import plot_id_matrix

        plot_id_matrix(matrix, out_dir)
        own = float(np.mean(np.diag(matrix)))
        cross = float((matrix.sum() - np.trace(matrix))
                      / (matrix.size - matrix.shape[0]))
        summary.update({"own_id_acc": own, "cross_id_acc": cross})
    write_json(out_dir / "summary.json", summary)
    print(f"bit accuracy {result['mean']:.4f}, psnr {summary['psnr_mean']:.2f} dB; "
          f"report in {out_dir}")
    return 0


def cmd_attack(args) -> int:
    from .evaluation import attack_suite, default_attacks
    from .reporting import plot_attacks, write_csv

    model, manifest, registry = _load_model_arg(args.model)
    if registry is None:
        raise ValidationError(f"{args.model} carries no message registry")
    decoder = _load_decoder_arg(args.decoder)
    scene = _load_scene_arg(args.scene, downscale=args.downscale)
    opts = _render_options_from_manifest(manifest)
    available = default_attacks()
    if args.attacks:
        names = [n.strip() for n in args.attacks.split(",") if n.strip()]
        unknown = [n for n in names if n not in available]
        if unknown:
            raise ValidationError(
                f"unknown attacks {unknown}; available: {sorted(available)}")
        available = {n: available[n] for n in names}
    rows = attack_suite(model, decoder, scene.views(args.split), registry,
                        render_options=opts, attacks=available, seed=args.seed)
    out_dir = Path(args.out)
    write_csv(out_dir / "attacks.csv", rows)
    plot_attacks(rows, out_dir)
    print(f"attack report ({len(rows)} attacks) in {out_dir}")
    return 0


def cmd_sweep(args) -> int:
    from .evaluation import multiwm_sweep
    from .reporting import plot_sweep, write_csv

    try:
        counts = sorted({int(v) for v in args.counts.split(",")})
        if not counts or min(counts) < 1:
            raise ValueError
    except ValueError:
        raise ValidationError(f"bad counts {args.counts!r}; want e.g. 2,4,8,16") from None
    cfg = _load_config_arg(args.config, {"seed": args.seed} if args.seed is not None else {})
    if max(counts) > cfg.num_ids:
        raise ValidationError(
            f"sweep up to {max(counts)} watermarks exceeds num_ids={cfg.num_ids}")
    scene = _load_scene_arg(args.scene, downscale=args.downscale)
    decoder = _load_decoder_arg(args.decoder)
    base_model = None
    if args.base_model:
        base_model, _, _ = _load_model_arg(args.base_model)
    rows = multiwm_sweep(scene, cfg, decoder, counts, base_model=base_model)
    out_dir = Path(args.out)
    write_csv(out_dir / "sweep.csv", rows)
    plot_sweep(rows, out_dir)
    print(f"sweep over {counts} written to {out_dir}")
    return 0


def cmd_report(args) -> int:
    from .reporting import render_report

    csv_path = Path(args.input)
    if not csv_path.exists():
        raise ValidationError(f"input CSV not found: {csv_path}")
    try:
        paths = render_report(csv_path, args.out)
    except ValueError as e:
        raise ValidationError(str(e)) from e
    for p in paths:
        print(f"wrote {p}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fieldmark",
        description="Keyed watermark embedding and extraction for radiance fields")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain-decoder", help="train the bit decoder on an image corpus")
    p.add_argument("--bits", type=int, default=48)
    p.add_argument("--corpus", help="folder of PNG/JPEG images; omit for procedural textures")
    p.add_argument("--corpus-size", type=int, default=300,
                   help="procedural corpus size when --corpus is omitted")
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--tile", type=int, default=64)
    p.add_argument("--no-noise", action="store_true",
                   help="skip corruption layers during pretraining")
    p.add_argument("--target-accuracy", type=float, default=0.95,
                   help="held-out accuracy the run must reach")
    p.add_argument("--whiten", action="store_true",
                   help="fit and fold logit whitening after pretraining")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_pretrain_decoder)

    p = sub.add_parser("train", help="fit a scene and embed keyed watermarks")
    p.add_argument("--scene", required=True, help="dataset folder (transforms_*.json)")
    p.add_argument("--config", help="TrainConfig JSON; defaults used when omitted")
    p.add_argument("--decoder", help="pretrained decoder checkpoint")
    p.add_argument("--num-watermarks", type=int)
    p.add_argument("--bits", type=int)
    p.add_argument("--downscale", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="mid-run state checkpoint to continue")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("render", help="render a stored pose, optionally watermarked")
    p.add_argument("--model", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--pose", type=int, default=0)
    p.add_argument("--wm-id", type=int, default=None,
                   help="watermark id; omit for a clean render")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_render)

    p = sub.add_parser("extract", help="decode watermark bits from an image")
    p.add_argument("--decoder", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--model", help="model checkpoint whose registry scores the bits")
    p.add_argument("--wm-id", type=int, help="report accuracy against this id")
    p.set_defaults(handler=cmd_extract)

    p = sub.add_parser("evaluate", help="bit accuracy and image quality report")
    p.add_argument("--model", required=True)
    p.add_argument("--decoder", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--downscale", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("attack", help="bit accuracy under codec/filter attacks")
    p.add_argument("--model", required=True)
    p.add_argument("--decoder", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--attacks", help="comma-separated subset of the attack suite")
    p.add_argument("--downscale", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_attack)

    p = sub.add_parser("sweep", help="re-embed with several watermark counts")
    p.add_argument("--scene", required=True)
    p.add_argument("--config", help="TrainConfig JSON shared by every run")
    p.add_argument("--decoder", required=True)
    p.add_argument("--counts", default="2,4,8,16")
    p.add_argument("--base-model", help="pretrained scene reused across runs")
    p.add_argument("--downscale", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("report", help="render figures for a result CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_report)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - boundary: report and exit nonzero
        log.exception("unhandled failure")
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
