"""Command-line entry point: ``invmark {make-toy-data,train,embed,extract,evaluate,ablate}``.

Exit codes: 0 ok, 2 bad configuration or arguments, 3 missing or incompatible
checkpoint, 4 numeric divergence, 5 file I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from invmark import objectives as obj
from invmark.checkpoint import load_checkpoint, save_checkpoint
from invmark.config import RunConfig, load_config, parse_noises
from invmark.data import (
    DatasetSpec,
    generate_watermark,
    hex_to_wm,
    ingest_images,
    load_image,
    save_image,
    wm_to_hex,
    write_toy_dataset,
)
from invmark.embedder import embedding_residual
from invmark.errors import CheckpointError, ConfigError, NumericError
from invmark.reports import write_report
from invmark.training import (
    Networks,
    ablate_cross_vs_conv,
    ablate_invariant_domain,
    evaluate,
    init_networks,
    quantize,
    stage1_pretrain,
    stage2_train_encoder,
    stage3_finetune,
)

log = logging.getLogger("invmark")

CKPT_ENV = "INVMARK_CKPT_DIR"
EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_DIVERGED, EXIT_IO = 2, 3, 4, 5


def default_ckpt_dir() -> Path:
    return Path(os.environ.get(CKPT_ENV, "checkpoints"))


# ---------------------------------------------------------------- helpers


def _config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None), getattr(args, "preset", "full"))
    if getattr(args, "steps", None):
        for stage in ("stage1", "stage2", "stage3"):
            setattr(cfg.training, f"{stage}_steps", args.steps)
    if getattr(args, "seed", None) is not None:
        cfg.training.seed = args.seed
    return cfg


def _images(directory, cfg: RunConfig) -> np.ndarray:
    if directory is None:
        if cfg.data is None:
            raise ConfigError("no image directory: pass --data or set data.image_dir in the config")
        spec = cfg.data
    else:
        spec = DatasetSpec(str(directory), image_size=cfg.model.image_size)
    if spec.image_size != cfg.model.image_size:
        raise ConfigError(f"data.image_size {spec.image_size} != model.image_size {cfg.model.image_size}")
    ds = ingest_images(spec)
    log.info("loaded %d images from %s (%d skipped)", len(ds.train), spec.image_dir, ds.skipped)
    return ds.train


def _load_networks(path) -> Networks:
    return Networks.from_checkpoint(load_checkpoint(path))


def _progress(stage, row):
    log.info("%s %s", stage, " ".join(f"{k}={v:.5g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))


def _write_json(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------- commands


def cmd_make_toy_data(args) -> int:
    train, held = write_toy_dataset(args.out, args.size)
    print(f"train: {train}\nheldout: {held}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    images = _images(args.data, cfg)
    out = Path(args.ckpt_dir) if args.ckpt_dir else default_ckpt_dir()
    cfg.dump(out / "config.yaml")
    tc, aug = cfg.training, cfg.augment
    if args.resume:
        nets = _load_networks(args.resume)
        if cfg.model != nets.cfg:
            raise ConfigError("model section differs from the resumed checkpoint's architecture")
    else:
        nets = init_networks(cfg.model, tc.seed)
    wanted = ["stage1", "stage2", "stage3"] if args.stage == "all" else [f"stage{args.stage}"]
    if args.stage == "all" and args.resume:
        wanted = wanted[wanted.index(nets.stage) + 1:] if nets.stage != "init" else wanted
    runners = {
        "stage1": lambda n: stage1_pretrain(n, images, tc, _progress),
        "stage2": lambda n: stage2_train_encoder(n, images, tc, aug, _progress),
        "stage3": lambda n: stage3_finetune(n, images, tc, aug, _progress),
    }
    logs = {}
    for stage in wanted:
        result = runners[stage](nets)
        nets = result.networks
        report = evaluate(nets, images, seed=cfg.eval.seed) if nets.extractor is not None else None
        if report is not None:
            result.metrics.update(train_psnr_db=obj.json_float(report.psnr_db), train_brr_percent=report.brr_percent)
        path = save_checkpoint(result.checkpoint(tc, aug), out / f"{stage}.ckpt")
        _write_json(out / f"{stage}_metrics.json", {"log": result.log, "metrics": result.metrics})
        logs[stage] = result.log
        print(f"{stage}: {path}" + ("" if report is None else f"  psnr={report.psnr_db:.2f} dB  brr={report.brr_percent:.2f}%"))
        # later stages mutate the networks in place; continue from a fresh copy of what was saved
        nets = _load_networks(path)
    if not args.no_plots:
        from invmark.plotting import plot_history

        plot_history(logs, out / "training_loss.png")
    return 0


def _watermark(args, cfg_wm: int) -> np.ndarray:
    if args.wm and args.wm_from:
        raise ConfigError("use either --wm or --wm-from, not both")
    if args.wm:
        return hex_to_wm(args.wm, cfg_wm)
    if args.wm_from:
        return generate_watermark(load_image(args.wm_from), cfg_wm)
    raise ConfigError("a watermark is required: --wm HEX or --wm-from IMAGE")


def cmd_embed(args) -> int:
    nets = _load_networks(args.ckpt)
    size = nets.cfg.image_size
    cover = torch.from_numpy(load_image(args.image, size))
    wm = _watermark(args, nets.cfg.wm_size)
    marked = quantize(nets.embed(cover[None], torch.from_numpy(wm)[None])[0])
    save_image(marked, args.out)
    print(json.dumps({"out": str(args.out), "watermark": wm_to_hex(wm),
                      "psnr_db": obj.json_float(obj.psnr(cover, marked))}))
    return 0


def cmd_extract(args) -> int:
    nets = _load_networks(args.ckpt)
    img = torch.from_numpy(load_image(args.image, nets.cfg.image_size))
    bits = nets.read_bits(img[None])[0].numpy()
    result = {"watermark": wm_to_hex(bits)}
    if args.wm:
        result["brr_percent"] = obj.brr(hex_to_wm(args.wm, nets.cfg.wm_size), bits)
    print(json.dumps(result))
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    nets = _load_networks(args.ckpt)
    cfg.model = nets.cfg
    images = _images(args.data, cfg)
    specs = parse_noises(args.noises) if args.noises else cfg.eval.specs()
    report = evaluate(nets, images, specs, seed=cfg.eval.seed)
    report.meta["checkpoint"] = str(args.ckpt)
    out = Path(args.out)
    write_report(report, out)
    if not args.no_plots:
        from invmark.plotting import plot_sweep

        if any(e.level is not None for e in report.entries):
            plot_sweep(report, out / "sweep.png")
        _residual_figure(nets, images[: min(4, len(images))], out / "residuals.png", cfg.eval.seed)
    sys.stdout.write(report.to_csv())
    return 0


def _residual_figure(nets: Networks, images, path, seed):
    from invmark.data import assign_watermarks
    from invmark.plotting import plot_residuals

    covers = torch.from_numpy(np.asarray(images, dtype=np.float32))
    wms = torch.from_numpy(assign_watermarks(covers.numpy(), np.random.default_rng(seed), nets.cfg.wm_size))
    marked = quantize(nets.embed(covers, wms))
    residuals = [embedding_residual(c, m) for c, m in zip(covers, marked)]
    return plot_residuals(covers, marked, residuals, path)


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    if args.kind == "cross-vs-conv":
        train = _images(args.data, cfg)
        held = _images(args.heldout, cfg) if args.heldout else train
        cmp, cross, conv = ablate_cross_vs_conv(cfg.model, train, held, cfg.training, _progress)
        data = cmp.to_dict()
        _write_json(out / "cross_vs_conv.json", data)
        write_report(cmp.cross, out, "cross")
        write_report(cmp.conv, out, "conv")
        if not args.no_plots:
            from invmark.plotting import plot_bars

            plot_bars({"cross": cmp.cross.psnr_db, "conv": cmp.conv.psnr_db}, out / "cross_vs_conv_psnr.png", "PSNR (dB)")
            _residual_figure(cross, held[:4], out / "residuals_cross.png", cfg.training.seed)
            _residual_figure(conv, held[:4], out / "residuals_conv.png", cfg.training.seed)
        print(f"psnr cross={cmp.cross.psnr_db:.3f} conv={cmp.conv.psnr_db:.3f} gap={data['psnr_gap_db']:.3f} dB")
    else:
        if not (args.stage1 and args.stage3):
            raise ConfigError("id-vs-noid needs --stage1 and --stage3 checkpoints")
        s1, s3 = _load_networks(args.stage1), _load_networks(args.stage3)
        cfg.model = s3.cfg
        images = _images(args.data, cfg)
        res = ablate_invariant_domain(s1, s3, images, cfg.augment, cfg.eval.seed, cfg.eval.repeats)
        _write_json(out / "id_vs_noid.json", res.to_dict())
        if not args.no_plots:
            from invmark.plotting import plot_bars

            plot_bars({"stage1 only": res.augmented_without_domain, "full pipeline": res.augmented_with_domain},
                      out / "id_vs_noid_brr.png", "augmented BRR (%)")
        print(f"augmented brr without domain={res.augmented_without_domain:.2f} "
              f"with domain={res.augmented_with_domain:.2f} gain={res.gain:.2f}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="invmark", description="Invariant-domain image watermarking")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--preset", default="full", choices=["full", "desk"])
        sp.add_argument("--seed", type=int)
        sp.add_argument("--no-plots", action="store_true")
        if data:
            sp.add_argument("--data", help="image directory (overrides data.image_dir)")

    sp = sub.add_parser("make-toy-data", help="write the bundled desk-scale sample images")
    sp.add_argument("out")
    sp.add_argument("--size", type=int, default=128)
    sp.set_defaults(func=cmd_make_toy_data)

    sp = sub.add_parser("train", help="run training stages and write checkpoints")
    common(sp)
    sp.add_argument("--stage", default="all", choices=["1", "2", "3", "all"])
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--ckpt-dir", help=f"output directory (default ${CKPT_ENV} or ./checkpoints)")
    sp.add_argument("--steps", type=int, help="override every stage's step count")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("embed", help="watermark one image")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--wm", help="64-bit watermark as 16 hex digits, row-major, MSB first")
    sp.add_argument("--wm-from", help="derive the watermark from this image")
    sp.set_defaults(func=cmd_embed)

    sp = sub.add_parser("extract", help="read the watermark from one image")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--wm", help="expected watermark (hex) to score against")
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("evaluate", help="PSNR/BRR report, optionally under attacks")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--noises", nargs="*", help="name:level items, or 'sweep' for every attack's levels")
    sp.add_argument("--out", default="report")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("ablate", help="cross-vs-conv embedder or id-vs-noid comparison")
    common(sp)
    sp.add_argument("kind", choices=["cross-vs-conv", "id-vs-noid"])
    sp.add_argument("--heldout", help="evaluation images for cross-vs-conv")
    sp.add_argument("--stage1", help="stage-1 checkpoint for id-vs-noid")
    sp.add_argument("--stage3", help="stage-3 checkpoint for id-vs-noid")
    sp.add_argument("--steps", type=int, help="training steps per arm for cross-vs-conv")
    sp.add_argument("--out", default="ablation")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(int(os.environ.get("INVMARK_THREADS", "1")))
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except NumericError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
