"""``lpdm`` command line: train, postprocess, evaluate, schedule-dump, denoise-baseline.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
Log level comes from the LPDM_LOG environment variable (error, info, debug).
"""
from __future__ import annotations

import argparse
import configparser
import csv
import logging
import math
import os
import sys
from dataclasses import fields
from pathlib import Path

import torch

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("lpdm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _setup_logging():
    level = os.environ.get("LPDM_LOG", "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _set_threads(n: int):
    torch.set_num_threads(max(1, n))


# ---------------------------------------------------------------- train

# flag dest -> (type, default); anything also readable from the config file
TRAIN_KEYS = {
    "low_dir": (str, None), "high_dir": (str, None), "out_dir": (str, "runs/lpdm"),
    "total_steps": (int, 6000), "lr": (float, 1e-6), "adamw_beta1": (float, 0.9),
    "adamw_beta2": (float, 0.999), "weight_decay": (float, 0.01), "micro_batch": (int, 4),
    "accumulation": (int, 8), "crop_size": (int, 256), "hflip_prob": (float, 0.5),
    "seed": (int, 0), "variant": (str, "LPDM"), "checkpoint_every": (int, 1000), "threads": (int, 1),
    "stage_channels": (_int_list, [128, 256, 512, 512]), "blocks_per_stage": (int, 2),
    "time_embed_base_dim": (int, 128), "time_embed_dim": (int, 512), "attention_heads": (int, 8),
    "groupnorm_groups": (int, None), "T": (int, 1000), "beta_start": (float, 0.00085),
    "beta_end": (float, 0.012), "schedule_mode": (str, "linear"), "resume": (str, None),
}


def read_config_file(path) -> dict:
    """``key = value`` lines (no section header needed); dashes and
    underscores in keys are interchangeable."""
    text = Path(path).read_text()
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    cp.read_string("[lpdm]\n" + text)
    out = {}
    for key, raw in cp["lpdm"].items():
        key = key.strip().replace("-", "_")
        if key not in TRAIN_KEYS:
            raise UsageError(f"{path}: unknown config key {key!r}")
        conv = TRAIN_KEYS[key][0]
        try:
            out[key] = conv(raw.strip())
        except (ValueError, argparse.ArgumentTypeError) as e:
            raise UsageError(f"{path}: bad value for {key}: {e}")
    return out


def resolve_train_settings(args) -> dict:
    """defaults < config file < flags"""
    settings = {k: d for k, (_, d) in TRAIN_KEYS.items()}
    if args.config:
        settings.update(read_config_file(args.config))
    settings.update({k: v for k, v in vars(args).items() if k in TRAIN_KEYS and v is not None})
    if settings["groupnorm_groups"] is None:
        settings["groupnorm_groups"] = math.gcd(32, *settings["stage_channels"])
    return settings


def run_train(args) -> int:
    from .checkpoint import load_checkpoint, restore_trainer
    from .model import UNet, UNetConfig
    from .schedule import build_linear_schedule
    from .training import NonFiniteLossError, TrainConfig, Trainer, load_paired_dataset, train

    s = resolve_train_settings(args)
    for key in ("low_dir", "high_dir"):
        if not s[key]:
            raise UsageError(f"--{key.replace('_', '-')} is required")
    log.info("effective config: %s", ", ".join(f"{k}={v}" for k, v in sorted(s.items())))
    _set_threads(s["threads"])

    for key in ("low_dir", "high_dir"):
        if not Path(s[key]).is_dir():
            raise UsageError(f"{key.replace('_', '-')} not found: {s[key]}")
    try:
        pairs = load_paired_dataset(s["low_dir"], s["high_dir"])
    except FileNotFoundError as e:
        log.error("%s", e)
        return EXIT_DATA
    if not pairs:
        log.error("no training pairs in %s", s["low_dir"])
        return EXIT_DATA

    try:
        tcfg = TrainConfig(**{f.name: s[f.name] for f in fields(TrainConfig) if f.name in s})
        if s["resume"]:
            ckpt = load_checkpoint(s["resume"])
            trainer = restore_trainer(ckpt, pairs, tcfg)
        else:
            mcfg = UNetConfig(
                in_channels=3 if tcfg.variant == "ULPDM" else 6, stage_channels=s["stage_channels"],
                blocks_per_stage=s["blocks_per_stage"], time_embed_base_dim=s["time_embed_base_dim"],
                time_embed_dim=s["time_embed_dim"], attention_heads=s["attention_heads"],
                groupnorm_groups=s["groupnorm_groups"])
            torch.manual_seed(tcfg.seed)
            schedule = build_linear_schedule(s["T"], s["beta_start"], s["beta_end"], s["schedule_mode"])
            trainer = Trainer(UNet(mcfg), schedule, tcfg, pairs)
    except ValueError as e:
        raise UsageError(str(e))

    out = Path(s["out_dir"])
    try:
        train(trainer, tcfg.total_steps, log_path=out / "loss.csv", checkpoint_dir=out / "checkpoints")
    except NonFiniteLossError as e:
        log.error("%s", e)
        return EXIT_NUMERIC
    except ValueError as e:
        log.error("data error: %s", e)
        return EXIT_DATA
    finally:
        trainer.close()
    log.info("finished %d steps; outputs in %s", trainer.step_count, out)
    return EXIT_OK


# ---------------------------------------------------------------- postprocess

def run_postprocess(args) -> int:
    from .checkpoint import CheckpointError, load_checkpoint
    from .postprocess import PostprocessConfig, check_variant, postprocess_dir

    _set_threads(args.threads)
    try:
        ckpt = load_checkpoint(args.checkpoint)
    except (OSError, CheckpointError) as e:
        raise UsageError(f"cannot load checkpoint: {e}")
    variant = args.variant or ckpt.variant
    try:
        check_variant(ckpt.model, variant)
    except ValueError as e:
        raise UsageError(str(e))
    if variant != "ULPDM" and not args.cond_dir:
        raise UsageError(f"--cond-dir is required for variant {variant}")

    phis = args.phi_sweep or [args.phi]
    runs = []
    for phi in phis:
        cfg = PostprocessConfig(phi=phi, s=args.s, variant=variant)
        try:
            cfg.validate(ckpt.schedule.T)
        except ValueError as e:
            raise UsageError(str(e))
        out = Path(args.out_dir) / f"phi_{phi}" if args.phi_sweep else Path(args.out_dir)
        runs.append((cfg, out))
    log.info("postprocess: checkpoint=%s variant=%s phi=%s s=%d", args.checkpoint, variant, phis, args.s)

    status = EXIT_OK
    for cfg, out in runs:
        done, failed = postprocess_dir(ckpt.model, ckpt.schedule, args.enhanced_dir, args.cond_dir, out, cfg,
                                       threads=args.threads)
        log.info("phi=%d: wrote %d images to %s", cfg.phi, len(done), out)
        if failed or not done:
            log.error("phi=%d: %d images failed or unmatched: %s", cfg.phi, len(failed), ", ".join(failed))
            status = EXIT_DATA
    return status


# ---------------------------------------------------------------- evaluate

def run_evaluate(args) -> int:
    from .metrics import evaluate_dirs

    _set_threads(args.threads)
    for d in (args.results_dir, args.truth_dir):
        if not Path(d).is_dir():
            raise UsageError(f"directory not found: {d}")
    report = evaluate_dirs(args.results_dir, args.truth_dir, threads=args.threads)
    for p in report.problems:
        log.error("%s", p)
    if report.per_image:
        print(report.table())
        if args.csv:
            report.write_csv(args.csv)
    return EXIT_DATA if report.problems else EXIT_OK


# ---------------------------------------------------------------- schedule-dump

def run_schedule_dump(args) -> int:
    from .schedule import build_linear_schedule

    try:
        sch = build_linear_schedule(args.T, args.beta_start, args.beta_end, args.mode)
    except ValueError as e:
        raise UsageError(str(e))
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "beta", "alpha_bar"])
        for t, beta, ab in sch.table():
            w.writerow([t, repr(beta), repr(ab)])
    finally:
        if args.out:
            fh.close()
    return EXIT_OK


# ---------------------------------------------------------------- denoise-baseline

def run_denoise_baseline(args) -> int:
    from .baseline import PLUGINS, illumination_weighted_denoise
    from .images import ImageDecodeError, list_images, read_gray, read_image, write_image

    for d in (args.input_dir, args.illum_dir):
        if not Path(d).is_dir():
            raise UsageError(f"directory not found: {d}")
    plugin = PLUGINS[args.plugin]
    images, illums = list_images(args.input_dir), list_images(args.illum_dir)
    status = EXIT_OK
    for name in sorted(images):
        if name not in illums:
            log.error("no illumination map for %s", name)
            status = EXIT_DATA
            continue
        try:
            R, T = read_image(images[name]), read_gray(illums[name])
            for sigma in args.sigma:
                out = illumination_weighted_denoise(R, T, plugin, sigma)
                write_image(Path(args.out_dir) / f"{args.plugin.upper()}_{sigma:g}" / name, out)
        except (ImageDecodeError, ValueError) as e:
            log.error("%s: %s", name, e)
            status = EXIT_DATA
    return status


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lpdm", description="Low-light post-processing diffusion model toolkit.",
                allow_abbrev=False)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train the noise predictor on paired images", allow_abbrev=False)
    t.add_argument("--config", help="key = value file; flags override its values")
    t.add_argument("--low-dir", help="under-exposed images")
    t.add_argument("--high-dir", help="normally-exposed images with the same filenames")
    t.add_argument("--out-dir", help="checkpoints/ and loss.csv go here (default runs/lpdm)")
    t.add_argument("--resume", help="continue from this checkpoint")
    g = t.add_argument_group("optimisation")
    g.add_argument("--total-steps", type=int, help="optimizer steps (default 6000)")
    g.add_argument("--lr", type=float, help="AdamW learning rate (default 1e-6)")
    g.add_argument("--adamw-beta1", type=float, help="default 0.9")
    g.add_argument("--adamw-beta2", type=float, help="default 0.999")
    g.add_argument("--weight-decay", type=float, help="decoupled weight decay (default 0.01)")
    g.add_argument("--micro-batch", type=int, help="samples per forward pass (default 4)")
    g.add_argument("--accumulation", type=int, help="micro-batches per update (default 8)")
    g.add_argument("--crop-size", type=int, help="random crop side, multiple of 16 (default 256)")
    g.add_argument("--hflip-prob", type=float, help="horizontal flip probability (default 0.5)")
    g.add_argument("--variant", choices=["LPDM", "DLPDM", "ULPDM"], help="default LPDM")
    g.add_argument("--checkpoint-every", type=int, help="steps between checkpoints (default 1000)")
    g.add_argument("--seed", type=int, help="default 0")
    g.add_argument("--threads", type=int, help="worker threads; 1 is fully deterministic (default 1)")
    g = t.add_argument_group("model")
    g.add_argument("--stage-channels", type=_int_list, help="four comma-separated widths (default 128,256,512,512)")
    g.add_argument("--blocks-per-stage", type=int, help="default 2")
    g.add_argument("--time-embed-base-dim", type=int, help="default 128")
    g.add_argument("--time-embed-dim", type=int, help="default 512")
    g.add_argument("--attention-heads", type=int, help="default 8")
    g.add_argument("--groupnorm-groups", type=int, help="default gcd(32, stage widths)")
    g = t.add_argument_group("schedule")
    g.add_argument("--T", type=int, help="timesteps (default 1000)")
    g.add_argument("--beta-start", type=float, help="default 0.00085")
    g.add_argument("--beta-end", type=float, help="default 0.012")
    g.add_argument("--schedule-mode", choices=["linear", "scaled_linear"], help="default linear")
    t.set_defaults(func=run_train)

    pp = sub.add_parser("postprocess", help="correct enhanced images in one pass", allow_abbrev=False)
    pp.add_argument("--checkpoint", required=True)
    pp.add_argument("--enhanced-dir", required=True, help="outputs of any low-light enhancer")
    pp.add_argument("--cond-dir", help="original low-light images with the same filenames")
    pp.add_argument("--out-dir", required=True)
    pp.add_argument("--phi", type=int, default=300, help="noise-detection timestep (default 300)")
    pp.add_argument("--s", type=int, default=30, help="correction timestep; 0 disables correction (default 30)")
    pp.add_argument("--phi-sweep", type=_int_list, help="comma-separated phi values, one output subdir each")
    pp.add_argument("--variant", choices=["LPDM", "DLPDM", "ULPDM"], help="default: from the checkpoint")
    pp.add_argument("--seed", type=int, default=0, help="accepted for uniformity; inference is deterministic")
    pp.add_argument("--threads", type=int, default=1)
    pp.set_defaults(func=run_postprocess)

    e = sub.add_parser("evaluate", help="PSNR/SSIM/MAE over paired directories", allow_abbrev=False)
    e.add_argument("--results-dir", required=True)
    e.add_argument("--truth-dir", required=True)
    e.add_argument("--csv", help="write per-image rows and a __mean__ row here")
    e.add_argument("--threads", type=int, default=1)
    e.set_defaults(func=run_evaluate)

    d = sub.add_parser("schedule-dump", help="print the (t, beta, alpha_bar) table as CSV", allow_abbrev=False)
    d.add_argument("--T", type=int, default=1000)
    d.add_argument("--beta-start", type=float, default=0.00085)
    d.add_argument("--beta-end", type=float, default=0.012)
    d.add_argument("--mode", choices=["linear", "scaled_linear"], default="linear")
    d.add_argument("--out", help="file to write (default stdout)")
    d.set_defaults(func=run_schedule_dump)

    b = sub.add_parser("denoise-baseline", help="illumination-weighted luma denoising", allow_abbrev=False)
    b.add_argument("--input-dir", required=True, help="enhanced images")
    b.add_argument("--illum-dir", required=True, help="grayscale illumination maps with the same filenames")
    b.add_argument("--out-dir", required=True, help="results land in <PLUGIN>_<sigma>/ subdirectories")
    b.add_argument("--sigma", type=float, nargs="+", default=[15.0], help="denoiser strength(s), 8-bit units")
    b.add_argument("--plugin", choices=["gaussian", "identity"], default="gaussian")
    b.set_defaults(func=run_denoise_baseline)
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        log.error("%s", e)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
