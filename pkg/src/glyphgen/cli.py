"""Command-line entry point exposing the pipeline as subcommands.

Every subcommand is a pure function of (config file, flags, input
artifacts): rerunning with the same inputs reproduces outputs byte for
byte. Training commands write their checkpoint, a CSV step log, and an
echo of the fully resolved config into the run directory; sampling and
data generation write PPM images plus a manifest.

Exit codes: 0 success, 1 usage error, 2 missing artifact, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import armodel as arm
from . import config as cfgmod
from . import data
from . import evaluation as ev
from . import gradcheck as gc
from . import tokenizer as tok
from . import train
from .autodiff import NonFiniteError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_MISSING = 2
EXIT_NUMERIC = 3

TEACHER_CKPT = "teacher.ckpt"
AE1_CKPT = "ae_stage1.ckpt"
AE2_CKPT = "ae_stage2.ckpt"
AR_CKPT = "ar.ckpt"
FINETUNE_CKPT = "ar_finetuned.ckpt"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    """argparse that signals usage problems as exit code 1, not 2."""

    def error(self, message):
        raise CliError(EXIT_USAGE, f"{self.prog}: {message}")


def _require(path: str) -> str:
    if not os.path.exists(path):
        raise CliError(EXIT_MISSING, f"missing artifact: {path}")
    return path


def _resolve(args, **step_fields) -> train.TrainConfig:
    """Defaults <- config file <- command-line flags, in that order."""
    overrides = {"seed": getattr(args, "seed", None)}
    for field, flag in step_fields.items():
        overrides[field] = getattr(args, flag, None)
    try:
        return cfgmod.load_config(getattr(args, "config", None), overrides)
    except FileNotFoundError as e:
        raise CliError(EXIT_MISSING, f"missing artifact: {e.filename}") from e
    except cfgmod.ConfigError as e:
        raise CliError(EXIT_USAGE, str(e)) from e


def _echo_config(cfg, out_dir: str, command: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"resolved_{command}.cfg")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(cfgmod.render_config(cfg))


def _datasets(cfg):
    tr = data.generate_dataset(cfg.train_n, cfg.seed, "train", cfg.image_size)
    va = data.generate_dataset(cfg.val_n, cfg.seed, "val", cfg.image_size)
    return tr, va


# ------------------------------------------------------------ subcommands


def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise CliError(EXIT_USAGE, "n must be ≥ 1")
    ds = data.generate_dataset(args.n, args.seed, args.split)
    data.export_dataset(ds, args.out)
    print(f"wrote {len(ds)} images + manifest.tsv to {args.out}")
    return EXIT_OK


def cmd_pretrain_teacher(args) -> int:
    cfg = _resolve(args, teacher_steps="steps")
    _echo_config(cfg, args.out, "pretrain-teacher")
    tr = data.generate_dataset(cfg.teacher_train_n, cfg.seed, "train",
                               cfg.image_size)
    va = data.generate_dataset(cfg.val_n, cfg.seed, "val", cfg.image_size)
    log = os.path.join(args.out, "teacher_log.csv")
    teacher, info = train.train_teacher(tr, va, cfg, log_path=log)
    train.save_teacher(os.path.join(args.out, TEACHER_CKPT), teacher, info)
    print(f"teacher: val_acc={info['val_acc']:.4f} "
          f"(shape {info['val_acc_shape']:.4f}, color {info['val_acc_color']:.4f}, "
          f"position {info['val_acc_position']:.4f}) after {info['steps']} steps")
    return EXIT_OK


def cmd_train_ae(args) -> int:
    field = "ae1_steps" if args.stage == 1 else "ae2_steps"
    cfg = _resolve(args, **{field: "steps"})
    _echo_config(cfg, args.out, f"train-ae-stage{args.stage}")
    teacher, _ = train.load_teacher(_require(os.path.join(args.out, TEACHER_CKPT)))
    tr, va = _datasets(cfg)
    prev = None
    if args.stage == 2:
        prev, _ = train.load_ae(_require(os.path.join(args.out, AE1_CKPT)))
    log = os.path.join(args.out, f"ae_stage{args.stage}_log.csv")
    ae, info = train.train_ae(tr, args.stage, cfg, teacher, ae=prev, log_path=log)
    name = AE1_CKPT if args.stage == 1 else AE2_CKPT
    train.save_ae(os.path.join(args.out, name), ae, args.stage)
    recon = ae.reconstruct(va.images)
    val_psnr = float(np.mean([data.psnr(va.images[i], recon[i])
                              for i in range(len(va.images))]))
    print(f"stage {args.stage}: rec mse {info['loss_rec']:.5f}, "
          f"val PSNR {val_psnr:.2f} dB after {info['steps']} steps")
    return EXIT_OK


def cmd_train_ar(args) -> int:
    cfg = _resolve(args, ar_steps="steps")
    _echo_config(cfg, args.out, "train-ar")
    ae, _ = train.load_ae(_require(os.path.join(args.out, AE2_CKPT)))
    tr, _ = _datasets(cfg)
    log = os.path.join(args.out, "ar_log.csv")
    backbone, head, ema, info = train.train_ar(tr, ae, cfg, steps=cfg.ar_steps,
                                               log_path=log)
    train.save_ar(os.path.join(args.out, AR_CKPT), ae, backbone, head, ema, cfg)
    print(f"ar: final loss {info['final_loss']:.5f} after {info['steps']} steps")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _resolve(args, finetune_steps="steps")
    _echo_config(cfg, args.out, "finetune")
    ar_path = _require(os.path.join(args.out, AR_CKPT))
    ae, backbone, head, _ = train.load_ar(ar_path, use_ema=False)
    # Continue generator training at the low fine-tuning rate on a fresh
    # dataset (disjoint seed stream stands in for the second-phase corpus).
    ds = data.generate_dataset(cfg.train_n, cfg.seed + 7919, "train",
                               cfg.image_size)
    log = os.path.join(args.out, "finetune_log.csv")
    backbone, head, ema, info = train.train_ar(
        ds, ae, cfg, backbone=backbone, head=head,
        steps=cfg.finetune_steps, lr=cfg.finetune_lr, log_path=log)
    train.save_ar(os.path.join(args.out, FINETUNE_CKPT), ae, backbone, head,
                  ema, cfg)
    print(f"finetune: final loss {info['final_loss']:.5f} "
          f"after {info['steps']} steps at lr {info['base_lr']:g}")
    return EXIT_OK


def cmd_sample(args) -> int:
    if args.count < 1:
        raise CliError(EXIT_USAGE, "count must be ≥ 1")
    if not 0 <= args.cond < data.N_CLASSES:
        raise CliError(EXIT_USAGE,
                       f"cond must be in [0, {data.N_CLASSES - 1}]")
    ar_path = _require(os.path.join(args.run, AR_CKPT))
    ae, backbone, head, meta = train.load_ar(ar_path)
    n_tokens = backbone.cfg.n_tokens
    if not 1 <= args.group_size <= n_tokens:
        raise CliError(EXIT_USAGE,
                       f"group size must be in [1, {n_tokens}]")
    counter = arm.PassCounter()
    cond_ids = np.full(args.count, args.cond, dtype=np.int64)
    imgs = arm.generate_images(ae, backbone, head, cond_ids, args.seed,
                               group_size=args.group_size,
                               flow_steps=args.steps,
                               shift_tokens=int(meta["flow_shift_dim"]),
                               counter=counter)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    shape, color, pos = data.decompose_class(args.cond)
    for i in range(args.count):
        name = f"sample_{i:05d}.ppm"
        data.write_ppm(os.path.join(args.out, name), imgs[i])
        rows.append((i, data.SHAPES[shape], data.COLORS[color],
                     data.POSITIONS[pos], name))
    data.write_manifest(os.path.join(args.out, "manifest.tsv"), rows)
    print(f"wrote {args.count} samples to {args.out} "
          f"({counter.count} backbone passes)")
    return EXIT_OK


def _write_metrics_csv(path: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(format(v, ".8g") if isinstance(v, float)
                              else str(v) for v in row) + "\n")


def _load_eval_ae(run: str):
    """Prefer the stage-2 tokenizer; fall back to stage 1."""
    for name in (AE2_CKPT, AE1_CKPT):
        path = os.path.join(run, name)
        if os.path.exists(path):
            ae, _ = train.load_ae(path)
            return ae
    raise CliError(EXIT_MISSING,
                   f"missing artifact: {os.path.join(run, AE2_CKPT)}")


def _eval_recon(args, cfg) -> list[str]:
    teacher, _ = train.load_teacher(_require(os.path.join(args.run, TEACHER_CKPT)))
    _, va = _datasets(cfg)
    if args.identity_stub:
        recon = va.images.copy()
    else:
        ae = _load_eval_ae(args.run)
        recon = ae.reconstruct(va.images)
    per_psnr = [data.psnr(va.images[i], recon[i]) for i in range(len(va.images))]
    mean_psnr = float(np.mean(per_psnr))
    mean_ssim = float(np.mean([data.ssim(va.images[i], recon[i])
                               for i in range(len(va.images))]))
    fd = ev.frechet_distance(ev.feature_stats(teacher, va.images),
                             ev.feature_stats(teacher, recon))
    _write_metrics_csv(os.path.join(args.run, "eval_recon.csv"),
                       ["psnr", "ssim", "fd"], [[mean_psnr, mean_ssim, fd]])
    return [f"recon: PSNR {mean_psnr:.2f} dB, SSIM {mean_ssim:.4f}, "
            f"feature distance {fd:.4f} over {len(va.images)} val images"]


def _eval_generate(args, cfg) -> list[str]:
    teacher, _ = train.load_teacher(_require(os.path.join(args.run, TEACHER_CKPT)))
    ae, backbone, head, meta = train.load_ar(
        _require(os.path.join(args.run, AR_CKPT)))
    _, va = _datasets(cfg)
    rng = np.random.default_rng([cfg.seed, 21])
    cond_ids = rng.integers(0, data.N_CLASSES, cfg.eval_gen_n)
    imgs = arm.generate_images(ae, backbone, head, cond_ids, cfg.seed,
                               group_size=cfg.eval_group_size,
                               flow_steps=cfg.sample_steps,
                               shift_tokens=int(meta["flow_shift_dim"]))
    report = ev.grade_conditional_samples(
        [(int(c), imgs[i]) for i, c in enumerate(cond_ids)], teacher)
    fd = ev.frechet_distance(ev.feature_stats(teacher, va.images),
                             ev.feature_stats(teacher, imgs))
    _write_metrics_csv(os.path.join(args.run, "eval_generate.csv"),
                       ["cond_acc", "acc_shape", "acc_color", "acc_position", "fd"],
                       [[report["overall"], report["shape"], report["color"],
                         report["position"], fd]])
    return [f"generate: conditional accuracy {report['overall']:.4f} "
            f"(shape {report['shape']:.4f}, color {report['color']:.4f}, "
            f"position {report['position']:.4f}), feature distance {fd:.4f} "
            f"over {cfg.eval_gen_n} samples"]


def _eval_probe(args, cfg) -> list[str]:
    teacher, t_info = train.load_teacher(
        _require(os.path.join(args.run, TEACHER_CKPT)))
    _, va = _datasets(cfg)
    feats = _features_all(teacher, va.images)
    acc = ev.linear_probe(feats, va.class_ids)
    _write_metrics_csv(os.path.join(args.run, "eval_probe.csv"),
                       ["probe_acc", "teacher_val_acc"],
                       [[acc, float(t_info.get("val_acc", float("nan")))]])
    return [f"probe: {acc:.4f} cross-validated accuracy on teacher features "
            f"(teacher val accuracy {t_info.get('val_acc', float('nan')):.4f})"]


def _features_all(teacher, images: np.ndarray, batch: int = 64) -> np.ndarray:
    outs = [teacher.features(images[i:i + batch])
            for i in range(0, len(images), batch)]
    return np.concatenate(outs, axis=0)


def _eval_purity(args, cfg) -> list[str]:
    teacher, _ = train.load_teacher(_require(os.path.join(args.run, TEACHER_CKPT)))
    _, va = _datasets(cfg)
    feats = _features_all(teacher, va.images)
    pixels = va.images.reshape(len(va.images), -1)
    k = data.N_CLASSES
    pur_feat = ev.cluster_purity(feats, va.class_ids, k)
    pur_pix = ev.cluster_purity(pixels, va.class_ids, k)
    _write_metrics_csv(os.path.join(args.run, "eval_purity.csv"),
                       ["purity_teacher", "purity_pixels", "k"],
                       [[pur_feat, pur_pix, k]])
    return [f"purity: teacher features {pur_feat:.4f} vs raw pixels "
            f"{pur_pix:.4f} at k={k}"]


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    runner = {"recon": _eval_recon, "generate": _eval_generate,
              "probe": _eval_probe, "purity": _eval_purity}[args.task]
    for line in runner(args, cfg):
        print(line)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    results = gc.run_suite(h=args.h)
    print(gc.format_report(results, tol=args.tol))
    if all(r.passed(args.tol) for r in results):
        return EXIT_OK
    return EXIT_NUMERIC


def cmd_sweep_noise(args) -> int:
    cfg = _resolve(args)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip() != ""]
    except ValueError as e:
        raise CliError(EXIT_USAGE, f"bad --values list: {e}") from e
    if not values:
        raise CliError(EXIT_USAGE, "--values must name at least one σ")
    if any(v < 0 for v in values):
        raise CliError(EXIT_USAGE, "σ values must be ≥ 0")
    _echo_config(cfg, args.out, "sweep-noise")
    teacher, _ = train.load_teacher(_require(os.path.join(args.out, TEACHER_CKPT)))
    ae1_path = _require(os.path.join(args.out, AE1_CKPT))
    tr, va = _datasets(cfg)
    rows = []
    for sigma in values:
        cfg_s = dataclasses.replace(cfg, sigma_noise=sigma)
        base, _ = train.load_ae(ae1_path)
        ae, _ = train.train_ae(tr, 2, cfg_s, teacher, ae=base)
        recon = ae.reconstruct(va.images)
        mean_psnr = float(np.mean([data.psnr(va.images[i], recon[i])
                                   for i in range(len(va.images))]))
        fd = ev.frechet_distance(ev.feature_stats(teacher, va.images),
                                 ev.feature_stats(teacher, recon))
        backbone, head, ema, _ = train.train_ar(tr, ae, cfg_s,
                                                steps=cfg_s.ar_steps)
        ema.copy_to(ema.params)
        rng = np.random.default_rng([cfg_s.seed, 21])
        cond_ids = rng.integers(0, data.N_CLASSES, cfg_s.eval_gen_n)
        imgs = arm.generate_images(ae, backbone, head, cond_ids, cfg_s.seed,
                                   group_size=cfg_s.eval_group_size,
                                   flow_steps=cfg_s.sample_steps,
                                   shift_tokens=cfg_s.flow_shift_dim)
        report = ev.grade_conditional_samples(
            [(int(c), imgs[i]) for i, c in enumerate(cond_ids)], teacher)
        rows.append([sigma, mean_psnr, fd, report["overall"]])
        print(f"σ={sigma:g}: PSNR {mean_psnr:.2f} dB, feature distance "
              f"{fd:.4f}, conditional accuracy {report['overall']:.4f}")
    _write_metrics_csv(os.path.join(args.out, "noise_sweep.csv"),
                       ["sigma", "psnr", "fd", "cond_acc"], rows)
    return EXIT_OK


# ------------------------------------------------------------- wiring


def _add_common(p, out_help: str, default_out: str | None = None):
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--seed", type=int, default=None, help="master run seed")
    if default_out is None:
        p.add_argument("--out", required=True, help=out_help)
    else:
        p.add_argument("--out", default=default_out, help=out_help)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="glyphgen",
                     description="shape-glyph tokenizer + generator pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a dataset as PPMs + manifest")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "val"), default="train")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain-teacher", help="train the frozen classifier")
    _add_common(p, "run directory for checkpoints and logs")
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(fn=cmd_pretrain_teacher)

    p = sub.add_parser("train-ae", help="train the tokenizer (two stages)")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    _add_common(p, "run directory for checkpoints and logs")
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(fn=cmd_train_ae)

    p = sub.add_parser("train-ar", help="train the latent generator")
    _add_common(p, "run directory for checkpoints and logs")
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(fn=cmd_train_ar)

    p = sub.add_parser("finetune", help="continue generator training at low lr")
    _add_common(p, "run directory for checkpoints and logs")
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("sample", help="generate images from the trained model")
    p.add_argument("--cond", type=int, required=True,
                   help=f"class id in [0, {data.N_CLASSES - 1}]")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--group-size", type=int, default=1)
    p.add_argument("--steps", type=int, default=30, help="flow integration steps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="directory for sampled PPMs")
    p.add_argument("--run", default=".", help="run directory holding ar.ckpt")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", help="evaluate artifacts in a run directory")
    p.add_argument("--task", choices=("recon", "generate", "probe", "purity"),
                   required=True)
    p.add_argument("--run", default=".", help="run directory with checkpoints")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--identity-stub", action="store_true",
                   help="recon only: score a perfect-copy reconstruction "
                        "(pipeline self-test)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference gradient audit")
    p.add_argument("--h", type=float, default=gc.STEP)
    p.add_argument("--tol", type=float, default=gc.TOLERANCE)
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("sweep-noise",
                       help="stage-2 + generator run per latent noise level")
    p.add_argument("--values", required=True,
                   help="comma-separated σ list, e.g. 0,0.1,0.3")
    _add_common(p, "run directory (needs teacher + stage-1 checkpoints)")
    p.set_defaults(fn=cmd_sweep_noise)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except NonFiniteError as e:
        print(f"error: non-finite numerics: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as e:
        print(f"error: missing artifact: {e.filename or e}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
