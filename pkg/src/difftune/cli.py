"""Command-line entry point: gen-data / pretrain / tune / eval / gradcheck / ablate.

Exit status 0 means the requested operation completed with every internal
contract check passing; any violation surfaces as a nonzero exit carrying
the originating module's message.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import gradcheck as gc
from . import report
from .checkpoint import join_model_params, read_checkpoint, split_model_params, write_checkpoint
from .condition import RecapStrategy
from .config import RunConfig, load_config, write_effective_config
from .corpus import build_corpus, load_corpus, save_corpus
from .errors import ConfigError, DifftuneError
from .ioutil import atomic_write_text
from .rng import RngStream
from .synthbench import augmentation_consistency, knn_retention, pattern_separations
from .trainer import (
    PHASE_A,
    PHASE_B,
    DenoiserModel,
    EncoderModel,
    TrainConfig,
    pretrain_denoiser,
    tune_encoder,
)

METRICS_HEADER = "step,phase,loss,lr"


def metrics_csv_text(metrics) -> str:
    lines = [METRICS_HEADER]
    for row in metrics:
        lines.append(f"{row.step},{row.phase},{row.loss!r},{row.learning_rate!r}")
    return "\n".join(lines) + "\n"


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out_dir(cfg: RunConfig) -> str:
    path = cfg["output"]["dir"]
    os.makedirs(path, exist_ok=True)
    return path


def _fresh_models(cfg: RunConfig):
    rng = RngStream(cfg.seed)
    return (
        EncoderModel.init(cfg.encoder_config(), rng),
        DenoiserModel.init(cfg.denoiser_config(), rng),
    )


def _load_models(cfg: RunConfig, path):
    enc_params, den_params = split_model_params(read_checkpoint(path))
    if not enc_params or not den_params:
        raise ConfigError(f"{path}: checkpoint lacks encoder/denoiser parameter sets")
    return (
        EncoderModel(cfg.encoder_config(), enc_params),
        DenoiserModel(cfg.denoiser_config(), den_params),
    )


def cmd_gen_data(args) -> int:
    cfg = _load_run_config(args)
    out = args.out or cfg["dataset"]["dir"]
    ds = cfg["dataset"]
    corpus = build_corpus(
        ds["train_images"], ds["pairs_per_pattern"], ds["labeled_images"], cfg.seed
    )
    manifest = save_corpus(corpus, out)
    write_effective_config(cfg, out)
    print(
        f"wrote {len(corpus.train_images)} training images, "
        f"{len(corpus.pairs)} pairs, {len(corpus.labeled.images)} labeled images "
        f"to {out} ({manifest})"
    )
    return 0


def _run_phase(cfg: RunConfig, phase: str, encoder, denoiser, metrics_name, ckpt_name):
    trainer_cfg = cfg["trainer"]
    tc = TrainConfig(
        phase=phase,
        steps=trainer_cfg["pretrain_steps"] if phase == PHASE_A else trainer_cfg["tune_steps"],
        batch_size=trainer_cfg["batch_size"],
        states_per_image=trainer_cfg["states_per_image"],
        learning_rate=trainer_cfg["pretrain_lr"] if phase == PHASE_A else trainer_cfg["tune_lr"],
        momentum=trainer_cfg["momentum"],
        seed=cfg.seed,
        strategy=cfg.recap_strategy(),
    )
    corpus = load_corpus(cfg["dataset"]["dir"])
    if not corpus.train_images:
        raise ConfigError(f"corpus under {cfg['dataset']['dir']} has no training images")
    runner = pretrain_denoiser if phase == PHASE_A else tune_encoder
    result = runner(corpus.train_images, encoder, denoiser, cfg.schedule(), tc)

    out = _out_dir(cfg)
    ckpt_path = os.path.join(out, ckpt_name)
    write_checkpoint(ckpt_path, join_model_params(result.encoder.params, result.denoiser.params))
    metrics_path = os.path.join(out, metrics_name)
    atomic_write_text(metrics_path, metrics_csv_text(result.metrics))
    if result.metrics:
        report.plot_training_curve(result.metrics, metrics_path.replace(".csv", ".png"))
    write_effective_config(cfg, out)
    first = result.metrics[0].loss if result.metrics else float("nan")
    last = result.metrics[-1].loss if result.metrics else float("nan")
    print(
        f"phase {phase}: {tc.steps} steps, loss {first:.6f} -> {last:.6f}; "
        f"checkpoint {ckpt_path}, metrics {metrics_path}"
    )
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_run_config(args)
    encoder, denoiser = _fresh_models(cfg)
    return _run_phase(cfg, PHASE_A, encoder, denoiser, "metrics_pretrain.csv", "denoiser.ckpt")


def cmd_tune(args) -> int:
    cfg = _load_run_config(args)
    encoder, denoiser = _load_models(cfg, args.denoiser)
    return _run_phase(cfg, PHASE_B, encoder, denoiser, "metrics_tune.csv", "encoder_tuned.ckpt")


EVAL_HEADER = (
    "checkpoint,color,orientation,position,quantity,structure,"
    "all_separation,knn_retention_pct,augmentation_consistency"
)


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    encoder, _ = _load_models(cfg, args.checkpoint)
    corpus = load_corpus(cfg["dataset"]["dir"])
    if not corpus.pairs or not corpus.labeled.images:
        raise ConfigError("corpus lacks pairs or labeled images; rerun gen-data")
    seps = pattern_separations(encoder, corpus.pairs)
    retention = knn_retention(encoder, corpus.labeled, cfg["eval"]["knn_k"])
    consistency = augmentation_consistency(
        encoder, corpus.labeled.images[:128], RngStream(cfg.seed).split("consistency")
    )
    stem = os.path.splitext(os.path.basename(args.checkpoint))[0]
    row = (
        f"{stem},{seps['color']:.6f},{seps['orientation']:.6f},{seps['position']:.6f},"
        f"{seps['quantity']:.6f},{seps['structure']:.6f},{seps['all']:.6f},"
        f"{retention:.2f},{consistency:.6f}"
    )
    print(EVAL_HEADER)
    print(row)
    out = _out_dir(cfg)
    atomic_write_text(os.path.join(out, f"eval_{stem}.csv"), EVAL_HEADER + "\n" + row + "\n")
    report.plot_eval_summary(
        seps, retention, consistency, os.path.join(out, f"eval_{stem}.png")
    )
    write_effective_config(cfg, out)
    return 0


def cmd_gradcheck(args) -> int:
    _ = _load_run_config(args)  # validates the file if given
    worst_name, worst_err = "", 0.0
    for name, err in gc.run_op_checks():
        status = "ok" if err < gc.OP_TOLERANCE else "FAIL"
        print(f"op {name:16s} rel_err {err:.3e}  {status}")
        if err > worst_err:
            worst_name, worst_err = name, err
    e2e = gc.end_to_end_check()
    print(f"end-to-end loss gradient rel_err {e2e:.3e}")
    ok = worst_err < gc.OP_TOLERANCE and e2e < gc.END_TO_END_TOLERANCE
    overall = max(worst_err, e2e)
    print(f"max relative error {overall:.3e} ({'PASS' if ok else f'FAIL at {worst_name}'})")
    return 0 if ok else 1


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    corpus = load_corpus(cfg["dataset"]["dir"])
    strategies = [RecapStrategy.parse(tok) for tok in args.densities.split(",") if tok.strip()]
    if not strategies:
        raise ConfigError("--densities produced an empty strategy list")
    trainer_cfg = cfg["trainer"]
    entries = []
    lines = ["strategy,final_loss,steps,seed"]
    for strategy in strategies:
        encoder, denoiser = _fresh_models(cfg)
        tc = TrainConfig(
            phase=PHASE_A,
            steps=trainer_cfg["pretrain_steps"],
            batch_size=trainer_cfg["batch_size"],
            states_per_image=trainer_cfg["states_per_image"],
            learning_rate=trainer_cfg["pretrain_lr"],
            momentum=trainer_cfg["momentum"],
            seed=cfg.seed,
            strategy=strategy,
        )
        result = pretrain_denoiser(corpus.train_images, encoder, denoiser, cfg.schedule(), tc)
        tail = max(1, tc.steps // 10)
        final = sum(r.loss for r in result.metrics[-tail:]) / tail
        entries.append((strategy.label(), final))
        lines.append(f"{strategy.label()},{final!r},{tc.steps},{cfg.seed}")
        print(f"ablate {strategy.label():24s} final loss {final:.6f}")
    out = _out_dir(cfg)
    atomic_write_text(os.path.join(out, "ablation.csv"), "\n".join(lines) + "\n")
    report.plot_ablation(entries, os.path.join(out, "ablation.png"))
    write_effective_config(cfg, out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="difftune",
        description="Diffusion-feedback encoder tuning on a synthetic benchmark",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="run config file (INI)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    common(p)
    p.add_argument("--out", default=None, help="corpus directory (default: [dataset] dir)")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain", help="phase A: train the denoiser, encoder frozen")
    common(p)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("tune", help="phase B: tune the encoder, denoiser frozen")
    common(p)
    p.add_argument("--denoiser", required=True, help="phase-A checkpoint path")
    p.set_defaults(fn=cmd_tune)

    p = sub.add_parser("eval", help="run the probe suite against a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint to evaluate")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference the whole gradient path")
    common(p)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("ablate", help="sweep recap strategies through phase A")
    common(p)
    p.add_argument(
        "--densities",
        default="class,0.15,0.3,0.5,all",
        help="comma list of class | all | <p> | pool<k>",
    )
    p.set_defaults(fn=cmd_ablate)
    return parser


def run_command(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints usage itself
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except DifftuneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
