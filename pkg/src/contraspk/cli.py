"""Command-line entry point: synth / train / extract / score / eval / sweep /
report.

Every config field is addressable as ``--<section>.<field>``; flags override
values from ``--config`` files, which override the chosen profile's defaults.
Exit codes: 0 success, 1 validation, 2 runtime/numerical, 3 I/O.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import dataset as ds
from . import evaluation as ev
from . import workflows as wf
from .config import PROFILES, RunConfig, profile_config
from .errors import NumericalError, ResourceError, TrainingError, ValidationError
from .train import model_from_checkpoint

SECTIONS = ("synth", "model", "train", "data", "eval")

FIELD_HELP = {
    "synth.num_speakers": "synthetic corpus: number of distinct speakers",
    "synth.utts_per_speaker": "synthetic corpus: utterances generated per speaker",
    "synth.feat_dim": "synthetic corpus: feature dimension per frame",
    "synth.utt_frames": "synthetic corpus: frames per generated utterance",
    "synth.speaker_scale": "scale of the static per-speaker bias vectors",
    "synth.speaker_color": "strength of the per-speaker covariance signature of the trajectory",
    "synth.content_smoothness": "one-pole coefficient of the dynamic trajectory (0..1)",
    "synth.smoothness_jitter": "per-speaker spread of the trajectory smoothness coefficient",
    "synth.content_scale": "scale of the smooth dynamic trajectory",
    "synth.noise_scale": "scale of the i.i.d. per-frame noise",
    "synth.seed": "generator seed for the synthetic corpus",
    "model.feat_dim": "input feature dimension the network expects",
    "model.channels": "trunk channel width (512 at paper scale, 64 tiny)",
    "model.block_dilations": "comma-separated dilation per residual block",
    "model.res2net_scale": "number of channel groups inside each residual block",
    "model.se_bottleneck": "squeeze-excitation bottleneck width",
    "model.attention_channels": "attentive-pooling bottleneck width",
    "model.n_shared_layers": "frame-level layers shared by both encoders (0..1+blocks)",
    "model.d_s": "speaker latent dimension",
    "model.d_c": "content latent dimension per frame",
    "model.content_birnn_hidden": "hidden size of the bidirectional content recurrence",
    "model.content_rnn_hidden": "hidden size of the autoregressive content recurrence",
    "model.prior_hidden": "hidden size of the learned content prior recurrence",
    "model.decoder_hidden": "channel width of the first decoder convolution",
    "model.decoder_dilations": "comma-separated dilations of the two decoder convolutions",
    "model.log_sigma_min": "lower clamp on predicted log standard deviations",
    "model.log_sigma_max": "upper clamp on predicted log standard deviations",
    "model.dtype": "parameter dtype: float32 or float64",
    "model.seed": "parameter initialization seed",
    "train.epochs": "total training epochs",
    "train.batch_pairs": "positive pairs per mini-batch (distinct utterances)",
    "train.warmup_epochs": "epochs of linear learning-rate warmup",
    "train.lr_start": "learning rate at step 0",
    "train.lr_peak": "learning rate at the end of warmup",
    "train.lr_final": "learning rate at the last step of cosine decay",
    "train.lambda": "weight of the sequential-disentanglement loss in the total",
    "train.tau": "temperature of the contrastive loss",
    "train.seg_seconds": "duration of each training segment crop",
    "train.seed": "seed driving batch sampling, sampling noise, and updates",
    "train.beta1": "Adam first-moment decay",
    "train.beta2": "Adam second-moment decay",
    "train.adam_eps": "Adam epsilon",
    "train.grad_clip": "global gradient-norm clip (0 disables)",
    "train.denominator_rule": "contrastive denominator: exclude_anchor_only or strict_indicator",
    "train.mi_weight_s_x": "weight of the speaker-input mutual-information term",
    "train.mi_weight_c_x": "weight of the content-input mutual-information term",
    "train.mi_weight_s_c": "weight of the speaker-content mutual-information term",
    "train.dsvae_views": "compute VAE terms on 'both' views or 'first' only",
    "train.torch_threads": "intra-op thread count for the run (0: leave unchanged)",
    "data.train_manifest": "manifest of training utterances (empty: synthesize)",
    "data.eval_manifest": "manifest of evaluation utterances (empty: synthesize)",
    "data.augment": "augmentation mode: none|shuffle_view1|noise|reverb|noise_reverb",
    "data.noise_dir": "directory of noise wav files for additive noise",
    "data.rir_dir": "directory of impulse-response wav files for reverb",
    "data.noise_seed": "seeded synthetic noise source when >= 0 and no noise_dir",
    "data.rir_seed": "seeded synthetic impulse response when >= 0 and no rir_dir",
    "data.snr_db_choices": "comma-separated SNR values sampled for additive noise",
    "eval.p_target": "target prior of the detection cost function",
    "eval.c_miss": "miss cost of the detection cost function",
    "eval.c_fa": "false-alarm cost of the detection cost function",
    "eval.n_target": "target trials to sample for evaluation",
    "eval.n_nontarget": "nontarget trials to sample for evaluation",
    "eval.trials_seed": "seed for trial sampling and probe splits",
    "eval.eval_speakers": "synthetic eval corpus: number of speakers",
    "eval.eval_utts_per_speaker": "synthetic eval corpus: utterances per speaker",
    "eval.eval_corpus_seed": "generator seed for the synthetic eval corpus",
    "eval.extraction_seed": "seed for content-sampling noise during extraction",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # validation failures exit 1, not argparse's 2
        raise ValidationError(message)


def _public_name(field_name: str) -> str:
    return "lambda" if field_name == "lambda_" else field_name


def _converter(default):
    if isinstance(default, bool):
        raise TypeError("boolean config fields need explicit handling")
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, tuple):
        elem = type(default[0]) if default else float
        return lambda s: tuple(elem(x) for x in s.split(","))
    return str


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    cfg = RunConfig()
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            name = f"{section}.{_public_name(f.name)}"
            if name not in FIELD_HELP:
                raise RuntimeError(f"config field {name} lacks help text")
            parser.add_argument(
                f"--{name}",
                dest=f"{section}__{f.name}",
                type=_converter(getattr(obj, f.name)),
                default=None,
                metavar="V",
                help=FIELD_HELP[name],
            )


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    for section in SECTIONS:
        updates = {}
        for f in dataclasses.fields(getattr(cfg, section)):
            value = getattr(args, f"{section}__{f.name}", None)
            if value is not None:
                updates[f.name] = value
        if updates:
            cfg = dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section), **updates)})
    return cfg


def resolve_config(args: argparse.Namespace) -> RunConfig:
    if getattr(args, "config", None):
        cfg = RunConfig.load(args.config)
        if getattr(args, "profile", None):
            cfg = dataclasses.replace(profile_config(args.profile), out_dir=cfg.out_dir)
    else:
        cfg = profile_config(getattr(args, "profile", None) or "desk")
    cfg = _apply_overrides(cfg, args)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "out_dir", None):
        cfg = dataclasses.replace(cfg, out_dir=args.out_dir)
    return cfg


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--profile", choices=sorted(PROFILES), default=None,
                        help="built-in settings profile (paper, desk, test)")
    parser.add_argument("--config", default=None, help="JSON config file; flags override its values")
    parser.add_argument("--out-dir", default=None, help="output directory for this command's artifacts")
    parser.add_argument("--seed", type=int, default=None,
                        help="reseed training/initialization (corpus seeds unchanged)")
    _add_config_flags(parser)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="contraspk", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="generate a synthetic corpus directory", description="Generate a synthetic feature corpus with ground-truth speaker factors.")
    _add_common(p)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    p = sub.add_parser("train", help="train a model per the resolved config")
    _add_common(p)
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in out-dir")

    p = sub.add_parser("extract", help="extract embeddings from a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint file to load")
    p.add_argument("--corpus-manifest", default=None, help="corpus manifest; default: the config's eval corpus")
    p.add_argument("--source", choices=ev.EMBEDDING_SOURCES, default="spk_emb", help="which embedding to extract")
    p.add_argument("--out", default=None, help="output .npz path (default: <out-dir>/embeddings_<source>.npz)")

    p = sub.add_parser("score", help="score a trial list with cosine similarity")
    _add_common(p)
    p.add_argument("--embeddings", required=True, help="embedding archive (.npz)")
    p.add_argument("--trials", required=True, help="trial list file: '<0|1> <enroll> <test>' per line")
    p.add_argument("--out", default=None, help="output score file (default: <out-dir>/scores.txt)")

    p = sub.add_parser("eval", help="compute EER and minDCF from a score file")
    _add_common(p)
    p.add_argument("--scores", required=True, help="score file: '<label> <enroll> <test> <score>' per line")
    p.add_argument("--out", default=None, help="output report path (default: <out-dir>/report.json)")

    p = sub.add_parser("sweep", help="train/evaluate across a grid of disentanglement weights")
    _add_common(p)
    p.add_argument("--lambda-grid", default=",".join(str(x) for x in wf.DEFAULT_LAMBDA_GRID),
                   help="comma-separated lambda values to sweep")

    p = sub.add_parser("report", help="render a comparison table over completed runs")
    _add_common(p)
    p.add_argument("runs", nargs="*", help="run directories containing report.json")

    return parser


# ---------------------------------------------------------------------------
# Command implementations
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out_dir or cfg.out_dir)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ValidationError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    started = wf._utcnow()
    corpus = ds.generate_synthetic(cfg.synth)
    manifest_path = ds.save_feature_corpus(corpus, out)
    outputs = {"manifest": manifest_path}
    try:
        trials = ds.make_trials(corpus, cfg.eval.n_target, cfg.eval.n_nontarget, cfg.eval.trials_seed)
        ds.write_trials(out / "trials.txt", trials)
        outputs["trials"] = out / "trials.txt"
    except ValidationError as exc:
        print(f"note: no trial list written ({exc})", file=sys.stderr)
    cfg.save(out / "config.json")
    wf.write_manifest(out, "synth", cfg, inputs={}, outputs=outputs, started=started)
    print(f"wrote {len(corpus.utt_ids)} utterances to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    result = wf.run_training(cfg, resume=args.resume)
    final = result.epoch_mean_total[-1] if result.epoch_mean_total else float("nan")
    print(f"trained {cfg.train.epochs} epoch(s); final epoch mean total loss {final:.6f}")
    print(f"artifacts in {result.out_dir}")
    return 0


def cmd_extract(args) -> int:
    cfg = resolve_config(args)
    corpus = ds.read_manifest(args.corpus_manifest) if args.corpus_manifest else wf.resolve_eval_corpus(cfg)
    model = model_from_checkpoint(args.checkpoint)
    archive = ev.extract_embeddings(
        model, corpus, args.source, checkpoint_id=Path(args.checkpoint).name,
        eval_seed=cfg.eval.extraction_seed,
    )
    out = Path(args.out) if args.out else Path(args.out_dir or cfg.out_dir) / f"embeddings_{args.source}.npz"
    out.parent.mkdir(parents=True, exist_ok=True)
    archive.save(out)
    print(f"extracted {len(archive.vectors)} {args.source} embeddings (dim {archive.dim}) to {out}")
    return 0


def cmd_score(args) -> int:
    cfg = resolve_config(args)
    archive = ev.EmbeddingArchive.load(args.embeddings)
    trials = ds.read_trials(args.trials)
    scores = ev.score_trials(archive, trials)
    out = Path(args.out) if args.out else Path(args.out_dir or cfg.out_dir) / "scores.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    ev.write_scores(out, scores)
    print(f"scored {len(trials)} trials to {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    scores = ev.read_scores(args.scores)
    report = ev.evaluate_scores(scores, cfg.eval.p_target, cfg.eval.c_miss, cfg.eval.c_fa)
    out = Path(args.out) if args.out else Path(args.out_dir or cfg.out_dir) / "report.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    ev.write_report(out, report)
    print(f"EER {report.eer:.4f}")
    print(f"minDCF {report.min_dcf:.4f} (p_target={report.p_target:g})")
    return 0


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    grid = tuple(float(x) for x in str(args.lambda_grid).split(",") if x != "")
    out = Path(args.out_dir or cfg.out_dir)
    rows, table = wf.run_lambda_sweep(cfg, grid, out)
    print(f"{'lambda':>10} {'EER':>8} {'minDCF':>8}  error")
    for r in rows:
        print(f"{r['lambda']:>10g} {r['eer']:>8.4f} {r['min_dcf']:>8.4f}  {r['error']}")
    print(f"sweep table: {table}")
    failures = [r for r in rows if r["error"]]
    if failures:
        raise TrainingError(f"{len(failures)} sweep point(s) failed")
    return 0


def cmd_report(args) -> int:
    if not args.runs:
        raise ValidationError("report needs at least one run directory")
    print(wf.render_report(args.runs), end="")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "extract": cmd_extract,
    "score": cmd_score,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ResourceError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
