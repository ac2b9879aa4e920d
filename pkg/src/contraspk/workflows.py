"""End-to-end compositions of the library pieces: resolve corpora, run
training, evaluate checkpoints, sweep the disentanglement weight, and render
comparison reports. The CLI is a thin shell over these functions.
"""

from __future__ import annotations

import csv
import datetime
import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import evaluation as ev
from .config import RunConfig, build_policy
from .errors import ResourceError, ValidationError
from .model import SpeakerContentVAE
from .train import TrainResult, model_from_checkpoint, train

MANIFEST_JSON = "manifest.json"
REPORT_JSON = "report.json"
PROBE_JSON = "probe.json"

# Published full-scale reference numbers rendered alongside desk-scale runs.
# These are reporting context only; nothing in this package reproduces them.
PAPER_REFERENCE_LABEL = "paper, not reproduced"
PAPER_TABLE1 = [
    ("SimCLR", 7.13, 0.571, 7.89, 0.596, 12.26, 0.692),
    ("SimCLR + frame shuffle", 7.90, 0.570, 8.48, 0.600, 12.86, 0.737),
    ("SimCLR + DSVAE", 6.37, 0.533, 7.36, 0.574, 11.72, 0.677),
]
PAPER_TABLE2 = [
    ("SimCLR", "spk_emb", 7.13, 0.571),
    ("DSVAE", "spk_emb", 22.87, 0.915),
    ("SimCLR + DSVAE", "spk_emb", 6.37, 0.533),
    ("SimCLR + DSVAE", "avg_con_emb", 47.51, 0.998),
    ("SimCLR + DSVAE (init)", "avg_con_emb", 41.32, 0.994),
]


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _utcnow() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def write_manifest(
    out_dir: Path,
    command: str,
    cfg: RunConfig,
    inputs: dict[str, Path],
    outputs: dict[str, Path],
    started: str,
) -> Path:
    """Traceability record: command, resolved config, artifact digests."""
    manifest = {
        "command": command,
        "config": cfg.to_dict(),
        "seed": cfg.train.seed,
        "inputs": {k: {"path": str(p), "sha256": _sha256(Path(p))} for k, p in inputs.items() if Path(p).exists()},
        "outputs": {k: {"path": str(p), "sha256": _sha256(Path(p))} for k, p in outputs.items() if Path(p).exists()},
        "started_utc": started,
        "finished_utc": _utcnow(),
    }
    path = out_dir / MANIFEST_JSON
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def run_label(cfg: RunConfig) -> str:
    if cfg.data.augment == "shuffle_view1":
        return "SimCLR + frame shuffle"
    if cfg.train.lambda_ == 0.0:
        return "SimCLR"
    return f"SimCLR + DSVAE (lambda={cfg.train.lambda_:g})"


# ---------------------------------------------------------------------------
# Corpus resolution
# ---------------------------------------------------------------------------

def resolve_train_corpus(cfg: RunConfig) -> ds.Corpus:
    if cfg.data.train_manifest:
        return ds.read_manifest(cfg.data.train_manifest)
    return ds.generate_synthetic(cfg.synth)


def resolve_eval_corpus(cfg: RunConfig) -> ds.Corpus:
    if cfg.data.eval_manifest:
        return ds.read_manifest(cfg.data.eval_manifest)
    spec = replace(
        cfg.synth,
        num_speakers=cfg.eval.eval_speakers,
        utts_per_speaker=cfg.eval.eval_utts_per_speaker,
        seed=cfg.eval.eval_corpus_seed,
    )
    return ds.generate_synthetic(spec)


# ---------------------------------------------------------------------------
# Training + evaluation pipeline
# ---------------------------------------------------------------------------

def run_training(cfg: RunConfig, out_dir: str | Path | None = None, resume: bool = False) -> TrainResult:
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = _utcnow()
    cfg.save(out / "config.json")
    corpus = resolve_train_corpus(cfg)
    result = train(corpus, cfg.model, cfg.train, out, aug_policy=build_policy(cfg.data), resume=resume)
    outputs = {"step_log": result.step_log}
    if result.checkpoints:
        outputs["final_checkpoint"] = result.checkpoints[-1]
    write_manifest(out, "train", cfg, inputs={}, outputs=outputs, started=started)
    return result


def latest_checkpoint(run_dir: str | Path) -> Path:
    ckpts = sorted(Path(run_dir).glob("checkpoints/epoch_*.pt"))
    if not ckpts:
        raise ResourceError(f"no checkpoints under {run_dir}")
    return ckpts[-1]


def evaluate_run(
    cfg: RunConfig,
    run_dir: str | Path,
    checkpoint: str | Path | None = None,
    source: str = "spk_emb",
) -> ev.EvalReport:
    """Extract embeddings on the eval corpus, score seeded trials, and write
    scores.txt / report.json into the run directory."""
    run_dir = Path(run_dir)
    ckpt = Path(checkpoint) if checkpoint is not None else latest_checkpoint(run_dir)
    model = model_from_checkpoint(ckpt)
    corpus = resolve_eval_corpus(cfg)
    archive = ev.extract_embeddings(
        model, corpus, source, checkpoint_id=ckpt.name, eval_seed=cfg.eval.extraction_seed
    )
    trials = ds.make_trials(corpus, cfg.eval.n_target, cfg.eval.n_nontarget, cfg.eval.trials_seed)
    scores = ev.score_trials(archive, trials)
    report = ev.evaluate_scores(scores, cfg.eval.p_target, cfg.eval.c_miss, cfg.eval.c_fa)

    archive.save(run_dir / f"embeddings_{source}.npz")
    ds.write_trials(run_dir / "trials.txt", trials)
    ev.write_scores(run_dir / "scores.txt", scores)
    ev.write_report(run_dir / REPORT_JSON, report, extra={"label": run_label(cfg), "source": source})
    return report


def leakage_probe(cfg: RunConfig, model: SpeakerContentVAE, run_dir: str | Path | None = None) -> ev.ProbeReport:
    """Speaker-leakage probe on temporally averaged content embeddings."""
    corpus = resolve_eval_corpus(cfg)
    archive = ev.extract_embeddings(model, corpus, "avg_con_emb", eval_seed=cfg.eval.extraction_seed)
    labels = {u: corpus.speaker_of(u) for u in corpus.utt_ids}
    report = ev.probe_speaker_leakage(archive, labels, rng_seed=cfg.eval.trials_seed)
    if run_dir is not None:
        Path(run_dir, PROBE_JSON).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return report


def train_and_evaluate(cfg: RunConfig, out_dir: str | Path | None = None) -> tuple[TrainResult, ev.EvalReport]:
    result = run_training(cfg, out_dir)
    report = evaluate_run(cfg, result.out_dir)
    return result, report


# ---------------------------------------------------------------------------
# Lambda sweep
# ---------------------------------------------------------------------------

DEFAULT_LAMBDA_GRID = (0.0, 0.001, 0.01, 0.05, 0.1)


def run_lambda_sweep(
    cfg: RunConfig, grid: tuple[float, ...], out_dir: str | Path
) -> tuple[list[dict], Path]:
    """Train and evaluate once per grid value; emit a table plus plot data.

    A failing grid point is recorded and the sweep continues; the caller
    decides how to surface failures.
    """
    if not grid:
        raise ValidationError("lambda grid must be non-empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for lam in grid:
        sub = replace(cfg, train=replace(cfg.train, lambda_=lam), out_dir=str(out / f"lambda_{lam:g}"))
        try:
            _, report = train_and_evaluate(sub)
            rows.append({"lambda": lam, "eer": report.eer, "min_dcf": report.min_dcf, "error": ""})
        except Exception as exc:  # noqa: BLE001 - recorded, sweep continues
            rows.append({"lambda": lam, "eer": float("nan"), "min_dcf": float("nan"), "error": str(exc)})

    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["lambda", "eer", "min_dcf", "error"])
        writer.writeheader()
        writer.writerows(rows)
    (out / "sweep.json").write_text(json.dumps(rows, indent=2) + "\n")
    _plot_sweep(rows, out)
    return rows, out / "sweep.csv"


def _plot_sweep(rows: list[dict], out: Path) -> None:
    """Best-effort rendered figure; the CSV/JSON data files are the contract."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        ok = [r for r in rows if not r["error"]]
        if not ok:
            return
        lams = [r["lambda"] for r in ok]
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
        axes[0].plot(lams, [100 * r["eer"] for r in ok], marker="o")
        axes[0].set_xlabel("lambda")
        axes[0].set_ylabel("EER (%)")
        axes[1].plot(lams, [r["min_dcf"] for r in ok], marker="o")
        axes[1].set_xlabel("lambda")
        axes[1].set_ylabel("minDCF")
        for ax in axes:
            ax.set_xscale("symlog", linthresh=1e-3)
            ax.grid(True, alpha=0.3)
        fig.tight_layout()
        fig.savefig(out / "sweep.png", dpi=120)
        plt.close(fig)
    except Exception:  # noqa: BLE001 - plotting is optional
        pass


# ---------------------------------------------------------------------------
# Comparison report
# ---------------------------------------------------------------------------

def _load_run_summary(run_dir: Path) -> dict:
    report_path = run_dir / REPORT_JSON
    if not report_path.exists():
        raise ResourceError(f"missing artifacts: {report_path}")
    summary = json.loads(report_path.read_text())
    probe_path = run_dir / PROBE_JSON
    if probe_path.exists():
        summary["probe"] = json.loads(probe_path.read_text())
    summary["run_dir"] = str(run_dir)
    return summary


def render_report(run_dirs: list[str | Path]) -> str:
    """Side-by-side table of completed runs plus published reference rows."""
    if not run_dirs:
        raise ValidationError("report needs at least one completed run directory")
    summaries = [_load_run_summary(Path(d)) for d in run_dirs]

    lines = ["== Verification results (desk-scale synthetic trials) =="]
    header = f"{'system':<40} {'EER (%)':>8} {'minDCF':>8}"
    lines += [header, "-" * len(header)]
    for s in summaries:
        lines.append(f"{s.get('label', s['run_dir']):<40} {100 * s['eer']:>8.2f} {s['min_dcf']:>8.3f}")
    for name, eer_o, dcf_o, *_ in PAPER_TABLE1:
        lines.append(f"{name + ' [' + PAPER_REFERENCE_LABEL + ']':<40} {eer_o:>8.2f} {dcf_o:>8.3f}")

    probe_rows = [s for s in summaries if "probe" in s]
    lines.append("")
    lines.append("== Representation probes ==")
    header2 = f"{'system / representation':<52} {'EER (%)':>8} {'probe acc':>10}"
    lines += [header2, "-" * len(header2)]
    for s in probe_rows:
        probe = s["probe"]
        label = f"{s.get('label', s['run_dir'])} / avg_con_emb"
        lines.append(f"{label:<52} {100 * probe['eer']:>8.2f} {probe['probe_accuracy']:>10.3f}")
    for name, rep, eer, dcf in PAPER_TABLE2:
        label = f"{name} / {rep} [{PAPER_REFERENCE_LABEL}]"
        lines.append(f"{label:<52} {eer:>8.2f} {'-':>10}")
    return "\n".join(lines) + "\n"
