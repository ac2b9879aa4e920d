"""Optimization loop: warmup-plus-cosine schedule, Adam updates, epoch
checkpoints, and newline-delimited structured step logs.

Every random draw is derived statelessly from (seed, epoch or step, role), so
runs are bitwise reproducible on one platform and resume exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import dataset as ds
from .errors import TrainingError, ValidationError
from .losses import ContrastiveConfig, ForwardResults, LossBreakdown, total_loss
from .model import ModelConfig, SpeakerContentVAE, reparameterize
from .seeding import derive_seed, torch_generator

STEP_LOG_NAME = "steps.jsonl"
RESULT_NAME = "result.json"

# Role tags for stateless seed derivation.
_ROLE_EPOCH, _ROLE_BATCH, _ROLE_NOISE = 1, 2, 3


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_pairs: int = 256
    warmup_epochs: int = 10
    lr_start: float = 1e-4
    lr_peak: float = 1e-3
    lr_final: float = 1e-5
    lambda_: float = 0.01
    tau: float = 0.05
    seg_seconds: float = 3.5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 0.0  # 0 disables clipping
    denominator_rule: str = "exclude_anchor_only"
    mi_weight_s_x: float = 1.0
    mi_weight_c_x: float = 1.0
    mi_weight_s_c: float = 1.0
    dsvae_views: str = "both"
    # Intra-op threads for the run; small models are fastest single-threaded,
    # and a fixed count keeps reruns bitwise comparable. 0 leaves torch alone.
    torch_threads: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_pairs < 2:
            raise ValidationError("need epochs >= 1 and batch_pairs >= 2")
        if self.warmup_epochs < 0 or self.warmup_epochs > self.epochs:
            raise ValidationError("warmup_epochs must be in [0, epochs]")
        if min(self.lr_start, self.lr_peak, self.lr_final) <= 0:
            raise ValidationError("learning rates must be positive")
        if self.tau <= 0:
            raise ValidationError("tau must be positive")

    def contrastive(self) -> ContrastiveConfig:
        return ContrastiveConfig(tau=self.tau, denominator_rule=self.denominator_rule)

    def mi_weights(self) -> tuple[float, float, float]:
        return (self.mi_weight_s_x, self.mi_weight_c_x, self.mi_weight_s_c)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lambda_")
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lambda_"] = d.pop("lambda")
        return TrainConfig(**d)


def lr_at(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup from lr_start to lr_peak, then cosine decay to lr_final.

    Progress is measured in steps; the boundary step evaluates to lr_peak
    under both branches and the last step of the run hits lr_final exactly.
    """
    if step < 0:
        raise ValidationError("step must be >= 0")
    if steps_per_epoch < 1:
        raise ValidationError("steps_per_epoch must be >= 1")
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    total_steps = cfg.epochs * steps_per_epoch
    if step < warmup_steps:
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * (step / warmup_steps)
    span = max(1, total_steps - 1 - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return cfg.lr_final + 0.5 * (cfg.lr_peak - cfg.lr_final) * (1.0 + math.cos(math.pi * progress))


def forward_batch(
    model: SpeakerContentVAE,
    views: np.ndarray,
    generator: torch.Generator,
    grad_dsvae: bool = True,
) -> ForwardResults:
    """Run all 2N segments through both encoders, the prior, and the decoder.

    With grad_dsvae=False the VAE branches run under no_grad (their values
    are still reported); the contrastive path is unaffected.
    """
    x = model._prepare(torch.from_numpy(np.ascontiguousarray(views)))
    boundary, block_outs = model._trunk(x)
    spk = model.speaker_branch(boundary, block_outs)
    if grad_dsvae:
        spk.sample_s = reparameterize(spk.mu_s, spk.sigma_s, generator=generator)
        con = model.content_branch(boundary, generator)
        prior = model.content_prior(con.sample_c)
        recon = model.decoder(spk.sample_s, con.sample_c)
    else:
        with torch.no_grad():
            spk.sample_s = reparameterize(spk.mu_s, spk.sigma_s, generator=generator)
            con = model.content_branch(boundary, generator)
            prior = model.content_prior(con.sample_c)
            recon = model.decoder(spk.sample_s, con.sample_c)
    return ForwardResults(features=x, speaker=spk, content=con, prior=prior, recon=recon)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(
    path: str | Path,
    model: SpeakerContentVAE,
    optimizer: torch.optim.Optimizer,
    train_cfg: TrainConfig,
    epoch: int,
    step: int,
) -> None:
    payload = {
        "format_version": 1,
        "model_config": model.cfg.to_dict(),
        "train_config": train_cfg.to_dict(),
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict(),
        "epoch": epoch,
        "step": step,
        "torch_rng": torch.get_rng_state(),
        "numpy_rng": np.random.get_state(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise TrainingError(f"checkpoint not found: {path}")
    return torch.load(path, map_location="cpu", weights_only=False)


def model_from_checkpoint(source: str | Path | dict, strict: bool = True) -> SpeakerContentVAE:
    """Rebuild a model from a checkpoint; loading is name-based."""
    payload = source if isinstance(source, dict) else load_checkpoint(source)
    model = SpeakerContentVAE(ModelConfig.from_dict(payload["model_config"]))
    model.load_state_dict(payload["model_state"], strict=strict)
    return model


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    out_dir: Path
    checkpoints: list[Path]
    step_log: Path
    epoch_mean_total: list[float]
    final_breakdown: LossBreakdown | None = None


def _make_optimizer(model: SpeakerContentVAE, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(
        model.parameters(), lr=cfg.lr_start, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps
    )


def train(
    corpus: ds.Corpus,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    out_dir: str | Path,
    aug_policy: ds.AugmentationPolicy | None = None,
    resume: bool = False,
) -> TrainResult:
    """Run the full schedule; one epoch is one pass over the usable corpus.

    Checkpoints land in out_dir/checkpoints at every epoch end; step records
    append to steps.jsonl. Resuming from epoch k reproduces an uninterrupted
    run bitwise (same seed, same platform).
    """
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    out_dir.mkdir(parents=True, exist_ok=True)
    aug_policy = aug_policy or ds.AugmentationPolicy()
    if cfg.torch_threads > 0:
        torch.set_num_threads(cfg.torch_threads)

    seg_frames = ds.seg_frames_for(corpus, cfg.seg_seconds)
    pool = ds.usable_utts(corpus, seg_frames)
    if len(pool) < cfg.batch_pairs:
        raise ValidationError(
            f"corpus has {len(pool)} usable utterance(s) but batch needs {cfg.batch_pairs} distinct"
        )
    steps_per_epoch = len(pool) // cfg.batch_pairs

    model = SpeakerContentVAE(model_cfg)
    optimizer = _make_optimizer(model, cfg)
    start_epoch, global_step = 0, 0

    if resume:
        existing = sorted(ckpt_dir.glob("epoch_*.pt"))
        if not existing:
            raise TrainingError(f"resume requested but no checkpoints in {ckpt_dir}")
        payload = load_checkpoint(existing[-1])
        model.load_state_dict(payload["model_state"])
        optimizer.load_state_dict(payload["optimizer_state"])
        start_epoch = payload["epoch"]
        global_step = payload["step"]

    ccfg = cfg.contrastive()
    grad_dsvae = cfg.lambda_ != 0.0
    log_path = out_dir / STEP_LOG_NAME
    checkpoints: list[Path] = sorted(ckpt_dir.glob("epoch_*.pt")) if resume else []
    epoch_mean_total: list[float] = []
    breakdown: LossBreakdown | None = None

    log_mode = "a" if resume else "w"
    with open(log_path, log_mode) as log_fh:
        for epoch in range(start_epoch, cfg.epochs):
            epoch_rng = np.random.default_rng(derive_seed(cfg.seed, _ROLE_EPOCH, epoch))
            order = epoch_rng.permutation(len(pool))
            epoch_totals = []
            for local_step in range(steps_per_epoch):
                chunk = [pool[i] for i in order[local_step * cfg.batch_pairs : (local_step + 1) * cfg.batch_pairs]]
                batch = ds.build_pair_batch(
                    corpus, chunk, seg_frames, aug_policy, derive_seed(cfg.seed, _ROLE_BATCH, global_step)
                )
                gen = torch_generator(derive_seed(cfg.seed, _ROLE_NOISE, global_step))
                results = forward_batch(model, batch.flat_views(), gen, grad_dsvae=grad_dsvae)
                total, breakdown = total_loss(
                    results, cfg.lambda_, ccfg, mi_weights=cfg.mi_weights(), dsvae_views=cfg.dsvae_views
                )
                if not math.isfinite(breakdown.total):
                    raise TrainingError(
                        f"non-finite loss at step {global_step}: {json.dumps(breakdown.to_dict())}"
                    )
                lr = lr_at(global_step, steps_per_epoch, cfg)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                optimizer.zero_grad(set_to_none=True)
                total.backward()
                if cfg.grad_clip > 0.0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                optimizer.step()

                record = {"step": global_step, "epoch": epoch, "lr": lr}
                record.update(breakdown.to_dict())
                log_fh.write(json.dumps(record) + "\n")
                epoch_totals.append(breakdown.total)
                global_step += 1
            log_fh.flush()
            epoch_mean_total.append(float(np.mean(epoch_totals)))
            ckpt = ckpt_dir / f"epoch_{epoch + 1:04d}.pt"
            save_checkpoint(ckpt, model, optimizer, cfg, epoch + 1, global_step)
            checkpoints.append(ckpt)

    result = TrainResult(out_dir, checkpoints, log_path, epoch_mean_total, breakdown)
    summary = {
        "epochs_run": cfg.epochs - start_epoch,
        "steps_per_epoch": steps_per_epoch,
        "epoch_mean_total": epoch_mean_total,
        "final_checkpoint": str(checkpoints[-1]) if checkpoints else None,
    }
    (out_dir / RESULT_NAME).write_text(json.dumps(summary, indent=2) + "\n")
    return result


def read_step_log(path: str | Path) -> list[dict]:
    records = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    return records
