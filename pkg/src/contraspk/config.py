"""Run configuration: nested sections, JSON round-trip, and built-in profiles.

Profiles make the reproducibility boundary explicit: ``paper`` carries the
published full-scale settings (needs real corpora), ``desk`` runs a synthetic
corpus with the tiny model in minutes, ``test`` in seconds.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .dataset import AugmentationPolicy, SyntheticSpec
from .errors import ValidationError
from .featio import AugmentationKind, AugmentationSpec
from .model import ModelConfig, tiny_config
from .train import TrainConfig

AUGMENT_MODES = ("none", "shuffle_view1", "noise", "reverb", "noise_reverb")


@dataclass
class DataSettings:
    """Where training/eval utterances come from and how views are augmented."""

    train_manifest: str = ""  # empty -> synthesize from the synth section
    eval_manifest: str = ""  # empty -> synthesize a disjoint eval corpus
    augment: str = "none"
    noise_dir: str = ""
    rir_dir: str = ""
    noise_seed: int = -1  # >= 0 uses a seeded synthetic noise source
    rir_seed: int = -1
    snr_db_choices: tuple[float, ...] = (5.0, 10.0, 15.0)

    def __post_init__(self):
        self.snr_db_choices = tuple(self.snr_db_choices)
        if self.augment not in AUGMENT_MODES:
            raise ValidationError(f"augment must be one of {AUGMENT_MODES}, got {self.augment!r}")


@dataclass
class EvalSettings:
    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0
    n_target: int = 300
    n_nontarget: int = 300
    trials_seed: int = 77
    eval_speakers: int = 10  # synthetic eval corpus size (when no manifest)
    eval_utts_per_speaker: int = 10
    eval_corpus_seed: int = 1234
    extraction_seed: int = 0


@dataclass
class RunConfig:
    profile: str = "desk"
    out_dir: str = "runs/run"
    synth: SyntheticSpec = field(default_factory=SyntheticSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataSettings = field(default_factory=DataSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def to_dict(self) -> dict:
        return {
            "profile": self.profile,
            "out_dir": self.out_dir,
            "synth": asdict(self.synth),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "data": asdict(self.data),
            "eval": asdict(self.eval),
        }

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        return RunConfig(
            profile=d.get("profile", "desk"),
            out_dir=d.get("out_dir", "runs/run"),
            synth=SyntheticSpec(**d.get("synth", {})),
            model=ModelConfig.from_dict(d.get("model", {})),
            train=TrainConfig.from_dict(d.get("train", {})),
            data=DataSettings(**{**d.get("data", {}), "snr_db_choices": tuple(d.get("data", {}).get("snr_db_choices", (5.0, 10.0, 15.0)))}),
            eval=EvalSettings(**d.get("eval", {})),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @staticmethod
    def load(path: str | Path) -> "RunConfig":
        p = Path(path)
        if not p.exists():
            raise ValidationError(f"config file not found: {p}")
        return RunConfig.from_dict(json.loads(p.read_text()))

    def with_seed(self, seed: int) -> "RunConfig":
        """Reseed training and initialization; corpus seeds stay put so runs
        with different seeds remain comparable on the same data."""
        return replace(
            self,
            train=replace(self.train, seed=seed),
            model=replace(self.model, seed=seed + 1000),
        )


def build_policy(data: DataSettings) -> AugmentationPolicy:
    """Turn the augment mode plus sources into per-view spec distributions."""
    none = AugmentationSpec()
    if data.augment == "none":
        return AugmentationPolicy()
    if data.augment == "shuffle_view1":
        return AugmentationPolicy(view1=(AugmentationSpec(kind=AugmentationKind.FRAME_SHUFFLE),))

    noise_source = data.noise_dir or (data.noise_seed if data.noise_seed >= 0 else None)
    rir_source = data.rir_dir or (data.rir_seed if data.rir_seed >= 0 else None)
    specs: list[AugmentationSpec] = [none]
    if data.augment in ("noise", "noise_reverb"):
        if noise_source is None:
            raise ValidationError("noise augmentation needs noise_dir or noise_seed")
        specs += [
            AugmentationSpec(kind=AugmentationKind.ADDITIVE_NOISE, snr_db=snr, noise_source=noise_source)
            for snr in data.snr_db_choices
        ]
    if data.augment in ("reverb", "noise_reverb"):
        if rir_source is None:
            raise ValidationError("reverb augmentation needs rir_dir or rir_seed")
        specs.append(AugmentationSpec(kind=AugmentationKind.REVERB, rir_source=rir_source))
    both = tuple(specs)
    return AugmentationPolicy(view0=both, view1=both)


# ---------------------------------------------------------------------------
# Profiles
# ---------------------------------------------------------------------------

def paper_profile() -> RunConfig:
    """Published full-scale settings; requires real train/eval manifests."""
    return RunConfig(
        profile="paper",
        synth=SyntheticSpec(),  # unused once manifests are set
        model=ModelConfig(),
        train=TrainConfig(),
        data=DataSettings(augment="noise_reverb"),
        eval=EvalSettings(),
    )


def desk_profile() -> RunConfig:
    """Synthetic 20x20 corpus, tiny model, minutes on a laptop CPU."""
    return RunConfig(
        profile="desk",
        synth=SyntheticSpec(
            num_speakers=20,
            utts_per_speaker=20,
            feat_dim=20,
            utt_frames=240,
            speaker_scale=1.0,
            content_smoothness=0.97,
            content_scale=1.5,
            noise_scale=0.1,
            seed=100,
        ),
        model=tiny_config(feat_dim=20),
        train=TrainConfig(
            epochs=20,
            batch_pairs=40,
            warmup_epochs=2,
            seg_seconds=0.35,
            lambda_=0.05,
            tau=0.05,
        ),
        data=DataSettings(),
        eval=EvalSettings(),
    )


def test_profile() -> RunConfig:
    """Seconds-scale settings for CI."""
    return RunConfig(
        profile="test",
        synth=SyntheticSpec(
            num_speakers=4,
            utts_per_speaker=4,
            feat_dim=12,
            utt_frames=80,
            seed=100,
        ),
        model=tiny_config(feat_dim=12),
        train=TrainConfig(
            epochs=2,
            batch_pairs=4,
            warmup_epochs=1,
            seg_seconds=0.3,
            lambda_=0.05,
            tau=0.05,
        ),
        data=DataSettings(),
        eval=EvalSettings(n_target=15, n_nontarget=15, eval_speakers=3, eval_utts_per_speaker=4),
    )


PROFILES = {"paper": paper_profile, "desk": desk_profile, "test": test_profile}


def profile_config(name: str) -> RunConfig:
    if name not in PROFILES:
        raise ValidationError(f"unknown profile '{name}'; choose from {sorted(PROFILES)}")
    return PROFILES[name]()
