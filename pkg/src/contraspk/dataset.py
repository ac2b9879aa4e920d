"""Segment sampling, positive-pair batches, synthetic corpora, and trial lists.

Two corpus flavors share one duck-typed interface: manifests of real audio
files (featurized on the fly) and feature-domain corpora (synthetic data or
precomputed features). Batch assembly is a pure function of (corpus, seed),
so prefetch workers can run concurrently with distinct derived seeds.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import featio
from .errors import ResourceError, ValidationError
from .featio import AugmentationSpec, FeatureSequence, Waveform

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.txt"
META_NAME = "corpus_meta.json"


@dataclass(frozen=True)
class Trial:
    label: int  # 1 = target (same speaker), 0 = nontarget
    enroll: str
    test: str


@dataclass
class PairBatch:
    """N positive pairs of augmented, CMN-applied feature segments.

    ``views[n, i]`` is view i of pair n, stacked as an (N, 2, T, F) array;
    both views of pair n come from the utterance ``utt_ids[n]``.
    """

    views: np.ndarray
    utt_ids: list[str]
    seg_frames: int

    def __post_init__(self):
        if self.views.ndim != 4 or self.views.shape[1] != 2:
            raise ValidationError(f"views must have shape (N, 2, T, F), got {self.views.shape}")
        if self.views.shape[0] < 2:
            raise ValidationError("a pair batch needs N >= 2 pairs")
        if self.views.shape[0] != len(self.utt_ids):
            raise ValidationError("utt_ids length must match the number of pairs")
        if self.views.shape[2] != self.seg_frames:
            raise ValidationError("seg_frames does not match the stacked views")

    @property
    def n_pairs(self) -> int:
        return self.views.shape[0]

    def flat_views(self) -> np.ndarray:
        """(2N, T, F) with rows ordered (pair 0 view 0, pair 0 view 1, ...)."""
        n, _, t, f = self.views.shape
        return self.views.reshape(2 * n, t, f)


@dataclass(frozen=True)
class AugmentationPolicy:
    """Per-view distributions over augmentations; one spec is drawn uniformly
    per view per segment."""

    view0: tuple[AugmentationSpec, ...] = (AugmentationSpec(),)
    view1: tuple[AugmentationSpec, ...] = (AugmentationSpec(),)

    def __post_init__(self):
        if not self.view0 or not self.view1:
            raise ValidationError("each view needs at least one augmentation spec")

    def specs_for_view(self, i: int) -> tuple[AugmentationSpec, ...]:
        return self.view0 if i == 0 else self.view1

    @staticmethod
    def from_dict(d: dict) -> "AugmentationPolicy":
        return AugmentationPolicy(
            view0=tuple(AugmentationSpec.from_dict(s) for s in d.get("view0", [{}])),
            view1=tuple(AugmentationSpec.from_dict(s) for s in d.get("view1", [{}])),
        )

    def to_dict(self) -> dict:
        return {
            "view0": [s.to_dict() for s in self.view0],
            "view1": [s.to_dict() for s in self.view1],
        }


# ---------------------------------------------------------------------------
# Corpora
# ---------------------------------------------------------------------------

class FeatureCorpus:
    """Utterances stored as feature matrices (in memory or .npy files)."""

    def __init__(
        self,
        entries: dict[str, tuple[str, np.ndarray | Path]],
        window_ms: float = featio.DEFAULT_WINDOW_MS,
        shift_ms: float = featio.DEFAULT_SHIFT_MS,
        speaker_vectors: np.ndarray | None = None,
    ):
        if not entries:
            raise ValidationError("corpus has no utterances")
        self._entries = entries
        self.window_ms = window_ms
        self.shift_ms = shift_ms
        self.speaker_vectors = speaker_vectors
        self._cache: dict[str, np.ndarray] = {}

    @property
    def utt_ids(self) -> list[str]:
        return sorted(self._entries)

    def speaker_of(self, utt_id: str) -> str:
        return self._lookup(utt_id)[0]

    def _lookup(self, utt_id: str):
        try:
            return self._entries[utt_id]
        except KeyError:
            raise ResourceError(f"utterance '{utt_id}' not in corpus") from None

    def _frames(self, utt_id: str) -> np.ndarray:
        if utt_id not in self._cache:
            _, payload = self._lookup(utt_id)
            self._cache[utt_id] = payload if isinstance(payload, np.ndarray) else np.load(payload)
        return self._cache[utt_id]

    def num_frames(self, utt_id: str) -> int:
        return self._frames(utt_id).shape[0]

    def features(self, utt_id: str) -> FeatureSequence:
        return FeatureSequence(
            frames=self._frames(utt_id).copy(),
            frame_shift_ms=self.shift_ms,
            window_ms=self.window_ms,
            utt_id=utt_id,
        )

    def crop(self, utt_id: str, start_frame: int, n_frames: int, aug: AugmentationSpec, rng_seed: int) -> FeatureSequence:
        frames = self._frames(utt_id)
        if start_frame < 0 or start_frame + n_frames > frames.shape[0]:
            raise ValidationError(f"crop [{start_frame}, {start_frame + n_frames}) out of range for '{utt_id}'")
        seg = FeatureSequence(
            frames=frames[start_frame : start_frame + n_frames].copy(),
            frame_shift_ms=self.shift_ms,
            window_ms=self.window_ms,
            utt_id=utt_id,
        )
        return featio.augment_features(seg, aug, rng_seed)


class AudioCorpus:
    """Utterances backed by wav files, featurized on access."""

    def __init__(
        self,
        entries: dict[str, tuple[str, Path]],
        sample_rate: int = featio.DEFAULT_SAMPLE_RATE,
        n_mels: int = featio.DEFAULT_N_MELS,
        window_ms: float = featio.DEFAULT_WINDOW_MS,
        shift_ms: float = featio.DEFAULT_SHIFT_MS,
    ):
        if not entries:
            raise ValidationError("corpus has no utterances")
        self._entries = entries
        self.sample_rate = sample_rate
        self.n_mels = n_mels
        self.window_ms = window_ms
        self.shift_ms = shift_ms
        self._cache: dict[str, Waveform] = {}

    @property
    def utt_ids(self) -> list[str]:
        return sorted(self._entries)

    def speaker_of(self, utt_id: str) -> str:
        return self._lookup(utt_id)[0]

    def _lookup(self, utt_id: str):
        try:
            return self._entries[utt_id]
        except KeyError:
            raise ResourceError(f"utterance '{utt_id}' not in corpus") from None

    def waveform(self, utt_id: str) -> Waveform:
        if utt_id not in self._cache:
            _, path = self._lookup(utt_id)
            self._cache[utt_id] = featio.read_wav(path, expected_rate=self.sample_rate, utt_id=utt_id)
        return self._cache[utt_id]

    def _frame_geometry(self) -> tuple[int, int]:
        win = int(round(self.window_ms * self.sample_rate / 1000.0))
        shift = int(round(self.shift_ms * self.sample_rate / 1000.0))
        return win, shift

    def num_frames(self, utt_id: str) -> int:
        win, shift = self._frame_geometry()
        return featio.frame_count(self.waveform(utt_id).samples.size, win, shift)

    def features(self, utt_id: str) -> FeatureSequence:
        return featio.extract_fbank(self.waveform(utt_id), self.n_mels, self.window_ms, self.shift_ms)

    def crop(self, utt_id: str, start_frame: int, n_frames: int, aug: AugmentationSpec, rng_seed: int) -> FeatureSequence:
        win, shift = self._frame_geometry()
        w = self.waveform(utt_id)
        lo = start_frame * shift
        hi = lo + win + (n_frames - 1) * shift
        if lo < 0 or hi > w.samples.size:
            raise ValidationError(f"crop [{lo}, {hi}) out of range for '{utt_id}'")
        seg = Waveform(samples=w.samples[lo:hi].copy(), sample_rate=w.sample_rate, utt_id=utt_id)
        if aug.kind in (featio.AugmentationKind.ADDITIVE_NOISE, featio.AugmentationKind.REVERB):
            seg = featio.augment(seg, aug, rng_seed)
            feats = featio.extract_fbank(seg, self.n_mels, self.window_ms, self.shift_ms)
        else:
            feats = featio.extract_fbank(seg, self.n_mels, self.window_ms, self.shift_ms)
            feats = featio.augment_features(feats, aug, rng_seed)
        if feats.num_frames != n_frames:
            raise ValidationError(f"crop of '{utt_id}' produced {feats.num_frames} frames, expected {n_frames}")
        return feats


Corpus = FeatureCorpus | AudioCorpus


# ---------------------------------------------------------------------------
# Pair-batch sampling
# ---------------------------------------------------------------------------

def seg_frames_for(corpus: Corpus, seg_seconds: float) -> int:
    n = featio.seconds_to_frames(seg_seconds, corpus.window_ms, corpus.shift_ms)
    if n < 1:
        raise ValidationError(f"segment of {seg_seconds}s yields no full frame")
    return n


def usable_utts(corpus: Corpus, seg_frames: int, candidates: list[str] | None = None) -> list[str]:
    """Utterances long enough for the requested segment; short ones are skipped
    with a warning."""
    pool = candidates if candidates is not None else corpus.utt_ids
    usable, skipped = [], []
    for u in pool:
        (usable if corpus.num_frames(u) >= seg_frames else skipped).append(u)
    if skipped:
        log.warning("skipping %d utterance(s) shorter than %d frames: %s", len(skipped), seg_frames, skipped[:5])
    return usable


def build_pair_batch(
    corpus: Corpus,
    utt_ids: list[str],
    seg_frames: int,
    aug_policy: AugmentationPolicy,
    rng_seed: int,
) -> PairBatch:
    """Two independently positioned, independently augmented, CMN-applied crops
    per listed utterance."""
    if len(utt_ids) < 2:
        raise ValidationError("a pair batch needs at least 2 utterances")
    if len(set(utt_ids)) != len(utt_ids):
        raise ValidationError("pair-batch utterances must be distinct")
    rng = np.random.default_rng(rng_seed)
    views = []
    for utt in utt_ids:
        max_start = corpus.num_frames(utt) - seg_frames
        if max_start < 0:
            raise ValidationError(f"utterance '{utt}' shorter than {seg_frames} frames")
        pair = []
        for i in (0, 1):
            start = int(rng.integers(0, max_start + 1))
            specs = aug_policy.specs_for_view(i)
            aug = specs[int(rng.integers(len(specs)))]
            crop_seed = int(rng.integers(0, 2**63 - 1))
            seg = corpus.crop(utt, start, seg_frames, aug, crop_seed)
            pair.append(featio.apply_cmn(seg).frames)
        views.append(np.stack(pair))
    return PairBatch(views=np.stack(views), utt_ids=list(utt_ids), seg_frames=seg_frames)


def sample_pair_batch(
    corpus: Corpus,
    n_pairs: int,
    seg_seconds: float,
    aug_policy: AugmentationPolicy,
    rng_seed: int,
) -> PairBatch:
    """Draw ``n_pairs`` distinct utterances (without replacement) and build
    their positive-pair views."""
    if n_pairs < 2:
        raise ValidationError(f"n_pairs must be >= 2, got {n_pairs}")
    seg = seg_frames_for(corpus, seg_seconds)
    pool = usable_utts(corpus, seg)
    if len(pool) < n_pairs:
        raise ValidationError(
            f"corpus exhausted: {len(pool)} usable utterance(s) for {n_pairs} pairs of {seg} frames"
        )
    rng = np.random.default_rng(np.random.SeedSequence([rng_seed, 0x5E1EC7]))
    chosen = [pool[i] for i in rng.choice(len(pool), size=n_pairs, replace=False)]
    return build_pair_batch(corpus, chosen, seg, aug_policy, rng_seed)


# ---------------------------------------------------------------------------
# Synthetic corpus with ground-truth factors
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Generator settings for a feature-domain corpus with known factors.

    Each sequence is speaker_vector (static bias over all frames)
    + content_scale * smooth trajectory + noise_scale * i.i.d. Gaussian noise.
    The trajectory is a stationary AR(1) path passed through a fixed
    per-speaker mixing matrix (I + speaker_color * A_s / sqrt(F)), with a
    per-speaker one-pole coefficient drawn from content_smoothness
    +- smoothness_jitter. The coloring gives each speaker a covariance
    signature that survives per-segment mean normalization (the way
    vocal-tract characteristics shape real spectra; the additive bias alone
    would be erased by CMN), and the jitter gives each speaker a temporal
    signature (the way speaking rate shapes real dynamics) that frame
    shuffling destroys.
    """

    num_speakers: int = 20
    utts_per_speaker: int = 20
    feat_dim: int = 20
    utt_frames: int = 240
    speaker_scale: float = 1.0
    speaker_color: float = 0.5
    content_smoothness: float = 0.97
    smoothness_jitter: float = 0.02
    content_scale: float = 1.5
    noise_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.num_speakers < 1 or self.utts_per_speaker < 1:
            raise ValidationError("synthetic corpus needs at least 1 speaker and 1 utterance per speaker")
        if not (0.0 <= self.content_smoothness < 1.0):
            raise ValidationError("content_smoothness must be in [0, 1)")
        if self.smoothness_jitter < 0:
            raise ValidationError("smoothness_jitter must be >= 0")
        if self.feat_dim < 1 or self.utt_frames < 1:
            raise ValidationError("feat_dim and utt_frames must be positive")


def _ar1_trajectory(rng: np.random.Generator, t: int, dim: int, rho) -> np.ndarray:
    """Stationary unit-variance AR(1) path, the smooth dynamic factor.

    ``rho`` is a scalar or a per-dimension vector of one-pole coefficients.
    """
    rho = np.broadcast_to(np.asarray(rho, dtype=np.float64), (dim,))
    eps = rng.standard_normal((t, dim))
    out = np.empty((t, dim))
    out[0] = eps[0]
    drive = np.sqrt(1.0 - rho * rho)
    for i in range(1, t):
        out[i] = rho * out[i - 1] + drive * eps[i]
    return out


def generate_synthetic(spec: SyntheticSpec) -> FeatureCorpus:
    """Seeded feature corpus; speaker labels ride along for probing only."""
    rng = np.random.default_rng(spec.seed)
    f = spec.feat_dim
    vectors = spec.speaker_scale * rng.standard_normal((spec.num_speakers, f))
    if len({v.tobytes() for v in vectors}) != spec.num_speakers:
        raise ValidationError("degenerate synthetic spec: speaker vectors collide")
    mixers = np.eye(f) + spec.speaker_color * rng.standard_normal((spec.num_speakers, f, f)) / np.sqrt(f)
    low = spec.content_smoothness - spec.smoothness_jitter
    high = spec.content_smoothness + spec.smoothness_jitter
    smoothness = np.clip(rng.uniform(low, high, size=(spec.num_speakers, f)), 0.0, 0.99)
    entries: dict[str, tuple[str, np.ndarray]] = {}
    for s in range(spec.num_speakers):
        for u in range(spec.utts_per_speaker):
            traj = _ar1_trajectory(rng, spec.utt_frames, f, smoothness[s]) @ mixers[s].T
            noise = rng.standard_normal((spec.utt_frames, f))
            frames = vectors[s] + spec.content_scale * traj + spec.noise_scale * noise
            entries[f"s{s:03d}u{u:03d}"] = (f"s{s:03d}", frames)
    return FeatureCorpus(entries, speaker_vectors=vectors)


# ---------------------------------------------------------------------------
# Trials
# ---------------------------------------------------------------------------

def make_trials(corpus: Corpus, n_target: int, n_nontarget: int, rng_seed: int) -> list[Trial]:
    """Distinct (enroll, test) pairs: targets share a speaker, nontargets do
    not; an utterance is never paired with itself."""
    utts = corpus.utt_ids
    speakers = np.array([corpus.speaker_of(u) for u in utts])
    i, j = np.triu_indices(len(utts), k=1)
    same = speakers[i] == speakers[j]
    n_same, n_diff = int(same.sum()), int((~same).sum())
    if n_target > n_same:
        raise ValidationError(f"requested {n_target} target trials but only {n_same} same-speaker pairs exist")
    if n_nontarget > n_diff:
        raise ValidationError(f"requested {n_nontarget} nontarget trials but only {n_diff} cross-speaker pairs exist")
    rng = np.random.default_rng(rng_seed)
    tgt_idx = rng.choice(np.flatnonzero(same), size=n_target, replace=False)
    non_idx = rng.choice(np.flatnonzero(~same), size=n_nontarget, replace=False)
    trials = [Trial(1, utts[i[k]], utts[j[k]]) for k in tgt_idx]
    trials += [Trial(0, utts[i[k]], utts[j[k]]) for k in non_idx]
    return trials


def write_trials(path: str | Path, trials: list[Trial]) -> None:
    with open(path, "w") as fh:
        for t in trials:
            fh.write(f"{t.label} {t.enroll} {t.test}\n")


def read_trials(path: str | Path) -> list[Trial]:
    trials = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3 or parts[0] not in ("0", "1"):
                raise ValidationError(f"{path}:{lineno}: expected '<0|1> <enroll> <test>', got {line!r}")
            trials.append(Trial(int(parts[0]), parts[1], parts[2]))
    return trials


# ---------------------------------------------------------------------------
# Corpus persistence
# ---------------------------------------------------------------------------

def save_feature_corpus(corpus: FeatureCorpus, out_dir: str | Path) -> Path:
    """Write features/*.npy, a manifest, and a metadata sidecar."""
    out = Path(out_dir)
    feat_dir = out / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for utt in corpus.utt_ids:
        rel = f"features/{utt}.npy"
        np.save(out / rel, corpus._frames(utt).astype(np.float64))
        lines.append(f"{utt} {corpus.speaker_of(utt)} {rel}\n")
    (out / MANIFEST_NAME).write_text("".join(lines))
    meta = {"window_ms": corpus.window_ms, "shift_ms": corpus.shift_ms, "kind": "features"}
    (out / META_NAME).write_text(json.dumps(meta, indent=2) + "\n")
    if corpus.speaker_vectors is not None:
        np.save(out / "speaker_vectors.npy", corpus.speaker_vectors)
    return out / MANIFEST_NAME


def read_manifest(manifest_path: str | Path, **audio_kwargs) -> Corpus:
    """Load a corpus from a `<utt_id> <speaker_id> <path>` manifest.

    Entry paths are resolved relative to the manifest; .npy entries build a
    FeatureCorpus, .wav entries an AudioCorpus.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise ResourceError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    entries: dict[str, tuple[str, Path]] = {}
    suffixes = set()
    for lineno, line in enumerate(manifest_path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValidationError(f"{manifest_path}:{lineno}: expected '<utt_id> <speaker_id> <path>'")
        utt, spk, rel = parts
        if utt in entries:
            raise ValidationError(f"{manifest_path}:{lineno}: duplicate utterance id '{utt}'")
        path = root / rel
        entries[utt] = (spk, path)
        suffixes.add(path.suffix.lower())
    if suffixes == {".npy"}:
        meta_path = root / META_NAME
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        vec_path = root / "speaker_vectors.npy"
        return FeatureCorpus(
            entries,
            window_ms=meta.get("window_ms", featio.DEFAULT_WINDOW_MS),
            shift_ms=meta.get("shift_ms", featio.DEFAULT_SHIFT_MS),
            speaker_vectors=np.load(vec_path) if vec_path.exists() else None,
        )
    if suffixes == {".wav"}:
        return AudioCorpus(entries, **audio_kwargs)
    raise ValidationError(f"manifest mixes or lacks recognized entry types: {sorted(suffixes)}")
