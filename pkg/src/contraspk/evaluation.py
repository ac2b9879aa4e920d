"""Embedding extraction, trial scoring, EER / minDCF, and speaker-leakage
probes on content embeddings.

EER follows the ROC-convex-hull convention: sweep thresholds at all distinct
scores (ties grouped), take the convex minorant of the (P_fa, P_miss)
operating points, and linearly interpolate the crossing with P_miss = P_fa.
The crossing is computed in exact rational arithmetic, so equal-valued inputs
give bit-identical results. minDCF is the plain sweep minimum with NIST-style
normalization.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch

from . import featio
from .dataset import Corpus, Trial
from .errors import ResourceError, ValidationError
from .model import SpeakerContentVAE
from .seeding import derive_seed, torch_generator

EMBEDDING_SOURCES = ("spk_emb", "avg_con_emb")


@dataclass
class EmbeddingArchive:
    """utt_id -> fixed-dimension vector, all from one checkpoint and source."""

    vectors: dict[str, np.ndarray]
    dim: int
    source: str
    checkpoint_id: str = ""

    def __post_init__(self):
        if self.source not in EMBEDDING_SOURCES:
            raise ValidationError(f"source must be one of {EMBEDDING_SOURCES}, got {self.source!r}")
        for utt, vec in self.vectors.items():
            if vec.shape != (self.dim,):
                raise ValidationError(f"embedding for '{utt}' has shape {vec.shape}, expected ({self.dim},)")

    def save(self, path: str | Path) -> None:
        ids = sorted(self.vectors)
        np.savez(
            path,
            ids=np.array(ids),
            vectors=np.stack([self.vectors[u] for u in ids]),
            source=np.array(self.source),
            checkpoint_id=np.array(self.checkpoint_id),
        )

    @staticmethod
    def load(path: str | Path) -> "EmbeddingArchive":
        data = np.load(path, allow_pickle=False)
        vecs = {str(u): v for u, v in zip(data["ids"], data["vectors"])}
        return EmbeddingArchive(
            vectors=vecs,
            dim=int(data["vectors"].shape[1]),
            source=str(data["source"]),
            checkpoint_id=str(data["checkpoint_id"]),
        )


@dataclass
class TrialScoreSet:
    trials: list[Trial]
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(self.trials) != self.scores.size:
            raise ValidationError("one score per trial required")
        if not np.all(np.isfinite(self.scores)):
            raise ValidationError("scores must be finite")

    @property
    def labels(self) -> np.ndarray:
        return np.array([t.label for t in self.trials], dtype=bool)


@dataclass
class EvalReport:
    eer: float
    min_dcf: float
    p_target: float
    c_miss: float
    c_fa: float
    n_target: int
    n_nontarget: int

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Extraction and scoring
# ---------------------------------------------------------------------------

def _utt_generator(eval_seed: int, utt_id: str) -> torch.Generator:
    return torch_generator(derive_seed(eval_seed, zlib.crc32(utt_id.encode())))


def extract_embeddings(
    model: SpeakerContentVAE,
    corpus: Corpus,
    source: str,
    checkpoint_id: str = "",
    eval_seed: int = 0,
    utt_ids: list[str] | None = None,
) -> EmbeddingArchive:
    """Full-utterance (unaugmented, CMN-applied) embeddings.

    spk_emb is the speaker posterior mean; avg_con_emb is the content
    posterior mean averaged over frames.
    """
    if source not in EMBEDDING_SOURCES:
        raise ValidationError(f"source must be one of {EMBEDDING_SOURCES}, got {source!r}")
    wanted = corpus.utt_ids if utt_ids is None else list(utt_ids)
    missing = [u for u in wanted if u not in set(corpus.utt_ids)]
    if missing:
        raise ResourceError(f"utterances missing from corpus: {missing}")
    model.eval()
    vectors: dict[str, np.ndarray] = {}
    with torch.no_grad():
        for utt in sorted(wanted):
            feats = featio.apply_cmn(corpus.features(utt))
            x = feats.frames[None]  # (1, T, F)
            if source == "spk_emb":
                vec = model.encode_speaker(x).mu_s[0]
            else:
                post = model.encode_content(x, generator=_utt_generator(eval_seed, utt))
                vec = post.mu_c[0].mean(dim=0)
            vectors[utt] = vec.double().cpu().numpy()
    dim = next(iter(vectors.values())).shape[0]
    return EmbeddingArchive(vectors=vectors, dim=dim, source=source, checkpoint_id=checkpoint_id)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValidationError("zero-norm vector: cosine similarity undefined")
    return float(np.dot(a, b) / (na * nb))


def score_trials(archive: EmbeddingArchive, trials: list[Trial]) -> TrialScoreSet:
    missing = sorted({u for t in trials for u in (t.enroll, t.test)} - set(archive.vectors))
    if missing:
        raise ResourceError(f"trial utterances missing from archive: {missing}")
    scores = np.array([cosine(archive.vectors[t.enroll], archive.vectors[t.test]) for t in trials])
    return TrialScoreSet(trials=trials, scores=scores)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def operating_points(scores: np.ndarray, labels: np.ndarray) -> tuple[list[tuple[int, int]], int, int]:
    """All achievable (miss_count, fa_count) pairs from sweeping a single
    accept-if-score>=threshold rule over the distinct scores, plus the
    reject-everything endpoint. Tie scores move across the threshold together.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_t = int(labels.sum())
    n_n = int(labels.size - n_t)
    if n_t == 0 or n_n == 0:
        raise ValidationError("score set needs at least one target and one nontarget trial")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    cum_t = np.cumsum(sorted_labels)
    cum_n = np.cumsum(~sorted_labels)
    points = [(n_t, 0)]  # reject everything
    for k in range(1, scores.size + 1):
        if k < scores.size and sorted_scores[k] == sorted_scores[k - 1]:
            continue  # same threshold group
        points.append((n_t - int(cum_t[k - 1]), int(cum_n[k - 1])))
    return points, n_t, n_n


def _lower_hull(points: list[tuple[int, int]]) -> list[tuple[int, int]]:
    """Convex minorant of integer (x=fa, y=miss) operating points."""
    best_miss: dict[int, int] = {}
    for miss, fa in points:
        if fa not in best_miss or miss < best_miss[fa]:
            best_miss[fa] = miss
    pts = sorted(best_miss.items())
    hull: list[tuple[int, int]] = []
    for p in pts:
        while len(hull) >= 2:
            (ax, ay), (bx, by) = hull[-2], hull[-1]
            if (bx - ax) * (p[1] - ay) - (by - ay) * (p[0] - ax) <= 0:
                hull.pop()
            else:
                break
        hull.append(p)
    return hull  # fa ascending, miss descending


def compute_eer(s: TrialScoreSet) -> float:
    """Equal error rate at the diagonal crossing of the ROC convex hull."""
    points, n_t, n_n = operating_points(s.scores, s.labels)
    hull = _lower_hull(points)
    diffs = [Fraction(miss, n_t) - Fraction(fa, n_n) for fa, miss in hull]
    # diffs decrease from +1 (reject all) to -1 (accept all) along the hull
    for i in range(len(hull) - 1):
        d_a, d_b = diffs[i], diffs[i + 1]
        if d_a >= 0 >= d_b:
            if d_a == d_b:  # both zero
                return float(Fraction(hull[i][1], n_t))
            alpha = d_a / (d_a - d_b)
            pm_a = Fraction(hull[i][1], n_t)
            pm_b = Fraction(hull[i + 1][1], n_t)
            return float(pm_a + alpha * (pm_b - pm_a))
    raise ValidationError("no diagonal crossing found on the ROC hull")  # pragma: no cover


def compute_min_dcf(s: TrialScoreSet, p_target: float = 0.01, c_miss: float = 1.0, c_fa: float = 1.0) -> float:
    """Minimum normalized detection cost over the threshold sweep."""
    if not (0.0 < p_target < 1.0):
        raise ValidationError(f"p_target must be in (0, 1), got {p_target}")
    if c_miss <= 0 or c_fa <= 0:
        raise ValidationError("costs must be positive")
    points, n_t, n_n = operating_points(s.scores, s.labels)
    norm = min(c_miss * p_target, c_fa * (1.0 - p_target))
    best = min(
        (c_miss * p_target * miss / n_t + c_fa * (1.0 - p_target) * fa / n_n) / norm
        for miss, fa in points
    )
    return float(best)


def evaluate_scores(
    s: TrialScoreSet, p_target: float = 0.01, c_miss: float = 1.0, c_fa: float = 1.0
) -> EvalReport:
    labels = s.labels
    return EvalReport(
        eer=compute_eer(s),
        min_dcf=compute_min_dcf(s, p_target, c_miss, c_fa),
        p_target=p_target,
        c_miss=c_miss,
        c_fa=c_fa,
        n_target=int(labels.sum()),
        n_nontarget=int((~labels).sum()),
    )


# ---------------------------------------------------------------------------
# Disentanglement probes
# ---------------------------------------------------------------------------

@dataclass
class ProbeReport:
    eer: float
    probe_accuracy: float
    n_speakers: int
    n_train: int
    n_test: int

    def to_dict(self) -> dict:
        return asdict(self)


def _balanced_pairs(
    utts: list[str], labels: dict[str, str], rng: np.random.Generator, max_per_class: int
) -> list[Trial]:
    spk = np.array([labels[u] for u in utts])
    i, j = np.triu_indices(len(utts), k=1)
    same = spk[i] == spk[j]
    same_idx = np.flatnonzero(same)
    diff_idx = np.flatnonzero(~same)
    if same_idx.size == 0 or diff_idx.size == 0:
        raise ValidationError("need both same-speaker and cross-speaker pairs for a probe")
    n = min(max_per_class, same_idx.size, diff_idx.size)
    tgt = rng.choice(same_idx, size=n, replace=False)
    non = rng.choice(diff_idx, size=n, replace=False)
    return [Trial(1, utts[i[k]], utts[j[k]]) for k in tgt] + [Trial(0, utts[i[k]], utts[j[k]]) for k in non]


def _ridge_probe(
    x: np.ndarray, y: np.ndarray, train_idx: np.ndarray, test_idx: np.ndarray, alpha: float = 1.0
) -> float:
    """Closed-form ridge regression onto one-hot labels; argmax accuracy."""
    classes = np.unique(y)
    onehot = (y[train_idx, None] == classes[None, :]).astype(np.float64)
    xtr = np.hstack([x[train_idx], np.ones((train_idx.size, 1))])
    xte = np.hstack([x[test_idx], np.ones((test_idx.size, 1))])
    gram = xtr.T @ xtr + alpha * np.eye(xtr.shape[1])
    weights = np.linalg.solve(gram, xtr.T @ onehot)
    pred = classes[np.argmax(xte @ weights, axis=1)]
    return float(np.mean(pred == y[test_idx]))


def probe_speaker_leakage(
    archive: EmbeddingArchive,
    labels: dict[str, str],
    rng_seed: int = 0,
    max_trials_per_class: int = 2000,
    train_fraction: float = 0.7,
) -> ProbeReport:
    """How much speaker information the embeddings carry.

    (a) verification-style EER over balanced same/cross-speaker pairs;
    (b) accuracy of a closed-form ridge classifier predicting the speaker
    from the embedding, on a fixed per-speaker train/test split.
    """
    utts = sorted(set(archive.vectors) & set(labels))
    if not utts:
        raise ValidationError("no labeled utterances present in the archive")
    speakers = sorted({labels[u] for u in utts})
    if len(speakers) < 2:
        raise ValidationError(f"probe needs >= 2 speakers, got {len(speakers)}")
    rng = np.random.default_rng(rng_seed)

    trials = _balanced_pairs(utts, labels, rng, max_trials_per_class)
    eer = compute_eer(score_trials(archive, trials))

    x = np.stack([archive.vectors[u] for u in utts])
    y = np.array([labels[u] for u in utts])
    train_idx, test_idx = [], []
    for spk in speakers:
        idx = np.flatnonzero(y == spk)
        idx = idx[rng.permutation(idx.size)]
        n_train = max(1, int(round(train_fraction * idx.size)))
        if idx.size >= 2:
            n_train = min(n_train, idx.size - 1)
        train_idx.extend(idx[:n_train])
        test_idx.extend(idx[n_train:])
    if not test_idx:
        raise ValidationError("probe split produced no test utterances; need >= 2 utterances per speaker")
    train_idx = np.array(sorted(train_idx))
    test_idx = np.array(sorted(test_idx))
    acc = _ridge_probe(x, y, train_idx, test_idx)
    return ProbeReport(
        eer=eer,
        probe_accuracy=acc,
        n_speakers=len(speakers),
        n_train=train_idx.size,
        n_test=test_idx.size,
    )


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def write_scores(path: str | Path, s: TrialScoreSet) -> None:
    with open(path, "w") as fh:
        for trial, score in zip(s.trials, s.scores):
            fh.write(f"{trial.label} {trial.enroll} {trial.test} {score:.6f}\n")


def read_scores(path: str | Path) -> TrialScoreSet:
    trials, scores = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4 or parts[0] not in ("0", "1"):
                raise ValidationError(f"{path}:{lineno}: expected '<label> <enroll> <test> <score>'")
            trials.append(Trial(int(parts[0]), parts[1], parts[2]))
            scores.append(float(parts[3]))
    return TrialScoreSet(trials=trials, scores=np.array(scores))


def write_report(path: str | Path, report: EvalReport, extra: dict | None = None) -> None:
    payload = report.to_dict()
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")
