"""Independent brute-force references used by the oracle-equivalence tests.

Everything here is written loop-by-loop from the definitions, deliberately
avoiding the production code paths it checks.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np


# ---------------------------------------------------------------------------
# Contrastive loss
# ---------------------------------------------------------------------------

def nt_xent_oracle(embeddings: np.ndarray, tau: float, rule: str) -> tuple[float, list[float]]:
    """Enumerate every similarity term explicitly.

    embeddings is (2N, D) pair-major: row 2n + i is view i of pair n.
    """
    two_n = embeddings.shape[0]

    def cos(a, b):
        return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))

    per_anchor = []
    for a in range(two_n):
        n_a, i_a = a // 2, a % 2
        positive = 2 * n_a + (1 - i_a)
        numerator = math.exp(cos(embeddings[a], embeddings[positive]) / tau)
        denominator = 0.0
        for j in range(two_n):
            if rule == "exclude_anchor_only":
                include = j != a
            elif rule == "strict_indicator":
                include = (j // 2 != n_a) and (j % 2 != i_a)
            else:
                raise ValueError(rule)
            if include:
                denominator += math.exp(cos(embeddings[a], embeddings[j]) / tau)
        per_anchor.append(-math.log(numerator / denominator))
    return sum(per_anchor) / two_n, per_anchor


# ---------------------------------------------------------------------------
# Detection metrics
# ---------------------------------------------------------------------------

def sweep_points_oracle(scores, labels) -> tuple[list[tuple[int, int]], int, int]:
    """(miss, fa) counts for accept-if-score>=threshold at every distinct
    score, plus the reject-all endpoint, by direct counting."""
    scores = list(map(float, scores))
    labels = list(map(bool, labels))
    n_t = sum(labels)
    n_n = len(labels) - n_t
    points = {(n_t, 0)}
    for theta in sorted(set(scores)):
        miss = sum(1 for s, l in zip(scores, labels) if l and s < theta)
        fa = sum(1 for s, l in zip(scores, labels) if not l and s >= theta)
        points.add((miss, fa))
    return sorted(points), n_t, n_n


def _lower_chain_qhull(points: list[tuple[int, int]]) -> list[tuple[int, int]]:
    """Lower-left hull vertices of integer (fa, miss) points via qhull plus an
    exact integer chord test (independent of the production monotone chain)."""
    import scipy.spatial

    pts = sorted({(fa, miss) for miss, fa in points})
    start = min(pts, key=lambda p: (p[0], p[1]))
    end = max(pts, key=lambda p: (p[0], -p[1]))
    try:
        hull = scipy.spatial.ConvexHull(np.array(pts, dtype=np.float64))
        verts = {pts[i] for i in hull.vertices}
    except scipy.spatial.QhullError:
        verts = set(pts)  # fully collinear input; chord filter handles it
    verts |= {start, end}
    sx, sy = start
    ex, ey = end
    lower = [
        v for v in verts
        if (ex - sx) * (v[1] - sy) - (ey - sy) * (v[0] - sx) <= 0  # on/below chord
    ]
    best: dict[int, int] = {}
    for fa, miss in lower:
        if fa not in best or miss < best[fa]:
            best[fa] = miss
    return sorted(best.items())


def eer_oracle(scores, labels) -> float:
    """Diagonal crossing of the ROC convex hull, in exact arithmetic."""
    points, n_t, n_n = sweep_points_oracle(scores, labels)
    hull = _lower_chain_qhull(points)
    diffs = [Fraction(miss, n_t) - Fraction(fa, n_n) for fa, miss in hull]
    for i in range(len(hull) - 1):
        if diffs[i] >= 0 >= diffs[i + 1]:
            d_a, d_b = diffs[i], diffs[i + 1]
            pm_a = Fraction(hull[i][1], n_t)
            pm_b = Fraction(hull[i + 1][1], n_t)
            if d_a == d_b:
                return float(pm_a)
            alpha = d_a / (d_a - d_b)
            return float(pm_a + alpha * (pm_b - pm_a))
    raise AssertionError("no crossing found")


def min_dcf_oracle(scores, labels, p_target: float, c_miss: float, c_fa: float) -> float:
    points, n_t, n_n = sweep_points_oracle(scores, labels)
    norm = min(c_miss * p_target, c_fa * (1.0 - p_target))
    best = None
    for miss, fa in points:
        cost = (c_miss * p_target * miss / n_t + c_fa * (1.0 - p_target) * fa / n_n) / norm
        if best is None or cost < best:
            best = cost
    return float(best)


# ---------------------------------------------------------------------------
# KL divergence Monte Carlo
# ---------------------------------------------------------------------------

def kl_standard_normal_mc(mu: np.ndarray, sigma: np.ndarray, n_samples: int, seed: int) -> float:
    """E_q[log q(z) - log p(z)] estimated from reparameterized samples."""
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n_samples, mu.size))
    z = mu[None, :] + sigma[None, :] * eps
    log_q = (-0.5 * ((z - mu) / sigma) ** 2 - np.log(sigma) - 0.5 * np.log(2 * np.pi)).sum(axis=1)
    log_p = (-0.5 * z**2 - 0.5 * np.log(2 * np.pi)).sum(axis=1)
    return float(np.mean(log_q - log_p))


# ---------------------------------------------------------------------------
# Filter-bank reference
# ---------------------------------------------------------------------------

def fbank_reference(samples: np.ndarray, sample_rate: int, n_mels: int,
                    window_ms: float, shift_ms: float, log_floor: float) -> np.ndarray:
    """Frame-by-frame DFT-matrix filter-bank computation."""
    win = int(round(window_ms * sample_rate / 1000.0))
    shift = int(round(shift_ms * sample_rate / 1000.0))
    n_frames = (len(samples) - win) // shift + 1
    n_fft = 1
    while n_fft < win:
        n_fft *= 2
    k = np.arange(n_fft // 2 + 1)
    n = np.arange(n_fft)
    dft = np.exp(-2j * np.pi * np.outer(k, n) / n_fft)  # explicit DFT matrix
    hamming = 0.54 - 0.46 * np.cos(2 * np.pi * np.arange(win) / (win - 1))

    def mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def inv_mel(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    edges = inv_mel(np.linspace(mel(0.0), mel(sample_rate / 2.0), n_mels + 2))
    freqs = k * sample_rate / n_fft
    fb = np.zeros((n_mels, k.size))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        for b, f in enumerate(freqs):
            if lo <= f <= mid:
                fb[m, b] = (f - lo) / (mid - lo)
            elif mid < f <= hi:
                fb[m, b] = (hi - f) / (hi - mid)

    out = np.zeros((n_frames, n_mels))
    for t in range(n_frames):
        frame = samples[t * shift : t * shift + win] * hamming
        padded = np.zeros(n_fft)
        padded[:win] = frame
        spectrum = np.abs(dft @ padded) ** 2
        out[t] = np.log(np.maximum(fb @ spectrum, log_floor))
    return out


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def central_difference(f, param, index: int, h: float = 1e-4) -> float:
    """d f / d param[index] by central differences; f re-evaluates the model."""
    flat = param.detach().view(-1)
    orig = flat[index].item()
    flat[index] = orig + h
    f_plus = f()
    flat[index] = orig - h
    f_minus = f()
    flat[index] = orig
    return (f_plus - f_minus) / (2.0 * h)


def fd_gradient_check(f, param, index: int, analytic: float, h: float = 1e-4,
                      rel_tol: float = 1e-4) -> tuple[bool, float, float, bool]:
    """Compare an analytic derivative against central differences.

    Central differences only estimate the derivative when the function is
    smooth across [x-h, x+h]. A mismatch between the forward and backward
    one-sided slopes (computed without reference to the analytic value)
    certifies a kink inside the interval, e.g. a relu changing state; in that
    case the comparison reruns at h/10 where the interval is clean.

    Returns (ok, numeric, h_used, fell_back).
    """
    flat = param.detach().view(-1)
    orig = flat[index].item()

    def probe(step):
        flat[index] = orig + step
        f_plus = f()
        flat[index] = orig - step
        f_minus = f()
        flat[index] = orig
        f_mid = f()
        fwd = (f_plus - f_mid) / step
        bwd = (f_mid - f_minus) / step
        central = (f_plus - f_minus) / (2.0 * step)
        smooth = abs(fwd - bwd) <= 1e-3 * max(abs(fwd), abs(bwd), 1e-6)
        return central, smooth

    numeric, smooth = probe(h)
    used, fell_back = h, False
    if not smooth:
        numeric, smooth = probe(h / 10.0)
        used, fell_back = h / 10.0, True
        if not smooth:
            numeric, _ = probe(h / 100.0)
            used = h / 100.0
    ok = abs(analytic - numeric) <= rel_tol * max(abs(analytic), abs(numeric), 1e-6)
    return ok, numeric, used, fell_back
