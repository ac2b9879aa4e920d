"""Audio ingestion, log mel filter-bank features, CMN, and augmentation.

All operations are pure functions of their inputs plus an explicit seed, so
they can run concurrently from any number of workers.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.io.wavfile
import scipy.signal

from .errors import ResourceError, TooShortError, ValidationError

# Filter-bank energies are clamped here before the log so silence maps to a
# finite floor instead of -inf.
LOG_FLOOR = 1e-10

DEFAULT_SAMPLE_RATE = 16000
DEFAULT_N_MELS = 80
DEFAULT_WINDOW_MS = 25.0
DEFAULT_SHIFT_MS = 10.0


@dataclass
class Waveform:
    """Mono audio signal with amplitude in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int
    utt_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValidationError(f"waveform must be a non-empty 1-D array, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValidationError(f"waveform '{self.utt_id}' contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValidationError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class FeatureSequence:
    """T x F matrix of log filter-bank energies plus frame metadata."""

    frames: np.ndarray
    frame_shift_ms: float = DEFAULT_SHIFT_MS
    window_ms: float = DEFAULT_WINDOW_MS
    utt_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValidationError(f"frames must be a T x F matrix with T >= 1, got shape {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValidationError(f"feature sequence '{self.utt_id}' contains non-finite values")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


class AugmentationKind(str, enum.Enum):
    NONE = "none"
    ADDITIVE_NOISE = "additive_noise"
    REVERB = "reverb"
    FRAME_SHUFFLE = "frame_shuffle"


@dataclass(frozen=True)
class AugmentationSpec:
    """One augmentation to apply to a segment.

    ``noise_source`` / ``rir_source`` are either a directory of audio files
    (enumerated sorted by filename) or an integer seed for a synthetic
    generator, so desk-scale runs need no external corpora.
    """

    kind: AugmentationKind = AugmentationKind.NONE
    snr_db: float = 10.0
    noise_source: str | int | None = None
    rir_source: str | int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", AugmentationKind(self.kind))
        if not np.isfinite(self.snr_db):
            raise ValidationError("snr_db must be finite")
        if self.kind == AugmentationKind.ADDITIVE_NOISE and self.noise_source is None:
            raise ValidationError("additive_noise requires a noise_source")
        if self.kind == AugmentationKind.REVERB and self.rir_source is None:
            raise ValidationError("reverb requires an rir_source")

    @staticmethod
    def from_dict(d: dict) -> "AugmentationSpec":
        return AugmentationSpec(**d)

    def to_dict(self) -> dict:
        out = {"kind": self.kind.value}
        if self.kind == AugmentationKind.ADDITIVE_NOISE:
            out["snr_db"] = self.snr_db
            out["noise_source"] = self.noise_source
        if self.kind == AugmentationKind.REVERB:
            out["rir_source"] = self.rir_source
        return out


# ---------------------------------------------------------------------------
# WAV I/O (16-bit PCM RIFF, mono)
# ---------------------------------------------------------------------------

def read_wav(path: str | Path, expected_rate: int | None = None, utt_id: str | None = None) -> Waveform:
    """Read a mono 16-bit PCM file; a mismatched sample rate is an error."""
    path = Path(path)
    if not path.exists():
        raise ResourceError(f"audio file not found: {path}")
    rate, data = scipy.io.wavfile.read(str(path))
    if data.ndim != 1:
        raise ValidationError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype != np.int16:
        raise ValidationError(f"{path}: expected 16-bit PCM, got dtype {data.dtype}")
    if expected_rate is not None and rate != expected_rate:
        raise ValidationError(f"{path}: sample rate {rate} != expected {expected_rate} (resampling unsupported)")
    samples = data.astype(np.float64) / 32768.0
    return Waveform(samples=samples, sample_rate=rate, utt_id=utt_id or path.stem)


def write_wav(path: str | Path, w: Waveform) -> None:
    quantized = np.clip(np.round(w.samples * 32768.0), -32768, 32767)
    scipy.io.wavfile.write(str(path), w.sample_rate, quantized.astype(np.int16))


# ---------------------------------------------------------------------------
# Filter-bank extraction
# ---------------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (np.power(10.0, np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """HTK-style triangular filters spanning 0 Hz to Nyquist.

    Returns an (n_mels, n_fft // 2 + 1) weight matrix.
    """
    nyquist = sample_rate / 2.0
    mel_points = np.linspace(hz_to_mel(0.0), hz_to_mel(nyquist), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    bin_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft

    weights = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(n_mels):
        lo, center, hi = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        up = (bin_freqs - lo) / (center - lo)
        down = (hi - bin_freqs) / (hi - center)
        weights[m] = np.maximum(0.0, np.minimum(up, down))
    return weights


def frame_count(num_samples: int, window_samples: int, shift_samples: int) -> int:
    """floor((len - window) / shift) + 1; negative means no full frame fits."""
    if num_samples < window_samples:
        return 0
    return (num_samples - window_samples) // shift_samples + 1


def seconds_to_frames(seconds: float, window_ms: float = DEFAULT_WINDOW_MS, shift_ms: float = DEFAULT_SHIFT_MS) -> int:
    """Number of frames produced by a segment of the given duration."""
    return frame_count(int(round(seconds * 1000.0)), int(round(window_ms)), int(round(shift_ms)))


def extract_fbank(
    w: Waveform,
    n_mels: int = DEFAULT_N_MELS,
    window_ms: float = DEFAULT_WINDOW_MS,
    shift_ms: float = DEFAULT_SHIFT_MS,
) -> FeatureSequence:
    """Log mel filter-bank energies with a Hamming analysis window.

    Framing drops any tail shorter than one window, so
    T = floor((len - window) / shift) + 1 in samples.
    """
    if n_mels < 1:
        raise ValidationError(f"n_mels must be >= 1, got {n_mels}")
    if not (window_ms > shift_ms > 0):
        raise ValidationError(f"need window_ms > shift_ms > 0, got {window_ms}/{shift_ms}")

    window_samples = int(round(window_ms * w.sample_rate / 1000.0))
    shift_samples = int(round(shift_ms * w.sample_rate / 1000.0))
    n_frames = frame_count(w.samples.size, window_samples, shift_samples)
    if n_frames < 1:
        raise TooShortError(
            f"signal '{w.utt_id}' has {w.samples.size} samples, shorter than one {window_samples}-sample window"
        )

    n_fft = 1 << (window_samples - 1).bit_length()
    # (T, window) view of overlapping frames
    idx = np.arange(window_samples)[None, :] + shift_samples * np.arange(n_frames)[:, None]
    frames = w.samples[idx] * np.hamming(window_samples)[None, :]
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2  # (T, n_fft/2+1)
    energies = power @ mel_filterbank(n_mels, n_fft, w.sample_rate).T  # (T, n_mels)
    log_energies = np.log(np.maximum(energies, LOG_FLOOR))
    return FeatureSequence(frames=log_energies, frame_shift_ms=shift_ms, window_ms=window_ms, utt_id=w.utt_id)


def apply_cmn(f: FeatureSequence) -> FeatureSequence:
    """Subtract the per-dimension mean over all frames (per-utterance CMN)."""
    return replace(f, frames=f.frames - f.frames.mean(axis=0, keepdims=True))


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def _list_audio_dir(source: str | Path) -> list[Path]:
    d = Path(source)
    if not d.is_dir():
        raise ResourceError(f"augmentation source directory not found: {d}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() == ".wav")
    if not files:
        raise ResourceError(f"no .wav files in augmentation source directory: {d}")
    return files


def _derived_rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


def _resolve_noise(source: str | int, n: int, sample_rate: int, rng_seed: int) -> np.ndarray:
    """A noise clip of exactly n samples, from a directory or a seeded generator."""
    if isinstance(source, (int, np.integer)):
        return _derived_rng(int(source), rng_seed, 0xA).standard_normal(n)
    files = _list_audio_dir(source)
    rng = _derived_rng(rng_seed, 0xB)
    clip = read_wav(files[rng.integers(len(files))], expected_rate=sample_rate).samples
    if clip.size < n:
        clip = np.tile(clip, int(np.ceil(n / clip.size)))
    offset = rng.integers(clip.size - n + 1)
    return clip[offset : offset + n]


def _resolve_rir(source: str | int, sample_rate: int, rng_seed: int) -> np.ndarray:
    """An impulse response: a file from a directory, or a synthetic decaying tail."""
    if isinstance(source, (int, np.integer)):
        rng = _derived_rng(int(source), rng_seed, 0xC)
        n = int(0.25 * sample_rate)
        decay = np.exp(-np.arange(n) / (0.05 * sample_rate))
        rir = decay * rng.standard_normal(n)
        rir[0] = 1.0
        return rir / np.max(np.abs(rir))
    files = _list_audio_dir(source)
    rng = _derived_rng(rng_seed, 0xD)
    return read_wav(files[rng.integers(len(files))], expected_rate=sample_rate).samples


def signal_power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def augment(w: Waveform, spec: AugmentationSpec, rng_seed: int) -> Waveform:
    """Apply one waveform-domain augmentation, deterministically under the seed.

    additive_noise scales the noise clip so 10*log10(P_signal / P_noise)
    equals ``spec.snr_db``; reverb convolves with the impulse response,
    truncates to the input length, and renormalizes to the input peak.
    """
    if spec.kind == AugmentationKind.NONE:
        return w
    if spec.kind == AugmentationKind.ADDITIVE_NOISE:
        noise = _resolve_noise(spec.noise_source, w.samples.size, w.sample_rate, rng_seed)
        p_signal = signal_power(w.samples)
        p_noise = signal_power(noise)
        if p_noise <= 0.0:
            raise ResourceError("noise clip has zero power")
        scale = np.sqrt(p_signal / (p_noise * 10.0 ** (spec.snr_db / 10.0)))
        return replace(w, samples=w.samples + scale * noise)
    if spec.kind == AugmentationKind.REVERB:
        rir = _resolve_rir(spec.rir_source, w.sample_rate, rng_seed)
        wet = scipy.signal.fftconvolve(w.samples, rir)[: w.samples.size]
        peak_in = np.max(np.abs(w.samples))
        peak_out = np.max(np.abs(wet))
        if peak_out > 0.0:
            wet = wet * (peak_in / peak_out)
        return replace(w, samples=wet)
    raise ValidationError(f"augmentation kind '{spec.kind.value}' does not apply to waveforms")


def shuffle_frames(f: FeatureSequence, rng_seed: int) -> FeatureSequence:
    """Permute the rows of ``frames`` uniformly at random (seeded)."""
    perm = np.random.default_rng(rng_seed).permutation(f.num_frames)
    return replace(f, frames=f.frames[perm])


def augment_features(f: FeatureSequence, spec: AugmentationSpec, rng_seed: int) -> FeatureSequence:
    """Feature-domain counterpart of :func:`augment` for feature corpora.

    frame_shuffle permutes frames; additive_noise adds i.i.d. Gaussian noise
    scaled so the per-entry noise power sits ``spec.snr_db`` below the mean
    per-entry feature power. Reverb has no feature-domain analog.
    """
    if spec.kind == AugmentationKind.NONE:
        return f
    if spec.kind == AugmentationKind.FRAME_SHUFFLE:
        return shuffle_frames(f, rng_seed)
    if spec.kind == AugmentationKind.ADDITIVE_NOISE:
        p_signal = signal_power(f.frames)
        sigma = np.sqrt(p_signal / 10.0 ** (spec.snr_db / 10.0))
        seed = spec.noise_source if isinstance(spec.noise_source, (int, np.integer)) else 0
        noise = _derived_rng(int(seed), rng_seed, 0xE).standard_normal(f.frames.shape)
        return replace(f, frames=f.frames + sigma * noise)
    raise ValidationError(f"augmentation kind '{spec.kind.value}' does not apply to feature sequences")
