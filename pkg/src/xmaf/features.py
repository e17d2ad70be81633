"""Audio descriptor extraction, normalization, A/V synchronization and video embeddings.

Audio is framed with 25 ms windows and a 10 ms hop (100 frames/s).  Each
frame yields 32 base descriptors followed by their first-order deltas and a
single zero pad, 65 dims in total (see ``LLD_NAMES`` for the ordering).
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy.fft import dct, rfft

from .errors import AlignmentError, ContractError, DimensionError, ResampleRequiredError

AUDIO_FPS = 100
VIDEO_FPS = 30
WINDOW_SEC = 0.025
STEP_SEC = 0.010
N_FFT_MIN = 512
N_MELS = 26
N_MFCC = 14
F0_MIN, F0_MAX = 60.0, 500.0
VOICING_THRESHOLD = 0.45
LOG_ENERGY_FLOOR = 1e-10
MIN_RATE, MAX_RATE = 8000, 192000

LLD_DIMS = 65
WINDOW_FRAMES = 60  # two seconds at the synchronized 30 fps
EMBED_DIM = 4096
CROP_SHAPE = (96, 96, 3)

_BASE_NAMES = (
    [f"mfcc_{i}" for i in range(1, N_MFCC + 1)]
    + ["log_energy", "rms_loudness", "f0_hz", "voicing_prob", "zcr",
       "spectral_centroid", "spectral_rolloff90", "spectral_flux",
       "spectral_flatness", "spectral_spread", "spectral_skewness", "spectral_kurtosis",
       "spectral_entropy", "spectral_slope", "alpha_ratio", "hammarberg_index",
       "hnr_db", "mfcc_0"]
)
LLD_NAMES = _BASE_NAMES + [f"delta_{n}" for n in _BASE_NAMES] + ["pad_0"]
assert len(LLD_NAMES) == LLD_DIMS


@dataclass
class LldFrameStream:
    values: np.ndarray  # [frames, dims]
    frame_rate: float = AUDIO_FPS
    names: list[str] = field(default_factory=lambda: list(LLD_NAMES))
    index_map: np.ndarray | None = None  # source frame of each row after synchronization

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def dims(self) -> int:
        return self.values.shape[1]


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, streams: Sequence[LldFrameStream | np.ndarray], eps: float = 1e-8) -> "NormStats":
        arrays = [s.values if isinstance(s, LldFrameStream) else np.asarray(s) for s in streams]
        stacked = np.concatenate(arrays, axis=0)
        return cls(stacked.mean(axis=0), np.maximum(stacked.std(axis=0), eps))


def frame_params(sample_rate: int) -> tuple[int, int]:
    if not MIN_RATE <= sample_rate <= MAX_RATE:
        raise ResampleRequiredError(
            f"sample rate {sample_rate} Hz unsupported; resample to [{MIN_RATE}, {MAX_RATE}] Hz")
    return int(round(WINDOW_SEC * sample_rate)), int(round(STEP_SEC * sample_rate))


def frame_count(n_samples: int, sample_rate: int) -> int:
    window, step = frame_params(sample_rate)
    if n_samples < window:
        return 0
    return (n_samples - window) // step + 1


def _frame_signal(x: np.ndarray, window: int, step: int) -> np.ndarray:
    n = (len(x) - window) // step + 1
    idx = np.arange(window)[None, :] + step * np.arange(n)[:, None]
    return x[idx]


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int = N_MELS) -> np.ndarray:
    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    edges = mel_to_hz(np.linspace(hz_to_mel(20.0), hz_to_mel(sample_rate / 2.0), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fb = np.zeros((n_mels, freqs.size))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def estimate_f0(frame: np.ndarray, sample_rate: int) -> tuple[float, float]:
    """Autocorrelation pitch with parabolic peak refinement.

    Returns ``(f0_hz, voicing_prob)``; ``f0_hz`` is 0 for unvoiced frames.
    The voicing probability is the normalized autocorrelation at the chosen lag.
    """
    x = frame - frame.mean()
    n = len(x)
    lag_min = max(2, int(np.floor(sample_rate / F0_MAX)))
    lag_max = min(n - 2, int(np.ceil(sample_rate / F0_MIN)))
    if lag_max <= lag_min + 1 or not np.any(x):
        return 0.0, 0.0
    lags = np.arange(lag_min - 1, lag_max + 2)
    r = np.empty(lags.size)
    for j, lag in enumerate(lags):
        a, b = x[:n - lag], x[lag:]
        den = np.sqrt(np.dot(a, a) * np.dot(b, b))
        r[j] = np.dot(a, b) / den if den > 0 else 0.0
    inner = r[1:-1]
    peaks = np.where((inner >= r[:-2]) & (inner >= r[2:]))[0] + 1
    if peaks.size == 0:
        return 0.0, 0.0
    best = r[peaks].max()
    # the first peak close to the global best avoids octave-down errors
    j = peaks[np.argmax(r[peaks] >= 0.9 * best)]
    voicing = float(np.clip(r[j], 0.0, 1.0))
    if voicing < VOICING_THRESHOLD:
        return 0.0, voicing
    denom = r[j - 1] - 2.0 * r[j] + r[j + 1]
    shift = 0.5 * (r[j - 1] - r[j + 1]) / denom if denom != 0 else 0.0
    return float(sample_rate / (lags[j] + np.clip(shift, -0.5, 0.5))), voicing


def deltas(values: np.ndarray, width: int = 2) -> np.ndarray:
    """Regression deltas over +-``width`` frames with edge repetition."""
    padded = np.pad(values, ((width, width), (0, 0)), mode="edge")
    n = values.shape[0]
    num = sum(k * (padded[width + k:width + k + n] - padded[width - k:width - k + n])
              for k in range(1, width + 1))
    return num / (2.0 * sum(k * k for k in range(1, width + 1)))


def extract_llds(pcm: np.ndarray, sample_rate: int) -> LldFrameStream:
    """Per-frame 65-dim descriptors for mono PCM (floats, roughly in [-1, 1])."""
    x = np.asarray(pcm, dtype=np.float64).ravel()
    window, step = frame_params(sample_rate)
    if x.size < window:
        raise ContractError(f"audio has {x.size} samples, fewer than one {window}-sample window")
    frames = _frame_signal(x, window, step)
    n = frames.shape[0]
    n_fft = max(N_FFT_MIN, 1 << int(np.ceil(np.log2(window))))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft

    emph = np.concatenate([frames[:, :1], frames[:, 1:] - 0.97 * frames[:, :-1]], axis=1)
    ham = np.hamming(window)
    mag = np.abs(rfft(emph * ham, n=n_fft, axis=1))
    power = mag ** 2 / n_fft

    mel = power @ mel_filterbank(sample_rate, n_fft).T
    cep = dct(np.log(np.maximum(mel, LOG_ENERGY_FLOOR)), type=2, axis=1, norm="ortho")

    energy = (frames ** 2).sum(axis=1)
    log_energy = np.log(np.maximum(energy, LOG_ENERGY_FLOOR))
    rms = np.sqrt(energy / window)
    zcr = (frames[:, 1:] * frames[:, :-1] < 0).mean(axis=1)

    pitch = np.array([estimate_f0(f, sample_rate) for f in frames])
    f0, voicing = pitch[:, 0], pitch[:, 1]
    hnr = 10.0 * np.log10(np.maximum(voicing, 1e-4) / np.maximum(1.0 - voicing, 1e-4))

    total = power.sum(axis=1)
    safe = np.where(total > 0, total, 1.0)
    p = power / safe[:, None]
    centroid = (p * freqs).sum(axis=1)
    spread = np.sqrt((p * (freqs - centroid[:, None]) ** 2).sum(axis=1))
    sp = np.where(spread > 0, spread, 1.0)
    skew = (p * ((freqs - centroid[:, None]) / sp[:, None]) ** 3).sum(axis=1)
    kurt = (p * ((freqs - centroid[:, None]) / sp[:, None]) ** 4).sum(axis=1)
    cum = np.cumsum(power, axis=1)
    rolloff = freqs[np.minimum((cum < 0.9 * total[:, None]).sum(axis=1), freqs.size - 1)]
    entropy = -(p * np.log2(np.where(p > 0, p, 1.0))).sum(axis=1)
    geo = np.exp(np.log(np.maximum(power, LOG_ENERGY_FLOOR)).mean(axis=1))
    flatness = geo / np.maximum(power.mean(axis=1), LOG_ENERGY_FLOOR)
    log_mag = np.log(np.maximum(mag, LOG_ENERGY_FLOOR))
    fc = freqs - freqs.mean()
    slope = (log_mag - log_mag.mean(axis=1, keepdims=True)) @ fc / (fc @ fc)
    low = power[:, (freqs >= 50) & (freqs < 1000)].sum(axis=1)
    high = power[:, (freqs >= 1000) & (freqs <= 5000)].sum(axis=1)
    alpha = 10.0 * np.log10(np.maximum(low, LOG_ENERGY_FLOOR) / np.maximum(high, LOG_ENERGY_FLOOR))
    pk_low = power[:, freqs < 2000].max(axis=1)
    band_hi = power[:, (freqs >= 2000) & (freqs <= 5000)]
    pk_high = band_hi.max(axis=1) if band_hi.shape[1] else np.zeros(n)
    hammarberg = 10.0 * np.log10(np.maximum(pk_low, LOG_ENERGY_FLOOR) / np.maximum(pk_high, LOG_ENERGY_FLOOR))
    unit = mag / np.maximum(np.linalg.norm(mag, axis=1, keepdims=True), LOG_ENERGY_FLOOR)
    flux = np.concatenate([[0.0], np.linalg.norm(np.diff(unit, axis=0), axis=1)])

    silent = total <= 0
    for arr in (centroid, spread, skew, kurt, rolloff, entropy, flatness, slope, alpha, hammarberg):
        arr[silent] = 0.0

    base = np.column_stack([
        cep[:, 1:N_MFCC + 1], log_energy, rms, f0, voicing, zcr,
        centroid, rolloff, flux, flatness, spread, skew, kurt, entropy, slope,
        alpha, hammarberg, hnr, cep[:, 0],
    ])
    values = np.concatenate([base, deltas(base), np.zeros((n, 1))], axis=1)
    return LldFrameStream(values)


def znormalize(stream: LldFrameStream, stats: NormStats) -> LldFrameStream:
    if stream.dims != stats.mean.size:
        raise DimensionError(f"stream has {stream.dims} dims, stats have {stats.mean.size}")
    return LldFrameStream((stream.values - stats.mean) / stats.std, stream.frame_rate,
                          list(stream.names), stream.index_map)


def denormalize(stream: LldFrameStream, stats: NormStats) -> LldFrameStream:
    if stream.dims != stats.mean.size:
        raise DimensionError(f"stream has {stream.dims} dims, stats have {stats.mean.size}")
    return LldFrameStream(stream.values * stats.std + stats.mean, stream.frame_rate,
                          list(stream.names), stream.index_map)


def sync_indices(n_audio: int, n_video: int, audio_fps: float = AUDIO_FPS,
                 video_fps: float = VIDEO_FPS) -> np.ndarray:
    """Audio frame chosen for each video frame: ``round(i * audio_fps / video_fps)``, clamped."""
    ratio = audio_fps / video_fps
    wanted = np.floor(np.arange(n_video) * ratio + 0.5).astype(np.int64)
    deficit = int(wanted[-1]) - (n_audio - 1) if n_video else 0
    tolerance = int(round(ratio))  # one video frame of slack
    if n_audio <= 0 or deficit > tolerance:
        raise AlignmentError(
            f"audio too short: {n_audio} frames cannot cover {n_video} video frames "
            f"(deficit {deficit} audio frames)")
    return np.minimum(wanted, n_audio - 1)


def sync_downsample(audio: LldFrameStream, n_video_frames: int,
                    video_fps: float = VIDEO_FPS) -> LldFrameStream:
    idx = sync_indices(audio.frames, n_video_frames, audio.frame_rate, video_fps)
    return LldFrameStream(audio.values[idx], video_fps, list(audio.names), idx)


def window_concat(synced: LldFrameStream | np.ndarray, i: int,
                  width: int = WINDOW_FRAMES, out_dim: int = EMBED_DIM) -> np.ndarray:
    """Concatenate ``width`` frames centred on ``i`` (edges repeated), zero-padded to ``out_dim``."""
    values = synced.values if isinstance(synced, LldFrameStream) else np.asarray(synced)
    n, d = values.shape
    if width * d > out_dim:
        raise DimensionError(f"{width} frames x {d} dims exceeds output dim {out_dim}")
    idx = np.clip(np.arange(i - width // 2, i - width // 2 + width), 0, n - 1)
    out = np.zeros(out_dim)
    out[:width * d] = values[idx].reshape(-1)
    return out


def window_concat_all(synced: LldFrameStream | np.ndarray, width: int = WINDOW_FRAMES,
                      out_dim: int = EMBED_DIM) -> np.ndarray:
    values = synced.values if isinstance(synced, LldFrameStream) else np.asarray(synced)
    return np.stack([window_concat(values, i, width, out_dim) for i in range(values.shape[0])])


# ---------------------------------------------------------------- video


class EmbeddingProvider(Protocol):
    def embed(self, n_frames: int | None = None) -> np.ndarray: ...


def pixel_embed(crop: np.ndarray) -> np.ndarray:
    """4096-d descriptor of a 96x96x3 face crop scaled to [-1, 1].

    3x3 block means of each colour channel (32*32*3 = 3072) followed by the
    3x3 block standard deviation of the luminance (32*32 = 1024).
    """
    crop = np.asarray(crop, dtype=np.float64)
    if crop.shape != CROP_SHAPE:
        raise ContractError(f"crop must have shape {CROP_SHAPE}, got {crop.shape}")
    if not np.all(np.isfinite(crop)) or crop.min() < -1.0 or crop.max() > 1.0:
        raise ContractError("crop intensities must lie in [-1, 1]")
    blocks = crop.reshape(32, 3, 32, 3, 3)
    means = blocks.mean(axis=(1, 3))
    luma = crop @ np.array([0.299, 0.587, 0.114])
    lstd = luma.reshape(32, 3, 32, 3).std(axis=(1, 3))
    return np.concatenate([means.transpose(2, 0, 1).reshape(-1), lstd.reshape(-1)])


class PooledPixelEmbedder:
    """Embeds a sequence of crops (array ``[n, 96, 96, 3]`` or a directory of ``.npy`` crops)."""

    def __init__(self, crops):
        self.crops = crops

    def _frames(self):
        if isinstance(self.crops, (str, Path)):
            files = sorted(Path(self.crops).glob("*.npy"))
            return [np.load(f) for f in files]
        return list(np.asarray(self.crops))

    def embed(self, n_frames: int | None = None) -> np.ndarray:
        frames = self._frames()
        if n_frames is not None:
            frames = frames[:n_frames]
        return np.stack([pixel_embed(c) for c in frames]) if frames else np.zeros((0, EMBED_DIM))


class FileEmbeddingProvider:
    """Precomputed ``[n, 4096]`` embeddings stored as ``.npy``."""

    def __init__(self, path):
        self.path = Path(path)

    def embed(self, n_frames: int | None = None) -> np.ndarray:
        arr = np.load(self.path)
        if arr.ndim != 2 or arr.shape[1] != EMBED_DIM:
            raise DimensionError(f"{self.path}: expected [n, {EMBED_DIM}] embeddings, got {arr.shape}")
        return arr if n_frames is None else arr[:n_frames]


# ---------------------------------------------------------------- audio io


def read_wav(path) -> tuple[np.ndarray, int]:
    """16-bit PCM mono WAV -> float samples in [-1, 1) and the sample rate."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise ContractError(f"{path}: need 16-bit mono PCM, got {w.getnchannels()} ch "
                                f"x {8 * w.getsampwidth()} bit")
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, rate


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


def read_raw_f32(path, sample_rate: int) -> tuple[np.ndarray, int]:
    return np.fromfile(path, dtype="<f4").astype(np.float64), sample_rate


def audio_features(pcm: np.ndarray, sample_rate: int, n_video_frames: int,
                   stats: NormStats | None = None) -> np.ndarray:
    """Full audio path: descriptors, optional z-norm, sync to video, 2 s windows -> ``[n, 4096]``."""
    stream = extract_llds(pcm, sample_rate)
    if stats is not None:
        stream = znormalize(stream, stats)
    return window_concat_all(sync_downsample(stream, n_video_frames))
