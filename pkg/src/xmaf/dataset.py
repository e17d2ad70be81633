"""Sequence samples, the binary dataset container, synthetic data and modality masking.

Container layout (all little-endian)::

    magic  b"XMAF-DATA"
    u32    version
    u32    seq_len, audio_dim, video_dim, n_samples
    per sample, at the offset listed in the manifest:
        f32[seq_len*audio_dim]  audio
        f32[seq_len*video_dim]  video
        f32[seq_len*2]          targets (valence, arousal)
        f32[seq_len]            audio mask (1 = present)
        f32[seq_len]            video mask

The manifest is a JSON file next to the container holding the split, dims,
sample ids with their byte offsets and, for synthetic data, the generator
config and its hash.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import (AlignmentError, AnnotationError, BadMagicError, ConfigError, ContractError,
                     DimensionError, TruncationError, VersionError)
from .features import (FileEmbeddingProvider, NormStats, PooledPixelEmbedder, audio_features,
                       read_raw_f32, read_wav)

DATA_MAGIC = b"XMAF-DATA"
DATA_VERSION = 1
SPLITS = ("train", "validation", "test")
CHANNEL_ASSIGNMENTS = ("both_full", "arousal_in_audio_valence_in_video", "redundant")


@dataclass
class SequenceSample:
    id: str
    audio: np.ndarray
    video: np.ndarray
    targets: np.ndarray
    audio_mask: np.ndarray = None
    video_mask: np.ndarray = None

    def __post_init__(self):
        self.audio = np.asarray(self.audio, dtype=np.float32)
        self.video = np.asarray(self.video, dtype=np.float32)
        self.targets = np.asarray(self.targets, dtype=np.float32)
        t = self.targets.shape[0]
        if self.audio_mask is None:
            self.audio_mask = np.ones(t, dtype=bool)
        if self.video_mask is None:
            self.video_mask = np.ones(t, dtype=bool)
        self.audio_mask = np.asarray(self.audio_mask, dtype=bool)
        self.video_mask = np.asarray(self.video_mask, dtype=bool)
        if self.targets.ndim != 2 or self.targets.shape[1] != 2:
            raise DimensionError(f"{self.id}: targets must be [T, 2], got {self.targets.shape}")
        for name in ("audio", "video"):
            arr = getattr(self, name)
            if arr.ndim != 2 or arr.shape[0] != t:
                raise DimensionError(f"{self.id}: {name} {arr.shape} not aligned with {t} targets")
        if self.audio_mask.shape != (t,) or self.video_mask.shape != (t,):
            raise DimensionError(f"{self.id}: masks must have length {t}")
        if np.any(np.abs(self.targets) > 1.0):
            raise AnnotationError(f"{self.id}: targets outside [-1, 1]")

    @property
    def seq_len(self) -> int:
        return self.targets.shape[0]

    def copy(self) -> "SequenceSample":
        return SequenceSample(self.id, self.audio.copy(), self.video.copy(), self.targets.copy(),
                              self.audio_mask.copy(), self.video_mask.copy())


@dataclass
class Dataset:
    samples: list[SequenceSample]
    split: str = "train"
    generator_config: dict | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.samples:
            s0 = self.samples[0]
            dims = (s0.seq_len, s0.audio.shape[1], s0.video.shape[1])
            for s in self.samples:
                if (s.seq_len, s.audio.shape[1], s.video.shape[1]) != dims:
                    raise DimensionError(f"sample {s.id} dims differ from {dims}")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[SequenceSample]:
        return iter(self.samples)

    def __getitem__(self, i) -> SequenceSample:
        return self.samples[i]

    @property
    def seq_len(self) -> int:
        return self.samples[0].seq_len if self.samples else 0

    @property
    def audio_dim(self) -> int:
        return self.samples[0].audio.shape[1] if self.samples else 0

    @property
    def video_dim(self) -> int:
        return self.samples[0].video.shape[1] if self.samples else 0

    @property
    def generator_hash(self) -> str | None:
        return config_hash(self.generator_config) if self.generator_config is not None else None

    def arrays(self, indices: Sequence[int] | None = None):
        """Stacked ``(audio, video, targets)`` arrays for the chosen samples."""
        chosen = self.samples if indices is None else [self.samples[i] for i in indices]
        return (np.stack([s.audio for s in chosen]), np.stack([s.video for s in chosen]),
                np.stack([s.targets for s in chosen]))


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------- synthetic data


@dataclass
class SynthConfig:
    n_sequences: int = 32
    seq_len: int = 100
    seed: int = 0
    step_sigma: float = 0.05
    audio_snr: float = 10.0
    video_snr: float = 10.0
    channels: str = "redundant"
    mixing_seed: int = 1234
    audio_dim: int = 4096
    video_dim: int = 4096
    split: str = "train"

    def __post_init__(self):
        if self.channels not in CHANNEL_ASSIGNMENTS:
            raise ConfigError(f"channels must be one of {CHANNEL_ASSIGNMENTS}")
        if self.audio_snr <= 0 or self.video_snr <= 0:
            raise ConfigError("snr must be positive")
        if self.n_sequences < 0 or self.seq_len <= 1 or self.step_sigma <= 0:
            raise ConfigError("need n_sequences >= 0, seq_len > 1, step_sigma > 0")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("audio_snr", "video_snr"):
            if np.isinf(d[k]):
                d[k] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        for k in ("audio_snr", "video_snr"):
            if d.get(k) == "inf":
                d[k] = float("inf")
        return cls(**d)


def latent_walk(rng: np.random.Generator, steps: int, sigma: float, channels: int = 2) -> np.ndarray:
    """Bounded Gaussian random walk in [-1, 1], starting uniformly in [-0.5, 0.5]."""
    out = np.empty((steps, channels))
    out[0] = rng.uniform(-0.5, 0.5, size=channels)
    noise = rng.normal(0.0, sigma, size=(steps - 1, channels))
    for t in range(1, steps):
        out[t] = np.clip(out[t - 1] + noise[t - 1], -1.0, 1.0)
    return out


def _mixing(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Latent -> feature maps ``[2, dim]``; rows of absent channels are zero."""
    rng = np.random.default_rng(cfg.mixing_seed)
    if cfg.channels == "redundant":
        shared = rng.standard_normal((2, max(cfg.audio_dim, cfg.video_dim)))
        m_a, m_v = shared[:, :cfg.audio_dim].copy(), shared[:, :cfg.video_dim].copy()
    else:
        m_a = rng.standard_normal((2, cfg.audio_dim))
        m_v = rng.standard_normal((2, cfg.video_dim))
    if cfg.channels == "arousal_in_audio_valence_in_video":
        m_a[0] = 0.0
        m_v[1] = 0.0
    return m_a, m_v


def _add_noise(rng: np.random.Generator, signal: np.ndarray, snr: float) -> np.ndarray:
    if np.isinf(snr):
        return signal
    rms = np.sqrt(np.mean(signal ** 2))
    return signal + rng.normal(0.0, rms / np.sqrt(snr), size=signal.shape)


def generate_synthetic(config: SynthConfig) -> Dataset:
    """Correlated audio-visual sequences whose targets are a latent affect walk.

    Valence is latent channel 0 and arousal channel 1.  Each modality sees a
    fixed random linear map of its assigned channels plus Gaussian noise at the
    configured signal-to-noise power ratio.  The maps depend only on
    ``mixing_seed`` so splits drawn with different ``seed`` share them.
    """
    m_a, m_v = _mixing(config)
    rng = np.random.default_rng(config.seed)
    samples = []
    for k in range(config.n_sequences):
        z = latent_walk(rng, config.seq_len, config.step_sigma)
        audio = _add_noise(rng, z @ m_a, config.audio_snr)
        video = _add_noise(rng, z @ m_v, config.video_snr)
        samples.append(SequenceSample(f"synth-s{config.seed}-{k:05d}", audio, video, z))
    return Dataset(samples, config.split, config.to_dict())


# ---------------------------------------------------------------- masking


def mask_modality(sample: SequenceSample, modality: str, proportion: float,
                  rng: np.random.Generator) -> SequenceSample:
    """Zero ``floor(p * T)`` randomly chosen frames of one modality (returns a copy)."""
    if modality not in ("audio", "video"):
        raise ContractError(f"modality must be 'audio' or 'video', got {modality!r}")
    if not 0.0 <= proportion <= 1.0:
        raise ContractError(f"proportion must lie in [0, 1], got {proportion}")
    out = sample.copy()
    k = int(np.floor(proportion * sample.seq_len + 1e-9))
    if k == 0:
        return out
    idx = rng.choice(sample.seq_len, size=k, replace=False)
    getattr(out, modality)[idx] = 0.0
    getattr(out, f"{modality}_mask")[idx] = False
    return out


def mask_dataset(ds: Dataset, modality: str, proportion: float, rng: np.random.Generator) -> Dataset:
    return Dataset([mask_modality(s, modality, proportion, rng) for s in ds], ds.split,
                   ds.generator_config)


# ---------------------------------------------------------------- persistence


def _blob_bytes(seq_len: int, audio_dim: int, video_dim: int) -> int:
    return 4 * seq_len * (audio_dim + video_dim + 4)


def dataset_bytes(ds: Dataset) -> tuple[bytes, dict]:
    """Serialize to ``(container bytes, manifest dict)``."""
    header = DATA_MAGIC + struct.pack("<I", DATA_VERSION) + struct.pack(
        "<4I", ds.seq_len, ds.audio_dim, ds.video_dim, len(ds))
    parts = [header]
    entries = []
    offset = len(header)
    for s in ds:
        blob = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in (
            s.audio, s.video, s.targets, s.audio_mask.astype("<f4"), s.video_mask.astype("<f4")))
        entries.append({"id": s.id, "offset": offset})
        parts.append(blob)
        offset += len(blob)
    manifest = {
        "format": DATA_MAGIC.decode("ascii"),
        "version": DATA_VERSION,
        "split": ds.split,
        "n_samples": len(ds),
        "seq_len": ds.seq_len,
        "audio_dim": ds.audio_dim,
        "video_dim": ds.video_dim,
        "sample_bytes": _blob_bytes(ds.seq_len, ds.audio_dim, ds.video_dim),
        "generator_config": ds.generator_config,
        "generator_config_hash": ds.generator_hash,
        "samples": entries,
    }
    return b"".join(parts), manifest


def manifest_text(manifest: dict) -> str:
    return json.dumps(manifest, indent=2, sort_keys=True) + "\n"


def store(ds: Dataset, directory, name: str | None = None) -> tuple[Path, Path]:
    """Write ``<name>.xmaf`` and ``<name>.manifest.json``; ``name`` defaults to the split."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    name = name or ds.split
    data, manifest = dataset_bytes(ds)
    data_path = directory / f"{name}.xmaf"
    manifest["data_file"] = data_path.name
    manifest_path = directory / f"{name}.manifest.json"
    data_path.write_bytes(data)
    manifest_path.write_text(manifest_text(manifest))
    return data_path, manifest_path


def load(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    data = (manifest_path.parent / manifest["data_file"]).read_bytes()
    return parse_dataset(data, manifest)


def parse_dataset(data: bytes, manifest: dict) -> Dataset:
    head = len(DATA_MAGIC)
    if data[:head] != DATA_MAGIC:
        raise BadMagicError("not an XMAF dataset container (bad magic)")
    if len(data) < head + 20:
        raise TruncationError("dataset header truncated")
    (version,) = struct.unpack("<I", data[head:head + 4])
    if version != DATA_VERSION or manifest.get("version") != DATA_VERSION:
        raise VersionError(f"dataset version {version} / manifest version {manifest.get('version')} "
                           f"unsupported (expected {DATA_VERSION})")
    seq_len, audio_dim, video_dim, n = struct.unpack("<4I", data[head + 4:head + 20])
    if (seq_len, audio_dim, video_dim, n) != (manifest["seq_len"], manifest["audio_dim"],
                                              manifest["video_dim"], manifest["n_samples"]):
        raise DimensionError("container header disagrees with manifest")
    size = _blob_bytes(seq_len, audio_dim, video_dim)
    offsets = [e["offset"] for e in manifest["samples"]]
    if any(b <= a for a, b in zip(offsets, offsets[1:])):
        raise ContractError("manifest offsets are not strictly increasing")
    cuts = np.cumsum([0, seq_len * audio_dim, seq_len * video_dim, seq_len * 2, seq_len, seq_len])
    samples = []
    for entry in manifest["samples"]:
        off = entry["offset"]
        if off + size > len(data):
            raise TruncationError(f"sample {entry['id']} truncated: needs bytes "
                                  f"{off}..{off + size}, file has {len(data)}")
        flat = np.frombuffer(data, dtype="<f4", count=size // 4, offset=off).astype(np.float32)
        samples.append(SequenceSample(
            entry["id"],
            flat[cuts[0]:cuts[1]].reshape(seq_len, audio_dim),
            flat[cuts[1]:cuts[2]].reshape(seq_len, video_dim),
            flat[cuts[2]:cuts[3]].reshape(seq_len, 2),
            flat[cuts[3]:cuts[4]] > 0.5,
            flat[cuts[4]:cuts[5]] > 0.5,
        ))
    return Dataset(samples, manifest["split"], manifest.get("generator_config"))


# ---------------------------------------------------------------- real-clip ingestion


def read_annotations(path) -> np.ndarray:
    """``valence,arousal`` per line (an optional header line is skipped)."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise AnnotationError(f"{path}:{lineno}: expected 'valence,arousal'")
        try:
            v, a = float(parts[0]), float(parts[1])
        except ValueError:
            if lineno == 1:
                continue
            raise AnnotationError(f"{path}:{lineno}: not numeric: {line!r}") from None
        if not (-1.0 <= v <= 1.0 and -1.0 <= a <= 1.0):
            raise AnnotationError(f"{path}:{lineno}: value outside [-1, 1]: {line!r}")
        rows.append((v, a))
    return np.array(rows, dtype=np.float64).reshape(-1, 2)


def _video_embeddings(video) -> np.ndarray:
    if isinstance(video, np.ndarray):
        return video
    if hasattr(video, "embed"):
        return video.embed()
    p = Path(video)
    return PooledPixelEmbedder(p).embed() if p.is_dir() else FileEmbeddingProvider(p).embed()


def slice_sequences(clip_id: str, audio: np.ndarray, video: np.ndarray, targets: np.ndarray,
                    seq_len: int = 100) -> list[SequenceSample]:
    """Non-overlapping windows of ``seq_len`` frames; the short remainder is dropped."""
    return [SequenceSample(f"{clip_id}-{k:04d}", audio[k * seq_len:(k + 1) * seq_len],
                           video[k * seq_len:(k + 1) * seq_len], targets[k * seq_len:(k + 1) * seq_len])
            for k in range(targets.shape[0] // seq_len)]


def ingest_annotations(video, audio, annotations, clip_id: str | None = None,
                       stats: NormStats | None = None, sample_rate: int | None = None,
                       seq_len: int = 100) -> list[SequenceSample]:
    """Build samples for one clip.

    ``video`` is a directory of ``.npy`` crops, a ``.npy`` embedding file, an
    embedding provider or an ``[n, 4096]`` array.  ``audio`` is a 16-bit mono
    WAV path, a raw float32 file (needs ``sample_rate``) or a ``(pcm, rate)``
    pair.
    """
    targets = read_annotations(annotations)
    emb = _video_embeddings(video)
    n_ann, n_vid = targets.shape[0], emb.shape[0]
    if abs(n_ann - n_vid) > 1:
        raise AlignmentError(f"{n_ann} annotated frames vs {n_vid} video frames")
    n = min(n_ann, n_vid)
    if isinstance(audio, tuple):
        pcm, rate = audio
    elif Path(audio).suffix.lower() == ".wav":
        pcm, rate = read_wav(audio)
    else:
        if sample_rate is None:
            raise ContractError("raw float32 audio needs sample_rate")
        pcm, rate = read_raw_f32(audio, sample_rate)
    feats = audio_features(pcm, rate, n, stats)
    clip_id = clip_id or (Path(annotations).stem if not isinstance(annotations, np.ndarray) else "clip")
    return slice_sequences(clip_id, feats, emb[:n], targets[:n], seq_len)
