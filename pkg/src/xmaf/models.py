"""Complete networks and the checkpoint container.

All models share one call signature, ``model(audio, video) -> [.., T, 2]``,
where the unused modality of a unimodal model may be ``None``.  Inputs are
``[T, D]`` or ``[B, T, D]`` arrays; outputs keep the same leading shape.
Output column 0 is valence, column 1 arousal.
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from . import tensor as T
from .attention import CrossModalFusion, Encoder, sinusoidal_positions
from .errors import BadMagicError, ConfigError, DimensionError, TruncationError, VersionError
from .nn import Linear, Module, glorot
from .tensor import Tensor

MODALITIES = ("audio", "video", "audio_video")
ARCHITECTURES = ("transformer", "gru")
HEAD_ACTIVATIONS = ("tanh", "linear")

CKPT_MAGIC = b"XMAF-CKPT"
CKPT_VERSION = 1


@dataclass
class ModelConfig:
    modality: str = "audio_video"
    architecture: str = "transformer"
    seq_len: int = 100
    d_model: int = 512
    heads: int = 4
    layers: int = 2
    d_ff: int | None = None
    dropout: float = 0.1
    head_activation: str = "tanh"
    positional_encoding: bool = True
    seed: int = 0
    audio_dim: int = 4096
    video_dim: int = 4096
    gru_hidden: int = 128
    gru_layers: int = 2

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ConfigError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        if self.head_activation not in HEAD_ACTIVATIONS:
            raise ConfigError(f"head_activation must be one of {HEAD_ACTIVATIONS}")
        if self.seq_len <= 0 or self.layers <= 0 or self.gru_layers <= 0:
            raise ConfigError("seq_len, layers and gru_layers must be positive")
        if self.d_ff is None:
            self.d_ff = 2 * self.d_model
        if self.architecture == "transformer" and self.d_model % self.heads != 0:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    @property
    def uses_audio(self) -> bool:
        return self.modality in ("audio", "audio_video")

    @property
    def uses_video(self) -> bool:
        return self.modality in ("video", "audio_video")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


def _as_batch(x, dim: int, name: str) -> tuple[Tensor, bool]:
    x = T.as_tensor(x)
    if x.ndim not in (2, 3):
        raise DimensionError(f"{name} must be [T, D] or [B, T, D], got {x.shape}")
    if x.shape[-1] != dim:
        raise DimensionError(f"{name} has feature dim {x.shape[-1]}, expected {dim}")
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


class _Head(Module):
    def __init__(self, d_in: int, activation: str, rng: np.random.Generator):
        self.dense = Linear(d_in, 2, rng)
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        y = self.dense(x)
        return T.tanh(y) if self.activation == "tanh" else y


class _BaseModel(Module):
    config: ModelConfig

    def _finish(self, y: Tensor, squeeze: bool) -> Tensor:
        return T.reshape(y, y.shape[1:]) if squeeze else y

    def predict(self, audio, video) -> np.ndarray:
        was = self.training
        self.eval()
        try:
            with T.no_grad():
                return self(audio, video).data
        finally:
            self.train(was)


class CrossModalTransformer(_BaseModel):
    """Per-modality encoders joined by cross-modal attention and a dense head."""

    def __init__(self, config: ModelConfig):
        c = config
        self.config = c
        rng = np.random.default_rng(c.seed)
        self.audio_in_proj = Linear(c.audio_dim, c.d_model, rng)
        self.video_in_proj = Linear(c.video_dim, c.d_model, rng)
        self.audio_encoder = Encoder(c.d_model, c.heads, c.d_ff, c.layers, rng, c.dropout)
        self.video_encoder = Encoder(c.d_model, c.heads, c.d_ff, c.layers, rng, c.dropout)
        self.fusion = CrossModalFusion(c.d_model, c.heads, rng)
        self.head = _Head(c.d_model, c.head_activation, rng)
        self.rng = rng

    def _embed(self, proj: Linear, x: Tensor) -> Tensor:
        h = proj(x)
        if self.config.positional_encoding:
            h = T.add(h, Tensor(sinusoidal_positions(x.shape[-2], self.config.d_model)))
        return T.dropout(h, self.config.dropout, self.rng, self.training)

    def encode(self, audio, video) -> tuple[Tensor, Tensor, bool]:
        a, squeeze = _as_batch(audio, self.config.audio_dim, "audio")
        v, _ = _as_batch(video, self.config.video_dim, "video")
        if a.shape[:2] != v.shape[:2]:
            raise DimensionError(f"audio {a.shape} and video {v.shape} are not aligned")
        return (self.audio_encoder(self._embed(self.audio_in_proj, a)),
                self.video_encoder(self._embed(self.video_in_proj, v)), squeeze)

    def __call__(self, audio, video) -> Tensor:
        a, v, squeeze = self.encode(audio, video)
        return self._finish(self.head(self.fusion(a, v)), squeeze)


class UnimodalTransformer(_BaseModel):
    """One encoder stack feeding the head directly; no fusion layers."""

    def __init__(self, config: ModelConfig):
        c = config
        if c.modality == "audio_video":
            raise ConfigError("UnimodalTransformer needs modality 'audio' or 'video'")
        self.config = c
        rng = np.random.default_rng(c.seed)
        self.in_dim = c.audio_dim if c.modality == "audio" else c.video_dim
        self.in_proj = Linear(self.in_dim, c.d_model, rng)
        self.encoder = Encoder(c.d_model, c.heads, c.d_ff, c.layers, rng, c.dropout)
        self.head = _Head(c.d_model, c.head_activation, rng)
        self.rng = rng

    def __call__(self, audio, video) -> Tensor:
        src = audio if self.config.modality == "audio" else video
        x, squeeze = _as_batch(src, self.in_dim, self.config.modality)
        h = self.in_proj(x)
        if self.config.positional_encoding:
            h = T.add(h, Tensor(sinusoidal_positions(x.shape[-2], self.config.d_model)))
        h = T.dropout(h, self.config.dropout, self.rng, self.training)
        return self._finish(self.head(self.encoder(h)), squeeze)


def transformer_forward(model: _BaseModel, audio, video) -> Tensor:
    return model(audio, video)


# ---------------------------------------------------------------- GRU


class GRULayer(Module):
    """Gate weights split into input and recurrent halves.

    ``x @ w*_x + h @ w*_h`` equals the gate matrix applied to ``[x, h]``.
    """

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        self.wz_x, self.wz_h = glorot(rng, d_in, hidden), glorot(rng, hidden, hidden)
        self.wr_x, self.wr_h = glorot(rng, d_in, hidden), glorot(rng, hidden, hidden)
        self.wh_x, self.wh_h = glorot(rng, d_in, hidden), glorot(rng, hidden, hidden)
        self.bz = T.parameter(np.zeros(hidden))
        self.br = T.parameter(np.zeros(hidden))
        self.bh = T.parameter(np.zeros(hidden))

    @property
    def d_in(self) -> int:
        return self.wz_x.shape[0]

    def _step(self, xz: Tensor, xr: Tensor, xh: Tensor, h: Tensor) -> Tensor:
        z = T.sigmoid(T.add(xz, T.matmul(h, self.wz_h)))
        r = T.sigmoid(T.add(xr, T.matmul(h, self.wr_h)))
        cand = T.tanh(T.add(xh, T.matmul(T.mul(r, h), self.wh_h)))
        return T.add(T.mul(T.sub(1.0, z), h), T.mul(z, cand))

    def __call__(self, x: Tensor, h0: Tensor | None = None) -> Tensor:
        """Run over ``x: [B, T, d_in]`` from a zero state; returns ``[B, T, hidden]``."""
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"GRU input dim {x.shape[-1]} does not match {self.d_in}")
        b, steps = x.shape[0], x.shape[1]
        xz = T.add(T.matmul(x, self.wz_x), self.bz)
        xr = T.add(T.matmul(x, self.wr_x), self.br)
        xh = T.add(T.matmul(x, self.wh_x), self.bh)
        h = h0 if h0 is not None else Tensor(np.zeros((b, self.hidden)))
        outs = []
        for t in range(steps):
            h = self._step(xz[:, t], xr[:, t], xh[:, t], h)
            outs.append(h)
        return T.stack(outs, axis=1)


def gru_cell(params: GRULayer, x_t, h_prev) -> Tensor:
    """One GRU step: ``h_t = (1 - z) * h_prev + z * tanh(W_h [x, r * h_prev])``."""
    x_t, h_prev = T.as_tensor(x_t), T.as_tensor(h_prev)
    if x_t.shape[-1] != params.d_in or h_prev.shape[-1] != params.hidden:
        raise DimensionError(
            f"gru_cell: x {x_t.shape} / h {h_prev.shape} do not match ({params.d_in}, {params.hidden})")
    xz = T.add(T.matmul(x_t, params.wz_x), params.bz)
    xr = T.add(T.matmul(x_t, params.wr_x), params.br)
    xh = T.add(T.matmul(x_t, params.wh_x), params.bh)
    return params._step(xz, xr, xh, h_prev)


class GRUStack(Module):
    def __init__(self, d_in: int, hidden: int, layers: int, rng: np.random.Generator):
        self.layers = [GRULayer(d_in if i == 0 else hidden, hidden, rng) for i in range(layers)]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


class GruBaseline(_BaseModel):
    """Recurrent baselines.

    Unimodal: two GRU layers on the modality's features, then the dense head.
    Audio-visual: each modality runs its own GRU stack; the two hidden streams
    are concatenated and passed through two more GRU layers and the head.
    """

    def __init__(self, config: ModelConfig):
        c = config
        self.config = c
        rng = np.random.default_rng(c.seed)
        if c.uses_audio:
            self.audio_rnn = GRUStack(c.audio_dim, c.gru_hidden, c.gru_layers, rng)
        if c.uses_video:
            self.video_rnn = GRUStack(c.video_dim, c.gru_hidden, c.gru_layers, rng)
        if c.modality == "audio_video":
            self.fusion_rnn = GRUStack(2 * c.gru_hidden, c.gru_hidden, c.gru_layers, rng)
        self.head = _Head(c.gru_hidden, c.head_activation, rng)

    def fuse_hidden(self, hidden) -> Tensor:
        """Audio-visual tail: ``[.., T, 2*hidden]`` concatenated streams -> ``[.., T, 2]``."""
        if self.config.modality != "audio_video":
            raise ConfigError("fuse_hidden is only defined for the audio_video baseline")
        h, squeeze = _as_batch(hidden, 2 * self.config.gru_hidden, "hidden")
        return self._finish(self.head(self.fusion_rnn(h)), squeeze)

    def __call__(self, audio, video) -> Tensor:
        c = self.config
        if c.modality == "audio":
            x, squeeze = _as_batch(audio, c.audio_dim, "audio")
            return self._finish(self.head(self.audio_rnn(x)), squeeze)
        if c.modality == "video":
            x, squeeze = _as_batch(video, c.video_dim, "video")
            return self._finish(self.head(self.video_rnn(x)), squeeze)
        a, squeeze = _as_batch(audio, c.audio_dim, "audio")
        v, _ = _as_batch(video, c.video_dim, "video")
        if a.shape[:2] != v.shape[:2]:
            raise DimensionError(f"audio {a.shape} and video {v.shape} are not aligned")
        h = T.concat([self.audio_rnn(a), self.video_rnn(v)], axis=-1)
        return self._finish(self.head(self.fusion_rnn(h)), squeeze)


def gru_baseline_forward(model: GruBaseline, features) -> Tensor:
    """Run a GRU baseline on a single stream.

    Unimodal baselines take their modality's features; the audio-visual
    baseline takes the concatenated unimodal hidden streams.
    """
    if not isinstance(model, GruBaseline):
        raise ConfigError("gru_baseline_forward needs a GruBaseline")
    m = model.config.modality
    if m == "audio_video":
        return model.fuse_hidden(features)
    return model(features, None) if m == "audio" else model(None, features)


def build_model(config: ModelConfig) -> _BaseModel:
    if config.architecture == "gru":
        return GruBaseline(config)
    if config.modality == "audio_video":
        return CrossModalTransformer(config)
    return UnimodalTransformer(config)


def parameter_report(configs: dict[str, ModelConfig] | None = None) -> "OrderedDict[str, int]":
    """Trainable parameter counts; defaults to the full-size A+V models."""
    if configs is None:
        configs = {
            "transformer_av": ModelConfig(modality="audio_video", architecture="transformer"),
            "gru_av": ModelConfig(modality="audio_video", architecture="gru"),
        }
    return OrderedDict((name, count_parameters(cfg)) for name, cfg in configs.items())


def count_parameters(config: ModelConfig) -> int:
    return build_model(config).num_parameters()


# ---------------------------------------------------------------- checkpoints


def _pack_blob(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def checkpoint_bytes(model: _BaseModel, meta: dict[str, Any] | None = None,
                     extra: dict[str, np.ndarray] | None = None) -> bytes:
    """Serialize config, named parameters and optional extra named arrays."""
    record = json.dumps({"model": model.config.to_dict(), "meta": meta or {}},
                        sort_keys=True).encode("utf-8")
    blobs = list(model.state_dict().items()) + sorted((extra or {}).items())
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    buf.write(struct.pack("<I", len(record)))
    buf.write(record)
    buf.write(struct.pack("<I", len(blobs)))
    for name, arr in blobs:
        _pack_blob(buf, name, arr)
    return buf.getvalue()


def save_checkpoint(path, model: _BaseModel, meta: dict[str, Any] | None = None,
                    extra: dict[str, np.ndarray] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model, meta, extra))
    return path


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncationError(f"{self.what}: truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


@dataclass
class Checkpoint:
    model: _BaseModel
    config: ModelConfig
    meta: dict
    extra: "OrderedDict[str, np.ndarray]"


def parse_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data, "checkpoint")
    if r.take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise BadMagicError("not an XMAF checkpoint (bad magic)")
    version = r.u32()
    if version != CKPT_VERSION:
        raise VersionError(f"checkpoint version {version} unsupported (expected {CKPT_VERSION})")
    record = json.loads(r.take(r.u32()).decode("utf-8"))
    config = ModelConfig.from_dict(record["model"])
    blobs: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        blobs[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(data):
        raise TruncationError(f"checkpoint: {len(data) - r.pos} trailing bytes")
    model = build_model(config)
    names = set(model.parameters())
    model.load_state_dict({k: v for k, v in blobs.items() if k in names})
    extra = OrderedDict((k, v) for k, v in blobs.items() if k not in names)
    return Checkpoint(model, config, record.get("meta", {}), extra)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
