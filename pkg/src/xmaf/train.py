"""Training with best-on-validation selection, corpus-level evaluation and masking ablation."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .dataset import Dataset, mask_dataset
from .errors import ConfigError, ContractError, DegenerateLossError, DivergenceError
from .metrics import CccResult, ccc, ccc_loss, write_metric_rows
from .models import ModelConfig, _BaseModel, build_model, load_checkpoint, save_checkpoint
from .optim import Adam

log = logging.getLogger(__name__)

TRAIN_LOG_HEADER = ["epoch", "step", "train_loss", "val_ccc_valence", "val_ccc_arousal",
                    "val_ccc_mean", "skipped_batches"]
ABLATION_HEADER = ["modality", "proportion", "trial", "seed", "ccc_valence", "ccc_arousal"]
ABLATION_SUMMARY_HEADER = ["modality", "proportion", "trials", "ccc_valence_mean", "ccc_valence_std",
                           "ccc_arousal_mean", "ccc_arousal_std"]


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 50
    batch_size: int = 8
    seed: int = 0
    lr: float = 1e-5
    checkpoint_dir: str | None = None
    patience: int = 10
    max_steps: int | None = None
    stop_at_val_ccc: float | None = None

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if self.epochs <= 0 or self.batch_size <= 0 or self.patience <= 0:
            raise ConfigError("epochs, batch_size and patience must be positive")
        if self.max_steps is not None and self.max_steps <= 0:
            raise ConfigError("max_steps must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class EvalResult:
    valence: CccResult
    arousal: CccResult
    n_frames: int
    per_sequence: list[tuple[str, float, float]]
    predictions: np.ndarray

    @property
    def mean_ccc(self) -> float:
        return 0.5 * (self.valence.ccc + self.arousal.ccc)

    def csv_rows(self, model_id: str, split: str) -> list[dict]:
        rows = [{"model_id": model_id, "split": split, "ccc_valence": self.valence.ccc,
                 "ccc_arousal": self.arousal.ccc, "n_frames": self.n_frames}]
        per = self.predictions.shape[1] if self.predictions.ndim == 3 else 0
        for sid, cv, ca in self.per_sequence:
            rows.append({"model_id": model_id, "split": f"{split}:{sid}", "ccc_valence": cv,
                         "ccc_arousal": ca, "n_frames": per})
        return rows

    def to_csv(self, model_id: str, split: str) -> str:
        buf = io.StringIO()
        write_metric_rows(buf, self.csv_rows(model_id, split))
        return buf.getvalue()


@dataclass
class TrainResult:
    model: _BaseModel
    best_epoch: int
    best_val_ccc: float
    step: int
    log: list[dict]
    skipped_batches: int
    checkpoint_path: Path | None = None
    last_checkpoint_path: Path | None = None


def _check_dims(model: _BaseModel, ds: Dataset) -> None:
    c = model.config
    if len(ds) == 0:
        raise ContractError("dataset is empty")
    if (c.uses_audio and ds.audio_dim != c.audio_dim) or (c.uses_video and ds.video_dim != c.video_dim):
        raise ConfigError(f"dataset dims (audio {ds.audio_dim}, video {ds.video_dim}) do not match "
                          f"model (audio {c.audio_dim}, video {c.video_dim})")


def predict(model: _BaseModel, ds: Dataset, batch_size: int = 16) -> np.ndarray:
    """``[N, T, 2]`` predictions in eval mode, batched deterministically."""
    _check_dims(model, ds)
    out = []
    for start in range(0, len(ds), batch_size):
        a, v, _ = ds.arrays(range(start, min(start + batch_size, len(ds))))
        out.append(model.predict(a, v))
    return np.concatenate(out, axis=0)


def evaluate(model, ds: Dataset, batch_size: int = 16, predictions: np.ndarray | None = None) -> EvalResult:
    """Corpus-level CCC per dimension over all frames, plus per-sequence CCCs.

    ``model`` may be a model or a checkpoint path.  ``predictions`` bypasses the
    model entirely (useful for scoring external predictors).
    """
    if predictions is None:
        if not isinstance(model, _BaseModel):
            model = load_checkpoint(model).model
        predictions = predict(model, ds, batch_size)
    targets = np.stack([s.targets for s in ds]).astype(np.float64)
    if predictions.shape != targets.shape:
        raise ConfigError(f"predictions {predictions.shape} do not match targets {targets.shape}")
    flat_p = predictions.reshape(-1, 2)
    flat_t = targets.reshape(-1, 2)
    per = [(s.id, ccc(targets[i, :, 0], predictions[i, :, 0]).ccc,
            ccc(targets[i, :, 1], predictions[i, :, 1]).ccc) for i, s in enumerate(ds)]
    return EvalResult(ccc(flat_t[:, 0], flat_p[:, 0]), ccc(flat_t[:, 1], flat_p[:, 1]),
                      flat_t.shape[0], per, predictions)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def _write_log(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRAIN_LOG_HEADER, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def train(config: TrainConfig, train_set: Dataset, val_set: Dataset, resume_from=None) -> TrainResult:
    """Minimize ``1 - CCC`` with Adam; keep the epoch with the best mean validation CCC.

    Each epoch shuffles with ``default_rng([seed, epoch])`` so runs resumed from
    a checkpoint see the same batch order as uninterrupted ones.
    """
    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        model = ck.model
        start_epoch = int(ck.meta.get("epoch", -1)) + 1
        step0 = int(ck.meta.get("step", 0))
        best_val = float(ck.meta.get("best_val_ccc", -np.inf))
        best_epoch = int(ck.meta.get("best_epoch", -1))
        history = list(ck.meta.get("log", []))
    else:
        model = build_model(config.model)
        start_epoch, step0, best_val, best_epoch, history = 0, 0, -np.inf, -1, []
    _check_dims(model, train_set)
    _check_dims(model, val_set)
    opt = Adam(model.parameters(), lr=config.lr)
    if resume_from is not None:
        opt.load_state_arrays(ck.extra, step0)

    out_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    best_state = model.state_dict()
    if resume_from is not None and (Path(resume_from).parent / "best.ckpt").exists():
        best_state = load_checkpoint(Path(resume_from).parent / "best.ckpt").model.state_dict()
    skipped = 0
    stale = 0
    for epoch in range(start_epoch, config.epochs):
        model.train()
        rng = np.random.default_rng([config.seed, epoch])
        losses = []
        for idx in _batches(len(train_set), config.batch_size, rng):
            a, v, y = train_set.arrays(idx)
            opt.zero_grad()
            try:
                loss = ccc_loss(model(a, v), y.astype(np.float64))
            except DegenerateLossError:
                skipped += 1
                log.warning("skipping batch with constant targets (%d skipped so far)", skipped)
                continue
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"non-finite loss at step {opt.step_count}")
            T.backward(loss)
            opt.step()
            losses.append(loss.item())
            if config.max_steps is not None and opt.step_count >= config.max_steps:
                break
        res = evaluate(model, val_set)
        row = {"epoch": epoch, "step": opt.step_count,
               "train_loss": float(np.mean(losses)) if losses else float("nan"),
               "val_ccc_valence": res.valence.ccc, "val_ccc_arousal": res.arousal.ccc,
               "val_ccc_mean": res.mean_ccc, "skipped_batches": skipped}
        history.append(row)
        log.info("epoch %d step %d loss %.4f val ccc %.4f", epoch, opt.step_count,
                 row["train_loss"], res.mean_ccc)
        if res.mean_ccc > best_val:
            best_val, best_epoch, stale = res.mean_ccc, epoch, 0
            best_state = model.state_dict()
            if out_dir:
                save_checkpoint(out_dir / "best.ckpt", model,
                                meta={"epoch": epoch, "step": opt.step_count, "best_val_ccc": best_val})
        else:
            stale += 1
        if out_dir:
            meta = {"epoch": epoch, "step": opt.step_count, "best_val_ccc": best_val,
                    "best_epoch": best_epoch, "log": history}
            save_checkpoint(out_dir / "last.ckpt", model, meta=meta, extra=opt.state_arrays())
            _write_log(out_dir / "train_log.csv", history)
        if stale >= config.patience:
            break
        if config.stop_at_val_ccc is not None and res.valence.ccc >= config.stop_at_val_ccc \
                and res.arousal.ccc >= config.stop_at_val_ccc:
            break
        if config.max_steps is not None and opt.step_count >= config.max_steps:
            break

    final_step = opt.step_count
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, best_epoch, best_val, final_step, history, skipped,
                       out_dir / "best.ckpt" if out_dir else None,
                       out_dir / "last.ckpt" if out_dir else None)


# ---------------------------------------------------------------- ablation


@dataclass
class AblationReport:
    modality: str
    proportions: list[float]
    trials: int
    ccc_valence: np.ndarray  # [len(proportions), trials]
    ccc_arousal: np.ndarray
    seeds: list[list[int]]

    def mean(self, dim: str) -> np.ndarray:
        return getattr(self, f"ccc_{dim}").mean(axis=1)

    def std(self, dim: str) -> np.ndarray:
        return getattr(self, f"ccc_{dim}").std(axis=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ABLATION_HEADER)
        for i, p in enumerate(self.proportions):
            for j in range(self.trials):
                w.writerow([self.modality, repr(p), j, "-".join(map(str, self.seeds[i][j])),
                            repr(float(self.ccc_valence[i, j])), repr(float(self.ccc_arousal[i, j]))])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ABLATION_SUMMARY_HEADER)
        mv, sv, ma, sa = self.mean("valence"), self.std("valence"), self.mean("arousal"), self.std("arousal")
        for i, p in enumerate(self.proportions):
            w.writerow([self.modality, repr(p), self.trials, repr(float(mv[i])), repr(float(sv[i])),
                        repr(float(ma[i])), repr(float(sa[i]))])
        return buf.getvalue()


def default_grid(step: float = 0.1) -> list[float]:
    n = int(round(1.0 / step))
    return [round(i * step, 10) for i in range(n + 1)]


def ablate(model, ds: Dataset, modality: str, grid: list[float] | None = None, trials: int = 10,
           seed: int = 0) -> AblationReport:
    """Evaluate with a growing share of one modality's frames zeroed.

    Each (proportion, trial) cell masks with its own generator seeded by
    ``(seed, cell index, trial)``.
    """
    if not isinstance(model, _BaseModel):
        model = load_checkpoint(model).model
    grid = default_grid() if grid is None else list(grid)
    if any(p < 0 or p > 1 for p in grid) or any(b < a for a, b in zip(grid, grid[1:])):
        raise ContractError("grid must be sorted ascending within [0, 1]")
    if trials <= 0:
        raise ContractError("trials must be positive")
    cv = np.zeros((len(grid), trials))
    ca = np.zeros((len(grid), trials))
    seeds = []
    for i, p in enumerate(grid):
        row = []
        for j in range(trials):
            key = [seed, i, j]
            masked = mask_dataset(ds, modality, p, np.random.default_rng(key))
            res = evaluate(model, masked)
            cv[i, j], ca[i, j] = res.valence.ccc, res.arousal.ccc
            row.append(key)
        seeds.append(row)
    return AblationReport(modality, grid, trials, cv, ca, seeds)
