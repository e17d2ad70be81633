"""Command line entry point: ``xmaf <command> [options]``.

Every command accepts ``--seed``, ``--config`` (a JSON file whose keys are the
fields of the command's config record; explicit flags win) and ``--out``.
Metric outputs are CSV:

  eval        metrics.csv           model_id,split,ccc_valence,ccc_arousal,n_frames
  train       train_log.csv         epoch,step,train_loss,val_ccc_valence,val_ccc_arousal,val_ccc_mean,skipped_batches
  ablate      ablation.csv          modality,proportion,trial,seed,ccc_valence,ccc_arousal
              ablation_summary.csv  modality,proportion,trials,ccc_valence_mean,ccc_valence_std,ccc_arousal_mean,ccc_arousal_std
  gradcheck   gradcheck.csv         op,max_rel_error,tolerance,passed
  params      params.csv            model,trainable_parameters
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataset as D
from . import gradcheck as G
from .errors import XmafError
from .features import NormStats
from .models import ModelConfig, parameter_report
from .train import TrainConfig, ablate, default_grid, evaluate, train

log = logging.getLogger("xmaf")


def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise XmafError(f"{path}: not valid JSON ({e})") from None
    if not isinstance(data, dict):
        raise XmafError(f"{path}: expected a JSON object")
    return data


def _overrides(args, names: list[str]) -> dict:
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- commands

_SYNTH_FIELDS = ["n_sequences", "seq_len", "step_sigma", "audio_snr", "video_snr", "channels",
                 "mixing_seed", "audio_dim", "video_dim", "split"]


def cmd_synth(args) -> int:
    cfg = _read_config(args.config)
    cfg.update(_overrides(args, _SYNTH_FIELDS + ["seed"]))
    sc = D.SynthConfig.from_dict(cfg)
    ds = D.generate_synthetic(sc)
    data, manifest = D.store(ds, _out_dir(args), args.name or sc.split)
    print(manifest)
    return 0


def cmd_extract(args) -> int:
    cfg = _read_config(args.config)
    seq_len = args.seq_len or cfg.get("seq_len", 100)
    stats = None
    stats_path = args.stats or cfg.get("stats")
    if stats_path:
        s = np.load(stats_path)
        stats = NormStats(s["mean"], s["std"])
    samples = D.ingest_annotations(args.video, args.audio, args.annotations, args.clip_id, stats,
                                   args.sample_rate, seq_len)
    if not samples:
        raise XmafError(f"clip shorter than one {seq_len}-frame sequence")
    ds = D.Dataset(samples, args.split)
    _, manifest = D.store(ds, _out_dir(args), args.name or args.split)
    print(manifest)
    return 0


_MODEL_FIELDS = ["modality", "architecture", "d_model", "heads", "layers", "d_ff", "dropout",
                 "head_activation", "gru_hidden", "gru_layers"]
_TRAIN_FIELDS = ["epochs", "batch_size", "lr", "patience", "max_steps", "stop_at_val_ccc"]


def cmd_train(args) -> int:
    cfg = _read_config(args.config)
    model_cfg = dict(cfg.pop("model", {}))
    train_set, val_set = D.load(args.train), D.load(args.val)
    model_cfg.setdefault("seq_len", train_set.seq_len)
    model_cfg.setdefault("audio_dim", train_set.audio_dim)
    model_cfg.setdefault("video_dim", train_set.video_dim)
    model_cfg.update(_overrides(args, _MODEL_FIELDS))
    if args.no_positional_encoding:
        model_cfg["positional_encoding"] = False
    cfg.update(_overrides(args, _TRAIN_FIELDS + ["seed"]))
    if args.seed is not None:
        model_cfg["seed"] = args.seed
    cfg["model"] = ModelConfig.from_dict(model_cfg)
    cfg["checkpoint_dir"] = str(_out_dir(args))
    tc = TrainConfig.from_dict(cfg)
    (Path(args.out) / "train_config.json").write_text(json.dumps(tc.to_dict(), indent=2, sort_keys=True))
    res = train(tc, train_set, val_set, resume_from=args.resume)
    print(f"best epoch {res.best_epoch}: val mean CCC {res.best_val_ccc:.4f} "
          f"({res.step} steps, {res.skipped_batches} skipped batches)")
    print(res.checkpoint_path)
    return 0


def cmd_eval(args) -> int:
    ds = D.load(args.data)
    res = evaluate(args.checkpoint, ds, batch_size=args.batch_size)
    text = res.to_csv(args.model_id or Path(args.checkpoint).stem, args.split or ds.split)
    (_out_dir(args) / "metrics.csv").write_text(text)
    print(f"ccc_valence={res.valence.ccc:.6f} ccc_arousal={res.arousal.ccc:.6f} n_frames={res.n_frames}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _read_config(args.config)
    step = args.step if args.step is not None else cfg.get("step", 0.1)
    grid = cfg.get("grid") or default_grid(step)
    trials = args.trials if args.trials is not None else cfg.get("trials", 10)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    modality = args.modality or cfg.get("modality")
    if modality is None:
        raise XmafError("--modality is required (audio or video)")
    report = ablate(args.checkpoint, D.load(args.data), modality, grid, trials, seed)
    out = _out_dir(args)
    (out / "ablation.csv").write_text(report.to_csv())
    (out / "ablation_summary.csv").write_text(report.summary_csv())
    sys.stdout.write(report.summary_csv())
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _read_config(args.config)
    tol = args.tol if args.tol is not None else cfg.get("tol", 1e-4)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    names = args.only or cfg.get("only")
    unknown = sorted(set(names or []) - set(G.REGISTRY))
    if unknown:
        raise XmafError(f"unknown ops: {', '.join(unknown)}")
    result = G.run_suite(seed=seed, tol=tol, names=names)
    print(result.format())
    if args.out:
        with open(_out_dir(args) / "gradcheck.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["op", "max_rel_error", "tolerance", "passed"])
            for r in result.reports:
                w.writerow([r.op_name, repr(float(r.max_rel_error)), r.tolerance, int(r.passed)])
    return 0 if result.passed else 1


def cmd_params(args) -> int:
    cfg = _read_config(args.config)
    configs = {name: ModelConfig.from_dict(c) for name, c in cfg.items()} or None
    report = parameter_report(configs)
    lines = ["model,trainable_parameters"] + [f"{k},{v}" for k, v in report.items()]
    text = "\n".join(lines) + "\n"
    if args.out:
        (_out_dir(args) / "params.csv").write_text(text)
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xmaf", description=__doc__.splitlines()[0],
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--seed", type=int)
        sp.add_argument("--config", help="JSON file of config fields")
        sp.add_argument("--out", required=out_required, help="output directory")
        return sp

    s = common(sub.add_parser("synth", help="generate a synthetic dataset"))
    s.add_argument("--n-sequences", dest="n_sequences", type=int)
    s.add_argument("--seq-len", dest="seq_len", type=int)
    s.add_argument("--step-sigma", dest="step_sigma", type=float)
    s.add_argument("--audio-snr", dest="audio_snr", type=float)
    s.add_argument("--video-snr", dest="video_snr", type=float)
    s.add_argument("--channels", choices=["redundant", "both_full", "arousal_in_audio_valence_in_video"])
    s.add_argument("--mixing-seed", dest="mixing_seed", type=int)
    s.add_argument("--audio-dim", dest="audio_dim", type=int)
    s.add_argument("--video-dim", dest="video_dim", type=int)
    s.add_argument("--split", choices=["train", "validation", "test"])
    s.add_argument("--name", help="file stem (default: split name)")
    s.set_defaults(func=cmd_synth)

    s = common(sub.add_parser("extract", help="build a dataset from a clip's audio, crops and labels"))
    s.add_argument("--audio", required=True, help="16-bit mono WAV, or raw float32 with --sample-rate")
    s.add_argument("--video", required=True, help="directory of .npy crops or a .npy embedding file")
    s.add_argument("--annotations", required=True, help="CSV of valence,arousal per video frame")
    s.add_argument("--sample-rate", dest="sample_rate", type=int)
    s.add_argument("--stats", help=".npz with 'mean' and 'std' for descriptor z-normalization")
    s.add_argument("--clip-id", dest="clip_id")
    s.add_argument("--seq-len", dest="seq_len", type=int)
    s.add_argument("--split", default="train", choices=["train", "validation", "test"])
    s.add_argument("--name")
    s.set_defaults(func=cmd_extract)

    s = common(sub.add_parser("train", help="train a model with best-on-validation selection"))
    s.add_argument("--train", required=True, help="training manifest")
    s.add_argument("--val", required=True, help="validation manifest")
    s.add_argument("--resume", help="last.ckpt to resume from")
    s.add_argument("--modality", choices=["audio", "video", "audio_video"])
    s.add_argument("--architecture", choices=["transformer", "gru"])
    s.add_argument("--d-model", dest="d_model", type=int)
    s.add_argument("--heads", type=int)
    s.add_argument("--layers", type=int)
    s.add_argument("--d-ff", dest="d_ff", type=int)
    s.add_argument("--dropout", type=float)
    s.add_argument("--head-activation", dest="head_activation", choices=["tanh", "linear"])
    s.add_argument("--gru-hidden", dest="gru_hidden", type=int)
    s.add_argument("--gru-layers", dest="gru_layers", type=int)
    s.add_argument("--no-positional-encoding", dest="no_positional_encoding", action="store_true")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--patience", type=int)
    s.add_argument("--max-steps", dest="max_steps", type=int)
    s.add_argument("--stop-at-val-ccc", dest="stop_at_val_ccc", type=float)
    s.set_defaults(func=cmd_train)

    s = common(sub.add_parser("eval", help="corpus-level CCC of a checkpoint on a dataset"))
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="dataset manifest")
    s.add_argument("--batch-size", dest="batch_size", type=int, default=16)
    s.add_argument("--model-id", dest="model_id")
    s.add_argument("--split")
    s.set_defaults(func=cmd_eval)

    s = common(sub.add_parser("ablate", help="CCC under growing masking of one modality"))
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="dataset manifest")
    s.add_argument("--modality", choices=["audio", "video"])
    s.add_argument("--step", type=float, help="grid step (default 0.1)")
    s.add_argument("--trials", type=int)
    s.set_defaults(func=cmd_ablate)

    s = common(sub.add_parser("gradcheck", help="finite-difference check of every registered op"),
               out_required=False)
    s.add_argument("--tol", type=float)
    s.add_argument("--only", nargs="+", help="restrict to these registered names")
    s.add_argument("--list", action="store_true", help="print registered names and exit")
    s.set_defaults(func=cmd_gradcheck)

    s = common(sub.add_parser("params", help="trainable parameter counts"), out_required=False)
    s.set_defaults(func=cmd_params)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "list", False):
        print("\n".join(G.REGISTRY))
        return 0
    try:
        return args.func(args)
    except (XmafError, ValueError, TypeError, ArithmeticError, OSError, KeyError) as e:
        print(f"xmaf {args.command}: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
