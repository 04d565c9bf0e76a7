"""Command-line entry point: ``permanence <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Log verbosity comes
from the ``PERMANENCE_LOG`` environment variable (DEBUG, INFO, WARNING, ...).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .datastore import DatasetError, DatasetManifest, read_dataset, simulate_to_trials, write_dataset
from .features import SilentRecordingError, bounce_duration, normalize_trajectory
from .models import ModelConfig, ModelKind, build_model, load_model_with_meta, predict, save_model
from .sim import PRESETS, make_config
from .tensor import CheckpointError
from .training import FinetuneConfig, TrainConfig, evaluate, finetune, split_dataset, train

log = logging.getLogger("permanence")


class CliError(Exception):
    """Runtime failure reported with exit code 1."""


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _non_negative_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not np.isfinite(v) or v < 0:
        raise argparse.ArgumentTypeError(f"must be a finite number >= 0, got {text}")
    return v


def _positive_float(text: str) -> float:
    v = _non_negative_float(text)
    if v == 0:
        raise argparse.ArgumentTypeError("must be > 0")
    return v


def _model_kind(text: str) -> ModelKind:
    try:
        return ModelKind.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="permanence", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic drop dataset")
    s.add_argument("--n", type=_positive_int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    s.add_argument("--object", choices=["cube", "triangle"], default="cube")
    s.add_argument("--height", type=_positive_float, default=0.30)
    s.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--model", type=_model_kind, required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--curve", help="loss-curve CSV (default: <out>.loss.csv)")
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--lr", type=_non_negative_float, default=1e-4)
    t.add_argument("--beta1", type=_non_negative_float, default=0.9)
    t.add_argument("--batch-size", type=_positive_int, default=16)
    t.add_argument("--seed", type=int, default=0)

    f = sub.add_parser("finetune", help="k-fold finetuning on a novel dataset")
    f.add_argument("--model", type=_model_kind, required=True)
    f.add_argument("--ckpt")
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True, help="report path")
    f.add_argument("--epochs", type=int, default=3)
    f.add_argument("--lr", type=_non_negative_float, default=1e-5)
    f.add_argument("--beta1", type=_non_negative_float, default=0.0)
    f.add_argument("--folds", type=_positive_int, default=5)
    f.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("eval", help="metrics on the test split")
    e.add_argument("--model", type=_model_kind, required=True)
    e.add_argument("--ckpt")
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="report path (default: print)")
    e.add_argument("--seed", type=int, help="split seed (default: the checkpoint's training seed, else 0)")
    e.add_argument("--all", action="store_true", help="score every trial instead of the test split")

    r = sub.add_parser("predict", help="predicted vs true trajectory for one trial")
    r.add_argument("--model", type=_model_kind, required=True)
    r.add_argument("--ckpt")
    r.add_argument("--data", required=True)
    r.add_argument("--trial", type=int, required=True)
    r.add_argument("--svg", help="overlay figure")
    r.add_argument("--out", help="CSV of both trajectories (default: print)")

    st = sub.add_parser("stats", help="bounce duration and travel distance summary")
    st.add_argument("--data", required=True)

    pl = sub.add_parser("plot", help="render a figure")
    pl.add_argument("--kind", choices=["traj", "hexbin", "hist-duration", "hist-distance"], required=True)
    pl.add_argument("--data", required=True)
    pl.add_argument("--out", required=True)
    pl.add_argument("--trial", type=int, default=0)
    pl.add_argument("--model", type=_model_kind, action="append", default=[], help="traj: model to overlay")
    pl.add_argument("--ckpt", action="append", default=[], help="traj: checkpoint per trainable --model")
    return p


# -- helpers -------------------------------------------------------------------
def _load_data(path):
    try:
        return read_dataset(path)
    except DatasetError as exc:
        raise CliError(str(exc)) from exc


def _load_predictor(kind: ModelKind, ckpt, manifest: DatasetManifest):
    """(model, extra checkpoint metadata); checks the checkpoint against the dataset."""
    if kind is ModelKind.B1_LINEAR:
        return build_model(kind, ModelConfig.for_manifest(manifest)), {}
    if not ckpt:
        raise CliError(f"--ckpt is required for {kind.value}")
    try:
        model, extra = load_model_with_meta(ckpt)
    except FileNotFoundError as exc:
        raise CliError(f"checkpoint not found: {ckpt}") from exc
    except (CheckpointError, KeyError, ValueError) as exc:
        raise CliError(f"cannot load checkpoint {ckpt}: {exc}") from exc
    if model.kind is not kind:
        raise CliError(f"checkpoint {ckpt} holds a {model.kind.value} model, not {kind.value}")
    cfg = model.config
    if cfg.channels != manifest.channels or cfg.sample_rate != manifest.sample_rate or cfg.n_samples != manifest.n_samples:
        raise CliError(
            f"model expects {cfg.channels} channels x {cfg.n_samples} samples at {cfg.sample_rate} Hz; "
            f"dataset has {manifest.channels} x {manifest.n_samples} at {manifest.sample_rate} Hz"
        )
    return model, extra


def trial_durations(trials, sample_rate: int) -> np.ndarray:
    out = []
    for t in trials:
        try:
            out.append(bounce_duration(t.waveform, None, sample_rate))
        except SilentRecordingError:
            out.append(0.0)
    return np.array(out)


def trial_distances(trials) -> np.ndarray:
    """Straight-line distance from the first impact (else the first point) to the end location."""
    out = []
    for t in trials:
        start = np.asarray(t.impact_positions[0]) if t.impact_positions else t.complete[0]
        out.append(float(np.linalg.norm(np.asarray(t.end_location) - start)))
    return np.array(out)


def _summary(trials, manifest) -> str:
    d = trial_durations(trials, manifest.sample_rate)
    x = trial_distances(trials)
    return (
        f"trials: {len(trials)}\n"
        f"bounce_duration_s: mean {d.mean():.4f} std {d.std():.4f}\n"
        f"travel_distance_m: mean {x.mean():.4f} std {x.std():.4f}"
    )


# -- commands ------------------------------------------------------------------
def cmd_simulate(a) -> None:
    cfg = make_config(a.preset, a.object, a.height, seed=a.seed)
    trials = simulate_to_trials(cfg, a.n, a.seed)
    manifest = DatasetManifest.for_config(cfg, a.n, a.preset, a.seed)
    write_dataset(trials, manifest, a.out)
    print(_summary(trials, manifest))


def cmd_train(a) -> None:
    trials, manifest = _load_data(a.data)
    cfg = TrainConfig(epochs=a.epochs, lr=a.lr, beta1=a.beta1, batch_size=a.batch_size, seed=a.seed)
    res = train(a.model, trials, cfg, ModelConfig.for_manifest(manifest))
    save_model(a.out, res.model, extra={"train_seed": a.seed, "best_epoch": res.best_epoch})
    curve = a.curve or f"{a.out}.loss.csv"
    Path(curve).write_text(res.curve_table(), encoding="ascii")
    print(f"best epoch {res.best_epoch} val_loss {res.best_val_loss:.6g}; wrote {a.out} and {curve}")


def cmd_finetune(a) -> None:
    trials, manifest = _load_data(a.data)
    model, _ = _load_predictor(a.model, a.ckpt, manifest)
    cfg = FinetuneConfig(epochs=a.epochs, lr=a.lr, beta1=a.beta1, folds=a.folds, seed=a.seed)
    if len(trials) < cfg.folds:
        raise CliError(f"{len(trials)} trials cannot be split into {cfg.folds} folds")
    res = finetune(model, trials, cfg, manifest.fov, manifest.cm_per_unit)
    Path(a.out).write_text(res.to_text(), encoding="utf-8")
    s = res.summary()
    print(
        f"zero-shot {s['zero_shot_mean_displacement_cm_mean']:.3f} cm -> "
        f"finetuned {s['finetuned_mean_displacement_cm_mean']:.3f} cm; wrote {a.out}"
    )


def cmd_eval(a) -> None:
    trials, manifest = _load_data(a.data)
    model, extra = _load_predictor(a.model, a.ckpt, manifest)
    if a.all:
        subset = trials
    else:
        seed = a.seed if a.seed is not None else extra.get("train_seed", 0)
        subset = [trials[i] for i in split_dataset(len(trials), seed)[2]]
    report = evaluate(predict(model, subset), subset, manifest.fov, manifest.cm_per_unit)
    if a.out:
        report.write(a.out)
        print(f"success_rate {report.success_rate:.4f} mean_displacement_cm {report.mean_displacement_cm:.3f}; wrote {a.out}")
    else:
        sys.stdout.write(report.to_text())


def _trial_at(trials, i: int):
    if not 0 <= i < len(trials):
        raise CliError(f"trial index {i} out of range (dataset has {len(trials)} trials)")
    return trials[i]


def cmd_predict(a) -> None:
    from .plotting import plot_trajectories

    trials, manifest = _load_data(a.data)
    trial = _trial_at(trials, a.trial)
    model, _ = _load_predictor(a.model, a.ckpt, manifest)
    pred = predict(model, [trial])[0].trajectory
    truth = normalize_trajectory(trial.complete)
    if a.svg:
        plot_trajectories(truth[:65], truth, {a.model.value: pred}, a.svg, title=trial.id)
    rows = ["step,pred_x,pred_y,true_x,true_y"]
    rows += [f"{i},{p[0]!r},{p[1]!r},{t[0]!r},{t[1]!r}" for i, (p, t) in enumerate(zip(pred, truth))]
    text = "\n".join(rows) + "\n"
    if a.out:
        Path(a.out).write_text(text, encoding="ascii")
    elif not a.svg:
        sys.stdout.write(text)


def cmd_stats(a) -> None:
    trials, manifest = _load_data(a.data)
    print(_summary(trials, manifest))


def cmd_plot(a) -> None:
    from .plotting import plot_hexbin, plot_histogram, plot_trajectories
    from .sim import SimConfig

    trials, manifest = _load_data(a.data)
    if not trials:
        raise CliError("dataset is empty")
    if a.kind == "traj":
        trial = _trial_at(trials, a.trial)
        truth = normalize_trajectory(trial.complete)
        trainable = [k for k in a.model if k.trainable]
        if len(a.ckpt) != len(trainable):
            raise CliError(f"{len(trainable)} trainable --model flags need as many --ckpt flags, got {len(a.ckpt)}")
        ckpts = iter(a.ckpt)
        preds = {}
        for kind in a.model:
            model, _ = _load_predictor(kind, next(ckpts) if kind.trainable else None, manifest)
            preds[kind.value] = predict(model, [trial])[0].trajectory
        plot_trajectories(truth[:65], truth, preds, a.out, title=trial.id)
    elif a.kind == "hexbin":
        ends = np.array([t.end_location for t in trials])
        plot_hexbin(ends, a.out, SimConfig().table_bounds, fov=(manifest.fov.width, manifest.fov.height))
    elif a.kind == "hist-duration":
        plot_histogram(trial_durations(trials, manifest.sample_rate), a.out, "bounce duration (s)")
    else:
        plot_histogram(trial_distances(trials), a.out, "distance from first impact to rest (m)")


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "stats": cmd_stats,
    "plot": cmd_plot,
}


def _validate(parser, a) -> None:
    if getattr(a, "epochs", 1) < 0:
        parser.error("--epochs must be >= 0")
    if a.command == "train" and not a.model.trainable:
        parser.error(f"{a.model.value} has no trainable parameters")
    if a.command in ("train", "finetune") and a.beta1 >= 1:
        parser.error("--beta1 must be < 1")
    if a.command == "finetune" and a.folds < 2:
        parser.error("--folds must be >= 2")
    if a.command in ("eval", "predict", "finetune") and a.model.trainable and not a.ckpt:
        parser.error(f"--ckpt is required for {a.model.value}")


def main(argv=None) -> int:
    level = os.environ.get("PERMANENCE_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    _validate(parser, args)
    try:
        COMMANDS[args.command](args)
    except (CliError, DatasetError, CheckpointError, SilentRecordingError, ValueError, OSError) as exc:
        print(f"permanence {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
