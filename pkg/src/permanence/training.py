"""Splitting, training, finetuning with k-fold cross-validation, and the two task metrics."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datastore import FovSpec
from .models import (
    ModelConfig,
    ModelKind,
    PredictionResult,
    Predictor,
    build_model,
    estimate_magnitude_scale,
    feature_bytes,
    make_batch,
    predict,
    target_normalized,
)
from .tensor import Adam, mse_loss, no_grad

log = logging.getLogger("permanence.training")

CACHE_LIMIT_BYTES = 2 * 1024**3


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 16
    seed: int = 0
    split: tuple = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if len(self.split) != 3 or any(s < 0 for s in self.split) or abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError(f"split must be three non-negative fractions summing to 1, got {self.split}")


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 3
    lr: float = 1e-5
    beta1: float = 0.0
    beta2: float = 0.999
    folds: int = 5
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError(f"folds must be >= 2, got {self.folds}")
        if self.epochs < 0 or self.lr < 0 or self.batch_size < 1:
            raise ValueError("epochs and lr must be >= 0 and batch_size positive")


# -- splits ------------------------------------------------------------------
def split_dataset(n: int, seed: int = 0, split=(0.8, 0.1, 0.1)) -> tuple[list[int], list[int], list[int]]:
    """Seeded shuffle into floor(a n) / floor(b n) / remainder index lists."""
    if n < 10:
        raise ValueError(f"need at least 10 trials to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = math.floor(split[0] * n + 1e-9)
    n_val = math.floor(split[1] * n + 1e-9)
    if n_train < 1 or n_val < 1 or n - n_train - n_val < 1:
        raise ValueError(f"split {split} of {n} trials leaves an empty subset")
    return (
        perm[:n_train].tolist(),
        perm[n_train : n_train + n_val].tolist(),
        perm[n_train + n_val :].tolist(),
    )


def kfold_indices(n: int, folds: int, seed: int = 0) -> list[list[int]]:
    """Disjoint, covering folds of a seeded permutation (sizes differ by at most one)."""
    if n < folds:
        raise ValueError(f"{n} trials cannot be split into {folds} folds")
    perm = np.random.default_rng(seed).permutation(n)
    return [f.tolist() for f in np.array_split(perm, folds)]


# -- metrics -------------------------------------------------------------------
@dataclass
class TrialMetric:
    trial_id: str
    displacement_cm: float
    success: bool


@dataclass
class MetricsReport:
    model: str
    per_trial: list[TrialMetric]
    fov: FovSpec = field(default_factory=FovSpec)
    cm_per_unit: float = 100.0

    @property
    def trials(self) -> int:
        return len(self.per_trial)

    @property
    def successes(self) -> int:
        return sum(1 for t in self.per_trial if t.success)

    @property
    def success_rate(self) -> float:
        return self.successes / self.trials if self.per_trial else 0.0

    @property
    def displacements_cm(self) -> np.ndarray:
        return np.array([t.displacement_cm for t in self.per_trial], dtype=np.float64)

    @property
    def mean_displacement_cm(self) -> float:
        return float(np.mean(self.displacements_cm)) if self.per_trial else 0.0

    @property
    def median_displacement_cm(self) -> float:
        return float(np.median(self.displacements_cm)) if self.per_trial else 0.0

    # Text layout: "key: value" lines, a blank line, then a CSV table.
    def to_text(self) -> str:
        head = [
            "# permanence metrics report v1",
            f"model: {self.model}",
            f"trials: {self.trials}",
            f"successes: {self.successes}",
            f"success_rate: {self.success_rate!r}",
            f"mean_displacement_cm: {self.mean_displacement_cm!r}",
            f"median_displacement_cm: {self.median_displacement_cm!r}",
            f"fov_width_m: {self.fov.width!r}",
            f"fov_height_m: {self.fov.height!r}",
            f"cm_per_unit: {self.cm_per_unit!r}",
            "",
            "trial_id,displacement_cm,success",
        ]
        rows = [f"{t.trial_id},{t.displacement_cm!r},{int(t.success)}" for t in self.per_trial]
        return "\n".join(head + rows) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        header, _, table = text.partition("\n\n")
        kv = {}
        for line in header.splitlines():
            if line.startswith("#") or not line.strip():
                continue
            k, _, v = line.partition(":")
            kv[k.strip()] = v.strip()
        rows = table.strip().splitlines()[1:]
        per = []
        for r in rows:
            tid, d, s = r.split(",")
            per.append(TrialMetric(tid, float(d), s == "1"))
        report = cls(
            kv["model"],
            per,
            FovSpec(float(kv["fov_width_m"]), float(kv["fov_height_m"])),
            float(kv["cm_per_unit"]),
        )
        if report.trials != int(kv["trials"]) or report.successes != int(kv["successes"]):
            raise ValueError("report header disagrees with its per-trial table")
        return report

    @classmethod
    def read(cls, path) -> "MetricsReport":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def score_end_points(pred_ends, true_ends, fov: FovSpec, scale: float) -> tuple[np.ndarray, np.ndarray]:
    """(displacement in cm, success flags) for aligned (n, 2) arrays of end points."""
    if scale <= 0:
        raise ValueError(f"cm-per-unit scale must be positive, got {scale}")
    p = np.asarray(pred_ends, dtype=np.float64).reshape(-1, 2)
    t = np.asarray(true_ends, dtype=np.float64).reshape(-1, 2)
    if p.shape != t.shape:
        raise ValueError(f"{len(p)} predictions vs {len(t)} ground-truth end points")
    d = t - p
    disp = np.hypot(d[:, 0], d[:, 1]) * scale
    ok = (np.abs(d[:, 0]) <= fov.width / 2) & (np.abs(d[:, 1]) <= fov.height / 2)
    return disp, ok


def evaluate(predictions: list[PredictionResult], ground_truth, fov: FovSpec = FovSpec(), scale: float = 100.0) -> MetricsReport:
    """Score predictions against trials (or (135, 2) normalized arrays) in the same order."""
    if len(predictions) != len(ground_truth):
        raise ValueError(f"{len(predictions)} predictions vs {len(ground_truth)} ground-truth trials")
    ids, truth = [], []
    for i, (p, g) in enumerate(zip(predictions, ground_truth)):
        gid = getattr(g, "id", None)
        if gid is not None and p.trial_id is not None and gid != p.trial_id:
            raise ValueError(f"position {i}: prediction for {p.trial_id} vs ground truth {gid}")
        ids.append(p.trial_id or gid or f"#{i}")
        truth.append(target_normalized(g)[-1] if gid is not None else np.asarray(g)[-1])
    disp, ok = score_end_points([p.end_location for p in predictions], truth, fov, scale)
    model = predictions[0].model.value if predictions else "unknown"
    per = [TrialMetric(i, float(d), bool(s)) for i, d, s in zip(ids, disp, ok)]
    return MetricsReport(model, per, fov, scale)


# -- training --------------------------------------------------------------------
@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float = 0.0


@dataclass
class TrainResult:
    model: Predictor
    curve: list[EpochRecord]
    best_epoch: int
    split: tuple[list[int], list[int], list[int]]

    @property
    def best_val_loss(self) -> float:
        return next(r.val_loss for r in self.curve if r.epoch == self.best_epoch)

    def curve_table(self) -> str:
        lines = ["epoch,train_loss,val_loss,seconds"]
        lines += [f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{r.seconds:.3f}" for r in self.curve]
        return "\n".join(lines) + "\n"


def dataset_loss(model: Predictor, trials, batch_size: int = 16, cache=None) -> float:
    """Per-sample mean MSE over ``trials`` in eval mode."""
    was = model.training
    model.eval()
    total = 0.0
    try:
        with no_grad():
            for i in range(0, len(trials), batch_size):
                chunk = trials[i : i + batch_size]
                b = make_batch(model, chunk, cache=cache)
                total += mse_loss(model(b.audio, b.observed), b.target).item() * len(chunk)
    finally:
        model.train(was)
    return total / len(trials)


def _fit_epoch(model: Predictor, opt: Adam, trials, order, batch_size: int, cache) -> float:
    """One pass of minibatch Adam; returns the sample-weighted mean batch loss."""
    model.train()
    total = 0.0
    for i in range(0, len(order), batch_size):
        chunk = [trials[j] for j in order[i : i + batch_size]]
        b = make_batch(model, chunk, cache=cache)
        loss = mse_loss(model(b.audio, b.observed), b.target)
        loss.backward()
        opt.step()
        total += loss.item() * len(chunk)
    return total / len(order)


def auto_cache(cfg: ModelConfig, n: int) -> dict | None:
    return {} if feature_bytes(cfg) * n <= CACHE_LIMIT_BYTES else None


def train(
    kind,
    trials,
    cfg: TrainConfig = TrainConfig(),
    model_config: ModelConfig | None = None,
    cache: dict | None = None,
    dtype=np.float32,
) -> TrainResult:
    """Train on the split's train part; return the epoch with the lowest validation loss.

    The curve's epoch 0 row holds losses of the untrained model; later rows
    hold the epoch's mean minibatch loss and the epoch-end validation loss.
    """
    kind = ModelKind.parse(kind) if not isinstance(kind, ModelKind) else kind
    if not kind.trainable:
        raise ValueError(f"{kind.value} has no trainable parameters")
    if not trials:
        raise ValueError("cannot train on an empty dataset")
    tr_idx, va_idx, te_idx = split_dataset(len(trials), cfg.seed, cfg.split)
    train_set = [trials[i] for i in tr_idx]
    val_set = [trials[i] for i in va_idx]
    mc = model_config or ModelConfig()
    if kind.uses_audio and kind is not ModelKind.B2_DELAY_CNN:
        mc = ModelConfig(**{**mc.to_dict(), "magnitude_scale": estimate_magnitude_scale(train_set, mc)})
    if cache is None:
        cache = auto_cache(mc, len(trials))
    model = build_model(kind, mc, seed=cfg.seed, dtype=dtype)
    opt = Adam(model.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    rng = np.random.default_rng([cfg.seed, 1])

    t0 = time.perf_counter()
    curve = [EpochRecord(0, dataset_loss(model, train_set, cfg.batch_size, cache),
                         dataset_loss(model, val_set, cfg.batch_size, cache), time.perf_counter() - t0)]
    log.info("%s epoch 0: train %.6g val %.6g", kind.value, curve[0].train_loss, curve[0].val_loss)
    best_state, best_epoch, best_val = model.state_dict(), 0, math.inf
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_set))
        tl = _fit_epoch(model, opt, train_set, order, cfg.batch_size, cache)
        vl = dataset_loss(model, val_set, cfg.batch_size, cache)
        curve.append(EpochRecord(epoch, tl, vl, time.perf_counter() - t0))
        log.info("%s epoch %d: train %.6g val %.6g (%.1fs)", kind.value, epoch, tl, vl, curve[-1].seconds)
        if vl < best_val:
            best_val, best_epoch, best_state = vl, epoch, model.state_dict()
    model.load_state_dict(best_state)
    return TrainResult(model, curve, best_epoch, (tr_idx, va_idx, te_idx))


def clone_model(model: Predictor) -> Predictor:
    dtype = model.parameters()[0].dtype if model.parameters() else np.float64
    twin = build_model(model.kind, model.config, dtype=dtype)
    twin.load_state_dict(model.state_dict())
    return twin


# -- finetuning ---------------------------------------------------------------------
@dataclass
class FoldResult:
    fold: int
    zero_shot: MetricsReport
    finetuned: MetricsReport


@dataclass
class FinetuneResult:
    folds: list[FoldResult]

    def _stat(self, attr: str, which: str) -> tuple[float, float]:
        vals = np.array([getattr(getattr(f, which), attr) for f in self.folds])
        return float(vals.mean()), float(vals.std())

    def summary(self) -> dict:
        out = {}
        for which in ("zero_shot", "finetuned"):
            for attr in ("success_rate", "mean_displacement_cm"):
                m, s = self._stat(attr, which)
                out[f"{which}_{attr}_mean"] = m
                out[f"{which}_{attr}_std"] = s
        return out

    def to_text(self) -> str:
        lines = ["# permanence finetune report v1", f"folds: {len(self.folds)}"]
        lines += [f"{k}: {v!r}" for k, v in self.summary().items()]
        lines += ["", "fold,trials,zero_shot_success_rate,zero_shot_mean_cm,finetuned_success_rate,finetuned_mean_cm"]
        for f in self.folds:
            lines.append(
                f"{f.fold},{f.finetuned.trials},{f.zero_shot.success_rate!r},{f.zero_shot.mean_displacement_cm!r},"
                f"{f.finetuned.success_rate!r},{f.finetuned.mean_displacement_cm!r}"
            )
        return "\n".join(lines) + "\n"


def finetune(
    model: Predictor,
    novel_trials,
    cfg: FinetuneConfig = FinetuneConfig(),
    fov: FovSpec = FovSpec(),
    scale: float = 100.0,
    cache: dict | None = None,
) -> FinetuneResult:
    """k-fold CV: per fold, adapt a copy of ``model`` on the other folds and score the held-out one."""
    folds = kfold_indices(len(novel_trials), cfg.folds, cfg.seed)
    if cache is None and model.kind.uses_audio:
        cache = auto_cache(model.config, len(novel_trials))
    results = []
    for k, held in enumerate(folds):
        test = [novel_trials[i] for i in held]
        zero = evaluate(predict(model, test, cfg.batch_size, cache), test, fov, scale)
        if not model.kind.trainable:
            results.append(FoldResult(k, zero, zero))
            continue
        rest = [novel_trials[i] for j, f in enumerate(folds) if j != k for i in f]
        tuned = clone_model(model)
        opt = Adam(tuned.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
        rng = np.random.default_rng([cfg.seed, 2, k])
        for epoch in range(cfg.epochs):
            loss = _fit_epoch(tuned, opt, rest, rng.permutation(len(rest)), cfg.batch_size, cache)
            log.info("finetune fold %d epoch %d: train %.6g", k, epoch + 1, loss)
        tuned_report = evaluate(predict(tuned, test, cfg.batch_size, cache), test, fov, scale)
        results.append(FoldResult(k, zero, tuned_report))
    return FinetuneResult(results)
