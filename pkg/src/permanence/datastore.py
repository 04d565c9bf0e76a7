"""On-disk dataset format.

Layout of a dataset root::

    manifest.json
    trial_00000/
        audio.wav       7-channel IEEE float32 little-endian WAV
        observed.csv    header "x,y" then 65 rows, metres, '.' decimal separator
        complete.csv    header "x,y" then 135 rows (observed rows followed by post rows)
        meta.json       end_location, exit_time, exit_index, impacts (optional ground truth)
    trial_00001/
    ...

Coordinates are stored unnormalized in the table frame; normalization happens
at load time in the model input pipeline.  Each trial directory is written
under a hidden temporary name and renamed into place, so readers never see a
partially written trial.
"""

from __future__ import annotations

import json
import os
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .features import COMPLETE_LEN, OBSERVED_LEN, trajectory_pair
from .sim import RawTrial, SimConfig

FORMAT_VERSION = 1
CHANNELS = 7


class DatasetError(ValueError):
    pass


@dataclass
class FovSpec:
    width: float = 0.35
    height: float = 0.25

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"FOV dimensions must be positive, got {self.width} x {self.height}")


@dataclass
class DatasetManifest:
    trial_count: int
    sample_rate: int
    preset: str = "desk"
    master_seed: int = 0
    channels: int = CHANNELS
    fps: int = 30
    duration_s: float = 3.0
    units: str = "meters"
    cm_per_unit: float = 100.0
    fov: FovSpec = field(default_factory=FovSpec)
    object_kind: str = "cube"
    release_height: float = 0.30
    format_version: int = FORMAT_VERSION

    @property
    def n_samples(self) -> int:
        return int(round(self.sample_rate * self.duration_s))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        d = dict(d)
        d["fov"] = FovSpec(**d.get("fov", {}))
        return cls(**d)

    @classmethod
    def for_config(cls, cfg: SimConfig, n: int, preset: str, master_seed: int) -> "DatasetManifest":
        return cls(
            trial_count=n,
            sample_rate=cfg.sample_rate,
            preset=preset,
            master_seed=master_seed,
            fps=cfg.fps,
            duration_s=cfg.duration,
            fov=FovSpec(*cfg.fov),
            object_kind=cfg.object_kind,
            release_height=cfg.release_height,
        )


@dataclass
class Trial:
    id: str
    waveform: np.ndarray  # (7, N) float32
    observed: np.ndarray  # (65, 2)
    complete: np.ndarray  # (135, 2)
    end_location: np.ndarray
    exit_time: float | None = None
    exit_index: int | None = None
    impact_times: list[float] | None = None
    impact_positions: list[list[float]] | None = None
    impact_energies: list[float] | None = None

    def meta(self) -> dict:
        return {
            "id": self.id,
            "end_location": [float(v) for v in self.end_location],
            "exit_time": self.exit_time,
            "exit_index": self.exit_index,
            "impact_times": self.impact_times,
            "impact_positions": self.impact_positions,
            "impact_energies": self.impact_energies,
        }


def trial_id(i: int) -> str:
    return f"trial_{i:05d}"


def trial_from_raw(raw: RawTrial, tid: str) -> Trial:
    observed, complete = trajectory_pair(raw.path, raw.exit_index)
    return Trial(
        id=tid,
        waveform=np.asarray(raw.waveform, dtype=np.float32),
        observed=observed,
        complete=complete,
        end_location=np.asarray(raw.end_location, dtype=np.float64).copy(),
        exit_time=raw.exit_time,
        exit_index=raw.exit_index,
        impact_times=[imp.time for imp in raw.impacts],
        impact_positions=[list(imp.position) for imp in raw.impacts],
        impact_energies=[imp.energy for imp in raw.impacts],
    )


def _write_table(path: Path, arr: np.ndarray) -> None:
    lines = ["x,y"] + [f"{float(x)!r},{float(y)!r}" for x, y in arr]
    path.write_text("\n".join(lines) + "\n", encoding="ascii")


def _read_table(path: Path) -> np.ndarray:
    rows = path.read_text(encoding="ascii").strip().splitlines()
    if not rows or rows[0].strip() != "x,y":
        raise DatasetError(f"{path}: missing 'x,y' header")
    out = np.array([[float(v) for v in r.split(",")] for r in rows[1:]], dtype=np.float64)
    return out.reshape(-1, 2)


def _write_trial_files(d: Path, trial: Trial, sample_rate: int) -> None:
    wavfile.write(d / "audio.wav", sample_rate, np.ascontiguousarray(trial.waveform.T, dtype="<f4"))
    _write_table(d / "observed.csv", trial.observed)
    _write_table(d / "complete.csv", trial.complete)
    (d / "meta.json").write_text(json.dumps(trial.meta(), indent=2), encoding="utf-8")


def validate_trial(trial: Trial, manifest: DatasetManifest) -> None:
    problems = []
    if trial.waveform.shape != (manifest.channels, manifest.n_samples):
        problems.append(
            f"audio must be {manifest.channels} x {manifest.n_samples} samples, got {trial.waveform.shape}"
        )
    if trial.observed.shape != (OBSERVED_LEN, 2):
        problems.append(f"observed table must have {OBSERVED_LEN} rows, got {trial.observed.shape[0]}")
    if trial.complete.shape != (COMPLETE_LEN, 2):
        problems.append(f"complete table must have {COMPLETE_LEN} rows, got {trial.complete.shape[0]}")
    if problems:
        raise DatasetError(f"trial {trial.id}: " + "; ".join(problems))


def _validate_manifest(m: DatasetManifest) -> None:
    if m.format_version != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset format_version {m.format_version} (expected {FORMAT_VERSION})")
    if m.channels != CHANNELS:
        raise DatasetError(f"manifest declares {m.channels} channels; exactly {CHANNELS} are required")
    if m.cm_per_unit <= 0:
        raise DatasetError("cm_per_unit must be positive")


def write_dataset(trials: list[Trial], manifest: DatasetManifest, root) -> None:
    root = Path(root)
    if manifest.trial_count != len(trials):
        raise DatasetError(f"manifest trial_count {manifest.trial_count} != {len(trials)} trials")
    _validate_manifest(manifest)
    for t in trials:
        validate_trial(t, manifest)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create dataset root {root}: {exc}") from exc
    for t in trials:
        final = root / t.id
        tmp = root / f".tmp-{t.id}-{os.getpid()}"
        try:
            if tmp.exists():
                shutil.rmtree(tmp)
            tmp.mkdir()
            _write_trial_files(tmp, t, manifest.sample_rate)
            if final.exists():
                shutil.rmtree(final)
            os.rename(tmp, final)
        except OSError as exc:
            shutil.rmtree(tmp, ignore_errors=True)
            raise DatasetError(f"failed writing trial {t.id} under {root}: {exc}") from exc
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
    tmp_manifest = root / ".manifest.json.tmp"
    tmp_manifest.write_text(manifest.to_json(), encoding="utf-8")
    os.replace(tmp_manifest, root / "manifest.json")


def read_manifest(root) -> DatasetManifest:
    path = Path(root) / "manifest.json"
    if not path.is_file():
        raise DatasetError(f"no manifest.json in {root}")
    try:
        manifest = DatasetManifest.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, TypeError) as exc:
        raise DatasetError(f"{path}: malformed manifest ({exc})") from exc
    _validate_manifest(manifest)
    return manifest


def _trial_dirs(root: Path) -> list[Path]:
    return sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))


def read_trial(d: Path, manifest: DatasetManifest) -> Trial:
    tid = d.name
    try:
        sr, audio = wavfile.read(d / "audio.wav")
        meta = json.loads((d / "meta.json").read_text(encoding="utf-8"))
        observed = _read_table(d / "observed.csv")
        complete = _read_table(d / "complete.csv")
    except (OSError, ValueError) as exc:
        raise DatasetError(f"trial {tid}: unreadable ({exc})") from exc
    if sr != manifest.sample_rate:
        raise DatasetError(f"trial {tid}: audio sample rate {sr} != manifest {manifest.sample_rate}")
    if audio.dtype != np.float32:
        raise DatasetError(f"trial {tid}: audio must be 32-bit float, got {audio.dtype}")
    waveform = np.ascontiguousarray(np.atleast_2d(audio.T))
    trial = Trial(
        id=tid,
        waveform=waveform,
        observed=observed,
        complete=complete,
        end_location=np.asarray(meta["end_location"], dtype=np.float64),
        exit_time=meta.get("exit_time"),
        exit_index=meta.get("exit_index"),
        impact_times=meta.get("impact_times"),
        impact_positions=meta.get("impact_positions"),
        impact_energies=meta.get("impact_energies"),
    )
    validate_trial(trial, manifest)
    return trial


def read_dataset(root) -> tuple[list[Trial], DatasetManifest]:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    manifest = read_manifest(root)
    dirs = _trial_dirs(root)
    if len(dirs) != manifest.trial_count:
        raise DatasetError(f"manifest lists {manifest.trial_count} trials but {len(dirs)} directories exist")
    return [read_trial(d, manifest) for d in dirs], manifest


def simulate_to_trials(cfg: SimConfig, n: int, master_seed: int) -> list[Trial]:
    from .sim import generate_dataset

    return [trial_from_raw(raw, trial_id(i)) for i, raw in enumerate(generate_dataset(cfg, n, master_seed))]
