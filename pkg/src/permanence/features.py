"""Audio spectrogram features and fixed-length trajectory processing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import find_peaks, get_window

from .tensor.functional import pooling_matrix

OBSERVED_LEN = 65
POST_LEN = 70
COMPLETE_LEN = OBSERVED_LEN + POST_LEN


class SilentRecordingError(ValueError):
    """No impact peak stands out from the background of a recording."""


@dataclass(frozen=True)
class StftConfig:
    window_length: int = 256

    def __post_init__(self):
        M = self.window_length
        if M < 2 or M & (M - 1):
            raise ValueError(f"window_length must be a power of two >= 2, got {M}")

    @property
    def hop(self) -> int:
        return self.window_length // 2

    @property
    def n_bins(self) -> int:
        return self.window_length // 2

    def n_frames(self, n_samples: int) -> int:
        return (n_samples - self.window_length) // self.hop + 1


STFT_PRESETS = {"desk": StftConfig(256), "paper": StftConfig(2048)}


def stft_frames(waveform: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Complex Hann-windowed frames (C, T, M/2), DC bin removed."""
    wave = np.atleast_2d(np.asarray(waveform, dtype=np.float64))
    M = cfg.window_length
    if wave.shape[-1] < M:
        raise ValueError(f"waveform of {wave.shape[-1]} samples is shorter than one window ({M})")
    frames = sliding_window_view(wave, M, axis=-1)[:, :: cfg.hop]
    spec = np.fft.rfft(frames * get_window("hann", M), axis=-1)
    return spec[..., 1:]


def stft_features(waveform: np.ndarray, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Magnitude and phase stacked on the last axis: (T, M/2, 2C)."""
    spec = stft_frames(waveform, cfg)  # (C, T, F)
    feat = np.concatenate([np.abs(spec), np.angle(spec)], axis=0)
    return np.ascontiguousarray(feat.transpose(1, 2, 0))


def normalize_trajectory(traj) -> np.ndarray:
    """``traj[0] - traj``: origin at the first point, both axes negated."""
    traj = np.asarray(traj, dtype=np.float64)
    if traj.ndim != 2 or traj.shape[0] == 0:
        raise ValueError("cannot normalize an empty trajectory")
    return traj[0] - traj


def trim_pad_observed(path, exit_index: int | None = None, length: int = OBSERVED_LEN) -> np.ndarray:
    """Last ``length`` in-view samples; short paths are front-padded with the first point."""
    path = np.asarray(path, dtype=np.float64).reshape(-1, 2)
    if path.shape[0] == 0:
        raise ValueError("observed path is empty")
    seen = path[: max(int(exit_index), 1)] if exit_index is not None else path
    if len(seen) >= length:
        return seen[-length:].copy()
    pad = np.repeat(seen[:1], length - len(seen), axis=0)
    return np.vstack([pad, seen])


def trim_pad_post(path_after_exit, length: int = POST_LEN, fill=None) -> np.ndarray:
    """First ``length`` post-exit samples; short paths are back-padded with the last point.

    ``fill`` supplies the padding point when there are no post-exit samples at all.
    """
    post = np.asarray(path_after_exit, dtype=np.float64).reshape(-1, 2)
    if len(post) >= length:
        return post[:length].copy()
    if len(post) == 0:
        if fill is None:
            raise ValueError("empty post trajectory and no fill point")
        last = np.asarray(fill, dtype=np.float64).reshape(1, 2)
    else:
        last = post[-1:]
    return np.vstack([post, np.repeat(last, length - len(post), axis=0)])


def trajectory_pair(path, exit_index: int | None) -> tuple[np.ndarray, np.ndarray]:
    """(observed 65x2, complete 135x2) from a raw sampled path, both unnormalized."""
    path = np.asarray(path, dtype=np.float64)
    observed = trim_pad_observed(path, exit_index)
    after = path[exit_index:] if exit_index is not None else path[:0]
    post = trim_pad_post(after, fill=path[-1])
    return observed, np.vstack([observed, post])


def envelope(waveform: np.ndarray) -> np.ndarray:
    return np.mean(np.abs(np.atleast_2d(waveform)), axis=0)


def impact_peaks(
    waveform: np.ndarray,
    sample_rate: int,
    rel_threshold: float = 0.2,
    min_separation: float = 0.030,
    min_contrast: float = 8.0,
) -> np.ndarray:
    """Times (s) of impact peaks on the channel-averaged rectified signal."""
    env = envelope(waveform)
    if env.size == 0:
        raise ValueError("empty waveform")
    top = float(env.max())
    floor = float(np.median(env))
    if top <= 0 or top < min_contrast * floor:
        raise SilentRecordingError(
            f"no impact found: envelope peak {top:.3g} vs background {floor:.3g}"
        )
    idx, _ = find_peaks(env, height=rel_threshold * top, distance=max(1, int(min_separation * sample_rate)))
    if idx.size == 0:
        raise SilentRecordingError("no impact peak above threshold")
    return idx / sample_rate


def bounce_duration(waveform: np.ndarray, exit_time: float | None, sample_rate: int) -> float:
    """Time from leaving the view (or the first impact, if later) to the last impact peak."""
    peaks = impact_peaks(waveform, sample_rate)
    start = peaks[0] if exit_time is None else max(peaks[0], exit_time)
    return max(0.0, float(peaks[-1] - start))


def resample_time(x: np.ndarray, target: int = COMPLETE_LEN, axis: int = 0) -> np.ndarray:
    """Adaptive average pooling of ``axis`` to exactly ``target`` steps."""
    x = np.asarray(x)
    T = x.shape[axis]
    if T < 1:
        raise ValueError("cannot resample an empty time axis")
    if T == target:
        return x
    P = pooling_matrix(T, target, x.dtype if x.dtype.kind == "f" else np.float64)
    moved = np.moveaxis(x, axis, -1)
    return np.moveaxis(moved @ P, -1, axis)
