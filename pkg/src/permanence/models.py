"""The fusion network and the five baselines it is compared against.

All trainable models map a batch to a (B, 135, 2) trajectory in normalized
coordinates (origin at the first observed point, axes negated).  Audio models
consume magnitude/phase spectrogram stacks laid out as (B, 1, T, F, 2C) so the
stacked-channel axis acts as a convolution depth.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .features import (
    COMPLETE_LEN,
    OBSERVED_LEN,
    POST_LEN,
    SilentRecordingError,
    StftConfig,
    bounce_duration,
    normalize_trajectory,
    stft_features,
)
from .tensor import (
    BatchNorm2d,
    BiGRU,
    Conv2d,
    Conv3d,
    Linear,
    LSTM,
    MaxPool2d,
    MaxPool3d,
    Module,
    ShapeError,
    Tensor,
    AdaptiveAvgPoolTime,
    concat,
    load_checkpoint,
    mlp,
    no_grad,
    save_checkpoint,
    stack,
)


class ModelKind(str, enum.Enum):
    MULTIMODAL = "multimodal"
    B1_LINEAR = "b1_linear"
    B2_DELAY_CNN = "b2_delay_cnn"
    B3_SOCIALGAN_LITE = "b3_socialgan_lite"
    B4_SELDNET_LITE = "b4_seldnet_lite"
    B5_COMBO = "b5_combo"

    @classmethod
    def parse(cls, name: str) -> "ModelKind":
        """Accepts the full value or the short prefix (``b1`` .. ``b5``)."""
        name = str(name).strip().lower()
        for kind in cls:
            if name == kind.value or name == kind.value.split("_")[0]:
                return kind
        raise ValueError(f"unknown model {name!r}; choose from {[k.value for k in cls]}")

    @property
    def uses_audio(self) -> bool:
        return self is not ModelKind.B3_SOCIALGAN_LITE

    @property
    def uses_observed(self) -> bool:
        return self in (ModelKind.MULTIMODAL, ModelKind.B1_LINEAR, ModelKind.B3_SOCIALGAN_LITE, ModelKind.B5_COMBO)

    @property
    def trainable(self) -> bool:
        return self is not ModelKind.B1_LINEAR


@dataclass
class PredictionResult:
    trajectory: np.ndarray  # (135, 2) normalized
    model: ModelKind
    trial_id: str | None = None

    def __post_init__(self):
        self.trajectory = np.asarray(self.trajectory, dtype=np.float64)
        if self.trajectory.shape != (COMPLETE_LEN, 2):
            raise ShapeError(f"prediction must be {COMPLETE_LEN}x2, got {self.trajectory.shape}")

    @property
    def end_location(self) -> np.ndarray:
        return self.trajectory[-1]


# -- hyperparameters ---------------------------------------------------------
@dataclass
class ModelConfig:
    """Input geometry and width settings a model is built from; saved with every checkpoint."""

    sample_rate: int = 8000
    n_samples: int = 24000
    window_length: int = 256
    channels: int = 7
    fps: int = 30
    filters: int = 64
    gru_hidden: int = 64
    magnitude_scale: float = 1.0

    @property
    def stft(self) -> StftConfig:
        return StftConfig(self.window_length)

    @property
    def n_bins(self) -> int:
        return self.window_length // 2

    @property
    def depth(self) -> int:
        return 2 * self.channels

    def to_dict(self) -> dict:
        return dict(vars(self))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @classmethod
    def for_manifest(cls, manifest, **overrides) -> "ModelConfig":
        window = 256 if manifest.preset == "desk" else 2048
        base = dict(
            sample_rate=manifest.sample_rate,
            n_samples=manifest.n_samples,
            window_length=window,
            channels=manifest.channels,
            fps=manifest.fps,
        )
        base.update(overrides)
        return cls(**base)


def freq_pool_sizes(n_bins: int, n_pools: int = 3) -> tuple[int, ...]:
    """Split a power-of-two bin count into ``n_pools`` factors, larger ones first."""
    if n_bins < 1 or n_bins & (n_bins - 1):
        raise ValueError(f"frequency bins must be a power of two, got {n_bins}")
    e = int(np.log2(n_bins))
    exps = [e // n_pools + (1 if i < e % n_pools else 0) for i in range(n_pools)]
    return tuple(2**x for x in exps)


# -- shared building blocks ---------------------------------------------------
class AudioEncoder(Module):
    """conv3d x4 with frequency max-pooling, time pooled to 135, two stacked biGRUs.

    (B, 1, T, F, D) -> (B, 135, 2H)
    """

    def __init__(self, cfg: ModelConfig, rng, dtype):
        f, D = cfg.filters, cfg.depth
        self.n_bins, self.depth = cfg.n_bins, D
        self.conv1 = Conv3d(1, f, (3, 3, D), padding=(1, 1, 0), rng=rng, dtype=dtype)
        self.conv2 = Conv3d(f, f, (3, 3, 1), padding=(1, 1, 0), rng=rng, dtype=dtype)
        self.conv3 = Conv3d(f, f, (3, 3, 1), padding=(1, 1, 0), rng=rng, dtype=dtype)
        self.conv4 = Conv3d(f, f, (3, 3, 1), padding=(1, 1, 0), rng=rng, dtype=dtype)
        self.pools = [MaxPool3d((1, p, 1)) for p in freq_pool_sizes(cfg.n_bins)]
        self.time_pool = AdaptiveAvgPoolTime(COMPLETE_LEN)
        self.gru1 = BiGRU(f, cfg.gru_hidden, rng=rng, dtype=dtype)
        self.gru2 = BiGRU(2 * cfg.gru_hidden, cfg.gru_hidden, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 5 or x.shape[1] != 1 or x.shape[3:] != (self.n_bins, self.depth):
            raise ShapeError(
                f"audio encoder: expected (B, 1, T, {self.n_bins}, {self.depth}) features, got {x.shape}"
            )
        # max-pool and ReLU commute; pooling first keeps the ReLU off full-resolution maps
        h = self.conv1(x)
        for conv, pool in zip((self.conv2, self.conv3, self.conv4), self.pools):
            h = conv(pool(h).relu())
        h = h.relu()
        B, C, T = h.shape[:3]
        h = self.time_pool(h.reshape(B, C, T)).transpose(0, 2, 1)
        return self.gru2(self.gru1(h))


class TrajectoryEncoder(Module):
    """Per-point embedding (2 -> 64) followed by an LSTM over the observed steps."""

    def __init__(self, rng, dtype, embed: int = 64, hidden: int = 64):
        self.embed = Linear(2, embed, rng=rng, dtype=dtype)
        self.lstm = LSTM(embed, hidden, rng=rng, dtype=dtype)

    def forward(self, observed: Tensor) -> tuple[Tensor, Tensor]:
        """Final (hidden, cell) states, each (B, hidden)."""
        hs, c = self.lstm.run(self.embed(observed).relu())
        return hs[:, -1], c


# -- trainable models --------------------------------------------------------
class Predictor(Module):
    kind: ModelKind

    def __init__(self, cfg: ModelConfig):
        self.config = cfg

    def forward(self, audio: Tensor | None, observed: Tensor | None) -> Tensor:
        raise NotImplementedError


class MultimodalNet(Predictor):
    kind = ModelKind.MULTIMODAL

    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        super().__init__(cfg)
        H2 = 2 * cfg.gru_hidden
        self.audio = AudioEncoder(cfg, rng, dtype)
        self.vision = mlp([2 * OBSERVED_LEN, 256, 1024, COMPLETE_LEN * H2], rng, dtype)
        self.fusion = mlp([2 * H2, 256, 256], rng, dtype, final_activation=True)
        self.head = mlp([256, 64, 16, 2], rng, dtype)

    def forward(self, audio, observed):
        a = self.audio(audio)
        B = a.shape[0]
        v = self.vision(observed.reshape(B, 2 * OBSERVED_LEN)).reshape(B, COMPLETE_LEN, -1)
        return self.head(self.fusion(concat([a, v], axis=-1)))


class SeldLite(Predictor):
    kind = ModelKind.B4_SELDNET_LITE

    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        super().__init__(cfg)
        self.audio = AudioEncoder(cfg, rng, dtype)
        self.head = mlp([2 * cfg.gru_hidden, 64, 16, 2], rng, dtype)

    def forward(self, audio, observed=None):
        return self.head(self.audio(audio))


class SocialLite(Predictor):
    """LSTM encoder/decoder that rolls out per-step displacements after the observed path."""

    kind = ModelKind.B3_SOCIALGAN_LITE

    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        super().__init__(cfg)
        self.encoder = TrajectoryEncoder(rng, dtype)
        self.h_bridge = Linear(64, 128, rng=rng, dtype=dtype)
        self.c_bridge = Linear(64, 128, rng=rng, dtype=dtype)
        self.dec_embed = Linear(2, 64, rng=rng, dtype=dtype)
        self.decoder = LSTM(64, 128, rng=rng, dtype=dtype)
        self.head = Linear(128, 2, rng=rng, dtype=dtype)

    def forward(self, audio, observed):
        h, c = self.encoder(observed)
        h, c = self.h_bridge(h), self.c_bridge(c)
        step = observed[:, -1] - observed[:, -2]
        pos = observed[:, -1]
        out = []
        for _ in range(POST_LEN):
            h, c = self.decoder.step(self.dec_embed(step).relu(), h, c)
            step = self.head(h)
            pos = pos + step
            out.append(pos)
        return concat([observed, stack(out, axis=1)], axis=1)


class ComboNet(Predictor):
    """Trajectory-encoder state and flattened audio GRU output through one linear layer."""

    kind = ModelKind.B5_COMBO

    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        super().__init__(cfg)
        H2 = 2 * cfg.gru_hidden
        self.audio = AudioEncoder(cfg, rng, dtype)
        self.encoder = TrajectoryEncoder(rng, dtype)
        self.out = Linear(64 + COMPLETE_LEN * H2, 2 * COMPLETE_LEN, rng=rng, dtype=dtype)

    def forward(self, audio, observed):
        a = self.audio(audio)
        B = a.shape[0]
        h, _ = self.encoder(observed)
        return self.out(concat([h, a.reshape(B, -1)], axis=-1)).reshape(B, COMPLETE_LEN, 2)


class DelayCnn(Predictor):
    """Raw waveform as an (N x 7) image through three conv/batchnorm/pool stages and an MLP."""

    kind = ModelKind.B2_DELAY_CNN
    kernels = ((16, 7), (8, 7), (4, 7))
    pool_sizes = ((8, 1), (8, 1), (4, 1))
    filters = 16

    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        super().__init__(cfg)
        self.channels = cfg.channels
        f = self.filters
        self.convs = [
            Conv2d(1 if i == 0 else f, f, k, padding=(0, k[1] // 2), rng=rng, dtype=dtype)
            for i, k in enumerate(self.kernels)
        ]
        self.norms = [BatchNorm2d(f, dtype=dtype) for _ in self.kernels]
        self.pools = [MaxPool2d(p) for p in self.pool_sizes]
        n = cfg.n_samples
        for k, p in zip(self.kernels, self.pool_sizes):
            n = (n - k[0] + 1) // p[0]
        if n < 1:
            raise ValueError(f"{cfg.n_samples} samples are too few for the delay CNN")
        self.flat = f * n * cfg.channels
        self.mlp = mlp([self.flat, 256, 2 * COMPLETE_LEN], rng, dtype)

    def forward(self, audio, observed=None):
        if audio.ndim != 4 or audio.shape[1] != 1 or audio.shape[3] != self.channels:
            raise ShapeError(f"delay cnn: expected (B, 1, N, {self.channels}) waveform, got {audio.shape}")
        h = audio
        for conv, norm, pool in zip(self.convs, self.norms, self.pools):
            h = pool(norm(conv(h)).relu())
        B = h.shape[0]
        return self.mlp(h.reshape(B, self.flat)).reshape(B, COMPLETE_LEN, 2)


_CLASSES = {
    ModelKind.MULTIMODAL: MultimodalNet,
    ModelKind.B2_DELAY_CNN: DelayCnn,
    ModelKind.B3_SOCIALGAN_LITE: SocialLite,
    ModelKind.B4_SELDNET_LITE: SeldLite,
    ModelKind.B5_COMBO: ComboNet,
}


# -- the parameter-free baseline ---------------------------------------------
def b1_end_point(last, prev, fps: float, t: float) -> np.ndarray:
    """Constant deceleration to rest over the bounce duration: ``P_f + v t / 2``.

    Written as the kinematic expression ``P_f + v t + a t^2 / 2`` with ``a = -v / t``.
    """
    last = np.asarray(last, dtype=np.float64)
    v = (last - np.asarray(prev, dtype=np.float64)) * fps
    if t <= 0:
        return last.copy()
    a = -v / t
    return last + v * t + 0.5 * a * t * t


def forward_b1(observed, waveform, exit_time, fps: int, sample_rate: int) -> PredictionResult:
    """Linear-motion baseline; works in raw or normalized coordinates alike."""
    observed = np.asarray(observed, dtype=np.float64)
    if observed.shape != (OBSERVED_LEN, 2):
        raise ShapeError(f"observed path must be {OBSERVED_LEN}x2, got {observed.shape}")
    try:
        t = bounce_duration(waveform, exit_time, sample_rate)
    except SilentRecordingError:
        t = 0.0
    end = b1_end_point(observed[-1], observed[-2], fps, t)
    frac = np.arange(1, POST_LEN + 1)[:, None] / POST_LEN
    post = observed[-1] + frac * (end - observed[-1])
    return PredictionResult(np.vstack([observed, post]), ModelKind.B1_LINEAR)


# -- inputs --------------------------------------------------------------------
def audio_tensor_features(waveform: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """(1, T, F, 2C) float32 spectrogram stack with magnitudes scaled by ``magnitude_scale``."""
    wave = np.atleast_2d(waveform)
    if wave.shape[0] != cfg.channels:
        raise ShapeError(f"expected {cfg.channels}-channel audio, got {wave.shape[0]} channels")
    feat = stft_features(wave, cfg.stft).astype(np.float32)
    feat[..., : cfg.channels] *= cfg.magnitude_scale
    return feat[None]


def observed_normalized(trial) -> np.ndarray:
    return normalize_trajectory(trial.observed)


def target_normalized(trial) -> np.ndarray:
    return normalize_trajectory(trial.complete)


def estimate_magnitude_scale(trials, cfg: ModelConfig, max_trials: int = 64) -> float:
    """Reciprocal RMS spectrogram magnitude over (a prefix of) ``trials``."""
    acc, n = 0.0, 0
    for t in trials[:max_trials]:
        mag = np.abs(stft_features(t.waveform, cfg.stft)[..., : cfg.channels])
        acc += float(np.sum(mag.astype(np.float64) ** 2))
        n += mag.size
    rms = np.sqrt(acc / max(n, 1))
    return 1.0 / rms if rms > 0 else 1.0


@dataclass
class Batch:
    audio: Tensor | None
    observed: Tensor | None
    target: Tensor
    ids: list


def make_batch(model: Predictor, trials, dtype=None, cache: dict | None = None) -> Batch:
    """Stack model inputs and normalized targets for ``trials``.

    ``cache`` (optional, caller-owned) memoizes unscaled spectrogram stacks per
    trial object across epochs.
    """
    cfg = model.config
    dtype = dtype or _model_dtype(model)
    kind = model.kind
    audio = observed = None
    if kind is ModelKind.B2_DELAY_CNN:
        audio = np.stack([np.asarray(t.waveform, dtype=dtype).T[None] for t in trials])
    elif kind.uses_audio:
        audio = np.stack([_cached_features(t, cfg, cache) for t in trials]).astype(dtype, copy=False)
        audio[..., : cfg.channels] *= cfg.magnitude_scale
    if kind.uses_observed:
        observed = np.stack([observed_normalized(t) for t in trials]).astype(dtype)
    target = np.stack([target_normalized(t) for t in trials]).astype(dtype)
    wrap = lambda a: None if a is None else Tensor(a)
    return Batch(wrap(audio), wrap(observed), Tensor(target), [t.id for t in trials])


def _cached_features(trial, cfg: ModelConfig, cache: dict | None) -> np.ndarray:
    unscaled = ModelConfig(**{**cfg.to_dict(), "magnitude_scale": 1.0})
    if cache is None:
        return audio_tensor_features(trial.waveform, unscaled)
    key = (id(trial), cfg.window_length)
    hit = cache.get(key)
    if hit is None or hit[0] is not trial:
        hit = cache[key] = (trial, audio_tensor_features(trial.waveform, unscaled))
    return hit[1]


def feature_bytes(cfg: ModelConfig) -> int:
    """Size of one trial's float32 spectrogram stack."""
    return 4 * cfg.stft.n_frames(cfg.n_samples) * cfg.n_bins * cfg.depth


def _model_dtype(model: Module):
    params = model.parameters()
    return params[0].dtype if params else np.float64


# -- construction and persistence ----------------------------------------------
class LinearBaseline(Predictor):
    """Parameter-free wrapper so B1 shares the predictor interface."""

    kind = ModelKind.B1_LINEAR

    def __init__(self, cfg: ModelConfig, rng=None, dtype=np.float64):
        super().__init__(cfg)

    def predict_trial(self, trial) -> PredictionResult:
        r = forward_b1(
            observed_normalized(trial), trial.waveform, trial.exit_time, self.config.fps, self.config.sample_rate
        )
        r.trial_id = trial.id
        return r


_CLASSES[ModelKind.B1_LINEAR] = LinearBaseline


def build_model(kind, cfg: ModelConfig | None = None, seed: int = 0, dtype=np.float32) -> Predictor:
    kind = ModelKind.parse(kind) if not isinstance(kind, ModelKind) else kind
    return _CLASSES[kind](cfg or ModelConfig(), np.random.default_rng(seed), dtype)


def predict(model: Predictor, trials, batch_size: int = 16, cache: dict | None = None) -> list[PredictionResult]:
    if isinstance(model, LinearBaseline):
        return [model.predict_trial(t) for t in trials]
    was_training = model.training
    model.eval()
    out = []
    try:
        with no_grad():
            for i in range(0, len(trials), batch_size):
                b = make_batch(model, trials[i : i + batch_size], cache=cache)
                pred = model(b.audio, b.observed).data
                out.extend(PredictionResult(p, model.kind, tid) for p, tid in zip(pred, b.ids))
    finally:
        model.train(was_training)
    return out


def save_model(path, model: Predictor, extra: dict | None = None) -> None:
    """Checkpoint with the model kind as identifier and config (plus ``extra``) as hyperparameters."""
    hyper = {"config": model.config.to_dict(), "dtype": np.dtype(_model_dtype(model)).name, "extra": extra or {}}
    save_checkpoint(path, model.kind.value, model.state_dict(), hyper)


def load_model_with_meta(path) -> tuple[Predictor, dict]:
    kind, hyper, tensors = load_checkpoint(path)
    cfg = ModelConfig.from_dict(hyper["config"])
    model = build_model(ModelKind.parse(kind), cfg, dtype=np.dtype(hyper["dtype"]))
    model.load_state_dict(tensors)
    return model, hyper.get("extra", {})


def load_model(path) -> Predictor:
    return load_model_with_meta(path)[0]
