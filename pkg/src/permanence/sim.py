"""Synthetic drop trials: top-down bounce paths and multichannel impact audio.

The object falls from ``release_height``, bounces with a random coefficient of
restitution at each impact, and receives a horizontal kick proportional to the
impact energy whose direction is the current heading plus a uniform random
perturbation.  Once the rebound height drops below ``min_bounce_height`` it
slides to rest under constant friction deceleration.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

PRESETS = {
    "desk": {"sample_rate": 8000, "window": 256},
    "paper": {"sample_rate": 48000, "window": 2048},
}


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    release_height: float = 0.30
    object_kind: str = "cube"
    restitution_range: tuple[float, float] = (0.35, 0.6)
    kick_scale: float = 17.0  # m/s per joule of vertical impact energy
    horizontal_retention: float = 0.6
    direction_spread: float = 0.6  # half-width of the uniform heading perturbation, radians
    friction_decel: float = 2.0
    gravity: float = 9.81
    mass: float = 0.016
    min_bounce_height: float = 0.002
    initial_speed: float = 0.1  # max gripper-induced horizontal speed at release
    release_jitter: float = 0.005
    table_bounds: tuple[float, float, float, float] = (-0.6, 0.6, -0.45, 0.45)
    fov: tuple[float, float] = (0.35, 0.25)
    require_exit: bool = True
    fps: int = 30
    duration: float = 3.0
    sample_rate: int = 8000
    snr_db: float | None = 30.0
    source_gain: float = 1.0
    f0_center: float = 1800.0
    seed: int = 0
    max_retries: int = 200

    def __post_init__(self):
        lo, hi = self.restitution_range
        if not (0.0 < lo <= hi < 1.0):
            raise ValueError(f"restitution_range must satisfy 0 < lo <= hi < 1, got {self.restitution_range}")
        if self.release_height <= 0:
            raise ValueError("release_height must be positive")
        if self.object_kind not in ("cube", "triangle"):
            raise ValueError(f"object_kind must be 'cube' or 'triangle', got {self.object_kind!r}")
        if self.fps <= 0 or self.duration <= 0 or self.sample_rate <= 0:
            raise ValueError("fps, duration and sample_rate must be positive")
        if int(round(self.duration * self.fps)) < 6:
            raise ValueError("duration * fps must cover at least 6 frames")
        xmin, xmax, ymin, ymax = self.table_bounds
        if not (xmin < 0 < xmax and ymin < 0 < ymax):
            raise ValueError("table_bounds must contain the release point (origin)")
        if self.friction_decel <= 0 or self.gravity <= 0 or self.mass <= 0:
            raise ValueError("friction_decel, gravity and mass must be positive")
        if self.snr_db is not None and not np.isfinite(self.snr_db):
            raise ValueError("snr_db must be finite or None (noiseless)")

    @property
    def n_frames(self) -> int:
        return int(round(self.duration * self.fps))

    @property
    def n_samples(self) -> int:
        return int(round(self.duration * self.sample_rate))

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)


def make_config(preset: str = "desk", object_kind: str = "cube", height: float | None = None, **overrides) -> SimConfig:
    """Config for a named preset; the triangle block is a lighter, quieter cube."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}")
    kw: dict = {"sample_rate": PRESETS[preset]["sample_rate"], "object_kind": object_kind}
    if object_kind == "triangle":
        base = SimConfig()
        kw.update(
            mass=base.mass / 2,
            direction_spread=base.direction_spread * 1.5,
            source_gain=10 ** (-6 / 20),
            f0_center=2400.0,
        )
    if height is not None:
        kw["release_height"] = height
    kw.update(overrides)
    return SimConfig(**kw)


@dataclass(frozen=True)
class ImpactEvent:
    time: float
    position: tuple[float, float]
    energy: float  # kinetic energy of the vertical motion at impact, joules


@dataclass(frozen=True)
class MicArrayGeometry:
    positions: np.ndarray = field(default_factory=lambda: default_mic_positions())
    speed_of_sound: float = 343.0
    sample_rate: int = 8000

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        if pos.shape != (7, 3):
            raise ValueError(f"microphone array needs exactly 7 (x, y, z) positions, got {pos.shape}")
        d = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
        if np.any(d[np.triu_indices(7, 1)] <= 0):
            raise ValueError("microphone positions must be pairwise distinct")
        object.__setattr__(self, "positions", pos)

    def distances(self, point_xy) -> np.ndarray:
        src = np.array([point_xy[0], point_xy[1], 0.0])
        return np.linalg.norm(self.positions - src, axis=1)


def default_mic_positions(center=(0.0, 1.0, 0.2), radius: float = 0.04) -> np.ndarray:
    """Six microphones on a horizontal circle plus one in the middle."""
    ang = np.arange(6) * np.pi / 3
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang), np.zeros(6)], axis=1)
    return np.vstack([np.zeros((1, 3)), ring]) + np.asarray(center)


@dataclass
class RawTrial:
    path: np.ndarray  # (K, 2) metres, sampled at fps
    times: np.ndarray  # (K,) seconds from release
    impacts: list[ImpactEvent]
    waveform: np.ndarray  # (7, N) float32
    end_location: np.ndarray  # (2,)
    exit_index: int | None  # first frame outside the wrist-camera footprint
    exit_time: float | None
    seed: int = 0

    @property
    def full_path(self) -> list[tuple[tuple[float, float], float]]:
        return [((float(p[0]), float(p[1])), float(t)) for p, t in zip(self.path, self.times)]


@dataclass
class _Motion:
    """Piecewise horizontal motion: constant-velocity flights, then a decelerating slide."""

    starts: list[float]
    origins: list[np.ndarray]
    velocities: list[np.ndarray]
    slide_start: float
    slide_origin: np.ndarray
    slide_velocity: np.ndarray
    stop_time: float
    rest: np.ndarray
    decel: float

    def position(self, t: float) -> np.ndarray:
        if t >= self.stop_time:
            return self.rest
        if t >= self.slide_start:
            dt = t - self.slide_start
            speed = np.linalg.norm(self.slide_velocity)
            unit = self.slide_velocity / speed
            return self.slide_origin + unit * (speed * dt - 0.5 * self.decel * dt * dt)
        k = int(np.searchsorted(self.starts, t, side="right")) - 1
        return self.origins[k] + self.velocities[k] * (t - self.starts[k])

    def waypoints(self) -> np.ndarray:
        return np.array(self.origins + [self.slide_origin, self.rest])


def _simulate_motion(cfg: SimConfig, rng: np.random.Generator) -> tuple[_Motion, list[ImpactEvent]]:
    g, m = cfg.gravity, cfg.mass
    jitter = rng.normal(0.0, cfg.release_jitter, size=2) if cfg.release_jitter > 0 else np.zeros(2)
    speed0 = rng.uniform(0.0, cfg.initial_speed) if cfg.initial_speed > 0 else 0.0
    ang0 = rng.uniform(0.0, 2 * np.pi)
    v = speed0 * np.array([np.cos(ang0), np.sin(ang0)])
    p = jitter
    t = 0.0
    starts, origins, vels = [0.0], [p.copy()], [v.copy()]

    fall = np.sqrt(2 * cfg.release_height / g)
    t += fall
    p = p + v * fall
    vz = g * fall
    impacts: list[ImpactEvent] = []
    lo, hi = cfg.restitution_range
    while True:
        energy = 0.5 * m * vz * vz
        impacts.append(ImpactEvent(float(t), (float(p[0]), float(p[1])), float(energy)))
        e = rng.uniform(lo, hi)
        vz_up = e * vz
        speed = np.hypot(*v)
        heading = np.arctan2(v[1], v[0]) if speed > 1e-9 else rng.uniform(0.0, 2 * np.pi)
        heading += rng.uniform(-cfg.direction_spread, cfg.direction_spread)
        kick = cfg.kick_scale * energy
        v = cfg.horizontal_retention * v + kick * np.array([np.cos(heading), np.sin(heading)])
        if vz_up * vz_up / (2 * g) < cfg.min_bounce_height:
            break
        flight = 2 * vz_up / g
        starts.append(t)
        origins.append(p.copy())
        vels.append(v.copy())
        t += flight
        p = p + v * flight
        vz = vz_up

    speed = np.hypot(*v)
    if speed > 0:
        stop = t + speed / cfg.friction_decel
        rest = p + v / speed * (speed * speed / (2 * cfg.friction_decel))
    else:
        stop, rest = t, p.copy()
    motion = _Motion(starts, origins, vels, t, p.copy(), v.copy(), stop, rest, cfg.friction_decel)
    return motion, impacts


def _inside(points: np.ndarray, half_w: float, half_h: float, center=(0.0, 0.0)) -> np.ndarray:
    return (np.abs(points[:, 0] - center[0]) <= half_w) & (np.abs(points[:, 1] - center[1]) <= half_h)


def _attempt(cfg: SimConfig, trial_seed: int, attempt: int) -> RawTrial | None:
    phys_ss, ac_ss = np.random.SeedSequence([trial_seed, attempt]).spawn(2)
    rng = np.random.default_rng(phys_ss)
    motion, impacts = _simulate_motion(cfg, rng)

    n = cfg.n_frames
    if motion.stop_time > (n - 5) / cfg.fps:
        return None  # still moving within the last five frames
    times = np.arange(n) / cfg.fps
    path = np.array([motion.position(t) for t in times])
    xmin, xmax, ymin, ymax = cfg.table_bounds
    pts = np.vstack([path, motion.waypoints()])
    if np.any((pts[:, 0] < xmin) | (pts[:, 0] > xmax) | (pts[:, 1] < ymin) | (pts[:, 1] > ymax)):
        return None  # fell off the table

    in_view = _inside(path, cfg.fov[0] / 2, cfg.fov[1] / 2)
    outside = np.flatnonzero(~in_view)
    exit_index = int(outside[0]) if outside.size else None
    if exit_index is None and cfg.require_exit:
        return None

    geom = MicArrayGeometry(sample_rate=cfg.sample_rate)
    wave = synth_impact_audio(
        impacts, geom, int(ac_ss.generate_state(1)[0]),
        duration=cfg.duration, snr_db=cfg.snr_db,
        f0_center=cfg.f0_center, source_gain=cfg.source_gain,
    )
    return RawTrial(
        path=path,
        times=times,
        impacts=impacts,
        waveform=wave,
        end_location=path[-1].copy(),
        exit_index=exit_index,
        exit_time=None if exit_index is None else exit_index / cfg.fps,
        seed=trial_seed,
    )


def simulate_trial(cfg: SimConfig, trial_seed: int) -> RawTrial:
    """Simulate one accepted drop; rejected attempts are resampled on sub-seeds."""
    for attempt in range(cfg.max_retries):
        trial = _attempt(cfg, int(trial_seed), attempt)
        if trial is not None:
            return trial
    raise SimulationError(
        f"no acceptable trial after {cfg.max_retries} attempts (seed {trial_seed}); "
        "the object never comes to rest on the table with this configuration"
    )


def trial_seeds(master_seed: int, n: int) -> list[int]:
    """Independent per-trial seeds from one master seed (SeedSequence spawning)."""
    children = np.random.SeedSequence(master_seed).spawn(n)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]


def generate_dataset(cfg: SimConfig, n: int, master_seed: int) -> list[RawTrial]:
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    return [simulate_trial(cfg, s) for s in trial_seeds(master_seed, n)]


def synth_impact_audio(
    impacts: list[ImpactEvent],
    geom: MicArrayGeometry,
    acoustics_seed: int,
    duration: float = 3.0,
    snr_db: float | None = 30.0,
    f0_center: float = 1800.0,
    source_gain: float = 1.0,
    decay: float = 0.010,
) -> np.ndarray:
    """Damped-sinusoid impact sounds received by each microphone.

    Each impact emits ``sqrt(E) * exp(-t/decay) * sin(2 pi f0 t)``; microphone j
    hears it delayed by distance / c and scaled by 1 / max(distance, 0.1 m).
    Noise standard deviation is the clean peak amplitude times 10**(-snr_db/20);
    ``snr_db=None`` gives noiseless output.  Samples are clipped to [-1, 1].
    """
    if snr_db is not None and not np.isfinite(snr_db):
        raise ValueError(f"invalid SNR {snr_db}")
    rng = np.random.default_rng(acoustics_seed)
    sr = geom.sample_rate
    n = int(round(duration * sr))
    out = np.zeros((7, n))
    span = int(np.ceil(12 * decay * sr))
    for imp in impacts:
        f0 = f0_center * (1.0 + 0.05 * rng.standard_normal())
        amp0 = source_gain * np.sqrt(imp.energy)
        dist = geom.distances(imp.position)
        for j in range(7):
            arrive = imp.time + dist[j] / geom.speed_of_sound
            first = int(np.ceil(arrive * sr))
            if first >= n:
                continue
            idx = np.arange(first, min(first + span, n))
            t = idx / sr - arrive
            out[j, idx] += amp0 / max(dist[j], 0.1) * np.exp(-t / decay) * np.sin(2 * np.pi * f0 * t)
    if snr_db is not None:
        peak = np.max(np.abs(out)) if impacts else 1e-3
        out += rng.normal(0.0, peak * 10 ** (-snr_db / 20), size=out.shape)
    return np.clip(out, -1.0, 1.0).astype(np.float32)
