"""Synthetic two-modality odometry episodes with exact ground truth.

Trajectories are planar (yaw-only) SE(3) paths sampled from simple motion
profiles. Each transition is observed twice: modality A is a fixed random
linear mixing of the 6-D relative motion plus white noise ("visual-like"),
modality B is a window of gyro/accelerometer samples derived from
finite-difference rates plus bias and white noise ("inertial-like").
Frame 0 is a boot frame observing zero motion so that an episode carries
one observation per pose and one relative transform per consecutive pair.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import GlobalPose, RelativePose, integrate_relative

__all__ = [
    "BadProfile",
    "FRAME_DT",
    "DEFAULT_D_A",
    "DEFAULT_WINDOW",
    "MOTION_PROFILES",
    "NoiseConfig",
    "SensorFrame",
    "Episode",
    "generate_trajectory",
    "make_mixing",
    "render_observations",
    "generate_episode",
    "generate_dataset",
    "write_dataset",
    "read_dataset",
    "DATASET_FORMAT",
    "DATASET_VERSION",
]

FRAME_DT = 0.1  # seconds per frame (10 Hz frames, 100 Hz inertial samples)
DEFAULT_D_A = 32
DEFAULT_WINDOW = 10
MOTION_PROFILES = ("constant-velocity", "piecewise-turns", "random-smooth")

DATASET_FORMAT = "selectfusion-dataset"
DATASET_VERSION = 1


class BadProfile(ValueError):
    """Unknown motion profile name."""


@dataclass(frozen=True)
class NoiseConfig:
    """Observation noise: appearance sigma, inertial sigma, fixed gyro bias."""

    sigma_a: float = 0.01
    sigma_b: float = 0.01
    gyro_bias: Tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass
class SensorFrame:
    """One time step of both modalities plus per-modality validity flags."""

    modality_a: np.ndarray  # (D_A,)
    modality_b: np.ndarray  # (m, 6) gyro xyz rad/s then accel xyz m/s^2
    a_valid: bool = True
    b_valid: bool = True


@dataclass
class Episode:
    frames: List[SensorFrame]
    gt_relative: List[RelativePose]
    gt_global: List[GlobalPose]
    seed: int
    degradations: List[List[dict]] = field(default_factory=list)

    def __post_init__(self):
        if not self.degradations:
            self.degradations = [[] for _ in self.frames]
        if len(self.gt_relative) != len(self.frames) - 1:
            raise ValueError(
                f"episode needs |frames|-1 relative poses, got {len(self.gt_relative)} "
                f"for {len(self.frames)} frames"
            )

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def motion_vectors(self) -> np.ndarray:
        """(n_frames, 6) motion observed by each frame; zeros for the boot frame."""
        rows = [np.zeros(6)]
        rows += [rel.as_vector() for rel in self.gt_relative]
        return np.stack(rows)


def _speed_yaw_profile(rng: np.random.Generator, length: int, profile: str):
    """Per-transition (speed m/frame, yaw-rate rad/frame) arrays."""
    n = length - 1
    if profile == "constant-velocity":
        return np.full(n, 1.0), np.zeros(n)
    if profile == "piecewise-turns":
        speed = np.empty(n)
        yaw = np.empty(n)
        i = 0
        turning = False
        while i < n:
            span = int(rng.integers(8, 20))
            seg_speed = float(rng.uniform(0.5, 1.5))
            seg_yaw = float(rng.uniform(0.1, 0.4) * rng.choice([-1.0, 1.0])) if turning else 0.0
            stop = min(i + span, n)
            speed[i:stop] = seg_speed
            yaw[i:stop] = seg_yaw
            turning = not turning
            i = stop
        return speed, yaw
    if profile == "random-smooth":
        speed = np.empty(n)
        yaw = np.empty(n)
        v, w = 1.0, 0.0
        for i in range(n):
            v = float(np.clip(v + 0.1 * rng.normal(), 0.0, 2.0))
            w = float(np.clip(0.9 * w + 0.08 * rng.normal(), -0.5, 0.5))
            speed[i] = v
            yaw[i] = w
        return speed, yaw
    raise BadProfile(f"unknown motion profile {profile!r}; choose from {MOTION_PROFILES}")


def generate_trajectory(
    seed: int, length: int, motion_profile: str = "random-smooth"
) -> Tuple[List[GlobalPose], List[RelativePose]]:
    """Ground-truth pose sequence of `length` frames starting at the identity."""
    if length < 2:
        raise ValueError(f"trajectory length must be >= 2, got {length}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    speed, yaw = _speed_yaw_profile(rng, length, motion_profile)
    rels = [
        RelativePose(
            np.array([v * np.cos(w), v * np.sin(w), 0.0]), np.array([0.0, 0.0, w])
        )
        for v, w in zip(speed, yaw)
    ]
    return integrate_relative(rels, GlobalPose.identity()), rels


def make_mixing(seed: int, d_a: int = DEFAULT_D_A) -> np.ndarray:
    """Fixed dataset-level mixing matrix from motion space into modality A."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    return rng.normal(size=(d_a, 6)) / np.sqrt(6.0)


def render_observations(
    gt_global: Sequence[GlobalPose],
    gt_relative: Sequence[RelativePose],
    seed: int,
    noise: NoiseConfig = NoiseConfig(),
    mixing: Optional[np.ndarray] = None,
    window: int = DEFAULT_WINDOW,
) -> Episode:
    """Render both modalities for a trajectory.

    Modality A of frame t is ``mixing @ motion_t`` plus white noise, where
    motion_t is the 6-D relative motion ending at frame t. Modality B holds
    `window` samples per frame: angular rate interpolated linearly from the
    previous transition's rate to the current one, and body acceleration as
    the finite difference of per-transition velocities (held constant over
    the window, matching linear velocity interpolation). The gyro bias is
    added to every sample. There is no gravity term.
    """
    if window < 1:
        raise ValueError("window must hold at least one sample")
    n = len(gt_global)
    if len(gt_relative) != n - 1:
        raise ValueError("need one relative pose per consecutive frame pair")
    if mixing is None:
        mixing = make_mixing(seed)
    d_a = mixing.shape[0]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    bias = np.asarray(noise.gyro_bias, dtype=np.float64).reshape(3)

    motions = np.zeros((n, 6))
    for t, rel in enumerate(gt_relative, start=1):
        motions[t] = rel.as_vector()
    rates = motions[:, 3:] / FRAME_DT  # rad/s, zero at the boot frame
    velocities = motions[:, :3] / FRAME_DT  # m/s in the local frame
    accels = np.zeros((n, 3))
    accels[1:] = (velocities[1:] - velocities[:-1]) / FRAME_DT

    frames: List[SensorFrame] = []
    fractions = (np.arange(window) + 1.0) / window
    for t in range(n):
        obs_a = mixing @ motions[t]
        if noise.sigma_a > 0:
            obs_a = obs_a + noise.sigma_a * rng.normal(size=d_a)
        prev_rate = rates[t - 1] if t >= 1 else np.zeros(3)
        gyro = prev_rate + np.outer(fractions, rates[t] - prev_rate) + bias
        accel = np.tile(accels[t], (window, 1))
        obs_b = np.concatenate([gyro, accel], axis=1)
        if noise.sigma_b > 0:
            obs_b = obs_b + noise.sigma_b * rng.normal(size=(window, 6))
        frames.append(SensorFrame(obs_a, obs_b))
    return Episode(frames, list(gt_relative), list(gt_global), seed)


def generate_episode(
    dataset_seed: int,
    index: int,
    length: int,
    motion_profile: str = "random-smooth",
    noise: NoiseConfig = NoiseConfig(),
    mixing: Optional[np.ndarray] = None,
    window: int = DEFAULT_WINDOW,
) -> Episode:
    """Deterministic episode for (dataset_seed, index)."""
    episode_seed = int(
        np.random.SeedSequence([dataset_seed, 3, index]).generate_state(1)[0]
    )
    gt_global, gt_relative = generate_trajectory(episode_seed, length, motion_profile)
    return render_observations(gt_global, gt_relative, episode_seed, noise, mixing, window)


def generate_dataset(
    seed: int,
    n_episodes: int,
    length: int = 100,
    motion_profile: str = "random-smooth",
    noise: NoiseConfig = NoiseConfig(),
    d_a: int = DEFAULT_D_A,
    window: int = DEFAULT_WINDOW,
    start_index: int = 0,
) -> List[Episode]:
    mixing = make_mixing(seed, d_a)
    return [
        generate_episode(seed, start_index + i, length, motion_profile, noise, mixing, window)
        for i in range(n_episodes)
    ]


def _episode_to_record(episode: Episode) -> dict:
    return {
        "seed": episode.seed,
        "frames": [
            {
                "a": frame.modality_a.tolist(),
                "b": frame.modality_b.tolist(),
                "a_valid": frame.a_valid,
                "b_valid": frame.b_valid,
            }
            for frame in episode.frames
        ],
        "rel": [rel.as_vector().tolist() for rel in episode.gt_relative],
        "glob": [pose.as_vector().tolist() for pose in episode.gt_global],
        "degradations": episode.degradations,
    }


def _episode_from_record(record: dict) -> Episode:
    frames = [
        SensorFrame(
            np.asarray(f["a"], dtype=np.float64),
            np.asarray(f["b"], dtype=np.float64),
            bool(f["a_valid"]),
            bool(f["b_valid"]),
        )
        for f in record["frames"]
    ]
    rels = [RelativePose(np.asarray(v[:3]), np.asarray(v[3:])) for v in record["rel"]]
    globs = [GlobalPose(np.asarray(v[:3]), np.asarray(v[3:])) for v in record["glob"]]
    return Episode(frames, rels, globs, int(record["seed"]), record["degradations"])


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_dataset(path, episodes: Sequence[Episode], config: Optional[dict] = None) -> str:
    """JSON-lines dataset: header line, then one episode per line.

    Returns the SHA-256 digest of the file contents.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "config": config or {}}
    lines = [_dumps(header)]
    lines += [_dumps(_episode_to_record(ep)) for ep in episodes]
    blob = ("\n".join(lines) + "\n").encode("utf-8")
    path.write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def read_dataset(path) -> Tuple[dict, List[Episode]]:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != DATASET_FORMAT:
            raise ValueError(f"{path}: not a {DATASET_FORMAT} file")
        if header.get("version") != DATASET_VERSION:
            raise ValueError(f"{path}: unsupported dataset version {header.get('version')}")
        episodes = [_episode_from_record(json.loads(line)) for line in fh if line.strip()]
    return header, episodes
