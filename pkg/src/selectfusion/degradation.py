"""The seven sensor degradation operators and their application pipeline.

Vision-side corruptions act on the modality-A vector (occlusion zeroes a
contiguous window, blur smooths with a moving average plus salt-and-pepper
spikes, frame drop blanks the whole vector); inertial-side corruptions act
on the modality-B window (additive accelerometer noise with a fixed gyro
bias, window drop); cross-sensor corruptions rotate the inertial samples
(quasi-static calibration error, one rotation per episode) or shift the
flattened inertial stream against the frame boundaries.

Every operator leaves ground-truth poses untouched and records an
annotation on each affected frame so mask statistics can be joined against
corruption events. Dropped payloads are zero-filled with a cleared validity
flag so sequence lengths stay fixed.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np

from .simulator import Episode, SensorFrame

__all__ = [
    "MaxDegOutOfRange",
    "ShiftTooLarge",
    "DegradationSpec",
    "vision_degraded_spec",
    "all_degraded_spec",
    "occlude",
    "blur_noise",
    "drop_frames",
    "imu_noise_bias",
    "imu_drop",
    "spatial_misalign",
    "temporal_misalign",
    "rotate_inertial",
    "apply_degradations",
    "SPEC_PRESETS",
]

MISALIGN_CAP_DEG = 10.0


class MaxDegOutOfRange(ValueError):
    """Spatial misalignment limited to [0, 10] degrees."""


class ShiftTooLarge(ValueError):
    """Temporal shift exceeds the configured maximum."""


@dataclass(frozen=True)
class DegradationSpec:
    """Per-type enable probabilities and parameters.

    Probabilities are per frame for occlusion, blur, frame drop and
    inertial noise, per window for inertial drop, and per episode for the
    two misalignment types.
    """

    occlusion_prob: float = 0.0
    occlusion_fraction: float = 0.25
    blur_prob: float = 0.0
    blur_kernel_width: int = 5
    saltpepper_rate: float = 0.05
    frame_drop_prob: float = 0.0
    imu_noise_prob: float = 0.0
    accel_noise_sigma: float = 0.5
    gyro_bias: float = 0.2
    imu_drop_prob: float = 0.0
    spatial_prob: float = 0.0
    misalign_max_deg: float = 10.0
    temporal_prob: float = 0.0
    time_shift_max: int = 3
    seed: int = 0

    def __post_init__(self):
        for name in (
            "occlusion_prob",
            "blur_prob",
            "frame_drop_prob",
            "imu_noise_prob",
            "imu_drop_prob",
            "spatial_prob",
            "temporal_prob",
        ):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if not 0.0 <= self.misalign_max_deg <= MISALIGN_CAP_DEG:
            raise MaxDegOutOfRange(
                f"misalign_max_deg must be in [0, {MISALIGN_CAP_DEG}], got {self.misalign_max_deg}"
            )


def vision_degraded_spec(seed: int = 0, prob: float = 0.10) -> DegradationSpec:
    """Vision-side corruption only: occlusion, blur and frame drop."""
    return DegradationSpec(
        occlusion_prob=prob, blur_prob=prob, frame_drop_prob=prob, seed=seed
    )


def all_degraded_spec(seed: int = 0, prob: float = 0.05) -> DegradationSpec:
    """All seven corruption types enabled at the same probability."""
    return DegradationSpec(
        occlusion_prob=prob,
        blur_prob=prob,
        frame_drop_prob=prob,
        imu_noise_prob=prob,
        imu_drop_prob=prob,
        spatial_prob=prob,
        temporal_prob=prob,
        seed=seed,
    )


SPEC_PRESETS = {
    "vision-10pct": vision_degraded_spec,
    "all-5pct": all_degraded_spec,
}


def _copy_frame(frame: SensorFrame) -> SensorFrame:
    return SensorFrame(
        frame.modality_a.copy(), frame.modality_b.copy(), frame.a_valid, frame.b_valid
    )


def _copy_episode(episode: Episode) -> Episode:
    return Episode(
        [_copy_frame(f) for f in episode.frames],
        list(episode.gt_relative),
        list(episode.gt_global),
        episode.seed,
        copy.deepcopy(episode.degradations),
    )


def occlude(
    frame: SensorFrame, fraction: float, rng: np.random.Generator
) -> Tuple[SensorFrame, dict]:
    """Zero a random contiguous window covering `fraction` of modality A."""
    out = _copy_frame(frame)
    d = out.modality_a.shape[0]
    n_zero = int(np.ceil(fraction * d))
    start = 0
    if 0 < n_zero <= d:
        start = int(rng.integers(0, d - n_zero + 1))
        out.modality_a[start : start + n_zero] = 0.0
    return out, {"type": "occlusion", "start": start, "width": n_zero}


def blur_noise(
    frame: SensorFrame,
    kernel_width: int,
    saltpepper_rate: float,
    rng: np.random.Generator,
) -> Tuple[SensorFrame, dict]:
    """Moving-average smoothing (zero padded) plus salt-and-pepper spikes."""
    out = _copy_frame(frame)
    v = out.modality_a
    if kernel_width > 1:
        kernel = np.ones(kernel_width) / kernel_width
        v = np.convolve(v, kernel, mode="same")
    n_spikes = 0
    if saltpepper_rate > 0:
        hits = rng.uniform(size=v.shape[0]) < saltpepper_rate
        n_spikes = int(hits.sum())
        if n_spikes:
            peak = float(np.max(np.abs(v))) if v.size else 0.0
            signs = rng.choice([-1.0, 1.0], size=n_spikes)
            v[hits] = signs * peak
    out.modality_a = v
    return out, {"type": "blur", "kernel_width": kernel_width, "spikes": n_spikes}


def _drop_frame_a(frame: SensorFrame) -> SensorFrame:
    out = _copy_frame(frame)
    out.modality_a[:] = 0.0
    out.a_valid = False
    return out


def _drop_frame_b(frame: SensorFrame) -> SensorFrame:
    out = _copy_frame(frame)
    out.modality_b[:] = 0.0
    out.b_valid = False
    return out


def drop_frames(episode: Episode, p: float, rng: Optional[np.random.Generator] = None) -> Episode:
    """Independently blank modality A of each frame with probability p."""
    if rng is None:
        rng = np.random.default_rng(episode.seed)
    out = _copy_episode(episode)
    for t, frame in enumerate(out.frames):
        if rng.uniform() < p:
            out.frames[t] = _drop_frame_a(frame)
            out.degradations[t].append({"type": "frame_drop"})
    return out


def imu_noise_bias(
    frame: SensorFrame,
    accel_sigma: float,
    gyro_bias: np.ndarray,
    rng: np.random.Generator,
) -> Tuple[SensorFrame, dict]:
    """White noise on the accelerometer channels, fixed bias on the gyro."""
    out = _copy_frame(frame)
    window = out.modality_b.shape[0]
    bias = np.asarray(gyro_bias, dtype=np.float64).reshape(3)
    out.modality_b[:, :3] += bias
    if accel_sigma > 0:
        out.modality_b[:, 3:] += accel_sigma * rng.normal(size=(window, 3))
    return out, {"type": "imu_noise", "sigma": accel_sigma, "bias": bias.tolist()}


def imu_drop(episode: Episode, p: float, rng: Optional[np.random.Generator] = None) -> Episode:
    """Blank whole inertial windows with probability p each."""
    if rng is None:
        rng = np.random.default_rng(episode.seed)
    out = _copy_episode(episode)
    for t, frame in enumerate(out.frames):
        if rng.uniform() < p:
            out.frames[t] = _drop_frame_b(frame)
            out.degradations[t].append({"type": "imu_drop"})
    return out


def _rotation_matrix(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64).reshape(3)
    axis = axis / np.linalg.norm(axis)
    k = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    return np.eye(3) + np.sin(angle_rad) * k + (1 - np.cos(angle_rad)) * (k @ k)


def rotate_inertial(episode: Episode, axis: np.ndarray, angle_deg: float) -> Episode:
    """Rotate every gyro and accelerometer sample vector by one rotation."""
    rot = _rotation_matrix(axis, np.radians(angle_deg))
    out = _copy_episode(episode)
    for frame in out.frames:
        frame.modality_b[:, :3] = frame.modality_b[:, :3] @ rot.T
        frame.modality_b[:, 3:] = frame.modality_b[:, 3:] @ rot.T
    return out


def spatial_misalign(
    episode: Episode, max_deg: float, rng: Optional[np.random.Generator] = None
) -> Episode:
    """One random rotation (uniform axis, uniform angle up to max_deg) per episode."""
    if not 0.0 <= max_deg <= MISALIGN_CAP_DEG:
        raise MaxDegOutOfRange(f"max_deg must be in [0, {MISALIGN_CAP_DEG}], got {max_deg}")
    if rng is None:
        rng = np.random.default_rng(episode.seed)
    axis = rng.normal(size=3)
    while np.linalg.norm(axis) < 1e-12:
        axis = rng.normal(size=3)
    angle = float(rng.uniform(0.0, max_deg))
    out = rotate_inertial(episode, axis, angle)
    note = {"type": "spatial_misalign", "angle_deg": angle, "axis": (axis / np.linalg.norm(axis)).tolist()}
    for t in range(out.n_frames):
        out.degradations[t].append(dict(note))
    return out


def temporal_misalign(episode: Episode, k: int, max_shift: Optional[int] = None) -> Episode:
    """Shift the flattened inertial stream by k samples against frame boundaries.

    Positive k delays the stream (window t receives earlier samples);
    samples shifted past the boundary are zero-padded.
    """
    if max_shift is not None and abs(k) > max_shift:
        raise ShiftTooLarge(f"|k|={abs(k)} exceeds the maximum shift {max_shift}")
    out = _copy_episode(episode)
    windows = np.stack([f.modality_b for f in out.frames])
    n, m, ch = windows.shape
    stream = windows.reshape(n * m, ch)
    shifted = np.zeros_like(stream)
    if k >= 0:
        if k < len(stream):
            shifted[k:] = stream[: len(stream) - k]
    else:
        if -k < len(stream):
            shifted[:k] = stream[-k:]
    rewound = shifted.reshape(n, m, ch)
    for t, frame in enumerate(out.frames):
        frame.modality_b = rewound[t].copy()
        out.degradations[t].append({"type": "temporal_misalign", "shift": int(k)})
    return out


def apply_degradations(episode: Episode, spec: DegradationSpec) -> Episode:
    """Roll the spec's dice against one episode; deterministic per (episode, spec).

    Types are applied in a fixed order: occlusion, blur, frame drop,
    inertial noise+bias, inertial drop, spatial misalignment, temporal
    misalignment.
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, episode.seed]))
    out = _copy_episode(episode)

    for t in range(out.n_frames):
        if spec.occlusion_prob > 0 and rng.uniform() < spec.occlusion_prob:
            out.frames[t], note = occlude(out.frames[t], spec.occlusion_fraction, rng)
            out.degradations[t].append(note)
        if spec.blur_prob > 0 and rng.uniform() < spec.blur_prob:
            out.frames[t], note = blur_noise(
                out.frames[t], spec.blur_kernel_width, spec.saltpepper_rate, rng
            )
            out.degradations[t].append(note)
        if spec.frame_drop_prob > 0 and rng.uniform() < spec.frame_drop_prob:
            out.frames[t] = _drop_frame_a(out.frames[t])
            out.degradations[t].append({"type": "frame_drop"})

    if spec.imu_noise_prob > 0:
        bias_axis = rng.normal(size=3)
        bias_axis /= np.linalg.norm(bias_axis)
        bias = spec.gyro_bias * bias_axis
        for t in range(out.n_frames):
            if rng.uniform() < spec.imu_noise_prob:
                out.frames[t], note = imu_noise_bias(
                    out.frames[t], spec.accel_noise_sigma, bias, rng
                )
                out.degradations[t].append(note)
    if spec.imu_drop_prob > 0:
        for t in range(out.n_frames):
            if rng.uniform() < spec.imu_drop_prob:
                out.frames[t] = _drop_frame_b(out.frames[t])
                out.degradations[t].append({"type": "imu_drop"})
    if spec.spatial_prob > 0 and rng.uniform() < spec.spatial_prob:
        out = spatial_misalign(out, spec.misalign_max_deg, rng)
    if spec.temporal_prob > 0 and rng.uniform() < spec.temporal_prob:
        k = 0
        while k == 0:
            k = int(rng.integers(-spec.time_shift_max, spec.time_shift_max + 1))
        out = temporal_misalign(out, k, spec.time_shift_max)
    return out
