"""Experiment orchestration: model assembly, training, evaluation, and
mask-statistics collection.

A model is encoder(s) -> fusion -> temporal recurrence -> pose regressor,
wired per the configured fusion mode; single-modality baselines skip the
fusion stage and feed the lone feature vector forward. Training unrolls
the temporal model over episode batches with truncated backpropagation and
per-segment Adam updates; hard fusion anneals its resampling temperature
once per epoch.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .fusion import (
    DirectFusion,
    FusionMask,
    HardFusion,
    SoftFusion,
    TemperatureSchedule,
    anneal,
)
from .geometry import (
    GlobalPose,
    MetricsAccumulator,
    RelativePose,
    global_pose_loss,
    integrate_relative,
    quat_normalize,
    relative_pose_loss,
    relative_rmse,
    segment_drift,
)
from .nn import (
    BidirectionalEncoder,
    FeedForwardEncoder,
    ParameterStore,
    TemporalRegressor,
    adam_step,
)
from .simulator import Episode, read_dataset

__all__ = [
    "InvalidConfig",
    "DatasetMissing",
    "DivergedLoss",
    "DimensionMismatch",
    "JoinMismatch",
    "FUSION_MODES",
    "TASKS",
    "ExperimentConfig",
    "load_config",
    "save_config",
    "config_digest",
    "FusionModel",
    "build_model",
    "load_splits",
    "TrainResult",
    "EvalResult",
    "train",
    "evaluate",
    "run_experiment",
    "mask_report",
    "TURN_BUCKETS",
    "SPEED_BUCKETS",
]

FUSION_MODES = ("none-a", "none-b", "direct", "soft", "hard")
TASKS = ("relative-odometry", "global-relocalization")

# Inertial channels are rescaled to O(1) before the recurrent encoder:
# gyro saturates near the 5 rad/s profile ceiling, accelerations near
# 20 m/s^2.
INERTIAL_SCALE = np.array([0.2, 0.2, 0.2, 0.05, 0.05, 0.05])

TURN_BUCKETS = (0.05, 0.15, 0.3)  # |yaw| rad/frame bucket edges
SPEED_BUCKETS = (0.5, 1.0, 1.5)  # translation m/frame bucket edges


class InvalidConfig(ValueError):
    def __init__(self, fld: str, message: str):
        super().__init__(f"{fld}: {message}")
        self.field = fld


class DatasetMissing(FileNotFoundError):
    pass


class DivergedLoss(RuntimeError):
    pass


class DimensionMismatch(ValueError):
    pass


class JoinMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "relative-odometry"
    fusion: str = "direct"
    d: int = 64
    encoder_hidden: Tuple[int, ...] = (64, 64)
    inertial_hidden: int = 32
    temporal_hidden: int = 64
    lam_global: float = 10.0
    lam_relative: float = 100.0
    squared_norm: bool = True
    batch_size: int = 16
    lr: float = 1e-4
    epochs: int = 50
    tbptt: int = 20
    tau_start: float = 1.0
    tau_end: float = 0.5
    shared_class_logits: bool = True
    eval_samples: int = 5
    data_dir: str = "data"
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise InvalidConfig("task", f"{self.task!r} not in {TASKS}")
        if self.fusion not in FUSION_MODES:
            raise InvalidConfig("fusion", f"{self.fusion!r} not in {FUSION_MODES}")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size", "must be >= 1")
        if self.epochs < 1:
            raise InvalidConfig("epochs", "must be >= 1")
        if self.tbptt < 1:
            raise InvalidConfig("tbptt", "must be >= 1")
        if self.d < 1:
            raise InvalidConfig("d", "must be >= 1")
        if self.eval_samples < 1:
            raise InvalidConfig("eval_samples", "must be >= 1")
        if not self.tau_start >= self.tau_end > 0:
            raise InvalidConfig("tau_end", "need tau_start >= tau_end > 0")

    @property
    def output_dim(self) -> int:
        return 6 if self.task == "relative-odometry" else 7


_SECTIONS = {
    "experiment": ("task", "fusion", "seed"),
    "model": ("d", "encoder_hidden", "inertial_hidden", "temporal_hidden", "shared_class_logits"),
    "training": (
        "batch_size",
        "lr",
        "epochs",
        "tbptt",
        "tau_start",
        "tau_end",
        "eval_samples",
    ),
    "loss": ("lam_global", "lam_relative", "squared_norm"),
    "data": ("data_dir",),
}


def save_config(path, config: ExperimentConfig) -> None:
    parser = configparser.ConfigParser()
    for section, keys in _SECTIONS.items():
        parser[section] = {}
        for key in keys:
            value = getattr(config, key)
            if key == "encoder_hidden":
                value = ",".join(str(v) for v in value)
            parser[section][key] = str(value)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        parser.write(fh)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise DatasetMissing(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    parser.read(path)
    kwargs: dict = {}
    for section, keys in _SECTIONS.items():
        if section not in parser:
            continue
        for key in keys:
            if key not in parser[section]:
                continue
            raw = parser[section][key]
            if key == "encoder_hidden":
                kwargs[key] = tuple(int(v) for v in raw.split(",") if v.strip())
            elif key in ("task", "fusion", "data_dir"):
                kwargs[key] = raw
            elif key in ("squared_norm", "shared_class_logits"):
                kwargs[key] = raw.strip().lower() in ("1", "true", "yes", "on")
            elif key in ("lr", "tau_start", "tau_end", "lam_global", "lam_relative"):
                kwargs[key] = float(raw)
            else:
                kwargs[key] = int(raw)
    return ExperimentConfig(**kwargs)


def config_to_dict(config: ExperimentConfig) -> dict:
    payload = {k: getattr(config, k) for keys in _SECTIONS.values() for k in keys}
    payload["encoder_hidden"] = list(config.encoder_hidden)
    return payload


def config_from_dict(payload: dict) -> ExperimentConfig:
    kwargs = dict(payload)
    kwargs["encoder_hidden"] = tuple(kwargs.get("encoder_hidden", ()))
    return ExperimentConfig(**kwargs)


def config_digest(config: ExperimentConfig) -> str:
    blob = json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


class FusionModel:
    """Encoders, fusion stage, and temporal regressor for one configuration."""

    def __init__(self, config: ExperimentConfig, d_a: int, window: int):
        self.config = config
        self.d_a = d_a
        self.window = window
        d = config.d
        self.enc_a = (
            FeedForwardEncoder("enc_a", d_a, config.encoder_hidden, d)
            if config.fusion != "none-b"
            else None
        )
        self.enc_b = (
            BidirectionalEncoder("enc_b", 6, config.inertial_hidden, d)
            if config.fusion != "none-a"
            else None
        )
        if config.fusion == "direct":
            self.fusion = DirectFusion(d)
        elif config.fusion == "soft":
            self.fusion = SoftFusion("fusion", d)
        elif config.fusion == "hard":
            self.fusion = HardFusion("fusion", d, shared_logits=config.shared_class_logits)
        else:
            self.fusion = None
        fused_dim = self.fusion.out_dim if self.fusion is not None else d
        self.temporal = TemporalRegressor("temporal", fused_dim, config.temporal_hidden, config.output_dim)

    def init_params(self, seed: Optional[int] = None) -> ParameterStore:
        rng = np.random.default_rng(
            np.random.SeedSequence([self.config.seed if seed is None else seed, 4])
        )
        store = ParameterStore()
        if self.enc_a is not None:
            self.enc_a.init_into(store, rng)
        if self.enc_b is not None:
            self.enc_b.init_into(store, rng)
        if self.fusion is not None:
            self.fusion.init_into(store, rng)
        self.temporal.init_into(store, rng)
        return store

    def check_store(self, store: ParameterStore) -> None:
        expected = self.init_params(0)
        if expected.names() != store.names():
            raise DimensionMismatch(
                f"checkpoint parameters {store.names()} do not match model {expected.names()}"
            )
        for name in expected.names():
            if expected.arrays[name].shape != store.arrays[name].shape:
                raise DimensionMismatch(
                    f"{name}: checkpoint shape {store.arrays[name].shape} "
                    f"!= model shape {expected.arrays[name].shape}"
                )

    def zero_state(self, batch: int):
        return self.temporal.zero_state(batch)

    def forward_frame(
        self,
        params: Dict[str, Tensor],
        frame_a: Tensor,
        frame_b: Tensor,
        state,
        tau: float = 1.0,
        rng: Optional[np.random.Generator] = None,
        noise: Optional[np.ndarray] = None,
        straight_through: bool = True,
    ):
        """One time step. Returns (raw output, next state, FusionMask or None)."""
        mask = None
        if self.enc_a is not None:
            a1 = self.enc_a.apply(params, frame_a)
        if self.enc_b is not None:
            a2 = self.enc_b.apply(params, ad.mul(frame_b, INERTIAL_SCALE))
        if self.fusion is None:
            z = a1 if self.config.fusion == "none-a" else a2
        else:
            z, mask = self.fusion.fuse(
                params,
                a1,
                a2,
                tau=tau,
                rng=rng,
                noise=noise,
                straight_through=straight_through,
            )
        y, state = self.temporal.step(params, z, state)
        return y, state, mask

    def frame_loss(self, y: Tensor, target: np.ndarray) -> Tensor:
        if self.config.task == "relative-odometry":
            return relative_pose_loss(
                y, target, self.config.lam_relative, self.config.squared_norm
            )
        return global_pose_loss(y, target, self.config.lam_global)


def build_model(config: ExperimentConfig, d_a: int, window: int) -> FusionModel:
    return FusionModel(config, d_a, window)


def _stack_frames(episodes: Sequence[Episode]) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    n = episodes[0].n_frames
    for ep in episodes:
        if ep.n_frames != n:
            raise DimensionMismatch("episodes in one batch must share their length")
    frames_a = [np.stack([ep.frames[t].modality_a for ep in episodes]) for t in range(n)]
    frames_b = [np.stack([ep.frames[t].modality_b for ep in episodes]) for t in range(n)]
    return frames_a, frames_b


def _targets(episodes: Sequence[Episode], task: str) -> List[np.ndarray]:
    n = episodes[0].n_frames
    if task == "relative-odometry":
        return [
            np.stack([ep.gt_relative[t - 1].as_vector() for ep in episodes])
            for t in range(1, n)
        ]
    return [
        np.stack([ep.gt_global[t].normalized().as_vector() for ep in episodes])
        for t in range(1, n)
    ]


def load_splits(data_dir) -> Dict[str, Tuple[dict, List[Episode]]]:
    """Load train/val/test datasets, asserting split disjointness."""
    data_dir = Path(data_dir)
    splits: Dict[str, Tuple[dict, List[Episode]]] = {}
    for name in ("train", "val", "test"):
        path = data_dir / f"{name}.jsonl"
        if not path.exists():
            raise DatasetMissing(f"dataset file not found: {path}")
        splits[name] = read_dataset(path)
    seen: Dict[int, str] = {}
    for name, (_, episodes) in splits.items():
        for ep in episodes:
            if ep.seed in seen:
                raise InvalidConfig(
                    "data_dir",
                    f"episode id {ep.seed} appears in both {seen[ep.seed]!r} and {name!r} splits",
                )
            seen[ep.seed] = name
    return splits


def _dataset_dims(header: dict) -> Tuple[int, int]:
    cfg = header.get("config", {})
    try:
        return int(cfg["d_a"]), int(cfg["window"])
    except KeyError as err:
        raise DimensionMismatch(f"dataset header misses dimension field {err}") from err


@dataclass
class TrainResult:
    config: ExperimentConfig
    final_store: ParameterStore
    best_store: ParameterStore
    best_epoch: int
    epoch_rows: List[dict]


@dataclass
class EvalResult:
    task: str
    fusion: str
    t_rmse: float
    r_rmse: float
    t_rmse_std: float
    r_rmse_std: float
    drift_t: Optional[float]
    drift_r: Optional[float]
    selection_a: Optional[float]
    selection_b: Optional[float]
    mask_rows: List[dict] = field(default_factory=list)
    prediction_rows: List[dict] = field(default_factory=list)

    def metric_items(self) -> List[Tuple[str, float]]:
        items = [
            ("t_rmse", self.t_rmse),
            ("r_rmse", self.r_rmse),
            ("t_rmse_std", self.t_rmse_std),
            ("r_rmse_std", self.r_rmse_std),
        ]
        if self.drift_t is not None:
            items += [("drift_t_pct", self.drift_t), ("drift_r_deg_per_100m", self.drift_r)]
        if self.selection_a is not None:
            items.append(("selection_a", self.selection_a))
        if self.selection_b is not None:
            items.append(("selection_b", self.selection_b))
        return items


def _batch_indices(n: int, batch_size: int) -> List[np.ndarray]:
    order = np.arange(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def train(config: ExperimentConfig, log=None) -> TrainResult:
    """Train per the config; returns final and best-validation parameter stores."""
    splits = load_splits(config.data_dir)
    header, train_eps = splits["train"]
    _, val_eps = splits["val"]
    d_a, window = _dataset_dims(header)
    model = build_model(config, d_a, window)
    store = model.init_params()
    schedule = TemperatureSchedule(config.tau_start, config.tau_end, config.epochs)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 5]))
    noise_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 6]))

    previous_checked = ad.set_checked(False)
    try:
        best_loss = np.inf
        best_store = store.clone()
        best_epoch = 0
        epoch_rows: List[dict] = []
        for epoch in range(config.epochs):
            tau = anneal(epoch, schedule)
            order = shuffle_rng.permutation(len(train_eps))
            loss_sum = 0.0
            frame_count = 0
            for batch_id, batch in enumerate(_batch_indices(len(train_eps), config.batch_size)):
                episodes = [train_eps[i] for i in order[batch]]
                frames_a, frames_b = _stack_frames(episodes)
                targets = _targets(episodes, config.task)
                n_steps = len(targets)
                state = model.zero_state(len(episodes))
                for seg_start in range(0, n_steps, config.tbptt):
                    seg = range(seg_start, min(seg_start + config.tbptt, n_steps))
                    with Tape() as tape:
                        params = store.bind(tape)
                        h, c = state
                        state = (ad.tensor(h.values), ad.tensor(c.values))
                        total = None
                        for t in seg:
                            y, state, _ = model.forward_frame(
                                params,
                                ad.tensor(frames_a[t + 1]),
                                ad.tensor(frames_b[t + 1]),
                                state,
                                tau=tau,
                                rng=noise_rng,
                            )
                            step_loss = model.frame_loss(y, targets[t])
                            total = step_loss if total is None else ad.add(total, step_loss)
                        seg_loss = ad.mul(total, 1.0 / len(seg))
                        value = seg_loss.item()
                        if not np.isfinite(value):
                            raise DivergedLoss(
                                f"non-finite loss in epoch {epoch}, batch {batch_id}"
                            )
                        tape.backward(seg_loss)
                        grads = {name: tape.gradient(leaf) for name, leaf in params.items()}
                    adam_step(store, grads, lr=config.lr)
                    loss_sum += value * len(seg)
                    frame_count += len(seg)
                    state = (
                        ad.stop_gradient(state[0]),
                        ad.stop_gradient(state[1]),
                    )
            train_loss = loss_sum / max(frame_count, 1)
            val_loss = _validation_loss(model, store, val_eps, config)
            if val_loss < best_loss:
                best_loss = val_loss
                best_store = store.clone()
                best_epoch = epoch
            epoch_rows.append(
                {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "tau": tau}
            )
            if log is not None:
                log(f"epoch {epoch}: train_loss={train_loss:.6f} val_loss={val_loss:.6f} tau={tau:.3f}")
    finally:
        ad.set_checked(previous_checked)
    return TrainResult(config, store, best_store, best_epoch, epoch_rows)


def _validation_loss(model: FusionModel, store: ParameterStore, episodes, config) -> float:
    """Mean per-frame task loss over the validation split, fixed noise seed."""
    if not episodes:
        return np.inf
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7]))
    params = store.bind(None)
    total = 0.0
    count = 0
    for batch in _batch_indices(len(episodes), config.batch_size):
        eps = [episodes[i] for i in batch]
        frames_a, frames_b = _stack_frames(eps)
        targets = _targets(eps, config.task)
        state = model.zero_state(len(eps))
        for t, target in enumerate(targets):
            y, state, _ = model.forward_frame(
                params,
                ad.tensor(frames_a[t + 1]),
                ad.tensor(frames_b[t + 1]),
                state,
                tau=config.tau_end,
                rng=rng,
            )
            total += model.frame_loss(y, target).item()
            count += 1
    return total / max(count, 1)


def _global_errors(pred: np.ndarray, target: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Position error vectors and quaternion geodesic angles (rad)."""
    p_err = target[:, :3] - pred[:, :3]
    angles = []
    for row_pred, row_gt in zip(pred, target):
        q = quat_normalize(row_pred[3:])
        dot = abs(float(np.dot(q, row_gt[3:])))
        angles.append(2.0 * np.arccos(min(dot, 1.0)))
    return p_err, np.asarray(angles)


def _eval_single_pass(
    model: FusionModel,
    params: Dict[str, Tensor],
    episodes: Sequence[Episode],
    config: ExperimentConfig,
    rng: np.random.Generator,
    collect_rows: bool,
):
    """One deterministic forward sweep over the episodes."""
    mask_rows: List[dict] = []
    prediction_rows: List[dict] = []
    acc = MetricsAccumulator()
    global_p_sq: List[float] = []
    global_r_sq: List[float] = []
    drift_t_values: List[float] = []
    drift_r_values: List[float] = []

    for batch in _batch_indices(len(episodes), max(config.batch_size, 1)):
        eps = [episodes[i] for i in batch]
        frames_a, frames_b = _stack_frames(eps)
        targets = _targets(eps, config.task)
        state = model.zero_state(len(eps))
        preds = np.zeros((len(targets), len(eps), config.output_dim))
        for t, target in enumerate(targets):
            y, state, mask = model.forward_frame(
                params,
                ad.tensor(frames_a[t + 1]),
                ad.tensor(frames_b[t + 1]),
                state,
                tau=config.tau_end,
                rng=rng,
            )
            preds[t] = y.values
            if collect_rows:
                _append_mask_rows(mask_rows, model, mask, eps, t + 1)
        for b, ep in enumerate(eps):
            if config.task == "relative-odometry":
                gt_vecs = np.stack([rel.as_vector() for rel in ep.gt_relative])
                acc.add_batch(preds[:, b, :], gt_vecs)
                pred_rels = [RelativePose(row[:3], row[3:]) for row in preds[:, b, :]]
                pred_traj = integrate_relative(pred_rels, ep.gt_global[0])
                try:
                    d_t, d_r = segment_drift(ep.gt_global, pred_traj)
                    drift_t_values.append(d_t)
                    drift_r_values.append(d_r)
                except Exception:
                    pass
                if collect_rows:
                    for t in range(len(ep.gt_relative)):
                        prediction_rows.append(
                            _prediction_row(ep.seed, t + 1, preds[t, b, :], gt_vecs[t])
                        )
            else:
                gt_vecs = np.stack(
                    [pose.normalized().as_vector() for pose in ep.gt_global[1:]]
                )
                p_err, angles = _global_errors(preds[:, b, :], gt_vecs)
                global_p_sq.extend(np.sum(p_err * p_err, axis=1).tolist())
                global_r_sq.extend((angles**2).tolist())
                if collect_rows:
                    for t in range(len(gt_vecs)):
                        prediction_rows.append(
                            _prediction_row(ep.seed, t + 1, preds[t, b, :], gt_vecs[t])
                        )

    if config.task == "relative-odometry":
        t_rmse, r_rmse = relative_rmse(acc)
        drift_t = float(np.mean(drift_t_values)) if drift_t_values else None
        drift_r = float(np.mean(drift_r_values)) if drift_r_values else None
    else:
        t_rmse = float(np.sqrt(np.mean(global_p_sq)))
        r_rmse = float(np.degrees(np.sqrt(np.mean(global_r_sq))))
        drift_t = drift_r = None
    return t_rmse, r_rmse, drift_t, drift_r, mask_rows, prediction_rows


def _append_mask_rows(rows, model, mask: Optional[FusionMask], eps, frame: int) -> None:
    if mask is not None:
        rate_a, rate_b = mask.selection_rates()
        rate_a = np.atleast_1d(rate_a)
        rate_b = np.atleast_1d(rate_b)
        for b, ep in enumerate(eps):
            rows.append(
                {"episode": ep.seed, "frame": frame, "modality": "a", "rate": float(rate_a[b])}
            )
            rows.append(
                {"episode": ep.seed, "frame": frame, "modality": "b", "rate": float(rate_b[b])}
            )
    else:
        modality = "a" if model.config.fusion == "none-a" else "b"
        for ep in eps:
            rows.append({"episode": ep.seed, "frame": frame, "modality": modality, "rate": 1.0})


def _prediction_row(episode: int, frame: int, pred: np.ndarray, gt: np.ndarray) -> dict:
    row = {"episode": episode, "frame": frame}
    for i, v in enumerate(pred):
        row[f"pred_{i}"] = float(v)
    for i, v in enumerate(gt):
        row[f"gt_{i}"] = float(v)
    return row


def evaluate(
    model: FusionModel,
    store: ParameterStore,
    episodes: Sequence[Episode],
    config: Optional[ExperimentConfig] = None,
    eval_seed: int = 0,
) -> EvalResult:
    """Forward-only metrics over a dataset; no parameter updates.

    Hard fusion keeps sampling binary masks at the final temperature:
    metrics are reported as mean and standard deviation over
    ``config.eval_samples`` independently seeded passes, and mask logs come
    from the first pass. Other fusion modes need a single pass.
    """
    config = config or model.config
    model.check_store(store)
    params = store.bind(None)
    n_passes = config.eval_samples if config.fusion == "hard" else 1
    t_values, r_values = [], []
    drift_t = drift_r = None
    mask_rows: List[dict] = []
    prediction_rows: List[dict] = []
    for s in range(n_passes):
        rng = np.random.default_rng(np.random.SeedSequence([eval_seed, 8, s]))
        t_rmse, r_rmse, d_t, d_r, masks, preds = _eval_single_pass(
            model, params, episodes, config, rng, collect_rows=(s == 0)
        )
        t_values.append(t_rmse)
        r_values.append(r_rmse)
        if s == 0:
            drift_t, drift_r = d_t, d_r
            mask_rows = masks
            prediction_rows = preds
    sel_a = _mean_rate(mask_rows, "a")
    sel_b = _mean_rate(mask_rows, "b")
    return EvalResult(
        task=config.task,
        fusion=config.fusion,
        t_rmse=float(np.mean(t_values)),
        r_rmse=float(np.mean(r_values)),
        t_rmse_std=float(np.std(t_values)),
        r_rmse_std=float(np.std(r_values)),
        drift_t=drift_t,
        drift_r=drift_r,
        selection_a=sel_a,
        selection_b=sel_b,
        mask_rows=mask_rows,
        prediction_rows=prediction_rows,
    )


def _mean_rate(rows: List[dict], modality: str) -> Optional[float]:
    values = [row["rate"] for row in rows if row["modality"] == modality]
    return float(np.mean(values)) if values else None


def mask_report(mask_rows: Sequence[dict], episodes: Sequence[Episode]) -> List[dict]:
    """Selection-rate tables joined against episode annotations and motion.

    Returns tidy rows (table, bucket, modality, rate_mean, n): one table per
    degradation type (plus "clean"), one per turn-rate bucket, one per
    speed bucket.
    """
    by_seed = {ep.seed: ep for ep in episodes}
    groups: Dict[Tuple[str, str, str], List[float]] = {}

    def put(table: str, bucket: str, modality: str, rate: float) -> None:
        groups.setdefault((table, bucket, modality), []).append(rate)

    for row in mask_rows:
        ep = by_seed.get(row["episode"])
        if ep is None:
            raise JoinMismatch(f"mask row references unknown episode {row['episode']}")
        frame = int(row["frame"])
        if not 0 <= frame < ep.n_frames:
            raise JoinMismatch(f"mask row references frame {frame} outside episode {ep.seed}")
        modality = row["modality"]
        rate = float(row["rate"])
        notes = ep.degradations[frame]
        if notes:
            for note in {n["type"] for n in notes}:
                put("degradation", note, modality, rate)
        else:
            put("degradation", "clean", modality, rate)
        motion = (
            ep.gt_relative[frame - 1].as_vector() if frame >= 1 else np.zeros(6)
        )
        turn = abs(float(motion[5]))
        speed = float(np.linalg.norm(motion[:3]))
        put("turn_rate", _bucket_label(turn, TURN_BUCKETS, "rad_per_frame"), modality, rate)
        put("speed", _bucket_label(speed, SPEED_BUCKETS, "m_per_frame"), modality, rate)

    out = []
    for (table, bucket, modality), values in sorted(groups.items()):
        out.append(
            {
                "table": table,
                "bucket": bucket,
                "modality": modality,
                "rate_mean": float(np.mean(values)),
                "n": len(values),
            }
        )
    return out


def _bucket_label(value: float, edges: Sequence[float], unit: str) -> str:
    lo = 0.0
    for edge in edges:
        if value < edge:
            return f"[{lo:g},{edge:g}) {unit}"
        lo = edge
    return f">={lo:g} {unit}"


def run_experiment(config: ExperimentConfig, run_dir, log=None, eval_seed: int = 0):
    """Train, evaluate the best checkpoint on the test split, write artifacts.

    Run directory layout: config.ini, checkpoints/{final,best}.ckpt,
    metrics.csv (per-epoch rows plus test metrics), masks.csv,
    predictions.csv.
    """
    from . import reporting

    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(run_dir / "config.ini", config)
    result = train(config, log=log)
    meta = {
        "config": config_to_dict(config),
        "config_digest": config_digest(config),
        "best_epoch": result.best_epoch,
    }
    save_checkpoint(run_dir / "checkpoints" / "final.ckpt", result.final_store, meta)
    save_checkpoint(run_dir / "checkpoints" / "best.ckpt", result.best_store, meta)

    splits = load_splits(config.data_dir)
    header, test_eps = splits["test"]
    d_a, window = _dataset_dims(header)
    model = build_model(config, d_a, window)
    eval_result = evaluate(model, result.best_store, test_eps, config, eval_seed=eval_seed)

    metric_rows = [
        {"phase": "train", "epoch": row["epoch"], "metric": key, "value": row[key]}
        for row in result.epoch_rows
        for key in ("train_loss", "val_loss", "tau")
    ]
    metric_rows += [
        {"phase": "test", "epoch": "", "metric": key, "value": value}
        for key, value in eval_result.metric_items()
    ]
    reporting.write_csv(run_dir / "metrics.csv", ["phase", "epoch", "metric", "value"], metric_rows)
    reporting.write_csv(
        run_dir / "masks.csv", ["episode", "frame", "modality", "rate"], eval_result.mask_rows
    )
    if eval_result.prediction_rows:
        reporting.write_csv(
            run_dir / "predictions.csv",
            list(eval_result.prediction_rows[0].keys()),
            eval_result.prediction_rows,
        )
    report_rows = mask_report(eval_result.mask_rows, test_eps) if eval_result.mask_rows else []
    if report_rows:
        reporting.write_csv(
            run_dir / "mask_report.csv",
            ["table", "bucket", "modality", "rate_mean", "n"],
            report_rows,
        )
    return result, eval_result
