"""Deep-ensemble training, aggregation, and the baseline systems.

The proposed system averages B independently initialized CNNs with equal
weights. Baselines: a standalone CNN (a one-member ensemble with zero
variance everywhere) and an SNR-aware weighted ensemble whose members train
on per-SNR sub-bands and are combined with Shannon-entropy weights.
"""

from __future__ import annotations

import json
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nncore
from .dataset import SignalDataset
from .errors import CorruptHeaderError, DivergenceError, VersionMismatchError
from .nncore import LayerSpec, ModelParams, TrainConfig
from .seeding import derive_seed
from .siggen import IQFrame

ENSEMBLE_FORMAT = "amcens-ensemble"
ENSEMBLE_VERSION = 1


@dataclass(frozen=True)
class CIConfig:
    """Two-sided Gaussian interval config; z_alpha is the 1 - alpha/2 quantile."""

    alpha: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")

    @property
    def z_alpha(self) -> float:
        return statistics.NormalDist().inv_cdf(1.0 - self.alpha / 2.0)


@dataclass
class EnsembleModel:
    members: list[ModelParams]
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if len(self.members) < 1:
            raise ValueError("need at least one member")
        if self.weights.shape != (len(self.members),):
            raise ValueError("one weight per member required")
        if np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must sum to 1")

    @property
    def n_members(self) -> int:
        return len(self.members)


@dataclass
class EnsemblePrediction:
    """Per-member probabilities plus their weighted mean and sample variance."""

    member_probs: np.ndarray  # (B, C)
    mean_probs: np.ndarray  # (C,)
    per_class_variance: np.ndarray  # (C,)

    @property
    def n_members(self) -> int:
        return self.member_probs.shape[0]

    @property
    def predicted_class(self) -> int:
        # np.argmax already breaks ties toward the lowest index
        return int(np.argmax(self.mean_probs))


@dataclass
class BatchPrediction:
    """Vectorized form of EnsemblePrediction over a stack of frames."""

    member_probs: np.ndarray  # (B, N, C)
    mean_probs: np.ndarray  # (N, C)
    per_class_variance: np.ndarray  # (N, C)

    @property
    def n_members(self) -> int:
        return self.member_probs.shape[0]

    def single(self, i: int) -> EnsemblePrediction:
        return EnsemblePrediction(
            self.member_probs[:, i, :],
            self.mean_probs[i],
            self.per_class_variance[i],
        )


def _aggregate(member_probs: np.ndarray, weights: np.ndarray):
    """Weighted mean over the member axis plus unbiased per-class variance."""
    mean = np.tensordot(weights, member_probs, axes=([0], [0]))
    b = member_probs.shape[0]
    if b > 1:
        var = member_probs.var(axis=0, ddof=1)
    else:
        var = np.zeros_like(member_probs[0])
    return mean, var


def _member_seeds(master_seed: int, b: int) -> tuple[int, int]:
    return derive_seed(master_seed, b, 0), derive_seed(master_seed, b, 1)


def _train_one(
    specs: Sequence[LayerSpec],
    X: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    init_seed: int,
    shuffle_seed: int,
    precision: str,
) -> ModelParams:
    params = nncore.init_params(specs, init_seed, precision)
    member_cfg = replace(cfg, shuffle_seed=shuffle_seed)
    trained, _ = nncore.train_arrays(params, X, y, member_cfg)
    return trained


def train_members_arrays(
    X: np.ndarray,
    y: np.ndarray,
    specs: Sequence[LayerSpec],
    n_members: int,
    cfg: TrainConfig,
    master_seed: int,
    precision: str = "f32",
    workers: int = 1,
) -> list[ModelParams]:
    """Train B members with seeds derived from (master_seed, member index)."""
    if n_members < 1:
        raise ValueError("need at least one member")
    jobs = [_member_seeds(master_seed, b) for b in range(n_members)]

    def run(b: int) -> ModelParams:
        init_seed, shuffle_seed = jobs[b]
        try:
            return _train_one(specs, X, y, cfg, init_seed, shuffle_seed, precision)
        except DivergenceError as exc:
            raise DivergenceError(f"member {b}: {exc}") from exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, range(n_members)))
    return [run(b) for b in range(n_members)]


def train_ensemble(
    train_set: SignalDataset,
    n_members: int,
    cfg: TrainConfig,
    master_seed: int,
    specs: Sequence[LayerSpec] | None = None,
    precision: str = "f32",
    workers: int = 1,
) -> EnsembleModel:
    """Equal-weight deep ensemble of identically architected CNNs."""
    if specs is None:
        specs = nncore.desk_architecture(train_set.frame_length, train_set.n_classes)
    X, y = train_set.as_xy()
    members = train_members_arrays(
        X, y, specs, n_members, cfg, master_seed, precision, workers
    )
    return EnsembleModel(members, np.full(n_members, 1.0 / n_members))


def train_weighted_ensemble(
    train_set: SignalDataset,
    n_members: int,
    cfg: TrainConfig,
    master_seed: int,
    specs: Sequence[LayerSpec] | None = None,
    precision: str = "f32",
    workers: int = 1,
) -> EnsembleModel:
    """SNR-aware baseline: member b trains only on the b-th SNR sub-band and
    members are weighted by their Shannon entropy on the full training set."""
    if specs is None:
        specs = nncore.desk_architecture(train_set.frame_length, train_set.n_classes)
    snrs = train_set.snr_values()
    if n_members > len(snrs):
        raise ValueError(
            f"cannot partition {len(snrs)} SNR levels into {n_members} sub-bands"
        )
    bands = np.array_split(np.asarray(snrs), n_members)

    def run(b: int) -> ModelParams:
        init_seed, shuffle_seed = _member_seeds(master_seed, b)
        mask = np.isin(train_set.snrs_db, bands[b])
        sub = train_set.subset(np.flatnonzero(mask))
        X, y = sub.as_xy()
        try:
            return _train_one(specs, X, y, cfg, init_seed, shuffle_seed, precision)
        except DivergenceError as exc:
            raise DivergenceError(f"member {b}: {exc}") from exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            members = list(pool.map(run, range(n_members)))
    else:
        members = [run(b) for b in range(n_members)]
    weights = entropy_weights(members, train_set)
    return EnsembleModel(members, weights)


def entropy_weights(
    members: Sequence[ModelParams], calibration_set: SignalDataset
) -> np.ndarray:
    """Weights proportional to (ln C - mean prediction entropy) per member.

    A member that always outputs the uniform distribution carries zero
    weight; if every member does, fall back to uniform weights.
    """
    if len(calibration_set) == 0:
        raise ValueError("empty calibration set")
    X, _ = calibration_set.as_xy()
    n_classes = calibration_set.n_classes
    h_max = np.log(n_classes)
    scores = np.empty(len(members))
    for b, member in enumerate(members):
        probs = nncore.forward_batch(member, X)
        p = np.clip(probs, nncore.PROB_CLIP, 1.0)
        mean_entropy = float(-(p * np.log(p)).sum(axis=1).mean())
        scores[b] = max(h_max - mean_entropy, 0.0)
    total = scores.sum()
    if total <= 0.0:
        return np.full(len(members), 1.0 / len(members))
    return scores / total


def _frame_samples(frame) -> np.ndarray:
    return frame.samples if isinstance(frame, IQFrame) else np.asarray(frame)


def predict(ens: EnsembleModel, frame) -> EnsemblePrediction:
    """Aggregate member softmax outputs for one frame."""
    x = _frame_samples(frame)
    member_probs = np.stack(
        [nncore.forward_batch(m, x[None])[0] for m in ens.members]
    ).astype(np.float64)
    mean, var = _aggregate(member_probs, ens.weights)
    return EnsemblePrediction(member_probs, mean, var)


def predict_batch(ens: EnsembleModel, X: np.ndarray) -> BatchPrediction:
    member_probs = np.stack(
        [nncore.forward_batch(m, X) for m in ens.members]
    ).astype(np.float64)
    mean, var = _aggregate(member_probs, ens.weights)
    return BatchPrediction(member_probs, mean, var)


def predict_single(model: ModelParams, frame) -> EnsemblePrediction:
    """Standalone-CNN baseline wrapper: a B=1 prediction with zero variance,
    so the same metric pipeline applies (all CI widths are zero)."""
    x = _frame_samples(frame)
    probs = nncore.forward_batch(model, x[None])[0].astype(np.float64)
    return EnsemblePrediction(probs[None], probs.copy(), np.zeros_like(probs))


def predict_single_batch(model: ModelParams, X: np.ndarray) -> BatchPrediction:
    probs = nncore.forward_batch(model, X).astype(np.float64)
    return BatchPrediction(probs[None], probs.copy(), np.zeros_like(probs))


def ci_bounds(pred: EnsemblePrediction, cfg: CIConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-class closed intervals mean +- z_alpha * sqrt(S^2 / B); may extend
    beyond [0, 1]."""
    half = cfg.z_alpha * np.sqrt(pred.per_class_variance / pred.n_members)
    return pred.mean_probs - half, pred.mean_probs + half


def save_ensemble(ens: EnsembleModel, directory: str | Path, name: str = "ensemble") -> Path:
    """Write member weight files plus a manifest referencing them."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    member_files = []
    for b, member in enumerate(ens.members):
        fname = f"{name}_member_{b:02d}.weights"
        nncore.save_model(member, directory / fname)
        member_files.append(fname)
    manifest = {
        "format": ENSEMBLE_FORMAT,
        "version": ENSEMBLE_VERSION,
        "weights": [float(w) for w in ens.weights],
        "members": member_files,
    }
    path = directory / f"{name}.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def load_ensemble(manifest_path: str | Path) -> EnsembleModel:
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeaderError(f"{manifest_path}: unreadable manifest: {exc}") from exc
    if manifest.get("format") != ENSEMBLE_FORMAT:
        raise CorruptHeaderError(f"{manifest_path}: not an ensemble manifest")
    if manifest.get("version") != ENSEMBLE_VERSION:
        raise VersionMismatchError(f"{manifest_path}: unsupported version")
    members = [
        nncore.load_model(manifest_path.parent / fname) for fname in manifest["members"]
    ]
    return EnsembleModel(members, np.asarray(manifest["weights"]))
