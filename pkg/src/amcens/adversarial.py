"""FGSM perturbation crafting and perturbation-to-noise-ratio accounting.

Attacks are single-step sign-gradient perturbations crafted against one
designated surrogate model (ensemble member 0 by default when the target is
an ensemble; the model itself for a standalone CNN), using true labels.
Perturbation strength is reported on the PNR scale:

    PNR [dB] = 10 log10(E||delta||^2 / E||r||^2) + SNR [dB]

with expectations taken as means over the frame set. A zero perturbation is
reported as the -inf sentinel ("no perturbation").
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nncore, uqmetrics
from .dataset import SignalDataset
from .ensemble import CIConfig, EnsembleModel, predict_batch, predict_single_batch
from .nncore import ModelParams
from .siggen import IQFrame
from .uqmetrics import ECEConfig, MetricsReport, ScoredBatch

NO_PERTURBATION_DB = float("-inf")


@dataclass(frozen=True)
class AttackConfig:
    """Exactly one of ``epsilon`` / ``target_pnr_db`` drives the attack."""

    epsilon: float | None = None
    target_pnr_db: float | None = None
    surrogate: int | str = 0

    def __post_init__(self):
        if (self.epsilon is None) == (self.target_pnr_db is None):
            raise ValueError("set exactly one of epsilon / target_pnr_db")
        if self.epsilon is not None and self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")


@dataclass
class PerturbedFrame:
    original: IQFrame
    delta: np.ndarray
    realized_pnr_db: float

    @property
    def perturbed(self) -> np.ndarray:
        return self.original.samples + self.delta


def fgsm(model: ModelParams, frame: IQFrame, label, epsilon: float) -> PerturbedFrame:
    """Single-step sign-gradient perturbation with exact l-inf bound epsilon.

    sign(0) = 0, so zero-gradient entries stay untouched.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    grad = nncore.input_gradient(model, frame.samples, label).astype(np.float64)
    delta = epsilon * np.sign(grad)
    return PerturbedFrame(
        original=frame,
        delta=delta,
        realized_pnr_db=pnr_db([delta], [frame.samples], frame.snr_db),
    )


def _stack(items) -> np.ndarray:
    mats = [it.samples if isinstance(it, IQFrame) else np.asarray(it) for it in items]
    return np.stack(mats).astype(np.float64)


def pnr_db(deltas: Sequence, frames: Sequence, snr_db: float) -> float:
    """Set-level PNR; -inf sentinel when the perturbations carry no power."""
    if len(deltas) == 0 or len(deltas) != len(frames):
        raise ValueError("need nonempty matched delta/frame sets")
    d = _stack(deltas)
    r = _stack(frames)
    mean_delta_power = float((d**2).sum(axis=(1, 2)).mean())
    mean_signal_power = float((r**2).sum(axis=(1, 2)).mean())
    if mean_delta_power == 0.0:
        return NO_PERTURBATION_DB
    return 10.0 * math.log10(mean_delta_power / mean_signal_power) + snr_db


def epsilon_for_pnr(target_pnr_db: float, snr_db: float, frames: Sequence) -> float:
    """Invert the PNR formula assuming full-support sign patterns, i.e.
    ||delta||^2 = 2 * l * eps^2 per frame. Zero-gradient entries make the
    realized PNR fall short, so callers re-measure it."""
    if len(frames) == 0:
        raise ValueError("need at least one frame")
    if target_pnr_db == NO_PERTURBATION_DB:
        return 0.0
    if not np.isfinite(target_pnr_db):
        raise ValueError("target PNR must be finite or the -inf sentinel")
    r = _stack(frames)
    mean_signal_power = float((r**2).sum(axis=(1, 2)).mean())
    if mean_signal_power <= 0.0:
        raise ValueError("nonpositive target power: frames carry no energy")
    frame_len = r.shape[1]
    linear = 10.0 ** ((target_pnr_db - snr_db) / 10.0)
    return math.sqrt(mean_signal_power * linear / (2.0 * frame_len))


def craft_deltas(
    surrogate: ModelParams, X: np.ndarray, y: np.ndarray, epsilon: float
) -> np.ndarray:
    """FGSM deltas for a stack of frames against one surrogate model."""
    grads = nncore.input_gradient_batch(surrogate, X, y).astype(np.float64)
    return epsilon * np.sign(grads)


def resolve_surrogate(system, attack: AttackConfig) -> ModelParams:
    if isinstance(system, ModelParams):
        return system
    if isinstance(system, EnsembleModel):
        idx = attack.surrogate if isinstance(attack.surrogate, int) else 0
        return system.members[idx]
    raise TypeError(f"unsupported system type {type(system)!r}")


@dataclass
class AttackEvaluation:
    """Per-SNR attacked metrics plus the attack bookkeeping per slice."""

    per_snr: dict[float, MetricsReport]
    epsilons: dict[float, float]
    realized_pnr_db: dict[float, float]
    surrogate: str
    labels_used: str = "true"


def evaluate_under_attack(
    system,
    test_set: SignalDataset,
    attack: AttackConfig,
    ci_cfg: CIConfig,
    ece_cfg: ECEConfig,
) -> AttackEvaluation:
    """Craft FGSM perturbations on the surrogate, then score the attacked
    system through the full metric pipeline, one report per SNR level."""
    surrogate = resolve_surrogate(system, attack)
    sur_name = (
        "standalone"
        if isinstance(system, ModelParams)
        else f"member_{attack.surrogate if isinstance(attack.surrogate, int) else 0}"
    )
    per_snr: dict[float, MetricsReport] = {}
    epsilons: dict[float, float] = {}
    realized: dict[float, float] = {}
    for snr, ds in test_set.per_snr():
        X = ds.samples.astype(np.float64)
        y = ds.scheme_indices
        if attack.epsilon is not None:
            eps = float(attack.epsilon)
        else:
            eps = epsilon_for_pnr(attack.target_pnr_db, snr, X)
        deltas = craft_deltas(surrogate, X, y, eps)
        perturbed = X + deltas
        if isinstance(system, ModelParams):
            pred = predict_single_batch(system, perturbed)
        else:
            pred = predict_batch(system, perturbed)
        batch = ScoredBatch.from_batch(pred, y, ds.snrs_db)
        per_snr[snr] = uqmetrics.report(batch, ci_cfg, ece_cfg)
        epsilons[snr] = eps
        realized[snr] = pnr_db(deltas, X, snr)
    return AttackEvaluation(per_snr, epsilons, realized, sur_name)


def perturbed_dataset(
    surrogate: ModelParams, ds: SignalDataset, epsilon: float, extra_meta: dict | None = None
) -> SignalDataset:
    """The attacked copy of a dataset, with attack parameters recorded in the
    manifest metadata so .sigset files are self-describing."""
    deltas = craft_deltas(surrogate, ds.samples.astype(np.float64), ds.scheme_indices, epsilon)
    meta = dict(ds.meta)
    meta["attack"] = {
        "kind": "fgsm",
        "epsilon": float(epsilon),
        "labels": "true",
        **(extra_meta or {}),
    }
    return SignalDataset(
        samples=(ds.samples.astype(np.float64) + deltas).astype(np.float32),
        scheme_indices=ds.scheme_indices.copy(),
        snrs_db=ds.snrs_db.copy(),
        uids=ds.uids.copy(),
        class_names=list(ds.class_names),
        meta=meta,
    )
