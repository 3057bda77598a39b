"""Uncertainty-quantification scoring of ensemble predictions.

All metrics operate on a :class:`ScoredBatch` (aggregated probabilities,
per-class variances, integer labels, SNR tags). Log-based metrics clip
probabilities to [1e-12, 1] -- the same clip the training loss uses -- so the
mean KL divergence equals the NLL exactly for one-hot labels.

Conventions fixed here (and relied on by the tests):

* confidence of a sample = max of the aggregated mean probability vector;
* ECE bins partition [0, 1] uniformly, bin k = [k/K, (k+1)/K) with the last
  bin right-closed so confidence 1.0 is counted;
* confidence intervals are closed, so a degenerate [1, 1] interval contains 1;
* a high-confidence prediction needs confidence strictly above 0.8;
* CI-width histograms use 32 uniform bins over the observed range (a
  reporting choice, not a metric definition).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .ensemble import BatchPrediction, CIConfig, EnsemblePrediction

PROB_CLIP = 1e-12
HIGH_CONFIDENCE_THRESHOLD = 0.8
HISTOGRAM_BINS = 32


@dataclass(frozen=True)
class ECEConfig:
    """Uniform-bin calibration-error config."""

    bin_count: int = 15

    def __post_init__(self):
        if self.bin_count < 1:
            raise ValueError("bin_count must be >= 1")


@dataclass
class ScoredBatch:
    """Predictions and labels for a slice of the test set.

    ``mean_probs`` is (T, C); ``variances`` holds the unbiased per-class
    sample variance over the ensemble members; ``n_members`` is B in the
    interval half-width z * sqrt(S^2 / B).
    """

    mean_probs: np.ndarray
    variances: np.ndarray
    n_members: int
    labels: np.ndarray
    snrs_db: np.ndarray

    def __post_init__(self):
        self.mean_probs = np.asarray(self.mean_probs, dtype=np.float64)
        self.variances = np.asarray(self.variances, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.snrs_db = np.asarray(self.snrs_db, dtype=np.float64)
        t, c = self.mean_probs.shape
        if self.variances.shape != (t, c):
            raise ValueError("variances must match mean_probs shape")
        if self.labels.shape != (t,) or self.snrs_db.shape != (t,):
            raise ValueError("labels and snrs_db must have one entry per sample")
        if t and (self.labels.min() < 0 or self.labels.max() >= c):
            raise ValueError("labels outside [0, C)")
        if self.n_members < 1:
            raise ValueError("n_members must be >= 1")

    def __len__(self) -> int:
        return self.mean_probs.shape[0]

    @property
    def n_classes(self) -> int:
        return self.mean_probs.shape[1]

    @classmethod
    def from_predictions(
        cls,
        predictions: Sequence[EnsemblePrediction],
        labels: Sequence,
        snrs_db: Sequence[float],
    ) -> "ScoredBatch":
        if not predictions:
            raise ValueError("empty batch")
        idx = []
        for label in labels:
            arr = np.asarray(label)
            idx.append(int(arr) if arr.ndim == 0 else int(np.argmax(arr)))
        return cls(
            mean_probs=np.stack([p.mean_probs for p in predictions]),
            variances=np.stack([p.per_class_variance for p in predictions]),
            n_members=predictions[0].n_members,
            labels=np.asarray(idx),
            snrs_db=np.asarray(snrs_db, dtype=np.float64),
        )

    @classmethod
    def from_batch(
        cls, batch: BatchPrediction, labels: np.ndarray, snrs_db: np.ndarray
    ) -> "ScoredBatch":
        return cls(
            mean_probs=batch.mean_probs,
            variances=batch.per_class_variance,
            n_members=batch.n_members,
            labels=np.asarray(labels),
            snrs_db=np.asarray(snrs_db),
        )

    def subset(self, indices) -> "ScoredBatch":
        idx = np.asarray(indices)
        return ScoredBatch(
            self.mean_probs[idx],
            self.variances[idx],
            self.n_members,
            self.labels[idx],
            self.snrs_db[idx],
        )

    def per_snr(self) -> Iterator[tuple[float, "ScoredBatch"]]:
        for snr in [float(v) for v in np.unique(self.snrs_db)]:
            yield snr, self.subset(np.flatnonzero(self.snrs_db == snr))


def _require_nonempty(batch: ScoredBatch) -> None:
    if len(batch) == 0:
        raise ValueError("empty batch")


def _clipped(probs: np.ndarray) -> np.ndarray:
    return np.clip(probs, PROB_CLIP, 1.0)


def accuracy(batch: ScoredBatch) -> float:
    """Fraction of samples whose argmax of mean probability hits the label."""
    _require_nonempty(batch)
    return float(np.mean(np.argmax(batch.mean_probs, axis=1) == batch.labels))


def nll(batch: ScoredBatch) -> float:
    """Mean negative log probability of the true class."""
    _require_nonempty(batch)
    p_true = batch.mean_probs[np.arange(len(batch)), batch.labels]
    return float(-np.log(_clipped(p_true)).mean())


def brier(batch: ScoredBatch) -> float:
    """Mean over samples of the squared distance between the predicted
    distribution and the one-hot label (summed over classes, not divided
    by C)."""
    _require_nonempty(batch)
    diff = batch.mean_probs.copy()
    diff[np.arange(len(batch)), batch.labels] -= 1.0
    return float((diff**2).sum(axis=1).mean())


def _bin_index(confidence: np.ndarray, bin_count: int) -> np.ndarray:
    edges = np.arange(bin_count + 1) / bin_count
    idx = np.searchsorted(edges, confidence, side="right") - 1
    return np.clip(idx, 0, bin_count - 1)


def ece(batch: ScoredBatch, cfg: ECEConfig) -> float:
    """Expected calibration error over uniform confidence bins.

    Per bin: (bin size / T) * |bin accuracy - bin mean confidence|, summed;
    empty bins contribute nothing.
    """
    _require_nonempty(batch)
    conf = batch.mean_probs.max(axis=1)
    correct = (np.argmax(batch.mean_probs, axis=1) == batch.labels).astype(np.float64)
    idx = _bin_index(conf, cfg.bin_count)
    counts = np.bincount(idx, minlength=cfg.bin_count).astype(np.float64)
    conf_sum = np.bincount(idx, weights=conf, minlength=cfg.bin_count)
    acc_sum = np.bincount(idx, weights=correct, minlength=cfg.bin_count)
    nonempty = counts > 0
    gaps = np.zeros(cfg.bin_count)
    gaps[nonempty] = np.abs(
        acc_sum[nonempty] / counts[nonempty] - conf_sum[nonempty] / counts[nonempty]
    )
    return float((counts * gaps).sum() / len(batch))


def kl_divergence(batch: ScoredBatch) -> tuple[np.ndarray, float]:
    """KL(one-hot label || prediction) per sample plus the mean.

    With one-hot labels this reduces to -log p_true, identical to the
    per-sample NLL term under the shared clip.
    """
    _require_nonempty(batch)
    p_true = batch.mean_probs[np.arange(len(batch)), batch.labels]
    per_sample = -np.log(_clipped(p_true))
    return per_sample, float(per_sample.mean())


def _half_widths(batch: ScoredBatch, cfg: CIConfig) -> np.ndarray:
    return cfg.z_alpha * np.sqrt(batch.variances / batch.n_members)


def ci_widths(batch: ScoredBatch, cfg: CIConfig) -> tuple[np.ndarray, np.ndarray]:
    """Width of the predicted class's interval per sample, split into
    (correct, incorrect) arrays by prediction correctness."""
    _require_nonempty(batch)
    pred = np.argmax(batch.mean_probs, axis=1)
    widths = 2.0 * _half_widths(batch, cfg)[np.arange(len(batch)), pred]
    correct = pred == batch.labels
    return widths[correct], widths[~correct]


def coverage(batch: ScoredBatch, cfg: CIConfig, mode: str = "strict") -> float:
    """Fraction of samples whose class intervals capture the one-hot label.

    strict: the true class interval must contain 1 AND every other class
    interval must contain 0. relaxed: only the true-class condition.
    Intervals are closed.
    """
    _require_nonempty(batch)
    if mode not in ("strict", "relaxed"):
        raise ValueError("mode must be 'strict' or 'relaxed'")
    half = _half_widths(batch, cfg)
    lower, upper = batch.mean_probs - half, batch.mean_probs + half
    rows = np.arange(len(batch))
    true_ok = (lower[rows, batch.labels] <= 1.0) & (upper[rows, batch.labels] >= 1.0)
    if mode == "relaxed":
        return float(true_ok.mean())
    others_ok = (lower <= 0.0) & (upper >= 0.0)
    others_ok[rows, batch.labels] = True
    return float((true_ok & others_ok.all(axis=1)).mean())


def high_confidence_proportion(batch: ScoredBatch) -> float:
    """Fraction of samples with max mean probability strictly above 0.8."""
    _require_nonempty(batch)
    return float((batch.mean_probs.max(axis=1) > HIGH_CONFIDENCE_THRESHOLD).mean())


def _histogram(values: np.ndarray) -> dict:
    if values.size == 0:
        return {"edges": [], "counts": []}
    counts, edges = np.histogram(values, bins=HISTOGRAM_BINS)
    return {"edges": [float(e) for e in edges], "counts": [int(c) for c in counts]}


@dataclass
class MetricsReport:
    """Every UQ metric for one (system, dataset slice) pair."""

    count: int
    accuracy: float
    nll: float
    brier: float
    ece: float
    mean_kl: float
    coverage_strict: float
    coverage_relaxed: float
    high_confidence_proportion: float
    mean_ci_width_correct: float
    mean_ci_width_incorrect: float
    ci_width_hist_correct: dict = field(default_factory=dict)
    ci_width_hist_incorrect: dict = field(default_factory=dict)
    alpha: float = 0.05
    ece_bin_count: int = 15

    SCALAR_COLUMNS = (
        "count",
        "accuracy",
        "nll",
        "brier",
        "ece",
        "mean_kl",
        "coverage_strict",
        "coverage_relaxed",
        "high_confidence_proportion",
        "mean_ci_width_correct",
        "mean_ci_width_incorrect",
    )

    def scalar_row(self) -> list:
        return [getattr(self, c) for c in self.SCALAR_COLUMNS]

    def to_json_dict(self) -> dict:
        return {
            **{c: getattr(self, c) for c in self.SCALAR_COLUMNS},
            "ci_width_hist_correct": self.ci_width_hist_correct,
            "ci_width_hist_incorrect": self.ci_width_hist_incorrect,
            "alpha": self.alpha,
            "ece_bin_count": self.ece_bin_count,
        }


def report(batch: ScoredBatch, ci_cfg: CIConfig, ece_cfg: ECEConfig) -> MetricsReport:
    """Compute the full metric suite on one batch with consistent clipping."""
    _require_nonempty(batch)
    widths_correct, widths_incorrect = ci_widths(batch, ci_cfg)
    _, mean_kl = kl_divergence(batch)
    return MetricsReport(
        count=len(batch),
        accuracy=accuracy(batch),
        nll=nll(batch),
        brier=brier(batch),
        ece=ece(batch, ece_cfg),
        mean_kl=mean_kl,
        coverage_strict=coverage(batch, ci_cfg, "strict"),
        coverage_relaxed=coverage(batch, ci_cfg, "relaxed"),
        high_confidence_proportion=high_confidence_proportion(batch),
        mean_ci_width_correct=(
            float(widths_correct.mean()) if widths_correct.size else float("nan")
        ),
        mean_ci_width_incorrect=(
            float(widths_incorrect.mean()) if widths_incorrect.size else float("nan")
        ),
        ci_width_hist_correct=_histogram(widths_correct),
        ci_width_hist_incorrect=_histogram(widths_incorrect),
        alpha=ci_cfg.alpha,
        ece_bin_count=ece_cfg.bin_count,
    )


def write_reports_csv(
    rows: Sequence[tuple[str, float, MetricsReport]], path: str | Path
) -> None:
    """One CSV row per (system, SNR slice); column order is fixed and floats
    are written with full shortest-roundtrip precision, so identical runs
    produce identical bytes."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["system", "snr_db", *MetricsReport.SCALAR_COLUMNS])
        for system, snr_db, rep in rows:
            writer.writerow(
                [system, repr(float(snr_db))]
                + [v if isinstance(v, int) else repr(float(v)) for v in rep.scalar_row()]
            )


def write_reports_json(
    rows: Sequence[tuple[str, float, MetricsReport]],
    path: str | Path,
    key_name: str = "snr_db",
) -> None:
    path = Path(path)
    payload = [
        {"system": system, key_name: key, **rep.to_json_dict()}
        for system, key, rep in rows
    ]
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
