"""Dataset container, stratified splitting, and .sigset serialization.

The .sigset file layout is a single-line UTF-8 JSON manifest terminated by a
newline, followed by the raw sample payload as little-endian float32, frame
major, row major within a frame. The manifest records schema version, class
names, frame length, and one record per frame (scheme index, SNR tag, frame
uid, byte offset into the payload). Round-trips are bit exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import CorruptHeaderError, TruncatedPayloadError, VersionMismatchError
from .seeding import derived_rng
from .siggen import IQFrame

SIGSET_FORMAT = "sigset"
SIGSET_VERSION = 1
_PAYLOAD_DTYPE = np.dtype("<f4")


def one_hot(index: int, n_classes: int) -> np.ndarray:
    """Length-C probability vector with a single 1 at ``index``."""
    if not 0 <= index < n_classes:
        raise ValueError(f"label index {index} outside [0, {n_classes})")
    vec = np.zeros(n_classes)
    vec[index] = 1.0
    return vec


def is_one_hot(vector: np.ndarray) -> bool:
    v = np.asarray(vector)
    return v.ndim == 1 and np.count_nonzero(v == 1.0) == 1 and np.count_nonzero(v) == 1


@dataclass
class SignalDataset:
    """Immutable-by-convention collection of labeled IQ frames.

    Samples are kept stacked as one (N, l, 2) float32 array; ``frame(i)``
    materializes an :class:`IQFrame` view when per-frame access is wanted.
    """

    samples: np.ndarray
    scheme_indices: np.ndarray
    snrs_db: np.ndarray
    uids: np.ndarray
    class_names: list[str]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        self.scheme_indices = np.asarray(self.scheme_indices, dtype=np.int64)
        self.snrs_db = np.asarray(self.snrs_db, dtype=np.float64)
        self.uids = np.asarray(self.uids, dtype=np.int64)
        n = self.samples.shape[0]
        if self.samples.ndim != 3 or self.samples.shape[2] != 2:
            raise ValueError("samples must have shape (N, l, 2)")
        if not (self.scheme_indices.shape == (n,) and self.snrs_db.shape == (n,)):
            raise ValueError("label arrays must match sample count")
        if self.uids.shape != (n, 2):
            raise ValueError("uids must have shape (N, 2)")
        if n and not np.all(np.isfinite(self.samples)):
            raise ValueError("samples must be finite")
        if n and (self.scheme_indices.min() < 0 or self.scheme_indices.max() >= len(self.class_names)):
            raise ValueError("scheme index outside [0, C)")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def frame_length(self) -> int:
        return self.samples.shape[1]

    def frame(self, i: int) -> IQFrame:
        return IQFrame(
            samples=self.samples[i],
            scheme_index=int(self.scheme_indices[i]),
            snr_db=float(self.snrs_db[i]),
            uid=(int(self.uids[i, 0]), int(self.uids[i, 1])),
        )

    @property
    def frames(self) -> list[IQFrame]:
        return [self.frame(i) for i in range(len(self))]

    @classmethod
    def from_frames(cls, frames: Sequence[IQFrame], class_names: Sequence[str],
                    meta: dict | None = None) -> "SignalDataset":
        if not frames:
            raise ValueError("need at least one frame")
        return cls(
            samples=np.stack([f.samples for f in frames]).astype(np.float32),
            scheme_indices=np.array([f.scheme_index for f in frames]),
            snrs_db=np.array([f.snr_db for f in frames]),
            uids=np.array([f.uid for f in frames]),
            class_names=list(class_names),
            meta=dict(meta or {}),
        )

    def subset(self, indices: np.ndarray) -> "SignalDataset":
        idx = np.asarray(indices)
        return SignalDataset(
            samples=self.samples[idx],
            scheme_indices=self.scheme_indices[idx],
            snrs_db=self.snrs_db[idx],
            uids=self.uids[idx],
            class_names=list(self.class_names),
            meta=dict(self.meta),
        )

    def snr_values(self) -> list[float]:
        return [float(v) for v in np.unique(self.snrs_db)]

    def per_snr(self) -> Iterator[tuple[float, "SignalDataset"]]:
        for snr in self.snr_values():
            yield snr, self.subset(np.flatnonzero(self.snrs_db == snr))

    def as_xy(self, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
        """Stacked (X, y) arrays for training/eval code."""
        return self.samples.astype(dtype, copy=False), self.scheme_indices

    def equals(self, other: "SignalDataset") -> bool:
        """Bit-exact equality on every field."""
        return (
            self.class_names == other.class_names
            and self.samples.shape == other.samples.shape
            and np.array_equal(self.samples, other.samples)
            and np.array_equal(self.scheme_indices, other.scheme_indices)
            and np.array_equal(self.snrs_db, other.snrs_db)
            and np.array_equal(self.uids, other.uids)
            and self.meta == other.meta
        )


@dataclass
class SplitDataset:
    train: SignalDataset
    test: SignalDataset


def split(ds: SignalDataset, test_fraction: float, seed: int) -> SplitDataset:
    """Stratified train/test split, per (scheme, SNR) cell, seeded.

    The test share of each cell is round(fraction * cell size), clamped so
    both sides stay nonempty. Cells with fewer than 2 frames are rejected.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    snr_rank = {v: i for i, v in enumerate(ds.snr_values())}
    test_mask = np.zeros(len(ds), dtype=bool)
    cells = sorted(
        {(int(s), float(v)) for s, v in zip(ds.scheme_indices, ds.snrs_db)}
    )
    for scheme_idx, snr in cells:
        members = np.flatnonzero((ds.scheme_indices == scheme_idx) & (ds.snrs_db == snr))
        if members.size < 2:
            raise ValueError(
                f"cell (scheme={scheme_idx}, snr={snr}) has {members.size} frames; need >= 2"
            )
        n_test = int(round(test_fraction * members.size))
        n_test = min(max(n_test, 1), members.size - 1)
        rng = derived_rng(seed, scheme_idx, snr_rank[snr])
        chosen = rng.permutation(members.size)[:n_test]
        test_mask[members[chosen]] = True
    return SplitDataset(
        train=ds.subset(np.flatnonzero(~test_mask)),
        test=ds.subset(np.flatnonzero(test_mask)),
    )


def save(ds: SignalDataset, path: str | Path) -> None:
    """Write the dataset in .sigset format."""
    path = Path(path)
    frame_bytes = ds.frame_length * 2 * _PAYLOAD_DTYPE.itemsize
    records = [
        {
            "scheme_index": int(ds.scheme_indices[i]),
            "snr_db": float(ds.snrs_db[i]),
            "uid": [int(ds.uids[i, 0]), int(ds.uids[i, 1])],
            "offset": i * frame_bytes,
        }
        for i in range(len(ds))
    ]
    manifest = {
        "format": SIGSET_FORMAT,
        "version": SIGSET_VERSION,
        "n_classes": ds.n_classes,
        "frame_length": ds.frame_length,
        "class_names": ds.class_names,
        "frame_count": len(ds),
        "meta": ds.meta,
        "frames": records,
    }
    payload = np.ascontiguousarray(ds.samples, dtype=_PAYLOAD_DTYPE)
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        fh.write(payload.tobytes())


def load(path: str | Path) -> SignalDataset:
    """Read a .sigset file, checking header integrity and payload length."""
    path = Path(path)
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        manifest = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeaderError(f"{path}: unreadable manifest: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != SIGSET_FORMAT:
        raise CorruptHeaderError(f"{path}: not a sigset file")
    if manifest.get("version") != SIGSET_VERSION:
        raise VersionMismatchError(
            f"{path}: version {manifest.get('version')!r}, supported {SIGSET_VERSION}"
        )
    try:
        n = int(manifest["frame_count"])
        length = int(manifest["frame_length"])
        class_names = list(manifest["class_names"])
        n_classes = int(manifest["n_classes"])
        records = manifest["frames"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptHeaderError(f"{path}: manifest missing fields: {exc}") from exc
    if len(class_names) != n_classes or len(records) != n:
        raise CorruptHeaderError(f"{path}: manifest counts disagree")

    frame_bytes = length * 2 * _PAYLOAD_DTYPE.itemsize
    expected = n * frame_bytes
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{path}: payload {len(payload)} bytes, expected {expected}"
        )

    scheme_indices = np.empty(n, dtype=np.int64)
    snrs = np.empty(n, dtype=np.float64)
    uids = np.empty((n, 2), dtype=np.int64)
    for i, rec in enumerate(records):
        try:
            scheme_indices[i] = rec["scheme_index"]
            snrs[i] = rec["snr_db"]
            uids[i] = rec["uid"]
            offset = rec["offset"]
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptHeaderError(f"{path}: bad frame record {i}: {exc}") from exc
        if offset != i * frame_bytes:
            raise CorruptHeaderError(f"{path}: frame {i} offset {offset} inconsistent")
    if n and (scheme_indices.min() < 0 or scheme_indices.max() >= n_classes):
        raise CorruptHeaderError(f"{path}: frame labels exceed manifest class count")

    samples = np.frombuffer(payload[:expected], dtype=_PAYLOAD_DTYPE).reshape(n, length, 2)
    return SignalDataset(
        samples=samples.copy(),
        scheme_indices=scheme_indices,
        snrs_db=snrs,
        uids=uids,
        class_names=class_names,
        meta=dict(manifest.get("meta", {})),
    )
