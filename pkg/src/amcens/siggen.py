"""Synthetic baseband IQ frame generation.

A transmitted symbol stream passes through a flat channel with optional
per-sample Rayleigh fading plus complex AWGN of unit total variance; the
signal is scaled by sqrt(rho) with rho = 10**(snr_db / 10), which makes the
dB label exact by construction. One constellation symbol per output sample,
no pulse shaping.

Bit-to-point mappings are Gray coded and frozen; ``constellation_tables_markdown``
emits the exact tables (also checked in under docs/constellations.md).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .seeding import derive_seed, derived_rng

if TYPE_CHECKING:
    from .dataset import SignalDataset

FADING_MODES = ("identity", "rayleigh_iid")

DEFAULT_SCHEME_NAMES = (
    "ook",
    "bpsk",
    "qpsk",
    "8psk",
    "16psk",
    "4ask",
    "16qam",
    "64qam",
)


@dataclass(frozen=True)
class ModulationScheme:
    """A named constellation with its bit labeling.

    ``constellation[v]`` is the point transmitted for the bit group whose
    big-endian integer value is ``v``. Mean symbol energy is normalized to 1.
    """

    name: str
    constellation: np.ndarray
    bits_per_symbol: int

    def __post_init__(self):
        points = np.asarray(self.constellation, dtype=np.complex128)
        object.__setattr__(self, "constellation", points)
        if self.bits_per_symbol < 1:
            raise ValueError("bits_per_symbol must be positive")
        if points.shape != (2**self.bits_per_symbol,):
            raise ValueError(
                f"{self.name}: expected {2**self.bits_per_symbol} points, "
                f"got {points.shape}"
            )
        energy = float(np.mean(np.abs(points) ** 2))
        if abs(energy - 1.0) > 1e-9:
            raise ValueError(f"{self.name}: mean symbol energy {energy} != 1")
        if len(np.unique(points)) != len(points):
            raise ValueError(f"{self.name}: constellation points not distinct")


def _gray(k: int) -> int:
    return k ^ (k >> 1)


def _gray_pam_levels(bits: int) -> np.ndarray:
    """Unnormalized PAM levels indexed by bit value, Gray coded along the axis.

    Level position k (amplitude 2k - (M-1)) carries label gray(k), so
    neighbouring amplitudes differ in exactly one bit.
    """
    m = 2**bits
    levels = np.empty(m)
    for k in range(m):
        levels[_gray(k)] = 2 * k - (m - 1)
    return levels


def _make_psk(name: str, bits: int) -> ModulationScheme:
    m = 2**bits
    points = np.empty(m, dtype=np.complex128)
    for k in range(m):
        points[_gray(k)] = np.exp(2j * np.pi * k / m)
    return ModulationScheme(name, points, bits)


def _make_qam(name: str, bits: int) -> ModulationScheme:
    half = bits // 2
    axis = _gray_pam_levels(half)
    m = 2**bits
    points = np.empty(m, dtype=np.complex128)
    for v in range(m):
        vi, vq = v >> half, v & (2**half - 1)
        points[v] = axis[vi] + 1j * axis[vq]
    points /= np.sqrt(np.mean(np.abs(points) ** 2))
    return ModulationScheme(name, points, bits)


def _make_ask(name: str, bits: int) -> ModulationScheme:
    axis = _gray_pam_levels(bits).astype(np.complex128)
    axis /= np.sqrt(np.mean(np.abs(axis) ** 2))
    return ModulationScheme(name, axis, bits)


def _builders():
    return {
        # On/off keying: bit 1 transmits, amplitude normalized for unit mean energy.
        "ook": lambda: ModulationScheme("ook", [0.0, np.sqrt(2.0)], 1),
        # Classic antipodal mapping, bit 0 -> +1.
        "bpsk": lambda: ModulationScheme("bpsk", [1.0, -1.0], 1),
        # Per-axis sign mapping: I = (1 - 2*b0)/sqrt(2), Q = (1 - 2*b1)/sqrt(2).
        "qpsk": lambda: ModulationScheme(
            "qpsk",
            [
                (1 + 1j) / np.sqrt(2),
                (1 - 1j) / np.sqrt(2),
                (-1 + 1j) / np.sqrt(2),
                (-1 - 1j) / np.sqrt(2),
            ],
            2,
        ),
        "8psk": lambda: _make_psk("8psk", 3),
        "16psk": lambda: _make_psk("16psk", 4),
        "4ask": lambda: _make_ask("4ask", 2),
        "16qam": lambda: _make_qam("16qam", 4),
        "64qam": lambda: _make_qam("64qam", 6),
    }


def make_scheme(name: str) -> ModulationScheme:
    """Look up one of the built-in constellations by name."""
    builders = _builders()
    if name not in builders:
        raise ValueError(f"unknown scheme {name!r}; known: {sorted(builders)}")
    return builders[name]()


def default_schemes() -> list[ModulationScheme]:
    return [make_scheme(n) for n in DEFAULT_SCHEME_NAMES]


@dataclass(frozen=True)
class ChannelConfig:
    """Channel realization parameters for one frame."""

    snr_db: float
    fading: str = "identity"
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.snr_db):
            raise ValueError("snr_db must be finite")
        if self.fading not in FADING_MODES:
            raise ValueError(f"fading must be one of {FADING_MODES}")


@dataclass
class IQFrame:
    """One received frame: an (l, 2) real matrix plus label metadata."""

    samples: np.ndarray
    scheme_index: int
    snr_db: float
    uid: tuple[int, int] = field(default=(-1, -1))

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 2 or self.samples.shape[1] != 2:
            raise ValueError("samples must have shape (l, 2)")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples must be finite")


def modulate(bits: Sequence[int], scheme: ModulationScheme) -> np.ndarray:
    """Map a bit sequence to constellation symbols, one per group of
    ``bits_per_symbol`` bits (big-endian within the group)."""
    bits = np.asarray(bits, dtype=np.int64)
    b = scheme.bits_per_symbol
    if bits.ndim != 1 or bits.size % b != 0:
        raise ValueError(
            f"bit count {bits.size} is not a multiple of bits_per_symbol={b}"
        )
    if bits.size and (bits.min() < 0 or bits.max() > 1):
        raise ValueError("bits must be 0 or 1")
    groups = bits.reshape(-1, b)
    values = groups @ (1 << np.arange(b - 1, -1, -1, dtype=np.int64))
    return scheme.constellation[values]


def apply_channel(symbols: np.ndarray, cfg: ChannelConfig) -> np.ndarray:
    """Scale by sqrt(rho), apply per-sample fading, and add complex AWGN of
    unit total per-sample variance. Deterministic given ``cfg.seed``."""
    s = np.asarray(symbols, dtype=np.complex128)
    if s.size == 0:
        raise ValueError("empty symbol sequence")
    if not np.all(np.isfinite(s)):
        raise ValueError("symbols must be finite")
    rng = np.random.default_rng(cfg.seed)
    rho = 10.0 ** (cfg.snr_db / 10.0)
    if cfg.fading == "rayleigh_iid":
        h = (rng.standard_normal(s.size) + 1j * rng.standard_normal(s.size)) / np.sqrt(2.0)
    else:
        h = 1.0
    noise = (rng.standard_normal(s.size) + 1j * rng.standard_normal(s.size)) / np.sqrt(2.0)
    return np.sqrt(rho) * h * s + noise


def to_iq_matrix(symbols: np.ndarray) -> np.ndarray:
    """Stack real and imaginary parts into an (l, 2) matrix."""
    r = np.asarray(symbols, dtype=np.complex128)
    if not np.all(np.isfinite(r)):
        raise ValueError("sequence must be finite")
    return np.stack([r.real, r.imag], axis=1)


def from_iq_matrix(matrix: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_iq_matrix`."""
    m = np.asarray(matrix)
    return m[:, 0] + 1j * m[:, 1]


def generate_frames(
    schemes: Sequence[ModulationScheme],
    snr_grid_db: Sequence[float],
    frames_per_cell: int,
    frame_len: int,
    seed: int,
    fading: str = "identity",
) -> "SignalDataset":
    """Generate a balanced labeled dataset of received frames.

    Every (scheme, SNR) cell gets exactly ``frames_per_cell`` frames. Each
    frame draws its payload bits and channel realization from its own stream
    derived from (seed, cell, index), so datasets are reproducible and
    individual frames are independent of generation order.
    """
    from .dataset import SignalDataset

    if not schemes or len(list(snr_grid_db)) == 0:
        raise ValueError("invalid grid: need at least one scheme and one SNR")
    if frames_per_cell < 1:
        raise ValueError("frames_per_cell must be >= 1")
    if frame_len < 1:
        raise ValueError("frame_len must be >= 1")

    snrs = [float(v) for v in snr_grid_db]
    n_cells = len(schemes) * len(snrs)
    total = n_cells * frames_per_cell
    samples = np.empty((total, frame_len, 2), dtype=np.float32)
    scheme_indices = np.empty(total, dtype=np.int64)
    snr_tags = np.empty(total, dtype=np.float64)
    uids = np.empty((total, 2), dtype=np.int64)

    idx = 0
    cell = 0
    for si, scheme in enumerate(schemes):
        for snr in snrs:
            for k in range(frames_per_cell):
                bits = derived_rng(seed, cell, k, 0).integers(
                    0, 2, size=frame_len * scheme.bits_per_symbol
                )
                sym = modulate(bits, scheme)
                cfg = ChannelConfig(snr, fading, derive_seed(seed, cell, k, 1))
                received = apply_channel(sym, cfg)
                samples[idx] = to_iq_matrix(received).astype(np.float32)
                scheme_indices[idx] = si
                snr_tags[idx] = snr
                uids[idx] = (cell, k)
                idx += 1
            cell += 1

    meta = {
        "source": "siggen",
        "seed": int(seed),
        "snr_grid_db": snrs,
        "frames_per_cell": int(frames_per_cell),
        "fading": fading,
    }
    return SignalDataset(
        samples=samples,
        scheme_indices=scheme_indices,
        snrs_db=snr_tags,
        uids=uids,
        class_names=[s.name for s in schemes],
        meta=meta,
    )


def bit_mapping_table(scheme: ModulationScheme) -> list[tuple[str, complex]]:
    """The frozen bit-group -> point table, big-endian bit strings."""
    b = scheme.bits_per_symbol
    return [
        (format(v, f"0{b}b"), complex(scheme.constellation[v]))
        for v in range(2**b)
    ]


def constellation_tables_markdown() -> str:
    """Render every built-in scheme's bit mapping as a markdown document."""
    lines = ["# Constellation bit mappings", ""]
    lines.append(
        "Each table lists the complex point transmitted for a bit group "
        "(big-endian). Constellations are normalized to unit mean symbol energy."
    )
    for name in DEFAULT_SCHEME_NAMES:
        scheme = make_scheme(name)
        lines += ["", f"## {name}", "", "| bits | point |", "| --- | --- |"]
        for bits, point in bit_mapping_table(scheme):
            lines.append(f"| {bits} | {point.real:+.12f}{point.imag:+.12f}j |")
    return "\n".join(lines) + "\n"
