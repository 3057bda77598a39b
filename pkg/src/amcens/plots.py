"""SVG figure rendering for the report stage.

Every figure is a standalone SVG with its source data embedded as a CSV
table in the SVG metadata description, so numbers can be recovered from the
figure file alone. Violin-style CI-width panels are drawn from the stored
histograms; nothing is recomputed from predictions.
"""

from __future__ import annotations

import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

matplotlib.rcParams["svg.hashsalt"] = "amcens"

_LINE_METRICS = (
    ("accuracy", "Accuracy"),
    ("nll", "NLL"),
    ("brier", "Brier score"),
    ("ece", "ECE"),
    ("mean_kl", "Mean KL divergence"),
    ("coverage_strict", "Strict coverage"),
    ("coverage_relaxed", "Relaxed coverage"),
    ("high_confidence_proportion", "High-confidence proportion"),
)


def _rows_to_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    buf.write(",".join(columns) + "\n")
    for row in rows:
        buf.write(",".join(str(row.get(c, "")) for c in columns) + "\n")
    return buf.getvalue()


def _save(fig, path: Path, data_csv: str) -> None:
    fig.savefig(
        path,
        format="svg",
        metadata={"Description": "data-table:\n" + data_csv, "Date": None},
    )
    plt.close(fig)


def _series_by_system(rows: list[dict], key: str, metric: str):
    systems: dict[str, list[tuple[float, float]]] = {}
    for row in rows:
        systems.setdefault(row["system"], []).append((row[key], row[metric]))
    for name, pts in systems.items():
        pts.sort()
        yield name, [p[0] for p in pts], [p[1] for p in pts]


def render_clean_reports(rows: list[dict], report_dir: Path) -> list[str]:
    """Per-metric line plots over SNR plus CI-width violin panels."""
    outputs = []
    for metric, label in _LINE_METRICS:
        fig, ax = plt.subplots(figsize=(5, 3.4))
        for name, xs, ys in _series_by_system(rows, "snr_db", metric):
            ax.plot(xs, ys, marker="o", label=name)
        ax.set_xlabel("SNR (dB)")
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = report_dir / f"{metric}_vs_snr.svg"
        _save(fig, path, _rows_to_csv(rows, ["system", "snr_db", metric]))
        outputs.append(str(path))
    for kind in ("correct", "incorrect"):
        path = report_dir / f"ci_widths_{kind}_violin.svg"
        _render_width_violins(rows, kind, path)
        outputs.append(str(path))
    return outputs


def _render_width_violins(rows: list[dict], kind: str, path: Path) -> None:
    systems = sorted({row["system"] for row in rows})
    fig, axes = plt.subplots(
        1, len(systems), figsize=(3.2 * len(systems), 3.2), squeeze=False
    )
    table_rows = []
    for ax, system in zip(axes[0], systems):
        sys_rows = sorted(
            (r for r in rows if r["system"] == system), key=lambda r: r["snr_db"]
        )
        positions, labels = [], []
        for i, row in enumerate(sys_rows):
            hist = row.get(f"ci_width_hist_{kind}", {})
            edges, counts = hist.get("edges", []), hist.get("counts", [])
            positions.append(i)
            labels.append(f"{row['snr_db']:g}")
            table_rows.append(
                {
                    "system": system,
                    "snr_db": row["snr_db"],
                    "edges": ";".join(f"{e:g}" for e in edges),
                    "counts": ";".join(str(c) for c in counts),
                }
            )
            if not counts or sum(counts) == 0:
                continue
            centers = 0.5 * (np.asarray(edges[:-1]) + np.asarray(edges[1:]))
            half = 0.42 * np.asarray(counts, dtype=float) / max(counts)
            ax.fill_betweenx(centers, i - half, i + half, alpha=0.7)
        ax.set_xticks(positions)
        ax.set_xticklabels(labels, fontsize=6)
        ax.set_title(system, fontsize=8)
        ax.set_xlabel("SNR (dB)")
        ax.set_ylabel(f"CI width ({kind})")
        ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path, _rows_to_csv(table_rows, ["system", "snr_db", "edges", "counts"]))


def render_attack_over_snr(
    clean_rows: list[dict], attacked_rows: list[dict], report_dir: Path
) -> list[str]:
    """Clean vs attacked accuracy across the SNR grid (constant target PNR)."""
    fig, ax = plt.subplots(figsize=(5, 3.4))
    for name, xs, ys in _series_by_system(clean_rows, "snr_db", "accuracy"):
        ax.plot(xs, ys, linestyle="--", marker=".", label=f"{name} (clean)")
    for name, xs, ys in _series_by_system(attacked_rows, "snr_db", "accuracy"):
        ax.plot(xs, ys, marker="o", label=f"{name} (attacked)")
    ax.set_xlabel("SNR (dB)")
    ax.set_ylabel("Accuracy")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=6)
    fig.tight_layout()
    path = report_dir / "attack_accuracy_vs_snr.svg"
    merged = [dict(r, condition="clean") for r in clean_rows] + [
        dict(r, condition="attacked") for r in attacked_rows
    ]
    _save(fig, path, _rows_to_csv(merged, ["system", "condition", "snr_db", "accuracy"]))
    return [str(path)]


def render_attack_over_pnr(
    clean_rows: list[dict], sweep_rows: list[dict], snr_db: float, report_dir: Path
) -> list[str]:
    """Accuracy vs PNR at one SNR; clean accuracy drawn as a flat line."""
    fig, ax = plt.subplots(figsize=(5, 3.4))
    pnrs = sorted({row["pnr_db"] for row in sweep_rows})
    for name, xs, ys in _series_by_system(sweep_rows, "pnr_db", "accuracy"):
        ax.plot(xs, ys, marker="o", label=f"{name} (attacked)")
    for row in clean_rows:
        if row["snr_db"] == snr_db:
            ax.plot(
                [min(pnrs), max(pnrs)],
                [row["accuracy"]] * 2,
                linestyle="--",
                label=f"{row['system']} (clean)",
            )
    ax.set_xlabel("PNR (dB)")
    ax.set_ylabel("Accuracy")
    ax.set_title(f"SNR = {snr_db:g} dB", fontsize=9)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=6)
    fig.tight_layout()
    path = report_dir / "attack_accuracy_vs_pnr.svg"
    _save(fig, path, _rows_to_csv(sweep_rows, ["system", "pnr_db", "accuracy"]))
    return [str(path)]
