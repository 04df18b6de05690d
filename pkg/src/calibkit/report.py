"""Report bundles: metric JSON, delimited plot-data tables, and rendered
matplotlib figures.

Every table carries the producing config hash in its header comment;
figures are PNG files written alongside the CSVs.
"""

from __future__ import annotations

import csv
import importlib.resources
import json
import os
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from calibkit.metrics import BinLedger, CalibrationReport, PredictionBatch, histogram_data

GAP_HIST_BINS = 20


def load_schema() -> dict:
    text = importlib.resources.files("calibkit").joinpath("report_schema.json").read_text()
    return json.loads(text)


def validate_bundle(blob: dict):
    import jsonschema

    jsonschema.validate(blob, load_schema())


@dataclass
class ReportBundle:
    """In-domain report plus per-severity OOD reports and plot data."""

    config_hash: str
    bins: int
    in_domain: CalibrationReport
    ood: list = field(default_factory=list)  # (CorruptionSpec, CalibrationReport)
    temperature: float | None = None

    def to_dict(self) -> dict:
        ood = sorted(self.ood, key=lambda pair: pair[0].severity)
        return {
            "config_hash": self.config_hash,
            "bins": int(self.bins),
            "temperature": self.temperature,
            "in_domain": self.in_domain.to_dict(),
            "ood": [
                {
                    "kind": spec.kind,
                    "severity": int(spec.severity),
                    "seed": int(spec.seed),
                    "report": report.to_dict(),
                }
                for spec, report in ood
            ],
        }

    def save(self, out_dir, batch: PredictionBatch | None = None):
        """Write report.json, the delimited tables, and the figures."""
        os.makedirs(out_dir, exist_ok=True)
        blob = self.to_dict()
        validate_bundle(blob)
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            json.dump(blob, fh, indent=2, sort_keys=True)
        write_reliability_table(os.path.join(out_dir, "reliability.csv"),
                                self.in_domain.bins, self.config_hash)
        plot_reliability(os.path.join(out_dir, "reliability.png"), self.in_domain.bins)
        if batch is not None:
            ledger = histogram_data(batch, self.bins, "incorrect-only")
            write_reliability_table(os.path.join(out_dir, "confidence_hist_incorrect.csv"),
                                    ledger, self.config_hash)
            plot_confidence_histogram(os.path.join(out_dir, "confidence_hist.png"),
                                      self.in_domain.bins, ledger)


def _csv_writer(path, config_hash, fieldnames):
    fh = open(path, "w", newline="")
    fh.write(f"# config_hash={config_hash}\n")
    writer = csv.writer(fh)
    writer.writerow(fieldnames)
    return fh, writer


def write_reliability_table(path, ledger: BinLedger, config_hash):
    fh, writer = _csv_writer(path, config_hash,
                             ["bin", "lo", "hi", "count", "accuracy", "confidence"])
    acc, conf = ledger.bin_accuracy(), ledger.bin_confidence()
    with fh:
        for i in range(ledger.n_bins):
            writer.writerow([i, i / ledger.n_bins, (i + 1) / ledger.n_bins,
                             int(ledger.counts[i]), f"{acc[i]:.10g}", f"{conf[i]:.10g}"])


def gap_histogram(mean_confidence: np.ndarray, certainty: np.ndarray,
                  n_bins: int = GAP_HIST_BINS):
    """Histogram of per-(example, class) |certainty - mean confidence|.

    Returns (edges, counts) with ``n_bins`` equal-width bins over [0, 1].
    """
    gaps = np.abs(np.asarray(certainty) - np.asarray(mean_confidence)).ravel()
    if gaps.size == 0:
        raise ValueError("empty batch")
    counts, edges = np.histogram(gaps, bins=n_bins, range=(0.0, 1.0))
    return edges, counts


def write_gap_table(path, edges, counts, config_hash):
    fh, writer = _csv_writer(path, config_hash, ["bin", "lo", "hi", "count"])
    with fh:
        for i, c in enumerate(counts):
            writer.writerow([i, f"{edges[i]:.10g}", f"{edges[i + 1]:.10g}", int(c)])


def plot_reliability(path, ledger: BinLedger):
    centers = (np.arange(ledger.n_bins) + 0.5) / ledger.n_bins
    width = 1.0 / ledger.n_bins
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.bar(centers, ledger.bin_confidence(), width=width * 0.95,
           color="salmon", alpha=0.7, label="confidence")
    ax.bar(centers, ledger.bin_accuracy(), width=width * 0.95,
           color="steelblue", alpha=0.7, label="accuracy")
    ax.plot([0, 1], [0, 1], "k--", lw=1)
    ax.set_xlabel("confidence")
    ax.set_ylabel("accuracy")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.legend(loc="upper left")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_confidence_histogram(path, all_ledger: BinLedger, incorrect_ledger: BinLedger):
    centers = (np.arange(all_ledger.n_bins) + 0.5) / all_ledger.n_bins
    width = 0.95 / all_ledger.n_bins
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.bar(centers, all_ledger.counts, width=width, color="gray", alpha=0.6, label="all")
    ax.bar(centers, incorrect_ledger.counts, width=width, color="firebrick",
           alpha=0.8, label="incorrect")
    ax.set_xlabel("max-class confidence")
    ax.set_ylabel("count")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_gap_histogram(path, edges, counts):
    centers = 0.5 * (edges[:-1] + edges[1:])
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.bar(centers, counts, width=0.95 * (edges[1] - edges[0]), color="teal")
    ax.set_xlabel("|certainty - mean confidence|")
    ax.set_ylabel("count")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_convergence(path, records):
    epochs = [r["epoch"] for r in records]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    axes[0].plot(epochs, [r["val_ece"] for r in records], label="val ECE")
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("ECE")
    axes[1].plot(epochs, [r["val_sce"] for r in records], label="val SCE", color="darkorange")
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("SCE")
    for ax in axes:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
