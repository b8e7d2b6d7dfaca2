"""SVG figures built from the exported CSV artifacts."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .exceptions import DependencyError  # noqa: E402

plt.rcParams["svg.hashsalt"] = "skillseg"
SVG_META = {"Date": None}


def _read_csv(path: Path) -> list:
    if not path.exists():
        raise DependencyError(f"missing {path.name}; run the stage that exports it first")
    with open(path, encoding="utf-8") as f:
        rows = [line for line in f if not line.startswith("#")]
    return list(csv.DictReader(rows))


def _by_traj(rows) -> dict:
    out: dict = {}
    for r in rows:
        out.setdefault(int(r["traj"]), []).append(r)
    return out


def _pick(trajs: dict, n: int) -> list:
    ids = sorted(trajs)
    if len(ids) <= n:
        return ids
    return [ids[int(i)] for i in np.linspace(0, len(ids) - 1, n)]


def plot_entropy(out_dir, n_traj: int = 3) -> Path:
    """Per-code log-probabilities and entropy with detected change points."""
    out_dir = Path(out_dir)
    trajs = _by_traj(_read_csv(out_dir / "entropy.csv"))
    ids = _pick(trajs, n_traj)
    fig, axes = plt.subplots(len(ids), 1, figsize=(8, 2.6 * len(ids)), squeeze=False)
    for ax, i in zip(axes[:, 0], ids):
        rows = trajs[i]
        t = np.array([int(r["t"]) for r in rows])
        keys = [k for k in rows[0] if k.startswith("log_p")]
        for k in keys:
            ax.plot(t, [float(r[k]) for r in rows], lw=0.8, alpha=0.7)
        ax2 = ax.twinx()
        ax2.plot(t, [float(r["entropy"]) for r in rows], color="black", lw=1.5, label="entropy")
        ax2.set_ylabel("entropy")
        for r in rows:
            if r["change_point"] == "1":
                ax.axvline(int(r["t"]), color="red", ls="--", lw=1)
        ax.set_ylabel("log p(code)")
        ax.set_title(f"trajectory {i}")
    axes[-1, 0].set_xlabel("transition")
    fig.tight_layout()
    path = out_dir / "entropy_traces.svg"
    fig.savefig(path, format="svg", metadata=SVG_META)
    plt.close(fig)
    return path


def plot_error_curves(out_dir, n_traj: int = 3) -> Path:
    """Reconstruction error with candidate (dotted) and final (solid) splits."""
    out_dir = Path(out_dir)
    trajs = _by_traj(_read_csv(out_dir / "error_curves.csv"))
    cand_path, final_path = out_dir / "stage2_candidates.json", out_dir / "final_segments.json"
    if not cand_path.exists() or not final_path.exists():
        raise DependencyError("error-curve plot needs stage2_candidates.json and final_segments.json")
    cand = json.loads(cand_path.read_text(encoding="utf-8"))["segmentations"]
    final = json.loads(final_path.read_text(encoding="utf-8"))["trajectories"]
    ids = _pick(trajs, n_traj)
    fig, axes = plt.subplots(len(ids), 1, figsize=(8, 2.4 * len(ids)), squeeze=False)
    for ax, i in zip(axes[:, 0], ids):
        rows = trajs[i]
        t = [int(r["t"]) for r in rows]
        ax.plot(t, [float(r["error"]) for r in rows], color="0.6", lw=0.8, label="error")
        ax.plot(t, [float(r["smoothed"]) for r in rows], color="tab:blue", lw=1.2, label="smoothed")
        for s in cand[i]["hard"]:
            ax.axvline(s, color="red", lw=1.5)
        for s in cand[i]["soft"]:
            ax.axvline(s, color="tab:orange", ls=":", lw=1.2)
        for s in final[i]["split_indices"]:
            ax.axvline(s, color="tab:green", ls="--", lw=1)
        ax.set_ylabel("error")
        ax.set_title(f"trajectory {i}: macro (red), candidates (orange), final (green)")
    axes[-1, 0].set_xlabel("transition")
    fig.tight_layout()
    path = out_dir / "error_curves.svg"
    fig.savefig(path, format="svg", metadata=SVG_META)
    plt.close(fig)
    return path


def plot_pca(out_dir) -> Path:
    out_dir = Path(out_dir)
    rows = _read_csv(out_dir / "pca.csv")
    fig, ax = plt.subplots(figsize=(6, 5))
    seg = [r for r in rows if r["kind"] == "segment"]
    cen = [r for r in rows if r["kind"] == "centroid"]
    labels = sorted({int(r["label"]) for r in seg})
    cmap = plt.get_cmap("tab10")
    for lab in labels:
        pts = np.array([[float(r["pc1"]), float(r["pc2"])] for r in seg if int(r["label"]) == lab])
        ax.scatter(pts[:, 0], pts[:, 1], s=12, alpha=0.6, color=cmap(lab % 10), label=f"skill {lab}")
    for r in cen:
        lab = int(r["label"])
        ax.scatter(float(r["pc1"]), float(r["pc2"]), marker="X", s=120, color=cmap(lab % 10), edgecolor="black")
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    ax.legend(fontsize=7, loc="best")
    fig.tight_layout()
    path = out_dir / "pca.svg"
    fig.savefig(path, format="svg", metadata=SVG_META)
    plt.close(fig)
    return path


def make_plots(out_dir) -> list:
    return [plot_entropy(out_dir), plot_error_curves(out_dir), plot_pca(out_dir)]
