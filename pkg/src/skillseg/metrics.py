"""Boundary scores, one-step MSE tables, termination accuracy and PCA export."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .exceptions import UsageError


@dataclass
class BoundaryScore:
    precision: float
    recall: float
    f1: float
    matches: list = field(default_factory=list)   # (pred, gt) pairs

    def to_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1,
                "matches": [list(m) for m in self.matches]}


def match_boundaries(predicted, truth, tol: int) -> list:
    """Greedy one-to-one matching: closest pairs first, ties to smaller indices."""
    pairs = sorted((abs(p - g), p, g) for p in predicted for g in truth if abs(p - g) <= tol)
    used_p, used_g, out = set(), set(), []
    for _, p, g in pairs:
        if p not in used_p and g not in used_g:
            used_p.add(p)
            used_g.add(g)
            out.append((int(p), int(g)))
    return sorted(out)


def _prf(tp, n_pred, n_gt):
    p = tp / n_pred if n_pred else (1.0 if n_gt == 0 else 0.0)
    r = tp / n_gt if n_gt else (1.0 if n_pred == 0 else 0.0)
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def boundary_f1(predicted, truth, tol: int = 4) -> BoundaryScore:
    predicted, truth = [int(x) for x in predicted], [int(x) for x in truth]
    for name, seq in (("predicted", predicted), ("truth", truth)):
        if any(a >= b for a, b in zip(seq, seq[1:])):
            raise UsageError(f"{name} boundaries must be strictly ascending")
    matches = match_boundaries(predicted, truth, tol)
    return BoundaryScore(*_prf(len(matches), len(predicted), len(truth)), matches)


def pooled_boundary_f1(pairs, tol: int = 4) -> BoundaryScore:
    """Micro-averaged score over many ``(predicted, truth)`` pairs."""
    tp = n_pred = n_gt = 0
    for pred, gt in pairs:
        s = boundary_f1(pred, gt, tol)
        tp += len(s.matches)
        n_pred += len(pred)
        n_gt += len(gt)
    return BoundaryScore(*_prf(tp, n_pred, n_gt))


# one-step MSE ------------------------------------------------------------------

@dataclass
class MseRow:
    method: str
    per_task: dict      # task -> (mse, std, n)

    @property
    def average(self) -> float:
        n = sum(v[2] for v in self.per_task.values())
        return float(sum(v[0] * v[2] for v in self.per_task.values()) / n)


@dataclass
class MseTable:
    rows: list = field(default_factory=list)

    def row(self, method: str) -> MseRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def tasks(self) -> list:
        return sorted({t for r in self.rows for t in r.per_task})

    def to_text(self, scale: float = 1e2) -> str:
        """Fixed-width table; values are multiplied by ``scale``."""
        tasks = self.tasks()
        head = f"{'method':<18}" + "".join(f"{'task ' + str(t):>20}" for t in tasks) + f"{'average':>12}"
        lines = [f"one-step action MSE (normalized units, x{scale:g})", head]
        for r in self.rows:
            cells = "".join(f"{r.per_task[t][0] * scale:>11.3f} +/- {r.per_task[t][1] * scale:<5.2f}" for t in tasks)
            lines.append(f"{r.method:<18}{cells}{r.average * scale:>12.3f}")
        counts = self.rows[0].per_task if self.rows else {}
        lines.append("test pairs per task: " + ", ".join(f"{t}: {counts[t][2]}" for t in tasks))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "task", "mse", "std", "n"])
        for r in self.rows:
            for t in sorted(r.per_task):
                m, s, n = r.per_task[t]
                w.writerow([r.method, t, repr(float(m)), repr(float(s)), n])
            w.writerow([r.method, "average", repr(r.average), "", sum(v[2] for v in r.per_task.values())])
        return buf.getvalue()


def one_step_mse(method: str, predicted, actual, tasks) -> MseRow:
    """Per-task mean (over pairs and action dims) of squared error, with the
    standard deviation of the per-pair errors."""
    predicted = np.asarray(predicted, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    tasks = np.asarray(tasks)
    if len(actual) == 0:
        raise UsageError("empty test split")
    if predicted.shape != actual.shape or len(tasks) != len(actual):
        raise UsageError("predicted, actual and tasks must align")
    err = ((predicted - actual) ** 2).mean(axis=1)
    per = {}
    for t in sorted(np.unique(tasks).tolist()):
        e = err[tasks == t]
        per[int(t)] = (float(e.mean()), float(e.std()), int(len(e)))
    return MseRow(method, per)


# termination -------------------------------------------------------------------

def first_crossing(probs, threshold: float, grace: int = 0):
    """Index of the first probability above ``threshold`` at or after ``grace``."""
    probs = np.asarray(probs, dtype=np.float64)
    hits = np.flatnonzero(probs[grace:] > threshold)
    return None if len(hits) == 0 else int(hits[0]) + grace


def termination_accuracy(prob_fn, segments, threshold: float = 0.5, tol: int = 4, grace: int = 0) -> float:
    """``segments`` are state arrays, each running from a segment's first
    state to the end of the trajectory, with the true last index of the
    segment: ``(states, end_index)``. A segment counts as correct if the
    first crossing lies within ``tol`` of its end."""
    segments = list(segments)
    if not segments:
        raise UsageError("no segments to evaluate")
    correct = 0
    for states, end in segments:
        hit = first_crossing(prob_fn(states), threshold, grace)
        correct += hit is not None and abs(hit - end) <= tol
    return correct / len(segments)


# PCA ------------------------------------------------------------------------------

@dataclass
class PcaResult:
    mean: np.ndarray
    components: np.ndarray     # 2 x d, orthonormal rows
    eigenvalues: np.ndarray    # all, descending
    coords: np.ndarray         # n x 2
    degenerate: bool

    @property
    def explained(self) -> np.ndarray:
        return self.eigenvalues[:2]


def pca2(x) -> PcaResult:
    """Top-2 principal components by eigendecomposition of the covariance.
    Each component is signed so that its largest-magnitude loading is positive."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise UsageError("need at least 2 embeddings")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (len(x) - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = np.clip(vals[order], 0.0, None), vecs[:, order]
    comps = np.zeros((2, x.shape[1]))
    k = min(2, x.shape[1])
    comps[:k] = vecs[:, :k].T
    for i in range(k):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    degenerate = len(vals) < 2 or vals[1] <= 1e-12 * max(vals[0], 1e-300)
    return PcaResult(mean, comps, vals, xc @ comps.T, bool(degenerate))


def export_pca(embeddings, labels, centroids=None) -> tuple:
    """Returns ``(PcaResult, csv_text)``; centroids are projected and marked."""
    res = pca2(embeddings)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if res.degenerate:
        buf.write("# degenerate: second component has zero variance\n")
    w.writerow(["kind", "label", "pc1", "pc2"])
    for (a, b), lab in zip(res.coords, labels):
        w.writerow(["segment", int(lab), f"{a:.10g}", f"{b:.10g}"])
    if centroids is not None:
        cc = (np.asarray(centroids, dtype=np.float64) - res.mean) @ res.components.T
        for i, (a, b) in enumerate(cc):
            w.writerow(["centroid", i, f"{a:.10g}", f"{b:.10g}"])
    return res, buf.getvalue()
