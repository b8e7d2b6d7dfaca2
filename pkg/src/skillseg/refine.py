"""Split refinement by clustering, per-task alignment to a canonical skill
sequence, and final skill-ID assignment."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .changepoint import smooth
from .exceptions import AlignmentError, UsageError

logger = logging.getLogger(__name__)

INTRINSIC, EXTRINSIC = "intrinsic", "extrinsic"


# k-means -----------------------------------------------------------------------

def _sq_dists(x, centers):
    return ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)


def kmeanspp_seeds(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: each next seed drawn with probability ~ squared
    distance to the nearest seed so far (farthest point once all mass is zero)."""
    chosen = [int(rng.integers(len(x)))]
    d = _sq_dists(x, x[chosen]).min(axis=1)
    for _ in range(1, k):
        total = d.sum()
        nxt = int(rng.choice(len(x), p=d / total)) if total > 0 else int(np.argmax(d))
        chosen.append(nxt)
        d = np.minimum(d, ((x - x[nxt]) ** 2).sum(1))
    return x[chosen].copy()


def lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int = 100):
    """Returns ``(labels, centers, inertia_history)``."""
    centers = centers.copy()
    k = len(centers)
    labels = None
    history = []
    for _ in range(max_iter):
        d = _sq_dists(x, centers)
        new = np.argmin(d, axis=1)
        history.append(float(d[np.arange(len(x)), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = labels == j
            if members.any():
                centers[j] = x[members].mean(axis=0)
            else:
                # re-seed from the point farthest from its own centre
                own = d[np.arange(len(x)), labels]
                far = int(np.argmax(own))
                centers[j] = x[far]
                labels[far] = j
    return labels, centers, history


class LloydKMeans(BaseEstimator, ClusterMixin):
    """Lloyd iterations from k-means++ seeds, best of ``n_init`` restarts.

    Empty clusters are re-seeded at the point farthest from its centre.
    Each run stops when assignments repeat or after ``max_iter`` iterations.
    """

    def __init__(self, n_clusters=3, n_init=10, max_iter=100, random_state=0):
        self.n_clusters = n_clusters
        self.n_init = n_init
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        x = check_array(X, dtype=np.float64)
        k = int(self.n_clusters)
        if k <= 0:
            raise UsageError(f"n_clusters must be > 0, got {k}")
        if len(x) < k:
            raise UsageError(f"need at least {k} points, got {len(x)}")
        if int(self.n_init) < 1:
            raise UsageError("n_init must be >= 1")
        rng = np.random.default_rng(self.random_state)
        best = None
        for _ in range(int(self.n_init)):
            labels, centers, history = lloyd(x, kmeanspp_seeds(x, k, rng), self.max_iter)
            inertia = float(_sq_dists(x, centers)[np.arange(len(x)), labels].sum())
            if best is None or inertia < best[0] - 1e-12:
                best = (inertia, labels, centers, history)
        self.inertia_, self.labels_, self.cluster_centers_, self.inertia_history_ = best
        self.n_iter_ = len(self.inertia_history_)
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        x = check_array(X, dtype=np.float64)
        return np.argmin(_sq_dists(x, self.cluster_centers_), axis=1)


def kmeans(x, k: int, seed: int = 0, max_iter: int = 100, n_init: int = 10):
    model = LloydKMeans(k, n_init, max_iter, seed).fit(x)
    return model.labels_, model.cluster_centers_


# segmentations -------------------------------------------------------------------

@dataclass
class Segmentation:
    """Splits over one trajectory's transition series.

    ``hard`` are macro change points (never removed); ``soft`` are
    micro-segmentation candidates. ``macro_tags`` has one tag per macro
    segment; ``labels`` one cluster or skill label per segment.
    """

    traj_id: int
    task: int
    length: int
    hard: list
    soft: list = field(default_factory=list)
    macro_tags: list = field(default_factory=list)
    labels: list | None = None

    def __post_init__(self):
        self.hard = sorted(int(x) for x in self.hard)
        self.soft = sorted(int(x) for x in set(self.soft) - set(self.hard))
        splits = self.splits
        if any(not 0 < s < self.length for s in splits):
            raise UsageError(f"trajectory {self.traj_id}: splits must lie in (0, {self.length})")
        if self.macro_tags and len(self.macro_tags) != len(self.hard) + 1:
            raise UsageError(f"trajectory {self.traj_id}: need one tag per macro segment")

    @property
    def splits(self) -> list:
        return sorted(self.hard + self.soft)

    def spans(self) -> list:
        b = [0] + self.splits + [self.length]
        return list(zip(b[:-1], b[1:]))

    def __len__(self):
        return len(self.splits) + 1

    def tags(self) -> list:
        """Macro tag inherited by every segment."""
        if not self.macro_tags:
            return [INTRINSIC] * len(self)
        return [self.macro_tags[int(np.searchsorted(self.hard, a, side="right"))] for a, _ in self.spans()]

    def replace(self, soft=None, labels=None) -> "Segmentation":
        return Segmentation(self.traj_id, self.task, self.length, list(self.hard),
                            list(self.soft if soft is None else soft), list(self.macro_tags), labels)

    def state_boundaries(self) -> list:
        """Segment ends in state coordinates (transition ``c`` -> state ``c + 1``)."""
        return [s + 1 for s in self.splits] + [self.length + 1]

    def to_dict(self) -> dict:
        return {
            "traj_id": self.traj_id, "task": self.task, "length": self.length,
            "hard": self.hard, "soft": self.soft, "macro_tags": list(self.macro_tags),
            "labels": None if self.labels is None else [int(x) for x in self.labels],
        }

    @classmethod
    def from_dict(cls, d) -> "Segmentation":
        return cls(int(d["traj_id"]), int(d["task"]), int(d["length"]), d["hard"], d["soft"],
                   d.get("macro_tags", []), d.get("labels"))


EmbedFn = Callable[[Segmentation], np.ndarray]


def refine_iteration(segmentations: Sequence[Segmentation], embeddings: Sequence[np.ndarray], k_seg: int,
                     seed: int = 0):
    """Cluster every segment, then drop soft splits between same-cluster neighbours."""
    counts = [len(s) for s in segmentations]
    for seg, emb in zip(segmentations, embeddings):
        if len(emb) != len(seg):
            raise UsageError(f"trajectory {seg.traj_id}: {len(emb)} embeddings for {len(seg)} segments")
    x = np.vstack(embeddings)
    labels, _ = kmeans(x, min(k_seg, len(x)), seed)
    out, changed, pos = [], False, 0
    for seg, n in zip(segmentations, counts):
        lab = labels[pos:pos + n]
        pos += n
        splits = seg.splits
        drop = {s for i, s in enumerate(splits) if s in seg.soft and lab[i] == lab[i + 1]}
        changed |= bool(drop)
        kept = [s for s in seg.soft if s not in drop]
        new_labels = [int(lab[0])] + [int(lab[i + 1]) for i, s in enumerate(splits) if s not in drop]
        out.append(seg.replace(soft=kept, labels=new_labels))
    return out, changed


def refine_until_converged(segmentations: Sequence[Segmentation], embed: EmbedFn, k_seg: int, seed: int = 0,
                           max_rounds: int = 10) -> list:
    """Re-embed, cluster and prune until no split is removed (or ``max_rounds``)."""
    segs = list(segmentations)
    history = [sum(len(s.splits) for s in segs)]
    for _ in range(max_rounds):
        segs, changed = refine_iteration(segs, [embed(s) for s in segs], k_seg, seed)
        history.append(sum(len(s.splits) for s in segs))
        if history[-1] > history[-2] or (changed and history[-1] == history[-2]):
            raise AssertionError(f"split count not decreasing: {history}")
        if not changed:
            break
    logger.info("refinement split counts per round: %s", history)
    return segs


# canonical sequence and alignment ------------------------------------------------

def levenshtein(a: Sequence, b: Sequence) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def canonical_sequence(sequences: Sequence[Sequence[int]]) -> tuple:
    """Modal sequence; ties by smallest summed edit distance, then lexicographic."""
    seqs = [tuple(int(v) for v in s) for s in sequences]
    if not seqs:
        raise UsageError("need at least one sequence")
    counts = Counter(seqs)
    top = max(counts.values())
    tied = [s for s, c in counts.items() if c == top]
    return min(tied, key=lambda s: (sum(levenshtein(s, o) for o in seqs), s))


@dataclass
class TaskProgram:
    task: int
    skills: list

    def __post_init__(self):
        if not self.skills:
            raise UsageError(f"task {self.task}: empty program")
        self.skills = [int(k) for k in self.skills]

    def __len__(self):
        return len(self.skills)


def _curvature(curve: np.ndarray, window: int = 5) -> np.ndarray:
    y = smooth(curve, window) if len(curve) >= window else np.asarray(curve, dtype=np.float64)
    d2 = np.full(len(y), -np.inf)
    if len(y) >= 3:
        d2[1:-1] = y[2:] - 2 * y[1:-1] + y[:-2]
    return d2


def force_align(seg: Segmentation, program: TaskProgram, embed: EmbedFn, curve: np.ndarray,
                min_length: int = 1, smooth_window: int = 5) -> Segmentation:
    """Merge or split until the segment count equals the program length,
    then label segments positionally.

    Too many segments: drop the soft split whose neighbours are closest in
    embedding space. Too few: split the longest segment at its maximum
    second difference of the smoothed error curve.
    """
    p = len(program)
    curve = np.asarray(curve, dtype=np.float64)
    if len(curve) != seg.length:
        raise UsageError(f"trajectory {seg.traj_id}: error curve length {len(curve)} != {seg.length}")
    while len(seg) > p:
        if not seg.soft:
            raise AlignmentError(f"trajectory {seg.traj_id}: {len(seg)} segments but only hard splits left; "
                                 f"cannot reach program length {p}")
        emb = embed(seg)
        splits = seg.splits
        dist = {s: float(np.sum((emb[i] - emb[i + 1]) ** 2)) for i, s in enumerate(splits) if s in seg.soft}
        worst = min(dist, key=lambda s: (dist[s], s))
        seg = seg.replace(soft=[s for s in seg.soft if s != worst])
    while len(seg) < p:
        spans = seg.spans()
        order = sorted(range(len(spans)), key=lambda i: (-(spans[i][1] - spans[i][0]), i))
        a, b = spans[order[0]]
        if b - a < 2 * min_length:
            raise AlignmentError(f"trajectory {seg.traj_id}: longest segment ({b - a} steps) too short to split "
                                 f"towards program length {p}")
        d2 = _curvature(curve[a:b], smooth_window)
        d2[:min_length] = -np.inf
        d2[len(d2) - min_length + 1:] = -np.inf
        d2[0] = -np.inf
        cut = a + int(np.argmax(d2))
        seg = seg.replace(soft=seg.soft + [cut])
    return seg.replace(labels=list(program.skills))


# skill library -------------------------------------------------------------------

@dataclass
class SkillLibrary:
    """Intrinsic IDs ``0..K_int-1`` (clustered) and extrinsic IDs from
    ``K_int`` (one per task and program position). ``centroids`` holds one
    embedding per skill."""

    n_intrinsic: int
    centroids: np.ndarray
    extrinsic: dict          # id -> (task, position)
    programs: dict           # task -> TaskProgram

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        ext_ids = sorted(self.extrinsic)
        if any(i < self.n_intrinsic for i in ext_ids):
            raise UsageError("extrinsic IDs overlap the intrinsic range")
        if ext_ids and ext_ids != list(range(self.n_intrinsic, self.n_intrinsic + len(ext_ids))):
            raise UsageError("extrinsic IDs must be contiguous after the intrinsic range")
        if len(self.centroids) != self.n_skills:
            raise UsageError(f"{len(self.centroids)} centroids for {self.n_skills} skills")
        for prog in self.programs.values():
            bad = [k for k in prog.skills if not 0 <= k < self.n_skills]
            if bad:
                raise UsageError(f"task {prog.task}: invalid skill IDs {bad}")

    @property
    def n_skills(self) -> int:
        return self.n_intrinsic + len(self.extrinsic)

    def is_intrinsic(self, skill: int) -> bool:
        return 0 <= skill < self.n_intrinsic

    def to_dict(self) -> dict:
        return {
            "n_intrinsic": self.n_intrinsic,
            "centroids": self.centroids.tolist(),
            "extrinsic": {str(k): [int(v[0]), int(v[1])] for k, v in sorted(self.extrinsic.items())},
            "programs": {str(t): p.skills for t, p in sorted(self.programs.items())},
        }

    @classmethod
    def from_dict(cls, d) -> "SkillLibrary":
        return cls(int(d["n_intrinsic"]), np.array(d["centroids"]),
                   {int(k): tuple(v) for k, v in d["extrinsic"].items()},
                   {int(t): TaskProgram(int(t), p) for t, p in d["programs"].items()})


@dataclass
class SkillAssignment:
    library: SkillLibrary
    segmentations: list          # final labels are skill IDs
    intrinsic_raw: dict          # (traj_id, position) -> raw k-means label


def assign_skill_ids(segmentations: Sequence[Segmentation], embeddings: Sequence[np.ndarray], n_intrinsic: int,
                     seed: int = 0) -> SkillAssignment:
    """Cluster intrinsic segments into ``n_intrinsic`` IDs; key extrinsic IDs
    by ``(task, position)``. Each task's program takes, per position, the
    majority ID of its segments, and every trajectory is relabelled with it
    so same-task sequences stay identical."""
    by_task: dict = {}
    for seg in segmentations:
        by_task.setdefault(seg.task, []).append(seg)
    # a position is intrinsic if most of its segments were tagged so
    pos_tag = {}
    for task, segs in sorted(by_task.items()):
        n = {len(s) for s in segs}
        if len(n) != 1:
            raise AlignmentError(f"task {task}: trajectories not aligned (segment counts {sorted(n)})")
        for j in range(n.pop()):
            votes = Counter(s.tags()[j] for s in segs)
            pos_tag[task, j] = INTRINSIC if votes[INTRINSIC] >= votes[EXTRINSIC] else EXTRINSIC
    keys, rows = [], []
    for seg, emb in zip(segmentations, embeddings):
        for j in range(len(seg)):
            if pos_tag[seg.task, j] == INTRINSIC:
                keys.append((seg.traj_id, j))
                rows.append(emb[j])
    if len(rows) < n_intrinsic:
        raise UsageError(f"K_int={n_intrinsic} exceeds the {len(rows)} intrinsic segments")
    raw = {}
    centroids = np.zeros((0, embeddings[0].shape[1] if len(embeddings) else 0))
    if n_intrinsic > 0:
        labels, centroids = kmeans(np.array(rows), n_intrinsic, seed)
        raw = {k: int(v) for k, v in zip(keys, labels)}
    extrinsic, ext_rows = {}, {}
    next_id = n_intrinsic
    for task in sorted(by_task):
        for j in range(len(by_task[task][0])):
            if pos_tag[task, j] == EXTRINSIC:
                extrinsic[next_id] = (task, j)
                ext_rows[next_id] = []
                next_id += 1
    ext_id = {v: k for k, v in extrinsic.items()}
    programs, out = {}, []
    for task in sorted(by_task):
        skills = []
        for j in range(len(by_task[task][0])):
            if pos_tag[task, j] == INTRINSIC:
                votes = Counter(raw[s.traj_id, j] for s in by_task[task])
                skills.append(min(votes, key=lambda k: (-votes[k], k)))
            else:
                skills.append(ext_id[task, j])
        programs[task] = TaskProgram(task, skills)
    for seg, emb in zip(segmentations, embeddings):
        for j in range(len(seg)):
            if pos_tag[seg.task, j] == EXTRINSIC:
                ext_rows[ext_id[seg.task, j]].append(emb[j])
        out.append(seg.replace(labels=list(programs[seg.task].skills)))
    ext_centroids = [np.mean(ext_rows[k], axis=0) for k in sorted(extrinsic)]
    all_centroids = np.vstack([centroids] + [c[None] for c in ext_centroids]) if ext_centroids else centroids
    library = SkillLibrary(n_intrinsic, all_centroids, extrinsic, programs)
    return SkillAssignment(library, out, raw)


def cluster_purity(assigned, truth) -> float:
    """Fraction of items whose cluster's majority true label equals their own."""
    assigned, truth = list(assigned), list(truth)
    if not assigned:
        raise UsageError("no items")
    total = 0
    for c in set(assigned):
        members = [t for a, t in zip(assigned, truth) if a == c]
        total += Counter(members).most_common(1)[0][1]
    return total / len(assigned)
