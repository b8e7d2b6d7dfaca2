import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skillseg.exceptions import AlignmentError, UsageError
from skillseg.pipeline import load_assignment, load_candidates, load_macro
from skillseg.refine import (EXTRINSIC, INTRINSIC, LloydKMeans, Segmentation, SkillLibrary, TaskProgram,
                             assign_skill_ids, canonical_sequence, cluster_purity, force_align, kmeans,
                             kmeanspp_seeds, levenshtein, lloyd, refine_iteration, refine_until_converged)


# k-means -----------------------------------------------------------------------------------

def test_separated_blobs():
    rng = np.random.default_rng(0)
    x = np.vstack([rng.normal(0, 0.1, size=(20, 2)), rng.normal(10, 0.1, size=(20, 2))])
    labels, _ = kmeans(x, 2, seed=0)
    assert len(set(labels[:20])) == 1 and len(set(labels[20:])) == 1 and labels[0] != labels[-1]


def test_k_equals_n_has_zero_inertia():
    x = np.random.default_rng(1).normal(size=(7, 3))
    assert LloydKMeans(7).fit(x).inertia_ == pytest.approx(0.0, abs=1e-20)


def _exhaustive_two_means(x):
    best = None
    for mask in itertools.product([0, 1], repeat=len(x)):
        m = np.array(mask, dtype=bool)
        if m.all() or not m.any():
            continue
        cost = ((x[m] - x[m].mean()) ** 2).sum() + ((x[~m] - x[~m].mean()) ** 2).sum()
        if best is None or cost < best[0]:
            best = (cost, sorted([x[m].mean(), x[~m].mean()]))
    return best


def test_one_dimensional_optimum():
    x = np.array([0.0, 1.0, 10.0, 11.0])
    _, centers = kmeans(x[:, None], 2, seed=0)
    cost, oracle = _exhaustive_two_means(x)
    np.testing.assert_allclose(sorted(centers[:, 0]), oracle)
    np.testing.assert_allclose(sorted(centers[:, 0]), [0.5, 10.5])


def test_kmeans_rejects_bad_k():
    with pytest.raises(UsageError):
        LloydKMeans(0).fit(np.zeros((3, 1)))
    with pytest.raises(UsageError):
        LloydKMeans(5).fit(np.zeros((3, 1)))


def test_kmeans_deterministic_and_predict():
    x = np.random.default_rng(2).normal(size=(40, 2))
    a, b = LloydKMeans(4, random_state=3).fit(x), LloydKMeans(4, random_state=3).fit(x)
    np.testing.assert_array_equal(a.labels_, b.labels_)
    np.testing.assert_array_equal(a.predict(x), a.labels_)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5))
def test_lloyd_inertia_non_increasing_property(seed, k):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(30, 2))
    _, _, history = lloyd(x, kmeanspp_seeds(x, k, rng))
    assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))


def test_empty_cluster_is_reseeded():
    x = np.array([[0.0], [0.1], [10.0]])
    labels, centers, _ = lloyd(x, np.array([[0.0], [100.0]]))
    assert set(labels.tolist()) == {0, 1}


# segmentations -------------------------------------------------------------------------------

def test_segmentation_spans_and_validation():
    seg = Segmentation(0, 0, 30, hard=[10], soft=[20, 10])
    assert seg.soft == [20] and seg.splits == [10, 20]
    assert seg.spans() == [(0, 10), (10, 20), (20, 30)]
    assert seg.state_boundaries() == [11, 21, 31]
    with pytest.raises(UsageError):
        Segmentation(0, 0, 30, hard=[30])
    with pytest.raises(UsageError):
        Segmentation(0, 0, 30, hard=[10], macro_tags=[INTRINSIC])


def test_segment_tags_follow_macro_segments():
    seg = Segmentation(0, 0, 40, hard=[20], soft=[10, 30], macro_tags=[INTRINSIC, EXTRINSIC])
    assert seg.tags() == [INTRINSIC, INTRINSIC, EXTRINSIC, EXTRINSIC]
    assert Segmentation.from_dict(seg.to_dict()) == seg


# refinement ------------------------------------------------------------------------------------

def _far():
    return Segmentation(1, 0, 10, hard=[]), np.array([[100.0]])


def test_distinct_clusters_keep_splits():
    seg = Segmentation(0, 0, 30, hard=[], soft=[10, 20])
    other, e = _far()
    out, changed = refine_iteration([seg, other], [np.array([[0.0], [100.0], [0.0]]), e], k_seg=2)
    assert not changed and out[0].splits == [10, 20]


def test_same_cluster_soft_split_removed():
    seg = Segmentation(0, 0, 30, hard=[], soft=[10, 20])
    other, e = _far()
    out, changed = refine_iteration([seg, other], [np.array([[0.0], [0.0], [100.0]]), e], k_seg=2)
    assert changed and out[0].splits == [20] and len(out[0].labels) == 2


def test_same_cluster_hard_split_kept():
    seg = Segmentation(0, 0, 30, hard=[10], soft=[20])
    other, e = _far()
    out, _ = refine_iteration([seg, other], [np.zeros((3, 1)), e], k_seg=2)
    assert out[0].splits == [10] and out[0].hard == [10]


def test_embedding_count_mismatch():
    with pytest.raises(UsageError):
        refine_iteration([Segmentation(0, 0, 30, hard=[], soft=[10])], [np.zeros((3, 1))], k_seg=1)


# controlled perturbation: embeddings from ground-truth subtask content ----------------------

def _label_embedder(truth, centers, rng_seed=0):
    """Segment embedding = mean of per-step centres of its true subtasks plus tiny jitter."""
    def embed(seg):
        rng = np.random.default_rng(rng_seed + seg.traj_id)
        rows = [centers[truth[seg.traj_id][a:b]].mean(axis=0) for a, b in seg.spans()]
        return np.array(rows) + rng.normal(0, 1e-3, size=(len(rows), centers.shape[1]))
    return embed


def _perturbed_case(seed=0, n=12):
    rng = np.random.default_rng(seed)
    centers = rng.normal(0, 5, size=(4, 3))
    segs, truth, injected, gt = [], [], [], []
    for i in range(n):
        lengths = rng.integers(12, 20, size=4)
        bounds = np.cumsum(lengths)[:-1].tolist()
        lab = np.repeat(np.arange(4), lengths)
        inj = [int(bounds[0] // 2), int((bounds[1] + bounds[2]) // 2)]
        segs.append(Segmentation(i, 0, len(lab), hard=[bounds[1]], soft=[bounds[0], bounds[2]] + inj))
        truth.append(lab)
        injected.append(inj)
        gt.append(bounds)
    return segs, truth, centers, injected, gt


def test_injected_splits_removed_and_true_splits_kept():
    segs, truth, centers, injected, gt = _perturbed_case()
    out = refine_until_converged(segs, _label_embedder(truth, centers), k_seg=4)
    for seg, inj, bounds in zip(out, injected, gt):
        assert seg.splits == bounds
        assert not set(inj) & set(seg.splits)


def test_already_converged_is_unchanged_and_idempotent():
    segs, truth, centers, _, _ = _perturbed_case(1)
    embed = _label_embedder(truth, centers)
    once = refine_until_converged(segs, embed, k_seg=4)
    twice = refine_until_converged(once, embed, k_seg=4)
    assert [s.splits for s in once] == [s.splits for s in twice]
    assert [s.labels for s in once] == [s.labels for s in twice]


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_hard_splits_survive_refinement_property(seed):
    rng = np.random.default_rng(seed)
    segs = []
    for i in range(5):
        pts = sorted(rng.choice(np.arange(1, 40), size=5, replace=False).tolist())
        segs.append(Segmentation(i, 0, 40, hard=pts[:2], soft=pts[2:]))
    table = rng.normal(size=(40, 2))
    embed = lambda s: np.array([table[a:b].mean(0) for a, b in s.spans()])  # noqa: E731
    out = refine_until_converged(segs, embed, k_seg=3, seed=seed)
    for before, after in zip(segs, out):
        assert set(before.hard) <= set(after.splits)
        assert set(after.soft) <= set(before.soft)


# canonical sequence -------------------------------------------------------------------------

def test_levenshtein_examples():
    assert levenshtein("kitten", "sitting") == 3
    assert levenshtein([], [1, 2]) == 2
    assert levenshtein([1, 2, 3], [1, 2, 3]) == 0


def test_canonical_shared_and_mode():
    assert canonical_sequence([[1, 2], [1, 2]]) == (1, 2)
    a, b = [0, 1, 2], [0, 2]
    assert canonical_sequence([a, a, b]) == tuple(a)


def test_canonical_tie_by_edit_distance():
    a, b, c = (0, 1, 2), (3, 4, 5), (0, 1, 5)
    pop = [a, a, b, b, c]
    # summed distances: a -> 0+0+3+3+1 = 7, b -> 3+3+0+0+2 = 8
    assert sum(levenshtein(a, s) for s in pop) == 7 and sum(levenshtein(b, s) for s in pop) == 8
    assert canonical_sequence([b, b, a, a, c]) == a


def test_canonical_tie_lexicographic():
    assert canonical_sequence([(1,), (1,), (0,), (0,)]) == (0,)
    with pytest.raises(UsageError):
        canonical_sequence([])


# force alignment ------------------------------------------------------------------------------

def _table_embed(rows):
    def embed(seg):
        return np.array([rows[a:b].mean(axis=0) for a, b in seg.spans()])
    return embed


def test_count_equal_assigns_positionally():
    seg = Segmentation(0, 0, 30, hard=[10], soft=[20])
    out = force_align(seg, TaskProgram(0, [7, 8, 9]), _table_embed(np.zeros((30, 1))), np.zeros(30))
    assert out.splits == [10, 20] and out.labels == [7, 8, 9]


def test_one_merge_at_closest_pair():
    rows = np.r_[np.zeros(10), np.full(10, 5.0), np.full(10, 5.2), np.full(10, 9.0)][:, None]
    seg = Segmentation(0, 0, 40, hard=[], soft=[10, 20, 30])
    embed = _table_embed(rows)
    emb = embed(seg)
    gaps = {s: np.sum((emb[i] - emb[i + 1]) ** 2) for i, s in enumerate(seg.splits)}
    out = force_align(seg, TaskProgram(0, [0, 1, 2]), embed, np.zeros(40))
    assert out.splits == sorted(set(seg.splits) - {min(gaps, key=gaps.get)}) == [10, 30]


def test_one_split_at_peak_curvature_of_longest():
    curve = np.zeros(50)
    curve[15:40] = np.maximum(0.0, np.arange(25.0) - 12)  # kink at 27 inside the longest segment
    seg = Segmentation(0, 0, 50, hard=[15], soft=[40])
    out = force_align(seg, TaskProgram(0, [0, 1, 2, 3]), _table_embed(np.zeros((50, 1))), curve,
                      smooth_window=1)
    d2 = np.full(25, -np.inf)
    y = curve[15:40]
    d2[1:-1] = y[2:] - 2 * y[1:-1] + y[:-2]
    assert out.splits == [15, 15 + int(np.argmax(d2)), 40] == [15, 27, 40]


def test_alignment_errors():
    embed = _table_embed(np.zeros((30, 1)))
    with pytest.raises(AlignmentError):
        force_align(Segmentation(0, 0, 30, hard=[10, 20]), TaskProgram(0, [1, 2]), embed, np.zeros(30))
    with pytest.raises(AlignmentError):
        force_align(Segmentation(0, 0, 3, hard=[]), TaskProgram(0, [1, 2, 3, 4]), embed, np.zeros(3),
                    min_length=2)
    with pytest.raises(UsageError):
        force_align(Segmentation(0, 0, 30, hard=[]), TaskProgram(0, [1]), embed, np.zeros(29))
    with pytest.raises(UsageError):
        TaskProgram(0, [])


# skill IDs ------------------------------------------------------------------------------------

def _two_task_case():
    segs, embs = [], []
    rng = np.random.default_rng(0)
    base = {("a",): 0.0, ("b",): 10.0}
    for i in range(6):
        task = i % 2
        segs.append(Segmentation(i, task, 30, hard=[20], soft=[10], macro_tags=[INTRINSIC, EXTRINSIC]))
        # positions 0 and 1 are shared primitives a, b; the tail is task specific
        embs.append(np.array([[base["a",]], [base["b",]], [50.0 + 20 * task]]) + rng.normal(0, 0.01, (3, 1)))
    return segs, embs


def test_assign_ids_counts_and_programs():
    segs, embs = _two_task_case()
    res = assign_skill_ids(segs, embs, n_intrinsic=2)
    lib = res.library
    assert lib.n_skills == 4 and sorted(lib.extrinsic) == [2, 3]
    assert lib.extrinsic[2] == (0, 2) and lib.extrinsic[3] == (1, 2)
    p0, p1 = lib.programs[0].skills, lib.programs[1].skills
    assert p0[:2] == p1[:2] and p0[0] != p0[1]
    assert p0[2] != p1[2]
    for seg in res.segmentations:
        assert seg.labels == lib.programs[seg.task].skills
    back = SkillLibrary.from_dict(lib.to_dict())
    assert back.programs[1].skills == p1 and back.n_intrinsic == 2


def test_assign_ids_rejects_large_k():
    segs, embs = _two_task_case()
    with pytest.raises(UsageError):
        assign_skill_ids(segs, embs, n_intrinsic=13)


def test_library_validation():
    with pytest.raises(UsageError):
        SkillLibrary(2, np.zeros((3, 1)), {1: (0, 0)}, {})
    with pytest.raises(UsageError):
        SkillLibrary(1, np.zeros((2, 1)), {1: (0, 0)}, {0: TaskProgram(0, [5])})


def test_cluster_purity():
    assert cluster_purity([0, 0, 1, 1], ["a", "a", "b", "c"]) == 0.75
    assert cluster_purity([1, 1, 1], [2, 2, 2]) == 1.0


# benchmark run ------------------------------------------------------------------------------

def test_benchmark_library_structure(default_run):
    assignment, _, _ = load_assignment(default_run)
    lib = assignment.library
    assert lib.n_intrinsic == 3 and lib.n_skills == 6
    ext_tasks = [task for task, _ in lib.extrinsic.values()]
    assert sorted(ext_tasks) == [0, 1, 2]


def test_benchmark_hard_splits_preserved(default_run):
    macro = load_macro(default_run)
    candidates, _ = load_candidates(default_run)
    assignment, _, _ = load_assignment(default_run)
    for m, cand, final in zip(macro, candidates, assignment.segmentations):
        assert cand.hard == m.change_points
        assert final.hard == m.change_points


def test_benchmark_same_task_same_sequence(default_run):
    assignment, _, _ = load_assignment(default_run)
    for task in (0, 1, 2):
        assert len({tuple(s.labels) for s in assignment.segmentations if s.task == task}) == 1
