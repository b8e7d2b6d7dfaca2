"""In-memory stage functions. The artifact-level driver lives in
:mod:`skillseg.pipeline`; everything here is pure given its inputs."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .changepoint import PeltConfig
from .config import PipelineConfig
from .dataset import SyntheticKitchenSpec, Trajectory, TrajectoryScaler, transitions_of
from .evqvae import EVQVAE, MacroSegmentation, MacroSegmenter
from .exceptions import AlignmentError, UsageError
from .metrics import MseTable, first_crossing, one_step_mse, pooled_boundary_f1, termination_accuracy
from .policy import ExecutorConfig, SkillPolicy, TerminationClassifier, rollout, termination_labels
from .refine import (EXTRINSIC, INTRINSIC, Segmentation, SkillAssignment, TaskProgram, assign_skill_ids,
                     canonical_sequence, cluster_purity, force_align, refine_until_converged)
from .seqvae import (PeakConfig, SeqVAE, candidate_splits, embed_segments, extract_windows,
                     reconstruction_error_curve)

logger = logging.getLogger(__name__)

METHOD_ROWS = ("skill-onehot", "skill-embed", "skill-embed-centroid", "uncond-bc", "task-bc")


# stage 1 -------------------------------------------------------------------------

def fit_stage1(dataset, cfg: PipelineConfig, seed: int) -> EVQVAE:
    s1 = cfg.stage1
    x, c = transitions_of(dataset)
    model = EVQVAE(action_dim=dataset[0].actions.shape[1], n_codes=s1.n_codes, codes_per_task=s1.codes_per_task,
                   code_dim=s1.code_dim, hidden=tuple(s1.hidden), beta_commit=s1.beta_commit,
                   gamma_div=s1.gamma_div, learning_rate=s1.learning_rate, n_steps=s1.n_steps,
                   batch_size=s1.batch_size, random_state=seed)
    return model.fit(x, c)


def segment_stage1(model: EVQVAE, dataset, cfg: PipelineConfig):
    """Returns ``(traces, macro segmentations, threshold)``."""
    s1 = cfg.stage1
    traces = [model.entropy_trace(t.transitions) for t in dataset]
    logs = [tr.log_entropy for tr in traces]
    seg = MacroSegmenter(s1.penalty, s1.min_size, s1.bandwidth).fit(logs)
    macro = seg.predict(logs, [len(t) - 1 for t in dataset])
    return traces, macro, seg.threshold_


# stage 2 -------------------------------------------------------------------------

def fit_stage2(dataset, macro, cfg: PipelineConfig, seed: int) -> SeqVAE:
    s2 = cfg.stage2
    ws = extract_windows([t.transitions for t in dataset], [t.task for t in dataset],
                         [m.segments() for m in macro], s2.window, s2.stride)
    model = SeqVAE(action_dim=dataset[0].actions.shape[1], latent_dim=s2.latent_dim, hidden=tuple(s2.hidden),
                   alpha_kl=s2.alpha_kl, learning_rate=s2.learning_rate, n_steps=s2.n_steps,
                   batch_size=s2.batch_size, random_state=seed)
    return model.fit(ws)


def peak_config(cfg: PipelineConfig) -> PeakConfig:
    s2 = cfg.stage2
    return PeakConfig(s2.smooth_window, s2.prominence, s2.min_gap, s2.edge_margin)


def split_stage2(model: SeqVAE, dataset, macro, cfg: PipelineConfig):
    """Returns ``(segmentations with soft candidates, per-trajectory error curves)``."""
    segs, curves = [], []
    for i, (traj, m) in enumerate(zip(dataset, macro)):
        trans = traj.transitions
        curve = np.zeros(len(trans))
        soft = []
        for a, b in m.segments():
            part = reconstruction_error_curve(model, trans, traj.task, (a, b), stride=1)
            curve[a:b] = part
            soft += candidate_splits(part, peak_config(cfg), offset=a)
        segs.append(Segmentation(i, traj.task, len(trans), list(m.change_points), soft, list(m.tags)))
        curves.append(curve)
    return segs, curves


# refinement and alignment ----------------------------------------------------------

def embedder(model: SeqVAE, dataset):
    return lambda seg: embed_segments(model, dataset[seg.traj_id].transitions, seg.spans())


@dataclass
class AlignmentResult:
    refined: list
    aligned: list
    canonical: dict            # task -> tuple of cluster labels
    assignment: SkillAssignment
    embeddings: list


def refine_stage(model: SeqVAE, dataset, segs, cfg: PipelineConfig, seed: int) -> list:
    r = cfg.refine
    return refine_until_converged(segs, embedder(model, dataset), r.k_seg, seed, r.max_rounds)


def align_stage(model: SeqVAE, dataset, refined, curves, cfg: PipelineConfig, seed: int) -> AlignmentResult:
    """Canonical sequences, force alignment and skill IDs; asserts that
    same-task trajectories end up with identical skill sequences."""
    embed = embedder(model, dataset)
    canonical = {}
    for task in sorted({s.task for s in refined}):
        canonical[task] = canonical_sequence([s.labels for s in refined if s.task == task])
    aligned = []
    for seg in refined:
        aligned.append(force_align(seg, TaskProgram(seg.task, list(canonical[seg.task])), embed,
                                   curves[seg.traj_id], min_length=2, smooth_window=cfg.stage2.smooth_window))
    for task in canonical:
        seqs = {tuple(s.labels) for s in aligned if s.task == task}
        if len(seqs) != 1:
            raise AlignmentError(f"task {task}: {len(seqs)} distinct skill sequences after alignment")
    embeddings = [embed(s) for s in aligned]
    assignment = assign_skill_ids(aligned, embeddings, cfg.refine.k_int, seed)
    for task in canonical:
        seqs = {tuple(s.labels) for s in assignment.segmentations if s.task == task}
        if len(seqs) != 1:
            raise AlignmentError(f"task {task}: skill sequences differ after ID assignment")
    return AlignmentResult(list(refined), aligned, canonical, assignment, embeddings)


def refine_and_align(model: SeqVAE, dataset, segs, curves, cfg: PipelineConfig, seed: int) -> AlignmentResult:
    return align_stage(model, dataset, refine_stage(model, dataset, segs, cfg, seed), curves, cfg, seed)


def shared_labels(dataset) -> set:
    """Ground-truth subtask labels that occur in more than one task."""
    seen: dict = {}
    for traj in dataset:
        for lab in traj.gt_labels or []:
            seen.setdefault(int(lab), set()).add(traj.task)
    return {lab for lab, tasks in seen.items() if len(tasks) > 1}


def macro_truth(traj: Trajectory, shared: set) -> list:
    """Ground-truth state boundaries where the subtask switches between
    shared and task-specific."""
    if traj.gt_boundaries is None or traj.gt_labels is None:
        return []
    kinds = [int(lab) in shared for lab in traj.gt_labels]
    return [traj.gt_boundaries[j] for j in range(len(kinds) - 1) if kinds[j] != kinds[j + 1]]


# labeled segments ----------------------------------------------------------------

def state_span(span) -> tuple:
    """Transition span ``[a, b)`` -> state span; transition ``t`` belongs to the
    segment holding state ``t + 1``, and state 0 to the first segment."""
    a, b = span
    return (0 if a == 0 else a + 1, b + 1)


@dataclass
class LabeledData:
    states: np.ndarray
    actions: np.ndarray
    skills: np.ndarray
    tasks: np.ndarray
    embeddings: np.ndarray
    traj_ids: np.ndarray


def bc_pairs(dataset, segmentations, embeddings, indices) -> LabeledData:
    """``(s_t, a_t)`` for every transition, labelled with its segment's skill."""
    rows = {k: [] for k in ("s", "a", "k", "c", "e", "i")}
    for i in indices:
        traj, seg, emb = dataset[i], segmentations[i], embeddings[i]
        for j, (a, b) in enumerate(seg.spans()):
            n = b - a
            rows["s"].append(traj.states[a:b])
            rows["a"].append(traj.actions[a:b])
            rows["k"].append(np.full(n, seg.labels[j]))
            rows["c"].append(np.full(n, traj.task))
            rows["e"].append(np.repeat(emb[j][None], n, axis=0))
            rows["i"].append(np.full(n, i))
    return LabeledData(*(np.concatenate(rows[k]) for k in ("s", "a", "k", "c", "e", "i")))


def termination_data(dataset, segmentations, indices):
    states, labels = [], []
    for i in indices:
        traj, seg = dataset[i], segmentations[i]
        for span in seg.spans():
            a, b = state_span(span)
            states.append(traj.states[a:b])
            labels.append(termination_labels([b - a]))
    return np.vstack(states), np.concatenate(labels)


def skill_timeouts(segmentations, indices, factor: float) -> dict:
    lengths: dict = {}
    for i in indices:
        seg = segmentations[i]
        for j, span in enumerate(seg.spans()):
            a, b = state_span(span)
            lengths.setdefault(int(seg.labels[j]), []).append(b - a)
    return {k: max(1, int(np.ceil(factor * np.mean(v)))) for k, v in sorted(lengths.items())}


@dataclass
class Stage3Models:
    termination: TerminationClassifier
    policies: dict               # method -> SkillPolicy
    timeouts: dict


def fit_stage3(dataset, assignment: SkillAssignment, embeddings, train_idx, cfg: PipelineConfig,
               seed: int) -> Stage3Models:
    s3 = cfg.stage3
    segs = assignment.segmentations
    lib = assignment.library
    data = bc_pairs(dataset, segs, embeddings, train_idx)
    xs, ys = termination_data(dataset, segs, train_idx)
    term = TerminationClassifier(tuple(s3.hidden), s3.threshold, s3.learning_rate, s3.termination_steps,
                                 s3.batch_size, seed).fit(xs, ys)
    n_tasks = int(max(t.task for t in dataset)) + 1
    common = dict(hidden=tuple(s3.hidden), learning_rate=s3.learning_rate, n_steps=s3.bc_steps,
                  batch_size=s3.batch_size, random_state=seed)
    feats = None if s3.skill_features is None else list(s3.skill_features)
    policies = {
        "skill-onehot": SkillPolicy("onehot", lib.n_skills, feats, **common).fit(data.states, data.actions,
                                                                                 data.skills),
        "skill-embed": SkillPolicy("embedding", None, feats, **common).fit(data.states, data.actions,
                                                                          data.embeddings),
        "uncond-bc": SkillPolicy("none", None, feats, **common).fit(data.states, data.actions),
        "task-bc": SkillPolicy("task", n_tasks, **common).fit(data.states, data.actions, data.tasks),
    }
    policies["skill-embed"].set_table(lib.centroids)
    return Stage3Models(term, policies, skill_timeouts(segs, train_idx, s3.timeout_factor))


# evaluation ----------------------------------------------------------------------

def mse_table(models: Stage3Models, dataset, assignment: SkillAssignment, embeddings, test_idx) -> MseTable:
    data = bc_pairs(dataset, assignment.segmentations, embeddings, test_idx)
    lib = assignment.library
    p = models.policies
    preds = {
        "skill-onehot": p["skill-onehot"].predict(data.states, data.skills),
        "skill-embed": p["skill-embed"].predict(data.states, data.embeddings),
        "skill-embed-centroid": p["skill-embed"].predict(data.states, lib.centroids[data.skills]),
        "uncond-bc": p["uncond-bc"].predict(data.states),
        "task-bc": p["task-bc"].predict(data.states, data.tasks),
    }
    return MseTable([one_step_mse(m, preds[m], data.actions, data.tasks) for m in METHOD_ROWS])


def termination_segments(dataset, indices):
    """Held-out ``(states from segment start, true end offset)`` from ground truth."""
    out = []
    for i in indices:
        traj = dataset[i]
        if traj.gt_boundaries is None:
            raise UsageError("termination accuracy needs ground-truth boundaries")
        for a, b in traj.gt_segments():
            out.append((traj.states[a:], b - 1 - a))
    return out


def fixture_skill_map(assignment: SkillAssignment, dataset) -> dict:
    """Majority ground-truth fixture -> discovered skill, for evaluation only."""
    votes: dict = {}
    for seg in assignment.segmentations:
        traj = dataset[seg.traj_id]
        if traj.gt_labels is None:
            continue
        labels = gt_transition_labels(traj)
        for j, (a, b) in enumerate(seg.spans()):
            fixture = Counter(labels[a:b].tolist()).most_common(1)[0][0]
            votes.setdefault(int(fixture), Counter())[int(seg.labels[j])] += 1
    return {f: min(c, key=lambda k: (-c[k], k)) for f, c in sorted(votes.items())}


def gt_transition_labels(traj: Trajectory) -> np.ndarray:
    """Ground-truth subtask of each transition under the state-span convention."""
    out = np.zeros(len(traj) - 1, dtype=int)
    for (a, b), lab in zip(traj.gt_segments(), traj.gt_labels):
        out[max(a - 1, 0):b - 1] = lab
    return out


def intrinsic_purity(assignment: SkillAssignment, dataset) -> float:
    raw, truth = [], []
    for seg in assignment.segmentations:
        traj = dataset[seg.traj_id]
        labels = gt_transition_labels(traj)
        for j, (a, b) in enumerate(seg.spans()):
            key = (seg.traj_id, j)
            if key in assignment.intrinsic_raw:
                raw.append(assignment.intrinsic_raw[key])
                truth.append(Counter(labels[a:b].tolist()).most_common(1)[0][0])
    return cluster_purity(raw, truth)


def run_rollouts(models: Stage3Models, spec: SyntheticKitchenSpec, scaler: TrajectoryScaler, program, fixtures,
                 cfg: PipelineConfig, seed: int, method: str = "skill-onehot"):
    s3 = cfg.stage3
    exec_cfg = ExecutorConfig(s3.threshold, s3.grace_steps, models.timeouts,
                              int(max(models.timeouts.values())) if models.timeouts else 60)
    traces = []
    for r in range(s3.n_rollouts):
        rng = np.random.default_rng([seed, r])
        traces.append(rollout(spec, program, fixtures, models.policies[method], models.termination, scaler,
                              exec_cfg, rng))
    return traces
