"""Trajectory data model, line-delimited JSON I/O, normalization and the
synthetic multi-task kitchen environment with its scripted demonstrator."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import DataError, GenerationError, UsageError

logger = logging.getLogger(__name__)

FIXTURE_NAMES = ("microwave", "switch", "hinge", "kettle", "burner", "slide", "top")


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    task: int
    gt_boundaries: Optional[list] = None
    gt_labels: Optional[list] = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.states.ndim != 2 or self.actions.ndim != 2:
            raise DataError("states and actions must be 2-D arrays")
        if len(self.states) != len(self.actions):
            raise DataError(f"states ({len(self.states)}) and actions ({len(self.actions)}) differ in length")
        if len(self.states) < 2:
            raise DataError("trajectory needs at least 2 timesteps")
        if self.gt_boundaries is not None:
            b = [int(x) for x in self.gt_boundaries]
            if any(x >= y for x, y in zip(b, b[1:])) or not b or b[0] <= 0:
                raise DataError(f"gt_boundaries must be strictly ascending positive ints, got {b}")
            if b[-1] != len(self.states):
                raise DataError(f"last gt boundary {b[-1]} != trajectory length {len(self.states)}")
            self.gt_boundaries = b
            if self.gt_labels is not None and len(self.gt_labels) != len(b):
                raise DataError("gt_labels must have one entry per gt segment")

    def __len__(self):
        return len(self.states)

    @property
    def transitions(self) -> np.ndarray:
        """``(T-1) x (2 Ds + Da)`` rows ``[s_t, a_t, s_{t+1}]``."""
        return np.hstack([self.states[:-1], self.actions[:-1], self.states[1:]])

    def gt_segments(self) -> list:
        if self.gt_boundaries is None:
            return []
        starts = [0] + self.gt_boundaries[:-1]
        return list(zip(starts, self.gt_boundaries))

    def to_record(self) -> dict:
        rec = {"task": int(self.task), "states": self.states.tolist(), "actions": self.actions.tolist()}
        if self.gt_boundaries is not None:
            rec["gt_boundaries"] = list(self.gt_boundaries)
        if self.gt_labels is not None:
            rec["gt_labels"] = [int(x) for x in self.gt_labels]
        return rec

    def equals(self, other: "Trajectory") -> bool:
        return (
            self.task == other.task
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.actions, other.actions)
            and self.gt_boundaries == other.gt_boundaries
            and self.gt_labels == other.gt_labels
        )


# file I/O ---------------------------------------------------------------

def save_dataset(dataset: Sequence[Trajectory], path, provenance: dict | None = None) -> None:
    """One JSON record per line; an optional leading ``_provenance`` record."""
    with open(path, "w", encoding="utf-8") as f:
        if provenance is not None:
            f.write(json.dumps({"_provenance": provenance}, sort_keys=True) + "\n")
        for traj in dataset:
            f.write(json.dumps(traj.to_record(), sort_keys=True) + "\n")


def load_dataset(path) -> list:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"invalid JSON ({exc.msg})", record=lineno) from None
            if "_provenance" in rec:
                continue
            out.append(_parse_record(rec, lineno, out[0] if out else None))
    return out


def read_provenance(path) -> dict | None:
    with open(path, encoding="utf-8") as f:
        first = f.readline()
    if not first.strip():
        return None
    rec = json.loads(first)
    return rec.get("_provenance")


def _parse_record(rec, index, reference: Trajectory | None) -> Trajectory:
    if not isinstance(rec, dict):
        raise DataError("record is not an object", record=index)
    for key in ("task", "states", "actions"):
        if key not in rec:
            raise DataError(f"missing field {key!r}", record=index)
    try:
        states = np.asarray(rec["states"], dtype=np.float64)
        actions = np.asarray(rec["actions"], dtype=np.float64)
    except (TypeError, ValueError):
        raise DataError("states/actions are not rectangular numeric arrays", record=index) from None
    if reference is not None and (
        states.ndim != 2
        or actions.ndim != 2
        or states.shape[1] != reference.states.shape[1]
        or actions.shape[1] != reference.actions.shape[1]
    ):
        raise DataError("state/action dimensions inconsistent with earlier records", record=index)
    if not (np.all(np.isfinite(states)) and np.all(np.isfinite(actions))):
        raise DataError("non-finite values", record=index)
    try:
        return Trajectory(
            states=states,
            actions=actions,
            task=int(rec["task"]),
            gt_boundaries=rec.get("gt_boundaries"),
            gt_labels=rec.get("gt_labels"),
        )
    except DataError as exc:
        raise DataError(str(exc), record=index) from None


# normalization ------------------------------------------------------------

@dataclass
class NormStats:
    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("state_mean", "state_std", "action_mean", "action_std")}

    @classmethod
    def from_dict(cls, d) -> "NormStats":
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


STD_FLOOR = 1e-8


class TrajectoryScaler(BaseEstimator, TransformerMixin):
    """Per-dimension standardization of states and actions."""

    def __init__(self, std_floor: float = STD_FLOOR):
        self.std_floor = std_floor

    def fit(self, dataset: Sequence[Trajectory], y=None):
        if len(dataset) == 0:
            raise UsageError("cannot fit normalization on an empty dataset")
        s = np.vstack([t.states for t in dataset])
        a = np.vstack([t.actions for t in dataset])
        self.stats_ = NormStats(s.mean(0), self._floor(s.std(0), "state"), a.mean(0), self._floor(a.std(0), "action"))
        return self

    def _floor(self, std, what):
        low = std < self.std_floor
        if np.any(low):
            logger.warning("%s dims %s are constant; std floored at %g", what, np.flatnonzero(low).tolist(), self.std_floor)
        return np.maximum(std, self.std_floor)

    def transform(self, dataset: Sequence[Trajectory]) -> list:
        check_is_fitted(self, "stats_")
        st = self.stats_
        return [_replace(t, (t.states - st.state_mean) / st.state_std, (t.actions - st.action_mean) / st.action_std) for t in dataset]

    def inverse_transform(self, dataset: Sequence[Trajectory]) -> list:
        check_is_fitted(self, "stats_")
        st = self.stats_
        return [_replace(t, t.states * st.state_std + st.state_mean, t.actions * st.action_std + st.action_mean) for t in dataset]

    def transform_states(self, states):
        return (np.asarray(states) - self.stats_.state_mean) / self.stats_.state_std

    def transform_actions(self, actions):
        return (np.asarray(actions) - self.stats_.action_mean) / self.stats_.action_std

    def inverse_actions(self, actions):
        return np.asarray(actions) * self.stats_.action_std + self.stats_.action_mean

    @classmethod
    def from_stats(cls, stats: NormStats) -> "TrajectoryScaler":
        scaler = cls()
        scaler.stats_ = stats
        return scaler


def _replace(t: Trajectory, states, actions) -> Trajectory:
    return Trajectory(states, actions, t.task, t.gt_boundaries, t.gt_labels)


def normalize(dataset: Sequence[Trajectory]):
    scaler = TrajectoryScaler().fit(dataset)
    return scaler.transform(dataset), scaler.stats_


# synthetic environment ---------------------------------------------------------

def _hexagon(radius=0.8):
    ang = np.pi / 2 + 2 * np.pi * np.arange(6) / 6
    return np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)


# shared fixtures on alternate hexagon corners, task-specific ones in between,
# distractor at the centre; no straight path between used fixtures passes another
_DEFAULT_POSITIONS = np.vstack([_hexagon()[[0, 2, 4, 1, 3, 5]], [[0.0, 0.0]]])


@dataclass
class SyntheticKitchenSpec:
    """Layout and demonstrator settings for the synthetic kitchen.

    Fixtures 0-2 are shared by every task (intrinsic); task ``c`` additionally
    owns fixture ``3 + c`` (extrinsic). Fixture 6 is a distractor no task uses.
    """

    positions: np.ndarray = field(default_factory=lambda: _DEFAULT_POSITIONS.copy())
    tasks: list = field(default_factory=lambda: [[0, 1, 2, 3], [0, 1, 2, 4], [0, 1, 2, 5]])
    noise: float = 0.01
    gain: float = 0.5
    max_speed: float = 0.07
    toggle_radius: float = 0.05
    dwell: int = 3
    start_box: float = 0.3
    max_steps_per_subtask: int = 300

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.validate()

    @property
    def n_fixtures(self) -> int:
        return len(self.positions)

    @property
    def state_dim(self) -> int:
        return 2 + self.n_fixtures

    @property
    def action_dim(self) -> int:
        return 2

    def validate(self):
        g = self.n_fixtures
        for c, prog in enumerate(self.tasks):
            if len(prog) != 4 or len(set(prog)) != 4 or any(not 0 <= f < g for f in prog):
                raise UsageError(f"task {c}: expected 4 distinct fixtures in [0, {g}), got {prog}")
        shared = self.intrinsic_fixtures()
        for c, prog in enumerate(self.tasks):
            unique = [f for f in prog if f not in shared]
            if len(self.tasks) > 1 and (len(unique) != 1 or len(shared) != 3):
                raise UsageError(f"task {c} must contain the 3 shared fixtures plus exactly 1 unique fixture")

    def intrinsic_fixtures(self) -> list:
        counts = {}
        for prog in self.tasks:
            for f in prog:
                counts[f] = counts.get(f, 0) + 1
        return sorted(f for f, n in counts.items() if n >= 2)

    def extrinsic_fixtures(self) -> list:
        counts = {}
        for prog in self.tasks:
            for f in prog:
                counts[f] = counts.get(f, 0) + 1
        return sorted(f for f, n in counts.items() if n == 1)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("tasks", "noise", "gain", "max_speed", "toggle_radius", "dwell", "start_box", "max_steps_per_subtask")}
        d["positions"] = self.positions.tolist()
        return d


class KitchenEnv:
    """Point agent in the plane with toggleable fixtures.

    State is ``[x, y, flag_0 .. flag_{G-1}]``; action is a 2-D displacement.
    A fixture switches on after the agent stays within ``toggle_radius``
    of it for ``dwell`` consecutive steps.
    """

    def __init__(self, spec: SyntheticKitchenSpec):
        self.spec = spec
        self.pos = np.zeros(2)
        self.flags = np.zeros(spec.n_fixtures)
        self.dwell_count = np.zeros(spec.n_fixtures, dtype=int)

    def reset(self, start) -> np.ndarray:
        self.pos = np.asarray(start, dtype=np.float64).copy()
        self.flags = np.zeros(self.spec.n_fixtures)
        self.dwell_count = np.zeros(self.spec.n_fixtures, dtype=int)
        return self.state()

    def state(self) -> np.ndarray:
        return np.concatenate([self.pos, self.flags])

    def step(self, action) -> np.ndarray:
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (2,) or not np.all(np.isfinite(action)):
            raise GenerationError(f"invalid action {action!r}")
        self.pos = self.pos + action
        near = np.linalg.norm(self.spec.positions - self.pos, axis=1) < self.spec.toggle_radius
        self.dwell_count = np.where(near, self.dwell_count + 1, 0)
        self.flags = np.where((self.dwell_count >= self.spec.dwell) | (self.flags > 0), 1.0, 0.0)
        return self.state()


def scripted_action(spec: SyntheticKitchenSpec, pos, target: int) -> np.ndarray:
    """Saturated proportional controller towards a fixture (noise-free)."""
    delta = spec.gain * (spec.positions[target] - pos)
    norm = np.linalg.norm(delta)
    if norm > spec.max_speed:
        delta *= spec.max_speed / norm
    return delta


def generate_demo(spec: SyntheticKitchenSpec, task: int, rng: np.random.Generator) -> Trajectory:
    env = KitchenEnv(spec)
    start = rng.uniform(-spec.start_box, spec.start_box, size=2)
    state = env.reset(start)
    program = spec.tasks[task]
    states, actions, boundaries = [state], [], []
    for fixture in program:
        for _ in range(spec.max_steps_per_subtask):
            if env.flags[fixture] > 0:
                break
            a = scripted_action(spec, env.pos, fixture) + rng.normal(0.0, spec.noise, size=2)
            actions.append(a)
            state = env.step(a)
            states.append(state)
        else:
            raise GenerationError(f"task {task}: fixture {fixture} not reached within {spec.max_steps_per_subtask} steps")
        # the state where the flag flips is the last state of the subtask
        boundaries.append(len(states))
    # terminal action: noise-free hold at the last fixture
    actions.append(scripted_action(spec, env.pos, program[-1]))
    return Trajectory(np.array(states), np.array(actions), task, boundaries, list(program))


def generate_synthetic(spec: SyntheticKitchenSpec | None = None, demos_per_task: int = 24, seed: int = 0) -> list:
    if demos_per_task < 1:
        raise UsageError("demos_per_task must be >= 1")
    spec = spec or SyntheticKitchenSpec()
    rng = np.random.default_rng(seed)
    return [generate_demo(spec, task, rng) for task in range(len(spec.tasks)) for _ in range(demos_per_task)]


def train_test_split(dataset: Sequence[Trajectory], test_fraction: float = 0.2, seed: int = 0):
    """Per-task split; returns index lists ``(train, test)``."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for task in sorted({t.task for t in dataset}):
        idx = [i for i, t in enumerate(dataset) if t.task == task]
        idx = list(rng.permutation(idx))
        n_test = max(1, int(math.floor(test_fraction * len(idx) + 0.5))) if len(idx) > 1 else 0
        test += idx[:n_test]
        train += idx[n_test:]
    return sorted(int(i) for i in train), sorted(int(i) for i in test)


def transitions_of(dataset: Iterable[Trajectory]):
    """Stack all transitions with their task labels."""
    dataset = list(dataset)
    x = np.vstack([t.transitions for t in dataset])
    c = np.concatenate([np.full(len(t) - 1, t.task) for t in dataset])
    return x, c
