"""Termination classifier, skill-conditioned behaviour cloning and the
hierarchical executor that runs task programs in the synthetic kitchen."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import autodiff as ad
from .dataset import KitchenEnv, SyntheticKitchenSpec, TrajectoryScaler
from .exceptions import ConfigurationError, DataError, GenerationError, TrainingError, UsageError

logger = logging.getLogger(__name__)

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
MODES = ("onehot", "embedding", "task", "none")


# termination -----------------------------------------------------------------

def weighted_bce(logits: ad.Tensor, y: np.ndarray, pos_weight: float) -> ad.Tensor:
    """Mean of ``-w y log p - (1 - y) log(1 - p)`` with ``p = sigmoid(logit)``."""
    y = np.asarray(y, dtype=np.float64).reshape(logits.shape)
    # log sigmoid(x) = -softplus(-x), log(1 - sigmoid(x)) = -softplus(x)
    loss = ad.softplus(-logits) * (pos_weight * y) + ad.softplus(logits) * (1.0 - y)
    return ad.tmean(loss)


class TerminationClassifier(BaseEstimator, ClassifierMixin):
    """State -> probability that the current skill has just completed."""

    def __init__(self, hidden=(64, 64), threshold=0.5, learning_rate=1e-3, n_steps=3000, batch_size=256,
                 random_state=0):
        self.hidden = hidden
        self.threshold = threshold
        self.learning_rate = learning_rate
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.random_state = random_state

    def loss(self, X, y) -> ad.Tensor:
        return weighted_bce(self.net_(np.asarray(X, dtype=np.float64)), y, self.pos_weight_)

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64).ravel()
        if len(y) != len(X):
            raise UsageError("X and y lengths differ")
        n_pos = int((y == 1).sum())
        n_neg = int((y == 0).sum())
        if n_pos + n_neg != len(y):
            raise UsageError("labels must be 0 or 1")
        if n_pos == 0 or n_neg == 0:
            raise UsageError(f"termination data must contain both classes ({n_pos} positive, {n_neg} negative)")
        rng = np.random.default_rng(self.random_state)
        self.pos_weight_ = n_neg / n_pos
        self.net_ = ad.MlpParams.init([X.shape[1], *self.hidden, 1], rng)
        opt = ad.Adam(self.net_.parameters(), lr=self.learning_rate)
        self.history_ = []
        for _ in range(self.n_steps):
            idx = rng.integers(0, len(X), size=min(self.batch_size, len(X)))
            self.history_.append(opt.step(self.loss(X[idx], y[idx])))
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = check_array(np.atleast_2d(X), dtype=np.float64)
        p = 1.0 / (1.0 + np.exp(-np.clip(self.net_(X).value[:, 0], -500, 500)))
        return np.column_stack([1 - p, p])

    def termination_probability(self, X) -> np.ndarray:
        return self.predict_proba(X)[:, 1]

    def predict(self, X) -> np.ndarray:
        return (self.termination_probability(X) > self.threshold).astype(int)

    def state_dict(self) -> dict:
        return {"params": self.get_params(), "net": self.net_.to_dict(), "pos_weight": self.pos_weight_}

    @classmethod
    def from_state_dict(cls, d) -> "TerminationClassifier":
        params = dict(d["params"])
        params["hidden"] = tuple(params["hidden"])
        model = cls(**params)
        model.net_ = ad.MlpParams.from_dict(d["net"])
        model.pos_weight_ = float(d["pos_weight"])
        model.classes_ = np.array([0, 1])
        return model


def termination_labels(lengths) -> np.ndarray:
    """One positive (the final state) per segment of each given length."""
    out = []
    for n in lengths:
        if n < 1:
            raise UsageError("segments must be non-empty")
        lab = np.zeros(n)
        lab[-1] = 1.0
        out.append(lab)
    return np.concatenate(out) if out else np.zeros(0)


# skill-conditioned policy ------------------------------------------------------

def gaussian_nll(mean: ad.Tensor, logvar: ad.Tensor, target: np.ndarray) -> ad.Tensor:
    """Mean over rows of the diagonal Gaussian negative log-likelihood (no constant)."""
    inv = ad.exp(-logvar)
    per = (logvar + ad.square(mean - target) * inv) * 0.5
    return ad.tmean(ad.tsum(per, axis=1))


class SkillPolicy(BaseEstimator, RegressorMixin):
    """Gaussian behaviour-cloning policy ``pi(a | s, k)``.

    ``mode`` selects the conditioning vector: ``onehot`` (skill ID),
    ``embedding`` (segment embedding while training, library centroid when
    acting), ``task`` (task label, the flat task-conditioned baseline) or
    ``none`` (unconditioned baseline). ``n_conditions`` is the number of
    skills or tasks for the one-hot modes. ``features`` selects the state
    columns the network sees (all columns when None).
    """

    def __init__(self, mode="onehot", n_conditions=None, features=None, hidden=(64, 64), learning_rate=1e-3,
                 n_steps=4000, batch_size=256, random_state=0):
        self.mode = mode
        self.n_conditions = n_conditions
        self.features = features
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.random_state = random_state

    def _check_mode(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown conditioning mode {self.mode!r}; expected one of {MODES}")

    def condition_matrix(self, cond, n_rows: int) -> np.ndarray:
        """Turn IDs (one-hot modes) or embeddings into the conditioning block."""
        if self.mode == "none":
            return np.zeros((n_rows, 0))
        if self.mode == "embedding":
            c = np.asarray(cond, dtype=np.float64)
            c = np.broadcast_to(c, (n_rows, c.shape[-1])) if c.ndim == 1 else c
            if c.shape != (n_rows, self.cond_dim_):
                raise UsageError(f"embedding conditioning must be {n_rows} x {self.cond_dim_}, got {c.shape}")
            return c
        ids = np.broadcast_to(np.asarray(cond, dtype=int), (n_rows,))
        bad = (ids < 0) | (ids >= self.cond_dim_)
        if bad.any():
            raise DataError(f"unknown {'skill' if self.mode == 'onehot' else 'task'} ID {int(ids[bad][0])}")
        out = np.zeros((n_rows, self.cond_dim_))
        out[np.arange(n_rows), ids] = 1.0
        return out

    def _select(self, X: np.ndarray) -> np.ndarray:
        if self.features is None:
            return X
        cols = np.asarray(self.features, dtype=int)
        if X.shape[1] != self.state_dim_:
            raise UsageError(f"expected {self.state_dim_} state columns, got {X.shape[1]}")
        return X[:, cols]

    def _heads(self, X, cond):
        h = self.net_(np.hstack([self._select(X), self.condition_matrix(cond, len(X))]))
        da = self.action_dim_
        return h[:, :da], ad.clip(h[:, da:], LOGVAR_MIN, LOGVAR_MAX)

    def loss(self, X, y, cond) -> ad.Tensor:
        mean, logvar = self._heads(np.asarray(X, dtype=np.float64), cond)
        return gaussian_nll(mean, logvar, np.asarray(y, dtype=np.float64))

    def fit(self, X, y, cond=None):
        self._check_mode()
        X = check_array(X, dtype=np.float64)
        y = check_array(y, dtype=np.float64)
        if len(X) != len(y):
            raise UsageError("X and y lengths differ")
        rng = np.random.default_rng(self.random_state)
        self.action_dim_ = y.shape[1]
        self.state_dim_ = X.shape[1]
        if self.features is not None:
            cols = np.asarray(self.features, dtype=int)
            if cols.ndim != 1 or len(cols) == 0 or cols.min() < 0 or cols.max() >= X.shape[1]:
                raise ConfigurationError(f"features must index the {X.shape[1]} state columns")
        X = self._select(X)
        if self.mode == "none":
            self.cond_dim_ = 0
        elif self.mode == "embedding":
            cond = check_array(cond, dtype=np.float64)
            self.cond_dim_ = cond.shape[1]
        else:
            ids = np.asarray(cond, dtype=int)
            if self.n_conditions is None:
                raise ConfigurationError(f"mode {self.mode!r} needs n_conditions")
            self.cond_dim_ = int(self.n_conditions)
            if len(ids) != len(X):
                raise UsageError("one condition ID per row required")
        cmat = self.condition_matrix(cond, len(X))
        self.net_ = ad.MlpParams.init([X.shape[1] + self.cond_dim_, *self.hidden, 2 * self.action_dim_], rng)
        opt = ad.Adam(self.net_.parameters(), lr=self.learning_rate)
        self.history_ = []
        xc = np.hstack([X, cmat])
        for _ in range(self.n_steps):
            idx = rng.integers(0, len(X), size=min(self.batch_size, len(X)))
            h = self.net_(xc[idx])
            da = self.action_dim_
            loss = gaussian_nll(h[:, :da], ad.clip(h[:, da:], LOGVAR_MIN, LOGVAR_MAX), y[idx])
            try:
                self.history_.append(opt.step(loss))
            except TrainingError:
                raise
        self.table_ = None
        return self

    def set_table(self, table) -> "SkillPolicy":
        """Execution-time conditioning vectors, one row per skill (embedding mode)."""
        table = np.asarray(table, dtype=np.float64)
        if table.ndim != 2 or table.shape[1] != self.cond_dim_:
            raise UsageError(f"table must be K x {self.cond_dim_}")
        self.table_ = table
        return self

    def predict(self, X, cond=None) -> np.ndarray:
        """Action means."""
        check_is_fitted(self, "net_")
        X = check_array(np.atleast_2d(X), dtype=np.float64)
        return self._heads(X, cond)[0].value

    def act(self, state, skill) -> np.ndarray:
        """Deterministic action for one state and skill ID."""
        check_is_fitted(self, "net_")
        skill = int(skill)
        if self.mode == "embedding":
            if self.table_ is None:
                raise UsageError("embedding policy has no conditioning table")
            if not 0 <= skill < len(self.table_):
                raise UsageError(f"invalid skill ID {skill}")
            cond = self.table_[skill]
        else:
            if self.mode != "none" and not 0 <= skill < self.cond_dim_:
                raise UsageError(f"invalid skill ID {skill}")
            cond = skill
        return self.predict(np.asarray(state, dtype=np.float64)[None], cond)[0]

    def state_dict(self) -> dict:
        return {
            "params": self.get_params(), "net": self.net_.to_dict(), "action_dim": self.action_dim_,
            "state_dim": self.state_dim_, "cond_dim": self.cond_dim_, "table": None if self.table_ is None else self.table_.tolist(),
        }

    @classmethod
    def from_state_dict(cls, d) -> "SkillPolicy":
        params = dict(d["params"])
        params["hidden"] = tuple(params["hidden"])
        if params.get("features") is not None:
            params["features"] = [int(f) for f in params["features"]]
        model = cls(**params)
        model.net_ = ad.MlpParams.from_dict(d["net"])
        model.action_dim_ = int(d["action_dim"])
        model.state_dim_ = int(d["state_dim"])
        model.cond_dim_ = int(d["cond_dim"])
        model.table_ = None if d["table"] is None else np.array(d["table"])
        return model


def policy_act(policy: SkillPolicy, state, skill) -> np.ndarray:
    return policy.act(state, skill)


# executor ----------------------------------------------------------------------

@dataclass
class RolloutTrace:
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    switch_times: list = field(default_factory=list)
    subtask_success: list = field(default_factory=list)
    success: bool = False
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "switch_times": [int(t) for t in self.switch_times],
            "subtask_success": [bool(s) for s in self.subtask_success],
            "success": bool(self.success),
            "steps": len(self.actions),
            "error": self.error,
        }


@dataclass
class ExecutorConfig:
    threshold: float = 0.5
    grace_steps: int = 5
    timeouts: dict = field(default_factory=dict)   # skill -> max steps
    default_timeout: int = 60


def rollout(spec: SyntheticKitchenSpec, program, fixtures, policy: SkillPolicy, termination: TerminationClassifier,
            scaler: TrajectoryScaler, config: ExecutorConfig | None = None,
            rng: np.random.Generator | None = None, start=None) -> RolloutTrace:
    """Run ``program`` (skill IDs) from a random start.

    Skills advance when the termination probability exceeds the threshold
    (after ``grace_steps`` steps in the skill) or on timeout. ``fixtures``
    lists the fixture each program entry should switch on; success means
    all of them are on when the episode ends.
    """
    config = config or ExecutorConfig()
    program = [int(k) for k in program]
    if not program:
        raise UsageError("empty program")
    if len(fixtures) != len(program):
        raise UsageError("one target fixture per program entry required")
    rng = rng or np.random.default_rng(0)
    env = KitchenEnv(spec)
    if start is None:
        start = rng.uniform(-spec.start_box, spec.start_box, size=2)
    state = env.reset(start)
    trace = RolloutTrace(states=[state])
    t = 0
    try:
        for pos, skill in enumerate(program):
            limit = int(config.timeouts.get(skill, config.default_timeout))
            for k in range(limit):
                a_norm = policy.act(scaler.transform_states(state[None])[0], skill)
                action = scaler.inverse_actions(a_norm[None])[0]
                state = env.step(action)
                t += 1
                trace.actions.append(action)
                trace.states.append(state)
                if k + 1 >= config.grace_steps:
                    p = termination.termination_probability(scaler.transform_states(state[None]))[0]
                    if p > config.threshold:
                        break
            if pos < len(program) - 1:
                trace.switch_times.append(t)
    except (GenerationError, FloatingPointError, ValueError) as exc:
        trace.error = str(exc)
    flags = env.flags
    trace.subtask_success = [bool(flags[f] > 0) for f in fixtures]
    trace.success = trace.error is None and all(trace.subtask_success)
    return trace
