"""Task-enforced vector-quantized autoencoder over transitions and the
codebook-entropy macro-segmentation built on top of it."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import autodiff as ad
from .changepoint import PeltConfig, RbfCost, pelt
from .exceptions import ConfigurationError, TrainingError, UsageError

logger = logging.getLogger(__name__)

LOG_EPS = 1e-12


@dataclass
class Codebook:
    vectors: ad.Tensor
    task_map: dict = field(default_factory=dict)

    def __post_init__(self):
        k = self.vectors.shape[0]
        for task, subset in self.task_map.items():
            if len(subset) == 0:
                raise ConfigurationError(f"task {task} has an empty codebook subset")
            if any(not 0 <= i < k for i in subset):
                raise ConfigurationError(f"task {task}: codebook index out of range in {subset}")

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    def mask(self, tasks) -> np.ndarray:
        """Boolean ``n x K`` matrix of task-relevant codes."""
        tasks = np.asarray(tasks)
        out = np.zeros((len(tasks), self.size), dtype=bool)
        for task in np.unique(tasks):
            if int(task) not in self.task_map:
                raise ConfigurationError(f"task {int(task)} missing from the codebook task map")
            out[np.ix_(tasks == task, self.task_map[int(task)])] = True
        return out


def squared_distances(z, codes) -> np.ndarray:
    z = np.atleast_2d(z)
    return ((z[:, None, :] - np.asarray(codes)[None, :, :]) ** 2).sum(-1)


def quantize_enforced(z_e, tasks, codebook: Codebook):
    """Nearest task-relevant code per row; ties go to the smallest index.

    Returns ``(indices, z_q)`` as numpy arrays.
    """
    z = np.atleast_2d(np.asarray(z_e, dtype=np.float64))
    tasks = np.broadcast_to(np.asarray(tasks), (len(z),))
    d = squared_distances(z, codebook.vectors.value)
    d = np.where(codebook.mask(tasks), d, np.inf)
    idx = np.argmin(d, axis=1)
    return idx, codebook.vectors.value[idx]


def codebook_divergence(codes: ad.Tensor) -> ad.Tensor:
    """Negative sum of squared distances over unique code pairs."""
    k = codes.shape[0]
    total = None
    for i in range(k):
        for j in range(i + 1, k):
            term = ad.tsum(ad.square(codes[i] - codes[j]))
            total = term if total is None else total + term
    if total is None:
        return ad.Tensor(0.0)
    return -total


def one_hot(labels, n) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((len(labels), n))
    out[np.arange(len(labels)), labels] = 1.0
    return out


@dataclass
class LossParts:
    total: ad.Tensor
    recon: ad.Tensor
    codebook: ad.Tensor
    commit: ad.Tensor
    divergence: ad.Tensor

    def values(self) -> dict:
        return {k: float(getattr(self, k).value) for k in ("total", "recon", "codebook", "commit", "divergence")}


def evqvae_loss(x, tasks, encoder, decoder, codebook: Codebook, n_tasks, state_dim, action_dim,
                beta_commit=0.25, gamma_div=1e-3) -> LossParts:
    """Reconstruction + codebook + weighted commitment + weighted divergence."""
    x = np.atleast_2d(x)
    target_a = x[:, state_dim:state_dim + action_dim]
    target_s = x[:, state_dim + action_dim:]
    z_e = encoder(x)
    idx, _ = quantize_enforced(z_e.value, tasks, codebook)
    z_q = ad.take_rows(codebook.vectors, idx)
    z_st = ad.straight_through(z_e, z_q)
    out = decoder(ad.concat([z_st, ad.Tensor(one_hot(tasks, n_tasks))], axis=1))
    n = float(len(x))
    recon = ad.tsum(ad.square(out[:, :action_dim] - target_a)) * (1 / n) + ad.tsum(ad.square(out[:, action_dim:] - target_s)) * (1 / n)
    cb = ad.tsum(ad.square(ad.stop_gradient(z_e) - z_q)) * (1 / n)
    commit = ad.tsum(ad.square(z_e - ad.stop_gradient(z_q))) * (1 / n)
    div = codebook_divergence(codebook.vectors)
    total = recon + cb + beta_commit * commit + gamma_div * div
    parts = LossParts(total, recon, cb, commit, div)
    for name, value in parts.values().items():
        if not np.isfinite(value):
            raise TrainingError(f"non-finite {name} loss")
    return parts


@dataclass
class EntropyTrace:
    probs: np.ndarray
    entropy: np.ndarray

    def __post_init__(self):
        self.log_entropy = np.log(self.entropy + LOG_EPS)

    @property
    def log_probs(self) -> np.ndarray:
        return np.log(np.maximum(self.probs, 1e-300))

    def __len__(self):
        return len(self.entropy)


def entropy_from_distances(d2) -> EntropyTrace:
    logits = -np.atleast_2d(d2)
    logits = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    h = np.clip(-plogp.sum(axis=1), 0.0, np.log(p.shape[1]))
    return EntropyTrace(p, h)


class EVQVAE(BaseEstimator, TransformerMixin):
    """Vector-quantized autoencoder whose quantization is restricted to
    the codes relevant to each transition's task label.

    ``fit(X, y)`` takes normalized transitions ``[s_t, a_t, s_{t+1}]`` and
    integer task labels. ``transform`` returns encoder embeddings.
    """

    def __init__(self, action_dim=2, n_codes=None, codes_per_task=4, code_dim=16, hidden=(64, 64),
                 beta_commit=0.25, gamma_div=1e-2, learning_rate=1e-3, n_steps=2000, batch_size=128,
                 holdout_fraction=0.1, random_state=0):
        self.action_dim = action_dim
        self.n_codes = n_codes
        self.codes_per_task = codes_per_task
        self.code_dim = code_dim
        self.hidden = hidden
        self.beta_commit = beta_commit
        self.gamma_div = gamma_div
        self.learning_rate = learning_rate
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.holdout_fraction = holdout_fraction
        self.random_state = random_state

    def _check_weights(self):
        for name in ("beta_commit", "gamma_div"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ConfigurationError(f"{name} must be finite and >= 0, got {v}")

    def _init(self, x_dim, tasks, rng):
        self.tasks_ = sorted(int(t) for t in np.unique(tasks))
        self.n_tasks_ = max(self.tasks_) + 1
        self.state_dim_ = (x_dim - self.action_dim) // 2
        if 2 * self.state_dim_ + self.action_dim != x_dim:
            raise ConfigurationError(f"transition width {x_dim} incompatible with action_dim {self.action_dim}")
        per = int(self.codes_per_task)
        if per < 1:
            raise ConfigurationError(f"codes_per_task must be >= 1, got {per}")
        k = self.n_codes or self.n_tasks_ * per
        if k == self.n_tasks_ * per:
            task_map = {c: list(range(c * per, (c + 1) * per)) for c in range(self.n_tasks_)}
        elif k >= self.n_tasks_:
            task_map = {c: list(range(k)) for c in range(self.n_tasks_)}
        else:
            raise ConfigurationError(f"need at least one code per task ({self.n_tasks_}), got {k}")
        self.encoder_ = ad.MlpParams.init([x_dim, *self.hidden, self.code_dim], rng)
        self.decoder_ = ad.MlpParams.init([self.code_dim + self.n_tasks_, *self.hidden, self.action_dim + self.state_dim_], rng)
        codes = rng.normal(0.0, 1.0 / np.sqrt(self.code_dim), size=(k, self.code_dim))
        self.codebook_ = Codebook(ad.parameter(codes, name="codebook"), task_map)

    def parameters(self):
        return self.encoder_.parameters() + self.decoder_.parameters() + [self.codebook_.vectors]

    def loss(self, X, y) -> LossParts:
        check_is_fitted(self, "encoder_")
        return evqvae_loss(X, y, self.encoder_, self.decoder_, self.codebook_, self.n_tasks_,
                           self.state_dim_, self.action_dim, self.beta_commit, self.gamma_div)

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=int)
        if len(y) != len(X):
            raise UsageError("X and y lengths differ")
        self._check_weights()
        rng = np.random.default_rng(self.random_state)
        self._init(X.shape[1], y, rng)
        perm = rng.permutation(len(X))
        n_hold = int(round(self.holdout_fraction * len(X)))
        hold, train = perm[:n_hold], perm[n_hold:]
        self.holdout_index_ = np.sort(hold)
        opt = ad.Adam(self.parameters(), lr=self.learning_rate)
        self.history_ = []
        self.initial_holdout_ = self._holdout(X, y, hold)
        self.initial_holdout_loss_ = self.initial_holdout_["total"]
        last_good = self.state_dict()
        for step in range(self.n_steps):
            batch = train[rng.integers(0, len(train), size=min(self.batch_size, len(train)))]
            try:
                parts = self.loss(X[batch], y[batch])
                opt.step(parts.total)
            except TrainingError as exc:
                exc.checkpoint = last_good
                raise
            self.history_.append(float(parts.total.value))
            if step % 200 == 0:
                last_good = self.state_dict()
        self.final_holdout_ = self._holdout(X, y, hold)
        self.final_holdout_loss_ = self.final_holdout_["total"]
        return self

    def _holdout(self, X, y, hold) -> dict:
        if len(hold) == 0:
            return {k: float("nan") for k in ("total", "recon", "codebook", "commit", "divergence")}
        return self.loss(X[hold], y[hold]).values()

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "encoder_")
        X = check_array(X, dtype=np.float64)
        return self.encoder_(X).value

    def quantize(self, X, y):
        return quantize_enforced(self.transform(X), y, self.codebook_)

    def entropy_trace(self, X) -> EntropyTrace:
        """Softmax over negative squared distances to all codes, per row."""
        return entropy_from_distances(squared_distances(self.transform(X), self.codebook_.vectors.value))

    def mean_pairwise_code_distance(self) -> float:
        c = self.codebook_.vectors.value
        k = len(c)
        d = [np.linalg.norm(c[i] - c[j]) for i in range(k) for j in range(i + 1, k)]
        return float(np.mean(d)) if d else 0.0

    # persistence ---------------------------------------------------------------
    def state_dict(self) -> dict:
        return {
            "params": self.get_params(),
            "encoder": self.encoder_.to_dict(),
            "decoder": self.decoder_.to_dict(),
            "codebook": self.codebook_.vectors.value.tolist(),
            "task_map": {str(k): v for k, v in self.codebook_.task_map.items()},
            "tasks": self.tasks_,
            "state_dim": self.state_dim_,
        }

    @classmethod
    def from_state_dict(cls, d) -> "EVQVAE":
        params = dict(d["params"])
        params["hidden"] = tuple(params["hidden"])
        model = cls(**params)
        model.encoder_ = ad.MlpParams.from_dict(d["encoder"])
        model.decoder_ = ad.MlpParams.from_dict(d["decoder"])
        model.codebook_ = Codebook(ad.parameter(np.array(d["codebook"])), {int(k): v for k, v in d["task_map"].items()})
        model.tasks_ = list(d["tasks"])
        model.n_tasks_ = max(model.tasks_) + 1
        model.state_dim_ = d["state_dim"]
        return model


def train_evqvae(dataset, config: dict | None = None, seed: int = 0) -> EVQVAE:
    """Fit on every transition of an already-normalized dataset."""
    from .dataset import transitions_of

    x, c = transitions_of(dataset)
    if len(np.unique(c)) < 2:
        logger.warning("only one task label present; quantization is trivially enforced")
    params = dict(config or {})
    params.setdefault("action_dim", dataset[0].actions.shape[1])
    return EVQVAE(random_state=seed, **params).fit(x, c)


# macro segmentation ------------------------------------------------------------

@dataclass
class MacroSegmentation:
    change_points: list
    length: int
    tags: list
    mean_log_entropy: list

    def segments(self) -> list:
        bounds = [0] + list(self.change_points) + [self.length]
        return list(zip(bounds[:-1], bounds[1:]))

    def to_dict(self) -> dict:
        return {
            "change_points": [int(c) for c in self.change_points],
            "length": int(self.length),
            "tags": list(self.tags),
            "mean_log_entropy": [float(m) for m in self.mean_log_entropy],
        }

    @classmethod
    def from_dict(cls, d) -> "MacroSegmentation":
        return cls(list(d["change_points"]), int(d["length"]), list(d["tags"]), list(d["mean_log_entropy"]))


def two_means_threshold(values) -> float:
    """Midpoint between the means of the optimal 1-D 2-clustering."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if len(v) == 0:
        raise UsageError("no values to threshold")
    if len(v) == 1 or v[0] == v[-1]:
        return float(v[0])
    best, best_split = np.inf, 1
    for i in range(1, len(v)):
        lo, hi = v[:i], v[i:]
        sse = ((lo - lo.mean()) ** 2).sum() + ((hi - hi.mean()) ** 2).sum()
        if sse < best:
            best, best_split = sse, i
    return float((v[:best_split].mean() + v[best_split:].mean()) / 2)


class MacroSegmenter(BaseEstimator):
    """Change points on log-entropy traces, segments tagged by entropy level.

    ``fit`` learns the intrinsic/extrinsic threshold from all traces;
    ``predict`` returns one :class:`MacroSegmentation` per trace. Series
    are indexed by transition; a trajectory of ``T`` states has ``T - 1``.
    """

    def __init__(self, penalty="bic", min_size=10, bandwidth="median", threshold=None):
        self.penalty = penalty
        self.min_size = min_size
        self.bandwidth = bandwidth
        self.threshold = threshold

    def _detect(self, log_entropy):
        y = np.asarray(log_entropy, dtype=np.float64)
        cfg = PeltConfig(self.penalty, self.min_size, self.bandwidth)
        if len(y) < 2 * cfg.min_size:
            return []
        return pelt(y, cfg, RbfCost(y, cfg.bandwidth))

    def fit(self, log_entropies, y=None):
        means = []
        self.change_points_ = []
        for series in log_entropies:
            cps = self._detect(series)
            self.change_points_.append(cps)
            bounds = [0] + cps + [len(series)]
            means += [float(np.mean(series[a:b])) for a, b in zip(bounds, bounds[1:])]
        self.threshold_ = float(self.threshold) if self.threshold is not None else two_means_threshold(means)
        return self

    def predict(self, log_entropies, lengths=None) -> list:
        check_is_fitted(self, "threshold_")
        out = []
        for i, series in enumerate(log_entropies):
            series = np.asarray(series, dtype=np.float64)
            cps = self._detect(series)
            n = len(series) if lengths is None else int(lengths[i])
            bounds = [0] + cps + [len(series)]
            means = [float(np.mean(series[a:b])) for a, b in zip(bounds, bounds[1:])]
            tags = ["extrinsic" if m < self.threshold_ else "intrinsic" for m in means]
            out.append(MacroSegmentation(cps, n, tags, means))
        return out


def macro_segment(trace: EntropyTrace, config: PeltConfig | None = None, threshold: float | None = None,
                  length: int | None = None) -> MacroSegmentation:
    """Single-trace convenience wrapper; without a threshold, segments are
    tagged against the 2-means split of their own means."""
    config = config or PeltConfig()
    seg = MacroSegmenter(config.penalty, config.min_size, config.bandwidth, threshold)
    seg.fit([trace.log_entropy])
    return seg.predict([trace.log_entropy], None if length is None else [length])[0]
