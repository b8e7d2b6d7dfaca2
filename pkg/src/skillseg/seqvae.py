"""Sliding-window sequential VAE over transitions, reconstruction-error
curves, micro-segmentation candidates and segment embeddings.

Index convention: all spans here are half-open ranges over a trajectory's
transition series (length ``T - 1``). Transition ``t`` is
``(s_t, a_t, s_{t+1})``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .changepoint import second_derivative_peaks, smooth
from .exceptions import ConfigurationError, TrainingError, UsageError

logger = logging.getLogger(__name__)

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0


@dataclass
class WindowSet:
    """``n`` windows of ``W`` consecutive transitions, stored as arrays."""

    x: np.ndarray          # n x W x D
    tasks: np.ndarray      # n
    traj_ids: np.ndarray   # n
    starts: np.ndarray     # n, transition index of the first step
    n_real: np.ndarray     # n, un-padded steps (== W unless padded)

    def __len__(self):
        return len(self.x)

    @property
    def padded(self) -> np.ndarray:
        return self.n_real < self.x.shape[1]

    @property
    def width(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "WindowSet":
        idx = np.asarray(idx, dtype=int)
        return WindowSet(self.x[idx], self.tasks[idx], self.traj_ids[idx], self.starts[idx], self.n_real[idx])


def window_starts(length: int, width: int, stride: int) -> list:
    """Start offsets covering ``[0, length)``; the last window is flush with the end."""
    if width < 2 or stride < 1:
        raise UsageError(f"need W >= 2 and stride >= 1, got W={width}, stride={stride}")
    if length <= width:
        return [0]
    starts = list(range(0, length - width + 1, stride))
    if starts[-1] != length - width:
        starts.append(length - width)
    return starts


def _pad_window(block: np.ndarray, width: int) -> np.ndarray:
    if len(block) >= width:
        return block[:width]
    return np.vstack([block, np.repeat(block[-1:], width - len(block), axis=0)])


def extract_windows(transitions: list, tasks, spans: list, width: int = 10, stride: int = 2) -> WindowSet:
    """Windows inside each span, never crossing span boundaries.

    ``transitions[i]`` is trajectory ``i``'s transition matrix and
    ``spans[i]`` its list of ``(start, end)`` macro segments. Spans shorter
    than ``width`` yield one window padded by repeating the last step.
    """
    xs, ts, ids, st, real = [], [], [], [], []
    for i, (trans, segs) in enumerate(zip(transitions, spans)):
        for a, b in segs:
            if not 0 <= a < b <= len(trans):
                raise UsageError(f"trajectory {i}: bad span ({a}, {b})")
            n = b - a
            for off in window_starts(n, width, stride):
                block = trans[a + off:a + min(off + width, n)]
                xs.append(_pad_window(block, width))
                ts.append(int(tasks[i]))
                ids.append(i)
                st.append(a + off)
                real.append(min(width, n))
    if not xs:
        raise UsageError("no windows extracted")
    return WindowSet(np.array(xs), np.array(ts), np.array(ids), np.array(st), np.array(real))


def gaussian_kl(mu_q, logvar_q, mu_p, logvar_p) -> ad.Tensor:
    """Per-row ``KL(N(mu_q, var_q) || N(mu_p, var_p))`` for diagonal Gaussians."""
    ratio = ad.exp(logvar_q - logvar_p)
    maha = ad.square(mu_q - mu_p) * ad.exp(-logvar_p)
    return ad.tsum((logvar_p - logvar_q + ratio + maha - 1.0) * 0.5, axis=1)


def kl_closed_form(mu_q, logvar_q, mu_p, logvar_p) -> np.ndarray:
    return gaussian_kl(ad.Tensor(np.atleast_2d(mu_q)), ad.Tensor(np.atleast_2d(logvar_q)),
                       ad.Tensor(np.atleast_2d(mu_p)), ad.Tensor(np.atleast_2d(logvar_p))).value


@dataclass
class SeqVaeParts:
    total: ad.Tensor
    recon: ad.Tensor
    kl: ad.Tensor
    step_errors: np.ndarray  # n x W, per-step squared error

    def values(self) -> dict:
        return {"total": float(self.total.value), "recon": float(self.recon.value), "kl": float(self.kl.value)}


class SeqVaeNets:
    """Posterior, prior and per-step decoder networks."""

    def __init__(self, encoder: ad.MlpParams, prior: ad.MlpParams, decoder: ad.MlpParams,
                 state_dim: int, action_dim: int, n_tasks: int, latent_dim: int):
        self.encoder, self.prior, self.decoder = encoder, prior, decoder
        self.state_dim, self.action_dim = state_dim, action_dim
        self.n_tasks, self.latent_dim = n_tasks, latent_dim

    @classmethod
    def init(cls, width, state_dim, action_dim, n_tasks, latent_dim, hidden, rng):
        d = 2 * state_dim + action_dim
        enc = ad.MlpParams.init([width * d, *hidden, 2 * latent_dim], rng)
        prior = ad.MlpParams.init([state_dim + n_tasks, *hidden, 2 * latent_dim], rng)
        dec = ad.MlpParams.init([latent_dim + state_dim + n_tasks, *hidden, action_dim + state_dim], rng)
        return cls(enc, prior, dec, state_dim, action_dim, n_tasks, latent_dim)

    def modules(self) -> dict:
        return {"encoder": self.encoder, "prior": self.prior, "decoder": self.decoder}

    def parameters(self) -> list:
        return self.encoder.parameters() + self.prior.parameters() + self.decoder.parameters()

    def _one_hot(self, tasks):
        out = np.zeros((len(tasks), self.n_tasks))
        out[np.arange(len(tasks)), np.asarray(tasks, dtype=int)] = 1.0
        return out

    def posterior(self, x):
        """``(mu, logvar)`` tensors for an ``n x W x D`` window batch."""
        x = np.asarray(x, dtype=np.float64)
        h = self.encoder(x.reshape(len(x), -1))
        lat = self.latent_dim
        return h[:, :lat], ad.clip(h[:, lat:], LOGVAR_MIN, LOGVAR_MAX)

    def prior_params(self, initial_states, tasks):
        h = self.prior(np.hstack([initial_states, self._one_hot(tasks)]))
        lat = self.latent_dim
        return h[:, :lat], ad.clip(h[:, lat:], LOGVAR_MIN, LOGVAR_MAX)

    def decode(self, z: ad.Tensor, x, tasks) -> ad.Tensor:
        """Per-step predictions ``[a_t, s_{t+1}]``, shape ``(n W) x (Da + Ds)``."""
        n, w, _ = x.shape
        rows = np.repeat(np.arange(n), w)
        z_rep = ad.take_rows(z, rows)
        s_t = x[:, :, :self.state_dim].reshape(n * w, -1)
        c = self._one_hot(np.repeat(tasks, w))
        return self.decoder(ad.concat([z_rep, ad.Tensor(s_t), ad.Tensor(c)], axis=1))


def seqvae_loss(windows: WindowSet, nets: SeqVaeNets, alpha_kl: float = 0.1, eps=None) -> SeqVaeParts:
    """Batch-mean of per-window summed reconstruction error plus ``alpha_kl`` KL.

    ``eps`` is the reparameterization noise (``n x L``); ``None`` uses the
    posterior mean.
    """
    x = windows.x
    n, w, _ = x.shape
    ds, da = nets.state_dim, nets.action_dim
    mu_q, lv_q = nets.posterior(x)
    mu_p, lv_p = nets.prior_params(x[:, 0, :ds], windows.tasks)
    z = mu_q if eps is None else mu_q + ad.exp(lv_q * 0.5) * np.asarray(eps)
    pred = nets.decode(z, x, windows.tasks)
    target = np.concatenate([x[:, :, ds:ds + da], x[:, :, ds + da:]], axis=2).reshape(n * w, -1)
    sq = ad.square(pred - target)
    recon = ad.tsum(sq) * (1.0 / n)
    kl = ad.tmean(gaussian_kl(mu_q, lv_q, mu_p, lv_p))
    if not np.isfinite(kl.value):
        raise TrainingError("non-finite KL term")
    total = recon + alpha_kl * kl
    if not np.isfinite(total.value):
        raise TrainingError("non-finite seqVAE loss")
    return SeqVaeParts(total, recon, kl, sq.value.sum(axis=1).reshape(n, w))


class SeqVAE(BaseEstimator):
    """Window VAE with a state/task-conditioned prior.

    ``fit`` takes a :class:`WindowSet` built from normalized transitions.
    """

    def __init__(self, action_dim=2, latent_dim=8, hidden=(64, 64), alpha_kl=0.1, learning_rate=1e-3,
                 n_steps=2000, batch_size=64, holdout_fraction=0.1, random_state=0):
        self.action_dim = action_dim
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.alpha_kl = alpha_kl
        self.learning_rate = learning_rate
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.holdout_fraction = holdout_fraction
        self.random_state = random_state

    def fit(self, windows: WindowSet, y=None):
        if len(windows) == 0:
            raise UsageError("empty window set")
        if not (np.isfinite(self.alpha_kl) and self.alpha_kl >= 0):
            raise ConfigurationError(f"alpha_kl must be finite and >= 0, got {self.alpha_kl}")
        rng = np.random.default_rng(self.random_state)
        d = windows.x.shape[2]
        state_dim = (d - self.action_dim) // 2
        if 2 * state_dim + self.action_dim != d:
            raise ConfigurationError(f"transition width {d} incompatible with action_dim {self.action_dim}")
        self.width_ = windows.width
        self.n_tasks_ = int(windows.tasks.max()) + 1
        self.nets_ = SeqVaeNets.init(self.width_, state_dim, self.action_dim, self.n_tasks_,
                                     self.latent_dim, tuple(self.hidden), rng)
        perm = rng.permutation(len(windows))
        n_hold = int(round(self.holdout_fraction * len(windows)))
        hold, train = perm[:n_hold], perm[n_hold:]
        if len(train) == 0:
            train = hold
        self.holdout_index_ = np.sort(hold)
        held = windows.subset(hold) if n_hold else None
        self.initial_holdout_ = self._evaluate(held)
        opt = ad.Adam(self.nets_.parameters(), lr=self.learning_rate)
        self.history_ = []
        last_good = self.state_dict()
        for step in range(self.n_steps):
            batch = windows.subset(train[rng.integers(0, len(train), size=min(self.batch_size, len(train)))])
            eps = rng.standard_normal((len(batch), self.latent_dim))
            try:
                parts = seqvae_loss(batch, self.nets_, self.alpha_kl, eps)
                opt.step(parts.total)
            except TrainingError as exc:
                exc.checkpoint = last_good
                raise
            self.history_.append(float(parts.total.value))
            if step % 200 == 0:
                last_good = self.state_dict()
        self.final_holdout_ = self._evaluate(held)
        return self

    def _evaluate(self, windows):
        if windows is None:
            return {"total": float("nan"), "recon": float("nan"), "kl": float("nan")}
        return self.loss(windows).values()

    def loss(self, windows: WindowSet, eps=None) -> SeqVaeParts:
        return seqvae_loss(windows, self.nets_, self.alpha_kl, eps)

    @property
    def state_dim_(self) -> int:
        return self.nets_.state_dim

    def encode(self, x) -> np.ndarray:
        """Posterior means for an ``n x W x D`` array."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[1] != self.width_:
            raise UsageError(f"expected n x {self.width_} x D windows, got shape {x.shape}")
        return self.nets_.posterior(x)[0].value

    def step_errors(self, windows: WindowSet) -> np.ndarray:
        """Per-step reconstruction error with ``z = mu_q``."""
        return self.loss(windows).step_errors

    # persistence ---------------------------------------------------------------
    def state_dict(self) -> dict:
        return {
            "params": self.get_params(),
            "modules": {k: m.to_dict() for k, m in self.nets_.modules().items()},
            "width": self.width_,
            "n_tasks": self.n_tasks_,
            "state_dim": self.nets_.state_dim,
        }

    @classmethod
    def from_state_dict(cls, d) -> "SeqVAE":
        params = dict(d["params"])
        params["hidden"] = tuple(params["hidden"])
        model = cls(**params)
        mods = {k: ad.MlpParams.from_dict(v) for k, v in d["modules"].items()}
        model.width_ = int(d["width"])
        model.n_tasks_ = int(d["n_tasks"])
        model.nets_ = SeqVaeNets(mods["encoder"], mods["prior"], mods["decoder"], int(d["state_dim"]),
                                 model.action_dim, model.n_tasks_, model.latent_dim)
        return model


def train_seqvae(windows: WindowSet, config: dict | None = None, seed: int = 0) -> SeqVAE:
    if len(windows) == 0:
        raise UsageError("empty window set")
    return SeqVAE(random_state=seed, **dict(config or {})).fit(windows)


# error curves and candidates ----------------------------------------------------

def reconstruction_error_curve(model: SeqVAE, transitions: np.ndarray, task: int, span=None,
                               stride: int = 1) -> np.ndarray:
    """Per-step error over ``span``, averaged across every covering window."""
    a, b = span if span is not None else (0, len(transitions))
    ws = extract_windows([transitions], [task], [[(a, b)]], model.width_, stride)
    err = model.step_errors(ws)
    total = np.zeros(b - a)
    count = np.zeros(b - a)
    for row, start, n_real in zip(err, ws.starts, ws.n_real):
        off = start - a
        total[off:off + n_real] += row[:n_real]
        count[off:off + n_real] += 1
    return total / np.maximum(count, 1)


@dataclass
class PeakConfig:
    smooth_window: int = 5
    prominence: float = 1.0
    min_gap: int = 10
    edge_margin: int = 10


def candidate_splits(curve, config: PeakConfig | None = None, offset: int = 0) -> list:
    """Second-difference peaks of the smoothed curve, shifted by ``offset``.

    Peaks closer than ``edge_margin`` to either end of the curve are dropped,
    so no candidate creates a micro-segment shorter than ``edge_margin``.
    """
    config = config or PeakConfig()
    y = np.asarray(curve, dtype=np.float64)
    if len(y) < 3:
        return []
    peaks = second_derivative_peaks(smooth(y, config.smooth_window), config.prominence, config.min_gap)
    return [int(p) + offset for p in peaks if config.edge_margin <= p <= len(y) - config.edge_margin]


def resample_segment(block: np.ndarray, width: int) -> np.ndarray:
    """Linear interpolation at ``width`` evenly spaced indices."""
    block = np.asarray(block, dtype=np.float64)
    if len(block) == 0:
        raise UsageError("empty segment")
    if len(block) == width:
        return block.copy()
    pos = np.linspace(0.0, len(block) - 1, width)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, len(block) - 1)
    frac = (pos - lo)[:, None]
    return block[lo] * (1 - frac) + block[hi] * frac


def embed_segment(model: SeqVAE, transitions: np.ndarray, span) -> np.ndarray:
    a, b = span
    if b <= a:
        raise UsageError(f"empty segment ({a}, {b})")
    return model.encode(resample_segment(transitions[a:b], model.width_)[None])[0]


def embed_segments(model: SeqVAE, transitions: np.ndarray, spans) -> np.ndarray:
    spans = list(spans)
    if not spans:
        return np.zeros((0, model.latent_dim))
    for a, b in spans:
        if b <= a:
            raise UsageError(f"empty segment ({a}, {b})")
    batch = np.stack([resample_segment(transitions[a:b], model.width_) for a, b in spans])
    return model.encode(batch)
