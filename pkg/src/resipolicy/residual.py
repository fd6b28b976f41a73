"""Micro-residual corrector: 60 Hz GRU over strided-conv wrench features.

The corrector consumes the high-rate wrench stream, compresses each
trailing 6-sample window into one feature column, and lets a small GRU
predict a clamped correction around the frozen master baseline. Targets
are expert-minus-master differences in normalized action space, defined
per 10 Hz step and broadcast to the six wrench ticks inside that step.
"""
from __future__ import annotations

import dataclasses

import numpy as np

from . import autograd as ag
from .autograd import Var
from .core import ACTION_DIM, WRENCH_PER_STEP, ConfigError, Normalizer
from .episodes import Episode
from .kernel import (
    ParamStore,
    adam_update,
    affine,
    gru_param_view,
    gru_step,
    init_gru_params,
    load_checkpoint,
    save_checkpoint,
)
from .master import sample_chunk_normalized
from .util import stream

WINDOW = WRENCH_PER_STEP  # 6 samples, one action step
WRENCH_DIM = 6


@dataclasses.dataclass
class ResidualConfig:
    features: int = 16
    hidden: int = 64
    clamp: float = 0.1
    epochs: int = 150
    lr: float = 1e-3
    tbptt: int = 30

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class ResidualCorrector:
    """Conv + GRU + linear head emitting clamped normalized corrections."""

    def __init__(self, store, cfg, trained=False):
        if cfg.clamp <= 0:
            raise ConfigError("residual clamp bound must be positive")
        self.store = store
        self.cfg = cfg
        self.trained = trained

    @classmethod
    def create(cls, cfg, rng):
        store = ParamStore()
        store.add("conv.w", rng.normal(0.0, 1.0 / np.sqrt(WINDOW * WRENCH_DIM), (WINDOW * WRENCH_DIM, cfg.features)))
        store.add("conv.b", np.zeros((1, cfg.features)))
        init_gru_params(store, "gru.", cfg.features + ACTION_DIM, cfg.hidden, rng)
        # zero head: a fresh corrector emits exactly zero residuals
        store.add("head.w", np.zeros((cfg.hidden, ACTION_DIM)))
        store.add("head.b", np.zeros((1, ACTION_DIM)))
        return cls(store, cfg)

    def save(self, path):
        save_checkpoint(path, self.store, {"kind": "residual", "cfg": self.cfg.to_dict(), "trained": self.trained})

    @classmethod
    def load(cls, path):
        store, meta = load_checkpoint(path)
        if meta.get("kind") != "residual":
            raise ValueError(f"{path} is not a residual-corrector checkpoint")
        return cls(store, ResidualConfig.from_dict(meta["cfg"]), trained=bool(meta.get("trained", False)))


@dataclasses.dataclass(eq=False)
class ResidualState:
    """Per-rollout recurrent state plus the trailing wrench buffer."""

    hidden: np.ndarray
    sample_buffer: list
    last_feature: np.ndarray

    @classmethod
    def initial(cls, model):
        return cls(
            hidden=np.zeros((1, model.cfg.hidden)),
            sample_buffer=[],
            last_feature=np.zeros(model.cfg.features),
        )

    def push_sample(self, wrench6):
        self.sample_buffer.append(np.asarray(wrench6, dtype=np.float64).reshape(WRENCH_DIM))
        if len(self.sample_buffer) > WINDOW:
            self.sample_buffer.pop(0)

    def window(self):
        """Trailing 6-sample window, zero-padded at the start of an episode."""
        out = np.zeros((WINDOW, WRENCH_DIM))
        if self.sample_buffer:
            got = np.stack(self.sample_buffer)
            out[WINDOW - len(self.sample_buffer) :] = got
        return out


def encode_wrench_window(window, model):
    """One strided-conv output column for a (6, 6) wrench window."""
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (WINDOW, WRENCH_DIM):
        raise ValueError(f"window must be ({WINDOW}, {WRENCH_DIM}), got {window.shape}")
    flat = Var(window.reshape(1, WINDOW * WRENCH_DIM))
    leaves = model.store.vars(track=False)
    return affine(flat, leaves["conv.w"], leaves["conv.b"]).value.reshape(-1)


def residual_step(state: ResidualState, feature, master_action_norm, model):
    """Advance the GRU one 60 Hz tick; returns (new state, clamped residual)."""
    leaves = model.store.vars(track=False)
    x = Var(np.concatenate([np.asarray(feature), np.asarray(master_action_norm)]).reshape(1, -1))
    h = gru_step(Var(state.hidden), x, gru_param_view(leaves, "gru."))
    out = affine(h, leaves["head.w"], leaves["head.b"])
    delta = np.clip(out.value.reshape(-1), -model.cfg.clamp, model.cfg.clamp)
    new_state = ResidualState(hidden=h.value, sample_buffer=list(state.sample_buffer), last_feature=np.asarray(feature).copy())
    return new_state, delta


def trailing_windows(wrench_matrix):
    """(T6, 36) matrix of zero-padded trailing windows per 60 Hz tick."""
    t6 = wrench_matrix.shape[0]
    padded = np.concatenate([np.zeros((WINDOW - 1, WRENCH_DIM)), wrench_matrix], axis=0)
    out = np.empty((t6, WINDOW * WRENCH_DIM))
    for j in range(t6):
        out[j] = padded[j : j + WINDOW].reshape(-1)
    return out


def build_residual_targets(episodes, normalizer: Normalizer, master, root_seed=0):
    """Residual-target dataset against the frozen master baseline.

    For each episode, the master reconstructs its chunks from the recorded
    observations with fixed-seed sampling; per-step targets are
    (normalized expert action) - (reconstructed chunk step). Returns new
    Episode objects carrying `residual` records; the master is read-only
    throughout.
    """
    if not np.array_equal(normalizer.lo, master.normalizer.lo) or not np.array_equal(
        normalizer.hi, master.normalizer.hi
    ):
        raise ConfigError("dataset normalizer does not match the master checkpoint")
    horizon = master.cfg.horizon
    leaves = master.store.vars(track=False)
    out = []
    for e_idx, ep in enumerate(episodes):
        exp_norm = normalizer.normalize_array(ep.action_matrix())
        n = ep.n_steps()
        targets = np.zeros((n, ACTION_DIM))
        for w in range(0, n, horizon):
            ctx = master.context(ep.obs_stream[w], leaves).value
            rng = stream(root_seed, "residual-targets", e_idx, w)
            chunk = sample_chunk_normalized(master, ctx, rng)
            span = min(horizon, n - w)
            targets[w : w + span] = exp_norm[w : w + span] - chunk[:span]
        residual_stream = [(ep.action_time(i), targets[i]) for i in range(n)]
        out.append(
            Episode(
                obs_stream=ep.obs_stream,
                action_stream=ep.action_stream,
                wrench_stream=ep.wrench_stream,
                task_id=ep.task_id,
                seed=ep.seed,
                horizon=ep.horizon,
                residual_stream=residual_stream,
            )
        )
    return out


def _episode_tensors(ep: Episode, normalizer: Normalizer):
    """Per-tick training tensors: windows (T6,36), inputs master (T6,7), targets (T6,7)."""
    n = ep.n_steps()
    if len(ep.residual_stream) != n:
        raise ValueError("residual episode must carry one target per action step")
    targets_step = np.stack([vec for _, vec in ep.residual_stream])
    exp_norm = normalizer.normalize_array(ep.action_matrix())
    master_step = exp_norm - targets_step
    windows = trailing_windows(ep.wrench_matrix())
    reps = np.repeat(np.arange(n), WINDOW)
    return windows, master_step[reps], targets_step[reps]


def train_residual(residual_episodes, normalizer, cfg: ResidualConfig, seed):
    """Truncated-BPTT regression of residual targets; deterministic per seed.

    Episodes are batched along the leading axis (grouped by length); the
    hidden state is carried across segment boundaries but detached, and
    the loss is the MSE of the clamped prediction against the broadcast
    per-step target.
    """
    if not residual_episodes:
        raise ValueError("empty residual dataset")
    model = ResidualCorrector.create(cfg, stream(seed, "init"))
    groups = {}
    for ep in residual_episodes:
        groups.setdefault(ep.n_steps(), []).append(ep)
    batches = []
    for _, eps in sorted(groups.items()):
        tensors = [_episode_tensors(ep, normalizer) for ep in eps]
        wins = np.stack([t[0] for t in tensors])
        masters = np.stack([t[1] for t in tensors])
        targets = np.stack([t[2] for t in tensors])
        batches.append((wins, masters, targets))
    losses = []
    for _epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for wins, masters, targets in batches:
            b, t6, _ = wins.shape
            hidden = np.zeros((b, cfg.hidden))
            for seg_start in range(0, t6, cfg.tbptt):
                seg_end = min(seg_start + cfg.tbptt, t6)
                leaves = model.store.vars()
                gru_p = gru_param_view(leaves, "gru.")
                h = Var(hidden)
                sq_terms = []
                for j in range(seg_start, seg_end):
                    feat = affine(Var(wins[:, j]), leaves["conv.w"], leaves["conv.b"])
                    x = ag.concat_cols([feat, Var(masters[:, j])])
                    h = gru_step(h, x, gru_p)
                    pred = ag.clamp(affine(h, leaves["head.w"], leaves["head.b"]), -cfg.clamp, cfg.clamp)
                    sq_terms.append(ag.mean_all(ag.square(ag.sub(pred, Var(targets[:, j])))))
                seg_loss = ag.scale(ag.sum_all(ag.concat_cols(sq_terms)), 1.0 / len(sq_terms))
                model.store.zero_grads()
                seg_loss.backward()
                model.store.accumulate(leaves)
                adam_update(model.store, lr=cfg.lr)
                hidden = h.value
                total += seg_loss.item() * len(sq_terms)
                count += seg_end - seg_start
        losses.append(total / count)
    model.trained = True
    return model, losses
