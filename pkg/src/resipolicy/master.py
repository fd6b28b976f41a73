"""Master policy: conditional diffusion over normalized action chunks.

A 10 Hz policy that denoises an H-step, 7D chunk from pure noise,
conditioned on the fused observation context. Training follows the usual
noise-prediction objective; sampling is plain ancestral denoising with no
noise added on the final step.
"""
from __future__ import annotations

import dataclasses

import numpy as np

from . import autograd as ag
from .autograd import Var
from .core import ACTION_DIM, ActionChunk, Normalizer, TokenSet
from .fusion import FusionConfig, fusion_context, init_fusion_params
from .kernel import ParamStore, adam_update, affine, load_checkpoint, save_checkpoint
from .util import stream


@dataclasses.dataclass(eq=False)
class DiffusionSchedule:
    """Noise schedule: betas, alphas = 1 - betas, alpha_bars = cumprod."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @classmethod
    def linear(cls, num_steps=50, beta_start=1e-4, beta_end=0.02):
        betas = np.linspace(beta_start, beta_end, num_steps)
        sched = cls(betas, 1.0 - betas, np.cumprod(1.0 - betas))
        return sched.validate()

    def validate(self):
        if np.any(self.betas <= 0) or np.any(self.betas >= 1):
            raise ValueError("betas must lie strictly inside (0, 1)")
        if np.any(np.diff(self.alpha_bars) >= 0):
            raise ValueError("alpha_bars must be strictly decreasing")
        return self

    @property
    def num_steps(self):
        return len(self.betas)


def diffuse(a_norm, alpha_bar, eps):
    """Noising formula: sqrt(ab) * a + sqrt(1 - ab) * eps, entrywise."""
    return np.sqrt(alpha_bar) * np.asarray(a_norm) + np.sqrt(1.0 - alpha_bar) * np.asarray(eps)


def forward_diffuse(chunk: ActionChunk, k, eps, sched: DiffusionSchedule):
    """Apply k-th noise level of the schedule to a normalized chunk."""
    if not chunk.normalized:
        raise ValueError("forward_diffuse expects a normalized chunk")
    if not 0 <= k < sched.num_steps:
        raise ValueError(f"diffusion step {k} outside [0, {sched.num_steps})")
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != chunk.steps.shape:
        raise ValueError("noise shape must match the chunk")
    return diffuse(chunk.steps, sched.alpha_bars[k], eps)


def sinusoidal_embedding(ks, dim):
    """Transformer-style sin/cos embedding of integer diffusion steps."""
    ks = np.atleast_1d(np.asarray(ks, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = ks[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclasses.dataclass
class MasterConfig:
    horizon: int = 8
    diffusion_steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    hidden: int = 256
    step_embed_dim: int = 32
    epochs: int = 300
    lr: float = 1e-3
    batch_size: int = 32
    pair_stride: int = 1
    replan_every_step: bool = False

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class MasterPolicy:
    """Diffusion denoiser + fusion front end + the action normalizer."""

    def __init__(self, store, normalizer, cfg, fusion_cfg, proprio_dim, trained=False):
        self.store = store
        self.normalizer = normalizer
        self.cfg = cfg
        self.fusion_cfg = fusion_cfg
        self.proprio_dim = proprio_dim
        self.trained = trained
        self.schedule = DiffusionSchedule.linear(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)

    @classmethod
    def create(cls, normalizer, cfg, fusion_cfg, proprio_dim, rng):
        store = ParamStore()
        init_fusion_params(store, fusion_cfg, proprio_dim, rng)
        chunk_dim = cfg.horizon * ACTION_DIM
        in_dim = chunk_dim + cfg.step_embed_dim + fusion_cfg.ctx_dim
        store.add("denoiser.w1", rng.normal(0.0, 1.0 / np.sqrt(in_dim), (in_dim, cfg.hidden)))
        store.add("denoiser.b1", np.zeros((1, cfg.hidden)))
        store.add("denoiser.w2", rng.normal(0.0, 1.0 / np.sqrt(cfg.hidden), (cfg.hidden, cfg.hidden)))
        store.add("denoiser.b2", np.zeros((1, cfg.hidden)))
        # zero-initialized head: the untrained net predicts zero noise
        store.add("denoiser.w3", np.zeros((cfg.hidden, chunk_dim)))
        store.add("denoiser.b3", np.zeros((1, chunk_dim)))
        return cls(store, normalizer, cfg, fusion_cfg, proprio_dim, trained=False)

    @property
    def chunk_dim(self):
        return self.cfg.horizon * ACTION_DIM

    def denoise(self, noisy, ks, ctx, leaves):
        """Predicted noise for a batch: rows of [noisy chunk | k embed | ctx]."""
        emb = Var(sinusoidal_embedding(ks, self.cfg.step_embed_dim))
        x = ag.concat_cols([ag._lift(noisy), emb, ag._lift(ctx)])
        h1 = ag.tanh(affine(x, leaves["denoiser.w1"], leaves["denoiser.b1"]))
        h2 = ag.tanh(affine(h1, leaves["denoiser.w2"], leaves["denoiser.b2"]))
        return affine(h2, leaves["denoiser.w3"], leaves["denoiser.b3"])

    def context(self, ts: TokenSet, leaves):
        return fusion_context(ts, leaves, self.fusion_cfg)

    def save(self, path):
        meta = {
            "kind": "master",
            "cfg": self.cfg.to_dict(),
            "fusion": self.fusion_cfg.to_dict(),
            "normalizer": self.normalizer.to_dict(),
            "proprio_dim": self.proprio_dim,
            "trained": self.trained,
        }
        save_checkpoint(path, self.store, meta)

    @classmethod
    def load(cls, path):
        store, meta = load_checkpoint(path)
        if meta.get("kind") != "master":
            raise ValueError(f"{path} is not a master-policy checkpoint")
        return cls(
            store,
            Normalizer.from_dict(meta["normalizer"]),
            MasterConfig.from_dict(meta["cfg"]),
            FusionConfig.from_dict(meta["fusion"]),
            int(meta["proprio_dim"]),
            trained=bool(meta["trained"]),
        )


def loss_given_noise(model, tokensets, flat_chunks, ks, eps, leaves, eps_fn=None):
    """Noise-prediction MSE with the noise draws fixed by the caller.

    Per element the loss is ||pred - eps||^2 / (H*7); the batch loss is the
    mean over elements. eps_fn substitutes an oracle denoiser (ndarray in,
    ndarray out) and short-circuits the graph."""
    ab = model.schedule.alpha_bars[ks]
    noisy = np.sqrt(ab)[:, None] * flat_chunks + np.sqrt(1.0 - ab)[:, None] * eps
    if eps_fn is not None:
        ctx = np.concatenate(
            [model.context(ts, leaves).value for ts in tokensets], axis=0
        )
        pred = eps_fn(noisy, ks, ctx)
        return float(np.mean((pred - eps) ** 2)), leaves
    ctx = ag.concat_rows([model.context(ts, leaves) for ts in tokensets])
    pred = model.denoise(Var(noisy), ks, ctx, leaves)
    diff = ag.sub(pred, Var(eps))
    return ag.mean_all(ag.square(diff)), leaves


def master_loss(model, batch, rng, leaves=None, eps_fn=None):
    """Sample (k, eps) per element and return the noise-prediction loss.

    batch is a sequence of (TokenSet, normalized (H,7) chunk) pairs.
    """
    if not batch:
        raise ValueError("empty batch")
    if leaves is None:
        leaves = model.store.vars(track=False)
    tokensets = [ts for ts, _ in batch]
    flats = np.stack([np.asarray(chunk).reshape(-1) for _, chunk in batch])
    ks = rng.integers(0, model.schedule.num_steps, size=len(batch))
    eps = rng.standard_normal(flats.shape)
    return loss_given_noise(model, tokensets, flats, ks, eps, leaves, eps_fn)


def dataset_to_pairs(episodes, normalizer, horizon, stride=1):
    """(TokenSet at t, normalized chunk a_{t:t+H-1}) pairs over all episodes."""
    pairs = []
    for ep in episodes:
        actions = normalizer.normalize_array(ep.action_matrix())
        for t in range(0, ep.n_steps() - horizon + 1, stride):
            pairs.append((ep.obs_stream[t], actions[t : t + horizon]))
    return pairs


def train_master(episodes, normalizer, cfg: MasterConfig, fusion_cfg: FusionConfig, seed):
    """Train from scratch; deterministic given (episodes, configs, seed).

    Returns (model, per-epoch mean losses).
    """
    pairs = dataset_to_pairs(episodes, normalizer, cfg.horizon, cfg.pair_stride)
    if not pairs:
        raise ValueError("dataset produced no training pairs")
    proprio_dim = pairs[0][0].proprio.size
    model = MasterPolicy.create(normalizer, cfg, fusion_cfg, proprio_dim, stream(seed, "init"))
    rng = stream(seed, "train")
    losses = []
    n = len(pairs)
    for _epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        batches = 0
        for at in range(0, n, cfg.batch_size):
            batch = [pairs[i] for i in order[at : at + cfg.batch_size]]
            leaves = model.store.vars()
            loss, _ = master_loss(model, batch, rng, leaves)
            model.store.zero_grads()
            loss.backward()
            model.store.accumulate(leaves)
            adam_update(model.store, lr=cfg.lr)
            total += loss.item()
            batches += 1
        losses.append(total / batches)
    model.trained = True
    return model, losses


def sample_chunk_normalized(model, ctx_row, rng, eps_fn=None):
    """Ancestral denoising from pure noise; returns a normalized (H, 7) chunk.

    ctx_row: (1, ctx_dim) conditioning context (ndarray). The final step
    adds no noise. Deterministic given (model, ctx_row, rng state)."""
    sched = model.schedule
    leaves = model.store.vars(track=False)
    x = rng.standard_normal((1, model.chunk_dim))
    for k in range(sched.num_steps - 1, -1, -1):
        if eps_fn is not None:
            eps_hat = np.asarray(eps_fn(x, k, ctx_row))
        else:
            eps_hat = model.denoise(Var(x), np.array([k]), Var(ctx_row), leaves).value
        x = (x - sched.betas[k] / np.sqrt(1.0 - sched.alpha_bars[k]) * eps_hat) / np.sqrt(sched.alphas[k])
        if k > 0:
            var = (1.0 - sched.alpha_bars[k - 1]) / (1.0 - sched.alpha_bars[k]) * sched.betas[k]
            x = x + np.sqrt(var) * rng.standard_normal(x.shape)
    return x.reshape(model.cfg.horizon, ACTION_DIM)


def sample_chunk(model, ts: TokenSet, rng, allow_untrained=False, eps_fn=None):
    """Generate one denormalized action chunk conditioned on an observation."""
    if not model.trained and not allow_untrained and eps_fn is None:
        raise ValueError("model is untrained; pass allow_untrained=True to sample anyway")
    leaves = model.store.vars(track=False)
    ctx = model.context(ts, leaves).value
    norm = sample_chunk_normalized(model, ctx, rng, eps_fn)
    return ActionChunk(model.normalizer.denormalize_array(norm), normalized=False)
