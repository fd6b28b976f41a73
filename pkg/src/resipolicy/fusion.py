"""Confidence-gated visuotactile cross attention.

Visual tokens are the queries and the permanent geometric anchor; tactile
tokens join the key/value pool only while the wrench norm says the tool is
in contact. The gate is a hard threshold, not a learned weight.
"""
from __future__ import annotations

import dataclasses

import numpy as np

from . import autograd as ag
from .autograd import Var
from .core import ConfigError, TokenSet
from .kernel import affine, multi_head_attention


@dataclasses.dataclass
class FusionConfig:
    tau: float = 0.5
    mask_semantics: str = "exclusion"
    n_visual: int = 2
    n_tactile: int = 2
    token_dim: int = 32
    heads: int = 4
    ctx_dim: int = 32
    gating_enabled: bool = True

    def validate(self):
        if self.tau <= 0:
            raise ConfigError("fusion tau must be positive")
        if self.mask_semantics not in ("exclusion", "literal_multiplicative"):
            raise ConfigError(f"unknown mask semantics {self.mask_semantics!r}")
        if self.token_dim % self.heads != 0:
            raise ConfigError("head count must divide token_dim")
        for field in ("n_visual", "n_tactile", "token_dim", "heads", "ctx_dim"):
            if getattr(self, field) < 1:
                raise ConfigError(f"fusion {field} must be >= 1")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()


def contact_confidence(wrench, tau):
    """1 iff the Euclidean norm of the 6D wrench strictly exceeds tau."""
    wrench = np.asarray(wrench, dtype=np.float64)
    return 1 if float(np.linalg.norm(wrench)) > tau else 0


def build_mask(c, n_visual, n_tactile):
    """Visual keys are always admitted; tactile keys only when c == 1."""
    mask = np.zeros((n_visual, n_visual + n_tactile), dtype=bool)
    mask[:, :n_visual] = True
    if c:
        mask[:, n_visual:] = True
    return mask


def init_fusion_params(store, cfg: FusionConfig, proprio_dim, rng, prefix="fusion."):
    d = cfg.token_dim
    s = 1.0 / np.sqrt(d)
    for name in ("wq", "wk", "wv", "wo"):
        store.add(prefix + name, rng.normal(0.0, s, (d, d)))
    flat_dim = cfg.n_visual * d + proprio_dim
    store.add(prefix + "w_align", rng.normal(0.0, 1.0 / np.sqrt(flat_dim), (flat_dim, cfg.ctx_dim)))
    store.add(prefix + "b_align", np.zeros((1, cfg.ctx_dim)))


def gated_fusion(ts: TokenSet, params, cfg: FusionConfig, prefix="fusion."):
    """Fused visual-anchored features: F_v + MHA(F_v -> [F_v; F_tac]) @ W_o.

    With gating enabled the tactile keys are admitted only when the
    contact gate fires; with gating disabled the mask is constant all-one
    (tactile always participates), which is the no-adaptive-fusion ablation.
    """
    c = contact_confidence(ts.wrench, cfg.tau) if cfg.gating_enabled else 1
    mask = build_mask(c, cfg.n_visual, cfg.n_tactile)
    visual = Var(ts.visual_tokens)
    pool = ag.concat_rows([visual, Var(ts.tactile_tokens)])
    mixed = multi_head_attention(
        visual,
        pool,
        mask,
        params[prefix + "wq"],
        params[prefix + "wk"],
        params[prefix + "wv"],
        cfg.heads,
        cfg.mask_semantics,
    )
    return ag.add(visual, ag.matmul(mixed, params[prefix + "wo"]))


def build_context(fused, proprio, params, prefix="fusion."):
    """Flatten fused tokens row-major, append proprio, one alignment affine."""
    fused = ag._lift(fused)
    flat = ag.reshape(fused, (1, fused.value.size))
    prop = ag._lift(proprio)
    if prop.value.ndim == 1:
        prop = ag.reshape(prop, (1, prop.value.size))
    joined = ag.concat_cols([flat, prop])
    return affine(joined, params[prefix + "w_align"], params[prefix + "b_align"])


def fusion_context(ts: TokenSet, params, cfg: FusionConfig, prefix="fusion."):
    """TokenSet -> (1, ctx_dim) conditioning context for the master policy."""
    fused = gated_fusion(ts, params, cfg, prefix)
    return build_context(fused, Var(ts.proprio.reshape(1, -1)), params, prefix)
