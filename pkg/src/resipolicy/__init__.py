"""Slow-fast residual manipulation stack over simulated contact tasks.

A 10 Hz diffusion master policy with confidence-gated visuotactile fusion
plans action chunks, a 60 Hz GRU corrector refines them from the wrench
stream, and a 125 Hz force-mixed impedance layer executes them compliantly.
Everything is deterministic given a root seed.
"""

from .core import (
    ActionChunk,
    AlignmentError,
    CodecError,
    ConfigError,
    Normalizer,
    Pose7,
    TokenSet,
    Wrench,
    align_wrench_windows,
    denormalize,
    normalize,
)
from .episodes import Episode, dataset_hash, decode_episode, encode_episode, load_dataset, save_dataset
from .fusion import FusionConfig, build_context, build_mask, contact_confidence, gated_fusion
from .impedance import (
    ImpedanceParams,
    RobotState,
    attractor_wrench,
    compliance_offset,
    impedance_step,
    mix_wrench,
)
from .kernel import ParamStore, adam_update, affine, grad_check, gru_step, multi_head_attention, strided_conv1d
from .master import (
    DiffusionSchedule,
    MasterConfig,
    MasterPolicy,
    forward_diffuse,
    master_loss,
    sample_chunk,
    train_master,
)
from .residual import (
    ResidualConfig,
    ResidualCorrector,
    ResidualState,
    build_residual_targets,
    encode_wrench_window,
    residual_step,
    train_residual,
)
from .runtime import RateConfig, RolloutTrace, evaluate, run_expert_rollout, run_rollout
from .sim import TaskSpec, generate_demos, make_env, make_expert, tokenize_observation

__version__ = "0.1.0"
