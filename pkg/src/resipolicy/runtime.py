"""Deterministic multi-rate closed loop and rollout evaluation.

A common 1500 Hz base clock (lcm of 10, 60, 125) drives three stages with
integer divisors: the master policy every 150 ticks, the residual
corrector every 25, the execution layer plus plant every 12. Within one
tick the stages always run master -> residual -> execution -> plant, so
each stage sees the newest upstream output. All randomness flows through
named per-rollout streams, which makes ablation variants paired: they
consume identical draws and differ only in the ablated pathway.
"""
from __future__ import annotations

import csv
import dataclasses
import json

import numpy as np

from .core import ConfigError, Pose7, Wrench
from .episodes import Episode, sha256_bytes
from .fusion import contact_confidence
from .impedance import ImpedanceParams, RobotState, impedance_step
from .master import sample_chunk_normalized
from .residual import ResidualState, encode_wrench_window, residual_step
from .sim import PROTECTIVE_STOP_FORCE, make_env, tokenize_observation
from .util import stream

VARIANTS = ("full", "no-fusion", "no-mrc", "rigid", "mgp-only")


@dataclasses.dataclass
class RateConfig:
    base_hz: int = 1500
    mgp_div: int = 150
    mrc_div: int = 25
    pbic_div: int = 12

    def validate(self):
        for name in ("base_hz", "mgp_div", "mrc_div", "pbic_div"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ConfigError(f"{name} must be a positive integer")
        checks = ((self.mgp_div, 10), (self.mrc_div, 60), (self.pbic_div, 125))
        for div, hz in checks:
            if self.base_hz % div != 0 or self.base_hz // div != hz:
                raise ConfigError(
                    f"base_hz={self.base_hz} with divisor {div} does not "
                    f"reproduce {hz} Hz exactly"
                )
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()


@dataclasses.dataclass(eq=False)
class RolloutTrace:
    records: list
    firings: dict
    outcome: str
    metrics: dict
    duration: float
    root_seed: int
    seed_index: int

    def to_ndjson(self) -> bytes:
        head = {
            "outcome": self.outcome,
            "metrics": self.metrics,
            "firings": self.firings,
            "duration": self.duration,
            "root_seed": self.root_seed,
            "seed_index": self.seed_index,
        }
        lines = [json.dumps(head, sort_keys=True, separators=(",", ":"))]
        lines.extend(json.dumps(r, sort_keys=True, separators=(",", ":")) for r in self.records)
        return ("\n".join(lines) + "\n").encode("utf-8")

    def hash(self) -> str:
        return sha256_bytes(self.to_ndjson())


class ExpertSource:
    """Adapter: a scripted expert emits one raw knot per 10 Hz step."""

    def __init__(self, expert):
        self.expert = expert

    def reset(self, state, task, rng):
        self.expert.reset(state, task, rng)

    def plan(self, ts, state, step_idx, rng, task):
        return self.expert.action(state, task), None


class MasterSource:
    """Chunked master policy: samples every H steps (or every step)."""

    def __init__(self, model, fusion_cfg=None, allow_untrained=False):
        self.model = model
        self.fusion_cfg = fusion_cfg or model.fusion_cfg
        self.allow_untrained = allow_untrained
        self.chunk = None
        self.chunk_start = 0
        self._leaves = model.store.vars(track=False)

    def reset(self, state, task, rng):
        if not self.model.trained and not self.allow_untrained:
            raise ValueError("master policy is untrained; pass allow_untrained=True")
        self.chunk = None
        self.chunk_start = 0

    def plan(self, ts, state, step_idx, rng, task):
        model = self.model
        horizon = model.cfg.horizon
        replan = (
            self.chunk is None
            or model.cfg.replan_every_step
            or step_idx - self.chunk_start >= horizon
        )
        if replan:
            ctx = model.context(ts, self._leaves, self.fusion_cfg).value
            self.chunk = sample_chunk_normalized(model, ctx, rng)
            self.chunk_start = step_idx
        i = min(step_idx - self.chunk_start, horizon - 1)
        norm = self.chunk[i]
        return model.normalizer.denormalize_array(norm), norm


def closed_loop(
    source,
    residual_model,
    pbic_params,
    env,
    task,
    fusion_cfg,
    normalizer,
    rates: RateConfig,
    duration,
    root_seed,
    seed_index,
    record_episode=False,
    episode_horizon=8,
    trace_stride=1,
    hold="linear",
):
    """Run one rollout on the base clock; returns (RolloutTrace, Episode|None).

    pbic_params=None degenerates to rigid servoing (x_cmd = x_ref);
    residual_model=None runs the master alone. Every random draw comes
    from streams named (root_seed, seed_index, purpose).
    """
    rates.validate()
    n_ticks_f = duration * rates.base_hz
    n_ticks = int(round(n_ticks_f))
    if abs(n_ticks_f - n_ticks) > 1e-9:
        raise ConfigError(f"duration {duration} is not an integer number of base ticks")
    if hold not in ("linear", "zoh"):
        raise ConfigError(f"unknown hold scheme {hold!r}")
    pbic_dt = rates.pbic_div / rates.base_hz

    env_rng = stream(root_seed, seed_index, "env-noise")
    mgp_rng = stream(root_seed, seed_index, "mgp-sample")
    init_rng = stream(root_seed, seed_index, "init")
    expert_rng = stream(root_seed, seed_index, "expert")

    state = env.reset(init_rng)
    source.reset(state, task, expert_rng)
    res_state = ResidualState.initial(residual_model) if residual_model is not None else None
    residual = np.zeros(7)
    measured = state.wrench.copy()
    confidence = 0

    g_prev_raw = g_curr_raw = state.pose.copy()
    if normalizer is not None:
        g_prev_norm = g_curr_norm = normalizer.normalize_array(state.pose)
    else:
        g_prev_norm = g_curr_norm = None

    firings = {"mgp": 0, "mrc": 0, "pbic": 0}
    records = []
    obs_stream, action_stream, wrench_stream = [], [], []
    protective = False
    peak_force = 0.0
    sq_err = 0.0
    ticks_to_success = None

    for tick in range(n_ticks):
        t = tick / rates.base_hz
        if tick % rates.mrc_div == 0:
            measured = state.wrench + env_rng.normal(0.0, task.sensor_noise, 6)
            if record_episode:
                wrench_stream.append(Wrench.from_array(measured, t))
        if tick % rates.mgp_div == 0:
            step_idx = tick // rates.mgp_div
            ts_obs = tokenize_observation(state, task, fusion_cfg, env_rng, measured)
            raw, norm = source.plan(ts_obs, state, step_idx, mgp_rng, task)
            g_prev_raw, g_curr_raw = g_curr_raw, np.asarray(raw, dtype=np.float64)
            if norm is not None:
                g_prev_norm, g_curr_norm = g_curr_norm, np.asarray(norm, dtype=np.float64)
            elif normalizer is not None:
                g_prev_norm, g_curr_norm = g_curr_norm, normalizer.normalize_array(g_curr_raw)
            if record_episode:
                obs_stream.append(ts_obs)
                action_stream.append(Pose7.from_array(g_curr_raw))
            firings["mgp"] += 1
        if tick % rates.mrc_div == 0:
            confidence = contact_confidence(measured, fusion_cfg.tau)
            if residual_model is not None:
                res_state.push_sample(measured)
                feature = encode_wrench_window(res_state.window(), residual_model)
                res_state, residual = residual_step(res_state, feature, g_curr_norm, residual_model)
            firings["mrc"] += 1
        if tick % rates.pbic_div == 0:
            frac = 0.0 if hold == "zoh" else (tick % rates.mgp_div) / rates.mgp_div
            if hold == "zoh":
                base_raw = g_curr_raw
                base_norm = g_curr_norm
            else:
                base_raw = (1.0 - frac) * g_prev_raw + frac * g_curr_raw
                base_norm = (
                    (1.0 - frac) * g_prev_norm + frac * g_curr_norm
                    if g_curr_norm is not None
                    else None
                )
            if residual_model is not None and normalizer is not None:
                ref_raw = normalizer.denormalize_array(base_norm + residual)
            else:
                ref_raw = base_raw
            x_ref = Pose7(ref_raw[:3], ref_raw[3:6], max(ref_raw[6], 0.0))
            if pbic_params is not None:
                robot = RobotState(
                    pose=Pose7(state.pose[:3], state.pose[3:6], state.pose[6]),
                    twist=state.twist,
                    wrench=measured,
                )
                x_cmd = impedance_step(x_ref, robot, pbic_params)
            else:
                x_cmd = x_ref
            state = env.step(state, x_cmd.as_array(), pbic_dt)
            if np.any(np.abs(state.wrench) > PROTECTIVE_STOP_FORCE):
                protective = True
            peak_force = max(peak_force, float(np.linalg.norm(state.wrench[:3])))
            err = ref_raw[:3] - state.pose[:3]
            sq_err += float(err @ err)
            if state.completed and ticks_to_success is None:
                ticks_to_success = tick
            if firings["pbic"] % trace_stride == 0:
                records.append(
                    {
                        "tick": tick,
                        "t": t,
                        "x_ref": ref_raw.tolist(),
                        "x_cmd": x_cmd.as_array().tolist(),
                        "f_ext": state.wrench.tolist(),
                        "residual": residual.tolist(),
                        "confidence": confidence,
                    }
                )
            firings["pbic"] += 1

    outcome = env.outcome(state, protective)
    metrics = {
        "peak_force": peak_force,
        "rms_err": float(np.sqrt(sq_err / max(firings["pbic"], 1))),
        "ticks_to_success": ticks_to_success if outcome == "success" else None,
        "broken": bool(state.broken),
        "jammed": bool(state.jammed),
        "protective_stop": bool(protective),
        "peak_grip": float(state.peak_grip),
    }
    trace = RolloutTrace(records, firings, outcome, metrics, duration, root_seed, seed_index)
    episode = None
    if record_episode:
        episode = Episode(
            obs_stream=obs_stream,
            action_stream=action_stream,
            wrench_stream=wrench_stream,
            task_id=task.kind,
            seed=seed_index,
            horizon=episode_horizon,
        ).validate()
    return trace, episode


def variant_components(variant, master, residual_model, pbic_params):
    """Map a named ablation variant onto (residual, pbic, gating) choices."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r} (choose from {', '.join(VARIANTS)})")
    use_residual = residual_model if variant in ("full", "no-fusion", "rigid") else None
    use_pbic = None if variant == "rigid" else pbic_params
    gating = variant != "no-fusion"
    return use_residual, use_pbic, gating


def run_rollout(
    master,
    task,
    *,
    residual_model=None,
    pbic_params=None,
    variant="full",
    duration=None,
    root_seed=0,
    seed_index=0,
    rates=None,
    trace_stride=1,
    hold="linear",
    allow_untrained=False,
):
    """One seeded rollout of a named variant; returns its RolloutTrace."""
    rates = (rates or RateConfig()).validate()
    duration = task.duration if duration is None else duration
    use_residual, use_pbic, gating = variant_components(variant, master, residual_model, pbic_params)
    fusion_cfg = dataclasses.replace(master.fusion_cfg, gating_enabled=gating)
    source = MasterSource(master, fusion_cfg, allow_untrained=allow_untrained)
    env = make_env(task)
    trace, _ = closed_loop(
        source,
        use_residual,
        use_pbic,
        env,
        task,
        fusion_cfg,
        master.normalizer,
        rates,
        duration,
        root_seed,
        seed_index,
        trace_stride=trace_stride,
        hold=hold,
    )
    return trace


def run_expert_rollout(task, *, pbic_params=None, duration=None, root_seed=0, seed_index=0, rates=None, fusion_cfg=None):
    """Scripted expert through the execution layer (validation baseline)."""
    from .fusion import FusionConfig
    from .sim import make_expert

    rates = (rates or RateConfig()).validate()
    duration = task.duration if duration is None else duration
    env = make_env(task)
    trace, _ = closed_loop(
        ExpertSource(make_expert(task)),
        None,
        pbic_params if pbic_params is not None else ImpedanceParams.default(),
        env,
        task,
        fusion_cfg or FusionConfig(),
        None,
        rates,
        duration,
        root_seed,
        seed_index,
    )
    return trace


def evaluate(
    master,
    task,
    n_seeds,
    *,
    residual_model=None,
    pbic_params=None,
    variant="full",
    duration=None,
    root_seed=0,
    rates=None,
    hold="linear",
):
    """Paired-seed evaluation; returns (per-seed rows, aggregate row)."""
    if n_seeds < 1:
        raise ConfigError("n_seeds must be >= 1")
    rows = []
    for i in range(n_seeds):
        trace = run_rollout(
            master,
            task,
            residual_model=residual_model,
            pbic_params=pbic_params,
            variant=variant,
            duration=duration,
            root_seed=root_seed,
            seed_index=i,
            rates=rates,
            trace_stride=10**9,
            hold=hold,
        )
        rows.append(
            {
                "seed": i,
                "outcome": trace.outcome,
                "peak_force": trace.metrics["peak_force"],
                "rms_err": trace.metrics["rms_err"],
                "ticks_to_success": trace.metrics["ticks_to_success"],
                "broken": trace.metrics["broken"],
                "protective_stop": trace.metrics["protective_stop"],
            }
        )
    return rows, aggregate_rows(rows)


def aggregate_rows(rows):
    succ = [r for r in rows if r["outcome"] == "success"]
    tts = [r["ticks_to_success"] for r in succ if r["ticks_to_success"] is not None]
    return {
        "seed": "aggregate",
        "n": len(rows),
        "success_rate": len(succ) / len(rows),
        "mean_peak_force": float(np.mean([r["peak_force"] for r in rows])),
        "mean_rms_err": float(np.mean([r["rms_err"] for r in rows])),
        "mean_ticks_to_success": float(np.mean(tts)) if tts else None,
        "broken_count": sum(1 for r in rows if r["broken"]),
        "protective_stop_count": sum(1 for r in rows if r["protective_stop"]),
    }


def write_metrics_csv(path, rows, aggregate=None):
    fields = ["seed", "outcome", "peak_force", "rms_err", "ticks_to_success"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for r in rows:
            tts = r["ticks_to_success"]
            writer.writerow(
                [r["seed"], r["outcome"], repr(r["peak_force"]), repr(r["rms_err"]), "" if tts is None else tts]
            )
        if aggregate is not None:
            writer.writerow(
                [
                    "aggregate",
                    f"success_rate={aggregate['success_rate']}",
                    repr(aggregate["mean_peak_force"]),
                    repr(aggregate["mean_rms_err"]),
                    "" if aggregate["mean_ticks_to_success"] is None else aggregate["mean_ticks_to_success"],
                ]
            )


def write_metrics_json(path, rows, aggregate):
    with open(path, "w") as fh:
        json.dump({"rows": rows, "aggregate": aggregate}, fh, indent=1, sort_keys=True)
