"""Desk-scale contact environments, synthetic tokenizers, scripted experts.

Three tasks: pressing/wiping a stiff surface (wall_press), chamfered
peg-in-socket insertion (peg_insertion), and grasping a crushable chip
(fragile_grasp). Plants are quasi-static penalty-contact models driven by
an ideal or first-order-lag position servo; they are deliberately simple
but reproduce the failure modes that matter here: jamming, crushing,
force spikes, and compliance effects.

The tokenizer stands in for the camera/tactile encoders: visual tokens
are synthesized from (possibly mis-calibrated) scene geometry, tactile
tokens from contact forces, and both carry seeded noise. Perception can
be systematically corrupted through the task's perturbation fields, while
the wrench channel stays trustworthy; scripted experts use privileged
true state, which is exactly the gap the learned stack has to close.
"""
from __future__ import annotations

import dataclasses

import numpy as np

from .core import ConfigError, TokenSet
from .fusion import FusionConfig

TASK_KINDS = ("wall_press", "peg_insertion", "fragile_grasp")
PROTECTIVE_STOP_FORCE = 50.0


@dataclasses.dataclass
class TaskSpec:
    kind: str
    duration: float = 6.0
    servo_model: str = "lag"  # "ideal" | "lag"
    servo_tau: float = 0.04
    perturb_vertical: float = 0.0
    perturb_lateral: float = 0.0
    sensor_noise: float = 0.05
    # tokenizer noise scales
    calib_sigma: float = 0.002
    step_noise: float = 0.001
    token_noise: float = 0.005
    tactile_sigma: float = 0.4
    # wall_press geometry
    wall_z: float = 0.0
    wall_k: float = 1e4
    wall_d: float = 20.0
    wall_mu: float = 0.2
    press_force: float = 8.0
    stroke: float = 0.06
    # peg_insertion geometry
    contact_k: float = 5e3
    contact_d: float = 10.0
    clearance: float = 0.003
    chamfer_radius: float = 0.015
    chamfer_depth: float = 0.006
    insert_depth: float = 0.012
    bore_depth: float = 0.03
    socket_range: float = 0.09
    start_offset: float = 0.025
    jam_force: float = 30.0
    # fragile_grasp geometry
    chip_break_force: float = 15.0
    grip_stiffness: float = 3e3
    chip_width_lo: float = 0.018
    chip_width_hi: float = 0.024
    chip_range: float = 0.03
    grasp_height: float = 0.02
    lift_height: float = 0.06
    chip_load: float = 0.3

    def validate(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.servo_model not in ("ideal", "lag"):
            raise ConfigError(f"unknown servo model {self.servo_model!r}")
        if self.clearance <= 0:
            raise ConfigError("clearance must be positive")
        if self.chip_break_force <= 0:
            raise ConfigError("chip break force must be positive")
        if self.duration <= 0:
            raise ConfigError("duration must be positive")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()


def wall_press_task(**over):
    base = dict(kind="wall_press", tactile_sigma=0.4, calib_sigma=0.002)
    base.update(over)
    return TaskSpec(**base).validate()


def peg_insertion_task(**over):
    base = dict(kind="peg_insertion", tactile_sigma=0.4, calib_sigma=0.004)
    base.update(over)
    return TaskSpec(**base).validate()


def fragile_grasp_task(**over):
    base = dict(kind="fragile_grasp", tactile_sigma=1.5, calib_sigma=0.001)
    base.update(over)
    return TaskSpec(**base).validate()


TASK_FACTORIES = {
    "wall_press": wall_press_task,
    "peg_insertion": peg_insertion_task,
    "fragile_grasp": fragile_grasp_task,
}


@dataclasses.dataclass(eq=False)
class EnvState:
    pose: np.ndarray
    twist: np.ndarray
    wrench: np.ndarray
    time: float
    geom: dict
    calib: np.ndarray
    obj: np.ndarray
    broken: bool = False
    jammed: bool = False
    held: bool = False
    completed: bool = False
    peak_grip: float = 0.0
    progress: float = 0.0
    goal_ticks: int = 0

    def copy_shell(self):
        return dataclasses.replace(
            self,
            pose=self.pose.copy(),
            twist=self.twist.copy(),
            wrench=self.wrench.copy(),
            obj=self.obj.copy(),
        )


def _servo(task, pose, cmd, dt):
    cmd = np.asarray(cmd, dtype=np.float64)
    if task.servo_model == "ideal":
        new = cmd.copy()
    else:
        lam = 1.0 - np.exp(-dt / task.servo_tau)
        new = pose + lam * (cmd - pose)
    new[6] = min(max(new[6], 0.0), 0.1)
    return new


class ContactEnv:
    def __init__(self, task: TaskSpec):
        self.task = task.validate()

    def reset(self, rng) -> EnvState:
        raise NotImplementedError

    def step(self, state: EnvState, cmd, dt) -> EnvState:
        task = self.task
        new = state.copy_shell()
        new.pose = _servo(task, state.pose, cmd, dt)
        new.twist = (new.pose[:6] - state.pose[:6]) / dt
        new.time = state.time + dt
        self._contact(state, new, dt)
        self._progress(state, new, dt)
        return new

    def _contact(self, old, new, dt):
        raise NotImplementedError

    def _progress(self, old, new, dt):
        raise NotImplementedError

    def outcome(self, state, protective_stop):
        if state.broken:
            return "fail-broken"
        if protective_stop:
            return "fail-protective-stop"
        if state.jammed:
            return "fail-jammed"
        if state.completed:
            return "success"
        return "fail-timeout"


class WallPressEnv(ContactEnv):
    """Stiff plane at z = wall_z; press to a force band, wipe along +x."""

    def reset(self, rng):
        task = self.task
        wall_z = task.wall_z + rng.normal(0.0, 0.0005)
        calib = np.zeros(3)
        calib[0] = np.clip(rng.normal(0.0, task.calib_sigma), -0.004, 0.004)
        start_x = -task.stroke / 2.0
        pose = np.array([start_x, 0.0, wall_z + 0.04, 0.0, 0.0, 0.0, 0.02])
        geom = {"wall_z": wall_z, "start_x": start_x}
        return EnvState(pose, np.zeros(6), np.zeros(6), 0.0, geom, calib, np.zeros(3))

    def _contact(self, old, new, dt):
        task = self.task
        wall_z = new.geom["wall_z"]
        pen = wall_z - new.pose[2]
        wrench = np.zeros(6)
        if pen > 0:
            fz = task.wall_k * pen + task.wall_d * max(-new.twist[2], 0.0)
            v_lat = new.twist[:2]
            speed = np.linalg.norm(v_lat)
            if speed > 1e-4:
                wrench[:2] = -task.wall_mu * fz * v_lat / speed
            wrench[2] = fz
        new.wrench = wrench

    def _progress(self, old, new, dt):
        fz = new.wrench[2]
        if 1.0 <= fz <= 45.0:
            new.progress = old.progress + max(0.0, new.pose[0] - old.pose[0])
        if new.progress >= 0.8 * self.task.stroke:
            new.completed = True


class PegInsertionEnv(ContactEnv):
    """Chamfered socket in a table at z=0; insert the peg tip past depth."""

    def reset(self, rng):
        task = self.task
        socket = rng.uniform(-task.socket_range, task.socket_range, 2)
        start = socket + rng.uniform(-task.start_offset, task.start_offset, 2)
        calib = np.zeros(3)
        calib[:2] = np.clip(rng.normal(0.0, task.calib_sigma, 2), -0.008, 0.008)
        pose = np.array([start[0], start[1], 0.05, 0.0, 0.0, 0.0, 0.0])
        geom = {"socket": socket, "z_top": 0.0}
        return EnvState(pose, np.zeros(6), np.zeros(6), 0.0, geom, calib, np.zeros(3))

    def _contact(self, old, new, dt):
        task = self.task
        socket = new.geom["socket"]
        z_top = new.geom["z_top"]
        tip = new.pose[:3]
        e = tip[:2] - socket
        r = float(np.linalg.norm(e))
        wrench = np.zeros(6)
        force = np.zeros(3)
        if r <= task.clearance:
            floor_z = z_top - task.bore_depth
            pen = floor_z - tip[2]
            if pen > 0:
                force[2] = task.contact_k * pen + task.contact_d * max(-new.twist[2], 0.0)
        elif r <= task.chamfer_radius:
            slope = task.chamfer_depth / (task.chamfer_radius - task.clearance)
            surf = z_top - task.chamfer_depth * (task.chamfer_radius - r) / (
                task.chamfer_radius - task.clearance
            )
            if tip[2] < surf:
                scale = 1.0 / np.sqrt(1.0 + slope * slope)
                nz = scale
                nlat = slope * scale
                e_hat = e / max(r, 1e-12)
                normal = np.array([-nlat * e_hat[0], -nlat * e_hat[1], nz])
                depth_n = (surf - tip[2]) * nz
                v_n = float(new.twist[:3] @ normal)
                fn = task.contact_k * depth_n + task.contact_d * max(-v_n, 0.0)
                force = fn * normal
        else:
            pen = z_top - tip[2]
            if pen > 0:
                force[2] = task.contact_k * pen + task.contact_d * max(-new.twist[2], 0.0)
        wrench[:3] = force
        lever = 0.05
        wrench[3] = lever * force[1]
        wrench[4] = -lever * force[0]
        new.wrench = wrench
        if r > task.clearance and force[2] > task.jam_force:
            new.jammed = True

    def _progress(self, old, new, dt):
        task = self.task
        socket = new.geom["socket"]
        r = float(np.linalg.norm(new.pose[:2] - socket))
        if r <= task.clearance and new.pose[2] <= new.geom["z_top"] - task.insert_depth:
            new.completed = True


class FragileGraspEnv(ContactEnv):
    """Crushable chip on a table; grasp gently, lift, and hold."""

    def reset(self, rng):
        task = self.task
        chip_xy = rng.uniform(-task.chip_range, task.chip_range, 2)
        width = rng.uniform(task.chip_width_lo, task.chip_width_hi)
        calib = np.zeros(3)
        calib[:2] = np.clip(rng.normal(0.0, task.calib_sigma, 2), -0.003, 0.003)
        calib[2] = np.clip(rng.normal(0.0, 0.0015), -0.003, 0.003)
        start = chip_xy + rng.uniform(-0.015, 0.015, 2)
        pose = np.array([start[0], start[1], 0.07, 0.0, 0.0, 0.0, 0.05])
        geom = {"chip_width": width, "grasp_z": task.grasp_height, "lift_z": task.lift_height}
        obj = np.array([chip_xy[0], chip_xy[1], task.grasp_height])
        return EnvState(pose, np.zeros(6), np.zeros(6), 0.0, geom, calib, obj)

    def _contact(self, old, new, dt):
        task = self.task
        width = new.geom["chip_width"]
        grasp_z = new.geom["grasp_z"]
        aligned = (
            np.linalg.norm(new.pose[:2] - new.obj[:2]) <= 0.008
            and abs(new.pose[2] - new.obj[2]) <= 0.008
        )
        engaged = (aligned or old.held) and new.pose[6] < width
        grip = task.grip_stiffness * (width - new.pose[6]) if engaged else 0.0
        new.peak_grip = max(old.peak_grip, grip)
        if grip > task.chip_break_force:
            new.broken = True
        new.held = engaged and grip >= 1.0 and not new.broken and not old.broken
        if old.broken:
            new.broken = True
        if new.held:
            new.obj = np.array([new.pose[0], new.pose[1], new.pose[2]])
        elif old.held and not new.held:
            new.obj = np.array([new.obj[0], new.obj[1], grasp_z])
        wrench = np.zeros(6)
        wrench[0] = grip
        if new.held and new.obj[2] > grasp_z + 0.005:
            wrench[2] = -task.chip_load
        new.wrench = wrench

    def _progress(self, old, new, dt):
        lift_z = new.geom["lift_z"]
        holding = new.held and not new.broken and new.pose[2] >= lift_z - 0.005
        new.goal_ticks = old.goal_ticks + 1 if holding else 0
        if new.goal_ticks >= int(round(1.0 / dt)):
            new.completed = True
        if old.completed:
            new.completed = True


ENV_CLASSES = {
    "wall_press": WallPressEnv,
    "peg_insertion": PegInsertionEnv,
    "fragile_grasp": FragileGraspEnv,
}


def make_env(task: TaskSpec) -> ContactEnv:
    return ENV_CLASSES[task.kind](task)


def _perceived_target(state, task, geo_noise, scal_noise):
    """Scene geometry as the cameras would report it: true values plus the
    per-episode calibration offset, the configured perturbation, and
    per-observation noise."""
    if task.kind == "wall_press":
        pz = (
            state.geom["wall_z"]
            + state.calib[0]
            - task.perturb_vertical
            + task.step_noise * geo_noise[0]
        )
        end_x = state.geom["start_x"] + task.stroke
        target = np.array([end_x, 0.0, pz])
        scalar = task.stroke
    elif task.kind == "peg_insertion":
        p = (
            state.geom["socket"]
            + state.calib[:2]
            + np.array([task.perturb_lateral, 0.0])
            + task.step_noise * geo_noise[:2]
        )
        target = np.array([p[0], p[1], state.geom["z_top"]])
        scalar = task.clearance
    else:
        p = (
            state.obj[:2]
            + state.calib[:2]
            + np.array([task.perturb_lateral, 0.0])
            + task.step_noise * geo_noise[:2]
        )
        target = np.array([p[0], p[1], state.geom["grasp_z"]])
        scalar = state.geom["chip_width"] + state.calib[2] + 0.5 * task.step_noise * scal_noise
    return target, scalar


def tokenize_observation(state: EnvState, task: TaskSpec, cfg: FusionConfig, rng, measured_wrench=None):
    """Synthesize a TokenSet for the current state.

    The draw layout is fixed (geometry, scalar, visual block, tactile
    block) so every variant of a paired rollout consumes the stream
    identically regardless of contact state.
    """
    d = cfg.token_dim
    geo_noise = rng.standard_normal(3)
    scal_noise = float(rng.standard_normal())
    v_noise = rng.standard_normal((cfg.n_visual, d))
    t_noise = rng.standard_normal((cfg.n_tactile, d))
    target, scalar = _perceived_target(state, task, geo_noise, scal_noise)

    visual = task.token_noise * v_noise
    visual[0, 0:3] += target
    visual[0, 3] += scalar
    visual[0, 4:7] += state.pose[:3]
    visual[0, 7] += state.pose[6]
    if cfg.n_visual > 1:
        visual[1, 0:3] += target - state.pose[:3]
        visual[1, 3] += state.pose[2] - target[2]
        visual[1, 4] += scalar

    force = state.wrench[:3]
    total = float(np.linalg.norm(force))
    in_contact = float(np.linalg.norm(state.wrench)) > 0.2
    if task.kind == "fragile_grasp":
        normal = abs(force[0])
    else:
        normal = abs(force[2])
    tangential = float(np.sqrt(max(total * total - normal * normal, 0.0)))
    slip = 1.0 if (state.held and normal < 2.5) else 0.0
    if in_contact:
        tactile = 0.02 * t_noise
        tactile[0, 0] += normal / 10.0
        tactile[0, 1] += tangential / 10.0
        tactile[0, 2] += slip
        tactile[0, 3] += 1.0
        if cfg.n_tactile > 1:
            tactile[1, 0] += normal / 5.0
            tactile[1, 1] += slip
            tactile[1, 2] += 1.0
    else:
        tactile = task.tactile_sigma * t_noise
    wrench = state.wrench if measured_wrench is None else np.asarray(measured_wrench)
    return TokenSet(
        visual_tokens=visual,
        tactile_tokens=tactile,
        proprio=state.pose.copy(),
        wrench=wrench,
        timestamp=state.time,
    )


class ScriptedExpert:
    """Privileged phase-structured policy emitting 10 Hz pose targets."""

    def reset(self, state, task, rng):
        raise NotImplementedError

    def action(self, state, task):
        raise NotImplementedError


def _toward(current, goal, rate):
    """Move componentwise toward goal, at most `rate` per call."""
    delta = np.clip(np.asarray(goal) - np.asarray(current), -rate, rate)
    return np.asarray(current) + delta


class WallPressExpert(ScriptedExpert):
    def reset(self, state, task, rng):
        self.phase = "approach"
        self.z_cmd = state.pose[2]

    def action(self, state, task):
        wall_z = state.geom["wall_z"]
        start_x = state.geom["start_x"]
        pose = state.pose
        target = pose.copy()
        fz = state.wrench[2]
        if self.phase == "approach":
            target[:2] = _toward(pose[:2], [start_x, 0.0], 0.02)
            self.z_cmd = max(self.z_cmd - 0.006, wall_z + 0.004)
            target[2] = self.z_cmd
            if abs(pose[0] - start_x) < 0.002 and pose[2] <= wall_z + 0.006:
                self.phase = "press"
        elif self.phase == "press":
            # privileged force servo on the true normal force
            self.z_cmd -= np.clip((task.press_force - fz) / task.wall_k * 0.8, -0.002, 0.002)
            target[2] = self.z_cmd
            if fz >= 0.9 * task.press_force:
                self.phase = "wipe"
        elif self.phase == "wipe":
            target[0] = pose[0] + 0.012
            self.z_cmd -= np.clip((task.press_force - fz) / task.wall_k * 0.8, -0.002, 0.002)
            target[2] = self.z_cmd
            if state.progress >= 0.85 * task.stroke:
                self.phase = "retract"
        else:
            self.z_cmd = min(self.z_cmd + 0.01, wall_z + 0.03)
            target[2] = self.z_cmd
        target[3:6] = 0.0
        target[6] = 0.02
        return target


class PegInsertionExpert(ScriptedExpert):
    def reset(self, state, task, rng):
        self.phase = "approach"
        angle = rng.uniform(0.0, 2.0 * np.pi)
        mag = rng.uniform(0.003, 0.008)
        # deliberate teleoperator-style approach bias; corrected after contact
        self.bias = mag * np.array([np.cos(angle), np.sin(angle)])
        self.z_cmd = state.pose[2]

    def action(self, state, task):
        socket = state.geom["socket"]
        z_top = state.geom["z_top"]
        pose = state.pose
        target = pose.copy()
        f_up = state.wrench[2]
        r_true = float(np.linalg.norm(pose[:2] - socket))
        if self.phase == "approach":
            aim = socket + self.bias
            target[:2] = _toward(pose[:2], aim, 0.015)
            self.z_cmd = max(self.z_cmd - 0.008, z_top + 0.012)
            target[2] = self.z_cmd
            if np.linalg.norm(pose[:2] - aim) < 0.002 and pose[2] < z_top + 0.015:
                self.phase = "descend"
        elif self.phase == "descend":
            self.z_cmd -= 0.004 if pose[2] > z_top + 0.006 else 0.002
            target[2] = self.z_cmd
            if f_up > 1.0:
                self.phase = "correct"
            elif r_true < 0.6 * task.clearance and pose[2] < z_top + 0.002:
                self.phase = "insert"
        elif self.phase == "correct":
            target[:2] = _toward(pose[:2], socket, 0.0025)
            if f_up > 5.0:
                self.z_cmd += 0.0018
            elif f_up < 2.0:
                self.z_cmd -= 0.001
            target[2] = self.z_cmd
            if r_true <= 0.5 * task.clearance:
                self.phase = "insert"
        elif self.phase == "insert":
            target[:2] = _toward(pose[:2], socket, 0.002)
            self.z_cmd = max(self.z_cmd - 0.004, z_top - task.insert_depth - 0.003)
            target[2] = self.z_cmd
            if f_up > 10.0:
                self.phase = "correct"
            if pose[2] <= z_top - task.insert_depth - 0.0005:
                self.phase = "hold"
        else:
            target[2] = self.z_cmd
        target[3:6] = 0.0
        target[6] = 0.0
        return target


class FragileGraspExpert(ScriptedExpert):
    def reset(self, state, task, rng):
        self.phase = "approach"
        self.width_cmd = state.pose[6]
        self.z_cmd = state.pose[2]

    def action(self, state, task):
        chip = state.obj
        grasp_z = state.geom["grasp_z"]
        lift_z = state.geom["lift_z"]
        pose = state.pose
        target = pose.copy()
        grip = state.wrench[0]
        f_goal = 0.6 * task.chip_break_force
        if self.phase == "approach":
            target[:2] = _toward(pose[:2], chip[:2], 0.012)
            self.z_cmd = max(self.z_cmd - 0.008, grasp_z)
            target[2] = self.z_cmd
            self.width_cmd = 0.05
            if np.linalg.norm(pose[:2] - chip[:2]) < 0.0015 and abs(pose[2] - grasp_z) < 0.002:
                self.phase = "close"
        elif self.phase == "close":
            # privileged force servo on the true grip force
            gap = f_goal - grip
            step = np.clip(gap / task.grip_stiffness * 0.6, -0.0015, 0.0015)
            self.width_cmd = max(self.width_cmd - step, 0.005)
            if grip >= 0.93 * f_goal:
                self.phase = "lift"
        elif self.phase == "lift":
            self.z_cmd = min(self.z_cmd + 0.007, lift_z + 0.008)
            gap = f_goal - grip
            self.width_cmd -= np.clip(gap / task.grip_stiffness * 0.4, -0.0008, 0.0008)
            if pose[2] >= lift_z + 0.004:
                self.phase = "hold"
        else:
            self.z_cmd = lift_z + 0.008
            gap = f_goal - grip
            self.width_cmd -= np.clip(gap / task.grip_stiffness * 0.4, -0.0008, 0.0008)
        target[2] = self.z_cmd
        target[3:6] = 0.0
        target[6] = self.width_cmd
        return target


EXPERT_CLASSES = {
    "wall_press": WallPressExpert,
    "peg_insertion": PegInsertionExpert,
    "fragile_grasp": FragileGraspExpert,
}


def make_expert(task: TaskSpec) -> ScriptedExpert:
    return EXPERT_CLASSES[task.kind]()


def generate_demos(task, n_episodes, seed, horizon=8, fusion_cfg=None, pbic_params=None, max_attempt_factor=3):
    """Roll the scripted expert through the full stack and record episodes.

    Failed expert rollouts are discarded (and counted); attempts continue
    on the next seed index until n_episodes successes are collected.
    Returns (episodes, Normalizer, meta).
    """
    from .core import Normalizer
    from .impedance import ImpedanceParams
    from .runtime import ExpertSource, RateConfig, closed_loop

    fusion_cfg = fusion_cfg or FusionConfig()
    pbic_params = pbic_params or ImpedanceParams.default()
    episodes = []
    discarded = 0
    attempt = 0
    max_attempts = max_attempt_factor * n_episodes
    while len(episodes) < n_episodes and attempt < max_attempts:
        env = make_env(task)
        source = ExpertSource(make_expert(task))
        trace, episode = closed_loop(
            source,
            None,
            pbic_params,
            env,
            task,
            fusion_cfg,
            None,
            RateConfig(),
            task.duration,
            seed,
            attempt,
            record_episode=True,
            episode_horizon=horizon,
        )
        attempt += 1
        if trace.outcome == "success":
            episodes.append(episode)
        else:
            discarded += 1
    if len(episodes) < n_episodes:
        raise RuntimeError(
            f"expert failed too often on {task.kind}: "
            f"{len(episodes)}/{n_episodes} episodes after {attempt} attempts"
        )
    actions = np.concatenate([ep.action_matrix() for ep in episodes], axis=0)
    normalizer = Normalizer.from_actions(actions)
    meta = {"task": task.kind, "seed": seed, "H": horizon, "discarded": discarded}
    return episodes, normalizer, meta
