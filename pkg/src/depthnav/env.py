"""The obstacle-avoidance MDP: observation assembly, rewards, termination,
goal sampling, and vectorized episode execution.

One RL action (body acceleration + yaw rate) is held for ten inner control
steps. The drone then renders depth from its forward camera, the frame is
optionally degraded to stereo-like depth and dilated, and the encoder turns
it into the latent slice of the observation.

Observation layout (frozen, 14 physical values then the latent):
    [0]      log(max(d_hor, 0.01))   horizontal distance to goal, log scale
    [1]      d_z                     vertical distance to goal (non-negative)
    [2:5]    d_norm                  unit vector toward the goal, world frame
    [5:8]    v_W                     linear velocity, world frame
    [8:11]   omega_B                 body angular velocity
    [11:14]  omega_dot_B             body angular acceleration estimate
    [14:]    z_t                     64-dim VAE latent or 256-dim LSTM code
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import autodiff as ad
from . import control, depthproc, dynamics
from . import scene as sc
from .control import ActionCommand, RefGenParams, ReferenceState, TrackerGains
from .depthproc import DepthImage, StereoDegradeParams
from .dynamics import DroneParams, DroneState

OBS_PHYS_WIDTH = 14
D_HOR_FLOOR = 0.01  # meters, floors the log-distance term
DIRECTION_GATE_SPEED = 0.1  # m/s, below this the alignment term is zero

# camera mounted looking along body +x; camera z=forward, x=right, y=down
_R_BODY_CAMERA = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
Q_BODY_CAMERA = dynamics.quat_from_rotmat(_R_BODY_CAMERA)


class Cause(Enum):
    RUNNING = "running"
    EXCEED = "exceed"
    ARRIVE = "arrive"
    COLLISION = "collision"
    TIMEOUT = "timeout"


@dataclass
class RewardParams:
    """Shaping coefficients; the six lambdas must be strictly negative."""

    lambda_d: float = -0.02
    lambda_z: float = -0.05
    lambda_v: float = -0.1
    lambda_dir: float = -0.01
    lambda_input: float = -0.001
    lambda_perc: float = -0.02
    v_max: float = 2.0
    r_exceed: float = -10.0
    r_collision: float = -10.0
    r_arrive: float = 10.0
    d_min: float = 0.5

    def __post_init__(self) -> None:
        lambdas = (self.lambda_d, self.lambda_z, self.lambda_v, self.lambda_dir, self.lambda_input, self.lambda_perc)
        if any(lam >= 0.0 for lam in lambdas):
            raise ValueError("all lambda coefficients must be strictly negative")
        if self.r_arrive <= 0.0:
            raise ValueError("r_arrive must be positive")
        if self.d_min <= 0.0:
            raise ValueError("d_min must be positive")


@dataclass
class ActionBounds:
    """Maps raw policy outputs in [-1, 1]^4 onto command ranges.

    a_z stays strictly positive so the tilt mapping never degenerates.
    """

    a_xy_max: float = 5.0
    a_z_min: float = 2.0
    a_z_max: float = 17.0
    yaw_rate_max: float = 1.5

    def to_command(self, raw: np.ndarray) -> ActionCommand:
        r = np.clip(np.asarray(raw, dtype=float), -1.0, 1.0)
        a = np.array(
            [
                r[0] * self.a_xy_max,
                r[1] * self.a_xy_max,
                self.a_z_min + 0.5 * (r[2] + 1.0) * (self.a_z_max - self.a_z_min),
            ]
        )
        return ActionCommand(a_cmd=a, yaw_rate=float(r[3] * self.yaw_rate_max))


@dataclass
class EnvParams:
    """Everything the MDP needs besides the scene and the networks."""

    reward: RewardParams = field(default_factory=RewardParams)
    bounds: ActionBounds = field(default_factory=ActionBounds)
    drone: DroneParams = field(default_factory=DroneParams)
    refgen: RefGenParams = field(default_factory=RefGenParams)
    gains: TrackerGains = field(default_factory=TrackerGains)
    degrade: StereoDegradeParams = field(default_factory=StereoDegradeParams)
    depth_mode: str = "gt"  # gt | stereo
    dilation_kernel: int = 5  # odd; 1 disables
    timeout_s: float = 15.0
    goal_jitter_xy: float = 0.5
    flight_band: tuple[float, float] = (0.35, 0.75)  # fraction of the z extent
    yaw_jitter: float = 0.3
    min_goal_distance: float = 4.0

    def __post_init__(self) -> None:
        if self.depth_mode not in ("gt", "stereo"):
            raise ValueError(f"depth_mode must be gt or stereo, got {self.depth_mode!r}")
        if self.dilation_kernel % 2 == 0:
            raise ValueError("dilation_kernel must be odd")

    @property
    def max_steps(self) -> int:
        return int(round(self.timeout_s / self.refgen.action_period))


class Perception:
    """Frozen encoder (+ optional LSTM) shared by a batch of environments."""

    def __init__(self, vae, lstm=None):
        self.vae = vae
        self.lstm = lstm
        self.latent_dim = lstm.hidden if lstm is not None else vae.latent
        self._h = None
        self._c = None

    def reset(self, n_envs: int) -> None:
        if self.lstm is not None:
            self._h = np.zeros((n_envs, self.lstm.hidden), dtype=np.float32)
            self._c = np.zeros((n_envs, self.lstm.hidden), dtype=np.float32)

    def reset_env(self, index: int) -> None:
        if self.lstm is not None and self._h is not None:
            self._h[index] = 0.0
            self._c[index] = 0.0

    def encode(self, images: np.ndarray) -> np.ndarray:
        """images (N, 1, H, W) normalized -> (N, latent_dim) float32."""
        return self.encode_rows(images, None)

    def encode_rows(self, images: np.ndarray, rows: list[int] | None) -> np.ndarray:
        """Encode a frame batch; with an LSTM, advance only the recurrent
        state rows listed in `rows` (None means all, matching batch order)."""
        with ad.no_grad():
            mu, _, _ = self.vae.encode(ad.Tensor(images.astype(np.float32)))
            if self.lstm is None:
                return mu.data
            if self._h is None:
                self.reset(images.shape[0])
            idx = np.arange(images.shape[0]) if rows is None else np.asarray(rows, dtype=int)
            h_rows = self._h[idx]
            c_rows = self._c[idx]
            h, (h2, c2) = self.lstm.step(mu, (ad.Tensor(h_rows), ad.Tensor(c_rows)))
            self._h[idx] = h2.data
            self._c[idx] = c2.data
            return h.data


# ---------------------------------------------------------------------------
# reward pieces (pure functions)
# ---------------------------------------------------------------------------

def progress_reward(state: DroneState, goal: np.ndarray, params: RewardParams) -> float:
    """Dense shaping term combining distance, speed, alignment, control
    effort, and the perception-aware lateral/backward penalty."""
    d = goal - state.p_W
    d_hor = float(np.hypot(d[0], d[1]))
    d_z = abs(float(d[2]))
    r = params.lambda_d * np.log(max(d_hor, D_HOR_FLOOR)) + params.lambda_z * d_z

    v = state.v_W
    v_hor = float(np.hypot(v[0], v[1]))
    r += max(0.0, v_hor - params.v_max) * params.lambda_v * v_hor

    speed = float(np.linalg.norm(v))
    if speed >= DIRECTION_GATE_SPEED:
        d_norm = d / np.linalg.norm(d) if np.linalg.norm(d) > 0 else np.zeros(3)
        v_norm = v / speed
        r += params.lambda_dir * float(np.sum(np.abs(d_norm - v_norm)))

    r += params.lambda_input * float(np.linalg.norm(state.omega_B))

    v_body = dynamics.quat_rotate_inverse(state.q_WB, v)
    r += params.lambda_perc * (abs(float(v_body[1])) + max(0.0, -float(v_body[0])))
    return float(r)


def terminal_reward(state: DroneState, scene: sc.Scene, goal: np.ndarray, params: RewardParams,
                    drone_radius: float):
    """Terminal cases in their listed priority: exceed, arrive, collision.

    Returns (reward, Cause) or None while the episode continues.
    """
    p = state.p_W
    if np.any(p < scene.bounds_min) or np.any(p > scene.bounds_max):
        return params.r_exceed, Cause.EXCEED
    if float(np.linalg.norm(goal - p)) < params.d_min:
        return params.r_arrive, Cause.ARRIVE
    if sc.check_collision(scene, p, drone_radius):
        return params.r_collision, Cause.COLLISION
    return None


def estimate_omega_dot(omega_prev: np.ndarray, omega_now: np.ndarray, action_period: float,
                       omega_dot_max: np.ndarray) -> np.ndarray:
    """First-order finite difference over one action period, clamped."""
    rate = (np.asarray(omega_now) - np.asarray(omega_prev)) / action_period
    return np.clip(rate, -omega_dot_max, omega_dot_max)


def assemble_observation(state: DroneState, goal: np.ndarray, omega_dot: np.ndarray, latent: np.ndarray) -> np.ndarray:
    d = goal - state.p_W
    dist = float(np.linalg.norm(d))
    d_hor = float(np.hypot(d[0], d[1]))
    d_norm = d / dist if dist > 0 else np.array([1.0, 0.0, 0.0])
    phys = np.concatenate(
        [
            [np.log(max(d_hor, D_HOR_FLOOR)), abs(float(d[2]))],
            d_norm,
            state.v_W,
            state.omega_B,
            omega_dot,
        ]
    )
    assert phys.shape == (OBS_PHYS_WIDTH,)
    return np.concatenate([phys, latent]).astype(np.float32)


# ---------------------------------------------------------------------------
# the environment
# ---------------------------------------------------------------------------

@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    cause: Cause
    truncated: bool


@dataclass
class EpisodeRecord:
    """Per-step rollout storage for logs and PPO."""

    observations: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    values: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    cause: Cause = Cause.RUNNING

    def summary(self, goal_distance: float) -> dict:
        return {
            "cause": self.cause.value,
            "length": len(self.rewards),
            "return": float(np.sum(self.rewards)) if self.rewards else 0.0,
            "final_distance": goal_distance,
        }


class NavEnv:
    """Single drone navigating one scene. Deterministic given (seed, actions)."""

    def __init__(self, scene: sc.Scene, camera: sc.CameraModel, params: EnvParams,
                 perception: Perception | None = None):
        self.scene = scene
        self.camera = camera
        self.params = params
        self.perception = perception
        self.state: DroneState | None = None
        self.ref: ReferenceState | None = None
        self.goal: np.ndarray | None = None
        self.steps = 0
        self.done = True
        self.cause = Cause.RUNNING
        self._omega_prev = np.zeros(3)
        self._rng = np.random.default_rng(0)

    # -- episode control ----------------------------------------------------
    def reset(self, seed: int) -> tuple[DroneState, DepthImage]:
        """Sample start/goal, set the drone hovering at the start, render.

        Returns the initial state and preprocessed depth frame; the caller
        encodes the frame and assembles the observation (VecEnv batches this).
        """
        self._rng = np.random.default_rng([int(seed), self.scene.seed])
        scn = self.scene
        band = self.params.flight_band
        z_lo = scn.bounds_min[2] + band[0] * (scn.bounds_max[2] - scn.bounds_min[2])
        z_hi = scn.bounds_min[2] + band[1] * (scn.bounds_max[2] - scn.bounds_min[2])

        for _ in range(200):
            start = self._sample_near(scn.start_center, z_lo, z_hi)
            goal = self._sample_near(scn.goal_center, z_lo, z_hi)
            if np.linalg.norm(goal - start) < self.params.min_goal_distance:
                continue
            if sc.check_collision(scn, start, self.params.drone.drone_radius):
                continue
            if sc.check_collision(scn, goal, self.params.drone.drone_radius):
                continue
            break
        else:
            raise ValueError("could not sample a collision-free start/goal pair")

        self.goal = goal
        bearing = np.arctan2(goal[1] - start[1], goal[0] - start[0])
        yaw = bearing + self._rng.uniform(-self.params.yaw_jitter, self.params.yaw_jitter)
        self.ref = ReferenceState.hover(start, yaw, self.params.drone)
        self.state = self.ref.state.copy()
        self.steps = 0
        self.done = False
        self.cause = Cause.RUNNING
        self._omega_prev = np.zeros(3)
        return self.state, self.render_frame()

    def _sample_near(self, center: np.ndarray, z_lo: float, z_hi: float) -> np.ndarray:
        radius = max(self.scene.clearance - 2.0 * self.params.drone.drone_radius, 0.05)
        angle = self._rng.uniform(0, 2 * np.pi)
        rad = radius * np.sqrt(self._rng.uniform(0, 1))
        out = center.copy()
        out[0] += rad * np.cos(angle)
        out[1] += rad * np.sin(angle)
        out[2] = self._rng.uniform(z_lo, z_hi)
        return out

    # -- physics ------------------------------------------------------------
    def step_physics(self, action: ActionCommand) -> tuple[float, DepthImage | None]:
        """Run the inner control loop for one action period.

        Returns (reward, frame); frame is None when the episode terminated
        (terminal observations reuse the last latent downstream).
        """
        if self.done:
            raise RuntimeError("step called on a terminated environment; call reset first")
        self._omega_prev = self.state.omega_B.copy()
        params = self.params
        terminal = None
        for _ in range(params.refgen.steps_per_action):
            self.ref = control.propagate_reference(self.ref, action, params.refgen, params.drone)
            wrench = control.track_reference(self.state, self.ref, params.gains, params.drone, params.refgen.thrust_max)
            self.state = dynamics.step(self.state, wrench, params.drone, params.refgen.dt)
            terminal = terminal_reward(self.state, self.scene, self.goal, params.reward, params.drone.drone_radius)
            if terminal is not None:
                break

        self.steps += 1
        if terminal is not None:
            reward, cause = terminal
            self.done = True
            self.cause = cause
            return float(reward), None
        reward = progress_reward(self.state, self.goal, params.reward)
        if self.steps >= params.max_steps:
            self.done = True
            self.cause = Cause.TIMEOUT
        return float(reward), self.render_frame()

    def render_frame(self) -> DepthImage:
        """Render, apply the configured degradation and dilation, in order."""
        q_wc = dynamics.quat_multiply(self.state.q_WB, Q_BODY_CAMERA)
        frame = sc.raycast_depth(self.scene, (self.state.p_W, q_wc), self.camera)
        if self.params.depth_mode == "stereo":
            seed = int(self._rng.integers(0, 2**31 - 1))
            frame = depthproc.stereo_degrade(frame, self.camera, replace(self.params.degrade, seed=seed))
        if self.params.dilation_kernel > 1:
            frame = depthproc.min_pool_dilate(frame, self.params.dilation_kernel)
        return frame

    def encoder_input(self, frame: DepthImage) -> np.ndarray:
        return depthproc.to_encoder_input(frame, self.camera.max_depth)

    def observation(self, latent: np.ndarray) -> np.ndarray:
        omega_dot = estimate_omega_dot(self._omega_prev, self.state.omega_B,
                                       self.params.refgen.action_period, self.params.refgen.omega_dot_max)
        if self.steps == 0:
            omega_dot = np.zeros(3)
        return assemble_observation(self.state, self.goal, omega_dot, latent)

    # -- single-env convenience (spec surface) -------------------------------
    def reset_and_observe(self, seed: int) -> np.ndarray:
        if self.perception is None:
            raise ValueError("NavEnv needs a Perception to produce observations standalone")
        _, frame = self.reset(seed)
        self.perception.reset(1)
        latent = self.perception.encode(self.encoder_input(frame)[None, None])[0]
        return self.observation(latent)

    def step(self, action: ActionCommand) -> StepResult:
        if self.perception is None:
            raise ValueError("NavEnv needs a Perception to produce observations standalone")
        reward, frame = self.step_physics(action)
        if frame is not None:
            latent = self.perception.encode(self.encoder_input(frame)[None, None])[0]
        else:
            latent = np.zeros(self.perception.latent_dim, dtype=np.float32)
        obs = self.observation(latent)
        truncated = self.cause is Cause.TIMEOUT
        return StepResult(obs, reward, self.done, self.cause, truncated)

    def goal_distance(self) -> float:
        return float(np.linalg.norm(self.goal - self.state.p_W))


class VecEnv:
    """Lockstep batch of NavEnvs with one shared Perception.

    The inner control loop runs vectorized across environments (see
    control.batched_substep); encoding is batched at a per-action
    synchronization barrier. In training mode terminated environments
    auto-reset on the next step.
    """

    def __init__(self, envs: list[NavEnv], perception: Perception, base_seed: int = 0,
                 on_frame=None, on_reset=None):
        self.envs = envs
        self.perception = perception
        self.base_seed = base_seed
        self._episode_counter = np.zeros(len(envs), dtype=np.int64)
        self.obs_dim = OBS_PHYS_WIDTH + perception.latent_dim
        self.on_frame = on_frame    # called (env_index, DepthImage) per rendered step frame
        self.on_reset = on_reset    # called (env_index, DepthImage) per episode-opening frame

    def __len__(self):
        return len(self.envs)

    def _env_seed(self, index: int) -> int:
        return int(self.base_seed + 1_000_003 * index + 7_919 * self._episode_counter[index])

    def reset_all(self) -> np.ndarray:
        self.perception.reset(len(self.envs))
        frames = []
        for i, env in enumerate(self.envs):
            _, frame = env.reset(self._env_seed(i))
            if self.on_reset:
                self.on_reset(i, frame)
            frames.append(env.encoder_input(frame))
        latents = self.perception.encode(np.stack(frames)[:, None])
        return np.stack([env.observation(latents[i]) for i, env in enumerate(self.envs)])

    def _physics_batch(self, raw_actions: np.ndarray, bounds: ActionBounds):
        """Advance every non-done env by one action period, vectorized.

        Mirrors NavEnv.step_physics semantics: a terminating env freezes at
        the terminal substep; rewards, causes, timeout, and the omega
        history update per env. Returns (rewards, frames) with frame None
        for true terminals and for envs that were already done.
        """
        envs = self.envs
        n = len(envs)
        rewards = np.zeros(n, dtype=np.float64)
        frames: list[DepthImage | None] = [None] * n

        rows = [i for i in range(n) if not envs[i].done]
        if not rows:
            return rewards, frames
        params = envs[rows[0]].params
        refgen, gains, drone = params.refgen, params.gains, params.drone

        states = np.stack([envs[i].state.as_vector() for i in rows])
        refs = np.stack([envs[i].ref.state.as_vector() for i in rows])
        omega_sp = np.stack([envs[i].ref.omega_sp for i in rows])
        thrust = np.array([envs[i].ref.thrust for i in rows])
        cmds = [bounds.to_command(raw_actions[i]) for i in rows]
        a_cmd = np.stack([c.a_cmd for c in cmds])
        yaw_rate = np.array([c.yaw_rate for c in cmds])

        for i in rows:
            envs[i]._omega_prev = envs[i].state.omega_B.copy()
        terminal: dict[int, tuple[float, Cause]] = {}
        active = np.ones(len(rows), dtype=bool)
        for _ in range(refgen.steps_per_action):
            if not np.any(active):
                break
            idx = np.flatnonzero(active)
            s_new, r_new, o_new, t_new = control.batched_substep(
                states[idx], refs[idx], omega_sp[idx], thrust[idx],
                a_cmd[idx], yaw_rate[idx], refgen, gains, drone,
            )
            states[idx] = s_new
            refs[idx] = r_new
            omega_sp[idx] = o_new
            thrust[idx] = t_new
            for k in idx:
                env = envs[rows[k]]
                state = DroneState.from_vector(states[k])
                outcome = terminal_reward(state, env.scene, env.goal, params.reward, drone.drone_radius)
                if outcome is not None:
                    terminal[k] = outcome
                    active[k] = False

        for k, i in enumerate(rows):
            env = envs[i]
            env.state = DroneState.from_vector(states[k])
            env.ref = ReferenceState(DroneState.from_vector(refs[k]), omega_sp[k].copy(), float(thrust[k]))
            env.steps += 1
            if k in terminal:
                reward, cause = terminal[k]
                env.done = True
                env.cause = cause
                rewards[i] = reward
            else:
                rewards[i] = progress_reward(env.state, env.goal, params.reward)
                if env.steps >= params.max_steps:
                    env.done = True
                    env.cause = Cause.TIMEOUT
                frames[i] = env.render_frame()
        return rewards, frames

    def step(self, raw_actions: np.ndarray, bounds: ActionBounds):
        """raw_actions (N, 4) in [-1,1].

        Returns (next_obs, rewards, dones, truncs, causes, final_obs):
          - next_obs[i] belongs to the fresh episode when env i terminated
            (auto-reset), otherwise to the continuing one;
          - final_obs[i] is the closing observation of the finished episode
            where truncs[i] (for value bootstrapping), else None.
        """
        n = len(self.envs)
        rewards, raw_frames = self._physics_batch(raw_actions, bounds)
        dones = np.array([env.done for env in self.envs])
        truncs = np.array([env.cause is Cause.TIMEOUT for env in self.envs])
        causes = [env.cause for env in self.envs]
        frames = [self.envs[i].encoder_input(raw_frames[i]) if raw_frames[i] is not None else None
                  for i in range(n)]
        final_obs: list[np.ndarray | None] = [None] * n

        # close out the step: encode frames produced by the action (running and
        # timed-out envs), advancing recurrent state only for those rows
        live = [i for i in range(n) if frames[i] is not None]
        if live:
            latents = self.perception.encode_rows(np.stack([frames[i] for i in live])[:, None], live)
            for k, i in enumerate(live):
                final_obs[i] = self.envs[i].observation(latents[k])

        # auto-reset finished envs and build next_obs
        next_obs: list[np.ndarray | None] = [None] * n
        reset_frames = []
        reset_rows = []
        for i, env in enumerate(self.envs):
            if dones[i]:
                self._episode_counter[i] += 1
                _, frame = env.reset(self._env_seed(i))
                self.perception.reset_env(i)
                reset_rows.append(i)
                reset_frames.append(env.encoder_input(frame))
            else:
                next_obs[i] = final_obs[i]
        if reset_rows:
            latents = self.perception.encode_rows(np.stack(reset_frames)[:, None], reset_rows)
            for k, i in enumerate(reset_rows):
                next_obs[i] = self.envs[i].observation(latents[k])
        return np.stack(next_obs), rewards, dones, truncs, causes, final_obs

    def step_eval(self, raw_actions: np.ndarray, bounds: ActionBounds):
        """Evaluation stepping: no auto-reset; done envs are skipped.

        Returns (obs_by_index for still-active envs, rewards, newly_done).
        """
        was_done = np.array([env.done for env in self.envs])
        rewards, raw_frames = self._physics_batch(raw_actions, bounds)
        newly_done = np.array([env.done and not was_done[i] for i, env in enumerate(self.envs)])
        obs: dict[int, np.ndarray] = {}
        live = [i for i in range(len(self.envs)) if raw_frames[i] is not None and not self.envs[i].done]
        if live:
            frames = np.stack([self.envs[i].encoder_input(raw_frames[i]) for i in live])[:, None]
            latents = self.perception.encode_rows(frames, live)
            for k, i in enumerate(live):
                obs[i] = self.envs[i].observation(latents[k])
        return obs, rewards, newly_done
