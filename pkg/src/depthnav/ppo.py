"""PPO actor-critic over the vectorized navigation environment.

The policy is a small two-layer trunk with a tanh-squashed Gaussian action
head (state-independent log-std) and a value head. Rollouts are collected
from a VecEnv in lockstep; truncated episodes bootstrap with the value of
their final observation, true terminals bootstrap with zero.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .env import ActionBounds, Cause, VecEnv
from .errors import NumericalError

LOG_STD_MIN, LOG_STD_MAX = -5.0, 1.0
_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class PpoConfig:
    discount: float = 0.99
    gae_lambda: float = 0.95
    clip_range: float = 0.2
    epochs: int = 4
    minibatch: int = 1024
    entropy_coef: float = 0.003
    value_coef: float = 0.5
    learning_rate: float = 3e-4
    rollout_length: int = 256
    num_envs: int = 8
    total_steps: int = 300_000
    kl_target: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.discount < 1.0:
            raise ValueError("discount must be in (0, 1)")
        if not 0.0 < self.clip_range < 1.0:
            raise ValueError("clip_range must be in (0, 1)")


class PolicyNetwork:
    """Shared trunk, tanh-scaled Gaussian action mean, value head."""

    def __init__(self, obs_dim: int, action_dim: int = 4, hidden: int = 256, seed: int = 0,
                 obs_scale: np.ndarray | None = None):
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        rng = np.random.default_rng(seed)

        def ortho(shape, gain):
            a = rng.standard_normal(shape)
            q, r = np.linalg.qr(a if shape[0] >= shape[1] else a.T)
            q = q * np.sign(np.diag(r))
            if shape[0] < shape[1]:
                q = q.T
            return (gain * q[: shape[0], : shape[1]]).astype(np.float32)

        self.params: dict[str, Tensor] = {}
        add = lambda name, value: self.params.__setitem__(name, Tensor(value, requires_grad=True))
        add("fc1.w", ortho((obs_dim, hidden), np.sqrt(2)))
        add("fc1.b", np.zeros(hidden, dtype=np.float32))
        add("fc2.w", ortho((hidden, hidden), np.sqrt(2)))
        add("fc2.b", np.zeros(hidden, dtype=np.float32))
        add("mean.w", ortho((hidden, action_dim), 0.01))
        add("mean.b", np.zeros(action_dim, dtype=np.float32))
        add("log_std", np.full(action_dim, -0.5, dtype=np.float32))
        add("value.w", ortho((hidden, 1), 1.0))
        add("value.b", np.zeros(1, dtype=np.float32))
        # fixed diagonal observation scaling (not trained, saved in checkpoints)
        self.obs_scale = (np.ones(obs_dim, dtype=np.float32) if obs_scale is None
                          else obs_scale.astype(np.float32))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.data.copy() for k, v in self.params.items()}
        out["obs_scale"] = self.obs_scale.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        state = dict(state)
        self.obs_scale = state.pop("obs_scale").astype(np.float32)
        for k, t in self.params.items():
            arr = np.asarray(state[k], dtype=np.float32)
            if arr.shape != t.data.shape:
                raise ValueError(f"parameter {k!r} shape {arr.shape} != {t.data.shape}")
            t.data = arr.copy()

    # -- forward ------------------------------------------------------------
    def forward(self, obs: Tensor):
        """Returns (action_mean in [-1,1], log_std, value)."""
        p = self.params
        h = ad.tanh(ad.affine(obs, p["fc1.w"], p["fc1.b"]))
        h = ad.tanh(ad.affine(h, p["fc2.w"], p["fc2.b"]))
        mean = ad.tanh(ad.affine(h, p["mean.w"], p["mean.b"]))
        log_std = ad.clip(p["log_std"], LOG_STD_MIN, LOG_STD_MAX)
        value = ad.affine(h, p["value.w"], p["value.b"])
        return mean, log_std, value

    def _scaled(self, obs: np.ndarray) -> np.ndarray:
        return (np.asarray(obs, dtype=np.float32) / self.obs_scale).astype(np.float32)

    def act(self, obs: np.ndarray, rng: np.random.Generator):
        """Sample actions for a rollout step; all numpy, no graph."""
        with ad.no_grad():
            mean, log_std, value = self.forward(Tensor(self._scaled(obs)))
        mean_np = mean.data
        std = np.exp(log_std.data)
        noise = rng.standard_normal(mean_np.shape).astype(np.float32)
        actions = mean_np + std * noise
        log_prob = gaussian_log_prob(actions, mean_np, log_std.data)
        return actions, log_prob, value.data[:, 0]

    def values(self, obs: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            _, _, value = self.forward(Tensor(self._scaled(obs)))
        return value.data[:, 0]

    def deterministic_action(self, obs: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            mean, _, _ = self.forward(Tensor(self._scaled(obs)))
        return mean.data


def gaussian_log_prob(actions: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    z = (actions - mean) / np.exp(log_std)
    return (-0.5 * z * z - log_std - 0.5 * _LOG_2PI).sum(axis=-1)


# ---------------------------------------------------------------------------
# GAE
# ---------------------------------------------------------------------------

def gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray, next_values: np.ndarray,
        discount: float, lam: float):
    """Generalized advantage estimation with truncation-aware bootstrapping.

    All arrays are (T, N). next_values[t] must hold the bootstrap value for
    step t: V(s_{t+1}) while running, V(final_obs) at truncations, and 0 at
    true terminals. Returns (advantages, returns).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    next_values = np.asarray(next_values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if not (rewards.shape == values.shape == next_values.shape == dones.shape):
        raise ValueError("gae inputs must share one (T, N) shape")
    t_len = rewards.shape[0]
    adv = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[1], dtype=np.float64)
    for t in range(t_len - 1, -1, -1):
        delta = rewards[t] + discount * next_values[t] - values[t]
        running = delta + discount * lam * np.where(dones[t], 0.0, running)
        adv[t] = running
    return adv, adv + values


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------

@dataclass
class RolloutBatch:
    obs: np.ndarray          # (T, N, D)
    actions: np.ndarray      # (T, N, A)
    log_probs: np.ndarray    # (T, N)
    values: np.ndarray       # (T, N)
    rewards: np.ndarray      # (T, N)
    dones: np.ndarray        # (T, N)
    next_values: np.ndarray  # (T, N)
    causes: list = field(default_factory=list)  # Cause per finished episode


def collect_rollouts(policy: PolicyNetwork, vec: VecEnv, length: int, bounds: ActionBounds,
                     rng: np.random.Generator, start_obs: np.ndarray) -> tuple[RolloutBatch, np.ndarray]:
    """Collect length * num_envs transitions; returns (batch, obs to resume from)."""
    n = len(vec)
    obs = start_obs
    obs_buf = np.zeros((length, n, vec.obs_dim), dtype=np.float32)
    act_buf = np.zeros((length, n, policy.action_dim), dtype=np.float32)
    logp_buf = np.zeros((length, n), dtype=np.float64)
    val_buf = np.zeros((length, n), dtype=np.float64)
    rew_buf = np.zeros((length, n), dtype=np.float64)
    done_buf = np.zeros((length, n), dtype=bool)
    trunc_rows: list[tuple[int, int, np.ndarray]] = []
    finished: list[Cause] = []

    for t in range(length):
        actions, log_prob, values = policy.act(obs, rng)
        if not np.all(np.isfinite(actions)) or not np.all(np.isfinite(values)):
            raise NumericalError(f"non-finite policy output at rollout step {t}")
        next_obs, rewards, dones, truncs, causes, final_obs = vec.step(actions, bounds)
        obs_buf[t] = obs
        act_buf[t] = actions
        logp_buf[t] = log_prob
        val_buf[t] = values
        rew_buf[t] = rewards
        done_buf[t] = dones
        for i in range(n):
            if dones[i]:
                finished.append(causes[i])
            if truncs[i]:
                trunc_rows.append((t, i, final_obs[i]))
        obs = next_obs

    # bootstrap values: V(s_{t+1}) by default, zero at terminals, V(final) at truncations
    next_val = np.zeros((length, n), dtype=np.float64)
    last_values = policy.values(obs)
    next_val[:-1] = val_buf[1:]
    next_val[-1] = last_values
    next_val[done_buf] = 0.0
    if trunc_rows:
        stacked = np.stack([row[2] for row in trunc_rows])
        boot = policy.values(stacked)
        for k, (t, i, _) in enumerate(trunc_rows):
            next_val[t, i] = boot[k]

    batch = RolloutBatch(obs_buf, act_buf, logp_buf, val_buf, rew_buf, done_buf, next_val, finished)
    return batch, obs


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

def surrogate_objective(ratio: np.ndarray, adv: np.ndarray, clip_range: float) -> np.ndarray:
    """Reference (non-autodiff) clipped surrogate, used by property tests."""
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - clip_range, 1.0 + clip_range) * adv)


def ppo_update(policy: PolicyNetwork, optimizer: ad.Adam, batch: RolloutBatch, config: PpoConfig,
               rng: np.random.Generator) -> dict[str, float]:
    """Clipped-surrogate update with value clipping, entropy bonus, and an
    approximate-KL early stop across epochs."""
    t_len, n, obs_dim = batch.obs.shape
    total = t_len * n
    obs = batch.obs.reshape(total, obs_dim)
    actions = batch.actions.reshape(total, policy.action_dim)
    logp_old = batch.log_probs.reshape(total)
    values_old = batch.values.reshape(total)
    adv, returns = gae(batch.rewards, batch.values, batch.dones, batch.next_values,
                       config.discount, config.gae_lambda)
    adv = adv.reshape(total)
    returns = returns.reshape(total)
    adv_n = (adv - adv.mean()) / (adv.std() + 1e-8)

    metrics = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "clip_fraction": 0.0, "approx_kl": 0.0}
    batches = 0
    minibatch = min(config.minibatch, total)
    stop = False
    for _epoch in range(config.epochs):
        order = rng.permutation(total)
        for start in range(0, total, minibatch):
            idx = order[start : start + minibatch]
            mb_obs = Tensor(policy._scaled(obs[idx]))
            mean, log_std, value = policy.forward(mb_obs)

            act_t = Tensor(actions[idx])
            std_inv = ad.exp(ad.mul(log_std, Tensor(np.float32(-1.0))))
            z = ad.mul(ad.sub(act_t, mean), std_inv)
            logp_elem = ad.sub(ad.mul(ad.mul(z, z), Tensor(np.float32(-0.5))), log_std)
            logp = ad.add(ad.tensor_sum(logp_elem, axis=1),
                          Tensor(np.float32(-0.5 * _LOG_2PI * policy.action_dim)))

            ratio = ad.exp(ad.sub(logp, Tensor(logp_old[idx].astype(np.float32))))
            adv_t = Tensor(adv_n[idx].astype(np.float32))
            unclipped = ad.mul(ratio, adv_t)
            clipped = ad.mul(ad.clip(ratio, 1.0 - config.clip_range, 1.0 + config.clip_range), adv_t)
            policy_loss = ad.mul(ad.tensor_mean(ad.minimum(unclipped, clipped)), Tensor(np.float32(-1.0)))

            ret_t = Tensor(returns[idx].astype(np.float32).reshape(-1, 1))
            val_old_t = Tensor(values_old[idx].astype(np.float32).reshape(-1, 1))
            v_clip = ad.add(val_old_t, ad.clip(ad.sub(value, val_old_t), -config.clip_range, config.clip_range))
            v_err = ad.mul(ad.sub(value, ret_t), ad.sub(value, ret_t))
            v_err_clip = ad.mul(ad.sub(v_clip, ret_t), ad.sub(v_clip, ret_t))
            value_loss = ad.mul(ad.tensor_mean(ad.maximum(v_err, v_err_clip)), Tensor(np.float32(0.5)))

            entropy = ad.tensor_sum(ad.add(log_std, Tensor(np.float32(0.5 * (1.0 + _LOG_2PI)))))

            loss = ad.add(policy_loss, ad.mul(value_loss, Tensor(np.float32(config.value_coef))))
            loss = ad.sub(loss, ad.mul(entropy, Tensor(np.float32(config.entropy_coef))))

            optimizer.zero_grad()
            ad.backward(loss)
            optimizer.step()

            with np.errstate(over="ignore"):
                ratio_np = ratio.data.astype(np.float64)
            approx_kl = float(np.mean(ratio_np - 1.0 - np.log(np.maximum(ratio_np, 1e-12))))
            metrics["policy_loss"] += float(policy_loss.data)
            metrics["value_loss"] += float(value_loss.data)
            metrics["entropy"] += float(entropy.data)
            metrics["clip_fraction"] += float(np.mean(np.abs(ratio_np - 1.0) > config.clip_range))
            metrics["approx_kl"] += approx_kl
            batches += 1
            if approx_kl > config.kl_target:
                stop = True
                break
        if stop:
            break
    for k in metrics:
        metrics[k] /= max(batches, 1)
    metrics["advantage_mean"] = float(adv.mean())
    metrics["return_mean"] = float(returns.mean())
    return metrics


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    updates: int
    transitions: int
    success_rate: float
    episode_causes: dict[str, int]


class PpoTrainer:
    """Drives collect/update cycles and writes one metrics CSV row per update."""

    def __init__(self, policy: PolicyNetwork, vec: VecEnv, bounds: ActionBounds, config: PpoConfig,
                 metrics_path: str | None = None):
        self.policy = policy
        self.vec = vec
        self.bounds = bounds
        self.config = config
        self.optimizer = ad.Adam(policy.parameters(), lr=config.learning_rate)
        self.rng = np.random.default_rng(config.seed)
        self.metrics_path = metrics_path
        self._csv = None

    def train(self, progress: bool = False) -> TrainResult:
        config = self.config
        obs = self.vec.reset_all()
        transitions = 0
        updates = 0
        recent: list[Cause] = []
        rows = []
        while transitions < config.total_steps:
            batch, obs = collect_rollouts(self.policy, self.vec, config.rollout_length,
                                          self.bounds, self.rng, obs)
            transitions += config.rollout_length * len(self.vec)
            metrics = ppo_update(self.policy, self.optimizer, batch, config, self.rng)
            updates += 1
            recent.extend(batch.causes)
            recent = recent[-200:]
            success = _success_rate(recent)
            reward_mean = float(batch.rewards.mean())
            rows.append({
                "update": updates, "transitions": transitions, "reward_mean": reward_mean,
                "success_rate": success, **{k: metrics[k] for k in
                    ("policy_loss", "value_loss", "entropy", "clip_fraction", "approx_kl", "return_mean")},
            })
            if progress:
                print(f"update {updates} steps {transitions} reward {reward_mean:.4f} "
                      f"success {success:.2f} kl {metrics['approx_kl']:.4f}", flush=True)
        if self.metrics_path:
            _write_metrics_csv(self.metrics_path, rows)
        counts: dict[str, int] = {}
        for cause in recent:
            counts[cause.value] = counts.get(cause.value, 0) + 1
        return TrainResult(updates, transitions, _success_rate(recent), counts)


def _success_rate(causes: list[Cause]) -> float:
    if not causes:
        return 0.0
    return sum(1 for c in causes if c is Cause.ARRIVE) / len(causes)


def _write_metrics_csv(path: str, rows: list[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
