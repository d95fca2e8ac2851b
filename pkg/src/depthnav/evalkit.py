"""Quantitative evaluation: nearest-neighbor separability of latent sets,
2-D linear latent projections, and the navigation benchmark."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import scene as sc
from .env import ActionBounds, Cause, EnvParams, NavEnv, Perception


@dataclass
class LabeledLatentSet:
    """Latent vectors with a domain tag per row."""

    vectors: np.ndarray
    labels: list[str]

    def __post_init__(self) -> None:
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError("vectors must be (N, D)")
        if len(self.labels) != self.vectors.shape[0]:
            raise ValueError("one label per vector required")
        if self.vectors.shape[0] < 2:
            raise ValueError("need at least two points")


def gsi(latents: LabeledLatentSet) -> float:
    """Geometric separability: fraction of points whose Euclidean nearest
    neighbor (self excluded, ties to the lowest index) shares their label.

    1.0 means fully separable domains, 0.5 is chance level for balanced
    two-class sets; lower values indicate better inter-class mixing.
    """
    labels = np.asarray(latents.labels)
    if len(set(latents.labels)) < 2:
        raise ValueError("GSI needs at least two distinct labels")
    x = latents.vectors
    n = x.shape[0]
    same = np.zeros(n, dtype=bool)
    sq = np.sum(x * x, axis=1)
    block = max(1, min(n, 2_000_000 // max(n, 1)))
    for start in range(0, n, block):
        stop = min(start + block, n)
        d2 = sq[start:stop, None] + sq[None, :] - 2.0 * (x[start:stop] @ x.T)
        rows = np.arange(start, stop)
        d2[np.arange(stop - start), rows] = np.inf  # exclude self
        nearest = np.argmin(d2, axis=1)  # argmin takes the lowest index on ties
        same[start:stop] = labels[nearest] == labels[rows]
    return float(same.mean())


def project_latents(latents: LabeledLatentSet, dims: int = 2) -> np.ndarray:
    """Project onto the top principal directions with a deterministic sign.

    Sign convention: along each output axis the coordinate of largest
    magnitude is positive. Raises on degenerate covariance (rank < dims).
    """
    x = latents.vectors
    n = x.shape[0]
    if n <= dims:
        raise ValueError(f"need more than {dims} points, got {n}")
    centered = x - x.mean(axis=0, keepdims=True)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if np.sum(s > 1e-12 * max(s[0], 1.0)) < dims:
        raise ValueError("degenerate covariance: fewer informative directions than requested")
    coords = centered @ vt[:dims].T
    for axis in range(dims):
        j = int(np.argmax(np.abs(coords[:, axis])))
        if coords[j, axis] < 0:
            coords[:, axis] = -coords[:, axis]
    return coords


# ---------------------------------------------------------------------------
# navigation benchmark
# ---------------------------------------------------------------------------

@dataclass
class BenchmarkReport:
    trials: int
    successes: int
    success_rate: float
    mean_goal_velocity: float
    causes: dict[str, int]
    per_scene: dict[str, dict] = field(default_factory=dict)
    depth_mode: str = "gt"
    config_fingerprint: str = ""

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "BenchmarkReport":
        return BenchmarkReport(**json.loads(text))


def run_benchmark(
    policy,
    perception: Perception,
    scenes: list[sc.Scene],
    trials_per_scene: int,
    depth_mode: str,
    env_params: EnvParams,
    camera: sc.CameraModel,
    bounds: ActionBounds,
    seed: int = 0,
    max_parallel: int = 32,
    config_fingerprint: str = "",
) -> BenchmarkReport:
    """Deterministic navigation benchmark over (scene, trial) pairs.

    The policy acts with its deterministic mean action. Mean goal velocity is
    the straight-line start-goal distance over the episode duration,
    averaged over successful trials only.
    """
    if depth_mode not in ("gt", "stereo"):
        raise ValueError(f"depth_mode must be gt or stereo, got {depth_mode!r}")
    jobs = [(si, ti) for si in range(len(scenes)) for ti in range(trials_per_scene)]
    causes: dict[str, int] = {}
    per_scene: dict[str, dict] = {str(si): {"trials": 0, "successes": 0} for si in range(len(scenes))}
    velocities: list[float] = []
    successes = 0

    from dataclasses import replace as dc_replace

    from .env import VecEnv

    params = dc_replace(env_params, depth_mode=depth_mode)
    for chunk_start in range(0, len(jobs), max_parallel):
        chunk = jobs[chunk_start : chunk_start + max_parallel]
        envs = [NavEnv(scenes[si], camera, params) for si, _ in chunk]
        vec = VecEnv(envs, perception)
        perception.reset(len(envs))
        frames = []
        starts = []
        for k, ((si, ti), env) in enumerate(zip(chunk, envs)):
            state, frame = env.reset(seed + 100_000 * si + ti)
            starts.append(state.p_W.copy())
            frames.append(env.encoder_input(frame))
        latents = perception.encode_rows(np.stack(frames)[:, None], list(range(len(envs))))
        obs = {k: envs[k].observation(latents[k]) for k in range(len(envs))}

        raw_actions = np.zeros((len(envs), policy.action_dim), dtype=np.float32)
        while obs:
            active = sorted(obs)
            actions = policy.deterministic_action(np.stack([obs[k] for k in active]))
            raw_actions[active] = actions
            obs, _, newly_done = vec.step_eval(raw_actions, bounds)
            for k in np.flatnonzero(newly_done):
                env = envs[k]
                cause = env.cause.value
                causes[cause] = causes.get(cause, 0) + 1
                si = chunk[k][0]
                per_scene[str(si)]["trials"] += 1
                if env.cause is Cause.ARRIVE:
                    successes += 1
                    per_scene[str(si)]["successes"] += 1
                    distance = float(np.linalg.norm(env.goal - starts[k]))
                    duration = env.steps * params.refgen.action_period
                    velocities.append(distance / duration)

    trials = len(jobs)
    return BenchmarkReport(
        trials=trials,
        successes=successes,
        success_rate=successes / trials if trials else 0.0,
        mean_goal_velocity=float(np.mean(velocities)) if velocities else 0.0,
        causes=causes,
        per_scene=per_scene,
        depth_mode=depth_mode,
        config_fingerprint=config_fingerprint,
    )


def save_report_csv(report: BenchmarkReport, path: str) -> None:
    lines = ["scene,trials,successes"]
    for key in sorted(report.per_scene, key=int):
        entry = report.per_scene[key]
        lines.append(f"{key},{entry['trials']},{entry['successes']}")
    lines.append(f"total,{report.trials},{report.successes}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def export_latents(path_base: str, latents: LabeledLatentSet) -> tuple[str, str]:
    """Write latents as a depth-dataset binary (one 1 x D frame per vector)
    plus a labels text file, one tag per line."""
    from .depthproc import DepthImage, write_depth_dataset

    frames = [DepthImage(v.reshape(1, -1).astype(np.float32), np.ones((1, v.size), dtype=bool))
              for v in latents.vectors]
    data_path = path_base + ".dtd"
    labels_path = path_base + ".labels"
    write_depth_dataset(data_path, frames, max_depth=1.0)
    with open(labels_path, "w") as fh:
        fh.write("\n".join(latents.labels) + "\n")
    return data_path, labels_path
