"""Pipeline stages: scene generation, bootstrap, data collection, model
training, degradation, adaptation, and evaluation.

Every stage is rerunnable in isolation. A stage verifies its input artifacts
against the manifest (config hash and content hash), writes outputs
atomically, and appends a manifest entry. All randomness derives from the
config seed, so a rerun with identical (config, seed) reproduces artifacts
bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from contextlib import contextmanager
from dataclasses import replace

import numpy as np

from . import autodiff as ad
from . import config as cfgmod
from . import depthproc, evalkit, models
from . import scene as sc
from .autodiff import Tensor
from .config import Config
from .env import NavEnv, Perception, VecEnv
from .errors import ConfigError, PrerequisiteError
from .evalkit import LabeledLatentSet
from .models import Discriminator, LstmPredictor, VaeModel
from .ppo import PolicyNetwork, PpoTrainer

MANIFEST_NAME = "manifest.jsonl"


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class Workspace:
    """Output directory with a manifest log and a single-writer lock."""

    def __init__(self, cfg: Config, out_dir: str | None = None):
        self.cfg = cfg
        self.root = out_dir or cfg.out_dir
        os.makedirs(self.root, exist_ok=True)
        cfgmod.save_config(cfg, self.path("config.toml"))

    def path(self, rel: str) -> str:
        full = os.path.join(self.root, rel)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        return full

    @contextmanager
    def lock(self):
        lock_path = os.path.join(self.root, ".lock")
        try:
            fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise PrerequisiteError(
                f"output directory {self.root} is locked by another writer "
                f"(remove {lock_path} if that run is dead)"
            )
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield
        finally:
            os.unlink(lock_path)

    # -- manifest -----------------------------------------------------------
    def _manifest_entries(self) -> list[dict]:
        path = os.path.join(self.root, MANIFEST_NAME)
        if not os.path.exists(path):
            return []
        with open(path) as fh:
            return [json.loads(line) for line in fh if line.strip()]

    def record(self, stage: str, inputs: list[str], outputs: list[str], wall_clock: float) -> dict:
        entry = {
            "stage": stage,
            "config_hash": self.cfg.hash,
            "seed": self.cfg.seed,
            "inputs": {rel: sha256_file(self.path(rel)) for rel in inputs},
            "outputs": {rel: sha256_file(self.path(rel)) for rel in outputs},
            "wall_clock_s": round(wall_clock, 3),
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        }
        with open(os.path.join(self.root, MANIFEST_NAME), "a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
        return entry

    def require(self, rel: str) -> str:
        """Assert an input artifact exists, was produced under this config,
        and has not been modified since. Returns the absolute path."""
        full = self.path(rel)
        if not os.path.exists(full):
            raise PrerequisiteError(f"missing prerequisite artifact: {rel}")
        recorded = None
        for entry in self._manifest_entries():
            if rel in entry["outputs"]:
                recorded = entry
        if recorded is None:
            raise PrerequisiteError(f"{rel} exists but has no manifest entry; rerun its stage")
        if recorded["config_hash"] != self.cfg.hash:
            raise PrerequisiteError(
                f"{rel} was produced under config {recorded['config_hash'][:12]} "
                f"but the current config is {self.cfg.hash[:12]}; rerun its stage"
            )
        actual = sha256_file(full)
        expected = recorded["outputs"][rel]
        if actual != expected:
            raise PrerequisiteError(
                f"artifact {rel} hash mismatch: manifest records {expected[:12]} "
                f"but the file is {actual[:12]} (tampered or stale)"
            )
        return full

    @contextmanager
    def stage(self, name: str, inputs: list[str]):
        """Verify inputs, hold the lock, time the body, record outputs."""
        for rel in inputs:
            self.require(rel)
        with self.lock():
            started = time.time()
            outputs: list[str] = []
            yield outputs
            self.record(name, inputs, outputs, time.time() - started)


def _atomic_json(path: str, payload: dict) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# scene and data stages
# ---------------------------------------------------------------------------

def scene_sets(cfg: Config) -> dict[str, tuple[int, float]]:
    """Named scene groups: (count, density) with disjoint seed blocks."""
    s = cfg["scene"]
    return {
        "train": (s["num_scenes_train"], s["density"]),
        "eval": (s["num_scenes_eval"], s["density"]),
        "sparse": (s["num_scenes_train"], s["density_bootstrap"]),
    }


_SCENE_SEED_BLOCK = {"train": 10_000, "eval": 20_000, "sparse": 30_000}


def stage_gen_scenes(ws: Workspace) -> list[str]:
    cfg = ws.cfg
    s = cfg["scene"]
    bounds = (np.array(s["bounds_min"]), np.array(s["bounds_max"]))
    dims = cfgmod.primitive_dims(cfg)
    with ws.stage("gen-scenes", []) as outputs:
        for group, (count, density) in scene_sets(cfg).items():
            for i in range(count):
                seed = cfg.seed + _SCENE_SEED_BLOCK[group] + i
                scn = sc.generate_scene(seed, density, bounds, s["clearance"], dims)
                rel = f"scenes/{group}_{i:03d}.txt"
                sc.save_scene(scn, ws.path(rel))
                outputs.append(rel)
    return outputs


def load_scene_group(ws: Workspace, group: str) -> list[sc.Scene]:
    count = scene_sets(ws.cfg)[group][0]
    scenes = []
    for i in range(count):
        rel = f"scenes/{group}_{i:03d}.txt"
        ws.require(rel)
        scenes.append(sc.load_scene(ws.path(rel)))
    return scenes


def _vae_seed(cfg: Config) -> int:
    return cfg.seed + cfg["vae"]["seed_offset"]


def _build_policy(cfg: Config, latent_dim: int, seed: int) -> PolicyNetwork:
    from .env import OBS_PHYS_WIDTH

    obs_dim = OBS_PHYS_WIDTH + latent_dim
    return PolicyNetwork(obs_dim, seed=seed, obs_scale=cfgmod.observation_scale(latent_dim, cfg))


def stage_bootstrap(ws: Workspace) -> dict:
    """Short PPO run in sparse scenes with a randomly initialized encoder."""
    cfg = ws.cfg
    scene_inputs = [f"scenes/sparse_{i:03d}.txt" for i in range(scene_sets(cfg)["sparse"][0])]
    with ws.stage("bootstrap", scene_inputs) as outputs:
        scenes = [sc.load_scene(ws.path(rel)) for rel in scene_inputs]
        camera = cfgmod.camera_model(cfg)
        vae = VaeModel(camera.height, camera.width, arch=cfg["vae"]["arch"], seed=_vae_seed(cfg),
                       beta=cfg["vae"]["beta"])
        perception = Perception(vae)
        params = cfgmod.env_params(cfg, depth_mode="gt", dilation=1)
        pcfg = cfgmod.ppo_config(cfg, total_steps=cfg["bootstrap"]["total_steps"])
        envs = [NavEnv(scenes[i % len(scenes)], camera, params) for i in range(pcfg.num_envs)]
        vec = VecEnv(envs, perception, base_seed=cfg.seed)
        policy = _build_policy(cfg, vae.latent, seed=cfg.seed + 1)
        trainer = PpoTrainer(policy, vec, params.bounds, pcfg, metrics_path=ws.path("bootstrap/metrics.csv"))
        result = trainer.train()
        ad.save_checkpoint(ws.path("bootstrap/policy.ckp"), policy.state_dict())
        ad.save_checkpoint(ws.path("bootstrap/vae.ckp"), vae.state_dict())
        _atomic_json(ws.path("bootstrap/policy.json"), {
            "kind": "policy", "perception": "vae", "latent_dim": vae.latent,
            "vae_arch": cfg["vae"]["arch"], "dilation": 1,
            "success_rate": result.success_rate, "config_hash": cfg.hash,
        })
        outputs.extend(["bootstrap/policy.ckp", "bootstrap/vae.ckp", "bootstrap/policy.json",
                        "bootstrap/metrics.csv"])
    return {"success_rate": result.success_rate, "causes": result.episode_causes}


def stage_collect(ws: Workspace) -> dict:
    """Roll the bootstrap policy through training scenes, saving raw frames."""
    cfg = ws.cfg
    inputs = ["bootstrap/policy.ckp", "bootstrap/vae.ckp"]
    inputs += [f"scenes/train_{i:03d}.txt" for i in range(scene_sets(cfg)["train"][0])]
    with ws.stage("collect", inputs) as outputs:
        camera = cfgmod.camera_model(cfg)
        vae = VaeModel(camera.height, camera.width, arch=cfg["vae"]["arch"], seed=_vae_seed(cfg),
                       beta=cfg["vae"]["beta"])
        vae.load_state_dict(ad.load_checkpoint(ws.path("bootstrap/vae.ckp")))
        perception = Perception(vae)
        policy = _build_policy(cfg, vae.latent, seed=cfg.seed + 1)
        policy.load_state_dict(ad.load_checkpoint(ws.path("bootstrap/policy.ckp")))

        scenes = load_scene_group(ws, "train")
        params = cfgmod.env_params(cfg, depth_mode="gt", dilation=1)
        target = cfg["bootstrap"]["dataset_size"]
        n_envs = cfg["ppo"]["num_envs"]
        envs = [NavEnv(scenes[i % len(scenes)], camera, params) for i in range(n_envs)]
        rng = np.random.default_rng(cfg.seed + 17)
        perception.reset(n_envs)

        frames: list[depthproc.DepthImage] = []
        episodes: list[dict] = []
        open_episode = [None] * n_envs

        def begin(i):
            open_episode[i] = {"start": len(frames), "length": 0}

        obs = [None] * n_envs
        for i, env in enumerate(envs):
            _, frame = env.reset(cfg.seed + 50_000 + i)
            begin(i)
            frames.append(frame)
            open_episode[i]["length"] += 1
            latent = perception.encode_rows(env.encoder_input(frame)[None, None], [i])
            obs[i] = env.observation(latent[0])

        while len(frames) < target:
            actions, _, _ = policy.act(np.stack(obs), rng)
            for i, env in enumerate(envs):
                if len(frames) >= target:
                    break
                _, frame = env.step_physics(params.bounds.to_command(actions[i]))
                if env.done:
                    episodes.append(open_episode[i])
                    _, frame = env.reset(cfg.seed + 50_000 + 1000 * len(episodes) + i)
                    perception.reset_env(i)
                    begin(i)
                frames.append(frame)
                open_episode[i]["length"] += 1
                latent = perception.encode_rows(env.encoder_input(frame)[None, None], [i])
                obs[i] = env.observation(latent[0])
        episodes.extend(ep for ep in open_episode if ep is not None and ep["length"] > 0)

        depthproc.write_depth_dataset(ws.path("data/gt.dtd"), frames, camera.max_depth)
        _atomic_json(ws.path("data/episodes.json"), {"episodes": episodes, "config_hash": cfg.hash})
        outputs.extend(["data/gt.dtd", "data/episodes.json"])
    return {"frames": len(frames), "episodes": len(episodes)}


def stage_degrade(ws: Workspace) -> dict:
    """Create the paired stereo-like dataset from the collected GT frames."""
    cfg = ws.cfg
    with ws.stage("degrade", ["data/gt.dtd"]) as outputs:
        camera = cfgmod.camera_model(cfg)
        frames, max_depth = depthproc.read_depth_dataset(ws.path("data/gt.dtd"))
        base = cfgmod.degrade_params(cfg)
        out = []
        for i, frame in enumerate(frames):
            params = replace(base, seed=int((cfg.seed * 1_000_003 + i) % (2**31 - 1)))
            out.append(depthproc.stereo_degrade(frame, camera, params))
        depthproc.write_depth_dataset(ws.path("data/stereo.dtd"), out, max_depth)
        outputs.append("data/stereo.dtd")
    return {"frames": len(out)}


# ---------------------------------------------------------------------------
# model training stages
# ---------------------------------------------------------------------------

def vae_variant_name(arch: str, dilation: int) -> str:
    return f"{arch}_{'dil' if dilation > 1 else 'nodil'}"


def _load_frames_normalized(ws: Workspace, rel: str, dilation: int) -> np.ndarray:
    camera = cfgmod.camera_model(ws.cfg)
    frames, max_depth = depthproc.read_depth_dataset(ws.path(rel))
    out = np.empty((len(frames), 1, camera.height, camera.width), dtype=np.float32)
    for i, frame in enumerate(frames):
        if dilation > 1:
            frame = depthproc.min_pool_dilate(frame, dilation)
        out[i, 0] = depthproc.to_encoder_input(frame, max_depth)
    return out


def _vae_manifest(ws: Workspace, name: str) -> dict:
    with open(ws.path(f"vae/{name}.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("config_hash") != ws.cfg.hash:
        raise PrerequisiteError(f"vae/{name}.json belongs to a different config")
    return manifest


def load_vae(ws: Workspace, name: str) -> tuple[VaeModel, dict]:
    ws.require(f"vae/{name}.ckp")
    manifest = _vae_manifest(ws, name)
    vae = VaeModel(manifest["height"], manifest["width"], arch=manifest["arch"],
                   seed=_vae_seed(ws.cfg), beta=manifest["beta"])
    vae.load_state_dict(ad.load_checkpoint(ws.path(f"vae/{name}.ckp")))
    vae.pretrained = True
    return vae, manifest


def stage_train_vae(ws: Workspace, arch: str | None = None, dilation: int | None = None) -> dict:
    cfg = ws.cfg
    arch = arch or cfg["vae"]["arch"]
    dilation = cfg["env"]["dilation_kernel"] if dilation is None else dilation
    name = vae_variant_name(arch, dilation)
    with ws.stage(f"train-vae:{name}", ["data/gt.dtd"]) as outputs:
        camera = cfgmod.camera_model(cfg)
        images = _load_frames_normalized(ws, "data/gt.dtd", dilation)
        vae = VaeModel(camera.height, camera.width, arch=arch, seed=_vae_seed(cfg), beta=cfg["vae"]["beta"])
        opt = ad.Adam(vae.parameters(), lr=cfg["vae"]["learning_rate"])
        rng = np.random.default_rng(cfg.seed + 7)
        batch_size = min(cfg["vae"]["batch_size"], len(images))
        history = []
        for epoch in range(cfg["vae"]["epochs"]):
            order = rng.permutation(len(images))
            epoch_recon, epoch_kl, batches = 0.0, 0.0, 0
            for start in range(0, len(images), batch_size):
                idx = order[start : start + batch_size]
                batch = Tensor(images[idx])
                total, recon, kl = models.vae_loss(vae, batch, rng=rng, train=True)
                opt.zero_grad()
                ad.backward(total)
                opt.step()
                epoch_recon += float(recon.data)
                epoch_kl += float(kl.data)
                batches += 1
            history.append({"epoch": epoch, "recon": epoch_recon / batches, "kl": epoch_kl / batches})
        vae.pretrained = True
        ad.save_checkpoint(ws.path(f"vae/{name}.ckp"), vae.state_dict())
        _atomic_json(ws.path(f"vae/{name}.json"), {
            "kind": "vae", "arch": arch, "height": camera.height, "width": camera.width,
            "latent": vae.latent, "beta": cfg["vae"]["beta"], "dilation": dilation,
            "adapted": False, "config_hash": cfg.hash,
        })
        with open(ws.path(f"vae/{name}_loss.csv"), "w") as fh:
            fh.write("epoch,recon,kl\n")
            for row in history:
                fh.write(f"{row['epoch']},{row['recon']!r},{row['kl']!r}\n")
        outputs.extend([f"vae/{name}.ckp", f"vae/{name}.json", f"vae/{name}_loss.csv"])
    return {"name": name, "history": history}


def stage_train_lstm(ws: Workspace, vae_name: str | None = None) -> dict:
    cfg = ws.cfg
    vae_name = vae_name or vae_variant_name(cfg["vae"]["arch"], cfg["env"]["dilation_kernel"])
    inputs = ["data/gt.dtd", "data/episodes.json", f"vae/{vae_name}.ckp"]
    with ws.stage("train-lstm", inputs) as outputs:
        vae, manifest = load_vae(ws, vae_name)
        gap = cfg["lstm"]["gap"]
        images = _load_frames_normalized(ws, "data/gt.dtd", manifest["dilation"])
        with open(ws.path("data/episodes.json")) as fh:
            episodes = json.load(fh)["episodes"]

        # frozen encoder: precompute latents once
        latents = np.empty((len(images), vae.latent), dtype=np.float32)
        with ad.no_grad():
            for start in range(0, len(images), 128):
                mu, _, _ = vae.encode(Tensor(images[start : start + 128]))
                latents[start : start + 128] = mu.data

        windows = []
        for ep in episodes:
            lo, length = ep["start"], ep["length"]
            for t in range(lo + gap, lo + length):
                windows.append(t)
        if not windows:
            raise ConfigError(f"no training windows: episodes shorter than the {gap}-step gap")
        windows = np.array(windows)

        predictor = LstmPredictor(seed=cfg.seed + cfg["lstm"]["seed_offset"], gap=gap)
        trainable = predictor.parameters()
        opt = ad.Adam(trainable, lr=cfg["lstm"]["learning_rate"])
        for p in vae.parameters():
            p.requires_grad = False
        rng = np.random.default_rng(cfg.seed + 23)
        batch_size = min(cfg["lstm"]["batch_size"], len(windows))
        history = []
        for epoch in range(cfg["lstm"]["epochs"]):
            order = rng.permutation(len(windows))
            total_loss, batches = 0.0, 0
            for start in range(0, len(windows), batch_size):
                idx = windows[order[start : start + batch_size]]
                z_seq = [Tensor(latents[idx - gap + k]) for k in range(gap + 1)]
                target_prev = Tensor(images[idx - gap])
                target_curr = Tensor(images[idx])
                loss = models.lstm_loss(predictor, vae, z_seq, target_prev, target_curr)
                opt.zero_grad()
                ad.backward(loss)
                opt.step()
                total_loss += float(loss.data)
                batches += 1
            history.append({"epoch": epoch, "loss": total_loss / batches})
        for p in vae.parameters():
            p.requires_grad = True

        ad.save_checkpoint(ws.path("lstm/lstm.ckp"), predictor.state_dict())
        _atomic_json(ws.path("lstm/lstm.json"), {
            "kind": "lstm", "gap": gap, "hidden": predictor.hidden, "vae": vae_name,
            "config_hash": cfg.hash,
        })
        with open(ws.path("lstm/lstm_loss.csv"), "w") as fh:
            fh.write("epoch,loss\n")
            for row in history:
                fh.write(f"{row['epoch']},{row['loss']!r}\n")
        outputs.extend(["lstm/lstm.ckp", "lstm/lstm.json", "lstm/lstm_loss.csv"])
    return {"history": history, "windows": len(windows)}


def load_lstm(ws: Workspace) -> LstmPredictor:
    ws.require("lstm/lstm.ckp")
    with open(ws.path("lstm/lstm.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("config_hash") != ws.cfg.hash:
        raise PrerequisiteError("lstm/lstm.json belongs to a different config")
    predictor = LstmPredictor(seed=0, gap=manifest["gap"], hidden=manifest["hidden"])
    predictor.load_state_dict(ad.load_checkpoint(ws.path("lstm/lstm.ckp")))
    return predictor


def stage_train_policy(ws: Workspace, vae_name: str | None = None, policy_name: str | None = None,
                       perception_mode: str | None = None, progress: bool = False) -> dict:
    cfg = ws.cfg
    vae_name = vae_name or vae_variant_name(cfg["vae"]["arch"], cfg["env"]["dilation_kernel"])
    perception_mode = perception_mode or cfg["env"]["perception"]
    policy_name = policy_name or f"policy_{vae_name}_{perception_mode}"
    inputs = [f"vae/{vae_name}.ckp"]
    inputs += [f"scenes/train_{i:03d}.txt" for i in range(scene_sets(cfg)["train"][0])]
    if perception_mode == "lstm":
        inputs.append("lstm/lstm.ckp")
    with ws.stage(f"train-policy:{policy_name}", inputs) as outputs:
        vae, manifest = load_vae(ws, vae_name)
        lstm = load_lstm(ws) if perception_mode == "lstm" else None
        for p in vae.parameters():
            p.requires_grad = False
        if lstm is not None:
            for p in lstm.parameters():
                p.requires_grad = False
        perception = Perception(vae, lstm)
        camera = cfgmod.camera_model(cfg)
        scenes = load_scene_group(ws, "train")
        params = cfgmod.env_params(cfg, depth_mode="gt", dilation=manifest["dilation"])
        pcfg = cfgmod.ppo_config(cfg)
        envs = [NavEnv(scenes[i % len(scenes)], camera, params) for i in range(pcfg.num_envs)]
        vec = VecEnv(envs, perception, base_seed=cfg.seed + 3)
        policy = _build_policy(cfg, perception.latent_dim, seed=cfg.seed + 11)
        trainer = PpoTrainer(policy, vec, params.bounds, pcfg,
                             metrics_path=ws.path(f"policy/{policy_name}_metrics.csv"))
        result = trainer.train(progress=progress)
        for p in vae.parameters():
            p.requires_grad = True
        if lstm is not None:
            for p in lstm.parameters():
                p.requires_grad = True
        ad.save_checkpoint(ws.path(f"policy/{policy_name}.ckp"), policy.state_dict())
        _atomic_json(ws.path(f"policy/{policy_name}.json"), {
            "kind": "policy", "perception": perception_mode, "latent_dim": perception.latent_dim,
            "vae": vae_name, "dilation": manifest["dilation"],
            "train_success_rate": result.success_rate, "config_hash": cfg.hash,
        })
        outputs.extend([f"policy/{policy_name}.ckp", f"policy/{policy_name}.json",
                        f"policy/{policy_name}_metrics.csv"])
    return {"name": policy_name, "success_rate": result.success_rate, "causes": result.episode_causes}


def load_policy(ws: Workspace, policy_name: str, cfg_latent_dim: int | None = None) -> tuple[PolicyNetwork, dict]:
    ws.require(f"policy/{policy_name}.ckp")
    with open(ws.path(f"policy/{policy_name}.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("config_hash") != ws.cfg.hash:
        raise PrerequisiteError(f"policy/{policy_name}.json belongs to a different config")
    latent_dim = manifest["latent_dim"]
    if cfg_latent_dim is not None and latent_dim != cfg_latent_dim:
        raise PrerequisiteError(
            f"policy {policy_name} expects a {latent_dim}-dim latent but the "
            f"requested perception provides {cfg_latent_dim}"
        )
    policy = _build_policy(ws.cfg, latent_dim, seed=0)
    policy.load_state_dict(ad.load_checkpoint(ws.path(f"policy/{policy_name}.ckp")))
    return policy, manifest


# ---------------------------------------------------------------------------
# adaptation
# ---------------------------------------------------------------------------

def stage_adapt(ws: Workspace, vae_name: str | None = None, use_domain_loss: bool = True,
                out_name: str | None = None) -> dict:
    """Refine the encoder on stereo frames; GRL + discriminator align latents.

    With use_domain_loss False this is the reconstruction-only refinement
    baseline. Policy and LSTM checkpoints are never inputs nor outputs here.
    """
    cfg = ws.cfg
    vae_name = vae_name or vae_variant_name(cfg["vae"]["arch"], cfg["env"]["dilation_kernel"])
    out_name = out_name or vae_name + ("_adapted" if use_domain_loss else "_refined")
    inputs = ["data/gt.dtd", "data/stereo.dtd", f"vae/{vae_name}.ckp"]
    with ws.stage(f"adapt:{out_name}", inputs) as outputs:
        vae, manifest = load_vae(ws, vae_name)
        dilation = manifest["dilation"]
        gt = _load_frames_normalized(ws, "data/gt.dtd", dilation)
        stereo = _load_frames_normalized(ws, "data/stereo.dtd", dilation)
        params = cfgmod.adaptation_params(cfg)
        disc = Discriminator(seed=cfg.seed + 31)
        vae_opt = ad.Adam(vae.parameters(), lr=params.lr_vae)
        disc_opt = ad.Adam(disc.parameters(), lr=params.lr_disc)
        rng = np.random.default_rng(cfg.seed + 37)
        steps = cfg["adapt"]["steps"]
        warmup = max(1, int(params.warmup_fraction * steps))
        history = []
        for step_idx in range(steps):
            lam_scale = min(1.0, step_idx / warmup) if use_domain_loss else 0.0
            gamma = params.gamma if use_domain_loss else 0.0
            gt_idx = rng.integers(0, len(gt), size=params.batch_size)
            st_idx = rng.integers(0, len(stereo), size=params.batch_size)
            report = models.adapt_step(
                vae, disc, Tensor(gt[gt_idx]), Tensor(stereo[st_idx]),
                replace(params, gamma=gamma), vae_opt, disc_opt, rng, lambda_scale=lam_scale,
            )
            if step_idx % 10 == 0 or step_idx == steps - 1:
                history.append({"step": step_idx, **report})
        ad.save_checkpoint(ws.path(f"vae/{out_name}.ckp"), vae.state_dict())
        ad.save_checkpoint(ws.path(f"adapt/{out_name}_disc.ckp"), disc.state_dict())
        _atomic_json(ws.path(f"vae/{out_name}.json"), {
            "kind": "vae", "arch": manifest["arch"], "height": manifest["height"],
            "width": manifest["width"], "latent": manifest["latent"], "beta": manifest["beta"],
            "dilation": dilation, "adapted": use_domain_loss, "refined_from": vae_name,
            "config_hash": cfg.hash,
        })
        with open(ws.path(f"adapt/{out_name}_loss.csv"), "w") as fh:
            fh.write("step,total,recon,kl,domain,lambda_grl\n")
            for row in history:
                fh.write(f"{row['step']},{row['total']!r},{row['recon']!r},{row['kl']!r},"
                         f"{row['domain']!r},{row['lambda_grl']!r}\n")
        outputs.extend([f"vae/{out_name}.ckp", f"vae/{out_name}.json",
                        f"adapt/{out_name}_disc.ckp", f"adapt/{out_name}_loss.csv"])
    return {"name": out_name, "history": history}


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def stage_eval(ws: Workspace, policy_name: str, vae_name: str, depth_mode: str,
               report_name: str | None = None) -> evalkit.BenchmarkReport:
    cfg = ws.cfg
    report_name = report_name or f"{policy_name}_{vae_name}_{depth_mode}"
    inputs = [f"policy/{policy_name}.ckp", f"vae/{vae_name}.ckp"]
    inputs += [f"scenes/eval_{i:03d}.txt" for i in range(scene_sets(cfg)["eval"][0])]
    with ws.stage(f"eval:{report_name}", inputs) as outputs:
        vae, manifest = load_vae(ws, vae_name)
        policy, pol_manifest = load_policy(ws, policy_name)
        lstm = load_lstm(ws) if pol_manifest["perception"] == "lstm" else None
        perception = Perception(vae, lstm)
        if perception.latent_dim != pol_manifest["latent_dim"]:
            raise PrerequisiteError("policy and encoder latent widths do not match")
        scenes = load_scene_group(ws, "eval")
        camera = cfgmod.camera_model(cfg)
        params = cfgmod.env_params(cfg, depth_mode=depth_mode, dilation=manifest["dilation"])
        report = evalkit.run_benchmark(
            policy, perception, scenes, cfg["eval"]["trials_per_scene"], depth_mode, params,
            camera, params.bounds, seed=cfg.seed + 41, max_parallel=cfg["eval"]["max_parallel"],
            config_fingerprint=cfg.hash,
        )
        with open(ws.path(f"eval/{report_name}.json"), "w") as fh:
            fh.write(report.to_json())
        evalkit.save_report_csv(report, ws.path(f"eval/{report_name}.csv"))
        outputs.extend([f"eval/{report_name}.json", f"eval/{report_name}.csv"])
    return report


def _encode_dataset(ws: Workspace, vae: VaeModel, rel: str, dilation: int, count: int) -> np.ndarray:
    images = _load_frames_normalized(ws, rel, dilation)[:count]
    out = np.empty((len(images), vae.latent), dtype=np.float32)
    with ad.no_grad():
        for start in range(0, len(images), 128):
            mu, _, _ = vae.encode(Tensor(images[start : start + 128]))
            out[start : start + 128] = mu.data
    return out


def stage_gsi(ws: Workspace, gt_encoder: str, stereo_encoder: str, report_name: str) -> dict:
    """GSI between GT latents (via gt_encoder) and stereo latents (via
    stereo_encoder), plus latent and 2-D projection exports."""
    cfg = ws.cfg
    inputs = ["data/gt.dtd", "data/stereo.dtd", f"vae/{gt_encoder}.ckp", f"vae/{stereo_encoder}.ckp"]
    with ws.stage(f"gsi:{report_name}", inputs) as outputs:
        vae_gt, man_gt = load_vae(ws, gt_encoder)
        vae_st, man_st = load_vae(ws, stereo_encoder)
        n = cfg["eval"]["gsi_samples"]
        z_gt = _encode_dataset(ws, vae_gt, "data/gt.dtd", man_gt["dilation"], n)
        z_st = _encode_dataset(ws, vae_st, "data/stereo.dtd", man_st["dilation"], n)
        latents = LabeledLatentSet(
            vectors=np.concatenate([z_gt, z_st]),
            labels=["gt"] * len(z_gt) + ["stereo"] * len(z_st),
        )
        value = evalkit.gsi(latents)
        coords = evalkit.project_latents(latents, dims=2)
        data_path, labels_path = evalkit.export_latents(ws.path(f"gsi/{report_name}_latents"), latents)
        with open(ws.path(f"gsi/{report_name}_proj.csv"), "w") as fh:
            fh.write("axis0,axis1,label\n")
            for (a, b), label in zip(coords, latents.labels):
                fh.write(f"{a!r},{b!r},{label}\n")
        payload = {
            "gsi": value, "n_gt": int(len(z_gt)), "n_stereo": int(len(z_st)),
            "gt_encoder": gt_encoder, "stereo_encoder": stereo_encoder, "config_hash": cfg.hash,
        }
        _atomic_json(ws.path(f"gsi/{report_name}.json"), payload)
        outputs.extend([f"gsi/{report_name}.json", f"gsi/{report_name}_proj.csv",
                        os.path.relpath(data_path, ws.root), os.path.relpath(labels_path, ws.root)])
    return payload


def stage_export_latents(ws: Workspace, vae_name: str, dataset_rel: str, out_name: str, label: str) -> dict:
    cfg = ws.cfg
    inputs = [dataset_rel, f"vae/{vae_name}.ckp"]
    with ws.stage(f"export-latents:{out_name}", inputs) as outputs:
        vae, manifest = load_vae(ws, vae_name)
        z = _encode_dataset(ws, vae, dataset_rel, manifest["dilation"], cfg["eval"]["gsi_samples"])
        latents = LabeledLatentSet(vectors=z, labels=[label] * len(z))
        data_path, labels_path = evalkit.export_latents(ws.path(f"latents/{out_name}"), latents)
        outputs.extend([os.path.relpath(data_path, ws.root), os.path.relpath(labels_path, ws.root)])
    return {"count": len(z), "paths": outputs}
