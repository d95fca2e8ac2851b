"""Networks and losses: depth VAE (plain and residual variants), temporal
LSTM predictor, domain discriminator, and the adversarial adaptation step.

All models expose a flat ``params`` dict of named Tensors so checkpoints are
order-stable and self-describing via a manifest. Input depth images are
normalized to [0, 1] (see depthproc.to_encoder_input) at 1 x H x W with H, W
divisible by 16.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LATENT_WIDTH = 64
TEMPORAL_WIDTH = 256
TEMPORAL_GAP = 20  # prediction interval in action steps


# ---------------------------------------------------------------------------
# parameter initialization helpers
# ---------------------------------------------------------------------------

def _he_conv(rng, c_out, c_in, kh, kw):
    scale = np.sqrt(2.0 / (c_in * kh * kw))
    return (rng.standard_normal((c_out, c_in, kh, kw)) * scale).astype(np.float32)


def _he_convt(rng, c_in, c_out, kh, kw):
    scale = np.sqrt(2.0 / (c_in * kh * kw))
    return (rng.standard_normal((c_in, c_out, kh, kw)) * scale).astype(np.float32)


def _he_affine(rng, d_in, d_out, scale=None):
    s = np.sqrt(2.0 / d_in) if scale is None else scale
    return (rng.standard_normal((d_in, d_out)) * s).astype(np.float32)


def _zeros(*shape):
    return np.zeros(shape, dtype=np.float32)


class ParamStore:
    """Named parameter registry shared by all models."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(value, requires_grad=True)
        self.params[name] = t
        return t

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValueError(f"state dict mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, t in self.params.items():
            arr = np.asarray(state[k], dtype=t.data.dtype)
            if arr.shape != t.data.shape:
                raise ValueError(f"parameter {k!r} shape {arr.shape} does not match {t.data.shape}")
            t.data = arr.copy()


# ---------------------------------------------------------------------------
# VAE
# ---------------------------------------------------------------------------

# (out_channels, stride) of the six residual blocks after the 16-channel stem
_RESNET_SCHEDULE = [(32, 2), (32, 1), (64, 2), (64, 1), (128, 2), (128, 1)]
_PLAIN_SCHEDULE = [16, 32, 64, 128]  # stride-2 conv stack of the plain variant


class VaeModel(ParamStore):
    """Depth-image VAE with a 64-dim latent.

    arch="resnet": 16-channel stem convolution followed by six pre-activation
    residual blocks (two 3x3 convolutions plus skip each), global-average
    head to mean/log-variance. arch="plain": a four-layer strided
    convolutional encoder of matching bottleneck size, the architecture used
    as the non-residual baseline. Decoders mirror their encoders with
    transposed convolutions and a sigmoid output.
    """

    def __init__(self, height: int, width: int, arch: str = "resnet", seed: int = 0, beta: float = 1e-3):
        super().__init__()
        if height % 16 or width % 16:
            raise ValueError(f"input size {height}x{width} must be divisible by 16")
        if arch not in ("resnet", "plain"):
            raise ValueError(f"unknown vae arch {arch!r}")
        self.height = height
        self.width = width
        self.arch = arch
        self.beta = beta
        self.latent = LATENT_WIDTH
        self.h0 = height // 16
        self.w0 = width // 16
        self.pretrained = False
        rng = np.random.default_rng(seed)

        if arch == "resnet":
            self.add("enc.stem.w", _he_conv(rng, 16, 1, 3, 3))
            self.add("enc.stem.b", _zeros(16))
            c_in = 16
            for i, (c_out, stride) in enumerate(_RESNET_SCHEDULE):
                self.add(f"enc.block{i}.conv1.w", _he_conv(rng, c_out, c_in, 3, 3))
                self.add(f"enc.block{i}.conv1.b", _zeros(c_out))
                self.add(f"enc.block{i}.conv2.w", _he_conv(rng, c_out, c_out, 3, 3))
                self.add(f"enc.block{i}.conv2.b", _zeros(c_out))
                if stride != 1 or c_in != c_out:
                    self.add(f"enc.block{i}.skip.w", _he_conv(rng, c_out, c_in, 1, 1))
                    self.add(f"enc.block{i}.skip.b", _zeros(c_out))
                c_in = c_out
            feat = c_in
        else:
            c_in = 1
            for i, c_out in enumerate(_PLAIN_SCHEDULE):
                self.add(f"enc.conv{i}.w", _he_conv(rng, c_out, c_in, 3, 3))
                self.add(f"enc.conv{i}.b", _zeros(c_out))
                c_in = c_out
            feat = c_in
        self.feat = feat

        self.add("enc.mu.w", _he_affine(rng, feat, self.latent, scale=0.01))
        self.add("enc.mu.b", _zeros(self.latent))
        self.add("enc.logvar.w", _he_affine(rng, feat, self.latent, scale=0.01))
        self.add("enc.logvar.b", _zeros(self.latent))

        self.add("dec.fc.w", _he_affine(rng, self.latent, feat * self.h0 * self.w0))
        self.add("dec.fc.b", _zeros(feat * self.h0 * self.w0))
        if arch == "resnet":
            c_in = feat
            for i, (c_enc, stride) in enumerate(reversed(_RESNET_SCHEDULE)):
                c_out = c_enc if stride == 1 else _up_out_channels(i)
                self.add(f"dec.block{i}.conv1.w", _he_convt(rng, c_in, c_out, 3, 3))
                self.add(f"dec.block{i}.conv1.b", _zeros(c_out))
                self.add(f"dec.block{i}.conv2.w", _he_convt(rng, c_out, c_out, 3, 3))
                self.add(f"dec.block{i}.conv2.b", _zeros(c_out))
                if stride != 1 or c_in != c_out:
                    self.add(f"dec.block{i}.skip.w", _he_convt(rng, c_in, c_out, 1, 1))
                    self.add(f"dec.block{i}.skip.b", _zeros(c_out))
                c_in = c_out
            self.add("dec.out.w", _he_convt(rng, c_in, 1, 3, 3))
            self.add("dec.out.b", _zeros(1))
        else:
            c_in = feat
            for i, c_out in enumerate([64, 32, 16]):
                self.add(f"dec.convt{i}.w", _he_convt(rng, c_in, c_out, 3, 3))
                self.add(f"dec.convt{i}.b", _zeros(c_out))
                c_in = c_out
            self.add("dec.out.w", _he_convt(rng, c_in, 1, 3, 3))
            self.add("dec.out.b", _zeros(1))

    # -- encoder ------------------------------------------------------------
    def encode_features(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4 or x.data.shape[1] != 1 or x.data.shape[2:] != (self.height, self.width):
            raise ValueError(f"expected (N, 1, {self.height}, {self.width}) input, got {x.data.shape}")
        p = self.params
        if self.arch == "resnet":
            h = ad.conv2d(x, p["enc.stem.w"], p["enc.stem.b"], stride=2, padding=1)
            c_in = 16
            for i, (c_out, stride) in enumerate(_RESNET_SCHEDULE):
                pre = ad.relu(h)
                r = ad.conv2d(pre, p[f"enc.block{i}.conv1.w"], p[f"enc.block{i}.conv1.b"], stride=stride, padding=1)
                r = ad.relu(r)
                r = ad.conv2d(r, p[f"enc.block{i}.conv2.w"], p[f"enc.block{i}.conv2.b"], stride=1, padding=1)
                if stride != 1 or c_in != c_out:
                    skip = ad.conv2d(h, p[f"enc.block{i}.skip.w"], p[f"enc.block{i}.skip.b"], stride=stride, padding=0)
                else:
                    skip = h
                h = ad.add(r, skip)
                c_in = c_out
            h = ad.relu(h)
        else:
            h = x
            for i in range(len(_PLAIN_SCHEDULE)):
                h = ad.conv2d(h, p[f"enc.conv{i}.w"], p[f"enc.conv{i}.b"], stride=2, padding=1)
                h = ad.relu(h)
        # global average pool over space
        n, c = h.data.shape[0], h.data.shape[1]
        return ad.tensor_mean(ad.reshape(h, (n, c, self.h0 * self.w0)), axis=2)

    def encode(self, x: Tensor, rng: np.random.Generator | None = None, train: bool = False):
        """Returns (mu, log_var, z); z is sampled in training, mu otherwise."""
        feats = self.encode_features(x)
        p = self.params
        mu = ad.affine(feats, p["enc.mu.w"], p["enc.mu.b"])
        log_var = ad.affine(feats, p["enc.logvar.w"], p["enc.logvar.b"])
        if train:
            if rng is None:
                raise ValueError("training-mode encode needs an rng for the reparameterization noise")
            eps = Tensor(rng.standard_normal(mu.data.shape).astype(mu.data.dtype))
            std = ad.exp(ad.mul(log_var, Tensor(np.float32(0.5))))
            z = ad.add(mu, ad.mul(std, eps))
        else:
            z = mu
        return mu, log_var, z

    # -- decoder ------------------------------------------------------------
    def decode(self, z: Tensor) -> Tensor:
        p = self.params
        h = ad.affine(z, p["dec.fc.w"], p["dec.fc.b"])
        n = h.data.shape[0]
        h = ad.reshape(h, (n, self.feat, self.h0, self.w0))
        if self.arch == "resnet":
            c_in = self.feat
            for i, (c_enc, stride) in enumerate(reversed(_RESNET_SCHEDULE)):
                c_out = c_enc if stride == 1 else _up_out_channels(i)
                s = 2 if stride == 2 else 1
                op = 1 if s == 2 else 0
                pre = ad.relu(h)
                r = ad.conv2d_transpose(pre, p[f"dec.block{i}.conv1.w"], p[f"dec.block{i}.conv1.b"], stride=s, padding=1, output_padding=op)
                r = ad.relu(r)
                r = ad.conv2d_transpose(r, p[f"dec.block{i}.conv2.w"], p[f"dec.block{i}.conv2.b"], stride=1, padding=1)
                if s != 1 or c_in != c_out:
                    skip = ad.conv2d_transpose(h, p[f"dec.block{i}.skip.w"], p[f"dec.block{i}.skip.b"], stride=s, padding=0, output_padding=op if s == 2 else 0)
                else:
                    skip = h
                h = ad.add(r, skip)
                c_in = c_out
            h = ad.relu(h)
            h = ad.conv2d_transpose(h, p["dec.out.w"], p["dec.out.b"], stride=2, padding=1, output_padding=1)
        else:
            for i in range(3):
                h = ad.conv2d_transpose(h, p[f"dec.convt{i}.w"], p[f"dec.convt{i}.b"], stride=2, padding=1, output_padding=1)
                h = ad.relu(h)
            h = ad.conv2d_transpose(h, p["dec.out.w"], p["dec.out.b"], stride=2, padding=1, output_padding=1)
        return ad.sigmoid(h)

    def encoder_parameters(self) -> list[Tensor]:
        return [t for k, t in self.params.items() if k.startswith("enc.")]

    def decoder_parameters(self) -> list[Tensor]:
        return [t for k, t in self.params.items() if k.startswith("dec.")]


def _up_out_channels(i: int) -> int:
    """Output channels of decoder up-block i (mirror of the encoder widths)."""
    # reversed stride-2 encoder blocks produced 128, 64, 32 features; going up
    # we emit 64, 32, 16 respectively; stride-1 blocks keep their width.
    mapping = {1: 64, 3: 32, 5: 16}
    return mapping[i]


def kl_divergence(mu: Tensor, log_var: Tensor) -> Tensor:
    """Mean over the batch of KL(q(z|x) || N(0, I)), closed form."""
    one = Tensor(np.float32(1.0))
    term = ad.sub(ad.add(one, log_var), ad.add(ad.mul(mu, mu), ad.exp(log_var)))
    per_sample = ad.mul(ad.tensor_sum(term, axis=1), Tensor(np.float32(-0.5)))
    return ad.tensor_mean(per_sample)


def vae_loss(vae: VaeModel, batch: Tensor, rng: np.random.Generator | None = None, train: bool = True,
             domain: Tensor | None = None, gamma: float = 0.0):
    """Total, reconstruction, and KL losses per the combined objective.

    total = recon + beta * kl, plus gamma * domain when a domain loss tensor
    is supplied during adaptation.
    """
    mu, log_var, z = vae.encode(batch, rng=rng, train=train)
    recon = ad.mse(vae.decode(z), batch)
    kl = kl_divergence(mu, log_var)
    total = ad.add(recon, ad.mul(kl, Tensor(np.float32(vae.beta))))
    if domain is not None:
        total = ad.add(total, ad.mul(domain, Tensor(np.float32(gamma))))
    return total, recon, kl


# ---------------------------------------------------------------------------
# LSTM temporal predictor
# ---------------------------------------------------------------------------

class LstmPredictor(ParamStore):
    """LSTM over VAE latents producing a 256-dim temporal code.

    Two affine heads map the code to pseudo-latents that the frozen VAE
    decoder turns into the depth images T steps back and now.
    """

    def __init__(self, seed: int = 0, input_width: int = LATENT_WIDTH, hidden: int = TEMPORAL_WIDTH, gap: int = TEMPORAL_GAP):
        super().__init__()
        self.hidden = hidden
        self.gap = gap
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(hidden)
        self.add("lstm.w_x", (rng.standard_normal((input_width, 4 * hidden)) * scale).astype(np.float32))
        self.add("lstm.w_h", (rng.standard_normal((hidden, 4 * hidden)) * scale).astype(np.float32))
        self.add("lstm.b", _zeros(4 * hidden))
        self.add("head_prev.w", _he_affine(rng, hidden, LATENT_WIDTH, scale=0.01))
        self.add("head_prev.b", _zeros(LATENT_WIDTH))
        self.add("head_curr.w", _he_affine(rng, hidden, LATENT_WIDTH, scale=0.01))
        self.add("head_curr.b", _zeros(LATENT_WIDTH))

    def init_state(self, batch: int, dtype=np.float32):
        return (Tensor(np.zeros((batch, self.hidden), dtype=dtype)),
                Tensor(np.zeros((batch, self.hidden), dtype=dtype)))

    def step(self, z: Tensor, state):
        h, c = state
        h_new, c_new = ad.lstm_cell(z, h, c, self.params["lstm.w_x"], self.params["lstm.w_h"], self.params["lstm.b"])
        return h_new, (h_new, c_new)

    def run(self, z_seq: list[Tensor]):
        """Feed a latent sequence; returns the final 256-dim temporal code."""
        state = self.init_state(z_seq[0].data.shape[0], dtype=z_seq[0].data.dtype)
        out = None
        for z in z_seq:
            out, state = self.step(z, state)
        return out

    def decode_heads(self, code: Tensor):
        p = self.params
        prev = ad.affine(code, p["head_prev.w"], p["head_prev.b"])
        curr = ad.affine(code, p["head_curr.w"], p["head_curr.b"])
        return prev, curr


def lstm_loss(predictor: LstmPredictor, vae: VaeModel, z_seq: list[Tensor], target_prev: Tensor, target_curr: Tensor) -> Tensor:
    """Sum of the two reconstruction MSEs (previous and current images).

    z_seq must cover at least gap + 1 steps so the "previous" target lies
    inside the window the LSTM has seen.
    """
    if len(z_seq) < predictor.gap + 1:
        raise ValueError(f"need at least {predictor.gap + 1} latents, got {len(z_seq)}")
    code = predictor.run(z_seq)
    lat_prev, lat_curr = predictor.decode_heads(code)
    loss_prev = ad.mse(vae.decode(lat_prev), target_prev)
    loss_curr = ad.mse(vae.decode(lat_curr), target_curr)
    return ad.add(loss_prev, loss_curr)


# ---------------------------------------------------------------------------
# domain discriminator and adaptation
# ---------------------------------------------------------------------------

class Discriminator(ParamStore):
    """Two fully connected layers then log-softmax over (ground-truth, stereo)."""

    GT_CLASS = 0
    STEREO_CLASS = 1

    def __init__(self, seed: int = 0, width: int = 64):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.add("fc1.w", _he_affine(rng, LATENT_WIDTH, width))
        self.add("fc1.b", _zeros(width))
        self.add("fc2.w", _he_affine(rng, width, 2))
        self.add("fc2.b", _zeros(2))

    def log_probs(self, z: Tensor) -> Tensor:
        if z.data.shape[-1] != LATENT_WIDTH:
            raise ValueError(f"discriminator expects width-{LATENT_WIDTH} latents, got {z.data.shape}")
        h = ad.relu(ad.affine(z, self.params["fc1.w"], self.params["fc1.b"]))
        return ad.log_softmax(ad.affine(h, self.params["fc2.w"], self.params["fc2.b"]), axis=-1)

    def gt_probability(self, z: np.ndarray) -> np.ndarray:
        lp = self.log_probs(Tensor(z))
        return np.exp(lp.data[:, self.GT_CLASS])


def domain_loss(disc: Discriminator, z_gt: Tensor, z_stereo: Tensor) -> Tensor:
    """Binary cross-entropy of the domain classifier, log-domain stabilized.

    -E[log D(z_gt)] - E[log(1 - D(z_stereo))] with D the ground-truth-class
    probability; log(1 - D) is exactly the stereo-class log-probability.
    """
    if z_gt.data.size == 0 or z_stereo.data.size == 0:
        raise ValueError("domain_loss needs non-empty batches")
    lp_gt = disc.log_probs(z_gt)
    lp_st = disc.log_probs(z_stereo)
    loss_gt = ad.tensor_mean(ad.narrow(lp_gt, 1, Discriminator.GT_CLASS, 1))
    loss_st = ad.tensor_mean(ad.narrow(lp_st, 1, Discriminator.STEREO_CLASS, 1))
    return ad.mul(ad.add(loss_gt, loss_st), Tensor(np.float32(-1.0)))


@dataclass
class AdaptationParams:
    """Hyperparameters of the adversarial encoder refinement."""

    lambda_grl: float = 1.0
    gamma: float = 0.5
    beta: float = 1e-3
    lr_vae: float = 3e-4
    lr_disc: float = 1e-3
    batch_size: int = 64
    warmup_fraction: float = 0.1

    def __post_init__(self):
        if self.lambda_grl < 0 or self.gamma < 0 or self.beta < 0:
            raise ValueError("lambda_grl, gamma, and beta must be non-negative")


def adapt_step(
    vae: VaeModel,
    disc: Discriminator,
    gt_batch: Tensor,
    stereo_batch: Tensor,
    params: AdaptationParams,
    vae_opt: ad.Adam,
    disc_opt: ad.Adam,
    rng: np.random.Generator,
    lambda_scale: float = 1.0,
) -> dict[str, float]:
    """One adversarial update of encoder, decoder, and discriminator.

    The stereo batch is reconstructed (self-supervised) with the KL penalty;
    latents of both domains pass through the gradient-reversal node into the
    discriminator. A single backward pass then updates the discriminator to
    minimize the domain loss while the encoder receives reversed gradients
    and maximizes it. Policy and LSTM weights are never touched here.
    """
    if not vae.pretrained:
        raise ValueError("adapt_step requires a VAE initialized from pretraining")
    lam = params.lambda_grl * lambda_scale

    mu_s, logvar_s, z_s = vae.encode(stereo_batch, rng=rng, train=True)
    recon = ad.mse(vae.decode(z_s), stereo_batch)
    kl = kl_divergence(mu_s, logvar_s)

    _, _, z_g = vae.encode(gt_batch, rng=rng, train=True)
    dom = domain_loss(disc, ad.grad_reverse(z_g, lam), ad.grad_reverse(z_s, lam))

    total = ad.add(ad.add(recon, ad.mul(kl, Tensor(np.float32(params.beta)))),
                   ad.mul(dom, Tensor(np.float32(params.gamma))))

    vae_opt.zero_grad()
    disc_opt.zero_grad()
    ad.backward(total)
    vae_opt.step()
    disc_opt.step()
    return {
        "total": float(total.data),
        "recon": float(recon.data),
        "kl": float(kl.data),
        "domain": float(dom.data),
        "lambda_grl": lam,
    }
