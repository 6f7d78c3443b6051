"""Unified feature encoder / decoder: a VQ autoencoder with 8x downsampling to 4 channels."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import NumericalError, StateError
from .grid import RngStream, matmul
from .nn import Conv2d, GroupNorm, Module, ResBlock, SiLU, Tanh, Upsample2x

LATENT_CHANNELS = 4
DOWNSAMPLE = 8


@dataclass(frozen=True)
class UfeConfig:
    base_width: int = 16
    codebook_size: int = 512
    commitment: float = 0.25
    groups: int = 4
    lambda_l1: float = 1.0
    lambda_ssim: float = 0.2
    quantize_on_decode: bool = True

    downsample = DOWNSAMPLE
    latent_channels = LATENT_CHANNELS

    def __post_init__(self):
        if self.codebook_size < 2:
            raise ValueError("codebook needs at least 2 entries")
        if self.base_width < 1:
            raise ValueError("base_width must be positive")

    def to_dict(self):
        return asdict(self)


def _check_divisible(h, w):
    if h % DOWNSAMPLE or w % DOWNSAMPLE:
        raise ValueError(f"image dims ({h}, {w}) must be divisible by {DOWNSAMPLE}")


class Encoder(Module):
    kind = "encoder"

    def __init__(self, cfg: UfeConfig, rng: RngStream, dtype=np.float64):
        super().__init__()
        c = cfg.base_width
        widths = [c, 2 * c, 4 * c]
        self.conv_in = Conv2d(1, c, rng, dtype=dtype)
        self.sublayers = [self.conv_in]
        self.stages = []
        prev = c
        for wdt in widths:
            down = Conv2d(prev, wdt, rng, stride=2, dtype=dtype)
            res = ResBlock(wdt, wdt, rng, groups=cfg.groups, dtype=dtype)
            self.stages.append((down, res))
            self.sublayers += [down, res]
            prev = wdt
        self.norm_out = GroupNorm(prev, cfg.groups, dtype=dtype)
        self.act_out = SiLU()
        self.conv_out = Conv2d(prev, LATENT_CHANNELS, rng, dtype=dtype)
        self.sublayers += [self.norm_out, self.act_out, self.conv_out]

    def forward(self, x):
        h = self.conv_in(x)
        for down, res in self.stages:
            h = res(down(h))
        return self.conv_out(self.act_out(self.norm_out(h)))

    def backward(self, dy):
        dh = self.norm_out.backward(self.act_out.backward(self.conv_out.backward(dy)))
        for down, res in reversed(self.stages):
            dh, _ = res.backward(dh)
            dh = down.backward(dh)
        return self.conv_in.backward(dh)


class Decoder(Module):
    kind = "decoder"

    def __init__(self, cfg: UfeConfig, rng: RngStream, dtype=np.float64):
        super().__init__()
        c = cfg.base_width
        self.conv_in = Conv2d(LATENT_CHANNELS, 4 * c, rng, dtype=dtype)
        self.res_in = ResBlock(4 * c, 4 * c, rng, groups=cfg.groups, dtype=dtype)
        self.sublayers = [self.conv_in, self.res_in]
        self.stages = []
        prev = 4 * c
        # mirror of the encoder: no residual block at full resolution
        for wdt, with_res in [(2 * c, True), (c, True), (c, False)]:
            up = Upsample2x()
            conv = Conv2d(prev, wdt, rng, dtype=dtype)
            res = ResBlock(wdt, wdt, rng, groups=cfg.groups, dtype=dtype) if with_res else None
            self.stages.append((up, conv, res))
            self.sublayers += [up, conv] + ([res] if res else [])
            prev = wdt
        self.norm_out = GroupNorm(prev, cfg.groups, dtype=dtype)
        self.act_out = SiLU()
        self.conv_out = Conv2d(prev, 1, rng, dtype=dtype)
        self.tanh = Tanh()
        self.sublayers += [self.norm_out, self.act_out, self.conv_out, self.tanh]

    def forward(self, z):
        h = self.res_in(self.conv_in(z))
        for up, conv, res in self.stages:
            h = conv(up(h))
            if res is not None:
                h = res(h)
        return self.tanh(self.conv_out(self.act_out(self.norm_out(h))))

    def backward(self, dy):
        dh = self.norm_out.backward(self.act_out.backward(self.conv_out.backward(self.tanh.backward(dy))))
        for up, conv, res in reversed(self.stages):
            if res is not None:
                dh, _ = res.backward(dh)
            dh = up.backward(conv.backward(dh))
        dh, _ = self.res_in.backward(dh)
        return self.conv_in.backward(dh)


class Codebook(Module):
    """K x 4 code vectors plus per-entry usage counters."""

    kind = "codebook"

    def __init__(self, size: int, rng: RngStream, dtype=np.float64):
        super().__init__()
        if size < 2:
            raise ValueError("codebook needs at least 2 entries")
        self.params["embedding"] = rng.uniform((size, LATENT_CHANNELS), -1.0 / size, 1.0 / size).astype(dtype)
        self.usage = np.zeros(size, dtype=np.int64)
        self.zero_grad()

    @property
    def size(self):
        return self.params["embedding"].shape[0]


def nearest_codes(vectors: np.ndarray, embedding: np.ndarray) -> np.ndarray:
    """Index of the L2-nearest embedding row for each row of ``vectors`` (lowest index wins ties)."""
    d = (
        np.sum(vectors**2, axis=1, keepdims=True)
        - 2.0 * matmul(vectors, embedding.T)
        + np.sum(embedding**2, axis=1)[None, :]
    )
    return np.argmin(d, axis=1)


def to_nhwc(z):
    return np.ascontiguousarray(np.moveaxis(z, -3, -1))


def to_nchw(z):
    return np.ascontiguousarray(np.moveaxis(z, -1, -3))


@dataclass
class QuantizeResult:
    z_q: np.ndarray
    indices: np.ndarray
    loss: float


def quantize_nhwc(z: np.ndarray, codebook: Codebook, commitment: float = 0.25, track_usage=False) -> QuantizeResult:
    """Channels-last quantization used inside the training loop."""
    emb = codebook.params["embedding"]
    rows = z.reshape(-1, z.shape[-1])
    idx = nearest_codes(rows.astype(np.float64), emb.astype(np.float64))
    q_rows = emb[idx]
    # codebook and commitment terms are numerically the same squared distance
    loss = (1.0 + commitment) * float(np.mean((rows - q_rows) ** 2))
    if track_usage:
        codebook.usage += np.bincount(idx, minlength=codebook.size)
    return QuantizeResult(q_rows.reshape(z.shape).astype(z.dtype), idx.reshape(z.shape[:-1]), loss)


def quantize(z_cont: np.ndarray, codebook: Codebook, commitment: float = 0.25) -> QuantizeResult:
    """Snap each spatial position of a [4, h, w] (or [N, 4, h, w]) latent to its nearest code.

    The loss is mean ||sg(z) - z_q||^2 + commitment * mean ||z - sg(z_q)||^2.
    """
    res = quantize_nhwc(to_nhwc(np.asarray(z_cont)), codebook, commitment)
    return QuantizeResult(to_nchw(res.z_q), res.indices, res.loss)


def quantize_backward(z, z_q, indices, codebook: Codebook, commitment, dz_q):
    """Gradients of the quantization step for channels-last ``z``.

    Straight-through: ``dz_q`` (arriving at the quantized latent) passes to the
    encoder unchanged, plus the commitment term; the codebook receives the
    gradient of its own squared-distance term.
    """
    m = z.size
    diff = z - z_q
    dz = dz_q + 2.0 * commitment * diff / m
    g = np.zeros_like(codebook.params["embedding"])
    np.add.at(g, indices.reshape(-1), (-2.0 / m) * diff.reshape(-1, diff.shape[-1]))
    codebook._accumulate("embedding", g)
    return dz


def _global_ssim_and_grad(a, b, c1, c2):
    """Global-statistics SSIM per image over the last three axes and its gradient w.r.t. ``b``."""
    axes = tuple(range(1, a.ndim))
    n = np.prod(a.shape[1:])
    mu_a = a.mean(axis=axes, keepdims=True)
    mu_b = b.mean(axis=axes, keepdims=True)
    da, db = a - mu_a, b - mu_b
    var_a = (da**2).mean(axis=axes, keepdims=True)
    var_b = (db**2).mean(axis=axes, keepdims=True)
    cov = (da * db).mean(axis=axes, keepdims=True)
    a1 = 2 * mu_a * mu_b + c1
    a2 = 2 * cov + c2
    b1 = mu_a**2 + mu_b**2 + c1
    b2 = var_a + var_b + c2
    s = a1 * a2 / (b1 * b2)
    grad = (2.0 / n) * (mu_a * a2 / (b1 * b2) + a1 * da / (b1 * b2) - s * (mu_b / b1 + db / b2))
    return s.reshape(-1), grad


# normalized intensities span [-1, 1], so the dynamic range is 2
SSIM_C1 = (0.01 * 2.0) ** 2
SSIM_C2 = (0.03 * 2.0) ** 2


def stage1_loss(x, x_rec, quant_loss, lambda_l1=1.0, lambda_ssim=0.2):
    """Reconstruction objective; returns (loss, d loss / d x_rec). Batch-averaged."""
    if x.shape != x_rec.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_rec.shape}")
    # a single [1, H, W] image is treated as a batch of one
    xb, rb = (x[None], x_rec[None]) if x.ndim == 3 else (x, x_rec)
    diff = rb - xb
    l1 = float(np.mean(np.abs(diff)))
    grad = lambda_l1 * np.sign(diff) / diff.size
    loss = lambda_l1 * l1 + quant_loss
    if lambda_ssim:
        s, gs = _global_ssim_and_grad(xb.astype(np.float64), rb.astype(np.float64), SSIM_C1, SSIM_C2)
        loss += lambda_ssim * float(np.mean(1.0 - s))
        grad = grad - lambda_ssim * gs / xb.shape[0]
    return float(loss), grad.reshape(x_rec.shape).astype(x_rec.dtype)


class UFE:
    """Encoder, codebook and decoder, plus the latent scale used by the diffusion stage."""

    def __init__(self, cfg: UfeConfig = UfeConfig(), rng: RngStream | None = None, dtype=np.float64):
        rng = rng or RngStream(0)
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng.child(0), dtype)
        self.decoder = Decoder(cfg, rng.child(1), dtype)
        self.codebook = Codebook(cfg.codebook_size, rng.child(2), dtype)
        self.latent_scale = 1.0
        self.trained = False

    @property
    def dtype(self):
        return self.codebook.params["embedding"].dtype

    def modules(self):
        return {"encoder": self.encoder, "decoder": self.decoder, "codebook": self.codebook}

    def eval(self):
        for m in self.modules().values():
            m.eval()
        return self

    def train(self):
        for m in self.modules().values():
            m.train()
        return self

    def astype(self, dtype):
        for m in self.modules().values():
            m.astype(dtype)
        return self

    def _batch(self, x, channels):
        x = np.asarray(x, dtype=self.dtype)
        single = x.ndim == 3
        xb = x[None] if single else x
        if xb.ndim != 4 or xb.shape[1] != channels:
            raise ValueError(f"expected [{channels}, H, W] or [N, {channels}, H, W], got {x.shape}")
        return xb, single

    def encode(self, image):
        """[1, H, W] (or batched [N, 1, H, W]) image in [-1, 1] to its continuous [4, H/8, W/8] latent."""
        xb, single = self._batch(image, 1)
        _check_divisible(*xb.shape[2:])
        z = to_nchw(self.encoder.forward(to_nhwc(xb)))
        return z[0] if single else z

    def quantize(self, z_cont):
        return quantize(np.asarray(z_cont, dtype=self.dtype), self.codebook, self.cfg.commitment)

    def decode(self, z_q):
        """[4, h, w] latent to a [1, 8h, 8w] image in (-1, 1)."""
        zb, single = self._batch(z_q, LATENT_CHANNELS)
        out = to_nchw(self.decoder.forward(to_nhwc(zb)))
        return out[0] if single else out

    def reconstruct(self, image):
        return self.decode(self.quantize(self.encode(image)).z_q)

    # latents seen by the diffusion model are scaled to roughly unit variance
    def encode_scaled(self, image):
        return self.encode(image) * self.latent_scale

    def decode_scaled(self, z):
        z = np.asarray(z, dtype=self.dtype) / self.latent_scale
        if self.cfg.quantize_on_decode:
            z = self.quantize(z).z_q
        return self.decode(z)

    def state_dict(self):
        out = {}
        for prefix, m in self.modules().items():
            for k, v in m.state_dict().items():
                out[f"{prefix}.{k}"] = v
        out["codebook.usage"] = self.codebook.usage.astype(np.float64)
        out["latent_scale"] = np.array([self.latent_scale])
        return out

    def load_state_dict(self, state):
        for prefix, m in self.modules().items():
            sub = {k[len(prefix) + 1 :]: v for k, v in state.items() if k.startswith(prefix + ".") and k != "codebook.usage"}
            m.load_state_dict(sub)
        if "codebook.usage" in state:
            self.codebook.usage = np.asarray(state["codebook.usage"]).astype(np.int64)
        self.latent_scale = float(np.asarray(state["latent_scale"]).reshape(-1)[0])
        self.trained = True

    def require_trained(self):
        if not self.trained:
            raise StateError("UFE has no trained checkpoint loaded")


def _reseed_dead_codes(codebook: Codebook, latents: np.ndarray, rng: RngStream) -> int:
    """Move entries unused since the last reset onto randomly chosen recent latents."""
    dead = np.flatnonzero(codebook.usage == 0)
    if dead.size:
        rows = latents.reshape(-1, latents.shape[-1])
        pick = rng.integers(0, rows.shape[0], shape=dead.size)
        jitter = 1e-3 * rng.normal((dead.size, rows.shape[1]))
        codebook.params["embedding"][dead] = (rows[pick] + jitter).astype(codebook.params["embedding"].dtype)
    codebook.usage[:] = 0
    return int(dead.size)


def cosine_lr(base_lr: float, total_steps: int, floor: float = 0.05):
    """Cosine decay from ``base_lr`` to ``floor * base_lr`` over ``total_steps``."""

    def lr_at(step):
        frac = min(step / max(total_steps - 1, 1), 1.0)
        return base_lr * (floor + (1 - floor) * 0.5 * (1 + np.cos(np.pi * frac)))

    return lr_at


def train_ufe(ufe: UFE, images: np.ndarray, epochs: int, batch_size: int, rng: RngStream, optimizer_factory, log=None, lr_at=None):
    """Stage-1 reconstruction training.

    ``images`` is [K, N, H, W] in [-1, 1]: K image kinds (CT, CBCT, high-frequency)
    for N slices. Every epoch visits each slice once with a randomly drawn kind,
    so batches mix kinds. Returns a list of per-step dicts.
    """
    k, n = images.shape[:2]
    dtype = ufe.dtype
    opts = {name: optimizer_factory() for name in ufe.modules()}
    ufe.train()
    history = []
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        kinds = rng.integers(0, k, shape=n)
        last_latents = None
        for start in range(0, n, batch_size):
            sel = order[start : start + batch_size]
            x = images[kinds[sel], sel][..., None].astype(dtype)
            for m in ufe.modules().values():
                m.zero_grad()
            z = ufe.encoder.forward(x)
            if step == 0:
                # all codes start unused, so the first batch seeds the whole codebook
                _reseed_dead_codes(ufe.codebook, z, rng)
            q = quantize_nhwc(z, ufe.codebook, ufe.cfg.commitment, track_usage=True)
            x_rec = ufe.decoder.forward(q.z_q)
            loss, g = stage1_loss(x, x_rec, q.loss, ufe.cfg.lambda_l1, ufe.cfg.lambda_ssim)
            if not np.isfinite(loss):
                raise NumericalError(f"stage-1 loss became {loss} at step {step}")
            dz_q = ufe.decoder.backward(g)
            dz = quantize_backward(z, q.z_q, q.indices, ufe.codebook, ufe.cfg.commitment, dz_q)
            ufe.encoder.backward(dz)
            for name, m in ufe.modules().items():
                if lr_at is not None:
                    opts[name].lr = lr_at(step)
                opts[name].step(m)
            l1 = float(np.mean(np.abs(x_rec - x)))
            history.append({"step": step, "epoch": epoch, "loss": loss, "l1": l1, "quant_loss": q.loss})
            last_latents = z
            step += 1
        dead = _reseed_dead_codes(ufe.codebook, last_latents, rng)
        if log:
            recent = history[-max(1, -(-n // batch_size)) :]
            log(f"stage1 epoch {epoch + 1}/{epochs} loss={np.mean([h['loss'] for h in recent]):.4f} "
                f"l1={np.mean([h['l1'] for h in recent]):.4f} reseeded={dead}")
    ufe.eval()
    ufe.trained = True
    return history


def fit_latent_scale(ufe: UFE, images: np.ndarray, batch_size: int = 64) -> float:
    """1 / std of the continuous latents of ``images`` ([N, H, W])."""
    zs = [ufe.encode(images[i : i + batch_size, None]) for i in range(0, len(images), batch_size)]
    std = float(np.std(np.concatenate(zs).astype(np.float64)))
    ufe.latent_scale = 1.0 / std if std > 0 else 1.0
    return ufe.latent_scale
