"""Hybrid-conditioned latent denoiser, stage-2 objective and DDIM synthesis."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import NumericalError, StateError
from .fourier import HfeConfig, extract_high_frequency
from .grid import RngStream
from .nn import ChannelConcat, Conv2d, GroupNorm, Module, ResBlock, SiLU, TimeMLP, Upsample2x, sinusoidal_embedding
from .schedule import NoiseSchedule, ddim_step, q_sample
from .ufe import LATENT_CHANNELS, UFE, to_nchw, to_nhwc


@dataclass(frozen=True)
class DenoiserConfig:
    base_width: int = 32
    levels: int = 3
    blocks_per_level: int = 2
    temb_dim: int = 128
    groups: int = 4
    condition_channels: int = 2 * LATENT_CHANNELS

    @property
    def in_channels(self):
        return LATENT_CHANNELS + self.condition_channels

    out_channels = LATENT_CHANNELS

    def to_dict(self):
        return asdict(self)


class Denoiser(Module):
    """U-Net over [N, h, w, 4 + 8] inputs; time embedding added inside every residual block.

    Each level keeps one skip (its last block's output), concatenated back on
    the way up. The output convolution is zero-initialised.
    """

    kind = "denoiser"

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig(), rng: RngStream | None = None, dtype=np.float64):
        super().__init__()
        rng = rng or RngStream(0)
        self.cfg = cfg
        c, g, te = cfg.base_width, cfg.groups, cfg.temb_dim
        widths = [c * 2**i for i in range(cfg.levels)]
        self.time_mlp = TimeMLP(te, te, rng, dtype=dtype)
        self.concat_in = ChannelConcat()
        self.conv_in = Conv2d(cfg.in_channels, c, rng, dtype=dtype)
        self.sublayers = [self.time_mlp, self.concat_in, self.conv_in]
        self.down_levels = []
        prev = c
        for i, wdt in enumerate(widths):
            blocks = []
            for _ in range(cfg.blocks_per_level):
                blocks.append(ResBlock(prev, wdt, rng, temb_dim=te, groups=g, dtype=dtype))
                prev = wdt
            down = Conv2d(wdt, wdt, rng, stride=2, dtype=dtype) if i < cfg.levels - 1 else None
            self.down_levels.append((blocks, down))
            self.sublayers += blocks + ([down] if down else [])
        self.up_levels = []
        for i in reversed(range(cfg.levels - 1)):
            wdt = widths[i]
            up = Upsample2x()
            conv = Conv2d(prev, wdt, rng, dtype=dtype)
            cat = ChannelConcat()
            blocks = [ResBlock(2 * wdt, wdt, rng, temb_dim=te, groups=g, dtype=dtype)]
            blocks += [ResBlock(wdt, wdt, rng, temb_dim=te, groups=g, dtype=dtype) for _ in range(cfg.blocks_per_level - 1)]
            self.up_levels.append((up, conv, cat, blocks))
            self.sublayers += [up, conv, cat] + blocks
            prev = wdt
        self.norm_out = GroupNorm(prev, g, dtype=dtype)
        self.act_out = SiLU()
        self.conv_out = Conv2d(prev, LATENT_CHANNELS, rng, zero_init=True, dtype=dtype)
        self.sublayers += [self.norm_out, self.act_out, self.conv_out]

    def forward(self, z_t, t, cond):
        """Channels-last ``z_t`` [N, h, w, 4], ``cond`` [N, h, w, 8], ``t`` scalar or [N]."""
        n = z_t.shape[0]
        if cond.shape[:-1] != z_t.shape[:-1] or cond.shape[-1] != self.cfg.condition_channels:
            raise ValueError(f"condition shape {cond.shape} incompatible with latent {z_t.shape}")
        if z_t.shape[-1] != LATENT_CHANNELS:
            raise ValueError(f"expected {LATENT_CHANNELS} latent channels, got {z_t.shape[-1]}")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        temb = self.time_mlp(sinusoidal_embedding(t, self.cfg.temb_dim).astype(z_t.dtype))
        h = self.conv_in(self.concat_in(z_t, cond))
        skips = []
        for blocks, down in self.down_levels:
            for b in blocks:
                h = b(h, temb)
            skips.append(h)
            if down is not None:
                h = down(h)
        skips.pop()  # the bottom level feeds straight into the up path
        for up, conv, cat, blocks in self.up_levels:
            h = cat(conv(up(h)), skips.pop())
            for b in blocks:
                h = b(h, temb)
        return self.conv_out(self.act_out(self.norm_out(h)))

    def backward(self, dy):
        """Returns (d z_t, d cond); parameter gradients accumulate in place."""
        dh = self.norm_out.backward(self.act_out.backward(self.conv_out.backward(dy)))
        dtemb = 0.0
        dskips = []
        for up, conv, cat, blocks in reversed(self.up_levels):
            for b in reversed(blocks):
                dh, dt = b.backward(dh)
                dtemb = dtemb + dt
            dh, dskip = cat.backward(dh)
            dskips.append(dskip)
            dh = up.backward(conv.backward(dh))
        for i, (blocks, down) in reversed(list(enumerate(self.down_levels))):
            if down is not None:
                dh = down.backward(dh) + dskips.pop()
            for b in reversed(blocks):
                dh, dt = b.backward(dh)
                dtemb = dtemb + dt
        self.time_mlp.backward(dtemb)
        dz, dcond = self.concat_in.backward(self.conv_in.backward(dh))
        return dz, dcond


def build_condition(x_cbct, hfe_cfg: HfeConfig, ufe: UFE) -> np.ndarray:
    """[E(x), E(x_h)] stacked on the channel axis: [8, h, w] (or [N, 8, h, w] for batched input).

    Latents are in the diffusion model's scaled units.
    """
    x = np.asarray(x_cbct, dtype=np.float64)
    x_h = extract_high_frequency(x, hfe_cfg)
    z_x = ufe.encode_scaled(x)
    z_xh = ufe.encode_scaled(x_h)
    return np.concatenate([z_x, z_xh], axis=-3)


def predict_noise(z_t, t, condition, graph: Denoiser) -> np.ndarray:
    """Noise estimate for a [4, h, w] (or batched) latent."""
    z_t = np.asarray(z_t)
    condition = np.asarray(condition)
    single = z_t.ndim == 3
    zb = z_t[None] if single else z_t
    cb = condition[None] if single else condition
    if zb.shape[0] != cb.shape[0] or zb.shape[2:] != cb.shape[2:] or zb.shape[1] != LATENT_CHANNELS:
        raise ValueError(f"latent {z_t.shape} and condition {condition.shape} do not match")
    dtype = graph.conv_in.params["weight"].dtype
    out = to_nchw(graph.forward(to_nhwc(zb).astype(dtype), t, to_nhwc(cb).astype(dtype)))
    return out[0] if single else out


def stage2_loss(z0, t, eps, condition, graph, schedule: NoiseSchedule):
    """Mean |eps - eps_theta(q_sample(z0, t, eps), t, C)| with gradients accumulated into ``graph``.

    All latent arrays are channels-last [N, h, w, C]; ``t`` is one step per row.
    Only the denoiser's parameters receive gradients.
    """
    if eps.shape != z0.shape:
        raise ValueError(f"eps shape {eps.shape} != z0 shape {z0.shape}")
    z_t = q_sample(z0, t, schedule, eps).astype(z0.dtype)
    pred = graph.forward(z_t, t, condition)
    diff = eps - pred
    loss = float(np.mean(np.abs(diff)))
    graph.backward((-np.sign(diff) / diff.size).astype(pred.dtype))
    return loss


def train_denoiser(graph: Denoiser, z0_all, cond_all, schedule: NoiseSchedule, epochs: int, batch_size: int,
                   rng: RngStream, optimizer, lr_at=None, log=None):
    """Stage-2 training on precomputed channels-last latents; returns per-step loss records."""
    n = z0_all.shape[0]
    dtype = graph.conv_in.params["weight"].dtype
    graph.train()
    history = []
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            sel = order[start : start + batch_size]
            z0 = z0_all[sel].astype(dtype)
            t = rng.integers(1, schedule.T + 1, shape=len(sel))
            eps = rng.normal(z0.shape).astype(dtype)
            graph.zero_grad()
            loss = stage2_loss(z0, t, eps, cond_all[sel].astype(dtype), graph, schedule)
            if not np.isfinite(loss):
                raise NumericalError(f"stage-2 loss became {loss} at step {step}")
            if lr_at is not None:
                optimizer.lr = lr_at(step)
            optimizer.step(graph)
            history.append({"step": step, "epoch": epoch, "loss": loss})
            step += 1
        if log and (epoch + 1) % max(1, epochs // 10) == 0:
            recent = history[-max(1, -(-n // batch_size)) :]
            log(f"stage2 epoch {epoch + 1}/{epochs} loss={np.mean([h['loss'] for h in recent]):.4f}")
    graph.eval()
    return history


def synthesize(x_cbct, ufe: UFE, graph: Denoiser | None, schedule: NoiseSchedule, subseq, rng: RngStream,
               hfe_cfg: HfeConfig, batch_size: int = 64) -> np.ndarray:
    """CBCT [1, H, W] (or [N, 1, H, W]) in [-1, 1] to synthetic CT in [-1, 1], same shape.

    Starts from pure Gaussian latents and walks the DDIM subsequence from its
    last step down to 0. The condition is encoded once and reused at every step.
    """
    if graph is None or not ufe.trained:
        raise StateError("synthesis needs trained UFE and denoiser checkpoints")
    x = np.asarray(x_cbct, dtype=np.float64)
    single = x.ndim == 3
    xb = x[None] if single else x
    graph.eval()
    ufe.eval()
    taus = [0] + [int(v) for v in subseq]
    outs = []
    for start in range(0, xb.shape[0], batch_size):
        chunk = xb[start : start + batch_size]
        cond = build_condition(chunk, hfe_cfg, ufe)
        shape = (chunk.shape[0], LATENT_CHANNELS) + cond.shape[2:]
        z = rng.normal(shape)
        for i in range(len(taus) - 1, 0, -1):
            eps = predict_noise(z, taus[i], cond, graph).astype(np.float64)
            z = ddim_step(z, taus[i], taus[i - 1], eps, schedule)
        if not np.all(np.isfinite(z)):
            raise NumericalError("non-finite latent during sampling")
        outs.append(ufe.decode_scaled(z).astype(np.float64))
    out = np.concatenate(outs)
    return out[0] if single else out
