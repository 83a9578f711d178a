"""Small conditional spatio-temporal network predicting the mean velocity
u(x_t, r, t; x_m, phi, p).

Conditioning enters three ways: the masked video x_m is channel-concatenated
to x_t, the padding vector p rides along as a constant per-frame indicator
channel, and (r, t, phi) are sinusoidally embedded, summed, and added as a
per-frame bias inside each residual block. Temporal mixing is single-head
attention over the frame axis with p as a key-padding mask, so padded frames
contribute nothing to valid-frame features. The final projection is
zero-initialized: an untrained model predicts zero velocity, making the
initial one-step sample exactly the noise draw.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .seqcond import ConditioningSet

__all__ = ["ModelConfig", "Model", "timestep_embed", "count_params"]

ParameterSet = dict  # name -> Tensor

_NORM_EPS = 1e-6
_MASK_BIAS = -1e9
_EMBED_MAX_FREQ = 1000.0


@dataclass(frozen=True)
class ModelConfig:
    """Shape-defining knobs. `channels` lists the per-level widths (two
    resolution levels at desk scale; the full-scale reference uses four)."""

    channels: tuple = (16, 32)
    capacity: int = 8
    in_channels: int = 1
    embed_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        if len(self.channels) < 1:
            raise ValueError("need at least one channel level")
        if self.embed_dim % 2 != 0:
            raise ValueError("embed_dim must be even (sin/cos pairing)")


def timestep_embed(value, dim: int) -> Tensor:
    """Interleaved sin/cos embedding at geometric frequencies, injective on
    [0, 1] for dim >= 8. Accepts a float or a scalar Tensor."""
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    freqs = _EMBED_MAX_FREQ ** (np.arange(half) / max(half - 1, 1))
    if not isinstance(value, (Tensor, ad.DualTensor)):
        value = Tensor(np.asarray(float(value)))
    ang = ad.mul(ad.reshape(value, (1,)), Tensor(freqs))
    s = ad.reshape(ad.sin(ang), (half, 1))
    c = ad.reshape(ad.cos(ang), (half, 1))
    return ad.reshape(ad.concat([s, c], axis=1), (dim,))


def _avg_pool2(x):
    f, c, h, w = x.shape
    r = ad.reshape(x, (f, c, h // 2, 2, w // 2, 2))
    return ad.mul(ad.tsum(r, axis=(3, 5)), 0.25)


def _upsample2(x):
    f, c, h, w = x.shape
    r = ad.reshape(x, (f, c, h, 1, w, 1))
    return ad.reshape(ad.broadcast_to(r, (f, c, h, 2, w, 2)), (f, c, 2 * h, 2 * w))


def _rms_norm(x, gain):
    ms = ad.tmean(ad.mul(x, x), axis=1, keepdims=True)
    return ad.mul(ad.mul(x, ad.pow_scalar(ad.add(ms, _NORM_EPS), -0.5)), gain)


class Model:
    """Two-level UNet over (F, C, H, W) videos with temporal attention."""

    def __init__(self, config: ModelConfig):
        self.config = config

    # -- parameter construction ------------------------------------------

    def init_params(self, rng: np.random.Generator) -> ParameterSet:
        cfg = self.config
        c0, c1 = cfg.channels[0], cfg.channels[-1]
        cin = 2 * cfg.in_channels + 1
        d = cfg.embed_dim
        p: ParameterSet = {}

        def conv(name, cout, cin_, k):
            fan_in = cin_ * k * k
            p[name] = ad.parameter(
                rng.standard_normal((cout, cin_, k, k)) / np.sqrt(fan_in)
            )
            p[f"{name}_b"] = ad.parameter(np.zeros((cout, 1, 1)))

        def dense(name, din, dout):
            p[name] = ad.parameter(rng.standard_normal((din, dout)) / np.sqrt(din))

        conv("conv_in", c0, cin, 3)
        dense("emb_w1", d, d)
        p["emb_b1"] = ad.parameter(np.zeros(d))
        dense("emb_w2", d, d)
        p["emb_b2"] = ad.parameter(np.zeros(d))
        p["phi_null"] = ad.parameter(rng.standard_normal(d) * 0.02)

        for name, ch in (("enc", c0), ("mid_a", c1), ("mid_b", c1), ("dec", c0)):
            conv(f"{name}_conv1", ch, ch, 3)
            conv(f"{name}_conv2", ch, ch, 3)
            p[f"{name}_norm1"] = ad.parameter(np.ones((ch, 1, 1)))
            p[f"{name}_norm2"] = ad.parameter(np.ones((ch, 1, 1)))
            # film projection emits a scale and a shift per channel
            dense(f"{name}_embproj", d, 2 * ch)

        for name, ch in (("tenc", c0), ("tmid", c1), ("tdec", c0)):
            p[f"{name}_norm"] = ad.parameter(np.ones((ch, 1, 1)))
            for m in ("q", "k", "v", "o"):
                dense(f"{name}_w{m}", ch, ch)

        conv("down", c1, c0, 1)
        conv("up", c0, c1, 1)
        p["out_norm"] = ad.parameter(np.ones((c0, 1, 1)))
        p["conv_out"] = ad.parameter(np.zeros((cfg.in_channels, c0, 3, 3)))
        p["conv_out_b"] = ad.parameter(np.zeros((cfg.in_channels, 1, 1)))
        return p

    # -- forward ----------------------------------------------------------

    def _embedding(self, params, r, t, phi):
        d = self.config.embed_dim
        emb = ad.add(timestep_embed(r, d), timestep_embed(t, d))
        if phi is None:
            emb = ad.add(emb, params["phi_null"])
        else:
            emb = ad.add(emb, timestep_embed(phi, d))
        e1 = ad.reshape(emb, (1, d))
        h = ad.silu(ad.add(ad.matmul(e1, params["emb_w1"]), params["emb_b1"]))
        h = ad.add(ad.matmul(h, params["emb_w2"]), params["emb_b2"])
        return h  # (1, d)

    def _conv(self, params, name, h):
        return ad.add(ad.conv2d(h, params[name]), params[f"{name}_b"])

    def _res_block(self, params, name, h, emb):
        ch = params[f"{name}_norm1"].shape[0]
        a = ad.silu(_rms_norm(h, params[f"{name}_norm1"]))
        a = self._conv(params, f"{name}_conv1", a)
        film = ad.matmul(emb, params[f"{name}_embproj"])  # (1, 2*ch)
        scale = ad.reshape(film[:, :ch], (1, ch, 1, 1))
        shift = ad.reshape(film[:, ch:], (1, ch, 1, 1))
        a = ad.add(ad.mul(a, ad.add(scale, 1.0)), shift)
        a = ad.silu(_rms_norm(a, params[f"{name}_norm2"]))
        a = self._conv(params, f"{name}_conv2", a)
        return ad.add(h, a)

    def _temporal_attention(self, params, name, h, key_bias):
        f, c, hh, ww = h.shape
        a = _rms_norm(h, params[f"{name}_norm"])
        a = ad.transpose(ad.reshape(a, (f, c, hh * ww)), (2, 0, 1))  # (HW, F, C)
        q = ad.matmul(a, params[f"{name}_wq"])
        k = ad.matmul(a, params[f"{name}_wk"])
        v = ad.matmul(a, params[f"{name}_wv"])
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(c))
        scores = ad.add(scores, key_bias)  # padded keys get a large negative bias
        attn = ad.softmax_lastaxis(scores)
        o = ad.matmul(ad.matmul(attn, v), params[f"{name}_wo"])
        o = ad.reshape(ad.transpose(o, (1, 2, 0)), (f, c, hh, ww))
        return ad.add(h, o)

    def forward(self, params: ParameterSet, x_t, r, t, c: ConditioningSet):
        """Predict the mean velocity for one video. r and t may be floats or
        scalar Tensors (the latter lets a JVP differentiate through them)."""
        cfg = self.config
        prim = x_t.primal if isinstance(x_t, ad.DualTensor) else x_t
        if prim.ndim != 4 or prim.shape[1] != cfg.in_channels:
            raise ad.ShapeError(f"x_t has shape {prim.shape}")
        f = prim.shape[0]
        if c.p.shape != (f,):
            raise ad.ShapeError("conditioning p length does not match x_t frames")

        p_chan = np.broadcast_to(
            c.p.astype(np.float64).reshape(f, 1, 1, 1),
            (f, 1) + prim.shape[2:],
        )
        key_bias = Tensor(np.where(c.p == 1, _MASK_BIAS, 0.0).reshape(1, 1, f))
        emb = self._embedding(params, r, t, c.phi)

        h = ad.concat([x_t, Tensor(c.x_m), Tensor(p_chan.copy())], axis=1)
        h = self._conv(params, "conv_in", h)

        h = self._res_block(params, "enc", h, emb)
        h = self._temporal_attention(params, "tenc", h, key_bias)
        skip = h

        h = self._conv(params, "down", _avg_pool2(h))
        h = self._res_block(params, "mid_a", h, emb)
        h = self._temporal_attention(params, "tmid", h, key_bias)
        h = self._res_block(params, "mid_b", h, emb)

        h = self._conv(params, "up", _upsample2(h))
        h = ad.add(h, skip)
        h = self._res_block(params, "dec", h, emb)
        h = self._temporal_attention(params, "tdec", h, key_bias)

        h = ad.silu(_rms_norm(h, params["out_norm"]))
        return self._conv(params, "conv_out", h)


def count_params(params: ParameterSet) -> int:
    return sum(p.data.size for p in params.values())
