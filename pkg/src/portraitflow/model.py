"""Video-token transformer with timestep modulation and dual cross-attention.

Each block runs (1) gated self-attention over all video tokens under
shift/scale modulation from the conditioned timestep embedding, (2) an
additive audio cross-attention increment weighted lambda_audio and an
identity cross-attention increment weighted lambda_identity, both using
the block's own query projection on the running hidden state, and (3) a
gated MLP branch. Audio keys/values cover the whole clip in "clip" mode
and only each frame's own audio segment in "frame" mode.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from .alignment import AudioVideoMap
from .encoders import EncoderConfig
from .motion import condition_timestep, init_motion_params, motion_embed
from .numerics import RngState, Tensor, attention, concat, layer_norm, silu

TIME_SCALE = 1000.0  # t in [0,1] is stretched before the sinusoids


@dataclass(frozen=True)
class DiTConfig:
    depth: int = 4
    width: int = 64
    heads: int = 4
    head_dim: int = 16
    n_id: int = 4
    lambda_audio: float = 1.0
    lambda_identity: float = 0.5
    audio_width: int = 32
    audio_tokens: int = 32
    latent_frames: int = 8
    latent_h: int = 4
    latent_w: int = 4
    latent_width: int = 192
    ref_channels: int = 192
    id_feat_width: int = 16
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.width != self.heads * self.head_dim:
            raise ValueError(
                f"width {self.width} != heads {self.heads} x head_dim {self.head_dim}")
        if self.lambda_audio < 0 or self.lambda_identity < 0:
            raise ValueError("conditioning weights must be nonnegative")

    @property
    def video_tokens(self) -> int:
        return self.latent_frames * self.latent_h * self.latent_w

    @property
    def mlp_width(self) -> int:
        return self.width * self.mlp_ratio

    @staticmethod
    def for_encoders(enc: EncoderConfig, **overrides) -> "DiTConfig":
        base = DiTConfig(
            audio_width=enc.audio_width,
            audio_tokens=enc.audio_tokens,
            latent_frames=enc.latent_frames,
            latent_h=enc.latent_h,
            latent_w=enc.latent_w,
            latent_width=enc.latent_width,
            ref_channels=enc.latent_width,
            id_feat_width=enc.id_feat_width,
        )
        return replace(base, **overrides) if overrides else base


@dataclass
class ModulationParams:
    """Per-block shift/scale/gate pairs, each [B x width]."""

    shift1: Tensor
    scale1: Tensor
    gate1: Tensor
    shift2: Tensor
    scale2: Tensor
    gate2: Tensor


@dataclass
class ConditioningBundle:
    """Everything the backbone is conditioned on, batch-shaped.

    audio: [B x l x c_a]; identity: [B? x n_id x c]; motion: [B x 2];
    reference: [B x N x c_ref] (reference-frame latent repeated along f).
    The null embeddings are learned parameters, carried here so dropout
    and guidance can swap them in without reaching into the param dict.
    """

    audio: Tensor
    identity: Tensor
    motion: Tensor
    reference: Tensor
    mode: str
    mapping: AudioVideoMap
    null_audio: Tensor
    null_identity: Tensor

    def __post_init__(self):
        if self.mode not in ("clip", "frame"):
            raise ValueError(f"unknown audio scoping mode {self.mode!r}")

    def with_null_audio(self) -> "ConditioningBundle":
        nulled = self.audio * 0.0 + self.null_audio
        return replace(self, audio=nulled)


# ----------------------------------------------------------------------
# parameters

def init_model_params(config: DiTConfig, rng: RngState,
                      scale: float = 0.02) -> Dict[str, Tensor]:
    """All trainable tensors, flat-named. Modulation heads, the output
    projection, cross-attention output projections and the motion
    expansion layer start at zero so the network begins as (almost) the
    identity map with zero velocity output."""
    c, ca, cm = config.width, config.audio_width, config.mlp_width

    def dense(name, shape):
        return Tensor(rng.normal("model", name, size=shape) * scale, requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    params: Dict[str, Tensor] = {
        "in_proj.w": dense("in_proj.w", (config.latent_width + config.ref_channels, c)),
        "in_proj.b": zeros(c),
        "pos_video": dense("pos_video", (config.video_tokens, c)),
        "pos_audio": dense("pos_audio", (config.audio_tokens, ca)),
        "null_audio": dense("null_audio", (1, ca)),
        "null_identity": dense("null_identity", (1, c)),
        "t_mlp1.w": dense("t_mlp1.w", (c, c)), "t_mlp1.b": zeros(c),
        "t_mlp2.w": dense("t_mlp2.w", (c, c)), "t_mlp2.b": zeros(c),
        "out_proj.w": zeros((c, config.latent_width)),
        "out_proj.b": zeros(config.latent_width),
        "id.queries": dense("id.queries", (config.n_id, c)),
        "id.wk": dense("id.wk", (config.id_feat_width, c)), "id.wk_b": zeros(c),
        "id.wv": dense("id.wv", (config.id_feat_width, c)), "id.wv_b": zeros(c),
        "id.wo": dense("id.wo", (c, c)), "id.wo_b": zeros(c),
    }
    params.update(init_motion_params(c, rng, scale=scale))
    for i in range(config.depth):
        b = f"block{i}."
        params[b + "mod.w"] = zeros((c, 6 * c))
        params[b + "mod.b"] = zeros(6 * c)
        for proj in ("wq", "wk", "wv"):
            params[b + f"attn.{proj}"] = dense(b + f"attn.{proj}", (c, c))
            params[b + f"attn.{proj}_b"] = zeros(c)
        params[b + "attn.wo"] = dense(b + "attn.wo", (c, c))
        params[b + "attn.wo_b"] = zeros(c)
        params[b + "xa.wk"] = dense(b + "xa.wk", (ca, c))
        params[b + "xa.wk_b"] = zeros(c)
        params[b + "xa.wv"] = dense(b + "xa.wv", (ca, c))
        params[b + "xa.wv_b"] = zeros(c)
        params[b + "xa.wo"] = zeros((c, c))
        params[b + "xa.wo_b"] = zeros(c)
        params[b + "xid.wk"] = dense(b + "xid.wk", (c, c))
        params[b + "xid.wk_b"] = zeros(c)
        params[b + "xid.wv"] = dense(b + "xid.wv", (c, c))
        params[b + "xid.wv_b"] = zeros(c)
        params[b + "xid.wo"] = zeros((c, c))
        params[b + "xid.wo_b"] = zeros(c)
        params[b + "mlp1.w"] = dense(b + "mlp1.w", (c, cm))
        params[b + "mlp1.b"] = zeros(cm)
        params[b + "mlp2.w"] = dense(b + "mlp2.w", (cm, c))
        params[b + "mlp2.b"] = zeros(c)
    return params


def param_count(config: DiTConfig) -> int:
    """Closed-form trainable parameter count; guards architecture drift."""
    c, ca, cm = config.width, config.audio_width, config.mlp_width
    n = 0
    n += (config.latent_width + config.ref_channels) * c + c        # in_proj
    n += config.video_tokens * c + config.audio_tokens * ca         # positions
    n += ca + c                                                     # null embeddings
    n += 2 * (c * c + c)                                            # timestep MLP
    n += c * config.latent_width + config.latent_width              # out_proj
    n += config.n_id * c + 2 * (config.id_feat_width * c + c) + c * c + c   # id encoder head
    n += (2 * c + c) + (c * c + c) + 2 * (c * c + c) + (c * 4 * c + 4 * c)  # motion net
    per_block = (c * 6 * c + 6 * c)                                 # modulation head
    per_block += 4 * (c * c + c)                                    # self-attention
    per_block += 2 * (ca * c + c) + (c * c + c)                     # audio cross
    per_block += 3 * (c * c + c)                                    # identity cross
    per_block += c * cm + cm + cm * c + c                           # mlp
    n += config.depth * per_block
    return n


# ----------------------------------------------------------------------
# forward pieces

def sinusoidal_features(t: np.ndarray, width: int) -> np.ndarray:
    """Sin/cos features of the scaled timestep; injective for t in [0,1]
    at toy widths."""
    half = width // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    angles = np.asarray(t, dtype=np.float64).reshape(-1, 1) * TIME_SCALE * freqs
    feats = np.concatenate([np.cos(angles), np.sin(angles)], axis=1)
    if width % 2:
        feats = np.concatenate([feats, np.zeros((feats.shape[0], 1))], axis=1)
    return feats


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    """x * (1 + scale) + shift with [B x c] parameters over [B x N x c]."""
    one = Tensor(np.ones((), dtype=x.data.dtype))
    return x * (one + scale.reshape(scale.shape[0], 1, scale.shape[-1])) \
        + shift.reshape(shift.shape[0], 1, shift.shape[-1])


def timestep_embedding(t, motion: Tensor, params: Dict[str, Tensor],
                       config: DiTConfig) -> Tuple[Tensor, List[ModulationParams]]:
    """Conditioned timestep embedding plus the six per-block modulation
    vectors. `t` is a scalar or a length-B array of values in [0, 1]."""
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any((t_arr < 0.0) | (t_arr > 1.0)):
        raise ValueError(f"timestep values must lie in [0, 1], got {t_arr}")
    feats = Tensor(sinusoidal_features(t_arr, config.width))
    h = silu(feats @ params["t_mlp1.w"] + params["t_mlp1.b"])
    t_embed = h @ params["t_mlp2.w"] + params["t_mlp2.b"]

    motion = Tensor._wrap(motion)
    m = motion_embed(motion if motion.ndim == 2 else motion.reshape(1, 2), params)
    cond = condition_timestep(t_embed, m)

    gate_in = silu(cond)
    c = config.width
    mods = []
    for i in range(config.depth):
        six = gate_in @ params[f"block{i}.mod.w"] + params[f"block{i}.mod.b"]
        pieces = [six.narrow(-1, j * c, c) for j in range(6)]
        mods.append(ModulationParams(*pieces))
    return cond, mods


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, c = x.shape
    return x.reshape(b, n, heads, c // heads).transpose((0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, d = x.shape
    return x.transpose((0, 2, 1, 3)).reshape(b, n, h * d)


def _ones_zeros(width: int, dtype) -> Tuple[Tensor, Tensor]:
    return Tensor(np.ones(width, dtype=dtype)), Tensor(np.zeros(width, dtype=dtype))


def cross_attention_increments(z: Tensor, bundle: ConditioningBundle,
                               params: Dict[str, Tensor], config: DiTConfig,
                               index: int) -> Tuple[Tensor, Tensor]:
    """Unit-weight audio and identity increments for block `index`,
    computed from the current hidden state with the block's shared query
    projection and no extra normalization."""
    b = f"block{index}."
    heads = config.heads
    q = _split_heads(z @ params[b + "attn.wq"] + params[b + "attn.wq_b"], heads)

    audio = bundle.audio + params["pos_audio"]
    ak = _split_heads(audio @ params[b + "xa.wk"] + params[b + "xa.wk_b"], heads)
    av = _split_heads(audio @ params[b + "xa.wv"] + params[b + "xa.wv_b"], heads)
    if bundle.mode == "frame":
        if not bundle.mapping.is_uniform():
            raise ValueError("frame mode requires equal-length audio segments")
        bsz, _, n, hd = q.shape
        f = bundle.mapping.frames
        hw = n // f
        seg = bundle.mapping.segment_lengths()[0]
        qf = q.reshape(bsz, heads, f, hw, hd)
        kf = ak.reshape(bsz, heads, f, seg, hd)
        vf = av.reshape(bsz, heads, f, seg, hd)
        att = attention(qf, kf, vf).reshape(bsz, heads, n, hd)
    else:
        att = attention(q, ak, av)
    audio_inc = _merge_heads(att) @ params[b + "xa.wo"] + params[b + "xa.wo_b"]

    ident = bundle.identity
    ik = _split_heads(ident @ params[b + "xid.wk"] + params[b + "xid.wk_b"], heads)
    iv = _split_heads(ident @ params[b + "xid.wv"] + params[b + "xid.wv_b"], heads)
    id_inc = _merge_heads(attention(q, ik, iv)) @ params[b + "xid.wo"] + params[b + "xid.wo_b"]
    return audio_inc, id_inc


def dit_block(z: Tensor, bundle: ConditioningBundle, mod: ModulationParams,
              params: Dict[str, Tensor], config: DiTConfig, index: int) -> Tensor:
    b = f"block{index}."
    heads = config.heads
    ones, zeros = _ones_zeros(config.width, z.data.dtype)

    h = modulate(layer_norm(z, ones, zeros), mod.shift1, mod.scale1)
    q = _split_heads(h @ params[b + "attn.wq"] + params[b + "attn.wq_b"], heads)
    k = _split_heads(h @ params[b + "attn.wk"] + params[b + "attn.wk_b"], heads)
    v = _split_heads(h @ params[b + "attn.wv"] + params[b + "attn.wv_b"], heads)
    sa = _merge_heads(attention(q, k, v)) @ params[b + "attn.wo"] + params[b + "attn.wo_b"]
    g1 = mod.gate1
    z = z + g1.reshape(g1.shape[0], 1, g1.shape[-1]) * sa

    audio_inc, id_inc = cross_attention_increments(z, bundle, params, config, index)
    z = z + config.lambda_audio * audio_inc + config.lambda_identity * id_inc

    h2 = modulate(layer_norm(z, ones, zeros), mod.shift2, mod.scale2)
    m = silu(h2 @ params[b + "mlp1.w"] + params[b + "mlp1.b"])
    m = m @ params[b + "mlp2.w"] + params[b + "mlp2.b"]
    g2 = mod.gate2
    return z + g2.reshape(g2.shape[0], 1, g2.shape[-1]) * m


def model_forward(z_t: Tensor, t, bundle: ConditioningBundle,
                  params: Dict[str, Tensor], config: DiTConfig) -> Tensor:
    """Velocity prediction for noisy latents. `z_t`: [B x N x c_lat] (or
    unbatched [N x c_lat]); returns the same shape. The bundle is always
    batch-shaped."""
    z_t = Tensor._wrap(z_t)
    squeeze = z_t.ndim == 2
    if squeeze:
        z_t = z_t.reshape(1, *z_t.shape)
    bsz, n, _ = z_t.shape
    if n != config.video_tokens:
        raise ValueError(f"expected {config.video_tokens} video tokens, got {n}")

    x = concat([z_t, bundle.reference], axis=-1)
    x = x @ params["in_proj.w"] + params["in_proj.b"]
    x = x + params["pos_video"]

    _, mods = timestep_embedding(t, bundle.motion, params, config)
    for i in range(config.depth):
        x = dit_block(x, bundle, mods[i], params, config, i)

    ones, zeros = _ones_zeros(config.width, x.data.dtype)
    x = layer_norm(x, ones, zeros)
    out = x @ params["out_proj.w"] + params["out_proj.b"]
    return out.reshape(n, config.latent_width) if squeeze else out
