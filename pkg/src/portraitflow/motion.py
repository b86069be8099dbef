"""Motion-intensity coefficients and their conditioning network.

A coefficient is the temporal variance of a keypoint sequence, min/max
normalized over the training corpus into [0, 1]. The conditioning
network maps (facial, body) coefficients to a width-c embedding that is
added onto the timestep embedding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import numpy as np

from .numerics import RngState, Tensor, silu


@dataclass(frozen=True)
class MotionNorm:
    """Corpus min/max of the raw variance statistic."""

    min: float
    max: float

    def __post_init__(self):
        if not self.max > self.min:
            raise ValueError(f"norm.max ({self.max}) must exceed norm.min ({self.min})")


@dataclass(frozen=True)
class MotionCoefficients:
    facial: float  # expression intensity in [0, 1]
    body: float    # body motion intensity in [0, 1]

    def __post_init__(self):
        for name, value in (("facial", self.facial), ("body", self.body)):
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} coefficient {value} outside [0, 1]")

    def as_array(self) -> np.ndarray:
        return np.array([self.facial, self.body], dtype=np.float64)


def raw_motion_variance(seq: np.ndarray) -> float:
    """Mean over keypoints and coordinates of the temporal (population)
    variance of an [F x K x 2] sequence."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 3 or seq.shape[-1] != 2:
        raise ValueError(f"expected [F,K,2] sequence, got {seq.shape}")
    if seq.shape[0] < 2:
        raise ValueError(f"need at least 2 frames to measure motion, got {seq.shape[0]}")
    return float(seq.var(axis=0).mean())


def compute_coefficient(seq: np.ndarray, norm: MotionNorm) -> float:
    """Normalized motion intensity: clamp((var - min) / (max - min), 0, 1)."""
    raw = raw_motion_variance(seq)
    return float(np.clip((raw - norm.min) / (norm.max - norm.min), 0.0, 1.0))


# ----------------------------------------------------------------------
# conditioning network

EXPANSION = 4  # length-axis expansion pooled back down to one vector


def init_motion_params(width: int, rng: RngState, scale: float = 0.02,
                       zero_final: bool = True) -> Dict[str, Tensor]:
    """Parameters for the conditioning network; the expansion layer is
    zero-initialized by default so the embedding starts at zero."""

    def dense(name, shape):
        return Tensor(rng.normal("motion", name, size=shape) * scale, requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    params = {
        "motion.mlp1.w": dense("mlp1.w", (2, width)),
        "motion.mlp1.b": zeros(width),
        "motion.mlp2.w": dense("mlp2.w", (width, width)),
        "motion.mlp2.b": zeros(width),
        "motion.res1.w": dense("res1.w", (width, width)),
        "motion.res1.b": zeros(width),
        "motion.res2.w": dense("res2.w", (width, width)),
        "motion.res2.b": zeros(width),
        "motion.expand.w": (zeros((width, EXPANSION * width)) if zero_final
                            else dense("expand.w", (width, EXPANSION * width))),
        "motion.expand.b": zeros(EXPANSION * width),
    }
    return params


def motion_embed(omega: Tensor, params: Dict[str, Tensor]) -> Tensor:
    """(facial, body) -> width-c embedding.

    Two dense layers, one residual block, then mean pooling over a
    learned length-4 expansion. `omega` is [2] or [B x 2].
    """
    omega = Tensor._wrap(omega)
    squeeze = omega.ndim == 1
    x = omega.reshape(1, 2) if squeeze else omega
    h = silu(x @ params["motion.mlp1.w"] + params["motion.mlp1.b"])
    h = h @ params["motion.mlp2.w"] + params["motion.mlp2.b"]
    r = silu(h @ params["motion.res1.w"] + params["motion.res1.b"])
    h = h + (r @ params["motion.res2.w"] + params["motion.res2.b"])
    width = params["motion.mlp2.w"].shape[-1]
    expanded = h @ params["motion.expand.w"] + params["motion.expand.b"]
    batch = expanded.shape[0]
    pooled = expanded.reshape(batch, EXPANSION, width).mean(axis=1)
    return pooled.reshape(width) if squeeze else pooled


def condition_timestep(t_embed: Tensor, m_embed: Tensor) -> Tensor:
    """Add the motion embedding onto the timestep embedding."""
    t_embed, m_embed = Tensor._wrap(t_embed), Tensor._wrap(m_embed)
    if t_embed.shape[-1] != m_embed.shape[-1]:
        raise ValueError(
            f"width mismatch: timestep {t_embed.shape} vs motion {m_embed.shape}")
    return t_embed + m_embed
