"""Noise schedule, forward noising, deterministic reverse steps and pose
aggregation for per-keypoint pose diffusion.

Timesteps are 1-indexed: ``t = 1 .. T`` are noisy states and ``t = 0`` is
the clean pose (``alpha_bar_0 = 1``).  Schedule arrays are stored 0-indexed,
so ``alpha_bar[t - 1]`` belongs to step ``t``.

A pose row is ``[s_x, s_y, cos(theta), sin(theta)]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import BadT, BadTimestep, EmptyPiece, ShapeMismatch, UntrainedModel

COSINE_OFFSET = 0.008
MAX_BETA = 0.999


@dataclass
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def alpha_bar_at(self, t: int) -> float:
        if t < 0 or t > self.T:
            raise BadTimestep(f"t={t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])


def cosine_schedule(T: int, s: float = COSINE_OFFSET) -> NoiseSchedule:
    if T < 2:
        raise BadT(f"need T >= 2, got {T}")

    def f(u):
        return np.cos((u + s) / (1.0 + s) * np.pi / 2.0) ** 2

    steps = np.arange(T + 1, dtype=np.float64) / T
    ab = f(steps) / f(0.0)
    beta = np.clip(1.0 - ab[1:] / ab[:-1], 0.0, MAX_BETA)
    alpha = 1.0 - beta
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def forward_noise(x0, t: int, schedule: NoiseSchedule, noise):
    """``x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``."""
    if tuple(noise.shape) != tuple(x0.shape):
        raise ShapeMismatch(f"noise {tuple(noise.shape)} vs x0 {tuple(x0.shape)}")
    ab = schedule.alpha_bar_at(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


def forward_noise_batch(x0: torch.Tensor, t: torch.Tensor, schedule: NoiseSchedule, noise: torch.Tensor):
    """Row-wise variant of :func:`forward_noise`, ``t`` holds one step per row."""
    if noise.shape != x0.shape or t.shape[0] != x0.shape[0]:
        raise ShapeMismatch("x0, noise and t must agree on rows")
    ab_full = torch.as_tensor(np.concatenate([[1.0], schedule.alpha_bar]), dtype=x0.dtype)
    ab = ab_full[t].unsqueeze(-1)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * noise


def predicted_noise(x_t, x0_hat, t: int, schedule: NoiseSchedule):
    ab = schedule.alpha_bar_at(t)
    return (x_t - math.sqrt(ab) * x0_hat) / math.sqrt(1.0 - ab)


def denoise_step(x_t, x0_hat, t: int, schedule: NoiseSchedule, t_prev: int | None = None):
    """One deterministic reverse step (no stochastic term).

    The denoiser predicts ``x0``; it is converted to a noise estimate with
    the schedule identity and plugged into the reverse update

        x_prev = (x_t - (1 - a) / sqrt(1 - ab_t) * eps) / sqrt(a)

    where ``a = ab_t / ab_prev`` (this is ``alpha_t`` for a unit stride).
    """
    if tuple(x_t.shape) != tuple(x0_hat.shape):
        raise ShapeMismatch(f"x_t {tuple(x_t.shape)} vs x0_hat {tuple(x0_hat.shape)}")
    if t < 1 or t > schedule.T:
        raise BadTimestep(f"t={t} outside [1, {schedule.T}]")
    t_prev = t - 1 if t_prev is None else t_prev
    if not 0 <= t_prev < t:
        raise BadTimestep(f"t_prev={t_prev} must lie in [0, {t})")
    ab_t = schedule.alpha_bar_at(t)
    a = ab_t / schedule.alpha_bar_at(t_prev)
    eps = predicted_noise(x_t, x0_hat, t, schedule)
    return (x_t - (1.0 - a) / math.sqrt(1.0 - ab_t) * eps) / math.sqrt(a)


def timestep_sequence(T: int, steps: int) -> list[int]:
    """Descending strided timesteps from ``T`` down to 1."""
    if steps < 1 or steps > T:
        raise BadTimestep(f"steps={steps} outside [1, {T}]")
    seq = np.unique(np.round(np.linspace(1, T, steps)).astype(int))[::-1]
    return [int(t) for t in seq]


@dataclass
class TrainLossReport:
    loss_translation: torch.Tensor
    loss_rotation: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.loss_translation + self.loss_rotation

    def as_dict(self) -> dict:
        return {
            "loss_translation": float(self.loss_translation),
            "loss_rotation": float(self.loss_rotation),
            "total": float(self.total),
        }


def training_losses(x0_hat: torch.Tensor, translations: torch.Tensor, rotations: torch.Tensor,
                    piece_index: torch.Tensor) -> TrainLossReport:
    """Mean squared distance of every keypoint's prediction to its piece pose.

    ``translations`` / ``rotations`` are ``[M, 2]`` ground truth per piece;
    ``piece_index`` maps each of the ``M*K`` rows to its piece.
    """
    if x0_hat.ndim != 2 or x0_hat.shape[1] != 4 or piece_index.shape[0] != x0_hat.shape[0]:
        raise ShapeMismatch("x0_hat must be [rows, 4] with one piece index per row")
    if translations.shape != rotations.shape or translations.shape[-1] != 2:
        raise ShapeMismatch("ground truth must be [M, 2] translations and rotations")
    lt = ((x0_hat[:, :2] - translations[piece_index]) ** 2).sum(-1).mean()
    lr = ((x0_hat[:, 2:] - rotations[piece_index]) ** 2).sum(-1).mean()
    return TrainLossReport(lt, lr)


@dataclass
class AggregatedPose:
    translation: np.ndarray
    rotation: np.ndarray
    degenerate: bool = False

    @property
    def angle_deg(self) -> float:
        return float(np.rad2deg(np.arctan2(self.rotation[1], self.rotation[0])) % 360.0)


def aggregate_pose(rows) -> AggregatedPose:
    """Average one piece's keypoint poses; renormalise the mean rotation."""
    r = np.asarray(rows.detach().cpu() if isinstance(rows, torch.Tensor) else rows, dtype=np.float64)
    r = r.reshape(-1, 4)
    if len(r) == 0:
        raise EmptyPiece("no rows to aggregate")
    mean = r.mean(axis=0)
    rot = mean[2:]
    norm = float(np.hypot(*rot))
    if norm < 1e-9:
        return AggregatedPose(mean[:2], np.array([1.0, 0.0]), degenerate=True)
    return AggregatedPose(mean[:2], rot / norm)


def aggregate_by_piece(x0: torch.Tensor, piece_index: torch.Tensor, num_pieces: int) -> list[AggregatedPose]:
    idx = piece_index.cpu().numpy()
    rows = x0.detach().cpu().numpy()
    return [aggregate_pose(rows[idx == m]) for m in range(num_pieces)]


@dataclass
class SampleResult:
    poses: list[AggregatedPose]
    x0: torch.Tensor
    trace: list = field(default_factory=list)


def sample(predict_x0: Callable[[torch.Tensor, int], torch.Tensor], piece_index: torch.Tensor,
           schedule: NoiseSchedule, steps: int, seed: int = 0, dtype=torch.float32,
           record_trace: bool = False) -> SampleResult:
    """Deterministic strided reverse diffusion from ``x_T ~ N(0, I)``.

    ``predict_x0(x_t, t)`` returns the denoiser's clean-pose estimate for
    every row.  Callables exposing ``trained = False`` are rejected.
    """
    if not getattr(predict_x0, "trained", True):
        raise UntrainedModel("denoiser has not been trained")
    gen = torch.Generator().manual_seed(seed)
    n = piece_index.shape[0]
    x = torch.randn(n, 4, generator=gen, dtype=dtype)
    num_pieces = int(piece_index.max()) + 1 if n else 0
    seq = timestep_sequence(schedule.T, steps)
    trace = []
    with torch.no_grad():
        for i, t in enumerate(seq):
            x0_hat = predict_x0(x, t)
            t_prev = seq[i + 1] if i + 1 < len(seq) else 0
            x = denoise_step(x, x0_hat, t, schedule, t_prev)
            if record_trace:
                trace.append({
                    "t": t_prev,
                    "poses": [
                        {"translation": p.translation.tolist(), "rotation": p.rotation.tolist()}
                        for p in aggregate_by_piece(x, piece_index, num_pieces)
                    ],
                })
    return SampleResult(aggregate_by_piece(x, piece_index, num_pieces), x, trace)


def oracle_predictor(x0: torch.Tensor):
    """A denoiser stand-in that always returns the true clean poses."""

    def predict(x_t, t):
        return x0.to(x_t.dtype)

    return predict


def broadcast_poses(translations: Sequence, rotations: Sequence, piece_index: torch.Tensor,
                    dtype=torch.float32) -> torch.Tensor:
    s = torch.as_tensor(np.asarray(translations, dtype=np.float64), dtype=dtype)
    r = torch.as_tensor(np.asarray(rotations, dtype=np.float64), dtype=dtype)
    return torch.cat([s, r], dim=-1)[piece_index]
