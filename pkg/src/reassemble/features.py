"""Per-keypoint feature vectors: geometric scalars plus local and global
texture embeddings.

Two texture backends are supported: a small convolutional encoder that is
trained together with the denoiser, or embeddings read from per-piece
sidecar files ``<piece_id>.emb.json``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image
from torch import nn

from .errors import BadPatchShape, EncoderWeightsMissing, KeypointOutsideImage, LengthMismatch
from .geometry import Keypoint

GLOBAL_SIZE = 128
KINDS = ("builtin-cnn", "external-embeddings")


@dataclass
class TextureEncoderSpec:
    kind: str = "builtin-cnn"
    embedding_width: int = 64
    patch_size: int = 32

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.patch_size % 2 or self.patch_size < 8:
            raise ValueError(f"patch_size must be even and >= 8, got {self.patch_size}")
        if self.embedding_width < 8:
            raise ValueError(f"embedding_width must be >= 8, got {self.embedding_width}")


@dataclass
class FeatureSet:
    h: torch.Tensor
    d_local: int
    d_global: int

    @property
    def width(self) -> int:
        return 3 + self.d_local + self.d_global


def _rgb_on_black(image) -> np.ndarray:
    """RGBA (uint8 or float) -> float32 RGB in [0, 1] with transparent pixels black."""
    img = np.asarray(image)
    scale = 255.0 if img.dtype == np.uint8 else 1.0
    img = img.astype(np.float32) / scale
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    rgb = img[..., :3].copy()
    if img.shape[2] == 4:
        rgb[img[..., 3] <= 0] = 0.0
    return rgb


def extract_local_patch(image, keypoint, patch_size: int = 32) -> np.ndarray:
    """``patch_size``² RGB crop centred on a keypoint given in image (x, y) pixels.

    Returns float32 ``[P, P, 3]``.  Outside the image, edge pixels are
    replicated.
    """
    img = _rgb_on_black(image)
    h, w = img.shape[:2]
    pos = keypoint.position if isinstance(keypoint, Keypoint) else np.asarray(keypoint, dtype=np.float64)
    x, y = float(pos[0]), float(pos[1])
    if not (0 <= x <= w - 1 and 0 <= y <= h - 1):
        raise KeypointOutsideImage(f"keypoint ({x:.1f}, {y:.1f}) outside {w}x{h} image")
    half = patch_size // 2
    cx, cy = int(round(x)), int(round(y))
    padded = np.pad(img, ((half, half), (half, half), (0, 0)), mode="edge")
    return padded[cy:cy + patch_size, cx:cx + patch_size]


def prepare_global_image(image, size: int = GLOBAL_SIZE) -> np.ndarray:
    """Masked piece, padded to a square with black and resized; float32 ``[size, size, 3]``."""
    img = _rgb_on_black(image)
    h, w = img.shape[:2]
    side = max(h, w)
    sq = np.zeros((side, side, 3), dtype=np.float32)
    top, left = (side - h) // 2, (side - w) // 2
    sq[top:top + h, left:left + w] = img
    pil = Image.fromarray((sq * 255.0).round().astype(np.uint8))
    pil = pil.resize((size, size), Image.BILINEAR)
    return np.asarray(pil, dtype=np.float32) / 255.0


class TextureEncoder(nn.Module):
    """Shared convolutional trunk with separate global and local heads.

    Both heads end in tanh so embeddings are bounded.  The encoder refuses to
    run until it has been initialised from a seed or loaded from a state dict.
    """

    def __init__(self, width: int = 64, channels: int = 32):
        super().__init__()
        self.width = width
        c = channels
        self.trunk = nn.Sequential(
            nn.Conv2d(3, c // 2, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(c // 2, c, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(c, c, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )
        self.global_head = nn.Sequential(nn.Linear(c, width), nn.Tanh())
        self.local_head = nn.Sequential(nn.Linear(c, width), nn.Tanh())
        self.register_buffer("ready", torch.zeros((), dtype=torch.bool))

    def initialize(self, seed: int = 0) -> "TextureEncoder":
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for mod in self.modules():
                if isinstance(mod, (nn.Conv2d, nn.Linear)):
                    fan_in = mod.weight[0].numel()
                    bound = (6.0 / fan_in) ** 0.5
                    mod.weight.copy_(torch.rand(mod.weight.shape, generator=gen) * 2 * bound - bound)
                    mod.bias.copy_(torch.rand(mod.bias.shape, generator=gen) * 0.2 - 0.1)
            self.ready.fill_(True)
        return self

    def _check(self):
        if not bool(self.ready):
            raise EncoderWeightsMissing("builtin encoder has neither been initialised nor loaded")

    @staticmethod
    def _to_tensor(images, ref: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(np.asarray(images), dtype=ref.dtype)
        if t.ndim == 3:
            t = t.unsqueeze(0)
        return t.permute(0, 3, 1, 2)

    def encode_global(self, images) -> torch.Tensor:
        """``[B, 128, 128, 3]`` (or one image) -> ``[B, width]``."""
        self._check()
        x = self._to_tensor(images, self.global_head[0].weight)
        return self.global_head(self.trunk(x))

    def encode_local(self, patches) -> torch.Tensor:
        self._check()
        x = self._to_tensor(patches, self.local_head[0].weight)
        return self.local_head(self.trunk(x))


def read_sidecar(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise EncoderWeightsMissing(f"embedding sidecar {path} not found")
    data = json.loads(path.read_text())
    width = int(data["width"])
    if len(data["global"]) != width or any(len(v) != width for v in data.get("local", [])):
        raise LengthMismatch(f"sidecar {path.name} entries do not match declared width {width}")
    return data


def encode_texture_global(image, spec: TextureEncoderSpec, encoder: TextureEncoder | None = None,
                          sidecar=None) -> torch.Tensor:
    if spec.kind == "external-embeddings":
        if sidecar is None:
            raise EncoderWeightsMissing("external-embeddings mode needs a sidecar file")
        data = sidecar if isinstance(sidecar, dict) else read_sidecar(sidecar)
        return torch.tensor(data["global"], dtype=torch.float32)
    if encoder is None:
        raise EncoderWeightsMissing("builtin-cnn mode needs an encoder")
    return encoder.encode_global(prepare_global_image(image))[0]


def encode_texture_local(patch, spec: TextureEncoderSpec, encoder: TextureEncoder | None = None) -> torch.Tensor:
    p = np.asarray(patch)
    if p.shape[:2] != (spec.patch_size, spec.patch_size):
        raise BadPatchShape(f"patch {p.shape[:2]} != {spec.patch_size}x{spec.patch_size}")
    if encoder is None:
        raise EncoderWeightsMissing("builtin-cnn mode needs an encoder")
    return encoder.encode_local(p)[0]


def external_local_embeddings(sidecar, selected: Sequence[Keypoint], candidates: Sequence[Keypoint]) -> torch.Tensor:
    """Look up sidecar local vectors for the selected keypoints.

    The sidecar lists one vector per candidate keypoint in contour order.
    """
    data = sidecar if isinstance(sidecar, dict) else read_sidecar(sidecar)
    local = data.get("local", [])
    if len(local) != len(candidates):
        raise LengthMismatch(f"sidecar has {len(local)} local vectors for {len(candidates)} keypoints")
    order = {kp.contour_index: i for i, kp in enumerate(sorted(candidates, key=lambda k: k.contour_index))}
    return torch.tensor([local[order[kp.contour_index]] for kp in selected], dtype=torch.float32)


def geometric_block(keypoints: Sequence[Keypoint], dtype=torch.float32) -> torch.Tensor:
    rows = []
    for kp in keypoints:
        a = np.deg2rad(kp.edge_angle)
        rows.append([kp.curvature, np.cos(a), np.sin(a)])
    return torch.tensor(rows, dtype=dtype).reshape(-1, 3)


def assemble_features(keypoints: Sequence[Keypoint], local_embs, global_emb) -> FeatureSet:
    """``h_i = [curvature, cos phi, sin phi, local_i, global]`` per keypoint."""
    if len(keypoints) == 0:
        raise LengthMismatch("no keypoints to build features for")
    local = torch.as_tensor(local_embs)
    glob = torch.as_tensor(global_emb).reshape(-1)
    if local.ndim != 2 or local.shape[0] != len(keypoints):
        raise LengthMismatch(f"{local.shape[0] if local.ndim else 0} local embeddings for {len(keypoints)} keypoints")
    geo = geometric_block(keypoints, dtype=local.dtype)
    h = torch.cat([geo, local, glob.to(local.dtype).expand(len(keypoints), -1)], dim=1)
    return FeatureSet(h=h, d_local=local.shape[1], d_global=glob.shape[0])
