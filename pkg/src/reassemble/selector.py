"""Keypoint selection: farthest point sampling and learnable top-k pooling.

The learnable selector treats a piece's candidate keypoints as the nodes of
a complete graph, refines projected node features with a graph transformer
and keeps the ``k`` nodes with the highest projection score.  Scores gate
the kept features through ``tanh`` so the projection vector receives
gradients.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import nn

from .attention import TransformerBlock
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (
    DatasetEmpty,
    DegenerateSelection,
    IncompatibleCheckpoint,
    KTooLarge,
    TooFewKeypoints,
    ZeroProjectionVector,
)
from .geometry import (
    Contour,
    Keypoint,
    farthest_point_sampling,
    make_keypoint,
    polygon_area,
    polygon_perimeter,
)

log = logging.getLogger(__name__)

MAX_GRAPH_NODES = 512
FOURIER_FREQS = 16
NODE_INPUT_WIDTH = 5 + 2 * FOURIER_FREQS  # x, y, curvature, cos/sin edge angle, coordinate Fourier lift
MODES = ("fps", "learnable-frozen", "learnable-trainable")


@dataclass
class SelectorGraph:
    features: torch.Tensor  # D, [n, F]
    adjacency: torch.Tensor  # A, [n, n], complete graph without self-loops
    positions: np.ndarray  # [n, 2]
    candidate_indices: np.ndarray = field(default=None)  # rows -> input keypoint indices

    @property
    def num_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def num_edges(self) -> int:
        return int(self.adjacency.sum().item())


@dataclass
class PoolingParams:
    projection: torch.Tensor
    k: int


class PoolResult(NamedTuple):
    indices: torch.Tensor  # j, ascending
    features: torch.Tensor  # gated rows D_hat
    adjacency: torch.Tensor  # A_hat
    scores: torch.Tensor  # y for every input row


@dataclass
class SelectorLossReport:
    loss_area: float
    loss_perimeter: float
    total: float
    lambda_area: float = 1.0
    lambda_perimeter: float = 1.0


def complete_adjacency(n: int, dtype=torch.float32) -> torch.Tensor:
    return torch.ones(n, n, dtype=dtype) - torch.eye(n, dtype=dtype)


def node_inputs(keypoints: Sequence[Keypoint], dtype=torch.float32) -> torch.Tensor:
    """Raw per-node inputs, normalised to the piece's own scale.

    Coordinates are centred on the keypoint centroid and divided by the RMS
    radius so the selector is translation- and scale-invariant.
    """
    pos = np.array([kp.position for kp in keypoints], dtype=np.float64)
    centred = pos - pos.mean(axis=0)
    scale = np.sqrt((centred ** 2).sum(axis=1).mean())
    scale = scale if scale > 0 else 1.0
    kappa = np.array([kp.curvature for kp in keypoints]) * scale
    ang = np.deg2rad([kp.edge_angle for kp in keypoints])
    xy = centred / scale
    phase = xy @ _fourier_basis().T
    feats = np.column_stack([xy, np.log1p(kappa), np.cos(ang), np.sin(ang), np.cos(phase), np.sin(phase)])
    return torch.as_tensor(feats, dtype=dtype)


def _fourier_basis() -> np.ndarray:
    # Fixed random frequencies: dot products of the lifted coordinates
    # approximate a Gaussian proximity kernel, which lets attention find
    # spatial neighbours.
    return np.random.default_rng(20240607).normal(scale=3.0, size=(FOURIER_FREQS, 2))


def build_selector_graph(keypoints: Sequence[Keypoint], projection: nn.Module, k: int,
                         max_nodes: int = MAX_GRAPH_NODES) -> SelectorGraph:
    """Complete graph over the candidate keypoints with projected features.

    Oversized candidate sets are thinned to ``max_nodes`` by FPS first.
    """
    if len(keypoints) < k:
        raise TooFewKeypoints(f"{len(keypoints)} keypoints, need k={k}")
    idx = np.arange(len(keypoints))
    if len(keypoints) > max_nodes:
        pos = np.array([kp.position for kp in keypoints])
        idx = farthest_point_sampling(pos, max_nodes, 0)
        keypoints = [keypoints[i] for i in idx]
    dtype = next(projection.parameters()).dtype
    raw = node_inputs(keypoints, dtype=dtype)
    return SelectorGraph(
        features=projection(raw),
        adjacency=complete_adjacency(len(keypoints), dtype=dtype),
        positions=np.array([kp.position for kp in keypoints], dtype=np.float64),
        candidate_indices=idx,
    )


class GraphTransformer(nn.Module):
    def __init__(self, width: int = 64, layers: int = 3, heads: int = 4):
        super().__init__()
        self.blocks = nn.ModuleList(TransformerBlock(width, heads) for _ in range(layers))

    def forward(self, features: torch.Tensor, adjacency: torch.Tensor) -> torch.Tensor:
        # Each node also attends to itself so single-node graphs are defined.
        eye = torch.eye(adjacency.shape[0], dtype=torch.bool, device=adjacency.device)
        mask = (adjacency > 0) | eye
        h = features
        for block in self.blocks:
            h = block(h, mask)
        return h


def graph_transformer_encode(g: SelectorGraph, encoder: GraphTransformer) -> SelectorGraph:
    return SelectorGraph(
        features=encoder(g.features, g.adjacency),
        adjacency=g.adjacency,
        positions=g.positions,
        candidate_indices=g.candidate_indices,
    )


def topk_pool(D: torch.Tensor, A: torch.Tensor, params: PoolingParams) -> PoolResult:
    """Top-k graph pooling.

    ``y = D p / |p|``; keep the ``k`` rows with the largest ``y`` (ties go to
    the lower index), gate them by ``tanh(y)`` and slice the adjacency.
    Indices come back ascending so contour order is preserved.
    """
    p = params.projection
    norm = torch.linalg.vector_norm(p)
    if float(norm.detach()) == 0.0:
        raise ZeroProjectionVector("projection vector is zero")
    if params.k > D.shape[0]:
        raise KTooLarge(f"k={params.k} exceeds {D.shape[0]} nodes")
    y = D @ p / norm
    order = torch.argsort(-y.detach(), stable=True)
    j = torch.sort(order[: params.k]).values
    gated = D * torch.tanh(y).unsqueeze(-1)
    return PoolResult(j, gated[j], A[j][:, j], y)


def selector_pretrain_loss(all_points, selected_indices, lambda_area: float = 1.0,
                           lambda_perimeter: float = 1.0) -> SelectorLossReport:
    """Area and perimeter preservation of the selected sub-polygon."""
    pts = np.asarray(all_points, dtype=np.float64)
    sel = np.sort(np.asarray(selected_indices, dtype=np.int64))
    if len(sel) < 3:
        raise DegenerateSelection(f"{len(sel)} points selected, need >= 3")
    a_tot, p_tot = polygon_area(pts), polygon_perimeter(pts)
    a_sel, p_sel = polygon_area(pts[sel]), polygon_perimeter(pts[sel])
    la = ((a_tot - a_sel) / a_tot) ** 2
    lp = ((p_tot - p_sel) / p_tot) ** 2
    return SelectorLossReport(la, lp, lambda_area * la + lambda_perimeter * lp, lambda_area, lambda_perimeter)


def _torch_area(p: torch.Tensor) -> torch.Tensor:
    x, y = p[:, 0], p[:, 1]
    return 0.5 * torch.abs(torch.sum(x * torch.roll(y, -1) - torch.roll(x, -1) * y))


def _torch_perimeter(p: torch.Tensor) -> torch.Tensor:
    return torch.linalg.vector_norm(p - torch.roll(p, -1, dims=0), dim=1).sum()


def _chord_projections(points: np.ndarray, kept: np.ndarray) -> np.ndarray:
    """Where each vertex lands if it is dropped from the kept sub-polygon.

    Vertex ``i`` is placed on the chord between the nearest kept vertex
    before it and the nearest kept vertex after it, at the arc-length
    fraction it occupies along the original contour.
    """
    n = len(points)
    seg = np.linalg.norm(np.roll(points, -1, axis=0) - points, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    kept = np.sort(kept)
    out = np.empty_like(points)
    for i in range(n):
        pos = np.searchsorted(kept, i, side="left")
        a = kept[pos - 1] if pos > 0 else kept[-1]
        nxt = np.searchsorted(kept, i, side="right")
        b = kept[nxt] if nxt < len(kept) else kept[0]
        la = (cum[i] - cum[a]) % total
        lab = (cum[b] - cum[a]) % total or total
        f = la / lab
        out[i] = (1.0 - f) * points[a] + f * points[b]
    return out


def soft_selection_loss(points: torch.Tensor, scores: torch.Tensor, k: int,
                        lambda_area: float = 1.0, lambda_perimeter: float = 1.0,
                        temperature: float = 1.0, tau: float | None = None) -> torch.Tensor:
    """Differentiable stand-in for :func:`selector_pretrain_loss`.

    The exact loss is piecewise constant in the scores.  Around the current
    hard top-k, every vertex is blended between its own position and its
    projection onto the chord of its kept neighbours, with weight
    ``w = (1 + tanh((y - tau) / temperature)) / 2``.  ``tau`` defaults to
    the midpoint of the k-th and (k+1)-th score and, like the kept set, is
    treated as a constant of the current selection.  With hard weights the
    blended polygon has the same area and perimeter as the selected
    sub-polygon.
    """
    n = points.shape[0]
    if k >= n:
        w = 1.0 + 0.0 * scores  # keeps the autograd graph alive
        proj = points
    else:
        top = torch.topk(scores.detach(), k + 1)
        if tau is None:
            tau = 0.5 * float(top.values[-2] + top.values[-1])
        w = 0.5 * (1.0 + torch.tanh((scores - tau) / temperature))
        kept = top.indices[:k].cpu().numpy()
        proj = torch.as_tensor(_chord_projections(points.detach().cpu().numpy().astype(np.float64), kept),
                               dtype=points.dtype)
    soft = w.unsqueeze(-1) * points + (1.0 - w).unsqueeze(-1) * proj
    a_tot, p_tot = _torch_area(points), _torch_perimeter(points)
    la = ((a_tot - _torch_area(soft)) / a_tot) ** 2
    lp = ((p_tot - _torch_perimeter(soft)) / p_tot) ** 2
    return lambda_area * la + lambda_perimeter * lp


class KeypointSelector(nn.Module):
    def __init__(self, k: int = 20, width: int = 64, layers: int = 3, heads: int = 4,
                 lambda_area: float = 1.0, lambda_perimeter: float = 1.0):
        super().__init__()
        self.k = k
        self.width = width
        self.layers = layers
        self.heads = heads
        self.lambda_area = lambda_area
        self.lambda_perimeter = lambda_perimeter
        self.projection = nn.Linear(NODE_INPUT_WIDTH, width)
        self.encoder = GraphTransformer(width, layers, heads)
        # keeps projection scores O(1) so the tanh gate does not saturate
        self.score_norm = nn.LayerNorm(width)
        self.pool_vector = nn.Parameter(torch.randn(width) / width ** 0.5)

    def config(self) -> dict:
        return {
            "k": self.k,
            "hidden_width": self.width,
            "layers": self.layers,
            "heads": self.heads,
            "lambda_area": self.lambda_area,
            "lambda_perimeter": self.lambda_perimeter,
        }

    def graph(self, keypoints: Sequence[Keypoint]) -> SelectorGraph:
        return build_selector_graph(keypoints, self.projection, self.k)

    def forward(self, keypoints: Sequence[Keypoint], k: int | None = None) -> tuple[PoolResult, SelectorGraph]:
        g = graph_transformer_encode(self.graph(keypoints), self.encoder)
        g.features = self.score_norm(g.features)
        res = topk_pool(g.features, g.adjacency, PoolingParams(self.pool_vector, k or self.k))
        return res, g

    def save(self, path) -> None:
        save_checkpoint(path, "selector", self.config(), {"state_dict": self.state_dict()})

    @classmethod
    def load(cls, path, k: int | None = None) -> "KeypointSelector":
        header, payload = load_checkpoint(path, "selector")
        if k is not None and header["k"] != k:
            raise IncompatibleCheckpoint(f"selector checkpoint has k={header['k']}, config asks k={k}")
        model = cls(
            k=header["k"],
            width=header["hidden_width"],
            layers=header["layers"],
            heads=header["heads"],
            lambda_area=header["lambda_area"],
            lambda_perimeter=header["lambda_perimeter"],
        )
        model.load_state_dict(payload["state_dict"])
        return model


def polygon_keypoints(points, window: int = 1) -> list[Keypoint]:
    """Treat every polygon vertex as a candidate keypoint."""
    contour = Contour(points)
    return [make_keypoint(contour, i, window) for i in range(len(contour))]


def pretrain_selector(pieces: Sequence[Sequence[Keypoint]], epochs: int, k: int, *,
                      selector: KeypointSelector | None = None, lr: float = 1e-3,
                      batch_size: int = 4, seed: int = 0, log_path=None):
    """Unsupervised area/perimeter pretraining.

    Returns ``(selector, history)``; ``history`` holds one record per epoch
    with the mean surrogate loss and the mean exact loss of the hard
    selection.  If ``log_path`` is given the history is written there as
    JSON after every epoch.
    """
    if len(pieces) == 0:
        raise DatasetEmpty("no pieces to pretrain on")
    for kps in pieces:
        if len(kps) < k:
            raise TooFewKeypoints(f"piece has {len(kps)} keypoints, need k={k}")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    selector = selector or KeypointSelector(k=k)
    selector.k = k
    opt = torch.optim.Adam(selector.parameters(), lr=lr)
    positions = [torch.as_tensor(np.array([kp.position for kp in kps]), dtype=torch.float32) for kps in pieces]
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(pieces))
        surrogate_sum, exact_sum = 0.0, 0.0
        for start in range(0, len(order), batch_size):
            batch = order[start:start + batch_size]
            opt.zero_grad()
            loss = 0.0
            for i in batch:
                res, g = selector(pieces[i])
                pts = positions[i][torch.as_tensor(g.candidate_indices)]
                surrogate = soft_selection_loss(pts, res.scores, k, selector.lambda_area, selector.lambda_perimeter)
                loss = loss + surrogate / len(batch)
                exact_sum += selector_pretrain_loss(
                    pts.numpy(), res.indices.numpy(), selector.lambda_area, selector.lambda_perimeter
                ).total
                surrogate_sum += float(surrogate.detach())
            loss.backward()
            opt.step()
        record = {"epoch": epoch, "surrogate": surrogate_sum / len(pieces), "exact": exact_sum / len(pieces)}
        history.append(record)
        log.debug("selector epoch %d: %s", epoch, record)
        if log_path is not None:
            Path(log_path).write_text(json.dumps(history, indent=1))
    return selector, history


@dataclass
class Selection:
    keypoints: list[Keypoint]
    indices: np.ndarray
    gated_features: torch.Tensor | None = None


def select_keypoints(keypoints: Sequence[Keypoint], mode: str, k: int,
                     selector: KeypointSelector | None = None) -> Selection:
    """Pick exactly ``k`` keypoints in contour order."""
    if mode not in MODES:
        raise ValueError(f"unknown selection mode {mode!r}")
    if len(keypoints) < k:
        raise TooFewKeypoints(f"{len(keypoints)} keypoints, need k={k}")
    if mode == "fps":
        pos = np.array([kp.position for kp in keypoints])
        idx = farthest_point_sampling(pos, k, 0)
        return Selection([keypoints[i] for i in idx], idx)
    if selector is None:
        raise ValueError(f"mode {mode!r} needs a selector")
    if mode == "learnable-frozen":
        with torch.no_grad():
            res, g = selector(keypoints, k)
    else:
        res, g = selector(keypoints, k)
    idx = g.candidate_indices[res.indices.cpu().numpy()]
    return Selection([keypoints[i] for i in idx], idx, res.features)
