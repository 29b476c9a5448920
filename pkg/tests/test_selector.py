import math

import numpy as np
import pytest
import torch

from conftest import random_star_polygon, square
from reassemble.errors import (
    DatasetEmpty,
    DegenerateSelection,
    IncompatibleCheckpoint,
    KTooLarge,
    TooFewKeypoints,
    ZeroProjectionVector,
)
from reassemble.geometry import Keypoint, farthest_point_sampling
from reassemble.selector import (
    GraphTransformer,
    KeypointSelector,
    PoolingParams,
    SelectorGraph,
    build_selector_graph,
    complete_adjacency,
    graph_transformer_encode,
    polygon_keypoints,
    pretrain_selector,
    select_keypoints,
    selector_pretrain_loss,
    soft_selection_loss,
    topk_pool,
)


def regular_polygon(n, radius=30.0):
    a = 2 * np.pi * np.arange(n) / n
    return np.column_stack([radius * np.cos(a), radius * np.sin(a)])


def kp(x, y, i=0):
    return Keypoint(np.array([x, y], float), 0.1, 45.0, i)


class TestBuildGraph:
    def test_complete_graph(self):
        proj = torch.nn.Linear(KeypointSelector().projection.in_features, 8)
        g = build_selector_graph([kp(i, i * i, i) for i in range(5)], proj, k=3)
        assert g.num_nodes == 5
        assert g.num_edges == 20
        assert torch.equal(g.adjacency, g.adjacency.T)
        assert torch.all(torch.diagonal(g.adjacency) == 0)

    def test_single_node(self):
        proj = torch.nn.Linear(KeypointSelector().projection.in_features, 8)
        g = build_selector_graph([kp(1, 2)], proj, k=1)
        assert g.num_nodes == 1 and g.num_edges == 0

    def test_too_few(self):
        proj = torch.nn.Linear(KeypointSelector().projection.in_features, 8)
        with pytest.raises(TooFewKeypoints):
            build_selector_graph([kp(0, 0), kp(1, 0)], proj, k=3)

    def test_large_candidate_sets_thinned_by_fps(self):
        pts = regular_polygon(600)
        proj = torch.nn.Linear(KeypointSelector().projection.in_features, 8)
        g = build_selector_graph(polygon_keypoints(pts), proj, k=20)
        assert g.num_nodes == 512
        assert np.array_equal(g.candidate_indices, farthest_point_sampling(pts, 512, 0))


class TestGraphTransformer:
    def test_zero_weights_identity(self):
        enc = GraphTransformer(width=16, layers=2, heads=4)
        for prm in enc.parameters():
            torch.nn.init.zeros_(prm)
        x = torch.randn(7, 16)
        out = enc(x, complete_adjacency(7))
        assert torch.equal(out, x)

    def test_permutation_equivariance(self):
        torch.manual_seed(0)
        enc = GraphTransformer(width=16, layers=3, heads=4).double()
        x = torch.randn(9, 16, dtype=torch.float64)
        perm = torch.randperm(9)
        a = enc(x, complete_adjacency(9, torch.float64))
        b = enc(x[perm], complete_adjacency(9, torch.float64))
        torch.testing.assert_close(b, a[perm])

    def test_single_node(self):
        enc = GraphTransformer(width=16, layers=2, heads=4)
        g = SelectorGraph(torch.randn(1, 16), complete_adjacency(1), np.zeros((1, 2)))
        out = graph_transformer_encode(g, enc).features
        assert out.shape == (1, 16) and torch.isfinite(out).all()


class TestTopkPool:
    D = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])

    def test_worked_example(self):
        res = topk_pool(self.D, complete_adjacency(3), PoolingParams(torch.tensor([1.0, 0.0]), 2))
        torch.testing.assert_close(res.scores, torch.tensor([1.0, 0.0, 1.0]))
        assert res.indices.tolist() == [0, 2]
        t = math.tanh(1.0)
        assert t == pytest.approx(0.76159, abs=1e-5)
        torch.testing.assert_close(res.features, torch.tensor([[t, 0.0], [t, t]]), atol=1e-5, rtol=0)
        assert res.adjacency.tolist() == [[0.0, 1.0], [1.0, 0.0]]

    def test_keep_all(self):
        res = topk_pool(self.D, complete_adjacency(3), PoolingParams(torch.tensor([1.0, 0.0]), 3))
        assert res.indices.tolist() == [0, 1, 2]
        torch.testing.assert_close(res.features, self.D * torch.tanh(res.scores)[:, None])

    def test_zero_vector(self):
        with pytest.raises(ZeroProjectionVector):
            topk_pool(self.D, complete_adjacency(3), PoolingParams(torch.zeros(2), 2))

    def test_k_too_large(self):
        with pytest.raises(KTooLarge):
            topk_pool(self.D, complete_adjacency(3), PoolingParams(torch.ones(2), 4))

    def test_ties_go_to_lower_index(self):
        D = torch.ones(5, 3)
        res = topk_pool(D, complete_adjacency(5), PoolingParams(torch.ones(3), 2))
        assert res.indices.tolist() == [0, 1]

    def test_monotone_rescaling_keeps_selection(self, rng):
        D = torch.as_tensor(rng.normal(size=(30, 6)))
        p = torch.as_tensor(rng.normal(size=6))
        base = topk_pool(D, complete_adjacency(30, D.dtype), PoolingParams(p, 10))
        # scaling p rescales y by a positive constant
        scaled = topk_pool(D, complete_adjacency(30, D.dtype), PoolingParams(3.7 * p, 10))
        assert scaled.indices.tolist() == base.indices.tolist()
        y = base.scores
        for f in (torch.tanh, lambda v: 5 * v + 2, torch.exp):
            assert torch.sort(torch.argsort(-f(y), stable=True)[:10]).values.tolist() == base.indices.tolist()

    def test_subset_and_permutation(self, rng):
        D = torch.as_tensor(rng.normal(size=(12, 4)))
        p = torch.as_tensor(rng.normal(size=4))
        res = topk_pool(D, complete_adjacency(12, D.dtype), PoolingParams(p, 5))
        perm = torch.as_tensor(rng.permutation(12))
        res_p = topk_pool(D[perm], complete_adjacency(12, D.dtype), PoolingParams(p, 5))
        torch.testing.assert_close(res_p.scores, res.scores[perm])
        assert set(perm[res_p.indices].tolist()) == set(res.indices.tolist())


class TestPretrainLoss:
    def test_all_corners(self):
        rep = selector_pretrain_loss(square(), [0, 1, 2, 3])
        assert rep.loss_area == 0 and rep.loss_perimeter == 0 and rep.total == 0

    def test_collinear_midpoint(self):
        pts = np.array([(0, 0), (0.5, 0), (1, 0), (1, 1), (0, 1)], float)
        assert selector_pretrain_loss(pts, [0, 2, 3, 4]).total == pytest.approx(0.0, abs=1e-15)

    def test_three_corners(self):
        rep = selector_pretrain_loss(square(), [0, 1, 2])
        assert rep.loss_area == pytest.approx(0.25, abs=1e-12)
        assert rep.loss_perimeter == pytest.approx(((4 - (2 + math.sqrt(2))) / 4) ** 2, abs=1e-12)
        assert rep.loss_perimeter == pytest.approx(0.02145, abs=1e-5)
        assert rep.total == pytest.approx(rep.loss_area + rep.loss_perimeter)
        assert rep.lambda_area == 1.0 and rep.lambda_perimeter == 1.0

    def test_degenerate(self):
        with pytest.raises(DegenerateSelection):
            selector_pretrain_loss(square(), [0, 1])

    def test_surrogate_matches_exact_at_hard_weights(self, rng):
        pts = random_star_polygon(rng, 30) * 40
        scores = torch.as_tensor(rng.normal(size=30) * 1e4)  # saturated gates
        hard = torch.topk(scores, 12).indices.numpy()
        exact = selector_pretrain_loss(pts, hard).total
        soft = soft_selection_loss(torch.as_tensor(pts), scores, 12)
        assert float(soft) == pytest.approx(exact, rel=1e-9, abs=1e-12)


def _fd_check(model, loss_fn, eps=1e-6, floor=1e-7):
    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad()
    loss_fn().backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in params])
    numeric = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = loss_fn().item()
                flat[i] = old - eps
                down = loss_fn().item()
                flat[i] = old
                numeric.append((up - down) / (2 * eps))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    rel = (analytic - numeric).abs() / torch.clamp(torch.maximum(analytic.abs(), numeric.abs()), min=floor)
    return rel


def test_gradient_matches_finite_differences():
    torch.manual_seed(3)
    rng = np.random.default_rng(3)
    pts = random_star_polygon(rng, 14) * 20
    kps = polygon_keypoints(pts)
    model = KeypointSelector(k=6, width=8, layers=1, heads=2).double()
    res, g = model(kps)
    fixed = res.indices.clone()
    top = torch.topk(res.scores.detach(), 7).values
    tau = 0.5 * float(top[-2] + top[-1])  # selection state held fixed
    points = torch.as_tensor(pts)

    def loss_fn():
        r, _ = model(kps)
        assert torch.equal(r.indices, fixed)  # top-k indices must not move
        return soft_selection_loss(points, r.scores, 6, tau=tau) + 0.1 * r.features.pow(2).sum()

    rel = _fd_check(model, loss_fn)
    assert (rel < 1e-4).float().mean() >= 0.95


class TestPretrainSelector:
    def test_regular_ngons_k_equals_n(self):
        pieces = [polygon_keypoints(regular_polygon(n)) for n in (5, 5, 5, 5)]
        sel, hist = pretrain_selector(pieces, epochs=3, k=5, seed=0)
        assert hist[-1]["exact"] < 1e-4

    def test_empty(self):
        with pytest.raises(DatasetEmpty):
            pretrain_selector([], epochs=1, k=3)

    def test_history_persisted(self, tmp_path):
        pieces = [polygon_keypoints(regular_polygon(8))]
        log = tmp_path / "curve.json"
        _, hist = pretrain_selector(pieces, epochs=2, k=4, seed=0, log_path=log)
        assert len(hist) == 2 and log.exists()


class TestSelectKeypoints:
    def test_fps_square(self):
        kps = polygon_keypoints(square(size=10.0))
        sel = select_keypoints(kps, "fps", 4)
        assert [k.contour_index for k in sel.keypoints] == [0, 1, 2, 3]

    def test_fps_collinear(self):
        kps = [kp(0, 0, 0), kp(10, 0, 1), kp(4, 0, 2)]
        sel = select_keypoints(kps, "fps", 2)
        assert [tuple(k.position) for k in sel.keypoints] == [(0, 0), (10, 0)]

    def test_frozen_deterministic_and_subset(self, rng):
        torch.manual_seed(0)
        model = KeypointSelector(k=8, width=16, layers=2, heads=4)
        kps = polygon_keypoints(random_star_polygon(rng, 25) * 30)
        a = select_keypoints(kps, "learnable-frozen", 8, model)
        b = select_keypoints(kps, "learnable-frozen", 8, model)
        assert a.indices.tolist() == b.indices.tolist()
        assert len(a.keypoints) == 8 and a.indices.tolist() == sorted(a.indices.tolist())
        assert not a.gated_features.requires_grad

    def test_trainable_exposes_gradients(self, rng):
        model = KeypointSelector(k=8, width=16, layers=2, heads=4)
        kps = polygon_keypoints(random_star_polygon(rng, 25) * 30)
        sel = select_keypoints(kps, "learnable-trainable", 8, model)
        sel.gated_features.sum().backward()
        assert model.pool_vector.grad is not None and model.pool_vector.grad.abs().sum() > 0

    def test_too_few(self):
        with pytest.raises(TooFewKeypoints):
            select_keypoints([kp(0, 0)], "fps", 3)


def test_checkpoint_round_trip(tmp_path, rng):
    model = KeypointSelector(k=7, width=16, layers=2, heads=4)
    path = tmp_path / "sel.ckpt"
    model.save(path)
    loaded = KeypointSelector.load(path)
    kps = polygon_keypoints(random_star_polygon(rng, 20) * 30)
    with torch.no_grad():
        assert torch.equal(model(kps)[0].scores, loaded(kps)[0].scores)
    with pytest.raises(IncompatibleCheckpoint):
        KeypointSelector.load(path, k=20)
