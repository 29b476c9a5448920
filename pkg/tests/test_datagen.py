import hashlib

import numpy as np
import pytest

from reassemble.datagen import (
    CutSpec,
    GenConfig,
    RealismSpec,
    circumscribed_circle,
    erode_fragment,
    generate_cut_line,
    generate_dataset,
    generate_puzzle,
    jitter_fragment,
    layout_fidelity,
    procedural_source,
    puzzle_rng,
    split_region,
)
from reassemble.errors import CutMissesRegion, FragmentVanished, SourceUnreadable
from reassemble.geometry import RigidTransform2D
from reassemble.puzzle import load_puzzle


def _chord_deviation(line):
    p0, p1 = line[0], line[-1]
    d = (p1 - p0) / np.linalg.norm(p1 - p0)
    n = np.array([-d[1], d[0]])
    return np.abs((line - p0) @ n)


class TestCutLine:
    def test_zero_amplitude_is_chord(self):
        mask = np.ones((64, 64), bool)
        line = generate_cut_line(mask, np.random.default_rng(0), CutSpec(amplitude=0.0, straight_prob=0.0))
        assert _chord_deviation(line).max() < 1e-9

    def test_endpoints_on_circle(self):
        mask = np.ones((40, 90), bool)
        c, r = circumscribed_circle(mask)
        line = generate_cut_line(mask, np.random.default_rng(1))
        assert abs(np.linalg.norm(line[0] - c) - r) < 1e-9
        assert abs(np.linalg.norm(line[-1] - c) - r) < 1e-9

    def test_deterministic(self):
        mask = np.ones((64, 64), bool)
        a = generate_cut_line(mask, np.random.default_rng(5))
        b = generate_cut_line(mask, np.random.default_rng(5))
        assert np.array_equal(a, b)

    def test_deviation_bound(self):
        # 8 px amplitude, 3 terms: |sum a_n sin| <= 8 (1 + 1/2 + 1/3)
        bound = 8 * (1 + 1 / 2 + 1 / 3)
        mask = np.ones((181, 181), bool)  # circumscribed diameter ~256
        spec = CutSpec(amplitude=8.0, straight_prob=0.0)
        worst = 0.0
        for seed in range(200):
            worst = max(worst, _chord_deviation(generate_cut_line(mask, np.random.default_rng(seed), spec)).max())
        assert worst <= bound + 1e-9
        assert worst > 0.3 * bound

    def test_amplitude_limit(self):
        with pytest.raises(ValueError):
            CutSpec(amplitude=30.0).check(diagonal=200.0)


class TestSplit:
    def test_vertical_halves(self):
        mask = np.zeros((60, 60), bool)
        mask[10:50, 10:50] = True
        c, r = circumscribed_circle(mask)
        line = np.array([[c[0], c[1] - r], [c[0], c[1] + r]])
        a, b = split_region(mask, line)
        assert abs(a.sum() - b.sum()) <= 0.02 * mask.sum()
        assert np.array_equal(a | b, mask) and not (a & b).any()

    def test_partition_random(self):
        mask = np.ones((50, 70), bool)
        for seed in range(20):
            try:
                a, b = split_region(mask, generate_cut_line(mask, np.random.default_rng(seed)))
            except CutMissesRegion:
                continue
            assert np.array_equal(a | b, mask) and not (a & b).any()

    def test_misses(self):
        mask = np.zeros((60, 60), bool)
        mask[10:20, 10:20] = True
        far = np.array([[40.0, -10.0], [40.0, 80.0]])
        with pytest.raises(CutMissesRegion):
            split_region(mask, far)


class TestErosion:
    def test_square_10(self):
        m = np.zeros((14, 14), bool)
        m[2:12, 2:12] = True
        assert erode_fragment(m, 1).sum() == 64

    def test_square_3(self):
        m = np.zeros((7, 7), bool)
        m[2:5, 2:5] = True
        assert erode_fragment(m, 1).sum() == 1

    def test_vanish(self):
        m = np.zeros((6, 6), bool)
        m[2:4, 2:4] = True
        with pytest.raises(FragmentVanished):
            erode_fragment(m, 1)

    def test_iterations_range(self):
        with pytest.raises(ValueError):
            erode_fragment(np.ones((5, 5), bool), 6)


class TestJitter:
    def test_zeroed(self):
        pose = RigidTransform2D.from_angle(40.0, (3.0, 4.0))
        spec = RealismSpec(jitter_rotation_deg=0.0, jitter_translation_px=0.0)
        out = jitter_fragment(pose, np.random.default_rng(0), spec)
        assert np.allclose(out.translation, pose.translation) and np.allclose(out.rotation, pose.rotation)

    def test_bounds(self):
        rng = np.random.default_rng(1)
        pose = RigidTransform2D.from_angle(100.0, (10.0, 20.0))
        rots = trans = 0
        for _ in range(1000):
            out = jitter_fragment(pose, rng, mm_per_px=0.5)
            dr = (out.angle_deg - pose.angle_deg + 180) % 360 - 180
            dt = (out.translation - pose.translation) / 0.5
            assert abs(dr) <= 3.0 + 1e-9 and np.all(np.abs(dt) <= 3.0 + 1e-9)
            # exactly one of the two kinds per sample
            assert (abs(dr) < 1e-9) != np.allclose(dt, 0)
            rots += abs(dr) > 1e-9
            trans += not np.allclose(dt, 0)
        assert 400 < rots < 600 and rots + trans == 1000

    def test_deterministic(self):
        pose = RigidTransform2D()
        a = jitter_fragment(pose, np.random.default_rng(3))
        b = jitter_fragment(pose, np.random.default_rng(3))
        assert np.array_equal(a.translation, b.translation) and np.array_equal(a.rotation, b.rotation)


@pytest.fixture(scope="module")
def generated():
    rng = puzzle_rng(11, 0)
    return generate_puzzle(procedural_source(rng, 128), rng, GenConfig(canvas_px=128))


class TestPuzzle:
    def test_disjoint_and_gapped(self, generated):
        masks = [f.mask for f in generated.fragments]
        total = np.zeros_like(masks[0], dtype=int)
        for m in masks:
            total += m
        assert total.max() == 1
        assert total.sum() < masks[0].size

    def test_min_area(self, generated):
        assert len(generated.fragments) >= 2
        for f in generated.fragments:
            assert f.mask.sum() >= 16

    def test_fidelity(self, generated):
        assert abs(layout_fidelity(generated) - 1.0) <= 0.02

    def test_erosion_recorded(self, generated):
        assert all(0 <= f.erosion <= 5 for f in generated.fragments)


class TestDataset:
    def _digest(self, root):
        h = hashlib.sha256()
        for p in sorted(root.rglob("*")):
            if p.is_file():
                h.update(str(p.relative_to(root)).encode())
                h.update(p.read_bytes())
        return h.hexdigest()

    def test_layout_and_determinism(self, tmp_path):
        cfg = GenConfig(canvas_px=96)
        m1 = generate_dataset(tmp_path / "a", 5, seed=3, config=cfg)
        generate_dataset(tmp_path / "b", 5, seed=3, config=cfg)
        assert self._digest(tmp_path / "a") == self._digest(tmp_path / "b")
        assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
        assert len(m1["splits"]["train"]) == 4 and len(m1["splits"]["test"]) == 1
        pid = m1["splits"]["train"][0]
        pz = load_puzzle(tmp_path / "a" / "train" / pid)
        assert len(pz.pieces) == m1["pieces_per_puzzle"][int(pid.split("_")[1])]
        assert set(pz.ground_truth) == set(pz.piece_ids)

    def test_other_seed_differs(self, tmp_path):
        cfg = GenConfig(canvas_px=64, pieces=(2, 3))
        generate_dataset(tmp_path / "a", 2, seed=1, config=cfg)
        generate_dataset(tmp_path / "b", 2, seed=2, config=cfg)
        assert self._digest(tmp_path / "a") != self._digest(tmp_path / "b")

    def test_split_sizes_100(self):
        from reassemble.datagen import split_ids

        s = split_ids([f"p{i}" for i in range(100)], 7)
        assert len(s["train"]) == 80 and len(s["test"]) == 20
        assert not set(s["train"]) & set(s["test"])

    def test_unreadable_source(self, tmp_path):
        bad = tmp_path / "src"
        bad.mkdir()
        (bad / "x.png").write_bytes(b"not an image")
        with pytest.raises(SourceUnreadable):
            generate_dataset(tmp_path / "out", 1, sources=bad)

    def test_empty_sources(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(SourceUnreadable):
            generate_dataset(tmp_path / "out", 1, sources=tmp_path / "empty")

    def test_image_sources(self, tmp_path):
        from PIL import Image

        src = tmp_path / "src"
        src.mkdir()
        Image.fromarray(procedural_source(np.random.default_rng(0), 80)).save(src / "a.png")
        m = generate_dataset(tmp_path / "out", 2, seed=0, sources=src, config=GenConfig(pieces=(3, 4)))
        assert sum(m["pieces_per_puzzle"]) >= 4
