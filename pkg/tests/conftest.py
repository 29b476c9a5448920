import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def square(n_per_side: int = 1, size: float = 1.0) -> np.ndarray:
    """CCW square with ``n_per_side`` samples along each edge."""
    t = np.arange(n_per_side) / n_per_side * size
    bottom = np.column_stack([t, np.zeros_like(t)])
    right = np.column_stack([np.full_like(t, size), t])
    top = np.column_stack([size - t, np.full_like(t, size)])
    left = np.column_stack([np.zeros_like(t), size - t])
    return np.vstack([bottom, right, top, left])


def random_star_polygon(rng, n: int, r_min: float = 0.5, r_max: float = 1.0) -> np.ndarray:
    """Simple CCW polygon: sorted angles with random radii."""
    ang = np.sort(rng.uniform(0, 2 * np.pi, n))
    rad = rng.uniform(r_min, r_max, n)
    return np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])


def two_piece_puzzle(seed: int = 0, canvas_px: int = 96):
    """Square source split by one straight cut; no erosion, no jitter."""
    from reassemble.datagen import CutSpec, GenConfig, RealismSpec, generate_puzzle, procedural_source, puzzle_rng

    cfg = GenConfig(canvas_px=canvas_px, pieces=(2, 2), cut=CutSpec(straight_prob=1.0),
                    realism=RealismSpec(erosion_iterations=(0, 0), jitter_rotation_deg=0.0, jitter_translation_px=0.0))
    rng = puzzle_rng(seed, 0)
    return generate_puzzle(procedural_source(rng, canvas_px), rng, cfg).to_puzzle()
