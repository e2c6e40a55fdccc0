import numpy as np
import pytest

from crystalpretrain.structures import CrystalStructure

CUBIC_FE_CIF = """\
data_fe
_cell_length_a 3.0
_cell_length_b 3.0
_cell_length_c 3.0
_cell_angle_alpha 90.0
_cell_angle_beta 90.0
_cell_angle_gamma 90.0
loop_
_atom_site_label
_atom_site_type_symbol
_atom_site_fract_x
_atom_site_fract_y
_atom_site_fract_z
Fe1 Fe 0.0 0.0 0.0
"""


@pytest.fixture
def cubic_fe():
    return CrystalStructure(np.diag([3.0, 3.0, 3.0]), [[0.0, 0.0, 0.0]], [26],
                            id="cubic-fe")


@pytest.fixture
def body_centered():
    return CrystalStructure(np.diag([4.0, 4.0, 4.0]),
                            [[0.0, 0.0, 0.0], [0.5, 0.5, 0.5]], [11, 17],
                            id="body-centered")


def random_structure(seed: int, max_atoms: int = 8) -> CrystalStructure:
    """Random orthorhombic cell with a handful of well-separated atoms."""
    gen = np.random.default_rng(seed)
    lengths = gen.uniform(3.0, 8.0, size=3)
    n = int(gen.integers(1, max_atoms + 1))
    # spread sites over a jittered grid so nothing collapses onto anything
    base = gen.permutation(27)[:n]
    coords = np.stack([(base // 9) / 3.0, (base % 9 // 3) / 3.0, (base % 3) / 3.0],
                      axis=1)
    coords = (coords + gen.uniform(0.02, 0.08, size=(n, 3))) % 1.0
    numbers = gen.integers(1, 84, size=n)
    return CrystalStructure(np.diag(lengths), coords, numbers, id=f"random-{seed}")
