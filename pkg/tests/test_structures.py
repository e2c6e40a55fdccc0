import math

import numpy as np
import pytest

from crystalpretrain.structures import (CrystalStructure, MalformedNumber,
                                        MissingTag, NonP1Symmetry, StructureError,
                                        UnknownElement, lattice_from_parameters,
                                        parse_cif, wrap_frac, write_cif)
from conftest import CUBIC_FE_CIF, random_structure


def test_parse_cubic_fe():
    s = parse_cif(CUBIC_FE_CIF)
    assert np.array_equal(s.lattice, np.diag([3.0, 3.0, 3.0]))
    assert s.atomic_numbers.tolist() == [26]
    assert np.array_equal(s.frac_coords, [[0.0, 0.0, 0.0]])


def test_parse_wraps_coordinates():
    text = CUBIC_FE_CIF.replace("Fe1 Fe 0.0 0.0 0.0", "Fe1 Fe 1.25 -0.25 0.5")
    s = parse_cif(text)
    assert s.frac_coords[0].tolist() == [0.25, 0.75, 0.5]


def test_parse_hexagonal_lattice():
    text = """\
data_hex
_cell_length_a 2.0
_cell_length_b 2.0
_cell_length_c 3.0
_cell_angle_alpha 90.0
_cell_angle_beta 90.0
_cell_angle_gamma 120.0
loop_
_atom_site_type_symbol
_atom_site_fract_x
_atom_site_fract_y
_atom_site_fract_z
C 0.0 0.0 0.0
"""
    s = parse_cif(text)
    expected = np.array([
        [2.0, 0.0, 0.0],
        [-1.0, math.sqrt(3.0), 0.0],
        [0.0, 0.0, 3.0],
    ])
    assert np.allclose(s.lattice, expected, atol=1e-12)


@pytest.mark.parametrize("tag", [
    "_cell_length_a", "_cell_length_c", "_cell_angle_gamma"])
def test_missing_cell_tag(tag):
    text = "\n".join(line for line in CUBIC_FE_CIF.splitlines()
                     if not line.startswith(tag))
    with pytest.raises(MissingTag) as err:
        parse_cif(text)
    assert err.value.tag == tag


def test_missing_site_loop():
    text = CUBIC_FE_CIF.split("loop_")[0]
    with pytest.raises(MissingTag):
        parse_cif(text)


def test_unknown_element():
    with pytest.raises(UnknownElement) as err:
        parse_cif(CUBIC_FE_CIF.replace("Fe1 Fe", "Qq1 Qq"))
    assert err.value.symbol == "Qq"


def test_element_symbol_variants():
    assert parse_cif(CUBIC_FE_CIF.replace("Fe1 Fe", "fe1 FE")).atomic_numbers[0] == 26
    assert parse_cif(CUBIC_FE_CIF.replace("Fe1 Fe", "Fe2+ Fe2+")).atomic_numbers[0] == 26


def test_non_p1_symmetry_loop():
    text = CUBIC_FE_CIF + """\
loop_
_symmetry_equiv_pos_as_xyz
'x, y, z'
'-x, -y, -z'
"""
    with pytest.raises(NonP1Symmetry):
        parse_cif(text)


def test_identity_symmetry_loop_accepted():
    text = CUBIC_FE_CIF + "loop_\n_symmetry_equiv_pos_as_xyz\n'x, y, z'\n"
    assert parse_cif(text).n_sites == 1


def test_non_p1_space_group_name():
    with pytest.raises(NonP1Symmetry):
        parse_cif("_symmetry_space_group_name_H-M 'P 21/c'\n" + CUBIC_FE_CIF)


def test_malformed_number_reports_line():
    text = CUBIC_FE_CIF.replace("_cell_length_b 3.0", "_cell_length_b oops")
    with pytest.raises(MalformedNumber) as err:
        parse_cif(text)
    assert err.value.line_number == 3


def test_number_with_uncertainty_suffix():
    s = parse_cif(CUBIC_FE_CIF.replace("_cell_length_a 3.0", "_cell_length_a 3.0(2)"))
    assert s.lattice[0, 0] == 3.0


def test_wrap_frac_floor_modulo():
    wrapped = wrap_frac(np.array([[1.25, -0.25, 0.5]]))
    assert wrapped.tolist() == [[0.25, 0.75, 0.5]]
    assert wrap_frac(np.array([[-1e-18, 1.0, 2.0]])).tolist() == [[0.0, 0.0, 0.0]]


def test_structure_invariants():
    with pytest.raises(StructureError):
        CrystalStructure(np.zeros((3, 3)), [[0, 0, 0]], [1])
    with pytest.raises(StructureError):
        CrystalStructure(-np.eye(3), [[0, 0, 0]], [1])
    with pytest.raises(StructureError):
        CrystalStructure(np.eye(3), np.zeros((0, 3)), [])
    with pytest.raises(StructureError):
        CrystalStructure(np.eye(3), [[0, 0, 0]], [200])


def test_cell_parameters_round_trip():
    for seed in range(10):
        gen = np.random.default_rng(seed)
        a, b, c = gen.uniform(2.0, 9.0, size=3)
        alpha, beta, gamma = gen.uniform(60.0, 120.0, size=3)
        try:
            lattice = lattice_from_parameters(a, b, c, alpha, beta, gamma)
        except StructureError:
            continue  # impossible angle combination
        s = CrystalStructure(lattice, [[0.1, 0.2, 0.3]], [6])
        recovered = s.cell_parameters()
        assert np.allclose(recovered, [a, b, c, alpha, beta, gamma], atol=1e-8)


def test_parse_write_round_trip():
    for seed in range(8):
        original = random_structure(seed)
        again = parse_cif(write_cif(original))
        assert np.allclose(again.lattice, original.lattice, atol=1e-10)
        assert np.allclose(again.frac_coords, original.frac_coords, atol=1e-10)
        assert np.array_equal(again.atomic_numbers, original.atomic_numbers)


def test_write_then_parse_preserves_parsed_structure():
    s = parse_cif(CUBIC_FE_CIF)
    again = parse_cif(write_cif(s))
    assert np.allclose(again.lattice, s.lattice, atol=1e-10)
    assert np.allclose(again.frac_coords, s.frac_coords, atol=1e-10)
