import numpy as np
import pytest

from errors import DimensionMismatchError, SingularOperatorError, StructureError
from manifold_stats import FidelityStructure
from spd_core import random_spd, spd_inner
from tangent_algebra import (
    TangentOperator, TangentStack, block_diagonal, build_congruence_operator,
    dim_from_tangent_size, extract_block, flat_to_stack, flat_to_sym, regularized_inverse,
    sym_to_flat, symmetric_basis, tangent_size,
)


def _sym(rng, dim):
    x = rng.standard_normal((dim, dim))
    return 0.5 * (x + x.T)


@pytest.mark.parametrize("dim, q", [(1, 1), (2, 3), (3, 6), (4, 10), (6, 21)])
def test_tangent_size(dim, q):
    assert tangent_size(dim) == q
    assert dim_from_tangent_size(q) == dim


def test_non_triangular_size_rejected():
    with pytest.raises(DimensionMismatchError):
        dim_from_tangent_size(4)


def test_flat_layout_diagonal_then_scaled_upper():
    x = np.array([[1.0, 2.0, 3.0],
                  [2.0, 4.0, 5.0],
                  [3.0, 5.0, 6.0]])
    v = sym_to_flat(x)
    s = np.sqrt(2.0)
    assert v == pytest.approx([1.0, 4.0, 6.0, 2 * s, 3 * s, 5 * s])


@pytest.mark.parametrize("dim", [2, 3, 5])
def test_flat_is_isometry(rng, dim):
    x, y = _sym(rng, dim), _sym(rng, dim)
    assert float(sym_to_flat(x) @ sym_to_flat(y)) == pytest.approx(float(np.sum(x * y)))
    assert np.allclose(flat_to_sym(sym_to_flat(x), dim).entries, x)


def test_basis_is_orthonormal():
    basis = symmetric_basis(3)
    gram = np.einsum("kij,lij->kl", basis, basis)
    assert np.allclose(gram, np.eye(6))


def test_stack_flat_concatenates_slots(rng):
    parts = [_sym(rng, 2), _sym(rng, 2)]
    stack = TangentStack(tuple(parts))
    v = stack.to_flat()
    assert v.shape == (6,)
    back = flat_to_stack(v, 2)
    assert len(back) == 2
    assert np.allclose(back[1].entries, parts[1])
    with pytest.raises(DimensionMismatchError):
        flat_to_stack(np.zeros(5), 2)


def test_operator_shape_checked():
    with pytest.raises(DimensionMismatchError):
        TangentOperator(2, np.eye(4))


def test_rectangular_operator_apply(rng):
    op = TangentOperator(2, rng.standard_normal((3, 6)))
    assert op.row_slots == 1 and op.col_slots == 2 and not op.is_square
    stack = TangentStack((_sym(rng, 2), _sym(rng, 2)))
    out = op.apply(stack)
    assert out.count == 1
    assert np.allclose(out.to_flat(), op.matrix @ stack.to_flat())


def test_attach_structure_zeroes_cross_group_blocks(rng):
    structure = FidelityStructure.running_example()
    q = tangent_size(2)
    full = TangentOperator(2, random_spd(3 * q, rng).entries)
    op = full.attach_structure(structure)
    assert op.structure is structure
    assert np.all(op.matrix[:2 * q, 2 * q:] == 0.0)
    assert np.all(op.matrix[2 * q:, :2 * q] == 0.0)
    assert np.array_equal(op.matrix[:2 * q, :2 * q], full.matrix[:2 * q, :2 * q])
    with pytest.raises(StructureError):
        TangentOperator.identity(2, 2).attach_structure(structure)


def test_congruence_operator_maps_to_sandwich(rng):
    ys = [random_spd(3, rng), random_spd(3, rng)]
    c = [_sym(rng, 3), _sym(rng, 3)]
    op = build_congruence_operator(ys)
    out = op.apply(TangentStack(tuple(c)))
    for y, ci, oi in zip(ys, c, out):
        assert np.allclose(oi.entries, y.inverse @ ci @ y.inverse)


def test_congruence_operator_gives_weighted_inner(rng):
    sigma = random_spd(3, rng)
    u, v = _sym(rng, 3), _sym(rng, 3)
    g = build_congruence_operator([sigma]).matrix
    assert float(sym_to_flat(u) @ g @ sym_to_flat(v)) == pytest.approx(spd_inner(sigma, u, v))


def test_regularized_inverse_identity():
    inv = regularized_inverse(TangentOperator.identity(2, 2), eps=0.0)
    assert np.allclose(inv.matrix, np.eye(6))


def test_regularized_inverse_shift(rng):
    g = TangentOperator(2, random_spd(3, rng).entries)
    inv = regularized_inverse(g, eps=1e-8)
    shifted = g.matrix + 1e-8 * g.trace() / 3 * np.eye(3)
    assert np.allclose(inv.matrix @ shifted, np.eye(3), atol=1e-10)


def test_regularized_inverse_rejects_singular():
    g = TangentOperator(2, np.diag([1.0, 1.0, 0.0]))
    with pytest.raises(SingularOperatorError):
        regularized_inverse(g, eps=0.0)
    with pytest.raises(ValueError):
        regularized_inverse(g, eps=-1.0)


def test_extract_block_and_block_diagonal(rng):
    a = TangentOperator(2, random_spd(3, rng).entries)
    b = TangentOperator(2, random_spd(3, rng).entries)
    op = block_diagonal([a, b])
    assert np.array_equal(extract_block(op, [1], [1]).matrix, b.matrix)
    assert np.all(extract_block(op, [0], [1]).matrix == 0.0)
    with pytest.raises(IndexError):
        extract_block(op, [2], [0])


def test_matmul_and_transpose(rng):
    a = TangentOperator(2, rng.standard_normal((3, 6)))
    b = TangentOperator(2, rng.standard_normal((6, 3)))
    assert (a @ b).matrix.shape == (3, 3)
    assert np.array_equal(a.transpose().matrix, a.matrix.T)
    with pytest.raises(DimensionMismatchError):
        a @ a


def test_leading_block_of_inverse_is_inverse_of_schur_complement(rng):
    q = tangent_size(2)
    g = TangentOperator(2, random_spd(3 * q, rng, condition=10.0).entries)
    lo = [1, 2]
    cross = extract_block(g, [0], lo) @ regularized_inverse(extract_block(g, lo, lo), eps=0.0) \
        @ extract_block(g, lo, [0])
    schur = extract_block(g, [0], [0]).matrix - cross.matrix
    schur = TangentOperator(2, 0.5 * (schur + schur.T))
    leading = extract_block(regularized_inverse(g, eps=0.0), [0], [0])
    assert np.allclose(leading.matrix, regularized_inverse(schur, eps=0.0).matrix,
                       rtol=1e-9, atol=1e-12)
