"""Dense reference evaluator checked against numpy einsum."""

from __future__ import annotations

import numpy as np
import pytest

import spworks as sw
from spworks.oracle import MAX_GRID_CELLS, OracleError, dense_oracle


def _stmt(text: str) -> sw.Statement:
    return sw.statement_from_text(text)


def test_matmul_matches_einsum():
    rng = np.random.default_rng(0)
    b, c = rng.random((5, 7)), rng.random((7, 4))
    out = dense_oracle(_stmt("A(i, j) += B(i, k) * C(k, j)"), {"B": b, "C": c})
    assert np.allclose(out, np.einsum("ik,kj->ij", b, c))


def test_transposed_output_axes_follow_access_order():
    rng = np.random.default_rng(1)
    b, c = rng.random((5, 7)), rng.random((7, 4))
    out = dense_oracle(_stmt("A(j, i) += B(i, k) * C(k, j)"), {"B": b, "C": c})
    assert out.shape == (4, 5)
    assert np.allclose(out, np.einsum("ik,kj->ji", b, c))


def test_mttkrp_matches_einsum():
    rng = np.random.default_rng(2)
    x = rng.random((4, 5, 6))
    b, c = rng.random((5, 3)), rng.random((6, 3))
    stmt = _stmt("A(i, j) += X(i, k, l) * B(k, j) * C(l, j)")
    out = dense_oracle(stmt, {"X": x, "B": b, "C": c})
    assert np.allclose(out, np.einsum("ikl,kj,lj->ij", x, b, c))


def test_elementwise_add_and_constant():
    b = np.arange(6.0).reshape(2, 3)
    c = np.ones((2, 3))
    out = dense_oracle(_stmt("A(i, j) = B(i, j) + C(i, j) + 2"), {"B": b, "C": c})
    assert np.array_equal(out, b + c + 2.0)


def test_inner_product_reduces_to_scalar_per_row():
    b = np.array([[1.0, 2.0], [3.0, 4.0]])
    c = np.array([5.0, 6.0])
    out = dense_oracle(_stmt("a(i) += B(i, j) * c(j)"), {"B": b, "c": c})
    assert np.allclose(out, b @ c)


def test_forall_prefix_is_accepted_and_ignored_for_value():
    b, c = np.full((3, 3), 2.0), np.full((3, 3), 3.0)
    plain = dense_oracle(_stmt("A(i, j) += B(i, k) * C(k, j)"), {"B": b, "C": c})
    ordered = dense_oracle(
        _stmt("forall k, i, j: A(i, j) += B(i, k) * C(k, j)"), {"B": b, "C": c}
    )
    assert np.array_equal(plain, ordered)


def test_oracle_inputs_densifies_tensors():
    arr = np.array([[0.0, 1.0], [2.0, 0.0]])
    inputs = sw.oracle_inputs({"B": sw.from_dense(arr, sw.csr())})
    assert np.array_equal(inputs["B"], arr)


def test_guard_rejects_huge_iteration_spaces():
    side = int(MAX_GRID_CELLS ** (1 / 3)) + 1
    shapes = {"B": (side, side), "C": (side, side)}
    arrays = {k: np.broadcast_to(np.float64(1.0), v) for k, v in shapes.items()}
    with pytest.raises(OracleError, match="guard"):
        dense_oracle(_stmt("A(i, j) += B(i, k) * C(k, j)"), arrays)


def test_unbound_tensor_is_an_error():
    with pytest.raises(OracleError, match="no input array"):
        dense_oracle(_stmt("A(i, j) = B(i, j)"), {})


def test_rank_mismatch_is_an_error():
    with pytest.raises(OracleError, match="axes"):
        dense_oracle(_stmt("A(i, j) = B(i, j)"), {"B": np.zeros(3)})


def test_conflicting_extents_are_an_error():
    arrays = {"B": np.zeros((2, 3)), "C": np.zeros((4, 3))}
    with pytest.raises(OracleError, match="conflicting extents"):
        dense_oracle(_stmt("A(i, j) = B(i, j) + C(i, j)"), arrays)


def test_unbound_output_variable_is_an_error():
    with pytest.raises(OracleError, match="not bound"):
        dense_oracle(_stmt("A(i, j) = B(i, i)"), {"B": np.zeros((3, 3))})


def test_repeated_access_variable_is_an_error():
    with pytest.raises(OracleError, match="repeated variable"):
        dense_oracle(_stmt("a(i) += B(i, i)"), {"B": np.zeros((3, 3))})


def test_workspace_statement_is_rejected():
    stmt = _stmt("A(i, j) += B(i, k) * C(k, j)")
    ws = sw.WorkspaceDescriptor(
        order=1, dims=("J",), policy=sw.Policy.COORD, capacity=8, ow_order=(0,)
    )
    rewritten = sw.precompute(stmt, sw.nest_assign(stmt).rhs, ("j",), None, ws)
    with pytest.raises(OracleError, match="plain forall/assign"):
        dense_oracle(rewritten, {"B": np.zeros((2, 2)), "C": np.zeros((2, 2))})
