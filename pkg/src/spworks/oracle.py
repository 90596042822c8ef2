"""Reference evaluator over the full dense coordinate grid.

Evaluates a statement at every coordinate of the combined index space and
reduces over non-output variables, independently of the sparse formats, the
analysis, and the workspace runtime. Used as ground truth in tests and by
the CLI's --verify flag.
"""

from __future__ import annotations

import numpy as np

from .ir import Access, Add, Assign, Const, Expr, Forall, IndexVar, Mul, Statement
from .tensor import Tensor, VAL_DTYPE

MAX_GRID_CELLS = 10**7


class OracleError(ValueError):
    pass


def _expr_accesses(expr: Expr) -> list[Access]:
    if isinstance(expr, Access):
        return [expr]
    if isinstance(expr, (Add, Mul)):
        return _expr_accesses(expr.lhs) + _expr_accesses(expr.rhs)
    return []


def _unnest(stmt: Statement) -> Assign:
    while isinstance(stmt, Forall):
        stmt = stmt.body
    if not isinstance(stmt, Assign):
        raise OracleError("the oracle evaluates plain forall/assign statements only")
    return stmt


def _var_extents(assign: Assign, arrays: dict[str, np.ndarray]) -> dict[IndexVar, int]:
    extents: dict[IndexVar, int] = {}
    for acc in _expr_accesses(assign.rhs):
        if acc.tensor not in arrays:
            raise OracleError(f"no input array bound for tensor {acc.tensor!r}")
        arr = arrays[acc.tensor]
        if arr.ndim != len(acc.vars):
            raise OracleError(
                f"{acc.tensor} is accessed with {len(acc.vars)} variables but the "
                f"bound array has {arr.ndim} axes"
            )
        for v, e in zip(acc.vars, arr.shape):
            if extents.setdefault(v, e) != e:
                raise OracleError(f"conflicting extents for variable {v.name}")
    for v in assign.lhs.vars:
        if v not in extents:
            raise OracleError(f"output variable {v.name} is not bound by any input")
    return extents


def _broadcast(acc: Access, axes: dict[IndexVar, int], n: int, arrays: dict[str, np.ndarray]) -> np.ndarray:
    if len(set(acc.vars)) != len(acc.vars):
        raise OracleError(f"repeated variable in access {acc.tensor}")
    arr = np.asarray(arrays[acc.tensor], dtype=VAL_DTYPE)
    targets = [axes[v] for v in acc.vars]
    perm = np.argsort(targets)
    arr = np.transpose(arr, perm)
    shape = [1] * n
    for v in acc.vars:
        shape[axes[v]] = arrays[acc.tensor].shape[acc.vars.index(v)]
    return arr.reshape(shape)


def _eval(expr: Expr, axes: dict[IndexVar, int], n: int, arrays: dict[str, np.ndarray]):
    if isinstance(expr, Const):
        return np.float64(expr.value)
    if isinstance(expr, Access):
        return _broadcast(expr, axes, n, arrays)
    if isinstance(expr, Add):
        return _eval(expr.lhs, axes, n, arrays) + _eval(expr.rhs, axes, n, arrays)
    if isinstance(expr, Mul):
        return _eval(expr.lhs, axes, n, arrays) * _eval(expr.rhs, axes, n, arrays)
    raise OracleError(f"unsupported expression node {type(expr).__name__}")


def dense_oracle(stmt: Statement, arrays: dict[str, np.ndarray]) -> np.ndarray:
    """Evaluate ``stmt`` densely; the result axes follow the output access modes."""
    assign = _unnest(stmt)
    extents = _var_extents(assign, arrays)
    order = sorted(extents, key=lambda v: v.name)
    axes = {v: i for i, v in enumerate(order)}
    cells = 1
    for v in order:
        cells *= extents[v]
    if cells > MAX_GRID_CELLS:
        raise OracleError(f"iteration space of {cells} cells exceeds the oracle guard")

    grid = _eval(assign.rhs, axes, len(order), arrays)
    grid = np.broadcast_to(grid, [extents[v] for v in order])
    out_vars = assign.lhs.vars
    reduce_axes = tuple(axes[v] for v in order if v not in out_vars)
    reduced = grid.sum(axis=reduce_axes) if reduce_axes else np.array(grid, dtype=VAL_DTYPE)
    kept = [v for v in order if v in out_vars]
    perm = [kept.index(v) for v in out_vars]
    return np.ascontiguousarray(np.transpose(reduced, perm))


def oracle_inputs(tensors: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: t.to_dense() for name, t in tensors.items()}
