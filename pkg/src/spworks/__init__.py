"""Sparse tensor kernels with automatic workspace insertion.

The pipeline: parse or build a tensor index expression, optionally schedule
it (reorder, split, fuse, pos), classify how its loop order scatters into
the result, insert a sparse or dense workspace when scattering demands one,
lower to an imperative loop plan, and execute that plan with the
insert-sort-merge runtime.
"""

from __future__ import annotations

from .analysis import (
    AnalysisError,
    Classification,
    InsertionAction,
    InsertionDecision,
    classification_report,
    classify,
    compare_orders,
    insert_sparse_workspace,
    ordering_measures,
    plan_insertion,
    reconstruct_input_order,
)
from .io import (
    CSV_FIELDS,
    IoError,
    SYNTHETIC_RNG,
    estimate_memory,
    read_frostt,
    read_matrix_market,
    synthetic_matrix,
    synthetic_pair,
    write_csv,
    write_frostt,
    write_matrix_market,
)
from .ir import (
    Access,
    Add,
    Assign,
    Const,
    Expr,
    Forall,
    Fuse,
    IndexVar,
    IrError,
    Mul,
    ParseError,
    Pos,
    Reorder,
    Split,
    Statement,
    VarKind,
    Where,
    WorkspaceDescriptor,
    apply_schedule,
    from_einsum,
    fuse,
    nest_assign,
    nest_vars,
    parse_einsum,
    pos,
    precompute,
    reorder,
    split,
    statement_from_text,
)
from .ism import (
    AccArray,
    AccFullError,
    AllArray,
    Counters,
    IsmEngine,
    IsmError,
    Policy,
    ceil_log2,
    grow_capacity,
    hash_default_l,
)
from .lowering import (
    ExecutionOptions,
    ExecutionResult,
    LoweringError,
    Plan,
    execute,
    lower,
    print_plan,
)
from .oracle import dense_oracle, oracle_inputs
from .tensor import (
    Component,
    Format,
    LevelKind,
    Tensor,
    TensorError,
    access_map,
    compress_coo,
    coo,
    csc,
    csf,
    csr,
    dcsc,
    dcsr,
    dense,
    dense_vector,
    format_from_name,
    from_dense,
    from_unsorted,
    iterate_level,
    reformat,
    sparse_vector,
    tensors_equal,
)

__version__ = "0.1.0"

__all__ = [
    "AccArray",
    "AccFullError",
    "Access",
    "Add",
    "AllArray",
    "AnalysisError",
    "Assign",
    "CSV_FIELDS",
    "Classification",
    "Component",
    "Const",
    "Counters",
    "ExecutionOptions",
    "ExecutionResult",
    "Expr",
    "Forall",
    "Format",
    "Fuse",
    "IndexVar",
    "InsertionAction",
    "InsertionDecision",
    "IoError",
    "IrError",
    "IsmEngine",
    "IsmError",
    "LevelKind",
    "LoweringError",
    "Mul",
    "ParseError",
    "Plan",
    "Policy",
    "Pos",
    "Reorder",
    "SYNTHETIC_RNG",
    "Split",
    "Statement",
    "Tensor",
    "TensorError",
    "VarKind",
    "Where",
    "WorkspaceDescriptor",
    "access_map",
    "apply_schedule",
    "ceil_log2",
    "classification_report",
    "classify",
    "compare_orders",
    "compress_coo",
    "coo",
    "csc",
    "csf",
    "csr",
    "dcsc",
    "dcsr",
    "dense",
    "dense_oracle",
    "dense_vector",
    "estimate_memory",
    "execute",
    "format_from_name",
    "from_dense",
    "from_einsum",
    "from_unsorted",
    "fuse",
    "grow_capacity",
    "hash_default_l",
    "insert_sparse_workspace",
    "iterate_level",
    "lower",
    "nest_assign",
    "nest_vars",
    "oracle_inputs",
    "ordering_measures",
    "parse_einsum",
    "plan_insertion",
    "pos",
    "precompute",
    "print_plan",
    "read_frostt",
    "read_matrix_market",
    "reconstruct_input_order",
    "reformat",
    "reorder",
    "sparse_vector",
    "split",
    "statement_from_text",
    "synthetic_matrix",
    "synthetic_pair",
    "tensors_equal",
    "write_csv",
    "write_frostt",
    "write_matrix_market",
]
