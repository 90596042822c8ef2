"""Level-based sparse tensor storage.

A tensor is stored level by level. Each level is either dense (an extent,
positions computed arithmetically, random insert allowed) or compressed
(pos/crd segment arrays, ordered append and ordered iteration only). The
mode ordering permutes tensor modes onto storage levels, which is how CSR
and CSC share one level layout. COO is a separate storage variant holding
one coordinate array per level plus the value array.

Values are float64. Coordinates are 32-bit unsigned, matching the 4-byte
accounting used by the memory estimator.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple, Sequence, TypeVar

import numpy as np

CRD_DTYPE = np.uint32
VAL_DTYPE = np.float64

_T = TypeVar("_T")


class TensorError(ValueError):
    pass


class LevelKind(enum.Enum):
    DENSE = "dense"
    COMPRESSED = "compressed"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class LevelFormat:
    kind: LevelKind

    def __str__(self) -> str:
        return str(self.kind)


DENSE = LevelFormat(LevelKind.DENSE)
COMPRESSED = LevelFormat(LevelKind.COMPRESSED)


@dataclass(frozen=True)
class Format:
    """Per-level storage kinds plus the mode-to-level permutation.

    ``mode_ordering[l]`` is the tensor mode stored at level ``l``. For COO
    storage the level kinds are nominal (every level behaves like an ordered
    coordinate list); ``unique`` records whether duplicates are permitted.
    """

    levels: tuple[LevelFormat, ...]
    mode_ordering: tuple[int, ...]
    coo: bool = False
    unique: bool = True
    name: str | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if sorted(self.mode_ordering) != list(range(len(self.levels))):
            raise TensorError(
                f"mode_ordering {self.mode_ordering} is not a permutation of the "
                f"{len(self.levels)} levels"
            )

    @property
    def order(self) -> int:
        return len(self.levels)

    def level_kind(self, level: int) -> LevelKind:
        return self.levels[level].kind

    def all_dense(self) -> bool:
        return not self.coo and all(lf.kind is LevelKind.DENSE for lf in self.levels)

    def __str__(self) -> str:
        if self.name:
            return self.name
        if self.coo:
            return f"COO({self.order})"
        kinds = ",".join(str(lf) for lf in self.levels)
        return f"Format([{kinds}], order={self.mode_ordering})"


def csr() -> Format:
    return Format((DENSE, COMPRESSED), (0, 1), name="CSR")


def csc() -> Format:
    return Format((DENSE, COMPRESSED), (1, 0), name="CSC")


def dcsr() -> Format:
    return Format((COMPRESSED, COMPRESSED), (0, 1), name="DCSR")


def dcsc() -> Format:
    return Format((COMPRESSED, COMPRESSED), (1, 0), name="DCSC")


def csf(order: int) -> Format:
    if order < 3:
        raise TensorError("CSF is defined for order >= 3; use DCSR/DCSC for matrices")
    return Format((COMPRESSED,) * order, tuple(range(order)), name=f"CSF({order})")


def coo(order: int, unique: bool = True) -> Format:
    return Format((COMPRESSED,) * order, tuple(range(order)), coo=True, unique=unique,
                  name=f"COO({order})")


def dense(order: int) -> Format:
    return Format((DENSE,) * order, tuple(range(order)), name=f"Dense({order})")


def sparse_vector() -> Format:
    return Format((COMPRESSED,), (0,), name="SparseVec")


def dense_vector() -> Format:
    return Format((DENSE,), (0,), name="DenseVec")


def format_from_name(name: str, order: int) -> Format:
    """Resolve a format by its user-facing name for a tensor of given order."""
    key = name.strip().lower()
    named: dict[str, Format | None] = {
        "csr": csr() if order == 2 else None,
        "csc": csc() if order == 2 else None,
        "dcsr": dcsr() if order == 2 else None,
        "dcsc": dcsc() if order == 2 else None,
        "csf": csf(order) if order >= 3 else None,
        "coo": coo(order),
        "dense": dense(order),
        "sv": sparse_vector() if order == 1 else None,
        "dv": dense_vector() if order == 1 else None,
    }
    if key not in named:
        raise TensorError(f"unknown format name {name!r}")
    fmt = named[key]
    if fmt is None:
        raise TensorError(f"format {name!r} does not apply to an order-{order} tensor")
    return fmt


def access_map(access_vars: Sequence[_T], fmt: Format) -> tuple[_T, ...]:
    """Permute access variables from mode order into storage-level order."""
    if len(access_vars) != fmt.order:
        raise TensorError(
            f"access with {len(access_vars)} variables does not match an "
            f"order-{fmt.order} format"
        )
    return tuple(access_vars[m] for m in fmt.mode_ordering)


class Component(NamedTuple):
    """One stored entry: coordinates in mode order plus the value."""

    crds: tuple[int, ...]
    val: float


@dataclass
class DenseLevel:
    extent: int


@dataclass
class CompressedLevel:
    pos: np.ndarray
    crd: np.ndarray


@dataclass
class Tensor:
    dims: tuple[int, ...]
    format: Format
    levels: tuple[DenseLevel | CompressedLevel, ...] | None
    coo_coords: tuple[np.ndarray, ...] | None
    vals: np.ndarray

    @property
    def order(self) -> int:
        return len(self.dims)

    @property
    def nnz(self) -> int:
        """Number of stored values (explicit zeros included)."""
        return len(self.vals)

    def level_extent(self, level: int) -> int:
        return self.dims[self.format.mode_ordering[level]]

    def level_coordinates(self) -> tuple[np.ndarray, ...]:
        """Coordinate of every stored value at every storage level."""
        if self.format.coo:
            return self.coo_coords  # type: ignore[return-value]
        n = len(self.vals)
        coords: list[np.ndarray] = [None] * self.order  # type: ignore[list-item]
        child = np.arange(n, dtype=np.int64)
        for l in range(self.order - 1, -1, -1):
            lvl = self.levels[l]  # type: ignore[index]
            if isinstance(lvl, DenseLevel):
                coords[l] = (child % lvl.extent).astype(CRD_DTYPE)
                child = child // lvl.extent
            else:
                coords[l] = lvl.crd[child].astype(CRD_DTYPE)
                child = np.searchsorted(lvl.pos, child, side="right") - 1
        return tuple(coords)

    def mode_coordinates(self) -> tuple[np.ndarray, ...]:
        """Coordinate arrays in mode order (inverse of the level permutation)."""
        by_level = self.level_coordinates()
        out: list[np.ndarray] = [None] * self.order  # type: ignore[list-item]
        for l, m in enumerate(self.format.mode_ordering):
            out[m] = by_level[l]
        return tuple(out)

    def components(self) -> list[Component]:
        """All stored entries in storage order, explicit zeros included."""
        by_mode = self.mode_coordinates()
        vals = self.vals
        return [
            Component(tuple(int(by_mode[m][i]) for m in range(self.order)), float(vals[i]))
            for i in range(len(vals))
        ]

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dims, dtype=VAL_DTYPE)
        if len(self.vals) == 0:
            return out
        by_mode = self.mode_coordinates()
        # duplicate coordinates are only legal for non-unique COO
        np.add.at(out, tuple(c.astype(np.int64) for c in by_mode), self.vals)
        return out


def iterate_level(tensor: Tensor, level: int, parent_position: int) -> Iterator[tuple[int, int]]:
    """Yield (coordinate, child position) pairs of one storage level.

    Dense levels enumerate every coordinate; compressed levels walk the crd
    segment owned by the parent position.
    """
    if tensor.format.coo:
        raise TensorError("COO storage has no per-level iterators; use components()")
    lvl = tensor.levels[level]  # type: ignore[index]
    if isinstance(lvl, DenseLevel):
        if not 0 <= parent_position:
            raise TensorError(f"parent position {parent_position} out of range")
        base = parent_position * lvl.extent
        for c in range(lvl.extent):
            yield c, base + c
    else:
        if parent_position + 1 >= len(lvl.pos):
            raise TensorError(f"parent position {parent_position} out of range")
        for p in range(int(lvl.pos[parent_position]), int(lvl.pos[parent_position + 1])):
            yield int(lvl.crd[p]), p


def _as_arrays(components: Iterable[Component], order: int) -> tuple[list[np.ndarray], np.ndarray]:
    comps = list(components)
    vals = np.array([c.val for c in comps], dtype=VAL_DTYPE)
    by_mode = [
        np.array([c.crds[m] for c in comps], dtype=np.int64) for m in range(order)
    ]
    return by_mode, vals


def compress_coo(
    components: Iterable[Component],
    fmt: Format,
    dims: Sequence[int],
    *,
    validate: bool = True,
) -> Tensor:
    """Pack components, sorted by the target's access order, into a tensor.

    Components must be unique and sorted lexicographically by their
    level-order (access-order) coordinates. Explicit zeros are stored.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != fmt.order:
        raise TensorError(f"{len(dims)} dims for an order-{fmt.order} format")
    by_mode, vals = _as_arrays(components, fmt.order)
    return compress_arrays(by_mode, vals, fmt, dims, validate=validate)


def compress_arrays(
    mode_coords: Sequence[np.ndarray],
    vals: np.ndarray,
    fmt: Format,
    dims: tuple[int, ...],
    *,
    validate: bool = True,
) -> Tensor:
    """Array-based fast path of compress_coo. Coordinates are per mode."""
    n = len(vals)
    level_coords = [np.asarray(mode_coords[m], dtype=np.int64) for m in fmt.mode_ordering]
    extents = [dims[m] for m in fmt.mode_ordering]
    if validate:
        for l, (c, e) in enumerate(zip(level_coords, extents)):
            if n and (c.min() < 0 or c.max() >= e):
                raise TensorError(
                    f"coordinate out of bounds at level {l}: extent {e}"
                )
        if n > 1:
            order_ok = np.zeros(n - 1, dtype=bool)
            tied = np.ones(n - 1, dtype=bool)
            for c in level_coords:
                order_ok |= tied & (c[:-1] < c[1:])
                tied &= c[:-1] == c[1:]
            if tied.any():
                raise TensorError("duplicate coordinates in component list")
            if not order_ok.all():
                raise TensorError("components are not sorted by the target access order")

    if fmt.coo:
        return Tensor(
            dims=dims,
            format=fmt,
            levels=None,
            coo_coords=tuple(c.astype(CRD_DTYPE) for c in level_coords),
            vals=np.asarray(vals, dtype=VAL_DTYPE).copy(),
        )

    parent = np.zeros(n, dtype=np.int64)
    parent_count = 1
    levels: list[DenseLevel | CompressedLevel] = []
    for lf, c, extent in zip(fmt.levels, level_coords, extents):
        if lf.kind is LevelKind.DENSE:
            parent = parent * extent + c
            parent_count *= extent
            levels.append(DenseLevel(extent))
        else:
            changed = np.ones(n, dtype=bool)
            if n:
                changed[1:] = (parent[1:] != parent[:-1]) | (c[1:] != c[:-1])
            starts = np.flatnonzero(changed)
            crd = c[starts].astype(CRD_DTYPE)
            counts = np.bincount(parent[starts], minlength=parent_count)
            pos = np.zeros(parent_count + 1, dtype=np.int64)
            np.cumsum(counts, out=pos[1:])
            levels.append(CompressedLevel(pos=pos, crd=crd))
            parent = np.cumsum(changed) - 1
            parent_count = len(crd)

    out_vals = np.zeros(parent_count, dtype=VAL_DTYPE)
    if n:
        out_vals[parent] = vals
    return Tensor(dims=dims, format=fmt, levels=tuple(levels), coo_coords=None, vals=out_vals)


def from_unsorted(
    components: Iterable[Component],
    fmt: Format,
    dims: Sequence[int],
    *,
    sum_duplicates: bool = False,
) -> Tensor:
    """Sort (and optionally reduce) arbitrary components, then compress."""
    dims = tuple(int(d) for d in dims)
    by_mode, vals = _as_arrays(components, fmt.order)
    level_coords = [by_mode[m] for m in fmt.mode_ordering]
    if len(vals):
        order = np.lexsort(tuple(reversed(level_coords)))
        by_mode = [c[order] for c in by_mode]
        vals = vals[order]
        if sum_duplicates:
            level_sorted = [by_mode[m] for m in fmt.mode_ordering]
            changed = np.zeros(len(vals), dtype=bool)
            changed[0] = True
            for c in level_sorted:
                changed[1:] |= c[1:] != c[:-1]
            starts = np.flatnonzero(changed)
            vals = np.add.reduceat(vals, starts)
            by_mode = [c[starts] for c in by_mode]
    return compress_arrays(by_mode, vals, fmt, dims)


def from_dense(array: np.ndarray, fmt: Format | None = None) -> Tensor:
    """Build a tensor from a dense array; defaults to an all-dense format."""
    arr = np.asarray(array, dtype=VAL_DTYPE)
    fmt = fmt or dense(arr.ndim)
    if fmt.all_dense():
        levels = tuple(DenseLevel(e) for e in access_map(arr.shape, fmt))
        vals = np.transpose(arr, fmt.mode_ordering).reshape(-1).copy()
        return Tensor(dims=arr.shape, format=fmt, levels=levels, coo_coords=None, vals=vals)
    idx = np.nonzero(arr)
    comps = [Component(tuple(int(i[k]) for i in idx), float(arr[tuple(i[k] for i in idx)]))
             for k in range(len(idx[0]))]
    return from_unsorted(comps, fmt, arr.shape)


def reformat(tensor: Tensor, fmt: Format) -> Tensor:
    """Re-store the same entries under another format of equal order."""
    if fmt.order != tensor.order:
        raise TensorError(
            f"cannot reformat an order-{tensor.order} tensor as order-{fmt.order}"
        )
    by_mode = [c.astype(np.int64) for c in tensor.mode_coordinates()]
    vals = tensor.vals
    if len(vals):
        level_coords = [by_mode[m] for m in fmt.mode_ordering]
        order = np.lexsort(tuple(reversed(level_coords)))
        by_mode = [c[order] for c in by_mode]
        vals = vals[order]
    return compress_arrays(by_mode, vals, fmt, tensor.dims)


def tensors_equal(a: Tensor, b: Tensor) -> bool:
    """Structural equality: format, dims, and every storage array."""
    if a.format != b.format or a.dims != b.dims:
        return False
    if not np.array_equal(a.vals, b.vals):
        return False
    if a.format.coo:
        return all(np.array_equal(x, y) for x, y in zip(a.coo_coords, b.coo_coords))
    for la, lb in zip(a.levels, b.levels):  # type: ignore[arg-type]
        if isinstance(la, DenseLevel) != isinstance(lb, DenseLevel):
            return False
        if isinstance(la, DenseLevel):
            if la.extent != lb.extent:  # type: ignore[union-attr]
                return False
        else:
            if not (np.array_equal(la.pos, lb.pos) and np.array_equal(la.crd, lb.crd)):  # type: ignore[union-attr]
                return False
    return True
