"""Atomic level schemes and tensor-product operator construction.

Everything downstream works on a :class:`Basis`: an ordered tensor product of
identical single-atom level sets. Atom 0 is the slowest-varying index, so for
two three-level atoms the basis states run gg, ge, gr, eg, ee, er, rg, re, rr.
Operators are kept sparse (CSR); density matrices are dense arrays owned by
the caller.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp

__all__ = [
    "LevelScheme",
    "Basis",
    "OperatorMatrix",
    "single_atom_matrix",
    "embed",
    "collective",
    "projector",
]


class LevelScheme(Enum):
    """Named single-atom level sets.

    REDUCED_GER    three levels g, e, r (effective Bell / GHZ tier)
    REDUCED_GEHR   four levels g, e, h, r (qutrit tier)
    FULL_SIX       g, e, h, p1, p2, r (two-photon ladder tier)
    """

    REDUCED_GER = ("g", "e", "r")
    REDUCED_GEHR = ("g", "e", "h", "r")
    FULL_SIX = ("g", "e", "h", "p1", "p2", "r")

    @property
    def levels(self) -> tuple[str, ...]:
        return self.value

    @property
    def n_levels(self) -> int:
        return len(self.value)

    def index(self, label: str) -> int:
        try:
            return self.value.index(label)
        except ValueError:
            raise KeyError(f"level {label!r} not in scheme {self.name}") from None


MAX_ATOMS = 6


@dataclass(frozen=True)
class Basis:
    """Tensor-product basis for ``n_atoms`` identical atoms."""

    scheme: LevelScheme
    n_atoms: int
    dim: int = field(init=False)

    def __post_init__(self):
        if not 1 <= self.n_atoms <= MAX_ATOMS:
            raise ValueError(f"n_atoms must be in 1..{MAX_ATOMS}, got {self.n_atoms}")
        object.__setattr__(self, "dim", self.scheme.n_levels**self.n_atoms)

    def encode(self, labels: tuple[str, ...] | str) -> int:
        """Index of the product state given per-atom level labels.

        Accepts a tuple like ('g', 'r') or, when every label is a single
        character, a plain string 'gr'.
        """
        if isinstance(labels, str):
            labels = tuple(labels)
        if len(labels) != self.n_atoms:
            raise ValueError(f"expected {self.n_atoms} labels, got {len(labels)}")
        idx = 0
        for lab in labels:
            idx = idx * self.scheme.n_levels + self.scheme.index(lab)
        return idx

    def decode(self, index: int) -> tuple[str, ...]:
        if not 0 <= index < self.dim:
            raise IndexError(f"state index {index} outside 0..{self.dim - 1}")
        out = []
        n = self.scheme.n_levels
        for _ in range(self.n_atoms):
            index, rem = divmod(index, n)
            out.append(self.scheme.levels[rem])
        return tuple(reversed(out))

    def states(self):
        """Iterate over all product-state label tuples in index order."""
        return itertools.product(self.scheme.levels, repeat=self.n_atoms)

    def basis_vector(self, labels) -> np.ndarray:
        v = np.zeros(self.dim, dtype=np.complex128)
        v[self.encode(labels)] = 1.0
        return v


@dataclass(frozen=True)
class OperatorMatrix:
    """A sparse operator tied to its basis, so mismatched algebra fails fast."""

    basis: Basis
    matrix: sp.csr_matrix

    def __post_init__(self):
        m = self.matrix
        if m.shape != (self.basis.dim, self.basis.dim):
            raise ValueError(
                f"matrix shape {m.shape} does not match basis dim {self.basis.dim}"
            )
        if not sp.isspmatrix_csr(m):
            object.__setattr__(self, "matrix", sp.csr_matrix(m))

    def _check(self, other: "OperatorMatrix"):
        if other.basis != self.basis:
            raise ValueError("operator bases differ")

    def __add__(self, other: "OperatorMatrix") -> "OperatorMatrix":
        self._check(other)
        return OperatorMatrix(self.basis, (self.matrix + other.matrix).tocsr())

    def __sub__(self, other: "OperatorMatrix") -> "OperatorMatrix":
        self._check(other)
        return OperatorMatrix(self.basis, (self.matrix - other.matrix).tocsr())

    def __mul__(self, scalar) -> "OperatorMatrix":
        return OperatorMatrix(self.basis, (self.matrix * scalar).tocsr())

    __rmul__ = __mul__

    def __matmul__(self, other: "OperatorMatrix") -> "OperatorMatrix":
        self._check(other)
        return OperatorMatrix(self.basis, (self.matrix @ other.matrix).tocsr())

    def dag(self) -> "OperatorMatrix":
        return OperatorMatrix(self.basis, self.matrix.conj().T.tocsr())

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def is_hermitian(self, tol: float = 1e-12) -> bool:
        d = self.matrix - self.matrix.conj().T
        return d.nnz == 0 or abs(d).max() <= tol

    def expect(self, rho: np.ndarray) -> complex:
        """tr(Oρ) for a dense density matrix."""
        return complex((self.matrix @ rho).trace())


def single_atom_matrix(
    scheme: LevelScheme, entries: dict[tuple[str, str], complex]
) -> sp.csr_matrix:
    """Single-atom operator from a {(row_level, col_level): weight} map,
    i.e. sum of weight*|row><col|."""
    n = scheme.n_levels
    m = sp.dok_matrix((n, n), dtype=np.complex128)
    for (row, col), w in entries.items():
        m[scheme.index(row), scheme.index(col)] += w
    return m.tocsr()


def embed(basis: Basis, atom: int, entries) -> OperatorMatrix:
    """Lift a single-atom operator onto ``atom`` (0-based) with identities
    elsewhere.

    ``entries`` is either a {(row, col): weight} level map or an already-built
    (n_levels x n_levels) sparse/dense matrix.
    """
    if not 0 <= atom < basis.n_atoms:
        raise IndexError(f"atom index {atom} outside 0..{basis.n_atoms - 1}")
    if isinstance(entries, dict):
        op = single_atom_matrix(basis.scheme, entries)
    else:
        op = sp.csr_matrix(entries, dtype=np.complex128)
        if op.shape != (basis.scheme.n_levels,) * 2:
            raise ValueError("single-atom matrix has wrong shape")
    n = basis.scheme.n_levels
    left = sp.identity(n**atom, dtype=np.complex128, format="csr")
    right = sp.identity(n ** (basis.n_atoms - atom - 1), dtype=np.complex128, format="csr")
    full = sp.kron(sp.kron(left, op, format="csr"), right, format="csr")
    return OperatorMatrix(basis, full)


def collective(basis: Basis, entries) -> OperatorMatrix:
    """Sum of the same single-atom operator over every atom."""
    total = sp.csr_matrix((basis.dim, basis.dim), dtype=np.complex128)
    for j in range(basis.n_atoms):
        total = total + embed(basis, j, entries).matrix
    return OperatorMatrix(basis, total.tocsr())


def projector(basis: Basis, pattern=None, vector: np.ndarray | None = None) -> OperatorMatrix:
    """Projector onto a product-state pattern or onto a pure state vector.

    ``pattern`` assigns a level label per atom; ``None`` entries leave that
    atom unconstrained (rank multiplies by n_levels). ``vector`` builds the
    rank-1 projector |v><v| instead.
    """
    if (pattern is None) == (vector is None):
        raise ValueError("give exactly one of pattern, vector")
    if vector is not None:
        v = np.asarray(vector, dtype=np.complex128)
        if v.shape != (basis.dim,):
            raise ValueError("vector length does not match basis")
        nrm = np.linalg.norm(v)
        if nrm == 0:
            raise ValueError("zero vector")
        v = v / nrm
        return OperatorMatrix(basis, sp.csr_matrix(np.outer(v, v.conj())))
    if len(pattern) != basis.n_atoms:
        raise ValueError("pattern length does not match atom count")
    diag = np.ones(1)
    n = basis.scheme.n_levels
    for lab in pattern:
        if lab is None:
            single = np.ones(n)
        else:
            single = np.zeros(n)
            single[basis.scheme.index(lab)] = 1.0
        diag = np.kron(diag, single)
    return OperatorMatrix(basis, sp.diags(diag.astype(np.complex128), format="csr"))
