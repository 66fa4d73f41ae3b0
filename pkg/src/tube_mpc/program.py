# Copyright 2022 [PT BOOKBOT INDONESIA](https://bookbot.id/)

# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at

#     http://www.apache.org/licenses/LICENSE-2.0

# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Solver-neutral standard form shared by the online problem, the terminal horizon
check and the conic backend.

A `ConicProgram` minimizes `c^T x + c0` subject to `A_ub x <= b_ub`, `A_eq x = b_eq`
and second-order cone blocks `F x + g in SOC`, where the first entry of `F x + g`
is the cone's scalar side.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import scipy.sparse as sp

from src.tube_mpc.errors import AssemblyError, DimensionError
from src.tube_mpc.geometry import FloatArray, as_matrix, as_vector

Scalar = Union[int, float, np.floating]


class Affine:
    """Vector-valued affine function of the stacked decision vector.

    Terms are keyed by the first column of the variable block they act on, so two
    expressions over the same blocks add coefficient-wise.

    Attributes:
        terms (Dict[int, FloatArray]): Block start column -> (m, width) coefficients.
        const (FloatArray): Constant part of length m.
    """

    # numpy operands defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, terms: Dict[int, FloatArray], const: FloatArray):
        self.terms = terms
        self.const = as_vector(const)

    @property
    def size(self) -> int:
        return int(self.const.shape[0])

    @classmethod
    def constant(cls, value: Union[Scalar, FloatArray]) -> "Affine":
        return cls({}, as_vector(value))

    def __add__(self, other: Union["Affine", Scalar, FloatArray]) -> "Affine":
        if not isinstance(other, Affine):
            other = Affine.constant(np.broadcast_to(as_vector(other), (self.size,)))
        if other.size != self.size:
            raise DimensionError(f"Adding affine maps of sizes {self.size} and {other.size}")
        terms = {k: v.copy() for k, v in self.terms.items()}
        for k, v in other.terms.items():
            terms[k] = terms[k] + v if k in terms else v.copy()
        return Affine(terms, self.const + other.const)

    __radd__ = __add__

    def __neg__(self) -> "Affine":
        return Affine({k: -v for k, v in self.terms.items()}, -self.const)

    def __sub__(self, other: Union["Affine", Scalar, FloatArray]) -> "Affine":
        return self + (-other)

    def __rsub__(self, other: Union[Scalar, FloatArray]) -> "Affine":
        return (-self) + other

    def __mul__(self, scalar: Scalar) -> "Affine":
        s = float(scalar)
        return Affine({k: s * v for k, v in self.terms.items()}, s * self.const)

    __rmul__ = __mul__

    def __rmatmul__(self, M: FloatArray) -> "Affine":
        M = as_matrix(M)
        if M.shape[1] != self.size:
            raise DimensionError(f"Matrix {M.shape} applied to affine map of size {self.size}")
        return Affine({k: M @ v for k, v in self.terms.items()}, M @ self.const)

    def __getitem__(self, index: Union[int, slice]) -> "Affine":
        rows = np.arange(self.size)[index]
        rows = np.atleast_1d(rows)
        return Affine({k: v[rows] for k, v in self.terms.items()}, self.const[rows])

    @staticmethod
    def vstack(parts: List["Affine"]) -> "Affine":
        sizes = [p.size for p in parts]
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        widths: Dict[int, int] = {}
        for p in parts:
            for k, v in p.terms.items():
                widths[k] = v.shape[1]
        terms = {k: np.zeros((offsets[-1], w)) for k, w in widths.items()}
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            for k, v in p.terms.items():
                terms[k][lo:hi] = v
        return Affine(terms, np.concatenate([p.const for p in parts]))

    def evaluate(self, x: FloatArray) -> FloatArray:
        out = self.const.copy()
        for k, v in self.terms.items():
            out = out + v @ x[k:k + v.shape[1]]
        return out

    def to_sparse(self, n_vars: int) -> sp.csr_matrix:
        rows, cols, vals = [], [], []
        for k, v in self.terms.items():
            r, c = np.nonzero(v)
            rows.append(r)
            cols.append(c + k)
            vals.append(v[r, c])
        if not rows:
            return sp.csr_matrix((self.size, n_vars))
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.size, n_vars),
        )


@dataclass
class ConeBlock:
    F: sp.csr_matrix
    g: FloatArray
    tag: str

    @property
    def dim(self) -> int:
        return int(self.g.shape[0])


@dataclass
class ConicProgram:
    """Standard-form program with named variable blocks.

    Attributes:
        n_vars (int): Number of scalar decision variables.
        c (FloatArray): Linear objective.
        c0 (float): Objective constant.
        A_ub (sp.csr_matrix): Inequality rows.
        b_ub (FloatArray): Inequality offsets.
        ub_tags (List[str]): Tag of each inequality row.
        A_eq (sp.csr_matrix): Equality rows.
        b_eq (FloatArray): Equality offsets.
        eq_tags (List[str]): Tag of each equality row.
        cones (List[ConeBlock]): Second-order cone blocks.
        index (Dict[str, slice]): Variable block name -> columns.
        outputs (Dict[str, Affine]): Named expressions of the solution.
        meta (Dict[str, float]): Scalars recorded at assembly.
    """

    n_vars: int
    c: FloatArray
    c0: float
    A_ub: sp.csr_matrix
    b_ub: FloatArray
    ub_tags: List[str]
    A_eq: sp.csr_matrix
    b_eq: FloatArray
    eq_tags: List[str]
    cones: List[ConeBlock]
    index: Dict[str, slice]
    outputs: Dict[str, Affine] = field(default_factory=dict)
    meta: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for block in self.cones:
            if block.dim < 2:
                raise AssemblyError(f"Cone block '{block.tag}' has dimension {block.dim}")
            if block.F.shape[1] != self.n_vars:
                raise AssemblyError(f"Cone block '{block.tag}' references unknown columns")

    @property
    def n_linear_rows(self) -> int:
        return int(self.A_ub.shape[0])

    @property
    def n_equality_rows(self) -> int:
        return int(self.A_eq.shape[0])

    def value(self, x: FloatArray, name: str) -> FloatArray:
        return np.asarray(x[self.index[name]])

    def output(self, x: FloatArray, name: str) -> FloatArray:
        return self.outputs[name].evaluate(x)

    def violations(self, x: FloatArray) -> List[Tuple[str, float]]:
        """Scaled violation of every row; positive values are violations.

        Each violation is divided by `1 + ` the magnitude of the terms in the row, so
        large objective values and small tube radii are judged alike.
        """
        out: List[Tuple[str, float]] = []
        if self.n_linear_rows:
            lhs = self.A_ub @ x
            scale = 1.0 + np.abs(self.b_ub) + abs(self.A_ub) @ np.abs(x)
            out.extend(zip(self.ub_tags, (lhs - self.b_ub) / scale))
        if self.n_equality_rows:
            lhs = self.A_eq @ x
            scale = 1.0 + np.abs(self.b_eq) + abs(self.A_eq) @ np.abs(x)
            out.extend(zip(self.eq_tags, np.abs(lhs - self.b_eq) / scale))
        for block in self.cones:
            y = block.F @ x + block.g
            norm = float(np.linalg.norm(y[1:]))
            out.append((block.tag, (norm - y[0]) / (1.0 + abs(y[0]) + norm)))
        return out

    def worst_violation(self, x: FloatArray) -> Tuple[str, float]:
        rows = self.violations(x)
        if not rows:
            return ("", 0.0)
        return max(rows, key=lambda row: row[1])

    def to_text(self) -> str:
        """Plain-text dump: variable blocks, objective, rows and cones in COO form."""
        lines = [f"vars {self.n_vars}"]
        for name, cols in self.index.items():
            lines.append(f"block {name} {cols.start} {cols.stop}")
        lines.append("objective " + " ".join(f"{i}:{v:.17g}" for i, v in enumerate(self.c) if v))
        lines.append(f"objective_const {self.c0:.17g}")
        for kind, A, b, tags in (
            ("le", self.A_ub, self.b_ub, self.ub_tags),
            ("eq", self.A_eq, self.b_eq, self.eq_tags),
        ):
            for r in range(A.shape[0]):
                row = A.getrow(r)
                coefs = " ".join(f"{j}:{v:.17g}" for j, v in zip(row.indices, row.data))
                lines.append(f"{kind} {tags[r]} {b[r]:.17g} {coefs}")
        for block in self.cones:
            lines.append(f"soc {block.tag} {block.dim}")
            for r in range(block.dim):
                row = block.F.getrow(r)
                coefs = " ".join(f"{j}:{v:.17g}" for j, v in zip(row.indices, row.data))
                lines.append(f"  {block.g[r]:.17g} {coefs}")
        return "\n".join(lines) + "\n"


class ProgramBuilder:
    """Collects variables, rows and cones, then emits a `ConicProgram`.

    Args:
        relaxed (bool, optional): Adds a nonnegative slack that every relaxable
            inequality may use, and minimizes it instead of the objective.
            Defaults to False.
    """

    def __init__(self, relaxed: bool = False):
        self.n_vars = 0
        self.index: Dict[str, slice] = {}
        self._ub: List[Tuple[Affine, str]] = []
        self._eq: List[Tuple[Affine, str]] = []
        self._cones: List[Tuple[Affine, str]] = []
        self._objective: Optional[Affine] = None
        self.outputs: Dict[str, Affine] = {}
        self.relaxed = relaxed
        self.slack: Optional[Affine] = None
        if relaxed:
            self.slack = self.add_variable("slack", 1)
            self.add_le(-self.slack, "slack_nonneg")

    def add_variable(self, name: str, size: int) -> Affine:
        if name in self.index:
            raise AssemblyError(f"Variable block '{name}' already exists")
        start = self.n_vars
        self.index[name] = slice(start, start + size)
        self.n_vars += size
        return Affine({start: np.eye(size)}, np.zeros(size))

    def add_le(self, expr: Affine, tag: str, relaxable: bool = False) -> None:
        """Adds rows `expr <= 0`."""
        if relaxable and self.slack is not None:
            expr = expr - Affine({self.slack_start: np.ones((expr.size, 1))}, np.zeros(expr.size))
        self._ub.append((expr, tag))

    def add_eq(self, expr: Affine, tag: str) -> None:
        """Adds rows `expr = 0`."""
        self._eq.append((expr, tag))

    def add_soc(self, t: Union[Affine, Scalar], x: Affine, tag: str) -> None:
        """Adds ||x|| <= t."""
        if not isinstance(t, Affine):
            t = Affine.constant(t)
        if t.size != 1:
            raise DimensionError("Cone scalar side must have size 1")
        self._cones.append((Affine.vstack([t, x]), tag))

    def expose(self, name: str, expr: Affine) -> None:
        """Registers a named expression that `ConicProgram.output` evaluates."""
        self.outputs[name] = expr

    def minimize(self, expr: Affine) -> None:
        if expr.size != 1:
            raise DimensionError("Objective must be scalar")
        self._objective = expr

    @property
    def slack_start(self) -> int:
        return self.index["slack"].start

    def build(self) -> ConicProgram:
        n = self.n_vars
        objective = self.slack if self.relaxed else self._objective
        if objective is None:
            objective = Affine.constant(0.0)
        c = np.asarray(objective.to_sparse(n).todense()).reshape(-1)

        def stack(rows: List[Tuple[Affine, str]]) -> Tuple[sp.csr_matrix, FloatArray, List[str]]:
            if not rows:
                return sp.csr_matrix((0, n)), np.zeros(0), []
            A = sp.vstack([expr.to_sparse(n) for expr, _ in rows], format="csr")
            b = -np.concatenate([expr.const for expr, _ in rows])
            tags = [tag for expr, tag in rows for _ in range(expr.size)]
            return A, b, tags

        A_ub, b_ub, ub_tags = stack(self._ub)
        A_eq, b_eq, eq_tags = stack(self._eq)
        cones = [ConeBlock(expr.to_sparse(n), expr.const.copy(), tag) for expr, tag in self._cones]
        return ConicProgram(
            n_vars=n,
            c=c,
            c0=float(objective.const[0]),
            A_ub=A_ub,
            b_ub=b_ub,
            ub_tags=ub_tags,
            A_eq=A_eq,
            b_eq=b_eq,
            eq_tags=eq_tags,
            cones=cones,
            index=dict(self.index),
            outputs=dict(self.outputs),
        )
