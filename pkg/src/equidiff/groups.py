"""Numerical representation theory of SO(2) and its cyclic subgroups C_u.

Everything here is plain linear algebra over float64: group elements are
planar rotation angles (optionally tagged as exact elements of a cyclic
group so permutation matrices stay bit-exact), and representations are
ordered direct sums of trivial / irreducible / regular blocks with an
optional change of basis.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.linalg

TWO_PI = 2.0 * math.pi

# 1e-12 for closed-form trig identities, 1e-10 for composed double-precision
# identity checks (headroom above accumulated machine epsilon).
TRIG_TOL = 1e-12
IDENTITY_TOL = 1e-10


class InvalidElementError(ValueError):
    """A group element is incompatible with the cyclic group it must act in."""


class DecompositionError(RuntimeError):
    """A change of basis failed to block-diagonalize a representation."""


def _freeze(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class GroupElement:
    """A planar rotation; optionally an exact element of C_u.

    ``index``/``order`` are kept for cyclic elements so that regular
    representations evaluate to exact permutation matrices.
    """

    angle: float
    order: int | None = None
    index: int | None = None

    @staticmethod
    def from_angle(angle: float) -> "GroupElement":
        return GroupElement(float(angle) % TWO_PI)

    @staticmethod
    def from_index(index: int, order: int) -> "GroupElement":
        if order < 1:
            raise InvalidElementError(f"cyclic group order must be >= 1, got {order}")
        m = int(index) % order
        return GroupElement(TWO_PI * m / order, order=order, index=m)

    @staticmethod
    def identity() -> "GroupElement":
        return GroupElement.from_index(0, 1)

    def compose(self, other: "GroupElement") -> "GroupElement":
        if (
            self.order is not None
            and other.order is not None
            and self.order == other.order
        ):
            return GroupElement.from_index(self.index + other.index, self.order)
        return GroupElement.from_angle(self.angle + other.angle)

    def inverse(self) -> "GroupElement":
        if self.order is not None:
            return GroupElement.from_index(-self.index, self.order)
        return GroupElement.from_angle(-self.angle)

    def cyclic_index(self, u: int) -> int:
        """Index of this element inside C_u, or InvalidElementError.

        Exact when the element carries a compatible cyclic tag; otherwise the
        angle is snapped to the nearest multiple of 2*pi/u if within 1e-9.
        """
        if self.order is not None and (u * self.index) % self.order == 0:
            return (u * self.index // self.order) % u
        t = self.angle * u / TWO_PI
        m = round(t)
        if abs(t - m) > 1e-9 * max(1, u):
            raise InvalidElementError(
                f"angle {self.angle!r} is not an element of C_{u}"
            )
        return int(m) % u


def cyclic_elements(u: int) -> list[GroupElement]:
    """All u elements of C_u in index order."""
    return [GroupElement.from_index(m, u) for m in range(u)]


# ---------------------------------------------------------------------------
# Elementary blocks
# ---------------------------------------------------------------------------

def irrep_matrix(omega: int, g: GroupElement) -> np.ndarray:
    """2x2 rotation block with angular frequency omega."""
    if omega < 1:
        raise ValueError(f"irrep frequency must be >= 1, got {omega}")
    a = omega * g.angle
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s], [s, c]])


def regular_matrix(u: int, m: int) -> np.ndarray:
    """Permutation matrix of C_u cyclically shifting coordinates by m.

    Acting on (x_1, ..., x_u) yields (x_{u-m+1}, ..., x_u, x_1, ..., x_{u-m}).
    """
    if not 0 <= m < u:
        raise InvalidElementError(f"element index {m} outside C_{u}")
    out = np.zeros((u, u))
    idx = np.arange(u)
    out[idx, (idx - m) % u] = 1.0
    return out


# ---------------------------------------------------------------------------
# Representations
# ---------------------------------------------------------------------------

_KINDS = ("trivial", "irrep", "regular")


@dataclass(frozen=True)
class Term:
    """One homogeneous block of a direct sum: `mult` copies of a base rep."""

    kind: str
    mult: int = 1
    omega: int | None = None
    u: int | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown term kind {self.kind!r}")
        if self.mult < 1:
            raise ValueError("multiplicity must be >= 1")
        if self.kind == "irrep" and (self.omega is None or self.omega < 1):
            raise ValueError("irrep terms need a frequency omega >= 1")
        if self.kind == "regular" and (self.u is None or self.u < 1):
            raise ValueError("regular terms need a group order u >= 1")

    @property
    def block_dim(self) -> int:
        return {"trivial": 1, "irrep": 2, "regular": self.u or 0}[self.kind]

    @property
    def dim(self) -> int:
        return self.mult * self.block_dim

    def block_matrix(self, g: GroupElement) -> np.ndarray:
        if self.kind == "trivial":
            return np.eye(1)
        if self.kind == "irrep":
            return irrep_matrix(self.omega, g)
        return regular_matrix(self.u, g.cyclic_index(self.u))

    def atom_key(self) -> tuple:
        return (self.kind, self.omega if self.kind == "irrep" else self.u)


class Representation:
    """An ordered direct sum of terms, optionally conjugated by a basis change.

    With basis change P present, evaluation is P^-1 . blockdiag(g) . P, so a
    vector x in the representation space has block coordinates P x.
    """

    def __init__(
        self,
        terms: Sequence[Term],
        basis_change: np.ndarray | None = None,
        basis_change_inv: np.ndarray | None = None,
    ):
        self.terms: tuple[Term, ...] = tuple(terms)
        if not self.terms:
            raise ValueError("a representation needs at least one term")
        self.dim: int = sum(t.dim for t in self.terms)
        if basis_change is None:
            self.basis_change = None
            self.basis_change_inv = None
        else:
            P = np.asarray(basis_change, dtype=np.float64)
            if P.shape != (self.dim, self.dim):
                raise ValueError(
                    f"basis change shape {P.shape} does not match dim {self.dim}"
                )
            cond = np.linalg.cond(P)
            if not np.isfinite(cond):
                raise ValueError("basis change matrix is singular")
            self.basis_change = _freeze(P)
            inv = np.linalg.inv(P) if basis_change_inv is None else basis_change_inv
            self.basis_change_inv = _freeze(inv)

    # -- structure ---------------------------------------------------------

    def atoms(self) -> list[tuple[tuple, int, int]]:
        """Flatten multiplicities: list of (atom_key, dim, offset)."""
        out = []
        off = 0
        for t in self.terms:
            for _ in range(t.mult):
                out.append((t.atom_key(), t.block_dim, off))
                off += t.block_dim
        return out

    def regular_orders(self) -> set[int]:
        return {t.u for t in self.terms if t.kind == "regular"}

    # -- evaluation ---------------------------------------------------------

    def block_matrix(self, g: GroupElement) -> np.ndarray:
        out = np.zeros((self.dim, self.dim))
        off = 0
        for t in self.terms:
            b = t.block_matrix(g)
            d = t.block_dim
            for _ in range(t.mult):
                out[off : off + d, off : off + d] = b
                off += d
        return out

    def matrix(self, g: GroupElement) -> np.ndarray:
        D = self.block_matrix(g)
        if self.basis_change is None:
            return D
        return self.basis_change_inv @ D @ self.basis_change

    __call__ = matrix

    # -- serialization -------------------------------------------------------

    def to_json(self) -> dict:
        terms = []
        for t in self.terms:
            entry: dict = {"kind": t.kind, "mult": t.mult}
            if t.kind == "irrep":
                entry["omega"] = t.omega
            if t.kind == "regular":
                entry["u"] = t.u
            terms.append(entry)
        P = None if self.basis_change is None else self.basis_change.tolist()
        return {"terms": terms, "basis_change": P}

    @staticmethod
    def from_json(obj: dict) -> "Representation":
        terms = [
            Term(
                kind=e["kind"],
                mult=e.get("mult", 1),
                omega=e.get("omega"),
                u=e.get("u"),
            )
            for e in obj["terms"]
        ]
        P = obj.get("basis_change")
        return Representation(terms, None if P is None else np.array(P))

    def __repr__(self):
        parts = []
        for t in self.terms:
            if t.kind == "trivial":
                base = "rho0"
            elif t.kind == "irrep":
                base = f"rho{t.omega}"
            else:
                base = f"reg{t.u}"
            parts.append(base if t.mult == 1 else f"{base}^{t.mult}")
        p = "" if self.basis_change is None else ", P"
        return f"Representation({' + '.join(parts)}{p})"


def trivial(mult: int = 1) -> Representation:
    return Representation([Term("trivial", mult)])


def irrep(omega: int, mult: int = 1) -> Representation:
    return Representation([Term("irrep", mult, omega=omega)])


def regular(u: int, mult: int = 1) -> Representation:
    return Representation([Term("regular", mult, u=u)])


def direct_sum(*reps: Representation) -> Representation:
    """Concatenate representations; block-diagonal basis changes are merged."""
    terms: list[Term] = []
    for r in reps:
        terms.extend(r.terms)
    if all(r.basis_change is None for r in reps):
        return Representation(terms)
    P = scipy.linalg.block_diag(
        *[r.basis_change if r.basis_change is not None else np.eye(r.dim) for r in reps]
    )
    P_inv = scipy.linalg.block_diag(
        *[
            r.basis_change_inv if r.basis_change_inv is not None else np.eye(r.dim)
            for r in reps
        ]
    )
    return Representation(terms, P, P_inv)


def with_basis_change(rep: Representation, P: np.ndarray) -> Representation:
    if rep.basis_change is not None:
        raise ValueError("representation already carries a basis change")
    return Representation(rep.terms, P)


def rep_matrix(rep: Representation, g: GroupElement) -> np.ndarray:
    return rep.matrix(g)


# ---------------------------------------------------------------------------
# Conjugation actions of planar rotations on SE(3) / SO(3) matrices
# ---------------------------------------------------------------------------
#
# Vec_r flattens a matrix row by row (left-to-right, top-to-bottom); Vec_c
# flattens column by column.  All closed forms below assume Vec_r ordering.

def rotation_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def transform_z(g: GroupElement) -> np.ndarray:
    """4x4 homogeneous world-frame rotation about z (no translation)."""
    T = np.eye(4)
    T[:3, :3] = rotation_z(g.angle)
    return T


def conjugation_action_se3(g: GroupElement) -> np.ndarray:
    """16x16 action on Vec_r(A) realizing A -> T_g A T_g^-1."""
    c, s = math.cos(g.angle), math.sin(g.angle)
    s2h = math.sin(2.0 * g.angle) / 2.0  # = c*s
    M = np.zeros((16, 16))
    # 2x2 row/column mixing of the upper-left block of A
    M[0, 0], M[0, 1], M[0, 4], M[0, 5] = c * c, -s2h, -s2h, s * s
    M[1, 0], M[1, 1], M[1, 4], M[1, 5] = s2h, c * c, -s * s, -s2h
    M[4, 0], M[4, 1], M[4, 4], M[4, 5] = s2h, -s * s, c * c, -s2h
    M[5, 0], M[5, 1], M[5, 4], M[5, 5] = s * s, s2h, s2h, c * c
    # columns 2..3 of rows 0..1: left rotation only
    M[2, 2], M[2, 6] = c, -s
    M[3, 3], M[3, 7] = c, -s
    M[6, 2], M[6, 6] = s, c
    M[7, 3], M[7, 7] = s, c
    # rows 2..3 of columns 0..1: right rotation only
    M[8:10, 8:10] = [[c, -s], [s, c]]
    M[10, 10] = M[11, 11] = 1.0
    M[12:14, 12:14] = [[c, -s], [s, c]]
    M[14, 14] = M[15, 15] = 1.0
    return M


def conjugation_action_so3(g: GroupElement) -> np.ndarray:
    """9x9 action on Vec_r(R) realizing R -> R_g R R_g^-1."""
    c, s = math.cos(g.angle), math.sin(g.angle)
    cs, ss, cc = c * s, s * s, c * c
    M = np.zeros((9, 9))
    M[0, 0], M[0, 1], M[0, 3], M[0, 4] = cc, -cs, -cs, ss
    M[1, 0], M[1, 1], M[1, 3], M[1, 4] = cs, cc, -ss, -cs
    M[3, 0], M[3, 1], M[3, 3], M[3, 4] = cs, -ss, cc, -cs
    M[4, 0], M[4, 1], M[4, 3], M[4, 4] = ss, cs, cs, cc
    M[2, 2], M[2, 5] = c, -s
    M[5, 2], M[5, 5] = s, c
    M[6, 6], M[6, 7] = c, -s
    M[7, 6], M[7, 7] = s, c
    M[8, 8] = 1.0
    return M


# Change of basis taking Vec_r(A) to coordinates in which the conjugation
# action is rho0^6 + rho1^4 + rho2 (rows are functionals of the matrix
# entries: sums/differences of the 2x2 rotation block, then the entries that
# rotate under one-sided multiplication, then the frequency-2 pair).
P_CONJUGATION_SE3 = _freeze(np.array([
    [1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
    [0, 1, 0, 0, -1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
    [0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0],
    [0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0],
    [0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0],
    [0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1],
    [0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
    [0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0],
    [0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
    [0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0],
    [0, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0],
    [0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0],
    [0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0],
    [0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0],
    [0, 1, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
    [-1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
], dtype=np.float64))

SE3_CONJUGATION_BLOCKS = Representation(
    [Term("trivial", 6), Term("irrep", 4, omega=1), Term("irrep", 1, omega=2)]
)

# 9x9 analog for Vec_r(R) with blocks rho0^3 + rho1^2 + rho2.
P_CONJUGATION_SO3 = _freeze(np.array([
    [1, 0, 0, 0, 1, 0, 0, 0, 0],
    [0, -1, 0, 1, 0, 0, 0, 0, 0],
    [0, 0, 0, 0, 0, 0, 0, 0, 1],
    [0, 0, 1, 0, 0, 0, 0, 0, 0],
    [0, 0, 0, 0, 0, 1, 0, 0, 0],
    [0, 0, 0, 0, 0, 0, 1, 0, 0],
    [0, 0, 0, 0, 0, 0, 0, 1, 0],
    [0, 1, 0, 1, 0, 0, 0, 0, 0],
    [-1, 0, 0, 0, 1, 0, 0, 0, 0],
], dtype=np.float64))

SO3_CONJUGATION_BLOCKS = Representation(
    [Term("trivial", 3), Term("irrep", 2, omega=1), Term("irrep", 1, omega=2)]
)


@dataclass(frozen=True)
class ConjugationDecomposition:
    """A raw matrix action together with P and its irrep block form.

    Invariant (validated at construction): P raw(g) P^-1 equals the block
    form at every sampled g.
    """

    raw_rep: Callable[[GroupElement], np.ndarray] = field(repr=False)
    basis_change: np.ndarray = field(repr=False)
    block_form: Representation

    def residual(self, samples: Iterable[GroupElement]) -> float:
        P = self.basis_change
        P_inv = np.linalg.inv(P)
        worst = 0.0
        for g in samples:
            lhs = P @ self.raw_rep(g) @ P_inv
            rhs = self.block_form.block_matrix(g)
            worst = max(worst, float(np.max(np.abs(lhs - rhs))))
        return worst


def _sample_angles(n: int, seed: int = 0) -> list[GroupElement]:
    rng = np.random.default_rng(seed)
    return [GroupElement.from_angle(a) for a in rng.uniform(0.0, TWO_PI, size=n)]


def _discover_basis(
    raw_rep: Callable[[GroupElement], np.ndarray],
    dim: int,
    generator: GroupElement,
) -> tuple[np.ndarray, Representation]:
    """Numerically find P via the real Schur form of raw_rep at a generator.

    Works for SO(2)-style actions whose value at the generator is orthogonal
    with eigenvalue angles omega*g0 small enough to read frequencies off
    unambiguously.
    """
    M = raw_rep(generator)
    if M.shape != (dim, dim):
        raise DecompositionError(f"raw rep returned shape {M.shape}, expected {(dim, dim)}")
    if np.max(np.abs(M.T @ M - np.eye(dim))) > 1e-8:
        raise DecompositionError("raw representation is not orthogonal at the generator")
    S, Z = scipy.linalg.schur(M, output="real")
    # For a normal matrix the real Schur form is block diagonal with 1x1
    # entries (+-1) and 2x2 rotation blocks.
    blocks: list[tuple[int, list[np.ndarray]]] = []  # (omega, basis rows)
    i = 0
    g0 = generator.angle
    while i < dim:
        if i + 1 < dim and abs(S[i + 1, i]) > 1e-9:
            theta = math.atan2(S[i + 1, i], S[i, i])
            rows = [Z[:, i].copy(), Z[:, i + 1].copy()]
            if theta < 0:
                theta = -theta
                rows.reverse()
            omega = round(theta / g0)
            if omega < 1 or abs(theta - omega * g0) > 1e-8:
                raise DecompositionError(
                    f"block angle {theta} is not an integer frequency at generator {g0}"
                )
            blocks.append((omega, rows))
            i += 2
        else:
            if S[i, i] < 0:
                raise DecompositionError(
                    "eigenvalue -1 at the generator: frequency is ambiguous"
                )
            blocks.append((0, [Z[:, i].copy()]))
            i += 1
    blocks.sort(key=lambda b: b[0])
    P = np.vstack([row for _, rows in blocks for row in rows])
    terms: list[Term] = []
    for omega, _ in blocks:
        if omega == 0:
            if terms and terms[-1].kind == "trivial":
                terms[-1] = Term("trivial", terms[-1].mult + 1)
            else:
                terms.append(Term("trivial", 1))
        else:
            if terms and terms[-1].kind == "irrep" and terms[-1].omega == omega:
                terms[-1] = Term("irrep", terms[-1].mult + 1, omega=omega)
            else:
                terms.append(Term("irrep", 1, omega=omega))
    return P, Representation(terms)


def decompose_conjugation(
    raw_rep: Callable[[GroupElement], np.ndarray],
    dim: int,
    method: str = "auto",
    tolerance: float = IDENTITY_TOL,
    samples: int = 64,
    generator: GroupElement | None = None,
) -> ConjugationDecomposition:
    """Decompose a conjugation-style action into irreps.

    method "exact" uses the hard-coded P for the 16- and 9-dimensional cases;
    "numeric" discovers P by block-diagonalizing at a generator; "auto"
    prefers exact when available.
    """
    if method not in ("auto", "exact", "numeric"):
        raise ValueError(f"unknown method {method!r}")
    use_exact = method != "numeric" and dim in (16, 9)
    if method == "exact" and dim not in (16, 9):
        raise DecompositionError(f"no hard-coded basis for dimension {dim}")
    if use_exact:
        if dim == 16:
            P, block = P_CONJUGATION_SE3, SE3_CONJUGATION_BLOCKS
        else:
            P, block = P_CONJUGATION_SO3, SO3_CONJUGATION_BLOCKS
        dec = ConjugationDecomposition(raw_rep, P, block)
    else:
        gen = generator or GroupElement.from_index(1, 16)
        P, block = _discover_basis(raw_rep, dim, gen)
        dec = ConjugationDecomposition(raw_rep, P, block)
    res = dec.residual(_sample_angles(samples))
    if res > tolerance:
        raise DecompositionError(
            f"decomposition residual {res:.3e} exceeds tolerance {tolerance:.1e}"
        )
    return dec


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------

def _sample_pairs(rep: Representation | None, n: int, seed: int):
    rng = np.random.default_rng(seed)
    orders = rep.regular_orders() if rep is not None else set()
    if orders:
        u = math.lcm(*orders)
        for _ in range(n):
            yield (
                GroupElement.from_index(int(rng.integers(u)), u),
                GroupElement.from_index(int(rng.integers(u)), u),
            )
    else:
        for _ in range(n):
            a, b = rng.uniform(0.0, TWO_PI, size=2)
            yield GroupElement.from_angle(a), GroupElement.from_angle(b)


def verify_homomorphism(
    rep: Representation | Callable[[GroupElement], np.ndarray],
    samples: int = 64,
    tolerance: float = IDENTITY_TOL,
    seed: int = 0,
) -> dict:
    """Max over sampled (g, h) of |rho(g)rho(h) - rho(g+h)|_inf."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    if isinstance(rep, Representation):
        fn = rep.matrix
        pairs = _sample_pairs(rep, samples, seed)
    else:
        fn = rep
        pairs = _sample_pairs(None, samples, seed)
    worst = 0.0
    for g, h in pairs:
        err = np.max(np.abs(fn(g) @ fn(h) - fn(g.compose(h))))
        worst = max(worst, float(err))
    return {"max_error": worst, "pass": worst <= tolerance}


def rep_to_json_str(rep: Representation) -> str:
    return json.dumps(rep.to_json())


def rep_from_json_str(s: str) -> Representation:
    return Representation.from_json(json.loads(s))
