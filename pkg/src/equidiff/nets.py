"""Equivariant network building blocks and the noise-prediction network.

Linear layers are parameterized directly in an intertwiner basis (maps W
with rho_out(g) W = W rho_in(g)), so equivariance holds for any coefficient
values.  The denoiser encodes observation and noisy action into regular
fields of C_u, runs one shared feed-forward core per group slice, and
decodes back to the action trajectory's representation.  All gradients are
exact reverse-mode, written by hand and checked against finite differences.
"""
from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import scipy.linalg

from .groups import (
    GroupElement,
    Representation,
    cyclic_elements,
    regular,
    rep_matrix,
)

EQUIVARIANCE_TOL = 1e-10


class FieldTypeError(TypeError):
    """An operation was applied to a field with the wrong representation."""


@dataclass(frozen=True, eq=False)
class FieldType:
    """A vector space with a C_u representation attached."""

    rep: Representation
    u: int

    def __post_init__(self):
        if self.u < 1:
            raise ValueError("group order must be >= 1")
        for order in self.rep.regular_orders():
            if order != self.u:
                raise FieldTypeError(
                    f"regular({order}) term inside a C_{self.u} field"
                )

    @property
    def dim(self) -> int:
        return self.rep.dim

    @property
    def is_regular(self) -> bool:
        return self.rep.basis_change is None and all(
            t.kind == "regular" and t.u == self.u for t in self.rep.terms
        )

    @property
    def channels(self) -> int:
        if not self.is_regular:
            raise FieldTypeError("channel count is defined for regular fields only")
        return sum(t.mult for t in self.rep.terms)

    def matrix(self, g: GroupElement) -> np.ndarray:
        return self.rep.matrix(g)


def regular_field(u: int, channels: int) -> FieldType:
    return FieldType(regular(u, channels), u)


# ---------------------------------------------------------------------------
# Intertwiner bases
# ---------------------------------------------------------------------------

def _atom_block(key: tuple, g: GroupElement) -> np.ndarray:
    kind, param = key
    from .groups import Term

    return Term(kind, 1, omega=param if kind == "irrep" else None,
                u=param if kind == "regular" else None).block_matrix(g)


@functools.lru_cache(maxsize=None)
def _pair_basis(in_key: tuple, out_key: tuple, u: int) -> np.ndarray:
    """Orthonormal basis of {W : out(r) W = W in(r)} at the generator of C_u.

    Returned stacked as (nb, d_out, d_in); nb may be zero.
    """
    gen = GroupElement.from_index(1, u)
    A = _atom_block(out_key, gen)
    B = _atom_block(in_key, gen)
    do, di = A.shape[0], B.shape[0]
    if u == 1:
        basis = np.zeros((do * di, do, di))
        k = 0
        for i in range(do):
            for j in range(di):
                basis[k, i, j] = 1.0
                k += 1
        return basis
    M = np.kron(np.eye(di), A) - np.kron(B.T, np.eye(do))
    ns = scipy.linalg.null_space(M, rcond=1e-10)
    nb = ns.shape[1]
    basis = np.zeros((nb, do, di))
    for k in range(nb):
        basis[k] = ns[:, k].reshape((do, di), order="F")
    return basis


def intertwiner_basis(in_rep: Representation, out_rep: Representation, u: int) -> np.ndarray:
    """Full stacked basis of equivariant linear maps in_rep -> out_rep.

    Computed as the nullspace of the generator commutation constraint on the
    whole (out_dim x in_dim) matrix space; only the generator is needed for a
    cyclic group.  Intended for inspection and small cases; layers assemble
    the same space blockwise.
    """
    gen = GroupElement.from_index(1, u) if u > 1 else GroupElement.identity()
    A = rep_matrix(out_rep, gen)
    B = rep_matrix(in_rep, gen)
    do, di = out_rep.dim, in_rep.dim
    if u == 1:
        return np.eye(do * di).reshape(do * di, do, di)
    M = np.kron(np.eye(di), A) - np.kron(B.T, np.eye(do))
    ns = scipy.linalg.null_space(M, rcond=1e-10)
    out = np.zeros((ns.shape[1], do, di))
    for k in range(ns.shape[1]):
        out[k] = ns[:, k].reshape((do, di), order="F")
    return out


def _invariant_direction(key: tuple) -> np.ndarray | None:
    """Unit vector fixed by the atom's action, or None if there is none."""
    kind, param = key
    if kind == "trivial":
        return np.array([1.0])
    if kind == "regular":
        u = param
        return np.ones(u) / math.sqrt(u)
    return None  # irreps with omega >= 1 have no fixed directions


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class EquivariantLinear:
    """Linear layer constrained to the intertwiner space of (in, out) types.

    The realized weight is P_out^-1 . W_block . P_in where W_block is built
    from per-atom-pair bases; bias is restricted to the invariant directions
    of the output type (trivial components and uniform regular directions).
    """

    kind = "equivariant_linear"

    def __init__(self, name: str, in_type: FieldType, out_type: FieldType,
                 rng: np.random.Generator, bias: bool = True):
        if in_type.u != out_type.u:
            raise FieldTypeError("input and output fields live under different groups")
        self.name = name
        self.in_type = in_type
        self.out_type = out_type
        self.u = in_type.u

        in_atoms = in_type.rep.atoms()
        out_atoms = out_type.rep.atoms()
        in_groups: dict[tuple, list[tuple[int, int]]] = {}
        for key, d, off in in_atoms:
            in_groups.setdefault(key, []).append((off, d))
        out_groups: dict[tuple, list[tuple[int, int]]] = {}
        for key, d, off in out_atoms:
            out_groups.setdefault(key, []).append((off, d))

        self.pair_groups = []
        n_coeffs = 0
        for out_key in sorted(out_groups):
            for in_key in sorted(in_groups):
                basis = _pair_basis(in_key, out_key, self.u).copy()
                nb = basis.shape[0]
                if nb == 0:
                    continue
                outs, ins = out_groups[out_key], in_groups[in_key]
                rows = np.concatenate([np.arange(off, off + d) for off, d in outs])
                cols = np.concatenate([np.arange(off, off + d) for off, d in ins])
                group = {
                    "out_key": out_key,
                    "in_key": in_key,
                    "basis": basis,
                    "rows": rows,
                    "cols": cols,
                    "n_out": len(outs),
                    "n_in": len(ins),
                    "d_out": basis.shape[1],
                    "d_in": basis.shape[2],
                    "slice": slice(n_coeffs, n_coeffs + len(outs) * len(ins) * nb),
                }
                n_coeffs += len(outs) * len(ins) * nb
                self.pair_groups.append(group)

        self.n_coeffs = n_coeffs
        # The basis is Frobenius-orthonormal, so nb * scale^2 spreads over
        # dout*din realized entries; this keeps per-entry variance ~ 1/fan_in.
        scale = math.sqrt(out_type.dim / max(1, n_coeffs))
        self.coeffs = rng.normal(scale=scale, size=n_coeffs)
        self.grad_coeffs = np.zeros_like(self.coeffs)

        self.bias_atoms = []
        if bias:
            for key, d, off in out_atoms:
                direction = _invariant_direction(key)
                if direction is not None:
                    self.bias_atoms.append((off, direction))
        self.n_bias = len(self.bias_atoms)
        self.bias_coeffs = np.zeros(self.n_bias)
        self.grad_bias = np.zeros_like(self.bias_coeffs)

        self._x: np.ndarray | None = None

    # -- weight assembly -----------------------------------------------------

    def block_weight(self) -> np.ndarray:
        W = np.zeros((self.out_type.dim, self.in_type.dim))
        for grp in self.pair_groups:
            nb = grp["basis"].shape[0]
            C = self.coeffs[grp["slice"]].reshape(grp["n_out"], grp["n_in"], nb)
            contrib = np.einsum("oik,kab->oaib", C, grp["basis"])
            block = contrib.reshape(grp["n_out"] * grp["d_out"], grp["n_in"] * grp["d_in"])
            W[np.ix_(grp["rows"], grp["cols"])] = block
        return W

    def weight(self) -> np.ndarray:
        W = self.block_weight()
        if self.out_type.rep.basis_change is not None:
            W = self.out_type.rep.basis_change_inv @ W
        if self.in_type.rep.basis_change is not None:
            W = W @ self.in_type.rep.basis_change
        return W

    def bias(self) -> np.ndarray:
        b = np.zeros(self.out_type.dim)
        for (off, direction), c in zip(self.bias_atoms, self.bias_coeffs):
            b[off : off + direction.shape[0]] += c * direction
        if self.out_type.rep.basis_change is not None:
            b = self.out_type.rep.basis_change_inv @ b
        return b

    # -- forward / backward ----------------------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_type.dim:
            raise ValueError(
                f"{self.name}: expected (batch, {self.in_type.dim}), got {x.shape}"
            )
        self._x = x
        return x @ self.weight().T + self.bias()

    def backward(self, grad_y: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise RuntimeError(f"{self.name}: backward before forward")
        grad_y = np.asarray(grad_y, dtype=np.float64)
        W = self.weight()
        grad_x = grad_y @ W
        gW = grad_y.T @ self._x
        if self.out_type.rep.basis_change is not None:
            gW = self.out_type.rep.basis_change_inv.T @ gW
        if self.in_type.rep.basis_change is not None:
            gW = gW @ self.in_type.rep.basis_change.T
        for grp in self.pair_groups:
            nb = grp["basis"].shape[0]
            block = gW[np.ix_(grp["rows"], grp["cols"])]
            G = block.reshape(grp["n_out"], grp["d_out"], grp["n_in"], grp["d_in"])
            gC = np.einsum("oaib,kab->oik", G, grp["basis"])
            self.grad_coeffs[grp["slice"]] += gC.reshape(-1)
        if self.n_bias:
            gb = grad_y.sum(axis=0)
            if self.out_type.rep.basis_change is not None:
                gb = self.out_type.rep.basis_change_inv.T @ gb
            for i, (off, direction) in enumerate(self.bias_atoms):
                self.grad_bias[i] += direction @ gb[off : off + direction.shape[0]]
        return grad_x

    # -- bookkeeping ------------------------------------------------------------

    def params(self):
        out = [(f"{self.name}.coeffs", self.coeffs)]
        if self.n_bias:
            out.append((f"{self.name}.bias", self.bias_coeffs))
        return out

    def grads(self):
        out = [(f"{self.name}.coeffs", self.grad_coeffs)]
        if self.n_bias:
            out.append((f"{self.name}.bias", self.grad_bias))
        return out

    def zero_grad(self):
        self.grad_coeffs[:] = 0.0
        self.grad_bias[:] = 0.0

    def check_equivariance(self) -> float:
        """Max residual of rho_out(g) W = W rho_in(g) and rho_out(g) b = b."""
        W, b = self.weight(), self.bias()
        worst = 0.0
        for g in cyclic_elements(self.u):
            lhs = self.out_type.matrix(g) @ W
            rhs = W @ self.in_type.matrix(g)
            worst = max(worst, float(np.max(np.abs(lhs - rhs))))
            worst = max(worst, float(np.max(np.abs(self.out_type.matrix(g) @ b - b))))
        return worst

    def manifest_entry(self):
        return {
            "name": self.name,
            "kind": self.kind,
            "in_type": self.in_type.rep.to_json(),
            "out_type": self.out_type.rep.to_json(),
            "intertwiner_dim": self.n_coeffs,
            "bias_dim": self.n_bias,
        }


class PointwiseSoftplus:
    """Smooth elementwise nonlinearity; equivariant on regular fields only."""

    kind = "softplus"

    def __init__(self, name: str, field_type: FieldType):
        if not field_type.is_regular:
            raise FieldTypeError(
                f"{name}: pointwise nonlinearity needs a pure regular field"
            )
        self.name = name
        self.field_type = field_type
        self._x: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return np.logaddexp(0.0, x)

    def backward(self, grad_y: np.ndarray) -> np.ndarray:
        return grad_y * _sigmoid(self._x)

    def params(self):
        return []

    def grads(self):
        return []

    def zero_grad(self):
        pass


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _softplus(x):
    return np.logaddexp(0.0, x)


class DenseLinear:
    """Ordinary affine layer used inside the shared per-slice core."""

    kind = "dense"

    def __init__(self, name: str, d_in: int, d_out: int, rng: np.random.Generator,
                 zero_init: bool = False):
        self.name = name
        self.d_in, self.d_out = d_in, d_out
        if zero_init:
            self.W = np.zeros((d_out, d_in))
        else:
            self.W = rng.normal(scale=1.0 / math.sqrt(d_in), size=(d_out, d_in))
        self.b = np.zeros(d_out)
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)
        self._x = None

    def forward(self, x):
        if x.shape[1] != self.d_in:
            raise ValueError(f"{self.name}: expected (batch, {self.d_in}), got {x.shape}")
        self._x = x
        return x @ self.W.T + self.b

    def backward(self, grad_y):
        self.gW += grad_y.T @ self._x
        self.gb += grad_y.sum(axis=0)
        return grad_y @ self.W

    def params(self):
        return [(f"{self.name}.W", self.W), (f"{self.name}.b", self.b)]

    def grads(self):
        return [(f"{self.name}.W", self.gW), (f"{self.name}.b", self.gb)]

    def zero_grad(self):
        self.gW[:] = 0.0
        self.gb[:] = 0.0


class StepEmbedding:
    """Fixed sinusoidal embedding of the denoising step index."""

    def __init__(self, dim: int):
        if dim % 2 != 0:
            raise ValueError("step embedding dimension must be even")
        self.dim = dim
        half = dim // 2
        self.freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(1, half - 1))

    def forward(self, k: np.ndarray) -> np.ndarray:
        phase = np.asarray(k, dtype=np.float64)[:, None] * self.freqs[None, :]
        return np.concatenate([np.sin(phase), np.cos(phase)], axis=1)


class ResidualBlock:
    """h + W2 softplus(W1 softplus(h)) with shared weights across slices."""

    def __init__(self, name, width, rng):
        self.name = name
        self.l1 = DenseLinear(f"{name}.l1", width, width, rng)
        self.l2 = DenseLinear(f"{name}.l2", width, width, rng)
        self._h = None
        self._a1 = None

    def forward(self, h):
        self._h = h
        a0 = _softplus(h)
        self._a1 = self.l1.forward(a0)
        return h + self.l2.forward(_softplus(self._a1))

    def backward(self, g):
        ga1 = self.l2.backward(g) * _sigmoid(self._a1)
        ga0 = self.l1.backward(ga1)
        return g + ga0 * _sigmoid(self._h)

    def sublayers(self):
        return [self.l1, self.l2]


class TemporalCore:
    """Shared feed-forward residual core with a sinusoidal step embedding.

    Applied identically to every group slice; the denoiser folds the slice
    axis into the batch before calling it.
    """

    def __init__(self, name, d_in, width, depth, d_out, embed_dim, rng):
        self.name = name
        self.embed = StepEmbedding(embed_dim)
        self.lin_in = DenseLinear(f"{name}.lin_in", d_in + embed_dim, width, rng)
        self.blocks = [ResidualBlock(f"{name}.block{i}", width, rng) for i in range(depth)]
        self.lin_out = DenseLinear(f"{name}.lin_out", width, d_out, rng)
        self._h_last = None

    def forward(self, x: np.ndarray, k: np.ndarray) -> np.ndarray:
        z = np.concatenate([x, self.embed.forward(k)], axis=1)
        h = self.lin_in.forward(z)
        for blk in self.blocks:
            h = blk.forward(h)
        self._h_last = h
        return self.lin_out.forward(_softplus(h))

    def backward(self, grad_y):
        g = self.lin_out.backward(grad_y) * _sigmoid(self._h_last)
        for blk in reversed(self.blocks):
            g = blk.backward(g)
        g = self.lin_in.backward(g)
        return g[:, : g.shape[1] - self.embed.dim]

    def sublayers(self):
        out = [self.lin_in]
        for blk in self.blocks:
            out.extend(blk.sublayers())
        out.append(self.lin_out)
        return out


class LiftedConv2d:
    """C_4 lifting convolution: one kernel stack, four 90-degree rotated copies.

    Output slice m is the valid cross-correlation of the input with the
    kernel rotated by 90 degrees m times, so rotating the input by 90
    degrees cyclically shifts (and spatially rotates) the output slices.
    """

    kind = "lift_conv2d"

    def __init__(self, name: str, channels: int, kernel_size: int,
                 rng: np.random.Generator):
        self.name = name
        self.channels = channels
        self.kernel_size = kernel_size
        self.K = rng.normal(scale=1.0 / kernel_size, size=(channels, kernel_size, kernel_size))
        self.b = np.zeros(channels)
        self.gK = np.zeros_like(self.K)
        self.gb = np.zeros_like(self.b)
        self._windows = None
        self._in_shape = None

    def forward(self, grid: np.ndarray) -> np.ndarray:
        grid = np.asarray(grid, dtype=np.float64)
        if grid.ndim != 3 or grid.shape[1] != grid.shape[2]:
            raise ValueError(
                f"{self.name}: expected square (batch, H, H) grid, got {grid.shape}"
            )
        self._in_shape = grid.shape
        w = np.lib.stride_tricks.sliding_window_view(
            grid, (self.kernel_size, self.kernel_size), axis=(1, 2)
        )
        self._windows = w
        out = np.empty((grid.shape[0], 4, self.channels, w.shape[1], w.shape[2]))
        for m in range(4):
            km = np.rot90(self.K, m, axes=(1, 2))
            out[:, m] = np.einsum("bhwij,cij->bchw", w, km) + self.b[None, :, None, None]
        return out

    def backward(self, grad_y: np.ndarray) -> np.ndarray:
        B, H, _ = self._in_shape
        k = self.kernel_size
        grad_in = np.zeros(self._in_shape)
        for m in range(4):
            g = grad_y[:, m]
            gkm = np.einsum("bhwij,bchw->cij", self._windows, g)
            self.gK += np.rot90(gkm, -m, axes=(1, 2))
            self.gb += g.sum(axis=(0, 2, 3))
            km = np.rot90(self.K, m, axes=(1, 2))
            # scatter-add each kernel tap's contribution back onto the input
            for i in range(k):
                for j in range(k):
                    grad_in[:, i : i + H - k + 1, j : j + H - k + 1] += np.einsum(
                        "bchw,c->bhw", g, km[:, i, j]
                    )
        return grad_in

    def params(self):
        return [(f"{self.name}.K", self.K), (f"{self.name}.b", self.b)]

    def grads(self):
        return [(f"{self.name}.K", self.gK), (f"{self.name}.b", self.gb)]

    def zero_grad(self):
        self.gK[:] = 0.0
        self.gb[:] = 0.0


class GridEncoder:
    """Lifting conv + softplus + global mean pool, flattened to a regular field."""

    def __init__(self, name: str, channels: int, kernel_size: int,
                 rng: np.random.Generator):
        self.name = name
        self.conv = LiftedConv2d(f"{name}.lift", channels, kernel_size, rng)
        self.channels = channels
        self._pre = None
        self._pool_size = None

    @property
    def out_type(self) -> FieldType:
        return regular_field(4, self.channels)

    def forward(self, grid: np.ndarray) -> np.ndarray:
        y = self.conv.forward(grid)  # (B, 4, C, H', W')
        self._pre = y
        self._pool_size = y.shape[3] * y.shape[4]
        act = _softplus(y)
        pooled = act.mean(axis=(3, 4))  # (B, 4, C)
        B = pooled.shape[0]
        # channel-major regular field: entry c*4 + m
        return pooled.transpose(0, 2, 1).reshape(B, self.channels * 4)

    def backward(self, grad_field: np.ndarray) -> np.ndarray:
        B = grad_field.shape[0]
        g = grad_field.reshape(B, self.channels, 4).transpose(0, 2, 1)
        g = g[:, :, :, None, None] / self._pool_size
        g = np.broadcast_to(g, self._pre.shape) * _sigmoid(self._pre)
        return self.conv.backward(np.ascontiguousarray(g))

    def sublayers(self):
        return [self.conv]


# ---------------------------------------------------------------------------
# The denoiser
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    size: int = 16
    channels: int = 8
    kernel_size: int = 5


@dataclass(frozen=True)
class DenoiserConfig:
    """Sizes and field types of the noise-prediction network."""

    u: int
    obs_rep: Representation
    act_rep: Representation
    obs_hidden: int = 16
    obs_channels: int = 12
    act_channels: int = 12
    core_width: int = 64
    core_depth: int = 2
    core_out: int = 12
    step_embed_dim: int = 8
    grid: GridSpec | None = None

    def to_json(self) -> dict:
        out = {
            "u": self.u,
            "obs_rep": self.obs_rep.to_json(),
            "act_rep": self.act_rep.to_json(),
            "obs_hidden": self.obs_hidden,
            "obs_channels": self.obs_channels,
            "act_channels": self.act_channels,
            "core_width": self.core_width,
            "core_depth": self.core_depth,
            "core_out": self.core_out,
            "step_embed_dim": self.step_embed_dim,
            "grid": None,
        }
        if self.grid is not None:
            out["grid"] = {
                "size": self.grid.size,
                "channels": self.grid.channels,
                "kernel_size": self.grid.kernel_size,
            }
        return out

    @staticmethod
    def from_json(obj: dict) -> "DenoiserConfig":
        grid = obj.get("grid")
        return DenoiserConfig(
            u=obj["u"],
            obs_rep=Representation.from_json(obj["obs_rep"]),
            act_rep=Representation.from_json(obj["act_rep"]),
            obs_hidden=obj["obs_hidden"],
            obs_channels=obj["obs_channels"],
            act_channels=obj["act_channels"],
            core_width=obj["core_width"],
            core_depth=obj["core_depth"],
            core_out=obj["core_out"],
            step_embed_dim=obj["step_embed_dim"],
            grid=None if grid is None else GridSpec(**grid),
        )


class DenoiserNetwork:
    """Noise prediction epsilon_theta(o, a_k, k), equivariant by construction.

    With u = 1 the intertwiner constraint is vacuous and the same class is an
    ordinary (non-equivariant) network — used as the capacity-matched
    baseline.
    """

    def __init__(self, config: DenoiserConfig, seed: int = 0):
        if config.grid is not None and config.u != 4:
            raise ValueError("the grid encoder requires u = 4 (exact 90-degree rotations)")
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        u = config.u
        obs_type = FieldType(config.obs_rep, u)
        act_type = FieldType(config.act_rep, u)
        hidden_type = regular_field(u, config.obs_hidden)
        obs_field = regular_field(u, config.obs_channels)
        act_field = regular_field(u, config.act_channels)
        core_field = regular_field(u, config.core_out)

        self.obs_enc1 = EquivariantLinear("obs_enc1", obs_type, hidden_type, rng)
        self.obs_act = PointwiseSoftplus("obs_act", hidden_type)
        self.obs_enc2 = EquivariantLinear("obs_enc2", hidden_type, obs_field, rng)
        self.act_enc = EquivariantLinear("act_enc", act_type, act_field, rng)
        self.grid_enc = None
        grid_channels = 0
        if config.grid is not None:
            self.grid_enc = GridEncoder("grid_enc", config.grid.channels,
                                        config.grid.kernel_size, rng)
            grid_channels = config.grid.channels
        d_slice = config.obs_channels + grid_channels + config.act_channels
        self.core = TemporalCore("core", d_slice, config.core_width,
                                 config.core_depth, config.core_out,
                                 config.step_embed_dim, rng)
        self.decoder = EquivariantLinear("decoder", core_field, act_type, rng)
        self._slice_channels = d_slice

    # -- plumbing ---------------------------------------------------------------

    def equivariant_layers(self):
        return [self.obs_enc1, self.obs_enc2, self.act_enc, self.decoder]

    def all_layers(self):
        out = [self.obs_enc1, self.obs_act, self.obs_enc2, self.act_enc]
        if self.grid_enc is not None:
            out.extend(self.grid_enc.sublayers())
        out.extend(self.core.sublayers())
        out.append(self.decoder)
        return out

    def params(self):
        out = []
        for layer in self.all_layers():
            out.extend(layer.params())
        return out

    def grads(self):
        out = []
        for layer in self.all_layers():
            out.extend(layer.grads())
        return out

    def zero_grads(self):
        for layer in self.all_layers():
            layer.zero_grad()

    def num_params(self) -> int:
        return sum(int(a.size) for _, a in self.params())

    def get_flat(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for _, a in self.params()])

    def set_flat(self, flat: np.ndarray):
        off = 0
        for _, a in self.params():
            n = a.size
            a[...] = flat[off : off + n].reshape(a.shape)
            off += n
        if off != flat.size:
            raise ValueError(f"flat vector has {flat.size} entries, network needs {off}")

    def grad_flat(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for _, a in self.grads()])

    # -- forward / backward -------------------------------------------------------

    def _to_field(self, x: np.ndarray, channels: int) -> np.ndarray:
        B = x.shape[0]
        return x.reshape(B, channels, self.config.u)

    def forward(self, obs: np.ndarray, act: np.ndarray, k, grid: np.ndarray | None = None) -> np.ndarray:
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        act = np.atleast_2d(np.asarray(act, dtype=np.float64))
        B = obs.shape[0]
        k = np.broadcast_to(np.asarray(k, dtype=np.float64), (B,))
        u = self.config.u

        e_o = self.obs_enc2.forward(self.obs_act.forward(self.obs_enc1.forward(obs)))
        fields = [self._to_field(e_o, self.config.obs_channels)]
        if self.grid_enc is not None:
            if grid is None:
                raise ValueError("this network was built with a grid encoder; pass a grid")
            fields.append(self._to_field(self.grid_enc.forward(grid), self.grid_enc.channels))
        elif grid is not None:
            raise ValueError("network has no grid encoder")
        e_a = self.act_enc.forward(act)
        fields.append(self._to_field(e_a, self.config.act_channels))
        slices = np.concatenate(fields, axis=1)  # (B, d_slice, u)

        core_in = slices.transpose(0, 2, 1).reshape(B * u, self._slice_channels)
        k_rep = np.repeat(k, u)
        z = self.core.forward(core_in, k_rep)  # (B*u, core_out)
        z_field = z.reshape(B, u, self.config.core_out).transpose(0, 2, 1)
        self._B = B
        return self.decoder.forward(z_field.reshape(B, -1))

    def backward(self, grad_eps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Accumulate parameter gradients; returns (grad_obs, grad_act)."""
        B, u = self._B, self.config.u
        gz_flat = self.decoder.backward(np.atleast_2d(grad_eps))
        gz = gz_flat.reshape(B, self.config.core_out, u).transpose(0, 2, 1)
        g_core_in = self.core.backward(gz.reshape(B * u, self.config.core_out))
        g_slices = g_core_in.reshape(B, u, self._slice_channels).transpose(0, 2, 1)

        c0 = self.config.obs_channels
        g_eo = g_slices[:, :c0, :].reshape(B, -1)
        grad_obs = self.obs_enc1.backward(
            self.obs_act.backward(self.obs_enc2.backward(g_eo))
        )
        pos = c0
        if self.grid_enc is not None:
            gc = self.grid_enc.channels
            self.grid_enc.backward(g_slices[:, pos : pos + gc, :].reshape(B, -1))
            pos += gc
        g_ea = g_slices[:, pos:, :].reshape(B, -1)
        grad_act = self.act_enc.backward(g_ea)
        return grad_obs, grad_act

    # -- checks ---------------------------------------------------------------------

    def check_structure(self) -> list[tuple[str, float]]:
        """Per-layer intertwiner residuals of the realized weights."""
        return [(l.name, l.check_equivariance()) for l in self.equivariant_layers()]

    def equivariance_residual(self, obs, act, k, grid=None, elements=None) -> float:
        """Max relative error of eps(g o, g a, k) = g eps(o, a, k) over C_u."""
        obs = np.atleast_2d(obs)
        act = np.atleast_2d(act)
        base = self.forward(obs, act, k, grid)
        worst = 0.0
        for g in elements or cyclic_elements(self.config.u):
            Og = rep_matrix(self.config.obs_rep, g)
            Ag = rep_matrix(self.config.act_rep, g)
            grid_g = None
            if grid is not None:
                grid_g = np.rot90(grid, g.cyclic_index(4), axes=(1, 2)).copy()
            out = self.forward(obs @ Og.T, act @ Ag.T, k, grid_g)
            want = base @ Ag.T
            denom = max(1e-12, float(np.max(np.abs(want))))
            worst = max(worst, float(np.max(np.abs(out - want))) / denom)
        return worst


# ---------------------------------------------------------------------------
# Persistence: JSON manifest + flat little-endian float64 parameter file
# ---------------------------------------------------------------------------

WEIGHTS_FORMAT = "equidiff-weights"
MANIFEST_NAME = "manifest.json"
PARAMS_NAME = "params.bin"


def save_network(net: DenoiserNetwork, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for layer in net.all_layers():
        entry = (
            layer.manifest_entry()
            if hasattr(layer, "manifest_entry")
            else {"name": layer.name, "kind": layer.kind}
        )
        entry["params"] = [
            {"name": n, "shape": list(a.shape), "size": int(a.size)}
            for n, a in layer.params()
        ]
        entries.append(entry)
    manifest = {
        "format": WEIGHTS_FORMAT,
        "version": 1,
        "u": net.config.u,
        "seed": net.seed,
        "config": net.config.to_json(),
        "layers": entries,
        "param_order": [n for n, _ in net.params()],
        "total_params": net.num_params(),
    }
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1))
    flat = net.get_flat().astype("<f8")
    (directory / PARAMS_NAME).write_bytes(flat.tobytes())


class ManifestMismatchError(RuntimeError):
    pass


def load_network(directory, config: DenoiserConfig | None = None) -> DenoiserNetwork:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST_NAME).read_text())
    if manifest.get("format") != WEIGHTS_FORMAT:
        raise ManifestMismatchError(f"not a {WEIGHTS_FORMAT} manifest")
    stored = DenoiserConfig.from_json(manifest["config"])
    if config is not None and config.to_json() != stored.to_json():
        raise ManifestMismatchError("weights manifest does not match the requested config")
    net = DenoiserNetwork(stored, seed=manifest.get("seed", 0))
    order = [n for n, _ in net.params()]
    if order != manifest["param_order"]:
        raise ManifestMismatchError("parameter order mismatch between manifest and network")
    raw = np.frombuffer((directory / PARAMS_NAME).read_bytes(), dtype="<f8")
    if raw.size != manifest["total_params"]:
        raise ManifestMismatchError(
            f"parameter file has {raw.size} values, manifest says {manifest['total_params']}"
        )
    net.set_flat(raw.astype(np.float64))
    return net


# ---------------------------------------------------------------------------
# Capacity-matched baseline
# ---------------------------------------------------------------------------

def build_matched_baseline(config: DenoiserConfig, tolerance: float = 0.10,
                           seed: int = 0) -> DenoiserNetwork:
    """A u=1 (unconstrained) twin whose parameter count matches within 10%.

    Scales the internal widths of the u=1 network until its parameter count
    brackets the equivariant one.
    """
    target = DenoiserNetwork(config, seed=seed).num_params()

    def candidate(scale: float) -> DenoiserConfig:
        return replace(
            config,
            u=1,
            obs_hidden=max(1, round(config.obs_hidden * scale)),
            obs_channels=max(1, round(config.obs_channels * scale)),
            act_channels=max(1, round(config.act_channels * scale)),
            core_width=max(1, round(config.core_width * scale)),
            core_out=max(1, round(config.core_out * scale)),
        )

    best, best_err = None, np.inf
    for scale in np.linspace(0.2, 6.0, 117):
        cfg = candidate(float(scale))
        n = DenoiserNetwork(cfg, seed=seed).num_params()
        err = abs(n - target) / target
        if err < best_err:
            best, best_err = cfg, err
        if err == 0:
            break
    if best is None or best_err > tolerance:
        raise RuntimeError(
            f"could not match baseline capacity within {tolerance:.0%} (best {best_err:.1%})"
        )
    return DenoiserNetwork(best, seed=seed)
