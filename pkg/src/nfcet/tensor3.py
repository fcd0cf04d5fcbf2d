"""Dense 3-mode complex tensor algebra.

All tensors use a mode-1-fastest (Fortran / column-major) canonical layout,
so the mode-n unfolding places the remaining modes in increasing order with
the lowest mode varying fastest.
"""

import numpy as np


class ComplexTensor3:
    """Dense complex tensor with three modes.

    Thin wrapper around an (I1, I2, I3) complex ndarray that fixes the
    unfolding/vectorization conventions used throughout the package.
    """

    __slots__ = ("data",)

    def __init__(self, data):
        data = np.asarray(data, dtype=complex)
        if data.ndim != 3:
            raise ValueError(f"expected 3 modes, got shape {data.shape}")
        self.data = data

    @classmethod
    def zeros(cls, dims):
        return cls(np.zeros(dims, dtype=complex))

    @classmethod
    def from_vec(cls, vec, dims):
        """Inverse of .vec(): reshape a mode-1-fastest vector to a tensor."""
        vec = np.asarray(vec, dtype=complex)
        if vec.size != np.prod(dims):
            raise ValueError("vector length does not match dims")
        return cls(vec.reshape(dims, order="F"))

    @property
    def dims(self):
        return self.data.shape

    def vec(self):
        """Mode-1-fastest vectorization."""
        return self.data.reshape(-1, order="F")

    def norm(self):
        return np.linalg.norm(self.data)

    def copy(self):
        return ComplexTensor3(self.data.copy())

    def __add__(self, other):
        return ComplexTensor3(self.data + other.data)

    def __sub__(self, other):
        return ComplexTensor3(self.data - other.data)

    def __mul__(self, c):
        return ComplexTensor3(self.data * c)

    __rmul__ = __mul__


def mode_unfold(t, n):
    """Mode-n unfolding, shape (I_n, prod of the other dims).

    Column index j of the unfolding satisfies j = sum_{k != n} (i_k - 1) J_k
    (0-based), with J_k the product of the dims below k excluding mode n.
    """
    if n not in (1, 2, 3):
        raise ValueError(f"mode index must be 1, 2 or 3, got {n}")
    a = np.moveaxis(t.data, n - 1, 0)
    return a.reshape(a.shape[0], -1, order="F")


def mode_refold(mat, n, dims):
    """Inverse of mode_unfold for a tensor of the given dims."""
    if n not in (1, 2, 3):
        raise ValueError(f"mode index must be 1, 2 or 3, got {n}")
    perm_dims = (dims[n - 1],) + tuple(d for i, d in enumerate(dims) if i != n - 1)
    a = np.asarray(mat, dtype=complex).reshape(perm_dims, order="F")
    return ComplexTensor3(np.moveaxis(a, 0, n - 1))


def mode_product(t, d, n):
    """Mode-n product t x_n d; unfold(result, n) == d @ unfold(t, n)."""
    d = np.asarray(d, dtype=complex)
    if d.ndim != 2 or d.shape[1] != t.dims[n - 1]:
        raise ValueError(
            f"mode-{n} product needs a matrix with {t.dims[n - 1]} columns, "
            f"got shape {d.shape}"
        )
    new_dims = list(t.dims)
    new_dims[n - 1] = d.shape[0]
    return mode_refold(d @ mode_unfold(t, n), n, tuple(new_dims))


def tucker_reconstruct(core, d1, d2, d3):
    """core x_1 d1 x_2 d2 x_3 d3."""
    out = mode_product(core, d1, 1)
    out = mode_product(out, d2, 2)
    return mode_product(out, d3, 3)


def vectorize_tucker(core_vec, d1, d2, d3):
    """(d3 kron d2 kron d1) @ core_vec, computed without forming the Kronecker."""
    d1 = np.asarray(d1, dtype=complex)
    d2 = np.asarray(d2, dtype=complex)
    d3 = np.asarray(d3, dtype=complex)
    k1, k2, k3 = d1.shape[1], d2.shape[1], d3.shape[1]
    core_vec = np.asarray(core_vec, dtype=complex)
    if core_vec.size != k1 * k2 * k3:
        raise ValueError("core vector length does not match factor columns")
    core = ComplexTensor3.from_vec(core_vec, (k1, k2, k3))
    return tucker_reconstruct(core, d1, d2, d3).vec()


def kron(a, b):
    return np.kron(np.asarray(a, dtype=complex), np.asarray(b, dtype=complex))


def khatri_rao(a, b):
    """Column-wise Kronecker product; a and b must have equal column counts."""
    a = np.atleast_2d(np.asarray(a, dtype=complex))
    b = np.atleast_2d(np.asarray(b, dtype=complex))
    if a.shape[1] != b.shape[1]:
        raise ValueError("khatri_rao needs equal column counts")
    return np.einsum("ik,jk->ijk", a, b).reshape(a.shape[0] * b.shape[0], a.shape[1])


def outer3(u, v, w):
    """Rank-1 tensor u o v o w."""
    u = np.asarray(u, dtype=complex).ravel()
    v = np.asarray(v, dtype=complex).ravel()
    w = np.asarray(w, dtype=complex).ravel()
    return ComplexTensor3(np.einsum("i,j,k->ijk", u, v, w))
