"""Momentum-space kernels of the paired-fermion representation.

All functions broadcast over leading axes: momentum components enter as
scalars or arrays, matrices come out with trailing shape (..., 2, 2).
The massive species is written "chi" while still coupled and "xi" after the
decoupling change of variables; both share the same free kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_SQ2 = math.sqrt(2.0)

SIGMA2 = np.array([[0.0, -1.0j], [1.0j, 0.0]])


def mass_chi(k0, k1, t0: float, t1: float):
    return t1 * np.cos(k1) + t0 * np.cos(k0) + 2.0 * (_SQ2 + 1.0)


def mass_psi0(k0, k1, t0: float, t1: float):
    return t1 * np.cos(k1) + t0 * np.cos(k0) - 2.0 * (_SQ2 - 1.0)


def mass_psi_effective(t0: float, t1: float) -> float:
    """The dressed zero-momentum mass; vanishes on the critical line."""
    return 4.0 * (t0 * t1 + t0 + t1 - 1.0) / (t0 + t1 + 2.0 * (_SQ2 + 1.0))


def _pack(m00, m01, m10, m11):
    m00, m01, m10, m11 = np.broadcast_arrays(m00, m01, m10, m11)
    out = np.empty(m00.shape + (2, 2), dtype=complex)
    out[..., 0, 0] = m00
    out[..., 0, 1] = m01
    out[..., 1, 0] = m10
    out[..., 1, 1] = m11
    return out


def c_matrix(k0, k1, t0: float, t1: float, species: str):
    """Free kernel C_zeta(k); species is 'chi' or 'psi'."""
    if species == "chi":
        m = mass_chi(k0, k1, t0, t1)
    elif species == "psi":
        m = mass_psi0(k0, k1, t0, t1)
    else:
        raise ValueError(f"unknown species {species!r}")
    s1 = t1 * np.sin(k1)
    s0 = t0 * np.sin(k0)
    return _pack(-1j * s1 - s0, -1j * m, 1j * m, -1j * s1 + s0)


def q_matrix(k0, k1, t0: float, t1: float):
    """Species-mixing kernel Q(k)."""
    s1 = t1 * np.sin(k1)
    s0 = t0 * np.sin(k0)
    c = t1 * np.cos(k1) - t0 * np.cos(k0)
    return _pack(1j * s1 - s0, 1j * c, -1j * c, 1j * s1 + s0)


def _inv2(M):
    det = M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]
    out = np.empty_like(M)
    out[..., 0, 0] = M[..., 1, 1]
    out[..., 0, 1] = -M[..., 0, 1]
    out[..., 1, 0] = -M[..., 1, 0]
    out[..., 1, 1] = M[..., 0, 0]
    return out / det[..., None, None]


def g_xi(k0, k1, t0: float, t1: float):
    """Massive propagator, the inverse of C_chi(k)."""
    return _inv2(c_matrix(k0, k1, t0, t1, "chi"))


def vertex_matrices(k0, k1, n: tuple[int, int], omega: tuple[float, float]):
    """Bare harmonic-transfer vertices.

    Returns {"P0", "P1", "Q0", "Q1"}; P^(j) carries the half-shifted angle
    k_j - pi*omega_j*n_j and vanishes when n_j = 0.
    """
    n0, n1 = n
    om0, om1 = omega
    a1 = np.asarray(k1, dtype=float) - math.pi * om1 * n1
    f1 = 0.0 if n1 == 0 else 1.0
    P1 = f1 * _pack(-1j * np.sin(a1), 1j * np.cos(a1),
                    -1j * np.cos(a1), -1j * np.sin(a1))
    a0 = np.asarray(k0, dtype=float) - math.pi * om0 * n0
    f0 = 0.0 if n0 == 0 else 1.0
    P0 = f0 * _pack(np.sin(a0), 1j * np.cos(a0),
                    -1j * np.cos(a0), -np.sin(a0))
    P1 = np.broadcast_to(P1, np.broadcast(np.asarray(k0), np.asarray(k1)).shape + (2, 2)).copy()
    P0 = np.broadcast_to(P0, P1.shape).copy()
    return {"P0": P0, "P1": P1, "Q0": -P0, "Q1": P1.copy()}


def source_vertex_matrices(k0, k1, n: tuple[int, int], omega: tuple[float, float]):
    """Same trig structure as vertex_matrices but without the n_j = 0 cutoffs
    (the source bilinear keeps its zero-harmonic part)."""
    n0, n1 = n
    om0, om1 = omega
    a1 = np.asarray(k1, dtype=float) - math.pi * om1 * n1
    P1 = _pack(-1j * np.sin(a1), 1j * np.cos(a1), -1j * np.cos(a1), -1j * np.sin(a1))
    a0 = np.asarray(k0, dtype=float) - math.pi * om0 * n0
    P0 = _pack(np.sin(a0), 1j * np.cos(a0), -1j * np.cos(a0), -np.sin(a0))
    P1 = np.broadcast_to(P1, np.broadcast(np.asarray(k0), np.asarray(k1)).shape + (2, 2)).copy()
    P0 = np.broadcast_to(P0, P1.shape).copy()
    return {"P0": P0, "P1": P1, "Q0": -P0, "Q1": P1.copy()}


def dressed_vertices(k0, k1, n: tuple[int, int], omega: tuple[float, float],
                     t0: float, t1: float, bare=None):
    """Vertices after decoupling the massive species.

    Returns a dict with, for j in {0,1}:
      Qpsi_j  mixed vertex, dressing attached on the incoming side
      Rpsi_j  mixed vertex, dressing attached on the outgoing (shifted) side
      Ppsi_j  fully dressed direct vertex
    All are lambda-independent; n = (0,0) gives zeros.
    """
    n0, n1 = n
    om0, om1 = omega
    ks0 = np.asarray(k0, dtype=float) - 2.0 * math.pi * om0 * n0
    ks1 = np.asarray(k1, dtype=float) - 2.0 * math.pi * om1 * n1
    V = bare if bare is not None else vertex_matrices(k0, k1, n, omega)
    Q_in = q_matrix(k0, k1, t0, t1)
    Q_out = q_matrix(ks0, ks1, t0, t1)
    Gi = g_xi(k0, k1, t0, t1)
    Go = g_xi(ks0, ks1, t0, t1)
    out = {}
    for j in (0, 1):
        P = V[f"P{j}"]
        Q = V[f"Q{j}"]
        left = Q_in @ Gi
        right = Go @ Q_out
        out[f"Qpsi_{j}"] = Q - left @ P
        out[f"Rpsi_{j}"] = Q - P @ right
        out[f"Ppsi_{j}"] = P - Q @ right - left @ Q + left @ P @ right
    return out


def g_psi_inverse(k0, k1, t0: float, t1: float):
    """Inverse critical propagator after decoupling:
    C_psi(k) - Q(k) C_chi(k)^-1 Q(k)."""
    Q = q_matrix(k0, k1, t0, t1)
    return c_matrix(k0, k1, t0, t1, "psi") - Q @ g_xi(k0, k1, t0, t1) @ Q


def g_psi(k0, k1, t0: float, t1: float):
    K = g_psi_inverse(k0, k1, t0, t1)
    det = K[..., 0, 0] * K[..., 1, 1] - K[..., 0, 1] * K[..., 1, 0]
    if np.min(np.abs(det)) < 1e-13:
        raise ArithmeticError(
            "critical propagator singular on this momentum set "
            f"(min |det| = {np.min(np.abs(det)):.3e})")
    return _inv2(K)


def velocity_coefficients(t0: float, t1: float, step: float = 1e-5) -> tuple[float, float]:
    """Bare velocity pair (a0, a1) from the gradient of the inverse critical
    kernel at k = 0 (central differences)."""
    def k11(k0, k1):
        return g_psi_inverse(k0, k1, t0, t1)[0, 0]

    d0 = (k11(step, 0.0) - k11(-step, 0.0)) / (2.0 * step)
    d1 = (k11(0.0, step) - k11(0.0, -step)) / (2.0 * step)
    a0 = -d0
    a1 = 1j * d1
    for name, a in (("a0", a0), ("a1", a1)):
        if abs(a.imag) > 1e-9:
            raise ArithmeticError(f"{name} acquired an imaginary part: {a}")
    return float(a0.real), float(a1.real)


# ---------------------------------------------------------------------------
# sector momentum grids


@dataclass(frozen=True)
class MomentumGrid:
    """Discrete momenta of one boundary sector on a box.

    k_j = 2*pi*(m_j + off_j)/L_j with off = 0 on periodic axes and 1/2 on
    antiperiodic ones; m_j = 0..L_j-1.  Harmonic shifts k - 2*pi*Omega*n act
    as exact index maps.
    """

    L0: int
    L1: int
    p0: int
    p1: int
    sector: str

    def __post_init__(self):
        if self.sector not in ("++", "+-", "-+", "--"):
            raise ValueError(f"unknown sector {self.sector!r}")

    @property
    def offsets(self) -> tuple[float, float]:
        return tuple(0.0 if c == "+" else 0.5 for c in self.sector)  # type: ignore

    def axis(self, j: int) -> np.ndarray:
        L = (self.L0, self.L1)[j]
        off = self.offsets[j]
        return 2.0 * math.pi * (np.arange(L) + off) / L

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        k0 = self.axis(0)[:, None]
        k1 = self.axis(1)[None, :]
        return np.broadcast_arrays(k0, k1)

    def negate(self, m0: int, m1: int) -> tuple[int, int]:
        """Index of -k for grid index (m0, m1)."""
        d0 = 1 if self.offsets[0] else 0
        d1 = 1 if self.offsets[1] else 0
        return ((-m0 - d0) % self.L0, (-m1 - d1) % self.L1)

    def shift(self, m0: int, m1: int, n: tuple[int, int]) -> tuple[int, int]:
        """Index of k - 2*pi*Omega*n."""
        return ((m0 - self.p0 * n[0]) % self.L0, (m1 - self.p1 * n[1]) % self.L1)

    def k_of(self, m0: int, m1: int) -> tuple[float, float]:
        o0, o1 = self.offsets
        return (2.0 * math.pi * (m0 + o0) / self.L0,
                2.0 * math.pi * (m1 + o1) / self.L1)

    def self_paired(self, m0: int, m1: int) -> bool:
        return self.negate(m0, m1) == (m0, m1)
