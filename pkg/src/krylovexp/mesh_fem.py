"""Stretched tensor-product meshes and SUPG-stabilised Q1 assembly.

The assembled semi-discrete system is ``y' = -A y + g`` on interior nodes,
with ``A = M_L^{-1} K_II`` and the lifted boundary data
``g_bc = -M_L^{-1} K_IB u_B`` (``M_L`` the row-sum lumped mass).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .la_core import ContractError, CsrMatrix, asymmetry_ratio

# Smallest cell widths of the reference stretched grids, by cells per side.
REFERENCE_MIN_H = {256: 5.9804e-04, 512: 2.0102e-04}

_GAUSS = 1.0 / math.sqrt(3.0)
# Local node order: (-1,-1), (1,-1), (1,1), (-1,1) in reference coordinates.
_XI = np.array([-1.0, 1.0, 1.0, -1.0])
_ETA = np.array([-1.0, -1.0, 1.0, 1.0])


@dataclass(frozen=True, eq=False)
class StretchedMesh:
    """Tensor-product grid on ``[-1, 1]^2`` graded towards the walls."""

    nx: int
    ny: int
    x_coords: np.ndarray
    y_coords: np.ndarray

    @property
    def hx(self) -> np.ndarray:
        return np.diff(self.x_coords)

    @property
    def hy(self) -> np.ndarray:
        return np.diff(self.y_coords)

    @property
    def min_h(self) -> float:
        return float(min(self.hx.min(), self.hy.min()))

    @property
    def max_h(self) -> float:
        return float(max(self.hx.max(), self.hy.max()))

    @property
    def ratio(self) -> float:
        return self.max_h / self.min_h

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def n_interior(self) -> int:
        return (self.nx - 1) * (self.ny - 1)

    @property
    def interior_index_map(self) -> np.ndarray:
        """``(ny+1, nx+1)`` array: unknown index of node ``(i, j)`` at ``[j, i]``, -1 on the boundary."""
        idx = -np.ones((self.ny + 1, self.nx + 1), dtype=np.int64)
        idx[1:-1, 1:-1] = np.arange(self.n_interior).reshape(self.ny - 1, self.nx - 1)
        return idx

    def node_ids(self) -> np.ndarray:
        return np.arange(self.n_nodes).reshape(self.ny + 1, self.nx + 1)

    def interior_nodes(self) -> np.ndarray:
        """Global ids of interior nodes in unknown order."""
        return self.node_ids()[1:-1, 1:-1].ravel()

    def boundary_nodes(self) -> np.ndarray:
        mask = np.ones((self.ny + 1, self.nx + 1), dtype=bool)
        mask[1:-1, 1:-1] = False
        return self.node_ids()[mask]

    def node_xy(self):
        """Coordinates of all nodes, flattened with x fastest."""
        X, Y = np.meshgrid(self.x_coords, self.y_coords)
        return X.ravel(), Y.ravel()

    def interior_xy(self):
        X, Y = np.meshgrid(self.x_coords[1:-1], self.y_coords[1:-1])
        return X.ravel(), Y.ravel()


def _graded_half(n_half: int, q: float) -> np.ndarray:
    """Cell widths from the wall to the centre, summing to one."""
    widths = q ** np.arange(n_half)
    return widths / widths.sum()


def _axis(n: int, q: float) -> np.ndarray:
    half = n // 2
    left = -1.0 + np.concatenate(([0.0], np.cumsum(_graded_half(half, q))))
    left[-1] = 0.0
    return np.concatenate((left, -left[-2::-1]))


def build_stretched_grid(n: int, stretch_ratio: float = 1.0) -> StretchedMesh:
    """Grid with ``n`` cells per side whose widths grow geometrically from each wall.

    The per-cell growth factor ``q`` is chosen so that the largest (central)
    over the smallest (wall) cell width equals ``stretch_ratio``.
    """
    if n < 4 or n % 2:
        raise ContractError(f"n must be even and >= 4, got {n}")
    if stretch_ratio < 1.0:
        raise ContractError("stretch_ratio must be >= 1")
    half = n // 2
    q = float(stretch_ratio) ** (1.0 / (half - 1))
    coords = _axis(n, q)
    return StretchedMesh(n, n, coords, coords.copy())


def _reference_min_h(n: int) -> float:
    if n in REFERENCE_MIN_H:
        return REFERENCE_MIN_H[n]
    # power law through the two reference grids
    (n0, h0), (n1, h1) = sorted(REFERENCE_MIN_H.items())
    slope = math.log(h1 / h0) / math.log(n1 / n0)
    return h0 * (n / n0) ** slope


def calibrated_stretch_ratio(n: int, min_h: float | None = None, tol: float = 1e-14) -> float:
    """Stretch ratio whose wall cell width equals ``min_h``, found by bisection.

    Without ``min_h`` the reference grids' wall widths are used (interpolated
    in ``n`` on a log-log scale for other sizes).
    """
    if n < 4 or n % 2:
        raise ContractError(f"n must be even and >= 4, got {n}")
    target = _reference_min_h(n) if min_h is None else float(min_h)
    half = n // 2
    if not 0.0 < target <= 1.0 / half:
        raise ContractError(f"min_h={target} is not attainable with {n} cells")
    lo, hi = 1.0, 2.0
    while _graded_half(half, hi)[0] > target:
        hi *= 2.0
    while hi - lo > tol * hi:
        mid = 0.5 * (lo + hi)
        if _graded_half(half, mid)[0] > target:
            lo = mid
        else:
            hi = mid
    q = 0.5 * (lo + hi)
    return q ** (half - 1)


def wind_field(x, y):
    """Recirculating wind ``(y (1 - x^2), x (y^2 - 1))``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return y * (1.0 - x * x), x * (y * y - 1.0)


def zero_wind(x, y):
    x = np.asarray(x, dtype=float)
    return np.zeros_like(x), np.zeros_like(x)


def boundary_value(x, y):
    """Dirichlet data: 5 on three walls, ``5 + 5 exp(-50 x^2)`` on the top."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return np.where(y >= 1.0, 5.0 + 5.0 * np.exp(-50.0 * x * x), 5.0)


def peak_source(x, y):
    return np.exp(-10.0 * np.asarray(x) ** 2 - 50.0 * np.asarray(y) ** 2)


def boundary_vectors(mesh: StretchedMesh):
    """Return ``(g_bc_raw, g_peak)``.

    ``g_bc_raw`` holds Dirichlet values on every node (zero at interior
    nodes); ``g_peak`` holds the Gaussian source at interior nodes.
    """
    X, Y = mesh.node_xy()
    raw = np.zeros(mesh.n_nodes)
    bnd = mesh.boundary_nodes()
    raw[bnd] = boundary_value(X[bnd], Y[bnd])
    xi, yi = mesh.interior_xy()
    return raw, peak_source(xi, yi)


def streamline_length(hx, hy, v1, v2):
    """Element length along the flow: ``min(hx/|cos a|, hy/|sin a|)``.

    A vanishing velocity component drops its term; zero wind gives zero.
    """
    hx, hy, v1, v2 = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (hx, hy, v1, v2)))
    speed = np.hypot(v1, v2)
    with np.errstate(divide="ignore", invalid="ignore"):
        lx = np.where(v1 != 0.0, hx * speed / np.abs(v1), np.inf)
        ly = np.where(v2 != 0.0, hy * speed / np.abs(v2), np.inf)
    length = np.minimum(lx, ly)
    return np.where(speed > 0.0, length, 0.0)


def element_peclet(hx, hy, v1, v2, nu):
    """``|v| * streamline_length / (2 nu)``."""
    return np.hypot(v1, v2) * streamline_length(hx, hy, v1, v2) / (2.0 * nu)


def supg_parameter(hx, hy, v1, v2, nu):
    """``delta = h/(2|v|) (coth Pe - 1/Pe)``, zero where the wind vanishes."""
    speed = np.hypot(v1, v2)
    h = streamline_length(hx, hy, v1, v2)
    pe = speed * h / (2.0 * nu)
    xi = np.zeros_like(pe)
    small = pe < 1e-3
    xi[small] = pe[small] / 3.0 - pe[small] ** 3 / 45.0
    big = ~small
    xi[big] = 1.0 / np.tanh(pe[big]) - 1.0 / pe[big]
    with np.errstate(divide="ignore", invalid="ignore"):
        delta = np.where(speed > 0.0, h / (2.0 * speed) * xi, 0.0)
    return delta


@dataclass(frozen=True, eq=False)
class DiscreteOperator:
    """Mass-scaled interior operator plus the problem's source vectors."""

    A: CsrMatrix
    A_diff: CsrMatrix
    g_bc: np.ndarray
    g_peak: np.ndarray
    mesh: StretchedMesh
    nu: float
    max_elem_peclet: float
    lumped_mass: np.ndarray
    with_supg: bool = True

    @property
    def n(self) -> int:
        return self.A.n_rows


def _element_geometry(mesh: StretchedMesh):
    hx, hy = np.meshgrid(mesh.hx, mesh.hy)
    xc, yc = np.meshgrid(0.5 * (mesh.x_coords[1:] + mesh.x_coords[:-1]),
                         0.5 * (mesh.y_coords[1:] + mesh.y_coords[:-1]))
    ids = mesh.node_ids()
    conn = np.stack([ids[:-1, :-1], ids[:-1, 1:], ids[1:, 1:], ids[1:, :-1]], axis=-1)
    return hx.ravel(), hy.ravel(), xc.ravel(), yc.ravel(), conn.reshape(-1, 4)


def _assemble_full(mesh: StretchedMesh, nu: float, wind, with_supg: bool):
    """Global Q1 stiffness (diffusion + advection [+ SUPG]) and lumped mass."""
    hx, hy, xc, yc, conn = _element_geometry(mesh)
    n_el = len(hx)
    detj = hx * hy / 4.0
    ke = np.zeros((n_el, 4, 4))
    if with_supg:
        vc1, vc2 = wind(xc, yc)
        delta = supg_parameter(hx, hy, vc1, vc2, nu)
    for gx in (-_GAUSS, _GAUSS):
        for gy in (-_GAUSS, _GAUSS):
            shape = 0.25 * (1.0 + _XI * gx) * (1.0 + _ETA * gy)
            dxi = 0.25 * _XI * (1.0 + _ETA * gy)
            deta = 0.25 * _ETA * (1.0 + _XI * gx)
            dNdx = np.outer(2.0 / hx, dxi)
            dNdy = np.outer(2.0 / hy, deta)
            ke += nu * detj[:, None, None] * (dNdx[:, :, None] * dNdx[:, None, :]
                                             + dNdy[:, :, None] * dNdy[:, None, :])
            v1, v2 = wind(xc + 0.5 * gx * hx, yc + 0.5 * gy * hy)
            conv = v1[:, None] * dNdx + v2[:, None] * dNdy
            ke += detj[:, None, None] * shape[None, :, None] * conv[:, None, :]
            if with_supg:
                ke += (delta * detj)[:, None, None] * conv[:, :, None] * conv[:, None, :]
    rows = np.repeat(conn, 4, axis=1).ravel()
    cols = np.tile(conn, (1, 4)).ravel()
    K = sp.csr_array((ke.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes))
    K.sum_duplicates()
    mass = np.zeros(mesh.n_nodes)
    np.add.at(mass, conn.ravel(), np.repeat(detj, 4))
    return K, mass


def assemble_operator(mesh: StretchedMesh, nu: float, with_supg: bool = True,
                      wind: Callable = wind_field, boundary: Callable = boundary_value) -> DiscreteOperator:
    """Assemble ``A``, ``A_diff``, ``g_bc`` and ``g_peak`` on ``mesh``.

    Parameters
    ----------
    mesh : StretchedMesh
    nu : float
        Viscosity, must be positive.
    with_supg : bool
        Add the streamline-diffusion term.
    wind, boundary : callable
        Velocity field ``(x, y) -> (v1, v2)`` and Dirichlet data ``(x, y) -> u``.
    """
    if not nu > 0:
        raise ContractError("nu must be positive")
    interior = mesh.interior_nodes()
    bnd = mesh.boundary_nodes()
    X, Y = mesh.node_xy()
    u_b = boundary(X[bnd], Y[bnd])

    K, mass = _assemble_full(mesh, nu, wind, with_supg)
    Kd, _ = _assemble_full(mesh, nu, zero_wind, False)
    inv_m = 1.0 / mass[interior]
    scale = sp.diags_array(inv_m)

    def reduce(mat):
        return CsrMatrix.from_scipy(scale @ mat[interior][:, interior])

    g_bc = -inv_m * (K[interior][:, bnd] @ u_b)
    _, g_peak = boundary_vectors(mesh)

    hx, hy, xc, yc, _ = _element_geometry(mesh)
    v1, v2 = wind(xc, yc)
    peclet = float(np.max(element_peclet(hx, hy, v1, v2, nu), initial=0.0))
    return DiscreteOperator(A=reduce(K), A_diff=reduce(Kd), g_bc=g_bc, g_peak=g_peak, mesh=mesh,
                            nu=float(nu), max_elem_peclet=peclet, lumped_mass=mass[interior],
                            with_supg=with_supg)


def peclet_report(op: DiscreteOperator, wind: Callable = wind_field) -> float:
    """Maximum element Peclet number, wind sampled at element centres."""
    hx, hy, xc, yc, _ = _element_geometry(op.mesh)
    v1, v2 = wind(xc, yc)
    return float(np.max(element_peclet(hx, hy, v1, v2, op.nu), initial=0.0))


def diagnostics(op: DiscreteOperator) -> dict:
    mesh = op.mesh
    return {
        "n": mesh.nx,
        "unknowns": op.n,
        "nu": op.nu,
        "min_h": mesh.min_h,
        "max_h": mesh.max_h,
        "ratio": mesh.ratio,
        "max_elem_peclet": op.max_elem_peclet,
        "asymmetry_ratio": asymmetry_ratio(op.A),
    }


def format_diagnostics(diag: dict) -> str:
    return "\n".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in diag.items())


def write_mesh(path, mesh: StretchedMesh) -> None:
    with Path(path).open("w") as fh:
        fh.write(f"# nx={mesh.nx} ny={mesh.ny}\n")
        fh.write("x_coords\n")
        fh.writelines(f"{float(v)!r}\n" for v in mesh.x_coords)
        fh.write("y_coords\n")
        fh.writelines(f"{float(v)!r}\n" for v in mesh.y_coords)


def read_mesh(path) -> StretchedMesh:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    iy = lines.index("y_coords")
    x = np.array([float(v) for v in lines[1:iy]])
    y = np.array([float(v) for v in lines[iy + 1:]])
    return StretchedMesh(len(x) - 1, len(y) - 1, x, y)
