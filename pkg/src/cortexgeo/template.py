"""Template meshes: icospheres, ellipsoids and smoothing to convergence."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import Mesh, subdivide_midpoint

MAX_SUBDIVISIONS = 8


def icosahedron() -> Mesh:
    """Regular icosahedron inscribed in the unit sphere, outward CCW faces."""
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    return Mesh(v, f)


def make_icosphere(subdivisions: int = 0, radii=(1.0, 1.0, 1.0)) -> Mesh:
    """Subdivided icosahedron projected onto the ellipsoid with semi-axes ``radii``.

    Vertices are re-projected to the unit sphere after every midpoint split
    and finally scaled radially onto x²/a² + y²/b² + z²/c² = 1.
    The vertex count is 10·4ⁿ + 2.
    """
    n = int(subdivisions)
    if n != subdivisions or n < 0:
        raise ValueError(f"subdivisions must be a non-negative integer, got {subdivisions}")
    if n > MAX_SUBDIVISIONS:
        raise ValueError(f"subdivisions={n} exceeds the cap of {MAX_SUBDIVISIONS}")
    radii = np.asarray(radii, dtype=np.float64)
    if radii.shape != (3,) or np.any(radii <= 0) or not np.all(np.isfinite(radii)):
        raise ValueError("radii must be three positive finite numbers")
    mesh = icosahedron()
    v, f = mesh.vertices, mesh.faces
    for _ in range(n):
        mesh = subdivide_midpoint(Mesh(v, f), 1)
        v = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
        f = mesh.faces
    scale = 1.0 / np.sqrt(np.sum((v / radii) ** 2, axis=1))
    return Mesh(v * scale[:, None], f)


@dataclass(frozen=True)
class SmoothConfig:
    """Settings for ``laplacian_smooth``.

    ``eps`` is the stopping threshold on the largest per-vertex move; when
    ``None`` it defaults to 1e-6 times the bounding-box diagonal. ``alpha``
    and ``beta`` are the HC weights for pulling towards the original and the
    previous positions.
    """

    method: str = "hc"
    lam: float = 1.0
    eps: float | None = None
    max_iters: int = 1000
    alpha: float = 0.0
    beta: float = 0.5

    def __post_init__(self):
        if self.method not in ("uniform", "hc"):
            raise ValueError(f"unknown smoothing method {self.method!r}")
        if not 0 < self.lam <= 1:
            raise ValueError("lam must lie in (0, 1]")
        if self.eps is not None and self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")
        if not (0 <= self.alpha <= 1 and 0 <= self.beta <= 1):
            raise ValueError("alpha and beta must lie in [0, 1]")


def _neighbor_mean(adj, x):
    deg = adj.degree[:, None].astype(np.float64)
    s = adj.matrix @ x
    return np.divide(s, deg, out=x.copy(), where=deg > 0)


def laplacian_smooth(mesh: Mesh, config: SmoothConfig = SmoothConfig()):
    """Smooth vertex positions until the largest move drops below ``eps``.

    ``uniform`` moves each vertex a fraction ``lam`` towards its neighbour
    mean. ``hc`` follows the uniform step with Vollmer's correction
    (Vollmer, Mencl & Müller 1999), pushing the vertices back by the smoothed
    difference vectors, which counters shrinkage. Updates are Jacobi-style.
    Returns ``(mesh, iterations)``.
    """
    mesh.check_manifold()
    adj = mesh.adjacency
    eps = config.eps if config.eps is not None else 1e-6 * mesh.bounding_box_diagonal()
    if eps <= 0:
        eps = 1e-12
    orig = mesh.vertices.copy()
    x = orig.copy()
    lam = config.lam
    it = 0
    for it in range(1, config.max_iters + 1):
        p = x + lam * (_neighbor_mean(adj, x) - x)
        if config.method == "hc":
            b = p - (config.alpha * orig + (1.0 - config.alpha) * x)
            p = p - (config.beta * b + (1.0 - config.beta) * _neighbor_mean(adj, b))
        move = float(np.max(np.linalg.norm(p - x, axis=1))) if len(x) else 0.0
        if move < eps:
            # converged: this step is below the resolution that counts as change
            return mesh.with_vertices(x), it - 1
        x = p
    return mesh.with_vertices(x), it
