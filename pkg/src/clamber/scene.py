"""Contact environment: surfaces, frames, signed distances, scenarios.

A Surface is an unbounded primitive (plane or cylinder shell) restricted to
a convex patch by halfspaces ``A p <= b`` in world coordinates.  Signed
distance is measured to the patch, not the primitive: positive on the free
side, zero on the patch, negative only for points directly behind it.
Points beside a patch (for example a toe on the ground next to a brick) get
positive distance, which keeps the non-penetration constraints meaningful
when several candidate surfaces overlap.  The price is a documented jump of
the distance field across the lateral patch boundary on the material side;
the shipped scenarios keep that set out of reach.

Frames returned by :func:`contact_frame` map world vectors into the contact
frame; rows are the two tangents followed by the normal pointing into free
space (into the corridor or tube interior, hence "inward").
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from clamber.lp import feasible_point

_UP = np.array([0.0, 0.0, 1.0])
_EPS = 1e-12


class DegeneratePoint(Exception):
    """Raised for frame requests at points where the normal is undefined."""


class UnknownScenario(Exception):
    """Raised for scenario names outside the shipped library."""


def _tangent_pair(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic tangents for a unit normal: z cross world-up, else world-x."""
    t1 = np.cross(z, _UP)
    n = np.linalg.norm(t1)
    if n < 1e-8:
        t1 = np.array([1.0, 0.0, 0.0])
    else:
        t1 = t1 / n
    t2 = np.cross(z, t1)
    return t1, t2


def _polygon_vertices(G: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Feasible vertices of {x : G x <= g} by Cramer's rule on facet pairs."""
    if G.shape[0] < 2:
        return np.zeros((0, 2))
    k, l = np.triu_indices(G.shape[0], 1)
    det = G[k, 0] * G[l, 1] - G[k, 1] * G[l, 0]
    ok = np.abs(det) >= _EPS
    det = np.where(ok, det, 1.0)
    verts = np.stack(
        [
            (g[k] * G[l, 1] - g[l] * G[k, 1]) / det,
            (G[k, 0] * g[l] - G[l, 0] * g[k]) / det,
        ],
        axis=1,
    )[ok]
    return verts[np.all(G @ verts.T <= g[:, None] + 1e-9, axis=0)]


def _project_polygon(
    xi: np.ndarray, G: np.ndarray, g: np.ndarray, nn=None, verts=None
) -> np.ndarray:
    """Exact Euclidean projection of a 2-vector onto {x : G x <= g}.

    Small enough to enumerate: the projection is the point itself, the foot
    on one facet, or a vertex where two facets meet.  Facet normals and
    vertices are constants of the polygon, so callers in the hot path pass
    them precomputed.
    """
    if G.shape[0] == 0 or np.all(G @ xi <= g + _EPS):
        return xi
    if nn is None:
        nn = np.maximum(np.einsum("kd,kd->k", G, G), _EPS)
    if verts is None:
        verts = _polygon_vertices(G, g)
    feet = xi - ((G @ xi - g) / nn)[:, None] * G
    feas = np.all(G @ feet.T <= g[:, None] + 1e-9, axis=0)
    cands = np.vstack([feet[feas], verts]) if verts.size else feet[feas]
    if cands.shape[0] == 0:
        raise ValueError("projection onto an empty region")
    d2 = np.einsum("kd,kd->k", cands - xi, cands - xi)
    return cands[np.argmin(d2)]


@dataclass(frozen=True)
class Surface:
    """One contact surface: a plane or cylinder shell with a convex patch.

    ``axis`` is the plane normal (pointing into free space) or the cylinder
    axis direction.  ``region_A``/``region_b`` restrict the patch; an empty
    region means the whole primitive.  Cylinder regions must be separable
    into height bounds (rows parallel to the axis) and angular wedges (rows
    perpendicular to it); mixed rows are rejected.
    """

    name: str
    kind: str
    origin: np.ndarray
    axis: np.ndarray
    friction: float
    radius: float = 0.0
    region_A: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    region_b: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        a = np.asarray(self.axis, dtype=float)
        if np.linalg.norm(a) < 1e-9:
            raise ValueError(f"surface {self.name!r}: zero axis")
        object.__setattr__(self, "axis", a / np.linalg.norm(a))
        object.__setattr__(self, "region_A", np.atleast_2d(np.asarray(self.region_A, dtype=float)))
        object.__setattr__(self, "region_b", np.asarray(self.region_b, dtype=float))
        if self.region_A.shape[0] == 0:
            object.__setattr__(self, "region_A", np.zeros((0, 3)))
            object.__setattr__(self, "region_b", np.zeros(0))
        if self.region_A.shape[0] != self.region_b.shape[0]:
            raise ValueError(f"surface {self.name!r}: region rows mismatch")
        if self.friction <= 0:
            raise ValueError(f"surface {self.name!r}: friction must be positive")
        if self.kind == "plane":
            self._setup_plane()
        elif self.kind in ("cylinder-interior", "cylinder-exterior"):
            if self.radius <= 0:
                raise ValueError(f"surface {self.name!r}: cylinder needs radius > 0")
            self._setup_cylinder()
        else:
            raise ValueError(f"surface {self.name!r}: unknown kind {self.kind!r}")

    # -- plane parametrization: q = origin + V @ xi, region G xi <= g

    def _setup_plane(self):
        t1, t2 = _tangent_pair(self.axis)
        V = np.column_stack([t1, t2])
        G = self.region_A @ V
        g = self.region_b - self.region_A @ self.origin
        keep = np.linalg.norm(G, axis=1) > 1e-10
        if np.any(~keep & (g < -1e-9)):
            raise ValueError(f"surface {self.name!r}: region excludes the whole plane")
        G, g = G[keep], g[keep]
        if G.shape[0] > 0 and not feasible_point(A_ub=G, b_ub=g).optimal:
            raise ValueError(f"surface {self.name!r}: empty contact region")
        object.__setattr__(self, "_V", V)
        object.__setattr__(self, "_G", G)
        object.__setattr__(self, "_g", g)
        object.__setattr__(
            self, "_Gnn", np.maximum(np.einsum("kd,kd->k", G, G), _EPS)
        )
        object.__setattr__(self, "_verts", _polygon_vertices(G, g))

    # -- cylinder parametrization: q = origin + t*axis + R*rhat(phi)

    def _setup_cylinder(self):
        e1, e2 = _tangent_pair(self.axis)
        t_lo, t_hi = -np.inf, np.inf
        wedges = []  # (phi_k, kappa_k): feasible iff cos(phi - phi_k) <= kappa_k
        for a_k, b_k in zip(self.region_A, self.region_b):
            d_ax = a_k @ self.axis
            a_perp = a_k - d_ax * self.axis
            c = b_k - a_k @ self.origin
            if np.linalg.norm(a_perp) < 1e-9:
                if abs(d_ax) < 1e-9:
                    if c < -1e-9:
                        raise ValueError(f"surface {self.name!r}: empty contact region")
                    continue
                bound = c / d_ax
                if d_ax > 0:
                    t_hi = min(t_hi, bound)
                else:
                    t_lo = max(t_lo, bound)
            elif abs(d_ax) < 1e-9:
                phi_k = np.arctan2(a_perp @ e2, a_perp @ e1)
                kappa = c / (self.radius * np.linalg.norm(a_perp))
                wedges.append((phi_k, kappa))
            else:
                raise ValueError(
                    f"surface {self.name!r}: cylinder region rows must be parallel "
                    "or perpendicular to the axis"
                )
        if t_lo > t_hi + 1e-9:
            raise ValueError(f"surface {self.name!r}: empty contact region")
        if wedges and not self._some_angle_feasible(wedges):
            raise ValueError(f"surface {self.name!r}: empty contact region")
        object.__setattr__(self, "_e1", e1)
        object.__setattr__(self, "_e2", e2)
        object.__setattr__(self, "_t_bounds", (t_lo, t_hi))
        object.__setattr__(self, "_wedges", tuple(wedges))

    @staticmethod
    def _some_angle_feasible(wedges) -> bool:
        candidates = []
        for phi_k, kappa in wedges:
            if kappa < -1.0:
                return False
            arc = np.arccos(np.clip(kappa, -1.0, 1.0))
            candidates += [phi_k + arc, phi_k - arc, phi_k + np.pi]
        return any(
            all(np.cos(phi - pk) <= kk + 1e-9 for pk, kk in wedges) for phi in candidates
        )

    def _angle_feasible(self, phi: float) -> bool:
        return all(np.cos(phi - pk) <= kk + _EPS for pk, kk in self._wedges)

    def _clip_angle(self, phi: float) -> float:
        if self._angle_feasible(phi):
            return phi
        best, best_cos = None, -np.inf
        for phi_k, kappa in self._wedges:
            arc = np.arccos(np.clip(kappa, -1.0, 1.0))
            for cand in (phi_k + arc, phi_k - arc):
                if self._angle_feasible(cand) and np.cos(cand - phi) > best_cos:
                    best, best_cos = cand, np.cos(cand - phi)
        if best is None:
            raise ValueError(f"surface {self.name!r}: no feasible contact angle")
        return best

    def _cyl_coords(self, p: np.ndarray):
        rel = p - self.origin
        t = rel @ self.axis
        w = rel - t * self.axis
        rho = np.linalg.norm(w)
        rhat = w / rho if rho > _EPS else self._e1
        phi = np.arctan2(rhat @ self._e2, rhat @ self._e1)
        return t, rho, rhat, phi


def _plane_height(s: Surface, p: np.ndarray) -> float:
    return float(s.axis @ (p - s.origin))


def surface_normal(s: Surface, q: np.ndarray) -> np.ndarray:
    """Unit normal into free space at a point on (or radially aligned with) s."""
    if s.kind == "plane":
        return s.axis
    _, _, rhat, _ = s._cyl_coords(np.asarray(q, dtype=float))
    return -rhat if s.kind == "cylinder-interior" else rhat


def surface_normal_and_jacobian(s: Surface, p) -> tuple[np.ndarray, np.ndarray]:
    """Free-space normal at the point radially aligned with p, and d(normal)/dp.

    Planes have a constant normal (zero Jacobian); cylinder normals turn as
    the point moves around the axis.
    """
    p = np.asarray(p, dtype=float)
    if s.kind == "plane":
        return s.axis, np.zeros((3, 3))
    _, rho, rhat, _ = s._cyl_coords(p)
    if rho < 1e-9:
        return surface_normal(s, p), np.zeros((3, 3))
    perp = np.eye(3) - np.outer(s.axis, s.axis)
    drhat = (perp - np.outer(rhat, rhat)) / rho
    sign = -1.0 if s.kind == "cylinder-interior" else 1.0
    return sign * rhat, sign * drhat


def project_to_patch(s: Surface, p) -> np.ndarray:
    """Closest point of the contact patch (primitive restricted to region)."""
    p = np.asarray(p, dtype=float)
    if s.kind == "plane":
        xi = s._V.T @ (p - s.origin)
        xi = _project_polygon(xi, s._G, s._g, s._Gnn, s._verts)
        return s.origin + s._V @ xi
    t, _, _, phi = s._cyl_coords(p)
    t_lo, t_hi = s._t_bounds
    t = float(np.clip(t, t_lo, t_hi))
    phi = s._clip_angle(phi)
    rhat = np.cos(phi) * s._e1 + np.sin(phi) * s._e2
    return s.origin + t * s.axis + s.radius * rhat


def _in_patch_laterally(s: Surface, p: np.ndarray) -> bool:
    if s.kind == "plane":
        xi = s._V.T @ (p - s.origin)
        return s._G.shape[0] == 0 or bool(np.all(s._G @ xi <= s._g + _EPS))
    t, _, _, phi = s._cyl_coords(p)
    t_lo, t_hi = s._t_bounds
    return t_lo - _EPS <= t <= t_hi + _EPS and s._angle_feasible(phi)


def signed_distance_and_gradient(s: Surface, p) -> tuple[float, np.ndarray]:
    """Patch signed distance and its gradient (unit norm almost everywhere).

    Directly over the patch the distance reduces to the smooth height
    above the primitive and the gradient to the free-space normal; off to
    the side it is the plain distance to the patch.
    """
    p = np.asarray(p, dtype=float)
    if s.kind == "plane":
        h = _plane_height(s, p)
    else:
        _, rho, _, _ = s._cyl_coords(p)
        h = s.radius - rho if s.kind == "cylinder-interior" else rho - s.radius
    if _in_patch_laterally(s, p):
        return h, surface_normal(s, p)
    q = project_to_patch(s, p)
    d = float(np.linalg.norm(p - q))
    if d < 1e-9:
        return d, surface_normal(s, q)
    return d, (p - q) / d


def signed_distance(s: Surface, p) -> float:
    return signed_distance_and_gradient(s, p)[0]


def contact_frame(s: Surface, p) -> np.ndarray:
    """World-to-contact rotation at the patch point nearest p.

    Rows are tangent-1, tangent-2 and the free-space normal, so for a toe
    position ``p``, ``contact_frame(s, q) @ f`` expresses a world force in
    the contact frame and row 2 picks out the normal component.
    """
    p = np.asarray(p, dtype=float)
    if s.kind != "plane":
        _, rho, _, _ = s._cyl_coords(p)
        if rho < 1e-9:
            raise DegeneratePoint(f"surface {s.name!r}: point on the cylinder axis")
    q = project_to_patch(s, p)
    z = surface_normal(s, q)
    t1, t2 = _tangent_pair(z)
    return np.vstack([t1, t2, z])


# ---------------------------------------------------------------------------
# scene


@dataclass(frozen=True)
class Scene:
    """Immutable environment: surfaces, gravity, and per-leg candidates."""

    surfaces: tuple[Surface, ...]
    gravity: np.ndarray
    candidate_map: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "surfaces", tuple(self.surfaces))
        object.__setattr__(self, "gravity", np.asarray(self.gravity, dtype=float))
        object.__setattr__(
            self, "candidate_map", tuple(tuple(c) for c in self.candidate_map)
        )
        if np.linalg.norm(self.gravity) < 1e-9:
            raise ValueError("gravity must be nonzero")
        for i, cands in enumerate(self.candidate_map):
            if len(cands) == 0:
                raise ValueError(f"leg {i} has no candidate surfaces")
            for s in cands:
                if not 0 <= s < len(self.surfaces):
                    raise ValueError(f"leg {i}: candidate index {s} out of range")

    @property
    def n_legs(self) -> int:
        return len(self.candidate_map)


SCENARIO_NAMES = (
    "parallel_wall",
    "parallel_wall_steps",
    "parallel_wall_incline",
    "tube_exit",
    "flat_ground",
)

GRAVITY = np.array([0.0, 0.0, -9.81])


def _box_region(x=None, y=None, z=None):
    """Axis-aligned halfspaces from optional (lo, hi) bounds per axis."""
    A, b = [], []
    for axis_idx, bounds in enumerate((x, y, z)):
        if bounds is None:
            continue
        lo, hi = bounds
        row = np.zeros(3)
        row[axis_idx] = 1.0
        A += [row.copy(), -row]
        b += [hi, -lo]
    return np.array(A), np.array(b)


def _parallel_wall_surfaces(gap, wall_mu, ground_mu):
    half = gap / 2.0
    ground_A, ground_b = _box_region(x=(-half, half), y=(-1.2, 1.2))
    wall_A_l, wall_b_l = _box_region(y=(-1.2, 1.2), z=(0.0, 1.5))
    surfaces = [
        Surface("ground", "plane", (0.0, 0.0, 0.0), (0.0, 0.0, 1.0), ground_mu,
                region_A=ground_A, region_b=ground_b),
        Surface("wall_left", "plane", (-half, 0.0, 0.0), (1.0, 0.0, 0.0), wall_mu,
                region_A=wall_A_l, region_b=wall_b_l),
        Surface("wall_right", "plane", (half, 0.0, 0.0), (-1.0, 0.0, 0.0), wall_mu,
                region_A=wall_A_l.copy(), region_b=wall_b_l.copy()),
    ]
    return surfaces


def scenario_library(name: str, params: dict | None = None) -> Scene:
    """Build one of the shipped scene families by name.

    All lengths are meters.  Unknown names raise :class:`UnknownScenario`;
    unknown parameter keys raise ValueError so typos do not silently fall
    back to defaults.
    """
    params = dict(params or {})

    def take(key, default):
        return params.pop(key, default)

    n_legs = int(take("n_legs", 6))
    left = tuple(range(0, n_legs, 2))
    right = tuple(range(1, n_legs, 2))

    if name == "parallel_wall":
        gap = take("gap", 1.23)
        surfaces = _parallel_wall_surfaces(gap, take("wall_mu", 1.0), take("ground_mu", 1.0))
        cand = tuple((0, 1) if i in left else (0, 2) for i in range(n_legs))
    elif name == "parallel_wall_steps":
        gap = take("gap", 1.23)
        half = gap / 2.0
        h = take("brick_height", 0.15)
        brick_mu = take("brick_mu", 0.4)
        brick_y = take("brick_y", (0.25, -0.25))
        surfaces = _parallel_wall_surfaces(gap, take("wall_mu", 1.0), take("ground_mu", 1.0))
        for idx, yc in enumerate(brick_y):
            A, b = _box_region(x=(-half + 0.02, -half + 0.32), y=(yc - 0.14, yc + 0.14))
            surfaces.append(
                Surface(f"brick_{idx}", "plane", (-half + 0.17, yc, h), (0.0, 0.0, 1.0),
                        brick_mu, region_A=A, region_b=b)
            )
        cand = []
        for i in range(n_legs):
            if i in right:
                cand.append((0, 2))
            else:
                row = i // 2  # 0 front, 1 middle, 2 rear
                bricks = (3, 4) if row == 1 else ((3,) if row == 0 else (4,))
                cand.append((0, 1) + bricks)
        cand = tuple(cand)
    elif name == "parallel_wall_incline":
        gap = take("gap", 1.23)
        half = gap / 2.0
        alpha = take("incline_angle", np.deg2rad(20.0))
        incline_mu = take("incline_mu", 1.0)
        surfaces = _parallel_wall_surfaces(gap, take("wall_mu", 1.0), take("ground_mu", 1.0))
        A, b = _box_region(x=(-half + 0.03, -half + 0.45), y=(-1.0, 1.0))
        surfaces.append(
            Surface("incline", "plane", (-half + 0.45, 0.0, 0.0),
                    (np.sin(alpha), 0.0, np.cos(alpha)), incline_mu,
                    region_A=A, region_b=b)
        )
        cand = tuple((0, 1, 3) if i in left else (0, 2) for i in range(n_legs))
    elif name == "tube_exit":
        radius = take("radius", 0.62)
        rim_z = take("rim_z", 0.0)
        shell_A, shell_b = _box_region(z=(rim_z - 1.2, rim_z))
        ledge_A, ledge_b = _box_region(x=(radius, radius + 0.5), y=(-0.35, 0.35))
        surfaces = [
            Surface("tube", "cylinder-interior", (0.0, 0.0, rim_z), (0.0, 0.0, 1.0),
                    take("tube_mu", 1.0), radius=radius,
                    region_A=shell_A, region_b=shell_b),
            Surface("ledge", "plane", (0.0, 0.0, rim_z), (0.0, 0.0, 1.0),
                    take("ledge_mu", 0.9), region_A=ledge_A, region_b=ledge_b),
        ]
        cand = tuple((0, 1) for _ in range(n_legs))
    elif name == "flat_ground":
        A, b = _box_region(x=(-5.0, 5.0), y=(-5.0, 5.0))
        surfaces = [
            Surface("ground", "plane", (0.0, 0.0, 0.0), (0.0, 0.0, 1.0),
                    take("ground_mu", 0.9), region_A=A, region_b=b)
        ]
        cand = tuple((0,) for _ in range(n_legs))
    else:
        raise UnknownScenario(
            f"{name!r} (known: {', '.join(SCENARIO_NAMES)})"
        )
    if params:
        raise ValueError(f"unknown scenario parameters: {sorted(params)}")
    return Scene(surfaces=tuple(surfaces), gravity=GRAVITY, candidate_map=cand)


def export_geometry_csv(scene: Scene, path) -> None:
    """Dump sampled patch points for plotting: surface, kind, x, y, z."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["surface", "kind", "x", "y", "z"])
        for s in scene.surfaces:
            for q in _sample_patch(s):
                writer.writerow([s.name, s.kind] + [f"{v:.6f}" for v in q])


def _sample_patch(s: Surface, n: int = 12):
    pts = []
    if s.kind == "plane":
        lim = 1.5
        for u in np.linspace(-lim, lim, n):
            for v in np.linspace(-lim, lim, n):
                xi = np.array([u, v])
                if s._G.shape[0] == 0 or np.all(s._G @ xi <= s._g + 1e-9):
                    pts.append(s.origin + s._V @ xi)
    else:
        t_lo, t_hi = s._t_bounds
        t_lo, t_hi = max(t_lo, -1.5), min(t_hi, 1.5)
        for t in np.linspace(t_lo, t_hi, n):
            for phi in np.linspace(-np.pi, np.pi, 4 * n, endpoint=False):
                if s._angle_feasible(phi):
                    rhat = np.cos(phi) * s._e1 + np.sin(phi) * s._e2
                    pts.append(s.origin + t * s.axis + s.radius * rhat)
    return pts
