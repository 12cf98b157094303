"""Translation-invariant plane measures and their directional evaluators.

A plane measure factorizes into Lebesgue measure on the signed distance and a
directional distribution on the upper half-sphere.  The intensity factor is
fixed to one, so all scaling is carried by the construction time.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

DIRECTION_TOL = 1e-12

ISOTROPIC_ZETA2 = np.pi / 4
ISOTROPIC_ZETA3 = np.pi / 8


class ModelError(ValueError):
    pass


def canonical_direction(v) -> np.ndarray:
    """Normalize ``v`` and map it to the upper half-sphere.

    Components within ``DIRECTION_TOL`` of zero count as zero when deciding
    the sign, so axis-parallel directions computed in floating point land on
    the same representative.
    """
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("zero vector has no direction")
    v = v / n
    for k in (2, 1, 0):
        if abs(v[k]) > DIRECTION_TOL:
            return v if v[k] > 0 else -v
    raise ValueError("degenerate direction")


def canonical_directions(v: np.ndarray) -> np.ndarray:
    """Vectorized :func:`canonical_direction` for an ``(n, 3)`` array."""
    v = np.asarray(v, dtype=float)
    v = v / np.linalg.norm(v, axis=1, keepdims=True)
    sign = np.zeros(len(v))
    for k in (0, 1, 2):
        big = np.abs(v[:, k]) > DIRECTION_TOL
        sign = np.where(big, np.sign(v[:, k]), sign)
    return v * np.where(sign == 0, 1.0, sign)[:, None]


@dataclass(frozen=True)
class Hyperplane:
    """Plane ``{x : <x, normal> = offset}`` with ``normal`` on the upper half-sphere."""

    offset: float
    normal: np.ndarray

    @classmethod
    def make(cls, offset: float, normal) -> "Hyperplane":
        raw = np.asarray(normal, dtype=float)
        norm = np.linalg.norm(raw)
        raw, offset = raw / norm, offset / norm
        u = canonical_direction(raw)
        # flipping the normal flips the sign of the offset
        sign = 1.0 if np.dot(u, raw) > 0 else -1.0
        return cls(float(sign * offset), u)

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.normal - self.offset


@dataclass
class DirectionalModel:
    """Directional distribution of plane normals.

    ``kind`` is ``"isotropic"`` (uniform on the half-sphere) or ``"discrete"``
    with atoms and weights.
    """

    kind: str
    atoms: np.ndarray | None = None
    weights: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.kind == "isotropic":
            self.atoms = None
            self.weights = None
            return
        if self.kind != "discrete":
            raise ModelError(f"unknown model kind {self.kind!r}")
        atoms = np.atleast_2d(np.asarray(self.atoms, dtype=float))
        weights = np.asarray(self.weights, dtype=float)
        if atoms.ndim != 2 or atoms.shape[1] != 3 or len(atoms) != len(weights):
            raise ModelError("atoms must be (k, 3) with one weight per atom")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ModelError("weights must be non-negative and sum to 1")
        atoms = canonical_directions(atoms)
        support = atoms[weights > 0]
        if np.linalg.matrix_rank(support, tol=1e-9) < 3:
            raise ModelError("directional support does not span R^3")
        self.atoms = atoms
        self.weights = weights

    @classmethod
    def isotropic(cls) -> "DirectionalModel":
        return cls("isotropic")

    @classmethod
    def axis(cls) -> "DirectionalModel":
        return cls("discrete", np.eye(3), np.full(3, 1 / 3))

    @classmethod
    def discrete(cls, atoms, weights=None) -> "DirectionalModel":
        atoms = np.asarray(atoms, dtype=float)
        if weights is None:
            weights = np.full(len(atoms), 1 / len(atoms))
        return cls("discrete", atoms, np.asarray(weights, dtype=float))

    @property
    def is_isotropic(self) -> bool:
        return self.kind == "isotropic"

    def to_dict(self) -> dict:
        if self.is_isotropic:
            return {"type": "isotropic"}
        return {"type": "discrete", "atoms": self.atoms.tolist(),
                "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "DirectionalModel":
        kind = d.get("type")
        extra = set(d) - {"type", "atoms", "weights"}
        if extra:
            raise ModelError(f"unknown model keys: {sorted(extra)}")
        if kind == "isotropic":
            return cls.isotropic()
        if kind == "axis":
            return cls.axis()
        if kind == "discrete":
            if "atoms" not in d:
                raise ModelError("discrete model needs 'atoms'")
            return cls.discrete(d["atoms"], d.get("weights"))
        raise ModelError(f"unknown model type {kind!r}")

    # evaluators

    def lambda_segment(self, u) -> float | np.ndarray:
        """Measure of planes hitting the unit segment with direction ``u``."""
        u = np.asarray(u, dtype=float)
        if self.is_isotropic:
            return 0.5 if u.ndim == 1 else np.full(len(u), 0.5)
        return np.abs(u @ self.atoms.T) @ self.weights

    def lambda_polytope(self, c) -> float:
        """Measure of planes hitting ``c``: the R-averaged width.

        Accepts a :class:`~stitsim.geometry.ConvexPolytope`, a section polygon,
        a :class:`~stitsim.geometry.Segment3` or a plain point array.
        """
        from .geometry import isotropic_mean_width, point_set_of

        pts = point_set_of(c)
        if len(pts) == 0:
            raise ValueError("empty polytope")
        if self.is_isotropic:
            return isotropic_mean_width(c)
        proj = pts @ self.atoms.T
        return float((proj.max(axis=0) - proj.min(axis=0)) @ self.weights)

    def zeta_constants(self) -> tuple[float, float]:
        """Mean parallelogram area and mean parallelepiped volume under R."""
        if self.is_isotropic:
            return ISOTROPIC_ZETA2, ISOTROPIC_ZETA3
        if "zeta" not in self._cache:
            a, w = self.atoms, self.weights
            cross = np.cross(a[:, None, :], a[None, :, :])
            area = np.linalg.norm(cross, axis=2)
            z2 = float(w @ area @ w)
            vol = np.abs(np.einsum("ijk,lk->ijl", cross, a))
            z3 = float(np.einsum("i,j,l,ijl->", w, w, w, vol))
            self._cache["zeta"] = (z2, z3)
        return self._cache["zeta"]

    # samplers

    def sample_direction(self, rng: np.random.Generator, size: int | None = None):
        n = 1 if size is None else size
        if self.is_isotropic:
            v = rng.standard_normal((n, 3))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            v[:, 2] = np.abs(v[:, 2])
        else:
            v = self.atoms[rng.choice(len(self.weights), size=n, p=self.weights)]
        return v[0] if size is None else v

    def _edge_direction_atoms(self, which: str):
        """Exact atoms of the edge-direction laws for a discrete model."""
        key = ("atoms", which)
        if key not in self._cache:
            table: dict[tuple, float] = {}
            dirs: dict[tuple, np.ndarray] = {}
            for i, j in itertools.combinations(range(len(self.weights)), 2):
                c = np.cross(self.atoms[i], self.atoms[j])
                area = np.linalg.norm(c)
                if area < 1e-14:
                    continue
                d = canonical_direction(c)
                k = tuple(np.round(d, 12))
                dirs[k] = d
                # ordered pairs (i, j) and (j, i) both contribute
                table[k] = table.get(k, 0.0) + 2 * self.weights[i] * self.weights[j] * area
            d = np.array([dirs[k] for k in table])
            p = np.array(list(table.values()))
            if which == "typ":
                p = p * self.lambda_segment(d)
            elif which != "tilde":
                raise ValueError(f"unknown law {which!r}")
            self._cache[key] = (d, p / p.sum())
        return self._cache[key]

    def edge_direction_law(self, which: str):
        """Atoms and probabilities of the length-weighted (``"tilde"``) or
        typical (``"typ"``) edge-direction law.  Discrete models only."""
        if self.is_isotropic:
            raise ValueError("isotropic edge-direction laws are continuous")
        return self._edge_direction_atoms(which)

    def sample_directional_laws(self, which: str, rng: np.random.Generator,
                                size: int | None = None):
        """Draw from the length-weighted (``"tilde"``) or typical (``"typ"``)
        edge-direction law.

        Discrete models use the exact atom table.  Isotropic models use
        rejection on pairs of normals, accepting with probability equal to the
        parallelogram area, then (for ``"typ"``) a second rejection with
        probability ``lambda_segment`` (bounded by 1).
        """
        n = 1 if size is None else size
        if not self.is_isotropic:
            d, p = self._edge_direction_atoms(which)
            out = d[rng.choice(len(p), size=n, p=p)]
            return out[0] if size is None else out
        if which not in ("tilde", "typ"):
            raise ValueError(f"unknown law {which!r}")
        out = np.empty((0, 3))
        while len(out) < n:
            m = max(64, int(1.4 * (n - len(out)) / 0.39))
            u = self.sample_direction(rng, m)
            v = self.sample_direction(rng, m)
            c = np.cross(u, v)
            area = np.linalg.norm(c, axis=1)
            keep = rng.random(m) < area
            if which == "typ":
                keep &= rng.random(m) < 0.5
            c = canonical_directions(c[keep & (area > 0)])
            out = np.vstack([out, c])
        out = out[:n]
        return out[0] if size is None else out

    def sample_hitting_hyperplane(self, c, rng: np.random.Generator) -> Hyperplane:
        """Plane drawn from the hitting measure restricted to ``c``, normalized.

        The normal is R reweighted by the width of ``c``; the offset is uniform
        on the projection interval.
        """
        V = c.vertices
        if self.is_isotropic:
            diam = c.diameter()
            while True:
                u = self.sample_direction(rng, 16)
                proj = V @ u.T
                width = proj.max(axis=0) - proj.min(axis=0)
                ok = np.flatnonzero(rng.random(16) * diam < width)
                if len(ok):
                    k = ok[0]
                    lo, hi = proj[:, k].min(), proj[:, k].max()
                    return Hyperplane(float(rng.uniform(lo, hi)), u[k])
        proj = V @ self.atoms.T
        lo, hi = proj.min(axis=0), proj.max(axis=0)
        p = self.weights * (hi - lo)
        k = rng.choice(len(p), p=p / p.sum())
        return Hyperplane(float(rng.uniform(lo[k], hi[k])), self.atoms[k])
