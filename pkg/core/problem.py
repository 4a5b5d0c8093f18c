"""
Problem bundle: one time-quasiperiodic natural Lagrangian system
L = |v|_g^2 / 2 + W(phi, x) with its auxiliary function V and level v.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from config import cfg
from core.geometry import ChartManifold, ScalarField
from core.torusfield import FourierField, FrequencyVector


@dataclass(frozen=True, eq=False)
class DomainSpec:
    """Omega = component of {x in box : V(x) < level}"""

    V: ScalarField
    level: float
    resolution: int = field(default_factory=lambda: cfg.cond_resolution)
    eps_bnd: float = field(default_factory=lambda: cfg.eps_bnd)

    def __post_init__(self):
        if not np.isfinite(self.level):
            raise ValueError(f"level must be finite, got {self.level}")
        if self.resolution < 3:
            raise ValueError("sampling resolution must be at least 3 points per axis")
        if self.V.depends_on_phi:
            raise ValueError("V must not depend on phi")


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    k: int
    m: int
    omega: FrequencyVector
    manifold: ChartManifold
    W: ScalarField
    domain: DomainSpec
    labels: Dict[str, str] = field(default_factory=dict)
    reference: Optional[FourierField] = None
    overrides: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.omega.k != self.k:
            raise ValueError(f"omega has {self.omega.k} entries, k={self.k}")
        if self.manifold.m != self.m or self.W.m != self.m or self.domain.V.m != self.m:
            raise ValueError(f"chart, W and V must all have m={self.m}")
        if self.W.k not in (0, self.k):
            raise ValueError(f"W is declared on T^{self.W.k}, problem on T^{self.k}")
        if self.reference is not None and (self.reference.m, self.reference.k) != (self.m, self.k):
            raise ValueError("reference field dimensions do not match the problem")

    @property
    def box(self) -> np.ndarray:
        return self.manifold.box

    @property
    def name(self) -> str:
        return self.labels.get("name", "problem")

    def lagrangian(self, phi, x, v) -> np.ndarray:
        """L(phi, x, v) = (g(x) v, v) / 2 + W(phi, x), batched"""
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        g = self.manifold.metric_at(x)
        kinetic = 0.5 * np.einsum("...i,...ij,...j->...", v, g, v)
        return kinetic + self.W.value(x, phi)
