"""
Real truncated Fourier fields on the k-torus.

A field u: T^k -> R^m is stored on the canonical half-space of the cubic band
||n||_inf <= N (n = 0 plus every n whose first nonzero entry is positive); the
remaining coefficients follow from c(-n) = conj(c(n)).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Mapping, NamedTuple, Sequence, Tuple

import numpy as np

from config import cfg
from core.errors import BandwidthError, MalformedFieldError
from utils.logger import logger

MultiIndex = Tuple[int, ...]


@lru_cache(maxsize=None)
def band_indices(N: int, k: int) -> np.ndarray:
    """All n with ||n||_inf <= N, lexicographic order"""
    return np.array(list(itertools.product(range(-N, N + 1), repeat=k)), dtype=int).reshape(-1, k)


@lru_cache(maxsize=None)
def half_space_indices(N: int, k: int) -> np.ndarray:
    """n = 0 first, then the band indices whose first nonzero entry is positive"""
    rows = [np.zeros(k, dtype=int)]
    for n in band_indices(N, k):
        nz = np.flatnonzero(n)
        if nz.size and n[nz[0]] > 0:
            rows.append(n)
    return np.array(rows, dtype=int)


@dataclass(frozen=True)
class FrequencyVector:
    """Basis frequencies omega in rad/time"""

    entries: Tuple[float, ...]

    def __post_init__(self):
        values = tuple(float(w) for w in self.entries)
        object.__setattr__(self, "entries", values)
        if len(values) < 1:
            raise ValueError("frequency vector needs k >= 1 entries")
        if not all(np.isfinite(values)) or any(w == 0.0 for w in values):
            raise ValueError(f"frequencies must be finite and nonzero: {values}")

    @property
    def k(self) -> int:
        return len(self.entries)

    def as_array(self) -> np.ndarray:
        return np.array(self.entries)

    def small_divisors(self, n_check: int = None, delta: float = None) -> List[MultiIndex]:
        """Nonzero n with ||n||_inf <= n_check and |(n, omega)| <= delta"""
        n_check = cfg.n_check if n_check is None else n_check
        delta = cfg.delta_indep if delta is None else delta
        idx = half_space_indices(n_check, self.k)[1:]
        dots = np.abs(idx @ self.as_array())
        return [tuple(int(v) for v in n) for n in idx[dots <= delta]]

    def check_independence(self, n_check: int = None, delta: float = None) -> List[MultiIndex]:
        """Report near rational dependencies as warnings (never fatal)"""
        bad = self.small_divisors(n_check, delta)
        if bad:
            logger.warning(
                "Frequency vector is nearly rationally dependent",
                module="torusfield",
                omega=list(self.entries),
                resonances=[list(n) for n in bad[:10]],
                count=len(bad),
            )
        return bad


@dataclass(frozen=True, eq=False)
class FourierField:
    """
    Truncated Fourier field u: T^k -> R^m.

    coeffs[j] is the complex m-vector of half_space_indices(N, k)[j]; coeffs[0]
    (the mean) is real.
    """

    m: int
    N: int
    k: int
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=complex)
        expected = (len(half_space_indices(self.N, self.k)), self.m)
        if c.shape != expected:
            raise MalformedFieldError(f"coefficient array has shape {c.shape}, expected {expected}")
        if not np.all(np.isfinite(c)):
            raise MalformedFieldError("coefficients must be finite")
        if np.max(np.abs(c[0].imag), initial=0.0) > 1e-9:
            raise MalformedFieldError("mean coefficient must be real")
        c[0] = c[0].real
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @property
    def indices(self) -> np.ndarray:
        return half_space_indices(self.N, self.k)

    @classmethod
    def zeros(cls, m: int, N: int, k: int) -> "FourierField":
        return cls(m, N, k, np.zeros((len(half_space_indices(N, k)), m), dtype=complex))

    @classmethod
    def constant(cls, value: Sequence[float], N: int, k: int) -> "FourierField":
        value = np.asarray(value, dtype=float)
        c = np.zeros((len(half_space_indices(N, k)), value.size), dtype=complex)
        c[0] = value
        return cls(value.size, N, k, c)

    @classmethod
    def from_modes(cls, modes: Mapping[MultiIndex, Sequence[complex]], m: int, N: int, k: int) -> "FourierField":
        """
        Build a field from a coefficient map that may list n, -n or both.

        Raises MalformedFieldError when both are given and c(-n) differs from
        conj(c(n)) by more than 1e-9, or when an index is outside the band.
        """
        lookup = {tuple(int(v) for v in n): j for j, n in enumerate(half_space_indices(N, k))}
        c = np.zeros((len(lookup), m), dtype=complex)
        seen: Dict[MultiIndex, np.ndarray] = {}
        for n, value in modes.items():
            n = tuple(int(v) for v in n)
            value = np.asarray(value, dtype=complex).reshape(m)
            if len(n) != k or max((abs(v) for v in n), default=0) > N:
                raise MalformedFieldError(f"mode {n} outside the band ||n|| <= {N} on T^{k}")
            neg = tuple(-v for v in n)
            if n in lookup:
                key, val = n, value
            else:
                key, val = neg, np.conj(value)
            if key in seen and np.max(np.abs(seen[key] - val)) > 1e-9:
                raise MalformedFieldError(f"coefficients of {n} and {neg} are not conjugate")
            seen[key] = val
            c[lookup[key]] = val
        if np.max(np.abs(c[0].imag)) > 1e-9:
            raise MalformedFieldError("mean coefficient must be real")
        return cls(m, N, k, c)

    def coefficient(self, n: Sequence[int]) -> np.ndarray:
        n = tuple(int(v) for v in n)
        for j, row in enumerate(self.indices):
            if tuple(row) == n:
                return self.coeffs[j].copy()
            if tuple(-row) == n:
                return np.conj(self.coeffs[j])
        return np.zeros(self.m, dtype=complex)

    def full_coefficients(self) -> Tuple[np.ndarray, np.ndarray]:
        """(all band indices, coefficients) with the conjugate half filled in"""
        idx = self.indices
        neg = -idx[1:]
        return np.vstack([idx, neg]), np.vstack([self.coeffs, np.conj(self.coeffs[1:])])

    def with_coeffs(self, coeffs: np.ndarray) -> "FourierField":
        return FourierField(self.m, self.N, self.k, coeffs)

    def __add__(self, other: "FourierField") -> "FourierField":
        _check_compatible(self, other)
        return self.with_coeffs(self.coeffs + other.coeffs)

    def __sub__(self, other: "FourierField") -> "FourierField":
        _check_compatible(self, other)
        return self.with_coeffs(self.coeffs - other.coeffs)

    def __mul__(self, scalar: float) -> "FourierField":
        return self.with_coeffs(self.coeffs * float(scalar))

    __rmul__ = __mul__

    def to_dict(self) -> Dict:
        modes = []
        for n, c in zip(self.indices, self.coeffs):
            if np.any(c != 0):
                modes.append({"n": [int(v) for v in n], "re": c.real.tolist(), "im": c.imag.tolist()})
        return {"m": self.m, "N": self.N, "k": self.k, "modes": modes}

    @classmethod
    def from_dict(cls, data: Mapping) -> "FourierField":
        m, N, k = int(data["m"]), int(data["N"]), int(data["k"])
        modes = {
            tuple(entry["n"]): np.asarray(entry["re"], dtype=float) + 1j * np.asarray(entry.get("im", [0.0] * m), dtype=float)
            for entry in data.get("modes", [])
        }
        return cls.from_modes(modes, m, N, k)


def _check_compatible(f: FourierField, g: FourierField):
    if (f.m, f.N, f.k) != (g.m, g.N, g.k):
        raise ValueError(f"incompatible fields: (m,N,k)={(f.m, f.N, f.k)} vs {(g.m, g.N, g.k)}")


def resize(field: FourierField, N: int) -> FourierField:
    """Zero-pad or truncate to a new band"""
    out = FourierField.zeros(field.m, N, field.k)
    coeffs = out.coeffs.copy()
    lookup = {tuple(n): j for j, n in enumerate(out.indices)}
    for n, c in zip(field.indices, field.coeffs):
        j = lookup.get(tuple(n))
        if j is not None:
            coeffs[j] = c
    return out.with_coeffs(coeffs)


@dataclass(frozen=True)
class TorusGrid:
    """Uniform tensor grid with P points per axis on [0, 2pi)^k"""

    k: int
    P: int

    def __post_init__(self):
        if self.k < 1 or self.P < 1:
            raise ValueError("grid needs k >= 1 and P >= 1")

    @property
    def shape(self) -> Tuple[int, ...]:
        return (self.P,) * self.k

    @property
    def size(self) -> int:
        return self.P**self.k

    @property
    def weight(self) -> float:
        return (2.0 * np.pi) ** self.k / self.size

    def axis(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.P) / self.P

    def points(self) -> np.ndarray:
        """Angles with shape (P, ..., P, k), axis order matching the sample arrays"""
        mesh = np.meshgrid(*([self.axis()] * self.k), indexing="ij")
        return np.stack(mesh, axis=-1)

    def resolves(self, N: int) -> bool:
        """Alias-free analysis of band N"""
        return self.P >= 2 * N + 2

    def mean(self, samples: np.ndarray) -> np.ndarray:
        """(2pi)^-k times the trapezoid quadrature over the leading k axes"""
        return samples.reshape((self.size,) + samples.shape[self.k:]).mean(axis=0)

    def padded(self, factor: int) -> "TorusGrid":
        return TorusGrid(self.k, self.P * factor)


def _require_band(N: int, grid: TorusGrid):
    if not grid.resolves(N):
        raise BandwidthError(
            f"grid with P={grid.P} points per axis cannot resolve truncation N={N}; need P >= {2 * N + 2}"
        )


def synthesize(field: FourierField, grid: TorusGrid) -> np.ndarray:
    """Samples u(phi_j) with shape grid.shape + (m,)"""
    if grid.k != field.k:
        raise ValueError(f"grid is on T^{grid.k}, field on T^{field.k}")
    if grid.P < 2 * field.N + 1:
        raise BandwidthError(f"grid with P={grid.P} cannot hold band N={field.N}; need P >= {2 * field.N + 1}")
    idx, coeffs = field.full_coefficients()
    dense = np.zeros(grid.shape + (field.m,), dtype=complex)
    dense[tuple((idx % grid.P).T)] = coeffs
    axes = tuple(range(grid.k))
    values = np.fft.ifftn(dense, axes=axes) * grid.size
    return values.real


def analyze(samples: np.ndarray, grid: TorusGrid, N: int) -> FourierField:
    """Band-N Fourier coefficients of grid samples (shape grid.shape + (m,))"""
    _require_band(N, grid)
    samples = np.asarray(samples, dtype=float)
    if samples.shape[: grid.k] != grid.shape:
        raise ValueError(f"samples of shape {samples.shape} do not match grid {grid.shape}")
    axes = tuple(range(grid.k))
    spectrum = np.fft.fftn(samples, axes=axes) / grid.size
    idx = half_space_indices(N, grid.k)
    coeffs = spectrum[tuple((idx % grid.P).T)]
    coeffs[0] = coeffs[0].real
    return FourierField(samples.shape[grid.k], N, grid.k, coeffs)


def evaluate(field: FourierField, phi) -> np.ndarray:
    """u(phi) for one point (k,) or a batch (..., k)"""
    phi = np.asarray(phi, dtype=float)
    phase = np.exp(1j * (phi @ field.indices[1:].T))
    value = field.coeffs[0].real + 2.0 * np.real(phase @ field.coeffs[1:])
    return value


def directional_derivative(field: FourierField, omega: FrequencyVector) -> FourierField:
    if omega.k != field.k:
        raise ValueError(f"omega has k={omega.k}, field k={field.k}")
    mult = 1j * (field.indices @ omega.as_array())
    return field.with_coeffs(field.coeffs * mult[:, None])


def inner0(f: FourierField, g: FourierField, grid: TorusGrid) -> float:
    """(2pi)^-k * integral of (f, g) by quadrature on grid"""
    if f.m != g.m:
        raise ValueError(f"fields have m={f.m} and m={g.m}")
    if grid.P < f.N + g.N + 1:
        logger.warning(
            "Torus grid too coarse for the product bandwidth; inner product is aliased",
            module="torusfield",
            P=grid.P,
            N_f=f.N,
            N_g=g.N,
        )
    fs = synthesize(f, grid)
    gs = synthesize(g, grid)
    return float(grid.mean(np.sum(fs * gs, axis=-1)))


def inner1(f: FourierField, g: FourierField, omega: FrequencyVector, grid: TorusGrid) -> float:
    return inner0(f, g, grid) + inner0(directional_derivative(f, omega), directional_derivative(g, omega), grid)


def parseval0(f: FourierField, g: FourierField) -> float:
    """Coefficient-space value of inner0"""
    _check_compatible(f, g)
    return float(np.real(np.sum(f.coeffs[0] * g.coeffs[0])) + 2.0 * np.real(np.sum(f.coeffs[1:] * np.conj(g.coeffs[1:]))))


def pack(field: FourierField) -> np.ndarray:
    """Real coordinates whose Euclidean inner product equals inner0"""
    rest = np.sqrt(2.0) * field.coeffs[1:]
    return np.concatenate([field.coeffs[0].real, rest.real.ravel(), rest.imag.ravel()])


def unpack(vector: np.ndarray, m: int, N: int, k: int) -> FourierField:
    vector = np.asarray(vector, dtype=float)
    count = len(half_space_indices(N, k)) - 1
    if vector.size != m * (1 + 2 * count):
        raise ValueError(f"vector of size {vector.size} does not match m={m}, N={N}, k={k}")
    coeffs = np.zeros((count + 1, m), dtype=complex)
    coeffs[0] = vector[:m]
    re = vector[m : m + m * count].reshape(count, m)
    im = vector[m + m * count :].reshape(count, m)
    coeffs[1:] = (re + 1j * im) / np.sqrt(2.0)
    return FourierField(m, N, k, coeffs)


def shell_energy_ratio(field: FourierField) -> float:
    """Energy of the outermost shell ||n||_inf = N over the total energy"""
    weights = np.full(len(field.indices), 2.0)
    weights[0] = 1.0
    energy = weights * np.sum(np.abs(field.coeffs) ** 2, axis=1)
    total = energy.sum()
    if total == 0.0:
        return 0.0
    shell = np.max(np.abs(field.indices), axis=1) == field.N
    return float(energy[shell].sum() / total)


class LineSamples(NamedTuple):
    t: np.ndarray
    value: np.ndarray
    first: np.ndarray
    second: np.ndarray


def line_sample(field: FourierField, phi0, omega: FrequencyVector, t_grid) -> LineSamples:
    """u(phi0 + t*omega) and its first two t-derivatives, evaluated exactly"""
    t = np.atleast_1d(np.asarray(t_grid, dtype=float))
    idx = field.indices[1:]
    freq = idx @ omega.as_array()
    phase = np.exp(1j * (np.outer(t, freq) + idx @ np.asarray(phi0, dtype=float)))
    c = field.coeffs[1:]
    value = field.coeffs[0].real + 2.0 * np.real(phase @ c)
    first = 2.0 * np.real(phase @ (1j * freq[:, None] * c))
    second = 2.0 * np.real(phase @ (-(freq**2)[:, None] * c))
    return LineSamples(t, value, first, second)


class FieldLine:
    """The trajectory t -> u(phi0 + t*omega) of a torus field"""

    def __init__(self, field: FourierField, phi0, omega: FrequencyVector):
        self.field = field
        self.phi0 = np.asarray(phi0, dtype=float)
        self.omega = omega

    def position(self, t):
        s = line_sample(self.field, self.phi0, self.omega, t)
        return s.value if np.ndim(t) else s.value[0]

    def velocity(self, t):
        s = line_sample(self.field, self.phi0, self.omega, t)
        return s.first if np.ndim(t) else s.first[0]

    def acceleration(self, t):
        s = line_sample(self.field, self.phi0, self.omega, t)
        return s.second if np.ndim(t) else s.second[0]

    def angles(self, t):
        """phi0 + t*omega"""
        t = np.asarray(t, dtype=float)
        return self.phi0 + t[..., None] * self.omega.as_array()
