"""Binary and multi-component quantized weight vectors.

A :class:`BinaryWeightVector` is a bit-packed pattern over two real levels
``alpha < beta``; bit ``i`` set means ``w[i] == beta``.  A
:class:`MultiComponentWeight` is a signed, scaled sum of ``{0, 1}`` patterns,
which covers ternary (``b1 - b2``) and wider weights.

Weight file layout (all integers little-endian)::

    b"LBWQ" | u8 version | u32 d | u8 B |
    B x ( f64 alpha | f64 beta | i8 sign | f64 scale | ceil(d/8) payload bytes )

Payload bits are LSB-first within each byte.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Union

import numpy as np

MAGIC = b"LBWQ"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sBIB")
_COMPONENT = struct.Struct("<ddbd")


class InvalidDimensionError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class WeightFormatError(ValueError):
    """Base class for weight-file parse errors."""


class BadMagicError(WeightFormatError):
    pass


class TruncatedPayloadError(WeightFormatError):
    pass


class LevelOrderError(WeightFormatError):
    pass


@dataclass(frozen=True)
class QuantLevels:
    alpha: float
    beta: float

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and math.isfinite(self.beta)):
            raise ValueError(f"levels must be finite, got {self.alpha}, {self.beta}")
        if not self.alpha < self.beta:
            raise ValueError(f"need alpha < beta, got {self.alpha} >= {self.beta}")

    @property
    def step(self) -> float:
        return self.beta - self.alpha

    @classmethod
    def symmetric(cls, beta: float) -> "QuantLevels":
        return cls(-beta, beta)

    @classmethod
    def he(cls, fan_in: int) -> "QuantLevels":
        """Levels +-sqrt(2 / fan_in)."""
        return cls.symmetric(math.sqrt(2.0 / fan_in))


UNIT_LEVELS = QuantLevels(0.0, 1.0)


def _pack(mask: np.ndarray) -> np.ndarray:
    return np.packbits(np.asarray(mask, dtype=bool), bitorder="little")


@dataclass(frozen=True, eq=False)
class BinaryWeightVector:
    packed: np.ndarray
    levels: QuantLevels
    d: int

    def __post_init__(self):
        if self.d < 1:
            raise InvalidDimensionError(f"d must be >= 1, got {self.d}")
        if self.packed.dtype != np.uint8 or self.packed.shape != ((self.d + 7) // 8,):
            raise ShapeError("packed payload does not match d")
        self.packed.setflags(write=False)

    @classmethod
    def from_mask(cls, mask, levels: QuantLevels = UNIT_LEVELS) -> "BinaryWeightVector":
        mask = np.asarray(mask, dtype=bool).ravel()
        return cls(_pack(mask), levels, mask.size)

    @property
    def mask(self) -> np.ndarray:
        """Boolean array, True where the weight sits at ``beta``."""
        return np.unpackbits(self.packed, count=self.d, bitorder="little").astype(bool)

    @property
    def support(self) -> frozenset:
        return frozenset(np.flatnonzero(self.mask).tolist())

    def dense(self) -> np.ndarray:
        return np.where(self.mask, self.levels.beta, self.levels.alpha)

    def bit(self, i: int) -> bool:
        return bool((self.packed[i >> 3] >> (i & 7)) & 1)

    def __eq__(self, other):
        if not isinstance(other, BinaryWeightVector):
            return NotImplemented
        return (self.d == other.d and self.levels == other.levels
                and np.array_equal(self.packed, other.packed))

    def __hash__(self):
        return hash((self.d, self.levels, self.packed.tobytes()))

    def __repr__(self):
        return (f"BinaryWeightVector(d={self.d}, levels=({self.levels.alpha}, "
                f"{self.levels.beta}), popcount={int(self.mask.sum())})")


def new_binary(d: int, levels: QuantLevels, init: str = "all_alpha",
               seed: int | None = None) -> BinaryWeightVector:
    """Create a vector with every bit clear (``all_alpha``), set (``all_beta``)
    or drawn uniformly from a seeded generator (``random``)."""
    if d < 1:
        raise InvalidDimensionError(f"d must be >= 1, got {d}")
    if init == "all_alpha":
        mask = np.zeros(d, dtype=bool)
    elif init == "all_beta":
        mask = np.ones(d, dtype=bool)
    elif init == "random":
        if seed is None:
            raise ValueError("random init needs a seed")
        mask = np.random.default_rng(seed).random(d) < 0.5
    else:
        raise ValueError(f"unknown init {init!r}")
    return BinaryWeightVector(_pack(mask), levels, d)


def flip(w: BinaryWeightVector, i: int) -> tuple[BinaryWeightVector, float]:
    """Toggle coordinate ``i``; returns the new vector and the change in its value."""
    if not 0 <= i < w.d:
        raise IndexError(f"coordinate {i} out of range for d={w.d}")
    packed = w.packed.copy()
    packed[i >> 3] ^= np.uint8(1 << (i & 7))
    delta = -w.levels.step if w.bit(i) else w.levels.step
    return BinaryWeightVector(packed, w.levels, w.d), delta


@dataclass(frozen=True, eq=False)
class MultiComponentWeight:
    components: tuple
    signs: tuple
    scale: float = 1.0

    def __post_init__(self):
        comps = tuple(self.components)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "signs", tuple(int(s) for s in self.signs))
        if not comps:
            raise ValueError("need at least one component")
        if len(self.signs) != len(comps):
            raise ValueError("one sign per component")
        if any(s not in (1, -1) for s in self.signs):
            raise ValueError("signs must be +1 or -1")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError("scale must be positive and finite")
        if any(c.levels != UNIT_LEVELS for c in comps):
            raise ValueError("components must use {0, 1} levels")

    @property
    def d(self) -> int:
        return self.components[0].d

    @property
    def bits(self) -> int:
        return len(self.components)

    def dense(self) -> np.ndarray:
        return compose(self)

    def __eq__(self, other):
        if not isinstance(other, MultiComponentWeight):
            return NotImplemented
        return (self.signs == other.signs and self.scale == other.scale
                and self.components == other.components)

    def __hash__(self):
        return hash((self.signs, self.scale, self.components))


def multibit_signs(n_components: int) -> tuple:
    """+1 for the first ceil(B/2) components, -1 for the rest."""
    n_pos = -(-n_components // 2)
    return (1,) * n_pos + (-1,) * (n_components - n_pos)


def multibit_scale(n_components: int, beta: float) -> float:
    """Scale that makes the largest attainable weight equal ``beta``."""
    return beta / -(-n_components // 2)


def new_multibit(d: int, n_components: int, beta: float,
                 init: str = "all_alpha", seed: int | None = None) -> MultiComponentWeight:
    if n_components < 1:
        raise ValueError("need at least one component")
    comps = []
    for j in range(n_components):
        s = None if seed is None else seed * 1009 + j
        comps.append(new_binary(d, UNIT_LEVELS, init, s))
    return MultiComponentWeight(tuple(comps), multibit_signs(n_components),
                                multibit_scale(n_components, beta))


def ternary(w1: BinaryWeightVector, w2: BinaryWeightVector, scale: float = 1.0) -> MultiComponentWeight:
    return MultiComponentWeight((w1, w2), (1, -1), scale)


def compose(m: MultiComponentWeight) -> np.ndarray:
    d = m.components[0].d
    if any(c.d != d for c in m.components):
        raise ShapeError("components disagree on d")
    acc = np.zeros(d)
    for sign, comp in zip(m.signs, m.components):
        acc += sign * comp.mask
    return m.scale * acc


WeightLike = Union[BinaryWeightVector, MultiComponentWeight]


def serialize(w: WeightLike) -> bytes:
    if isinstance(w, BinaryWeightVector):
        parts = [(w, 1, 1.0)]
    else:
        parts = [(c, s, m_scale) for c, s, m_scale in
                 zip(w.components, w.signs, [w.scale] * len(w.components))]
    d = parts[0][0].d
    if any(c.d != d for c, _, _ in parts):
        raise ShapeError("components disagree on d")
    out = [_HEADER.pack(MAGIC, FORMAT_VERSION, d, len(parts))]
    for comp, sign, scale in parts:
        out.append(_COMPONENT.pack(comp.levels.alpha, comp.levels.beta, sign, scale))
        out.append(comp.packed.tobytes())
    return b"".join(out)


def deserialize(data: bytes) -> WeightLike:
    """Inverse of :func:`serialize`.

    A single component with sign +1 and scale 1 comes back as a
    :class:`BinaryWeightVector`; anything else as a :class:`MultiComponentWeight`.
    """
    if len(data) < _HEADER.size:
        raise TruncatedPayloadError("file shorter than header")
    magic, version, d, n_comp = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise WeightFormatError(f"unsupported version {version}")
    if d < 1 or n_comp < 1:
        raise WeightFormatError(f"invalid header d={d} B={n_comp}")
    nbytes = (d + 7) // 8
    off = _HEADER.size
    comps, signs, scales = [], [], []
    for _ in range(n_comp):
        if len(data) < off + _COMPONENT.size:
            raise TruncatedPayloadError("component header truncated")
        alpha, beta, sign, scale = _COMPONENT.unpack_from(data, off)
        off += _COMPONENT.size
        if not alpha < beta:
            raise LevelOrderError(f"alpha={alpha} >= beta={beta}")
        if sign not in (1, -1):
            raise WeightFormatError(f"bad sign {sign}")
        if len(data) < off + nbytes:
            raise TruncatedPayloadError(f"payload shorter than {nbytes} bytes")
        packed = np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=off).copy()
        off += nbytes
        comps.append(BinaryWeightVector(packed, QuantLevels(alpha, beta), d))
        signs.append(sign)
        scales.append(scale)
    if len(set(scales)) != 1:
        raise WeightFormatError("components disagree on scale")
    if n_comp == 1 and signs[0] == 1 and scales[0] == 1.0:
        return comps[0]
    return MultiComponentWeight(tuple(comps), tuple(signs), scales[0])


def save(path, w: WeightLike) -> None:
    with open(path, "wb") as f:
        f.write(serialize(w))


def load(path) -> WeightLike:
    with open(path, "rb") as f:
        return deserialize(f.read())
