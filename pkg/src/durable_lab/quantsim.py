"""
Simulated symmetric weight quantization.

A value ``w`` with scale ``s = max|w| / d`` (``d = 2**(bits-1) - 1``) maps to
the integer code ``q = clamp(round(w / s), -d, d)``; the simulated weight is
stored back at full precision. Rounding is half away from zero.

Dequantization is computed as ``(q / d) * max|w|``. This is ``q * s`` up to
one rounding, but lands exactly on the row maximum when ``|q| = d``, so the
grid is closed: quantizing an already-quantized matrix changes nothing.

Scopes choose which linear matrices are touched; embedding tables are
never quantized.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Mapping, Tuple

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, QuantScopeError, ShapeMismatchError
from .factmodel import ADAPTER_KINDS, Graph, ParamKind, ParamSet


class Granularity(str, Enum):
    PER_ROW = "per-row"
    GLOBAL = "global"


class Rounding(str, Enum):
    HALF_AWAY = "half-away-from-zero"


class QuantScope(str, Enum):
    ADAPTERS_ONLY = "adapters-only"
    ALL_TRAINABLE = "all-trainable"
    MERGED_MODEL = "merged-model"
    NONE = "none"


class GlobalExtent(str, Enum):
    """What "one global scale" spans in global granularity."""

    SCOPE = "scope"  # every in-scope value shares a scale
    TENSOR = "tensor"  # one scale per matrix


_DEFAULT_GRANULARITY = {4: Granularity.PER_ROW, 8: Granularity.GLOBAL}


@dataclass(frozen=True, slots=True)
class QuantSpec:
    """
    Quantization settings.

    ``granularity`` defaults from ``bits``: per-row for INT4, global for INT8.
    """

    bits: int = 4
    granularity: Granularity | None = None
    rounding: Rounding = Rounding.HALF_AWAY
    scope: QuantScope = QuantScope.ADAPTERS_ONLY
    global_extent: GlobalExtent = GlobalExtent.SCOPE

    def __post_init__(self) -> None:
        if self.bits not in _DEFAULT_GRANULARITY:
            raise ConfigError("quant.bits", f"must be 4 or 8, got {self.bits!r}")
        try:
            object.__setattr__(
                self,
                "granularity",
                _DEFAULT_GRANULARITY[self.bits]
                if self.granularity is None
                else Granularity(self.granularity),
            )
            object.__setattr__(self, "rounding", Rounding(self.rounding))
            object.__setattr__(self, "scope", QuantScope(self.scope))
            object.__setattr__(self, "global_extent", GlobalExtent(self.global_extent))
        except ValueError as exc:
            raise ConfigError("quant", str(exc)) from None

    @property
    def divisor(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @property
    def label(self) -> str:
        return f"int{self.bits}"

    @classmethod
    def int4(cls, scope: QuantScope | str = QuantScope.ADAPTERS_ONLY) -> "QuantSpec":
        return cls(bits=4, scope=QuantScope(scope))

    @classmethod
    def int8(cls, scope: QuantScope | str = QuantScope.ADAPTERS_ONLY) -> "QuantSpec":
        return cls(bits=8, scope=QuantScope(scope))

    def with_scope(self, scope: QuantScope | str) -> "QuantSpec":
        return QuantSpec(self.bits, self.granularity, self.rounding, QuantScope(scope), self.global_extent)

    def to_dict(self) -> Dict[str, object]:
        return {
            "bits": self.bits,
            "granularity": self.granularity.value,
            "rounding": self.rounding.value,
            "scope": self.scope.value,
            "global_extent": self.global_extent.value,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, object]) -> "QuantSpec":
        unknown = set(raw) - {"bits", "granularity", "rounding", "scope", "global_extent"}
        if unknown:
            raise ConfigError("quant", f"unknown keys {sorted(unknown)}")
        return cls(
            bits=int(raw.get("bits", 4)),
            granularity=raw.get("granularity"),
            rounding=raw.get("rounding", Rounding.HALF_AWAY.value),
            scope=raw.get("scope", QuantScope.ADAPTERS_ONLY.value),
            global_extent=raw.get("global_extent", GlobalExtent.SCOPE.value),
        )


@dataclass(frozen=True, slots=True)
class NoiseStats:
    delta_inf: float
    delta_2: float
    relative_2: float

    def to_dict(self) -> Dict[str, float]:
        return {"delta_inf": self.delta_inf, "delta_2": self.delta_2, "relative_2": self.relative_2}


# ---------------------------------------------------------------------- #
# array kernels
# ---------------------------------------------------------------------- #
def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero."""
    mag = np.abs(x)
    whole = np.floor(mag)
    # |x| - floor(|x|) is exact in float64
    up = (mag - whole) >= 0.5
    return np.sign(x) * (whole + up)


def quantize_codes(w: np.ndarray, maxima: np.ndarray, divisor: int) -> np.ndarray:
    """
    Integer codes for ``w`` given broadcastable absolute maxima.

    Entries whose maximum is zero get code 0.
    """
    safe = np.where(maxima > 0, maxima, 1.0)
    scale = safe / divisor
    codes = np.clip(round_half_away(w / scale), -divisor, divisor)
    return np.where(maxima > 0, codes, 0.0)


def dequantize(codes: np.ndarray, maxima: np.ndarray, divisor: int) -> np.ndarray:
    return (codes / divisor) * maxima


def row_maxima(w: np.ndarray) -> np.ndarray:
    return np.max(np.abs(w), axis=-1, keepdims=True) if w.size else np.zeros(w.shape[:-1] + (1,))


def quantize_array(w: np.ndarray, bits: int, granularity: Granularity | str) -> np.ndarray:
    """Quantize one matrix on its own (global mode uses the matrix maximum)."""
    divisor = 2 ** (bits - 1) - 1
    w = np.asarray(w, dtype=np.float64)
    if Granularity(granularity) is Granularity.PER_ROW:
        maxima = row_maxima(w)
    else:
        maxima = np.array(np.max(np.abs(w)) if w.size else 0.0)
    return dequantize(quantize_codes(w, maxima, divisor), maxima, divisor)


def row_scales(w: np.ndarray, bits: int) -> np.ndarray:
    """Per-row step sizes ``s_r`` of a matrix."""
    return row_maxima(np.asarray(w, dtype=np.float64))[..., 0] / (2 ** (bits - 1) - 1)


# ---------------------------------------------------------------------- #
# parameter sets
# ---------------------------------------------------------------------- #
def scope_names(params: ParamSet, scope: QuantScope | str) -> List[str]:
    """
    Names selected by ``scope``.

    ``merged-model`` only applies to an adapter-free set; ``none`` selects
    nothing and makes quantization the identity.
    """
    scope = QuantScope(scope)
    if scope is QuantScope.NONE:
        return []
    if scope is QuantScope.ADAPTERS_ONLY:
        names = params.names_of(ADAPTER_KINDS)
    elif scope is QuantScope.ALL_TRAINABLE:
        names = params.names_of([ParamKind.BASE, *ADAPTER_KINDS])
    else:
        if params.has_adapters:
            raise QuantScopeError("merged-model scope needs a merged (adapter-free) parameter set")
        names = params.names_of([ParamKind.BASE])
    if not names:
        raise QuantScopeError(f"scope {scope.value!r} selects no weight matrix")
    return names


def quantize_values(
    values: Mapping[str, np.ndarray], names: List[str], spec: QuantSpec
) -> Dict[str, np.ndarray]:
    """Quantize ``values[name]`` for every name in ``names``."""
    d = spec.divisor
    if spec.granularity is Granularity.PER_ROW:
        return {n: quantize_array(values[n], spec.bits, Granularity.PER_ROW) for n in names}
    if spec.global_extent is GlobalExtent.TENSOR:
        return {n: quantize_array(values[n], spec.bits, Granularity.GLOBAL) for n in names}

    peak = max((float(np.max(np.abs(values[n]))) for n in names if values[n].size), default=0.0)
    maxima = np.array(peak)
    return {
        n: dequantize(quantize_codes(np.asarray(values[n]), maxima, d), maxima, d) for n in names
    }


def quantize(params: ParamSet, spec: QuantSpec) -> ParamSet:
    """Return a new set with every in-scope matrix replaced by its quantized image."""
    names = scope_names(params, spec.scope)
    if not names:
        return params
    return params.replace(quantize_values(params, names, spec))


def ste_quantize(graph: Graph, spec: QuantSpec) -> Graph:
    """
    Graph whose in-scope tensors forward their quantized values.

    The backward pass treats quantization as identity, so gradients of a loss
    built on the returned graph land on the original parameters.
    """
    names = scope_names(graph.params, spec.scope)
    if not names:
        return graph
    current = {n: graph.tensors[n].value for n in names}
    q = quantize_values(current, names, spec)
    swapped: Dict[str, Tensor] = {
        n: graph.tape.straight_through(graph.tensors[n], q[n]) for n in names
    }
    return graph.with_tensors(swapped)


def noise_stats(
    original: ParamSet, quantized: ParamSet, scope: QuantScope | str | None = None
) -> NoiseStats:
    """
    Size of the perturbation ``quantized - original``.

    Norms run over ``scope`` when given, otherwise over every entry.
    """
    if set(original) != set(quantized):
        raise ValueError("parameter sets have different names")
    names = list(original) if scope is None else scope_names(original, scope)
    diffs: List[np.ndarray] = []
    base: List[np.ndarray] = []
    for n in names:
        a, b = original[n], quantized[n]
        if a.shape != b.shape:
            raise ShapeMismatchError(f"noise_stats[{n}]", a.shape, b.shape)
        diffs.append((b - a).reshape(-1))
        base.append(a.reshape(-1))
    if not diffs:
        return NoiseStats(0.0, 0.0, 0.0)
    diff = np.concatenate(diffs)
    ref = np.concatenate(base)
    delta_inf = float(np.max(np.abs(diff))) if diff.size else 0.0
    delta_2 = float(np.linalg.norm(diff))
    norm = float(np.linalg.norm(ref))
    return NoiseStats(delta_inf, delta_2, delta_2 / norm if norm > 0 else 0.0)


def noise_report(params: ParamSet, specs: Tuple[QuantSpec, ...]) -> Dict[str, Dict[str, float]]:
    """Noise of each spec's image of ``params``, plus the delta_inf ratio of the first two."""
    out: Dict[str, Dict[str, float]] = {}
    stats: List[NoiseStats] = []
    for spec in specs:
        s = noise_stats(params, quantize(params, spec), spec.scope)
        stats.append(s)
        out[spec.label] = s.to_dict()
    if len(stats) >= 2 and stats[1].delta_inf > 0:
        out["ratio"] = {"delta_inf": stats[0].delta_inf / stats[1].delta_inf}
    return out
