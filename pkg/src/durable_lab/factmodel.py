"""
The toy memorization network.

concat(entity-embedding, attribute-embedding) → linear → GELU → linear →
GELU → linear → logits over value tokens. Every linear layer can carry a
low-rank adapter pair: ``y = x·Wᵀ + scale·(x·Aᵀ)·Bᵀ`` with A (r×in) and
B (out×r). B starts at zero so a fresh adapter is an identity delta.

Parameters live in an immutable ``ParamSet``; each entry records its kind
(embedding, base linear, adapter A, adapter B) and whether optimizers may
touch it.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Mapping, Tuple

import numpy as np

from .autodiff import Tape, Tensor
from .datagen import EmptySplitError, FactBatch
from .errors import CheckpointError, ConfigError
from .logger import get_logger

logger = get_logger(__name__)

ENTITY_EMBED = "embed.entity"
ATTRIBUTE_EMBED = "embed.attribute"
LAYERS: Tuple[str, ...] = ("layer1", "layer2", "head")


class ParamKind(str, Enum):
    EMBEDDING = "embedding"
    BASE = "base"
    ADAPTER_A = "adapter-A"
    ADAPTER_B = "adapter-B"


ADAPTER_KINDS = frozenset({ParamKind.ADAPTER_A, ParamKind.ADAPTER_B})
LINEAR_KINDS = frozenset({ParamKind.BASE, ParamKind.ADAPTER_A, ParamKind.ADAPTER_B})


class Regime(str, Enum):
    """Which entries an optimizer may update."""

    FULL = "full"  # embeddings + base linear (pretraining)
    ADAPTERS = "adapters"  # adapters only, base frozen
    ALL = "all"  # everything


def _readonly(values: np.ndarray) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, slots=True)
class ParamEntry:
    value: np.ndarray
    kind: ParamKind
    frozen: bool = False


class ParamSet(Mapping[str, np.ndarray]):
    """
    Named weight matrices with kind and frozen metadata.

    Value semantics: arrays are read-only and every update returns a new set.
    """

    __slots__ = ("_entries", "adapter_scale")

    def __init__(self, entries: Mapping[str, ParamEntry], adapter_scale: float) -> None:
        self._entries: Dict[str, ParamEntry] = {
            name: ParamEntry(_readonly(e.value), ParamKind(e.kind), bool(e.frozen))
            for name, e in entries.items()
        }
        self.adapter_scale = float(adapter_scale)
        self._check_adapters()

    def _check_adapters(self) -> None:
        for layer in LAYERS:
            a = self._entries.get(f"{layer}.lora_A")
            b = self._entries.get(f"{layer}.lora_B")
            if (a is None) != (b is None):
                raise ConfigError(layer, "adapter A and B must come in pairs")
            if a is not None and b is not None and a.value.shape[0] != b.value.shape[1]:
                raise ConfigError(layer, f"adapter ranks differ: {a.value.shape} vs {b.value.shape}")

    # Mapping protocol -------------------------------------------------- #
    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name].value

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        return f"ParamSet({len(self)} entries, adapters={self.has_adapters})"

    # metadata ---------------------------------------------------------- #
    def entry(self, name: str) -> ParamEntry:
        return self._entries[name]

    def kind(self, name: str) -> ParamKind:
        return self._entries[name].kind

    def is_frozen(self, name: str) -> bool:
        return self._entries[name].frozen

    def names_of(self, kinds: Iterable[ParamKind]) -> List[str]:
        wanted = set(kinds)
        return [n for n, e in self._entries.items() if e.kind in wanted]

    def trainable_names(self) -> List[str]:
        return [n for n, e in self._entries.items() if not e.frozen]

    @property
    def has_adapters(self) -> bool:
        return any(e.kind in ADAPTER_KINDS for e in self._entries.values())

    def arrays(self, names: Iterable[str] | None = None) -> Dict[str, np.ndarray]:
        keys = list(self._entries) if names is None else list(names)
        return {n: self._entries[n].value for n in keys}

    # updates ------------------------------------------------------------ #
    def replace(self, values: Mapping[str, np.ndarray]) -> "ParamSet":
        """New set with some values swapped; kinds and flags are kept."""
        entries = dict(self._entries)
        for name, v in values.items():
            old = entries[name]
            if np.shape(v) != old.value.shape:
                raise ConfigError(name, f"shape {np.shape(v)} != {old.value.shape}")
            entries[name] = replace(old, value=v)
        return ParamSet(entries, self.adapter_scale)

    def with_regime(self, regime: Regime) -> "ParamSet":
        """New set whose frozen flags follow ``regime``."""
        entries = {}
        for name, e in self._entries.items():
            if regime is Regime.ALL:
                frozen = False
            elif regime is Regime.ADAPTERS:
                frozen = e.kind not in ADAPTER_KINDS
            else:
                frozen = e.kind in ADAPTER_KINDS
            entries[name] = replace(e, frozen=frozen)
        return ParamSet(entries, self.adapter_scale)

    def without(self, names: Iterable[str]) -> "ParamSet":
        drop = set(names)
        return ParamSet(
            {n: e for n, e in self._entries.items() if n not in drop}, self.adapter_scale
        )

    def equals(self, other: "ParamSet") -> bool:
        """Bitwise equality of names, kinds, flags and values."""
        if list(self) != list(other) or self.adapter_scale != other.adapter_scale:
            return False
        for name in self:
            a, b = self.entry(name), other.entry(name)
            if a.kind != b.kind or a.frozen != b.frozen:
                return False
            if a.value.tobytes() != b.value.tobytes():
                return False
        return True


# ---------------------------------------------------------------------- #
# configuration and initialization
# ---------------------------------------------------------------------- #
@dataclass(frozen=True, slots=True)
class ModelConfig:
    """
    Dimensions of the fact model.

    ``entity_vocab`` covers the fact entities plus the unrelated-corpus
    entities used by the fine-tuning attack.
    """

    entity_vocab: int = 240
    attribute_vocab: int = 10
    value_vocab: int = 64
    embed_dim: int = 32
    hidden_dim: int = 128
    adapter_rank: int = 4
    adapter_scale: float = 2.0
    seed: int = 42
    use_adapters: bool = True

    def __post_init__(self) -> None:
        for name in ("entity_vocab", "attribute_vocab", "value_vocab", "embed_dim", "hidden_dim"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"model.{name}", "must be positive")
        if self.use_adapters and self.adapter_rank <= 0:
            raise ConfigError("model.adapter_rank", "must be positive when adapters are on")

    def layer_shapes(self) -> Dict[str, Tuple[int, int]]:
        """(out, in) per linear layer."""
        return {
            "layer1": (self.hidden_dim, 2 * self.embed_dim),
            "layer2": (self.hidden_dim, self.hidden_dim),
            "head": (self.value_vocab, self.hidden_dim),
        }


MODEL_PRESETS: Dict[str, ModelConfig] = {
    "default": ModelConfig(),
    "wide": ModelConfig(embed_dim=48, hidden_dim=96, adapter_rank=8, adapter_scale=2.0),
}


def _uniform(rng: np.random.Generator, shape: Tuple[int, int], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_model(cfg: ModelConfig) -> ParamSet:
    """
    Seeded initialization; embeddings use fan-in 1, linears U(±1/√fan_in).

    Entries come back in the pretraining regime (adapters frozen).
    """
    rng = np.random.default_rng(cfg.seed)
    entries: Dict[str, ParamEntry] = {
        ENTITY_EMBED: ParamEntry(
            _uniform(rng, (cfg.entity_vocab, cfg.embed_dim), 1), ParamKind.EMBEDDING
        ),
        ATTRIBUTE_EMBED: ParamEntry(
            _uniform(rng, (cfg.attribute_vocab, cfg.embed_dim), 1), ParamKind.EMBEDDING
        ),
    }
    for layer, (out_dim, in_dim) in cfg.layer_shapes().items():
        entries[f"{layer}.weight"] = ParamEntry(
            _uniform(rng, (out_dim, in_dim), in_dim), ParamKind.BASE
        )
        if cfg.use_adapters:
            entries[f"{layer}.lora_A"] = ParamEntry(
                _uniform(rng, (cfg.adapter_rank, in_dim), in_dim), ParamKind.ADAPTER_A
            )
            entries[f"{layer}.lora_B"] = ParamEntry(
                np.zeros((out_dim, cfg.adapter_rank)), ParamKind.ADAPTER_B
            )
    params = ParamSet(entries, cfg.adapter_scale)
    logger.debug("initialized model seed=%d entries=%d", cfg.seed, len(params))
    return params.with_regime(Regime.FULL)


# ---------------------------------------------------------------------- #
# forward
# ---------------------------------------------------------------------- #
@dataclass
class Graph:
    """Parameters bound to a tape, ready to build losses."""

    tape: Tape
    tensors: Dict[str, Tensor]
    adapter_scale: float
    params: ParamSet = field(repr=False)

    def with_tensors(self, tensors: Mapping[str, Tensor]) -> "Graph":
        merged = dict(self.tensors)
        merged.update(tensors)
        return Graph(self.tape, merged, self.adapter_scale, self.params)

    def _linear(self, layer: str, x: Tensor) -> Tensor:
        t = self.tape
        y = t.matmul(x, self.tensors[f"{layer}.weight"], transpose_b=True)
        a = self.tensors.get(f"{layer}.lora_A")
        if a is None:
            return y
        u = t.matmul(x, a, transpose_b=True)
        v = t.matmul(u, self.tensors[f"{layer}.lora_B"], transpose_b=True)
        return t.add(y, t.scale(v, self.adapter_scale))

    def logits(self, batch: FactBatch) -> Tensor:
        t = self.tape
        x = t.concat(
            t.embedding(self.tensors[ENTITY_EMBED], batch.entities),
            t.embedding(self.tensors[ATTRIBUTE_EMBED], batch.attributes),
        )
        h = t.gelu(self._linear("layer1", x))
        h = t.gelu(self._linear("layer2", h))
        return self._linear("head", h)

    def example_losses(self, batch: FactBatch) -> Tensor:
        if len(batch) == 0:
            raise EmptySplitError("loss over an empty batch")
        return self.tape.cross_entropy(self.logits(batch), batch.values)

    def loss(self, batch: FactBatch) -> Tensor:
        """Mean softmax cross-entropy over ``batch``."""
        return self.tape.mean(self.example_losses(batch))


def bind(params: ParamSet, tape: Tape | None = None) -> Graph:
    tape = tape or Tape()
    tensors = {name: tape.param(name, value) for name, value in params.items()}
    return Graph(tape, tensors, params.adapter_scale, params)


def loss_forget(graph: Graph, batch: FactBatch) -> Tensor:
    return graph.loss(batch)


def loss_retain(graph: Graph, batch: FactBatch) -> Tensor:
    return graph.loss(batch)


def forward_logits(params: ParamSet, batch: FactBatch) -> np.ndarray:
    return np.array(bind(params).logits(batch).value)


def example_losses(params: ParamSet, batch: FactBatch) -> np.ndarray:
    return np.array(bind(params).example_losses(batch).value)


def merge_adapters(params: ParamSet) -> ParamSet:
    """Fold every adapter pair into its base weight: W + scale·B·A."""
    merged: Dict[str, np.ndarray] = {}
    dropped: List[str] = []
    for layer in LAYERS:
        a_name, b_name = f"{layer}.lora_A", f"{layer}.lora_B"
        if a_name not in params:
            continue
        w = params[f"{layer}.weight"]
        merged[f"{layer}.weight"] = w + params.adapter_scale * (params[b_name] @ params[a_name])
        dropped += [a_name, b_name]
    return params.replace(merged).without(dropped)


# ---------------------------------------------------------------------- #
# serialization
# ---------------------------------------------------------------------- #
_MAGIC = b"DLPS"
_VERSION = 1
_KIND_CODES = {kind: i for i, kind in enumerate(ParamKind)}
_CODE_KINDS = {i: kind for kind, i in _KIND_CODES.items()}


def manifest_path(path: Path | str) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest")


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp-{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def save_params(params: ParamSet, path: Path | str) -> Path:
    """
    Write the binary container and its plain-text manifest.

    Container: magic, version, adapter scale, entry count, then per entry
    name, kind, frozen flag, shape and little-endian float64 data.
    """
    path = Path(path)
    out = bytearray(struct.pack("<4sIdI", _MAGIC, _VERSION, params.adapter_scale, len(params)))
    lines = [f"version\t{_VERSION}", f"adapter_scale\t{params.adapter_scale!r}"]
    for name in params:
        e = params.entry(name)
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<BBB", _KIND_CODES[e.kind], int(e.frozen), e.value.ndim)
        out += struct.pack(f"<{e.value.ndim}I", *e.value.shape)
        out += e.value.astype("<f8").tobytes()
        shape = "x".join(str(d) for d in e.value.shape)
        lines.append(f"{name}\t{shape}\t{str(e.frozen).lower()}\t{e.kind.value}")
    _atomic_write(path, bytes(out))
    _atomic_write(manifest_path(path), ("\n".join(lines) + "\n").encode("utf-8"))
    return path


def load_params(path: Path | str) -> ParamSet:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    try:
        magic, version, scale, count = struct.unpack_from("<4sIdI", data, 0)
        if magic != _MAGIC:
            raise CheckpointError(f"{path}: not a parameter container")
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported container version {version}")
        pos = struct.calcsize("<4sIdI")
        entries: Dict[str, ParamEntry] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + n].decode("utf-8")
            pos += n
            code, frozen, ndim = struct.unpack_from("<BBB", data, pos)
            pos += 3
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) * 8
            if pos + size > len(data):
                raise CheckpointError(f"{path}: truncated entry {name!r}")
            value = np.frombuffer(data, dtype="<f8", count=size // 8, offset=pos)
            pos += size
            entries[name] = ParamEntry(
                value.reshape(shape).astype(np.float64), _CODE_KINDS[code], bool(frozen)
            )
    except struct.error as exc:
        raise CheckpointError(f"{path}: corrupt container ({exc})") from None
    return ParamSet(entries, scale)
