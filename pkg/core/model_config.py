"""
Model Configuration and Weight Storage
Architecture hyperparameters, parameter tensors and the RPWT weight container
"""

import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, asdict, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

CONTAINER_MAGIC = b"RPWT"
CONTAINER_VERSION = 1
ALIGNMENT = 64

# magic (4s) + version (u32) + header length (u64), little-endian
_PREAMBLE = struct.Struct("<4sIQ")


class Layout(str, Enum):
    SERIAL = "serial"
    PARALLEL = "parallel"


class Activation(str, Enum):
    GELU = "gelu"
    RELU = "relu"


class HeadKind(str, Enum):
    TIED_EMBEDDING = "tied_embedding"
    LINEAR_HEAD = "linear_head"


# ─── Weight file errors ──────────────────────────────────────────────────────

class WeightFileError(Exception):
    """Base class for weight container failures"""
    code = "weight_file"


class BadMagicError(WeightFileError):
    code = "bad_magic"


class UnsupportedVersionError(WeightFileError):
    code = "bad_version"


class TensorShapeError(WeightFileError):
    code = "shape_mismatch"

    def __init__(self, tensor_name: str, expected: Tuple[int, ...], actual: Tuple[int, ...]):
        self.tensor_name = tensor_name
        self.expected = tuple(expected)
        self.actual = tuple(actual)
        super().__init__(f"Tensor '{tensor_name}' has shape {self.actual}, expected {self.expected}")


class TruncatedWeightFileError(WeightFileError):
    code = "truncated"


# ─── Configuration ───────────────────────────────────────────────────────────

@dataclass(frozen=True)
class ModelConfig:
    """Decoder-only transformer hyperparameters"""
    n_layers: int
    n_heads: int
    d_model: int
    d_inner: int
    vocab_size: int
    max_positions: int
    layout: Layout = Layout.SERIAL
    activation: Activation = Activation.GELU
    head_kind: HeadKind = HeadKind.TIED_EMBEDDING
    norm_epsilon: float = 1e-5

    def __post_init__(self):
        # Accept plain strings coming from JSON headers
        object.__setattr__(self, "layout", Layout(self.layout))
        object.__setattr__(self, "activation", Activation(self.activation))
        object.__setattr__(self, "head_kind", HeadKind(self.head_kind))

        for name in ("n_layers", "n_heads", "d_model", "d_inner", "vocab_size", "max_positions"):
            value = getattr(self, name)
            if not isinstance(value, int) or value <= 0:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not self.norm_epsilon > 0:
            raise ValueError(f"norm_epsilon must be positive, got {self.norm_epsilon}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        data = asdict(self)
        data["layout"] = self.layout.value
        data["activation"] = self.activation.value
        data["head_kind"] = self.head_kind.value
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


# ─── Parameters ──────────────────────────────────────────────────────────────

_LAYER_FIELDS = [
    # (field name, container suffix)
    ("ln_1_scale", "ln_1.weight"),
    ("ln_1_bias", "ln_1.bias"),
    ("w_q", "attn.w_q"),
    ("w_k", "attn.w_k"),
    ("w_v", "attn.w_v"),
    ("w_o", "attn.w_o"),
    ("b_q", "attn.b_q"),
    ("b_k", "attn.b_k"),
    ("b_v", "attn.b_v"),
    ("b_o", "attn.b_o"),
    ("ln_2_scale", "ln_2.weight"),
    ("ln_2_bias", "ln_2.bias"),
    ("w_in", "mlp.w_in"),
    ("b_in", "mlp.b_in"),
    ("w_out", "mlp.w_out"),
    ("b_out", "mlp.b_out"),
]


@dataclass
class LayerWeights:
    """Parameters of one transformer block (1-based layer index in names)"""
    ln_1_scale: np.ndarray
    ln_1_bias: np.ndarray
    w_q: np.ndarray          # d × d, head j owns columns [j*dh, (j+1)*dh)
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray          # d × d, head j owns rows [j*dh, (j+1)*dh)
    b_q: np.ndarray
    b_k: np.ndarray
    b_v: np.ndarray
    b_o: np.ndarray
    ln_2_scale: np.ndarray
    ln_2_bias: np.ndarray
    w_in: np.ndarray         # d_i × d
    b_in: np.ndarray
    w_out: np.ndarray        # d × d_i
    b_out: np.ndarray

    @staticmethod
    def expected_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
        d, di = config.d_model, config.d_inner
        return {
            "ln_1_scale": (d,), "ln_1_bias": (d,),
            "w_q": (d, d), "w_k": (d, d), "w_v": (d, d), "w_o": (d, d),
            "b_q": (d,), "b_k": (d,), "b_v": (d,), "b_o": (d,),
            "ln_2_scale": (d,), "ln_2_bias": (d,),
            "w_in": (di, d), "b_in": (di,),
            "w_out": (d, di), "b_out": (d,),
        }


@dataclass
class WeightStore:
    """All parameter tensors of a model"""
    embedding: np.ndarray                  # |V| × d
    position_embeddings: np.ndarray        # max_positions × d
    layers: List[LayerWeights]
    final_norm_scale: np.ndarray
    final_norm_bias: np.ndarray
    head_weight: Optional[np.ndarray] = None   # |V| × d, linear_head only
    head_bias: Optional[np.ndarray] = None     # |V|

    @property
    def dtype(self) -> np.dtype:
        return self.embedding.dtype

    def layer(self, layer: int) -> LayerWeights:
        """Weights of layer ℓ (1-based)"""
        if not 1 <= layer <= len(self.layers):
            raise IndexError(f"Layer {layer} outside 1..{len(self.layers)}")
        return self.layers[layer - 1]

    def head_slices(self, layer: int, head: int, n_heads: int) -> Tuple[np.ndarray, ...]:
        """(W_Q^j, W_K^j, W_V^j, W_O^j) for head j (0-based) at layer ℓ"""
        lw = self.layer(layer)
        dh = lw.w_q.shape[0] // n_heads
        cols = slice(head * dh, (head + 1) * dh)
        return lw.w_q[:, cols], lw.w_k[:, cols], lw.w_v[:, cols], lw.w_o[cols, :]

    def tensors(self) -> Iterator[Tuple[str, np.ndarray]]:
        """Canonical (name, array) order used by the container"""
        yield "wte", self.embedding
        yield "wpe", self.position_embeddings
        for idx, lw in enumerate(self.layers, start=1):
            for attr, suffix in _LAYER_FIELDS:
                yield f"layers.{idx}.{suffix}", getattr(lw, attr)
        yield "ln_f.weight", self.final_norm_scale
        yield "ln_f.bias", self.final_norm_bias
        if self.head_weight is not None:
            yield "head.weight", self.head_weight
            yield "head.bias", self.head_bias

    @classmethod
    def expected_shapes(cls, config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
        d, v = config.d_model, config.vocab_size
        shapes = {"wte": (v, d), "wpe": (config.max_positions, d)}
        layer_shapes = LayerWeights.expected_shapes(config)
        for idx in range(1, config.n_layers + 1):
            for attr, suffix in _LAYER_FIELDS:
                shapes[f"layers.{idx}.{suffix}"] = layer_shapes[attr]
        shapes["ln_f.weight"] = (d,)
        shapes["ln_f.bias"] = (d,)
        if config.head_kind == HeadKind.LINEAR_HEAD:
            shapes["head.weight"] = (v, d)
            shapes["head.bias"] = (v,)
        return shapes

    @classmethod
    def from_tensors(cls, config: ModelConfig, tensors: Dict[str, np.ndarray]) -> "WeightStore":
        """Assemble and shape-validate a store from named tensors"""
        expected = cls.expected_shapes(config)
        for name, shape in expected.items():
            if name not in tensors:
                raise TensorShapeError(name, shape, ())
            if tuple(tensors[name].shape) != shape:
                raise TensorShapeError(name, shape, tensors[name].shape)
        extra = sorted(set(tensors) - set(expected))
        if extra:
            raise WeightFileError(f"Unexpected tensors for this config: {', '.join(extra)}")

        layers = []
        for idx in range(1, config.n_layers + 1):
            layers.append(LayerWeights(**{
                attr: tensors[f"layers.{idx}.{suffix}"] for attr, suffix in _LAYER_FIELDS
            }))
        return cls(
            embedding=tensors["wte"],
            position_embeddings=tensors["wpe"],
            layers=layers,
            final_norm_scale=tensors["ln_f.weight"],
            final_norm_bias=tensors["ln_f.bias"],
            head_weight=tensors.get("head.weight"),
            head_bias=tensors.get("head.bias"),
        )

    def validate(self, config: ModelConfig):
        """Raise TensorShapeError on the first tensor inconsistent with config"""
        expected = self.expected_shapes(config)
        present = dict(self.tensors())
        for name, shape in expected.items():
            if name not in present:
                raise TensorShapeError(name, shape, ())
            if tuple(present[name].shape) != shape:
                raise TensorShapeError(name, shape, present[name].shape)
        if config.head_kind == HeadKind.TIED_EMBEDDING and self.head_weight is not None:
            raise WeightFileError("Tied-embedding config must not carry a linear head")

    def astype(self, dtype) -> "WeightStore":
        """Copy of the store with every tensor cast to dtype"""
        tensors = {name: np.array(arr, dtype=dtype) for name, arr in self.tensors()}
        layers = [
            LayerWeights(**{attr: tensors[f"layers.{idx}.{suffix}"] for attr, suffix in _LAYER_FIELDS})
            for idx in range(1, len(self.layers) + 1)
        ]
        return WeightStore(
            embedding=tensors["wte"],
            position_embeddings=tensors["wpe"],
            layers=layers,
            final_norm_scale=tensors["ln_f.weight"],
            final_norm_bias=tensors["ln_f.bias"],
            head_weight=tensors.get("head.weight"),
            head_bias=tensors.get("head.bias"),
        )

    def freeze(self) -> "WeightStore":
        """Mark all arrays read-only so workers can share them"""
        for _, arr in self.tensors():
            arr.flags.writeable = False
        return self


# ─── Container I/O ───────────────────────────────────────────────────────────

def _align(offset: int) -> int:
    return (offset + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


def encode_weights(config: ModelConfig, weights: WeightStore) -> bytes:
    """Serialize config + tensors into container bytes"""
    weights.validate(config)

    directory = []
    blobs = []
    offset = 0
    for name, arr in weights.tensors():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        offset = _align(offset)
        directory.append({
            "name": name,
            "dtype": "float32",
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(data),
        })
        blobs.append((offset, data))
        offset += len(data)

    header = json.dumps(
        {"config": config.to_dict(), "tensors": directory},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")

    preamble = _PREAMBLE.pack(CONTAINER_MAGIC, CONTAINER_VERSION, len(header))
    data_start = _align(len(preamble) + len(header))

    out = bytearray(data_start + offset)
    out[:len(preamble)] = preamble
    out[len(preamble):len(preamble) + len(header)] = header
    for blob_offset, data in blobs:
        start = data_start + blob_offset
        out[start:start + len(data)] = data
    return bytes(out)


def decode_weights(raw: bytes, source: str = "<bytes>") -> Tuple[ModelConfig, WeightStore]:
    """Parse container bytes; shapes are validated before returning"""
    if len(raw) < _PREAMBLE.size:
        raise TruncatedWeightFileError(f"{source}: file shorter than the container preamble")

    magic, version, header_len = _PREAMBLE.unpack_from(raw, 0)
    if magic != CONTAINER_MAGIC:
        raise BadMagicError(f"{source}: bad magic {magic!r}, expected {CONTAINER_MAGIC!r}")
    if version != CONTAINER_VERSION:
        raise UnsupportedVersionError(f"{source}: container version {version} not supported")

    header_end = _PREAMBLE.size + header_len
    if len(raw) < header_end:
        raise TruncatedWeightFileError(f"{source}: header runs past end of file")

    try:
        header = json.loads(raw[_PREAMBLE.size:header_end].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        directory = header["tensors"]
    except (ValueError, KeyError, TypeError) as e:
        raise WeightFileError(f"{source}: malformed header: {e}") from e

    data_start = _align(header_end)
    expected = WeightStore.expected_shapes(config)
    tensors: Dict[str, np.ndarray] = {}
    for idx, entry in enumerate(directory):
        try:
            name = str(entry["name"])
            shape = tuple(int(dim) for dim in entry["shape"])
            offset = entry["offset"]
            dtype = entry.get("dtype")
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise WeightFileError(f"{source}: malformed tensor entry {idx}: {e!r}") from e
        if name in expected and shape != expected[name]:
            raise TensorShapeError(name, expected[name], shape)
        if dtype != "float32":
            raise WeightFileError(f"{source}: tensor '{name}' has unsupported dtype {dtype}")
        if not isinstance(offset, int) or isinstance(offset, bool) or offset < 0 or offset % ALIGNMENT:
            raise WeightFileError(f"{source}: tensor '{name}' offset {offset!r} is not a multiple of {ALIGNMENT}")
        if any(dim < 0 for dim in shape):
            raise TensorShapeError(name, expected.get(name, shape), shape)

        count = int(np.prod(shape)) if shape else 1
        start = data_start + offset
        end = start + count * 4
        if end > len(raw):
            raise TruncatedWeightFileError(f"{source}: tensor '{name}' runs past end of file")
        tensors[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=start).reshape(shape).astype(np.float32)

    weights = WeightStore.from_tensors(config, tensors)
    return config, weights


def atomic_write_bytes(path: Union[str, Path], payload: bytes):
    """Write to a temporary sibling, then rename over the final name"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def atomic_write_text(path: Union[str, Path], text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def save_weights(path: Union[str, Path], config: ModelConfig, weights: WeightStore):
    """Write a container atomically"""
    payload = encode_weights(config, weights)
    atomic_write_bytes(path, payload)
    logger.info(f"Saved weights ({len(payload)} bytes) to {path}")


def load_weights(path: Union[str, Path]) -> Tuple[ModelConfig, WeightStore]:
    """Read a container; every tensor is shape-checked against the header config"""
    path = Path(path)
    raw = path.read_bytes()
    config, weights = decode_weights(raw, source=str(path))
    logger.info(
        f"Loaded weights from {path}: L={config.n_layers}, H={config.n_heads}, "
        f"d={config.d_model}, |V|={config.vocab_size}, layout={config.layout.value}"
    )
    return config, weights.freeze()


def file_sha256(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
