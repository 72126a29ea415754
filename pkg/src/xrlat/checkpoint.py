"""Versioned binary tensor container and model/embedding (de)serialization.

Layout (all integers little-endian u32, all floats little-endian f64):

    magic "XRLT" | version | n_meta | n_meta * (klen, key, vlen, value)
    | n_tensors | per tensor: (nlen, name, rank, dims..., row-major f64 data)

Metadata keys and values are UTF-8 strings; tensor names are unique.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .network import BlockParams, CorrectionLayer, EncoderParams, HeadParams
from .util import ParseError, atomic_write_bytes

MAGIC = b"XRLT"
VERSION = 1


def _pack_str(buf: io.BytesIO, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def write_container(path: str, metadata: dict, tensors: dict) -> None:
    """Serialize string metadata and named float64 tensors; atomic on disk."""
    names = list(tensors)
    if len(set(names)) != len(names):
        raise ParseError("tensor names must be unique")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(metadata)))
    for key, value in metadata.items():
        _pack_str(buf, str(key))
        _pack_str(buf, str(value))
    buf.write(struct.pack("<I", len(tensors)))
    for name, tensor in tensors.items():
        arr = np.asarray(tensor, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        _pack_str(buf, name)
        buf.write(struct.pack("<I", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(arr.astype("<f8").tobytes())
    atomic_write_bytes(path, buf.getvalue())


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise ParseError(f"{self.path}: truncated checkpoint")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def read_container(path: str):
    """Parse a container; returns (metadata dict, ordered tensors dict)."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise ParseError(f"{path}: not a checkpoint container (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise ParseError(f"{path}: unsupported container version {version}")
    metadata = {}
    for _ in range(r.u32()):
        key = r.string()
        metadata[key] = r.string()
    tensors = {}
    for _ in range(r.u32()):
        name = r.string()
        if name in tensors:
            raise ParseError(f"{path}: duplicate tensor name {name!r}")
        rank = r.u32()
        shape = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = r.take(8 * count)
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    if r.off != len(data):
        raise ParseError(f"{path}: {len(data) - r.off} trailing bytes after tensor table")
    return metadata, tensors


# ---------------------------------------------------------------------------
# model checkpoints


def save_model(path: str, model, cfg, vocab_size: int) -> None:
    metadata = {
        "kind": "level-model",
        "level": model.level,
        "provenance": model.provenance,
        "c": cfg.c,
        "s": cfg.s,
        "h": cfg.hidden_size,
        "n_layers": cfg.n_layers,
        "vocab_size": vocab_size,
        "seed": cfg.seed,
        "bootstrap": cfg.bootstrap,
        "negative_sampling": int(cfg.negative_sampling),
        "binary_threshold": repr(cfg.binary_threshold),
    }
    write_container(path, metadata, dict(model.tensors()))


def load_model(path: str):
    """Rebuild a LevelModel; returns (model, metadata)."""
    from .training import LevelModel

    metadata, tensors = read_container(path)
    if metadata.get("kind") != "level-model":
        raise ParseError(f"{path}: container does not hold a model")
    n_layers = int(metadata["n_layers"])
    try:
        blocks = []
        for i in range(n_layers):
            blocks.append(
                BlockParams(**{f: tensors[f"blk{i}.{f}"] for f in BlockParams.FIELDS})
            )
        enc = EncoderParams(tensors["emb"], tensors["pos"], blocks)
        head = HeadParams(tensors["W_la"], tensors["W_cl"], tensors["b_cl"])
    except KeyError as exc:
        raise ParseError(f"{path}: missing tensor {exc.args[0]!r}") from None
    corr = None
    corr_inputs = None
    if "corr.W" in tensors:
        corr = CorrectionLayer(tensors["corr.W"], tensors["corr.b"])
        corr_inputs = tensors.get("corr.E")
        if corr_inputs is None:
            raise ParseError(f"{path}: correction layer present but corr.E missing")
    model = LevelModel(
        enc, head, int(metadata["level"]), metadata.get("provenance", "random"),
        corr=corr, corr_inputs=corr_inputs,
    )
    if enc.vocab_size != int(metadata["vocab_size"]):
        raise ParseError(f"{path}: embedding rows disagree with vocab_size metadata")
    return model, metadata


def save_embeddings(path: str, emb, extra_metadata: dict | None = None) -> None:
    """Store per-level Poincare matrices as tensors E1..E4."""
    metadata = {"kind": "poincare", "dim": emb.dim, "ball_eps": repr(emb.ball_eps)}
    if extra_metadata:
        metadata.update(extra_metadata)
    tensors = {f"E{k}": emb.level(k) for k in range(1, 5)}
    write_container(path, metadata, tensors)


def load_embeddings(path: str):
    """Returns (metadata, {level: matrix}) for an embedding checkpoint."""
    metadata, tensors = read_container(path)
    if metadata.get("kind") != "poincare":
        raise ParseError(f"{path}: container does not hold embeddings")
    levels = {}
    for k in range(1, 5):
        name = f"E{k}"
        if name not in tensors:
            raise ParseError(f"{path}: missing tensor {name}")
        levels[k] = tensors[name]
    return metadata, levels
