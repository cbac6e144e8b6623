"""Binary checkpoint format.

Layout::

    b"MMTC" | u32 version | u64 header length | JSON header (sorted keys)
    | float64 array payload | 32-byte SHA-256 of everything before it

The JSON header stores metadata and an index of (name, shape, offset) for
every array.  Serialisation is deterministic, so save→load→save yields
identical bytes, and any flipped byte fails the trailing digest.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .optim import AdamState

MAGIC = b"MMTC"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


def tokens_hash(tokens) -> str:
    return hashlib.sha256("\n".join(tokens).encode("utf-8")).hexdigest()


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class Checkpoint:
    model_dims: dict[str, int]
    model: dict[str, np.ndarray]
    adv_variant: str
    adv: dict[str, np.ndarray]
    adam_q: AdamState
    adam_d: AdamState
    src_vocab: list[str]
    tgt_vocab: list[str]
    epoch: int = 0
    best_score: float = float("-inf")
    bad_epochs: int = 0
    rng_states: dict[str, Any] = field(default_factory=dict)
    config: dict[str, Any] = field(default_factory=dict)
    metrics: list[dict[str, Any]] = field(default_factory=list)
    bpe_hash: str | None = None
    version: int = VERSION

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k, v in self.model.items():
            out[f"model/{k}"] = v
        for k, v in self.adv.items():
            out[f"adv/{k}"] = v
        for tag, st in (("adam_q", self.adam_q), ("adam_d", self.adam_d)):
            for k, v in st.m.items():
                out[f"{tag}.m/{k}"] = v
            for k, v in st.v.items():
                out[f"{tag}.v/{k}"] = v
        return out


def _adam_meta(st: AdamState) -> dict:
    return {"lr": st.lr, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps, "step": st.step}


def _json_safe(x):
    if isinstance(x, float) and not np.isfinite(x):
        return {"__float__": repr(x)}
    if isinstance(x, dict):
        return {str(k): _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return _json_safe(float(x))
    return x


def _json_restore(x):
    if isinstance(x, dict):
        if set(x) == {"__float__"}:
            return float(x["__float__"])
        return {k: _json_restore(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_json_restore(v) for v in x]
    return x


def to_bytes(ckpt: Checkpoint) -> bytes:
    arrays = ckpt.arrays()
    index = []
    offset = 0
    chunks = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "model_dims": ckpt.model_dims,
        "adv_variant": ckpt.adv_variant,
        "adam_q": _adam_meta(ckpt.adam_q),
        "adam_d": _adam_meta(ckpt.adam_d),
        "src_vocab": ckpt.src_vocab,
        "tgt_vocab": ckpt.tgt_vocab,
        "src_vocab_hash": tokens_hash(ckpt.src_vocab),
        "tgt_vocab_hash": tokens_hash(ckpt.tgt_vocab),
        "bpe_hash": ckpt.bpe_hash,
        "epoch": ckpt.epoch,
        "best_score": ckpt.best_score,
        "bad_epochs": ckpt.bad_epochs,
        "rng_states": ckpt.rng_states,
        "config": ckpt.config,
        "metrics": ckpt.metrics,
        "index": index,
        "payload_bytes": offset,
    }
    hjson = json.dumps(_json_safe(header), sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _PREFIX.pack(MAGIC, ckpt.version, len(hjson)) + hjson + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def from_bytes(raw: bytes, expected_vocab_hashes: tuple[str, str] | None = None) -> Checkpoint:
    if len(raw) < _PREFIX.size + 32:
        raise CheckpointError("checkpoint truncated")
    body, digest = raw[:-32], raw[-32:]
    magic, version, hlen = _PREFIX.unpack_from(body, 0)
    if magic != MAGIC:
        raise CheckpointError(f"not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint digest mismatch: file is corrupted or truncated")
    start = _PREFIX.size
    try:
        header = _json_restore(json.loads(body[start : start + hlen].decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from None
    payload = body[start + hlen :]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError("checkpoint payload length mismatch")
    if tokens_hash(header["src_vocab"]) != header["src_vocab_hash"] or tokens_hash(
        header["tgt_vocab"]
    ) != header["tgt_vocab_hash"]:
        raise CheckpointError("vocabulary hash mismatch inside checkpoint")
    if expected_vocab_hashes is not None and expected_vocab_hashes != (
        header["src_vocab_hash"],
        header["tgt_vocab_hash"],
    ):
        raise CheckpointError("checkpoint vocabularies differ from the expected ones")
    arrays = {}
    for entry in header["index"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=entry["offset"])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)

    def group(prefix):
        return {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}

    def adam(tag):
        st = AdamState(**header[tag])
        st.m = group(f"{tag}.m/")
        st.v = group(f"{tag}.v/")
        return st

    return Checkpoint(
        model_dims=header["model_dims"],
        model=group("model/"),
        adv_variant=header["adv_variant"],
        adv=group("adv/"),
        adam_q=adam("adam_q"),
        adam_d=adam("adam_d"),
        src_vocab=header["src_vocab"],
        tgt_vocab=header["tgt_vocab"],
        epoch=header["epoch"],
        best_score=header["best_score"],
        bad_epochs=header["bad_epochs"],
        rng_states=header["rng_states"],
        config=header["config"],
        metrics=header["metrics"],
        bpe_hash=header["bpe_hash"],
        version=version,
    )


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path, expected_vocab_hashes: tuple[str, str] | None = None) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), expected_vocab_hashes)
