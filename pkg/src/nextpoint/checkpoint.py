"""Versioned binary container for policy checkpoints and the frozen mask decoder.

Layout: 8-byte magic, little-endian u32 format version, u64 header length, a
canonical JSON header, the raw little-endian float64 tensor data in header order,
then a sha256 digest of everything before it.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .decoder import DecoderConfig, FrozenMaskDecoder
from .optim import AdamState
from .policy import ModelConfig, PolicyParams

MAGIC = b"NXPCKPT\x00"
FORMAT_VERSION = 1
_DIGEST = 32


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    params: PolicyParams
    state: AdamState
    meta: dict = field(default_factory=dict)
    decoder_checksum: str | None = None

    @property
    def vocab_hash(self) -> str:
        return self.params.config.vocab.layout_hash()


def pack(header: dict, groups: dict[str, dict[str, np.ndarray]]) -> bytes:
    """Serialize a JSON header plus named float64 tensor groups, in sorted order."""
    entries, chunks = [], []
    for kind in sorted(groups):
        for name in sorted(groups[kind]):
            data = np.ascontiguousarray(groups[kind][name], dtype="<f8").tobytes()
            entries.append({"kind": kind, "name": name, "shape": list(np.shape(groups[kind][name])), "nbytes": len(data)})
            chunks.append(data)
    hbytes = json.dumps({**header, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def unpack(raw: bytes) -> tuple[dict, dict[str, dict[str, np.ndarray]]]:
    if len(raw) < len(MAGIC) + 12 + _DIGEST or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", raw, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    body, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint is truncated or corrupted")
    off = len(MAGIC) + 12
    header = json.loads(body[off : off + hlen])
    off += hlen
    groups: dict[str, dict[str, np.ndarray]] = {}
    for e in header.pop("tensors"):
        end = off + e["nbytes"]
        arr = np.frombuffer(body[off:end], dtype="<f8").astype(np.float64).reshape(e["shape"])
        groups.setdefault(e["kind"], {})[e["name"]] = arr
        off = end
    if off != len(body):
        raise CheckpointError("tensor table does not cover the data")
    return header, groups


def dumps_checkpoint(ckpt: Checkpoint) -> bytes:
    st = ckpt.state
    header = {
        "artifact": "policy",
        "model_config": asdict(ckpt.params.config),
        "param_version": ckpt.params.version,
        "vocab_hash": ckpt.vocab_hash,
        "decoder_checksum": ckpt.decoder_checksum,
        "optimizer": {"beta1": st.beta1, "beta2": st.beta2, "eps": st.eps, "step": st.step},
        "meta": ckpt.meta,
    }
    return pack(header, {"param": ckpt.params.tensors, "adam_m": st.m, "adam_v": st.v})


def loads_checkpoint(raw: bytes) -> Checkpoint:
    header, groups = unpack(raw)
    if header.get("artifact") != "policy":
        raise CheckpointError("file is not a policy checkpoint")
    config = ModelConfig(**header["model_config"])
    params = PolicyParams(config, groups.get("param", {}), header["param_version"])
    if config.vocab.layout_hash() != header["vocab_hash"]:
        raise CheckpointError("vocabulary layout hash does not match the stored config")
    opt = header["optimizer"]
    state = AdamState(opt["beta1"], opt["beta2"], opt["eps"], opt["step"], groups.get("adam_m", {}), groups.get("adam_v", {}))
    return Checkpoint(params, state, header["meta"], header["decoder_checksum"])


def dumps_decoder(frozen: FrozenMaskDecoder, oracle: dict | None = None, report: dict | None = None) -> bytes:
    header = {"artifact": "mask_decoder", "config": asdict(frozen.config), "checksum": frozen.checksum, "report": report or {}}
    groups = {"decoder": dict(frozen.tensors)}
    if oracle is not None:
        groups["oracle"] = oracle
    return pack(header, groups)


def loads_decoder(raw: bytes) -> tuple[FrozenMaskDecoder, dict, dict]:
    """Returns ``(frozen, oracle, header)``; the stored checksum is re-verified."""
    header, groups = unpack(raw)
    if header.get("artifact") != "mask_decoder":
        raise CheckpointError("file is not a mask decoder artifact")
    try:
        frozen = FrozenMaskDecoder(DecoderConfig(**header["config"]), groups["decoder"], header["checksum"])
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    return frozen, groups.get("oracle", {}), header


def save_decoder(path: str | Path, frozen: FrozenMaskDecoder, oracle: dict | None = None, report: dict | None = None) -> None:
    Path(path).write_bytes(dumps_decoder(frozen, oracle, report))


def load_decoder(path: str | Path) -> tuple[FrozenMaskDecoder, dict, dict]:
    return loads_decoder(Path(path).read_bytes())


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(dumps_checkpoint(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return loads_checkpoint(Path(path).read_bytes())
