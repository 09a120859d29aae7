"""Codec model bundle: the four transforms plus the side-info prior.

Checkpoint layout (integers and floats little-endian):

    magic         8 bytes  b"ICAEMODL"
    version       u8       1
    variant       u8       0 = baseline, 1 = deepened
    N             u16
    M             u16
    deepen_hyper  u8
    blobs         float32 arrays for every parameter, in declaration
                  order: analysis, synthesis, hyper_analysis,
                  hyper_synthesis stacks (kernel, bias, then GDN beta/gamma
                  per layer), then prior location and raw scale
    check         u64      blake2b-64 of every preceding byte
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .container import VARIANT_IDS, VARIANT_NAMES
from .entropy import FactorizedPrior, GaussianConditional
from .transforms import ArchConfig, TransformStack, build_transform

CHECKPOINT_MAGIC = b"ICAEMODL"
CHECKPOINT_VERSION = 1

_HEADER = struct.Struct("<8sBBHHB")


class CheckpointError(ValueError):
    """Checkpoint bytes are malformed or fail the checksum."""


def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


@dataclass
class CodecModel:
    cfg: ArchConfig
    analysis: TransformStack
    synthesis: TransformStack
    hyper_analysis: TransformStack
    hyper_synthesis: TransformStack
    prior: FactorizedPrior
    conditional: GaussianConditional

    @classmethod
    def build(cls, cfg: ArchConfig, seed: int = 0) -> "CodecModel":
        return cls(
            cfg=cfg,
            analysis=build_transform(cfg, "analysis", seed),
            synthesis=build_transform(cfg, "synthesis", seed + 1),
            hyper_analysis=build_transform(cfg, "hyper_analysis", seed + 2),
            hyper_synthesis=build_transform(cfg, "hyper_synthesis", seed + 3),
            prior=FactorizedPrior(cfg.n_channels),
            conditional=GaussianConditional(),
        )

    def stacks(self):
        return (self.analysis, self.synthesis, self.hyper_analysis, self.hyper_synthesis)

    def parameters(self):
        params = []
        for stack in self.stacks():
            params.extend(stack.parameters())
        params.extend(self.prior.parameters())
        return params

    def freeze(self) -> "CodecModel":
        for p in self.parameters():
            p.requires_grad = False
        return self

    def to_bytes(self) -> bytes:
        body = bytearray()
        body += _HEADER.pack(
            CHECKPOINT_MAGIC,
            CHECKPOINT_VERSION,
            VARIANT_IDS[self.cfg.variant],
            self.cfg.n_channels,
            self.cfg.m_channels,
            1 if self.cfg.deepen_hyper else 0,
        )
        for p in self.parameters():
            body += p.data.astype("<f4").tobytes()
        body += _digest(bytes(body))
        return bytes(body)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "CodecModel":
        if len(data) < _HEADER.size + 8 or data[:8] != CHECKPOINT_MAGIC:
            raise CheckpointError("not a model checkpoint (bad magic)")
        if _digest(bytes(data[:-8])) != data[-8:]:
            raise CheckpointError("checkpoint checksum mismatch (corrupt file)")
        _, version, variant_id, n, m, deepen = _HEADER.unpack_from(data, 0)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        if variant_id not in VARIANT_NAMES:
            raise CheckpointError(f"unknown variant id {variant_id}")
        cfg = ArchConfig(
            variant=VARIANT_NAMES[variant_id],
            n_channels=n,
            m_channels=m,
            deepen_hyper=bool(deepen),
        )
        model = cls.build(cfg, seed=0)
        pos = _HEADER.size
        end = len(data) - 8
        for p in model.parameters():
            nbytes = p.data.size * 4
            if pos + nbytes > end:
                raise CheckpointError("checkpoint too short for declared architecture")
            block = np.frombuffer(data, dtype="<f4", count=p.data.size, offset=pos)
            p.data = block.reshape(p.data.shape).astype(np.float32)
            pos += nbytes
        if pos != end:
            raise CheckpointError("checkpoint has trailing parameter bytes")
        return model

    @classmethod
    def load(cls, path) -> "CodecModel":
        return cls.from_bytes(Path(path).read_bytes())
