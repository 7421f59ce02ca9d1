"""Modality branches, additive fusion, shared encoder and classification head.

    Z_i     = f_i(X_i)            one encoder branch per enabled modality
    Z_fused = sum_i Z_i
    H       = g(Z_fused)          shared encoder stack
    logits  = head(mean_L(H))
"""
from __future__ import annotations

import binascii
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import CONTEXT_DIM, LABELS, Window, seq_len, stack_inputs, token_dims
from .errors import (
    CheckpointCorruptError,
    CheckpointError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigHashError,
    ConfigurationError,
    DimensionError,
)
from .nn import tensor as T
from .nn.layers import EncoderStack, Linear, Module, positional_encoding
from .nn.tensor import Tensor, no_grad

MODALITIES = ("thermal", "au", "context")


@dataclass(frozen=True)
class ModelConfig:
    modalities: tuple[str, ...] = ("thermal", "au", "context")
    mode: str = "aggregate"
    input_dims: dict[str, int] | None = None
    d_model: int = 64
    heads: int = 2
    branch_layers: int = 1
    shared_layers: int = 1
    d_ff: int | None = None
    num_classes: int = 4
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        mods = tuple(self.modalities)
        object.__setattr__(self, "modalities", mods)
        if not mods:
            raise ConfigurationError("at least one modality must be enabled")
        unknown = [m for m in mods if m not in MODALITIES]
        if unknown or len(set(mods)) != len(mods):
            raise ConfigurationError(f"modalities must be distinct members of {MODALITIES}, got {mods}")
        if self.d_model <= 0 or self.d_model % 2:
            raise ConfigurationError(f"d_model must be a positive even integer, got {self.d_model}")
        if self.heads <= 0 or self.d_model % self.heads:
            raise ConfigurationError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.branch_layers < 0 or self.shared_layers < 0:
            raise ConfigurationError("layer counts must be nonnegative")
        if self.num_classes != len(LABELS):
            raise ConfigurationError(f"num_classes must be {len(LABELS)}")
        dims = dict(token_dims(self.mode))
        dims["context"] = CONTEXT_DIM
        if self.input_dims:
            dims.update({k: int(v) for k, v in self.input_dims.items()})
        object.__setattr__(self, "input_dims", {m: dims[m] for m in mods})
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d_model)

    @property
    def seq_len(self) -> int:
        return seq_len(self.mode)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        if "modalities" in d:
            d["modalities"] = tuple(d["modalities"])
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def additive_fuse(z_list: Sequence[Tensor], names: Sequence[str] | None = None) -> Tensor:
    """Elementwise sum of equally shaped modality representations."""
    if not z_list:
        raise DimensionError("additive fusion needs at least one representation")
    names = list(names) if names is not None else [f"#{i}" for i in range(len(z_list))]
    ref = z_list[0].shape
    for name, z in zip(names, z_list):
        if z.shape != ref:
            raise DimensionError(f"modality {name!r} has shape {z.shape}, expected {ref} (from {names[0]!r})")
    return T.stack_sum(z_list)


class Branch(Module):
    """Input projection (+ positions in sequence mode) then an encoder stack."""

    def __init__(self, d_in: int, cfg: ModelConfig, rng: np.random.Generator):
        self.proj = Linear(d_in, cfg.d_model, rng)
        self.encoder = EncoderStack(cfg.branch_layers, cfg.d_model, cfg.heads, cfg.d_ff, rng, cfg.dropout)


class FusionModel(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.branches = {m: Branch(config.input_dims[m], config, rng) for m in config.modalities}
        self.shared = EncoderStack(config.shared_layers, config.d_model, config.heads, config.d_ff,
                                   rng, config.dropout)
        self.head = Linear(config.d_model, config.num_classes, rng)
        for name, p in self.named_parameters():
            p.name = name
        # input standardization; identity until fit_normalization is called
        self.norm_mean = {m: np.zeros(config.input_dims[m]) for m in config.modalities}
        self.norm_std = {m: np.ones(config.input_dims[m]) for m in config.modalities}
        self._pe = positional_encoding(config.seq_len, config.d_model) if config.mode == "sequence" else None

    # -- parameters ------------------------------------------------------
    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for m in self.config.modalities:
            state[f"buffers.norm_mean.{m}"] = self.norm_mean[m].copy()
            state[f"buffers.norm_std.{m}"] = self.norm_std[m].copy()
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        expected = set(params) | {f"buffers.{k}.{m}" for k in ("norm_mean", "norm_std")
                                  for m in self.config.modalities}
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise CheckpointError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"parameter {name}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr
        for m in self.config.modalities:
            self.norm_mean[m] = np.array(state[f"buffers.norm_mean.{m}"], dtype=np.float64)
            self.norm_std[m] = np.array(state[f"buffers.norm_std.{m}"], dtype=np.float64)

    def parameter_hash(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def train(self, mode: bool = True):
        for b in self.branches.values():
            b.encoder.train(mode)
        self.shared.train(mode)

    def eval(self):
        self.train(False)

    # -- data ------------------------------------------------------------
    def fit_normalization(self, batch: "Batch") -> None:
        for m in self.config.modalities:
            x = batch.inputs[m]
            flat = x.reshape(-1, x.shape[-1])
            mu = flat.mean(axis=0)
            sd = flat.std(axis=0)
            self.norm_mean[m] = mu
            self.norm_std[m] = np.where(sd > 1e-8, sd, 1.0)

    def prepare(self, windows: Sequence[Window]) -> "Batch":
        labels = np.array([w.label for w in windows], dtype=np.int64)
        groups = np.array([w.group for w in windows])
        return Batch(stack_inputs(windows, self.config.modalities), labels, groups)

    # -- forward ---------------------------------------------------------
    def _check_input(self, modality: str, x: np.ndarray) -> np.ndarray:
        if modality not in self.branches:
            raise ConfigurationError(f"modality {modality!r} is not enabled in this model")
        x = np.asarray(x, dtype=np.float64)
        d = self.config.input_dims[modality]
        if modality == "context":
            if x.ndim == 1:
                x = x[None, :]
            if x.ndim != 2 or x.shape[-1] != d:
                raise DimensionError(f"context input must be [B x {d}], got {x.shape}")
        else:
            if x.ndim == 2:
                x = x[None]
            if x.ndim != 3 or x.shape[-1] != d or x.shape[1] != self.config.seq_len:
                raise DimensionError(
                    f"{modality} input must be [B x {self.config.seq_len} x {d}], got {x.shape}")
        return x

    def encode_modality(self, modality: str, x) -> Tensor:
        """Branch f_i: [B x L x D_i] (context: [B x 3072]) -> [B x L x d_model]."""
        x = self._check_input(modality, x)
        x = (x - self.norm_mean[modality]) / self.norm_std[modality]
        branch = self.branches[modality]
        z = branch.proj(Tensor(x))
        L = self.config.seq_len
        if modality == "context":
            z = T.broadcast_to(T.reshape(z, (z.shape[0], 1, self.config.d_model)),
                               (z.shape[0], L, self.config.d_model))
        if self._pe is not None:
            z = z + self._pe
        return branch.encoder(z)

    def classify(self, z_fused: Tensor) -> Tensor:
        h = self.shared(z_fused)
        pooled = T.mean(h, axis=-2)
        return self.head(pooled)

    def forward(self, inputs: Mapping[str, np.ndarray]) -> Tensor:
        missing = [m for m in self.config.modalities if m not in inputs]
        if missing:
            raise ConfigurationError(f"missing inputs for enabled modalities {missing}")
        zs = [self.encode_modality(m, inputs[m]) for m in self.config.modalities]
        return self.classify(additive_fuse(zs, self.config.modalities))

    __call__ = forward

    # -- training hooks --------------------------------------------------
    def loss(self, batch: "Batch") -> Tensor:
        return T.cross_entropy(self.forward(batch.inputs), batch.labels)

    def validation_loss(self, batch: "Batch") -> float:
        self.eval()
        with no_grad():
            return float(self.loss(batch).item())

    def predict(self, batch: "Batch", chunk: int = 2048) -> np.ndarray:
        self.eval()
        out = []
        with no_grad():
            for start in range(0, len(batch), chunk):
                out.append(self.forward(batch.subset(np.arange(start, min(start + chunk, len(batch)))).inputs).data)
        if not out:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(out).argmax(axis=1)


@dataclass
class Batch:
    inputs: dict[str, np.ndarray]
    labels: np.ndarray
    groups: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Batch":
        idx = np.asarray(idx)
        return Batch({k: v[idx] for k, v in self.inputs.items()}, self.labels[idx],
                     self.groups[idx] if len(self.groups) else self.groups)


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: b"AFUSE1" | u32 header length | header JSON | float64 LE blobs | u32 CRC32(blobs)

MAGIC = b"AFUSE1"
FORMAT_VERSION = 1


def save_checkpoint(model: FusionModel, path) -> None:
    path = Path(path)
    state = model.state_dict()
    manifest, blobs, offset = [], [], 0
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        raw = arr.tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    blob = b"".join(blobs)
    header = json.dumps({
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "config_hash": model.config.config_hash(),
        "manifest": manifest,
        "blob_bytes": len(blob),
    }, sort_keys=True).encode("utf-8")
    payload = MAGIC + struct.pack("<I", len(header)) + header + blob + struct.pack("<I", binascii.crc32(blob))
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> FusionModel:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 4:
        raise CheckpointTruncatedError(f"{path}: file too short ({len(raw)} bytes)")
    if raw[:len(MAGIC)] != MAGIC:
        if raw[:5] == MAGIC[:5]:
            raise CheckpointVersionError(f"{path}: unsupported checkpoint magic {raw[:len(MAGIC)]!r}")
        raise CheckpointCorruptError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if len(raw) < pos + hlen:
        raise CheckpointTruncatedError(f"{path}: header cut short")
    try:
        header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"{path}: unreadable header: {exc}") from None
    pos += hlen
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {header.get('format_version')} != {FORMAT_VERSION}")
    nblob = int(header["blob_bytes"])
    if len(raw) != pos + nblob + 4:
        if len(raw) < pos + nblob + 4:
            raise CheckpointTruncatedError(f"{path}: expected {pos + nblob + 4} bytes, found {len(raw)}")
        raise CheckpointCorruptError(f"{path}: {len(raw) - pos - nblob - 4} trailing bytes")
    blob = raw[pos:pos + nblob]
    (crc,) = struct.unpack_from("<I", raw, pos + nblob)
    if binascii.crc32(blob) != crc:
        raise CheckpointCorruptError(f"{path}: CRC mismatch")

    config = ModelConfig.from_dict(header["config"])
    if config.config_hash() != header["config_hash"]:
        raise CheckpointCorruptError(f"{path}: stored config hash does not match stored config")
    if expected_config is not None and expected_config.config_hash() != config.config_hash():
        raise ConfigHashError(
            f"{path}: checkpoint config {config.config_hash()[:12]} != expected {expected_config.config_hash()[:12]}")

    state = {}
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = int(entry["offset"])
        state[entry["name"]] = np.frombuffer(blob, dtype="<f8", count=n, offset=start).reshape(shape).astype(np.float64)
    model = FusionModel(config)
    model.load_state_dict(state)
    return model
