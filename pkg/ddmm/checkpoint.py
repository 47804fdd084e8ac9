"""Binary checkpoint format.

Layout, all integers little-endian::

    b"DDMM"  u16 version
    u32 n    n bytes of JSON metadata (arch, size, epoch, kind, trained_on)
    u8 flag  [u8 schedule kind, u32 T, T x f64 betas]            if flag
    u32 k    k network blocks: name, u32 count, count x parameter block
    u8 flag  [u64 step, u32 k, k x (name, u32 count, count x moment block)]  if flag
    32 bytes SHA-256 of everything above

A parameter block is (name, u8 rank, rank x u32 dims, f32 values); a moment
block is (name, u64 adam step, u8 rank, rank x u32 dims, f32 m, f32 v).
Names are u16-length-prefixed UTF-8. Files are written to a temporary name
and renamed into place.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .denoiser import Arch, UNet
from .errors import CheckpointError
from .schedule import SCHEDULE_KINDS, NoiseSchedule
from .trainer import DdmmModel, OptimState, TrainConfig

MAGIC = b"DDMM"
VERSION = 1
DIGEST_SIZE = 32

ParamBlock = Dict[str, np.ndarray]
MomentRow = Tuple[str, np.ndarray, np.ndarray, int]


@dataclass
class Checkpoint:
    meta: Dict[str, Any]
    networks: Dict[str, ParamBlock]
    schedule: Optional[NoiseSchedule] = None
    trainer_step: Optional[int] = None
    moments: Dict[str, List[MomentRow]] = field(default_factory=dict)


# ---------- encoding ----------

def _name(buf: io.BytesIO, name: str) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def _array(buf: io.BytesIO, values: np.ndarray) -> None:
    arr = np.ascontiguousarray(values, dtype="<f4")
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.tobytes())


def encode(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    if ckpt.schedule is None:
        buf.write(struct.pack("<B", 0))
    else:
        betas = np.ascontiguousarray(ckpt.schedule.betas, dtype="<f8")
        buf.write(struct.pack("<BBI", 1, SCHEDULE_KINDS.index(ckpt.schedule.kind), betas.size))
        buf.write(betas.tobytes())
    buf.write(struct.pack("<I", len(ckpt.networks)))
    for net_name, params in ckpt.networks.items():
        _name(buf, net_name)
        buf.write(struct.pack("<I", len(params)))
        for pname, values in params.items():
            _name(buf, pname)
            _array(buf, values)
    if ckpt.trainer_step is None:
        buf.write(struct.pack("<B", 0))
    else:
        buf.write(struct.pack("<BQI", 1, ckpt.trainer_step, len(ckpt.moments)))
        for net_name, rows in ckpt.moments.items():
            _name(buf, net_name)
            buf.write(struct.pack("<I", len(rows)))
            for pname, m, v, step in rows:
                _name(buf, pname)
                buf.write(struct.pack("<Q", step))
                _array(buf, m)
                buf.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, data: bytes, source: str) -> None:
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.source}: truncated checkpoint")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")

    def array(self) -> np.ndarray:
        (rank,) = self.unpack("<B")
        dims = self.unpack(f"<{rank}I")
        count = int(np.prod(dims)) if rank else 1
        return np.frombuffer(self.take(4 * count), dtype="<f4").reshape(dims).copy()

    def like(self, shape: Tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape).copy()


def decode(data: bytes, source: str = "checkpoint") -> Checkpoint:
    if len(data) < len(MAGIC) + 2 + DIGEST_SIZE or data[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a ddmm checkpoint")
    body, digest = data[:-DIGEST_SIZE], data[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{source}: checksum mismatch")
    r = _Reader(body, source)
    r.take(4)
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    (n,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(n).decode("utf-8"))
    except ValueError as e:
        raise CheckpointError(f"{source}: bad metadata ({e})") from e
    schedule = None
    (flag,) = r.unpack("<B")
    if flag:
        kind, t_max = r.unpack("<BI")
        if kind >= len(SCHEDULE_KINDS):
            raise CheckpointError(f"{source}: unknown schedule kind tag {kind}")
        betas = np.frombuffer(r.take(8 * t_max), dtype="<f8").astype(np.float64)
        schedule = NoiseSchedule.from_betas(SCHEDULE_KINDS[kind], betas)
    networks: Dict[str, ParamBlock] = {}
    (k,) = r.unpack("<I")
    for _ in range(k):
        net_name = r.name()
        (count,) = r.unpack("<I")
        networks[net_name] = {}
        for _ in range(count):
            pname = r.name()
            networks[net_name][pname] = r.array()
    trainer_step = None
    moments: Dict[str, List[MomentRow]] = {}
    (flag,) = r.unpack("<B")
    if flag:
        trainer_step, k = r.unpack("<QI")
        for _ in range(k):
            net_name = r.name()
            (count,) = r.unpack("<I")
            rows = []
            for _ in range(count):
                pname = r.name()
                (step,) = r.unpack("<Q")
                m = r.array()
                v = r.like(m.shape)
                rows.append((pname, m, v, step))
            moments[net_name] = rows
    if r.pos != len(body):
        raise CheckpointError(f"{source}: {len(body) - r.pos} trailing bytes")
    return Checkpoint(meta, networks, schedule, trainer_step, moments)


def save(path: Path, ckpt: Checkpoint) -> None:
    """Write ``ckpt`` atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(encode(ckpt))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path: Path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return decode(data, path.name)


# ---------- models ----------

def _params(net: torch.nn.Module) -> ParamBlock:
    return {name: p.detach().cpu().numpy().astype("<f4") for name, p in net.named_parameters()}


def _install(net: torch.nn.Module, params: ParamBlock, what: str) -> None:
    own = dict(net.named_parameters())
    if set(own) != set(params):
        raise CheckpointError(f"{what}: parameter names do not match the architecture")
    with torch.no_grad():
        for name, p in own.items():
            values = params[name]
            if tuple(values.shape) != tuple(p.shape):
                raise CheckpointError(f"{what}: {name} has shape {values.shape}, expected {tuple(p.shape)}")
            p.copy_(torch.from_numpy(values.astype(np.float32)))


def model_checkpoint(model: DdmmModel, optim: Optional[OptimState] = None, trained_on: Sequence[str] = ()) -> Checkpoint:
    """Snapshot both branches, the schedule and (optionally) the Adam state."""
    ckpt = Checkpoint(
        meta={
            "kind": "ddmm",
            "arch": asdict(model.arch),
            "size": model.size,
            "epoch": model.epoch,
            "trained_on": sorted(trained_on),
        },
        networks={name: _params(net) for name, net in model.branches()},
        schedule=model.schedule,
    )
    if optim is not None:
        ckpt.trainer_step = optim.step
        for name, _ in model.branches():
            ckpt.moments[name] = [
                (pname, m.detach().cpu().numpy(), v.detach().cpu().numpy(), step)
                for pname, m, v, step in optim.moments(name)
            ]
    return ckpt


def restore_model(ckpt: Checkpoint) -> DdmmModel:
    if ckpt.meta.get("kind") != "ddmm" or ckpt.schedule is None:
        raise CheckpointError("not a ddmm model checkpoint")
    arch = Arch(**ckpt.meta["arch"])
    model = DdmmModel(UNet(arch), UNet(arch), ckpt.schedule, int(ckpt.meta["size"]), int(ckpt.meta["epoch"]))
    for name, net in model.branches():
        if name not in ckpt.networks:
            raise CheckpointError(f"checkpoint has no {name} branch")
        _install(net, ckpt.networks[name], name)
    return model


def restore_optim(ckpt: Checkpoint, model: DdmmModel, config: TrainConfig) -> OptimState:
    """An ``OptimState`` carrying the saved Adam moments, or a fresh one if none were saved."""
    optim = OptimState(model, config)
    if ckpt.trainer_step is not None:
        optim.step = ckpt.trainer_step
        for name, rows in ckpt.moments.items():
            optim.restore(name, [(p, torch.from_numpy(m), torch.from_numpy(v), s) for p, m, v, s in rows])
    return optim


def segnet_checkpoint(net: UNet, size: int, trained_on: Sequence[str] = ()) -> Checkpoint:
    return Checkpoint(
        meta={"kind": "segnet", "arch": asdict(net.arch), "size": size, "epoch": 0, "trained_on": sorted(trained_on)},
        networks={"segnet": _params(net)},
    )


def restore_segnet(ckpt: Checkpoint) -> UNet:
    if ckpt.meta.get("kind") != "segnet" or "segnet" not in ckpt.networks:
        raise CheckpointError("not a segmenter checkpoint")
    net = UNet(Arch(**ckpt.meta["arch"]))
    _install(net, ckpt.networks["segnet"], "segnet")
    return net
