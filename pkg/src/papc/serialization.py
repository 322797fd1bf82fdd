"""Little-endian binary formats for datasets (``PAPCDS01``) and checkpoints (``PAPCCK01``).

Dataset layout::

    b"PAPCDS01" | u32 M | u32 K_max | u32 P | u32 tau_p
    P x ( u32 K_active | K_max x u16 pilot (0xFFFF = padded) | M*K_max x f64 beta, row-major )

The pilot gram is rebuilt on load. Checkpoint layout::

    b"PAPCCK01" | u8 kind (0 = PAPC, 1 = FCN) | u32 M, K_max, width, H, L, d_mod
    every parameter array as f64 in canonical order

``width`` is M_bar for PAPC and M_hat for FCN; H and L are written as 0 for FCN.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .scenario import Dataset

DS_MAGIC = b"PAPCDS01"
CK_MAGIC = b"PAPCCK01"
PAD_PILOT = 0xFFFF

_DS_HEADER = struct.Struct("<8s4I")
_CK_HEADER = struct.Struct("<8sB6I")


def _record_dtype(M: int, K_max: int) -> np.dtype:
    return np.dtype([("k", "<u4"), ("pilots", "<u2", (K_max,)), ("beta", "<f8", (M * K_max,))])


def dataset_to_bytes(ds: Dataset) -> bytes:
    P, M, K = ds.P, ds.M, ds.K_max
    if K > PAD_PILOT or ds.tau_p >= PAD_PILOT:
        raise DataError("pilot indices do not fit in u16")
    rec = np.empty(P, dtype=_record_dtype(M, K))
    rec["k"] = ds.K_active
    pil = ds.pilots.copy()
    pil[pil < 0] = PAD_PILOT
    rec["pilots"] = pil
    rec["beta"] = ds.beta.reshape(P, M * K)
    return _DS_HEADER.pack(DS_MAGIC, M, K, P, ds.tau_p) + rec.tobytes()


def dataset_from_bytes(buf: bytes) -> Dataset:
    if len(buf) < _DS_HEADER.size:
        raise DataError("dataset file truncated before header end")
    magic, M, K, P, tau_p = _DS_HEADER.unpack_from(buf)
    if magic != DS_MAGIC:
        raise DataError(f"bad dataset magic {magic!r}")
    dt = _record_dtype(M, K)
    body = buf[_DS_HEADER.size:]
    if len(body) != P * dt.itemsize:
        raise DataError(f"dataset body has {len(body)} bytes, expected {P * dt.itemsize} for P={P}")
    rec = np.frombuffer(body, dtype=dt, count=P)
    pilots = rec["pilots"].astype(np.int64)
    pilots[pilots == PAD_PILOT] = -1
    k_active = rec["k"].astype(np.int64)
    if np.any(k_active > K) or np.any(k_active < 1 if P else False):
        raise DataError("record K_active outside [1, K_max]")
    beta = rec["beta"].reshape(P, M, K).astype(np.float64)
    return Dataset(beta, pilots, k_active, tau_p)


def write_dataset(path: str | Path, ds: Dataset) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def read_dataset(path: str | Path) -> Dataset:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    return dataset_from_bytes(buf)


def read_dataset_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        magic, M, K, P, tau_p = _DS_HEADER.unpack(fh.read(_DS_HEADER.size))
    if magic != DS_MAGIC:
        raise DataError(f"bad dataset magic {magic!r}")
    return {"M": M, "K_max": K, "P": P, "tau_p": tau_p}


def checkpoint_to_bytes(kind: int, header: tuple[int, ...], arrays) -> bytes:
    if len(header) != 6:
        raise ValueError("checkpoint header needs M, K_max, width, H, L, d_mod")
    parts = [_CK_HEADER.pack(CK_MAGIC, kind, *header)]
    parts += [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays]
    return b"".join(parts)


def checkpoint_from_bytes(buf: bytes) -> tuple[int, tuple[int, ...], np.ndarray]:
    if len(buf) < _CK_HEADER.size:
        raise DataError("checkpoint truncated before header end")
    magic, kind, *header = _CK_HEADER.unpack_from(buf)
    if magic != CK_MAGIC:
        raise DataError(f"bad checkpoint magic {magic!r}")
    if kind not in (0, 1):
        raise DataError(f"unknown model kind {kind}")
    body = buf[_CK_HEADER.size:]
    if len(body) % 8:
        raise DataError("checkpoint body is not a whole number of f64 values")
    return kind, tuple(header), np.frombuffer(body, dtype="<f8").astype(np.float64)
