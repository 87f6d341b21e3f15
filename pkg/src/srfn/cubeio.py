"""HCUBE cube files, observation-model JSON and binary checkpoints."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from . import diffmath as dm
from .selfreg import SrfnConfig, SrfnState

CUBE_MAGIC = b"HCUBE1\n"
CUBE_LAYOUT = "band-major row-major"
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}

CKPT_MAGIC = b"SRFNCKPT"
CKPT_VERSION = 1


class FormatError(ValueError):
    """A malformed file; ``code`` is a stable machine-readable tag."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# cube files
# ---------------------------------------------------------------------------


def encode_cube(cube: np.ndarray, dtype: str = "f64") -> bytes:
    cube = np.asarray(cube)
    if cube.ndim != 3:
        raise ValueError(f"cube must be (bands, height, width), got shape {cube.shape}")
    if dtype not in DTYPES:
        raise ValueError(f"dtype must be one of {sorted(DTYPES)}")
    bands, height, width = cube.shape
    payload = np.ascontiguousarray(cube, dtype=DTYPES[dtype]).tobytes()
    header = {
        "width": width,
        "height": height,
        "bands": bands,
        "dtype": dtype,
        "layout": CUBE_LAYOUT,
        "byte_length": len(payload),
    }
    return CUBE_MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" + payload


def decode_cube(data: bytes) -> np.ndarray:
    if not data.startswith(CUBE_MAGIC):
        raise FormatError("bad_magic", "not an HCUBE file (magic mismatch)")
    end = data.find(b"\n", len(CUBE_MAGIC))
    if end < 0:
        raise FormatError("bad_header", "header line is not terminated")
    try:
        header = json.loads(data[len(CUBE_MAGIC):end])
        width, height, bands = int(header["width"]), int(header["height"]), int(header["bands"])
        dtype = DTYPES[header["dtype"]]
        byte_length = int(header["byte_length"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError("bad_header", f"malformed header: {exc}") from None
    if header.get("layout", CUBE_LAYOUT) != CUBE_LAYOUT:
        raise FormatError("bad_header", f"unsupported layout {header['layout']!r}")
    expected = width * height * bands * dtype.itemsize
    if byte_length != expected:
        raise FormatError("length_mismatch",
                          f"header byte_length {byte_length} disagrees with {width}x{height}x{bands} {header['dtype']}")
    payload = data[end + 1:]
    if len(payload) < byte_length:
        raise FormatError("truncated_payload", f"truncated payload: {len(payload)} of {byte_length} bytes")
    if len(payload) > byte_length:
        raise FormatError("length_mismatch", f"payload has {len(payload) - byte_length} trailing bytes")
    cube = np.frombuffer(payload, dtype=dtype).reshape(bands, height, width)
    return cube.astype(np.float64)


def write_cube(path, cube: np.ndarray, dtype: str = "f64") -> None:
    atomic_write(path, encode_cube(cube, dtype))


def read_cube(path) -> np.ndarray:
    return decode_cube(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# observation model JSON
# ---------------------------------------------------------------------------


def _six(values) -> list:
    return [float(f"{v:.6g}") for v in np.asarray(values, dtype=np.float64).ravel()]


def model_to_dict(psf: np.ndarray, srf: np.ndarray, scale: int) -> dict:
    psf = np.asarray(psf)
    srf = np.asarray(srf)
    return {
        "scale": int(scale),
        "psf": {"size": int(psf.shape[0]), "weights": _six(psf)},
        "srf": {"rows": int(srf.shape[0]), "cols": int(srf.shape[1]), "weights": _six(srf)},
    }


def model_from_dict(data: dict):
    k = data["psf"]["size"]
    psf = np.asarray(data["psf"]["weights"], dtype=np.float64).reshape(k, k)
    srf = np.asarray(data["srf"]["weights"], dtype=np.float64).reshape(data["srf"]["rows"], data["srf"]["cols"])
    return psf, srf, int(data["scale"])


def write_model(path, psf, srf, scale) -> None:
    atomic_write(path, (json.dumps(model_to_dict(psf, srf, scale), indent=2) + "\n").encode())


def read_model(path):
    return model_from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
# layout: magic (8 bytes) | version u32 | header length u64 | JSON header |
# little-endian f64 payload. The header lists every array with its offset.


def encode_checkpoint(state: SrfnState) -> bytes:
    store = state.store
    arrays = []
    for name in store.names():
        arrays.append((f"param/{name}", store[name].value))
        arrays.append((f"adam_m/{name}", store.m[name]))
        arrays.append((f"adam_v/{name}", store.v[name]))
    for name in sorted(store.u):
        arrays.append((f"sn_u/{name}", store.u[name]))
    entries, chunks, offset = [], [], 0
    for key, arr in arrays:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": key, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "config": state.config.to_dict(),
        "bands": state.bands,
        "msi_bands": state.msi_bands,
        "iteration": state.iteration,
        "optimizer_steps": store.steps,
        "adam_t": {n: store.t[n] for n in store.names()},
        "arrays": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    return CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def decode_checkpoint(data: bytes) -> SrfnState:
    if not data.startswith(CKPT_MAGIC):
        raise FormatError("bad_magic", "not a checkpoint file (magic mismatch)")
    fixed = len(CKPT_MAGIC) + 12
    if len(data) < fixed:
        raise FormatError("truncated_payload", "checkpoint header truncated")
    version, hlen = struct.unpack("<IQ", data[len(CKPT_MAGIC):fixed])
    if version != CKPT_VERSION:
        raise FormatError("bad_version", f"unsupported checkpoint version {version}")
    try:
        header = json.loads(data[fixed:fixed + hlen])
    except ValueError as exc:
        raise FormatError("bad_header", f"malformed checkpoint header: {exc}") from None
    payload = data[fixed + hlen:]
    config = SrfnConfig.from_dict(header["config"])
    store = dm.ParamStore()
    arrays = {}
    for e in header["arrays"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise FormatError("truncated_payload", f"array {e['name']} extends past end of file")
        arrays[e["name"]] = np.frombuffer(payload[e["offset"]:end], dtype="<f8").reshape(e["shape"])
    dtype = config.dtype
    for key, arr in arrays.items():
        kind, name = key.split("/", 1)
        if kind == "param":
            store.add(name, arr.astype(dtype))
    for key, arr in arrays.items():
        kind, name = key.split("/", 1)
        if kind == "adam_m":
            store.m[name] = arr.astype(dtype)
        elif kind == "adam_v":
            store.v[name] = arr.astype(dtype)
        elif kind == "sn_u":
            store.u[name] = arr.astype(dtype)
    for name, t in header["adam_t"].items():
        store.t[name] = int(t)
    store.steps = int(header["optimizer_steps"])
    return SrfnState(config, int(header["bands"]), int(header["msi_bands"]), store, int(header["iteration"]))


def write_checkpoint(path, state: SrfnState) -> None:
    atomic_write(path, encode_checkpoint(state))


def read_checkpoint(path) -> SrfnState:
    return decode_checkpoint(Path(path).read_bytes())
