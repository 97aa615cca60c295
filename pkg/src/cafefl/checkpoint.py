"""Binary checkpoint container.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic b"CAFECKPT"
    offset 8   uint32    format version (1)
    offset 12  uint32    header length H in bytes
    offset 16  H bytes   UTF-8 JSON header
    offset 16+H          array payload, float64/bool little-endian, C order

The JSON header holds scalar metadata (round index, calibration
parameters, activation, config, selection-RNG state) and an ``arrays`` list
of ``{"name", "dtype", "shape", "offset"}`` entries, offsets relative to the
start of the payload. Arrays: extractor layers ``W0, b0, W1, b1, ...``, the
classifier ``phi``, the global drift directions ``drift_dirs`` and their
validity flags ``drift_valid``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .causal import CalibrationParams
from .drift import DriftDirections
from .errors import LoadError
from .model import ModelParams

MAGIC = b"CAFECKPT"
VERSION = 1
_DTYPES = {"f8": "<f8", "b1": "|b1"}


@dataclass
class Checkpoint:
    params: ModelParams
    drift: DriftDirections
    calibration: CalibrationParams
    round: int
    method: str = "cafe"
    head: str = "linear"
    rng_state: dict | None = None
    config: dict | None = None


def save_checkpoint(path: str, ck: Checkpoint):
    arrays = []
    for i, (W, b) in enumerate(zip(ck.params.weights, ck.params.biases)):
        arrays += [(f"W{i}", W), (f"b{i}", b)]
    arrays += [("phi", ck.params.phi), ("drift_dirs", ck.drift.global_dirs),
               ("drift_valid", ck.drift.global_valid)]
    entries, blobs, off = [], [], 0
    for name, a in arrays:
        kind = "b1" if a.dtype == bool else "f8"
        raw = np.ascontiguousarray(a, dtype=_DTYPES[kind]).tobytes()
        entries.append({"name": name, "dtype": kind, "shape": list(a.shape), "offset": off})
        blobs.append(raw)
        off += len(raw)
    cal = ck.calibration
    header = {
        "round": ck.round, "method": ck.method, "head": ck.head,
        "activation": ck.params.activation, "n_layers": len(ck.params.weights),
        "calibration": {"tau": cal.tau, "gamma": cal.gamma, "alpha": cal.alpha, "beta": cal.beta},
        "rng_state": ck.rng_state, "config": ck.config, "arrays": entries,
    }
    hbytes = json.dumps(header, sort_keys=True, default=_json_default).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialize {type(o)}")


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise LoadError(f"{path}: bad magic {buf[:8]!r} at offset 0")
    if len(buf) < 16:
        raise LoadError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise LoadError(f"{path}: unsupported checkpoint version {version}")
    if len(buf) < 16 + hlen:
        raise LoadError(f"{path}: header needs {hlen} bytes from offset 16")
    header = json.loads(buf[16:16 + hlen].decode())
    base = 16 + hlen
    arrays = {}
    for e in header["arrays"]:
        dt = np.dtype(_DTYPES[e["dtype"]])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        if start + count * dt.itemsize > len(buf):
            raise LoadError(f"{path}: array {e['name']} runs past end of file at offset {start}")
        arrays[e["name"]] = np.frombuffer(buf, dtype=dt, count=count, offset=start).reshape(e["shape"]).copy()
    n = header["n_layers"]
    params = ModelParams([arrays[f"W{i}"] for i in range(n)], [arrays[f"b{i}"] for i in range(n)],
                         arrays["phi"], header["activation"])
    dirs = arrays["drift_dirs"]
    valid = arrays["drift_valid"].astype(bool)
    drift = DriftDirections(dirs, np.zeros_like(dirs), valid, np.zeros_like(valid))
    return Checkpoint(params, drift, CalibrationParams(**header["calibration"]), header["round"],
                      header["method"], header["head"], header.get("rng_state"), header.get("config"))
