"""Binary and CSV files for value fields and policy tables.

Binary layout (all integers little-endian)::

    bytes 0..7   magic, b"BIMPFLD1" for a value field or b"BIMPPOL1" for a policy
    bytes 8..11  u32, length H of the JSON header
    next H bytes UTF-8 JSON header (dtype, shape, axes, grids, model hash, ...)
    zero padding up to the next multiple of 8
    payload      the array in C order; float64 "<f8" for fields, int32 "<i4" for policies

Array axes are (time node, space axis 0, ..., space axis d-1, simplex node).
Space nodes, the horizon and the simplex are stored in the header so the
grid can be rebuilt exactly; floats survive JSON because Python writes
shortest round-trip reprs.
"""

from __future__ import annotations

import csv
import json
import struct

import numpy as np

from .errors import GridMismatch
from .model import Impulse
from .numerics import GridSpec, ValueField, build_simplex
from .policy import TIE_BREAK_RULE, Policy

FIELD_MAGIC = b"BIMPFLD1"
POLICY_MAGIC = b"BIMPPOL1"
FORMAT_VERSION = 1


def grids_from_dict(d: dict) -> GridSpec:
    return GridSpec(
        T=float(d["T"]),
        level=int(d["level"]),
        x_nodes=tuple(np.asarray(a, dtype=float) for a in d["x_nodes"]),
        simplex=build_simplex(int(d["K"]), int(d["simplex_resolution"])),
        clamp=bool(d["clamp"]),
    )


def _write(path, magic, header, array, dtype):
    header = dict(header, format_version=FORMAT_VERSION, dtype=dtype, shape=list(array.shape))
    blob = json.dumps(header, sort_keys=True).encode()
    head = magic + struct.pack("<I", len(blob)) + blob
    head += b"\0" * (-len(head) % 8)
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(np.ascontiguousarray(array, dtype=np.dtype(dtype)).tobytes(order="C"))


def _read(path, magic):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != magic:
        raise ValueError(f"{path}: not a {magic.decode()} file")
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + n].decode())
    start = 12 + n + (-(12 + n) % 8)
    dtype = np.dtype(header["dtype"])
    arr = np.frombuffer(raw, dtype=dtype, offset=start).reshape(header["shape"]).copy()
    return header, arr


def _axes(grids: GridSpec):
    return ["time"] + [f"x{i}" for i in range(grids.d)] + ["prior"]


def write_field(path, field: ValueField, model_hash: str = "", extra: dict | None = None) -> None:
    header = {
        "kind": "value_field",
        "axes": _axes(field.grids),
        "grids": field.grids.describe(),
        "beyond_horizon_terminal": field.beyond_horizon_terminal,
        "model_hash": model_hash,
    }
    if extra:
        header["extra"] = extra
    _write(path, FIELD_MAGIC, header, field.values, "<f8")


def read_field(path):
    """Returns ``(ValueField, header)``."""
    header, arr = _read(path, FIELD_MAGIC)
    grids = grids_from_dict(header["grids"])
    if tuple(arr.shape) != grids.field_shape:
        raise GridMismatch(f"{path}: payload shape {arr.shape} does not match its grid")
    return ValueField(arr, grids, header.get("beyond_horizon_terminal", True)), header


def write_policy(path, policy: Policy) -> None:
    header = dict(policy.header(), kind="policy", axes=_axes(policy.grids))
    _write(path, POLICY_MAGIC, header, policy.codes, "<i4")


def read_policy(path) -> Policy:
    header, arr = _read(path, POLICY_MAGIC)
    if header.get("tie_break") != TIE_BREAK_RULE:
        raise ValueError(f"{path}: unknown tie-break rule {header.get('tie_break')!r}")
    actions = tuple(Impulse(a["duration"], tuple(a["size"]), a["label"]) for a in header["actions"])
    return Policy(arr, actions, grids_from_dict(header["grids"]), header["epsilon"], header["model_hash"])


def export_field_csv(path, field: ValueField) -> None:
    """Columns: j, t, x0..x{d-1}, m0..m{K-1}, value (floats as shortest reprs)."""
    g = field.grids
    X = g.x_points()
    W = g.simplex.weights
    flat = field.values.reshape(g.n_intervals + 1, g.n_x, g.simplex.size)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["j", "t"] + [f"x{i}" for i in range(g.d)] + [f"m{k}" for k in range(g.simplex.K)] + ["value"])
        for j in range(g.n_intervals + 1):
            t = repr(g.time(j))
            for xi in range(g.n_x):
                xs = [repr(float(v)) for v in X[xi]]
                for p in range(g.simplex.size):
                    w.writerow([j, t] + xs + [repr(float(v)) for v in W[p]] + [repr(float(flat[j, xi, p]))])


def read_field_csv(path, grids: GridSpec) -> np.ndarray:
    vals = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            vals.append(float(row[-1]))
    return np.asarray(vals).reshape(grids.field_shape)
