"""Field files: a Grid3Field as self-describing text.

Layout:

    line 1      "# " followed by a one-line JSON header with keys
                format, version, tag, shape [slices, n_z, n_v],
                grid {z, v, spot_index, snap_displacement, ...} and
                time {horizon, n_steps}
    remaining   slices * n_z rows of n_v values in "%.17g", row (k * n_z + i)
                holding values[k, i, :]

Node coordinates are stored in full so a field reads back onto the exact grid
it was written from.
"""

import json
from pathlib import Path

import numpy as np

from lsv_calibrator.core.errors import InputError
from lsv_calibrator.core.model import FieldTag, Grid2D, Grid3Field, TimeGrid

FORMAT_NAME = "lsv-field"
FORMAT_VERSION = 1


def field_header(field: Grid3Field) -> dict:
    grid = field.grid
    meta = dict(grid.metadata())
    meta["z"] = [float(z) for z in grid.z]
    meta["v"] = [float(v) for v in grid.v]
    meta["snap_displacement"] = list(grid.snap_displacement)
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "tag": field.tag.value,
        "shape": list(field.values.shape),
        "grid": meta,
        "time": field.tgrid.metadata(),
    }


def write_field(file_path: Path, field: Grid3Field) -> Path:
    """Write ``field`` to ``file_path``."""
    file_path = Path(file_path)
    slices, n_z, n_v = field.values.shape
    header = json.dumps(field_header(field), sort_keys=True)
    np.savetxt(
        file_path,
        field.values.reshape(slices * n_z, n_v),
        fmt="%.17g",
        header=header,
        comments="# ",
    )
    return file_path


def read_field(file_path: Path) -> Grid3Field:
    """Read a field file.

    Raises:
        InputError: Missing file, bad header or values inconsistent with it.
    """
    file_path = Path(file_path)
    try:
        with open(file_path, "r", encoding="utf-8") as handle:
            first = handle.readline()
    except FileNotFoundError:
        raise InputError(f"field file not found: {file_path}") from None
    if not first.startswith("#"):
        raise InputError(f"{file_path}: missing field header")
    try:
        header = json.loads(first.lstrip("#").strip())
        if header.get("format") != FORMAT_NAME:
            raise InputError(f"{file_path}: not a field file")
        tag = FieldTag(header["tag"])
        slices, n_z, n_v = (int(n) for n in header["shape"])
        meta, time_meta = header["grid"], header["time"]
        z = np.array(meta["z"], dtype=float)
        v = np.array(meta["v"], dtype=float)
        spot_index = tuple(int(i) for i in meta["spot_index"])
        displacement = tuple(float(d) for d in meta.get("snap_displacement", (0.0, 0.0)))
        tgrid = TimeGrid(
            horizon=float(time_meta["horizon"]), n_steps=int(time_meta["n_steps"])
        )
    except InputError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise InputError(f"{file_path}: malformed field header ({exc})") from None

    try:
        values = np.loadtxt(file_path, comments="#", ndmin=2, dtype=float)
    except ValueError as exc:
        raise InputError(f"{file_path}: malformed field values ({exc})") from None
    if values.shape != (slices * n_z, n_v) or z.size != n_z or v.size != n_v:
        raise InputError(
            f"{file_path}: values {values.shape} do not match header shape "
            f"{[slices, n_z, n_v]}"
        )
    z.setflags(write=False)
    v.setflags(write=False)
    grid = Grid2D(z=z, v=v, spot_index=spot_index, snap_displacement=displacement)
    return Grid3Field(
        values=values.reshape(slices, n_z, n_v), tag=tag, grid=grid, tgrid=tgrid
    )
