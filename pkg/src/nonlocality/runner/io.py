"""CSV emission and binary checkpoints.

Checkpoint layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"NLCK"
    4       1     format version (currently 1)
    5       1     kind: 1 = WaveFunction2D, 2 = TdqmcEnsemble
    6       4     uint32 header length H
    10      H     UTF-8 JSON header (sorted keys): grid, time, mode, array table, RNG state
    10+H    ...   arrays in header order, row-major, '<f8' / '<c16' / '<i8'
    end-32  32    SHA-256 of every preceding byte

A mismatched version, kind or checksum raises CheckpointError before any
state is built.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from ..model import Grid1D, Grid2D
from ..spectral2d import WaveFunction2D
from ..tdqmc import TdqmcEnsemble, WalkerNoise

MAGIC = b"NLCK"
VERSION = 1
KIND_WAVEFUNCTION = 1
KIND_ENSEMBLE = 2
_DTYPES = {"f8": "<f8", "c16": "<c16", "i8": "<i8"}


class CheckpointError(IOError):
    pass


class OutputExistsError(FileExistsError):
    pass


# -- CSV ----------------------------------------------------------------------


def _prepare(path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and not force:
        raise OutputExistsError(f"{path} exists; pass force=True (--force) to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def write_csv(path, header: list[str], columns, force: bool = False) -> Path:
    cols = [np.asarray(c, dtype=float).reshape(-1) for c in columns]
    if not cols or len(cols[0]) == 0:
        raise ValueError("refusing to write an empty series")
    if len(header) != len(cols) or len({len(c) for c in cols}) != 1:
        raise ValueError("header and columns do not line up")
    path = _prepare(path, force)
    data = np.column_stack(cols)
    np.savetxt(path, data, delimiter=",", header=",".join(header), comments="", fmt="%.12g")
    return path


def read_csv(path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data


def emit_plot_data(series, path, force: bool = False, gnuplot: bool = False) -> Path:
    """Write a DipoleSeries, TrajectorySet, EntropySeries, SweepTable or (header, columns) pair as CSV.

    With ``gnuplot=True`` a small ``.gp`` script plotting every column against
    the first is written next to the CSV.
    """
    header, columns = series_columns(series)
    out = write_csv(path, header, columns, force)
    if gnuplot:
        gp = _prepare(out.with_suffix(".gp"), force)
        lines = ["set datafile separator ','", "set key autotitle columnhead"]
        plots = [f"'{out.name}' using 1:{c + 1} with lines" for c in range(1, len(header))]
        lines.append("plot " + ", \\\n     ".join(plots))
        gp.write_text("\n".join(lines) + "\n")
    return out


def series_columns(series) -> tuple[list[str], list]:
    from ..analysis import SweepTable
    from ..entanglement import EntropySeries
    from ..spectral2d import DipoleSeries, TrajectorySet

    if isinstance(series, DipoleSeries):
        n = series.dipoles.shape[1]
        return ["t"] + [f"d{i + 1}" for i in range(n)], [series.times] + [series.dipoles[:, i] for i in range(n)]
    if isinstance(series, TrajectorySet):
        header, cols = ["t"], [series.times]
        for k in range(series.n_trajectories):
            for i in range(series.positions.shape[2]):
                header.append(f"traj{k + 1}_x{i + 1}")
                cols.append(series.positions[:, k, i])
        return header, cols
    if isinstance(series, EntropySeries):
        header, cols = ["t"], [series.times]
        for label, vals in series.values.items():
            header.append(label)
            cols.append(vals)
        return header, cols
    if isinstance(series, SweepTable):
        r = series.rows
        return (
            ["sigma", "E", "E_stderr", "seed", "M", "converged", "E1", "S"],
            [
                [x.sigma for x in r],
                [x.energy for x in r],
                [x.stderr for x in r],
                [x.seed for x in r],
                [x.M for x in r],
                [float(x.converged) for x in r],
                [x.E1 for x in r],
                [x.entropy for x in r],
            ],
        )
    if isinstance(series, tuple) and len(series) == 2:
        return list(series[0]), list(series[1])
    raise TypeError(f"cannot emit {type(series).__name__}")


def write_summary(path, values: dict, force: bool = False) -> Path:
    """Flat ``key = value`` summary file."""
    path = _prepare(path, force)
    lines = [f"{k} = {_fmt(v)}" for k, v in values.items()]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_summary(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            v = v.strip()
            try:
                out[k.strip()] = float(v)
            except ValueError:
                out[k.strip()] = v
    return out


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


# -- checkpoints --------------------------------------------------------------


def _grid1d(g: Grid1D) -> dict:
    return {"n_points": int(g.n_points), "span": float(g.span)}


def _pack(kind: int, header: dict, arrays: list[tuple[str, np.ndarray]]) -> bytes:
    table = []
    blobs = []
    for name, arr in arrays:
        code = {"f": "f8", "c": "c16", "i": "i8", "b": "i8"}[arr.dtype.kind]
        a = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        table.append([name, code, list(a.shape)])
        blobs.append(a.tobytes())
    header = dict(header, arrays=table)
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<BBI", VERSION, kind, len(hbytes)) + hbytes + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def _unpack(data: bytes, expect_kind: int) -> tuple[dict, dict]:
    if len(data) < 42 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch")
    version, kind, hlen = struct.unpack("<BBI", body[4:10])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if kind != expect_kind:
        raise CheckpointError(f"checkpoint kind {kind}, expected {expect_kind}")
    header = json.loads(body[10 : 10 + hlen].decode())
    pos = 10 + hlen
    arrays = {}
    for name, code, shape in header["arrays"]:
        dt = np.dtype(_DTYPES[code])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * dt.itemsize
        arrays[name] = np.frombuffer(body[pos : pos + nbytes], dtype=dt).reshape(shape).copy()
        pos += nbytes
    if pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return header, arrays


def _write_atomic(path, payload: bytes, force: bool) -> Path:
    path = _prepare(path, force)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)
    return path


def save_wavefunction(psi: WaveFunction2D, path, mode: str = "real", force: bool = True) -> Path:
    header = {
        "grid": [_grid1d(psi.grid.axis1), _grid1d(psi.grid.axis2)],
        "time": float(psi.time),
        "mode": mode,
    }
    return _write_atomic(path, _pack(KIND_WAVEFUNCTION, header, [("amplitudes", psi.amplitudes)]), force)


def load_wavefunction(path) -> tuple[WaveFunction2D, str]:
    header, arrays = _unpack(Path(path).read_bytes(), KIND_WAVEFUNCTION)
    g1, g2 = (Grid1D(g["n_points"], g["span"]) for g in header["grid"])
    return WaveFunction2D(Grid2D(g1, g2), arrays["amplitudes"], header["time"]), header["mode"]


def save_ensemble(ens: TdqmcEnsemble, path, force: bool = True) -> Path:
    header = {
        "grid": _grid1d(ens.grid),
        "n_electrons": ens.n_electrons,
        "n_walkers": ens.n_walkers,
        "sigma": [float(s) for s in ens.sigma],
        "time": float(ens.time),
        "noise": ens.noise.get_state() if ens.noise is not None else None,
    }
    arrays = [("walkers", ens.walkers), ("waves", ens.waves), ("exit_flags", ens.exit_flags.astype(np.int64))]
    if ens.noise is not None:
        arrays.append(("noise_buffer", ens.noise.buffer()))
    return _write_atomic(path, _pack(KIND_ENSEMBLE, header, arrays), force)


def load_ensemble(path) -> TdqmcEnsemble:
    header, arrays = _unpack(Path(path).read_bytes(), KIND_ENSEMBLE)
    noise = None
    if header["noise"] is not None:
        noise = WalkerNoise.from_state(header["noise"], arrays["noise_buffer"])
    return TdqmcEnsemble(
        Grid1D(header["grid"]["n_points"], header["grid"]["span"]),
        arrays["waves"],
        arrays["walkers"],
        np.array(header["sigma"]),
        header["time"],
        noise,
        arrays["exit_flags"].astype(int),
    )


def checkpoint_save(state, path, force: bool = True) -> Path:
    if isinstance(state, WaveFunction2D):
        return save_wavefunction(state, path, force=force)
    if isinstance(state, TdqmcEnsemble):
        return save_ensemble(state, path, force=force)
    raise TypeError(f"cannot checkpoint {type(state).__name__}")


def checkpoint_load(path):
    data = Path(path).read_bytes()
    if len(data) < 6 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    if data[5] == KIND_WAVEFUNCTION:
        return load_wavefunction(path)[0]
    if data[5] == KIND_ENSEMBLE:
        return load_ensemble(path)
    raise CheckpointError(f"unknown checkpoint kind {data[5]}")
