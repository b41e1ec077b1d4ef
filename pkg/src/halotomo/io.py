"""Plain-text file formats for events, clouds, ground truth and maps.

Every file starts with ``#``-prefixed header lines: a format tag, free
``key: value`` metadata (JSON-encoded values) and a ``units`` line; the last
header line names the columns.  Rows are whitespace separated.  Floats are
written with 17 significant digits so files round-trip exactly and identical
inputs give byte-identical files.
"""

from __future__ import annotations

import hashlib
import io
import json
import warnings
from pathlib import Path

import numpy as np

from .estimate import AngularMap
from .reconstruct import HaloCloud
from .simulate import Events, Shot


class FormatError(OSError):
    """A file exists but does not have the expected layout."""


EVENT_COLUMNS = ("shot_id", "t_star", "x", "y", "spin")
EVENT_UNITS = ("-", "s", "m", "m", "-")
CLOUD_COLUMNS = ("shot_id", "kx", "ky", "kz", "k_norm", "spin")
CLOUD_UNITS = ("-", "-", "-", "-", "-", "-")
TRUTH_COLUMNS = ("shot_id", "pair_id", "x0", "y0", "z0", "vx", "vy", "vz", "spin", "phase")
TRUTH_UNITS = ("-", "-", "m", "m", "m", "m/s", "m/s", "m/s", "-", "rad")
MAP_COLUMNS = ("bin", "theta", "phi", "value", "stderr", "n_atoms", "n_shots", "flags")

_INT_COLS = {"shot_id", "pair_id", "spin", "bin", "n_shots"}


def _fmt(col):
    return "%d" if col in _INT_COLS else "%.17g"


def _write_table(path, kind: str, columns, units, data: dict, meta: dict | None = None) -> Path:
    path = Path(path)
    buf = io.StringIO()
    buf.write(f"# halotomo {kind} v1\n")
    for k, v in (meta or {}).items():
        buf.write(f"# {k}: {json.dumps(v, sort_keys=True)}\n")
    buf.write("# units: " + " ".join(units) + "\n")
    buf.write("# " + " ".join(columns) + "\n")
    n = len(data[columns[0]]) if columns else 0
    if n:
        arrays = [np.asarray(data[c]) for c in columns]
        fmt = " ".join(_fmt(c) for c in columns)
        np.savetxt(buf, np.column_stack([a.astype(np.float64) for a in arrays]), fmt=fmt)
    path.write_text(buf.getvalue())
    return path


def read_header(path) -> tuple[str, dict, list[str]]:
    kind, meta, columns = None, {}, None
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            body = line[1:].strip()
            if body.startswith("halotomo "):
                kind = body.split()[1]
            elif body.startswith("units:"):
                meta["units"] = body[6:].split()
            elif ":" in body and columns is None and not body.startswith(("shot_id", "bin")):
                k, v = body.split(":", 1)
                try:
                    meta[k.strip()] = json.loads(v)
                except json.JSONDecodeError as exc:
                    raise FormatError(f"{path}: bad header value for {k!r}") from exc
            else:
                columns = body.split()
    if kind is None or columns is None:
        raise FormatError(f"{path}: missing halotomo header")
    return kind, meta, columns


def _read_table(path, kind: str, columns):
    found, meta, cols = read_header(path)
    if found != kind:
        raise FormatError(f"{path}: expected a {kind} file, found {found}")
    if tuple(cols) != tuple(columns):
        raise FormatError(f"{path}: unexpected columns {cols}")
    try:
        with warnings.catch_warnings():
            warnings.filterwarnings("ignore", "loadtxt: input contained no data")
            arr = np.loadtxt(path, comments="#", ndmin=2)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if arr.size == 0:
        arr = np.zeros((0, len(columns)))
    if arr.shape[1] != len(columns):
        raise FormatError(f"{path}: expected {len(columns)} columns, got {arr.shape[1]}")
    return {c: arr[:, i] for i, c in enumerate(columns)}, meta


def write_events(path, events: Events, meta: dict | None = None) -> Path:
    data = {c: getattr(events, c) for c in EVENT_COLUMNS}
    return _write_table(path, "events", EVENT_COLUMNS, EVENT_UNITS, data, meta)


def read_events(path) -> tuple[Events, dict]:
    d, meta = _read_table(path, "events", EVENT_COLUMNS)
    ev = Events(d["shot_id"].astype(np.int64), d["t_star"], d["x"], d["y"], d["spin"].astype(np.int8))
    return ev, meta


def write_truth(path, shots: list[Shot], meta: dict | None = None) -> Path:
    cols = {c: [] for c in TRUTH_COLUMNS}
    for s in shots:
        n = s.n_atoms
        cols["shot_id"].append(np.full(n, s.shot_id))
        cols["pair_id"].append(s.pair_id)
        for i, c in enumerate(("x0", "y0", "z0")):
            cols[c].append(s.source_position[:, i])
        for i, c in enumerate(("vx", "vy", "vz")):
            cols[c].append(s.velocity_cm[:, i])
        cols["spin"].append(s.spin)
        cols["phase"].append(s.truth_phi)
    data = {c: np.concatenate(v) if v else np.zeros(0) for c, v in cols.items()}
    return _write_table(path, "truth", TRUTH_COLUMNS, TRUTH_UNITS, data, meta)


def write_cloud(path, cloud: HaloCloud, meta: dict | None = None) -> Path:
    data = {"shot_id": cloud.shot_id, "kx": cloud.k_hat[:, 0], "ky": cloud.k_hat[:, 1], "kz": cloud.k_hat[:, 2],
            "k_norm": cloud.k_norm, "spin": cloud.spin}
    return _write_table(path, "cloud", CLOUD_COLUMNS, CLOUD_UNITS, data, meta)


def read_cloud(path) -> tuple[HaloCloud, dict]:
    d, meta = _read_table(path, "cloud", CLOUD_COLUMNS)
    k_hat = np.column_stack([d["kx"], d["ky"], d["kz"]]) if len(d["kx"]) else np.zeros((0, 3))
    return HaloCloud(d["shot_id"].astype(np.int64), k_hat, d["k_norm"], d["spin"].astype(np.int8)), meta


def write_map(path, amap: AngularMap, meta: dict | None = None) -> Path:
    buf = io.StringIO()
    buf.write("# halotomo map v1\n")
    m = {"quantity": amap.quantity, "alpha": amap.grid.alpha, "radial_window": list(amap.grid.radial_window),
         "polar_cap_rad": amap.grid.phi_max, **(meta or {})}
    for k, v in m.items():
        buf.write(f"# {k}: {json.dumps(v, sort_keys=True)}\n")
    buf.write(f"# units: - rad rad {amap.unit} {amap.unit} - - -\n")
    buf.write("# " + " ".join(MAP_COLUMNS) + "\n")
    for b in range(len(amap.grid)):
        flags = ",".join(amap.flags[b]) or "-"
        buf.write(f"{b:d} {amap.theta[b]:.17g} {amap.phi[b]:.17g} {amap.value[b]:.17g} "
                  f"{amap.stderr[b]:.17g} {int(amap.n_atoms[b]):d} {amap.n_shots:d} {flags}\n")
    Path(path).write_text(buf.getvalue())
    return Path(path)


def read_map(path) -> tuple[dict, dict]:
    kind, meta, cols = read_header(path)
    if kind != "map" or tuple(cols) != MAP_COLUMNS:
        raise FormatError(f"{path}: not a map file")
    rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    out = {c: [] for c in MAP_COLUMNS}
    for r in rows:
        if len(r) != len(MAP_COLUMNS):
            raise FormatError(f"{path}: malformed row {r}")
        for c, v in zip(MAP_COLUMNS, r):
            if c == "flags":
                out[c].append([] if v == "-" else v.split(","))
            elif c in _INT_COLS or c == "n_atoms":
                out[c].append(int(v))
            else:
                out[c].append(float(v))
    return {c: (np.array(v) if c != "flags" else v) for c, v in out.items()}, meta


def write_rows(path, columns, units, rows, meta: dict | None = None) -> Path:
    """Generic numeric table (resolution and bounds outputs)."""
    buf = io.StringIO()
    buf.write("# halotomo table v1\n")
    for k, v in (meta or {}).items():
        buf.write(f"# {k}: {json.dumps(v, sort_keys=True)}\n")
    buf.write("# units: " + " ".join(units) + "\n")
    buf.write("# " + " ".join(columns) + "\n")
    for r in rows:
        buf.write(" ".join(f"{x:.17g}" if isinstance(x, float) else str(x) for x in r) + "\n")
    Path(path).write_text(buf.getvalue())
    return Path(path)


def _json_default(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    raise TypeError(f"cannot serialise {type(x).__name__}")


def _finite(x):
    """Replace non-finite floats with strings so the document stays strict JSON."""
    if isinstance(x, dict):
        return {k: _finite(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_finite(v) for v in x]
    if isinstance(x, np.ndarray):
        return _finite(x.tolist())
    if isinstance(x, (float, np.floating)) and not np.isfinite(x):
        return "nan" if np.isnan(x) else ("inf" if x > 0 else "-inf")
    return x


def dumps_json(doc) -> str:
    return json.dumps(_finite(doc), sort_keys=True, indent=2, default=_json_default) + "\n"


def write_json(path, doc) -> Path:
    Path(path).write_text(dumps_json(doc))
    return Path(path)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
