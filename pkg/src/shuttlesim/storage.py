"""On-disk formats: binary field container, config files, CSV tables,
Green's-function cache and run checkpoints.

The field container ("QSF1") is a fixed 75-byte little-endian header
followed by the raw row-major x-fastest payload:

    magic      4s   b"QSF1"
    version    u16  1
    dtype      u8   1 = real64, 2 = complex128 (interleaved re, im)
    nx ny nz   u32 x3
    dx dy dz   f64 x3  (nm)
    origin     f64 x3  (nm)
    unit       8s   ASCII, NUL padded

Every write in this module is atomic (temp file + rename), so a killed
process never leaves a partial file at the final path. All numeric CSV
output uses 17 significant digits, which round-trips doubles exactly.
"""

from __future__ import annotations

import io
import json
import hashlib
import os
import re
import shutil
import struct
import tempfile
import warnings
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .grid import GridSpec, ScalarField, WaveFunction

MAGIC = b"QSF1"
VERSION = 1
_HEADER = struct.Struct("<4sHB3I3d3d8s")
DTYPE_REAL = 1
DTYPE_COMPLEX = 2


class FieldFormatError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def _atomic_write(path: str, data: bytes):
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


FieldContent = Union[ScalarField, WaveFunction]


def field_bytes(content: FieldContent) -> bytes:
    if isinstance(content, WaveFunction):
        dtype, unit, values = DTYPE_COMPLEX, "psi", content.amplitudes
    else:
        dtype, unit, values = DTYPE_REAL, content.unit, content.values
    unit_b = unit.encode("ascii")
    if len(unit_b) > 8:
        raise FieldFormatError(f"unit tag {unit!r} exceeds 8 bytes")
    spec = content.spec
    header = _HEADER.pack(MAGIC, VERSION, dtype, spec.nx, spec.ny, spec.nz,
                          spec.dx, spec.dy, spec.dz, *spec.origin,
                          unit_b.ljust(8, b"\x00"))
    payload = values.astype("<c16" if dtype == DTYPE_COMPLEX else "<f8",
                            copy=False).tobytes()
    return header + payload


def write_field(path: str, content: FieldContent):
    _atomic_write(path, field_bytes(content))


def field_from_bytes(data: bytes,
                     bcs=("periodic", "periodic", "periodic")) -> FieldContent:
    if len(data) < _HEADER.size:
        raise FieldFormatError("file too short for a QSF header")
    (magic, version, dtype, nx, ny, nz, dx, dy, dz,
     ox, oy, oz, unit_b) = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FieldFormatError(
            f"bad magic {magic!r}: not a QSF1 field file or unsupported version")
    if version != VERSION:
        raise FieldFormatError(f"unsupported format version {version}")
    if dtype not in (DTYPE_REAL, DTYPE_COMPLEX):
        raise FieldFormatError(f"unknown dtype code {dtype}")
    count = nx * ny * nz
    itemsize = 16 if dtype == DTYPE_COMPLEX else 8
    expected = _HEADER.size + count * itemsize
    if len(data) != expected:
        raise FieldFormatError(
            f"payload size mismatch: file has {len(data) - _HEADER.size} bytes, "
            f"header implies {count * itemsize}")
    spec = GridSpec(nx=nx, ny=ny, nz=nz, dx=dx, dy=dy, dz=dz,
                    origin=(ox, oy, oz), bc_x=bcs[0], bc_y=bcs[1], bc_z=bcs[2])
    buf = np.frombuffer(data, dtype="<c16" if dtype == DTYPE_COMPLEX else "<f8",
                        offset=_HEADER.size)
    unit = unit_b.rstrip(b"\x00").decode("ascii")
    if dtype == DTYPE_COMPLEX:
        return WaveFunction(spec, buf.reshape(spec.shape))
    return ScalarField(spec, buf.reshape(spec.shape), unit=unit)


def read_field(path: str, bcs=("periodic", "periodic", "periodic")) -> FieldContent:
    with open(path, "rb") as f:
        return field_from_bytes(f.read(), bcs)


# --- result tables ---------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_result_csv(path: str, result) -> None:
    n = result.n_levels
    buf = io.StringIO()
    buf.write(f"# levels={n}\n")
    cols = ["t_ps", "fidelity", "ground_subspace_fidelity", "loss_prob",
            "leaked_norm", "mean_x_nm", "mean_y_nm", "mean_z_nm"]
    cols += [f"e{i}_meV" for i in range(n)]
    buf.write(",".join(cols) + "\n")
    for i in range(len(result.t)):
        row = [result.t[i], result.fidelity[i], result.subspace_fidelity[i],
               result.loss[i], result.leaked[i], result.mean_x[i],
               result.mean_y[i], result.mean_z[i]]
        row += list(result.energies[i])
        buf.write(",".join(_fmt(v) for v in row) + "\n")
    _atomic_write(path, buf.getvalue().encode())


def read_result_csv(path: str):
    from .analysis import ShuttleResult

    with open(path) as f:
        first = f.readline()
        m = re.match(r"#\s*levels=(\d+)", first)
        if not m:
            raise FieldFormatError("result table is missing the levels preamble")
        n = int(m.group(1))
        header = f.readline().strip().split(",")
        rows = [line.strip().split(",") for line in f if line.strip()]
    if len(header) != 8 + n:
        raise FieldFormatError("result table has an unexpected column count")
    data = np.array([[float(v) for v in r] for r in rows])
    return ShuttleResult(
        t=data[:, 0], fidelity=data[:, 1], subspace_fidelity=data[:, 2],
        loss=data[:, 3], leaked=data[:, 4], mean_x=data[:, 5],
        mean_y=data[:, 6], mean_z=data[:, 7], energies=data[:, 8:8 + n])


# --- scenario configuration ------------------------------------------------

DEFAULTS = {
    "device": {
        "d": 140.0,
        "n_periods": 2,
        "gate_width": 35.0,
        "channel_gap": 60.0,
        "rail_width": 30.0,
        "metal_thickness": 3.0,
        "eps_si": 11.7,
        "eps_ox": 3.9,
        "misalignment": {"width_frac": 0.0, "center_frac": 0.0, "seed": 0},
    },
    "surface": {"rms": 0.0, "hurst": 0.3, "seed": 1, "q_min": 0.0, "q_max": 0.0},
    "drive": {"V_c": 500.0, "V_s": -1500.0, "v": 20.0},
    "grid": {
        "counts": [140, 60, 30],
        "spacings": [1.0, 1.0, 1.0],
        "origin": [0.0, -30.0, -20.0],
        "pad_y": 30.0,
        "pad_z": 30.0,
        "poisson_omega": 1.8,
        "poisson_tol": 1e-7,
        "poisson_max_sweeps": 200000,
        "poisson_ordering": "red-black",
    },
    "evolver": {
        "kind": "projection",
        "dt": 1.0,
        "n_states": 10,
        "lanczos_tol": 1e-8,
        "lanczos_max_matvecs": 6000,
        "lanczos_m_inner": 24,
        "split_dt": 2.5e-4,
        "refresh_every": 1,
        "renormalize": False,
        "degeneracy_window": 1e-6,
        "seed": 0,
        "reduced": True,
        "reduced_anchors": 16,
        "reduced_max_anchors": 64,
        "reduced_track": 14,
        "reduced_residual_tol": 1e-3,
        "reduced_validate": 8,
    },
    "outputs": {
        "sample_interval": 10.0,
        "directory": "out",
        "snapshot_times": [],
        "loss_halfwidth": 35.0,
    },
    "sweep": {"workers": 1, "axes": {}},
}

_DEFECT_KEYS = {"x": float, "y": float, "z": float, "sign": int}


def _merge(defaults, user, path=""):
    out = {}
    for key, dval in defaults.items():
        out[key] = dval if not isinstance(dval, dict) else dict(dval)
    for key, uval in user.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {here}")
        dval = defaults[key]
        if isinstance(dval, dict) and key != "axes":
            if not isinstance(uval, dict):
                raise ConfigError(f"{here} must be a section")
            out[key] = _merge(dval, uval, here)
        else:
            out[key] = _check_scalar(here, dval, uval)
    return out


def _check_scalar(path, dval, uval):
    if path == "sweep.axes":
        if not isinstance(uval, dict):
            raise ConfigError("sweep.axes must map config keys to value lists")
        for k, v in uval.items():
            if not isinstance(v, list) or not v:
                raise ConfigError(f"sweep axis {k} must be a non-empty list")
        return {k: list(v) for k, v in uval.items()}
    if isinstance(dval, bool):
        if not isinstance(uval, bool):
            raise ConfigError(f"{path} must be a boolean")
        return uval
    if isinstance(dval, int) and not isinstance(dval, bool):
        if isinstance(uval, bool) or not isinstance(uval, int):
            raise ConfigError(f"{path} must be an integer")
        return uval
    if isinstance(dval, float):
        if isinstance(uval, bool) or not isinstance(uval, (int, float)):
            raise ConfigError(f"{path} must be a number")
        return float(uval)
    if isinstance(dval, str):
        if not isinstance(uval, str):
            raise ConfigError(f"{path} must be a string")
        return uval
    if isinstance(dval, list):
        if not isinstance(uval, list):
            raise ConfigError(f"{path} must be a list")
        if path in ("grid.counts",):
            if len(uval) != 3 or not all(
                    isinstance(v, int) and not isinstance(v, bool) for v in uval):
                raise ConfigError(f"{path} must be three integers")
            return list(uval)
        if path in ("grid.spacings", "grid.origin"):
            if len(uval) != 3 or not all(
                    isinstance(v, (int, float)) and not isinstance(v, bool)
                    for v in uval):
                raise ConfigError(f"{path} must be three numbers")
            return [float(v) for v in uval]
        return [float(v) for v in uval]  # snapshot_times and similar
    raise ConfigError(f"{path}: unsupported config entry")


def _check_defects(user_defects):
    out = []
    for i, d in enumerate(user_defects):
        if not isinstance(d, dict):
            raise ConfigError(f"defects[{i}] must be a table")
        for key in d:
            if key not in _DEFECT_KEYS:
                raise ConfigError(f"unknown config key: defects[{i}].{key}")
        for key in _DEFECT_KEYS:
            if key not in d:
                raise ConfigError(f"defects[{i}] is missing {key!r}")
        if d["sign"] not in (-1, 1):
            raise ConfigError(f"defects[{i}].sign must be +1 or -1")
        out.append({"x": float(d["x"]), "y": float(d["y"]),
                    "z": float(d["z"]), "sign": int(d["sign"])})
    return out


@dataclass(frozen=True)
class ScenarioConfig:
    """Fully defaulted, validated scenario parameters plus a stable hash."""

    data: dict
    content_hash: str

    def __getitem__(self, dotted: str):
        node = self.data
        for part in dotted.split("."):
            node = node[part]
        return node

    def with_value(self, dotted: str, value) -> "ScenarioConfig":
        """Copy with one scalar overridden (validated against the schema)."""
        parts = dotted.split(".")
        data = json.loads(json.dumps(self.data))
        node = data
        for p in parts[:-1]:
            if p not in node:
                raise ConfigError(f"unknown config key: {dotted}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key: {dotted}")
        node[parts[-1]] = value
        return config_from_dict(_strip_defaults(data))

    def canonical_dump(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=2)


def _strip_defaults(full):
    # full dicts revalidate cleanly: they only contain known keys
    return full


def config_from_dict(user: dict) -> ScenarioConfig:
    user = dict(user)
    defects = user.pop("defects", [])
    if not isinstance(defects, list):
        raise ConfigError("defects must be an array of tables")
    data = _merge(DEFAULTS, user)
    data["defects"] = _check_defects(defects)
    if data["evolver"]["kind"] not in ("projection", "split"):
        raise ConfigError("evolver.kind must be 'projection' or 'split'")
    if data["grid"]["poisson_ordering"] not in ("red-black", "lexicographic"):
        raise ConfigError("grid.poisson_ordering must be 'red-black' or "
                          "'lexicographic'")
    blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
    digest = hashlib.sha256(blob.encode()).hexdigest()
    return ScenarioConfig(data=data, content_hash=digest)


def _named_duplicate(exc: tomllib.TOMLDecodeError, text: str) -> str:
    m = re.search(r"line (\d+)", str(exc))
    if m:
        line = text.splitlines()[int(m.group(1)) - 1].strip()
        return f"{exc} (offending line: {line!r})"
    return str(exc)


def load_config(path: Optional[str]) -> ScenarioConfig:
    """Parse a TOML scenario file; an empty or absent path gives defaults."""
    if path is None:
        return config_from_dict({})
    with open(path, "rb") as f:
        text = f.read().decode("utf-8")
    try:
        user = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error: {_named_duplicate(exc, text)}") \
            from exc
    return config_from_dict(user)


def default_cache_dir(config: Optional[ScenarioConfig] = None) -> str:
    env = os.environ.get("SHUTTLESIM_CACHE")
    if env:
        return env
    base = config["outputs.directory"] if config is not None else "out"
    return os.path.join(base, "greens-cache")


# --- Green's-function cache -------------------------------------------------

def greens_cache_store(gset, cache_dir: str) -> str:
    """Write a GreensSet under its content hash; first writer wins."""
    final = os.path.join(cache_dir, gset.content_hash)
    if os.path.isdir(final):
        return final
    os.makedirs(cache_dir, exist_ok=True)
    tmp = tempfile.mkdtemp(dir=cache_dir, prefix=f".{gset.content_hash[:12]}-")
    try:
        meta = {
            "content_hash": gset.content_hash,
            "gate_ids": list(gset.gate_ids),
            "defect_sites": [list(s) for s in gset.defect_sites],
            "solve_meta": gset.solve_meta,
            "version": 1,
        }
        with open(os.path.join(tmp, "meta.json"), "w") as f:
            json.dump(meta, f, indent=1)
        for gid in gset.gate_ids:
            write_field(os.path.join(tmp, f"gate_{gid}.qsf"),
                        gset.gate_fields[gid])
        for j, fld in enumerate(gset.defect_fields):
            write_field(os.path.join(tmp, f"defect_{j}.qsf"), fld)
        try:
            os.rename(tmp, final)
        except OSError:
            shutil.rmtree(tmp, ignore_errors=True)  # concurrent writer won
        return final
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def _quarantine(entry: str, reason: str):
    bad = f"{entry}.bad-{os.getpid()}"
    try:
        os.rename(entry, bad)
    except OSError:
        pass
    warnings.warn(f"quarantined corrupt Green's cache entry {entry}: {reason}",
                  stacklevel=2)


def greens_cache_lookup(content_hash: str, cache_dir: str):
    """Return the cached GreensSet or None; corrupt entries are quarantined."""
    from .electrostatics import GreensSet

    entry = os.path.join(cache_dir, content_hash)
    if not os.path.isdir(entry):
        return None
    try:
        with open(os.path.join(entry, "meta.json")) as f:
            meta = json.load(f)
        if meta.get("content_hash") != content_hash:
            raise FieldFormatError("hash mismatch in metadata")
        if not meta.get("solve_meta"):
            raise FieldFormatError("missing solver residual metadata")
        gate_ids = tuple(meta["gate_ids"])
        bcs = ("periodic", "neumann", "neumann")
        gate_fields = {}
        quantum = None
        for gid in gate_ids:
            fld = read_field(os.path.join(entry, f"gate_{gid}.qsf"), bcs)
            if not isinstance(fld, ScalarField):
                raise FieldFormatError(f"gate {gid} entry is not a real field")
            gate_fields[gid] = fld
            quantum = fld.spec
        defect_sites = tuple(tuple(s) for s in meta["defect_sites"])
        defect_fields = []
        for j in range(len(defect_sites)):
            fld = read_field(os.path.join(entry, f"defect_{j}.qsf"), bcs)
            if not isinstance(fld, ScalarField):
                raise FieldFormatError(f"defect {j} entry is not a real field")
            defect_fields.append(fld)
        if quantum is None:
            raise FieldFormatError("cache entry holds no gate fields")
        return GreensSet(quantum=quantum, gate_ids=gate_ids,
                         gate_fields=gate_fields, defect_sites=defect_sites,
                         defect_fields=tuple(defect_fields),
                         solve_meta=meta["solve_meta"],
                         content_hash=content_hash)
    except (OSError, ValueError, KeyError) as exc:
        _quarantine(entry, str(exc))
        return None


# --- run checkpoints ---------------------------------------------------------

@dataclass(frozen=True)
class CheckpointData:
    scenario_hash: str
    t: float
    step: int
    c: np.ndarray
    leaked: float
    energies: np.ndarray
    basis: np.ndarray  # (n, nz, ny, nx)
    psi: np.ndarray
    prev_xc: Optional[float]
    prev_mean_x: Optional[float]
    extra: Optional[dict] = None


def save_checkpoint(directory: str, scenario_hash: str, t: float, step: int,
                    c, eig, prev_xc=None, prev_mean_x=None,
                    extra: Optional[dict] = None) -> str:
    """Write state + eigenbasis so a projection run can resume bit-exactly."""
    os.makedirs(directory, exist_ok=True)
    tmp = tempfile.mkdtemp(dir=directory, prefix=".chk-")
    final = os.path.join(directory, f"checkpoint-step{step:08d}")
    meta = {
        "scenario_hash": scenario_hash,
        "t": t,
        "step": step,
        "leaked": c.leaked_norm,
        "c_re": [float(v) for v in c.c.real],
        "c_im": [float(v) for v in c.c.imag],
        "energies": [float(e) for e in eig.energies],
        "prev_xc": prev_xc,
        "prev_mean_x": prev_mean_x,
        "n_states": eig.n_states,
        "extra": extra,
    }
    try:
        with open(os.path.join(tmp, "meta.json"), "w") as f:
            json.dump(meta, f)
        states = eig.states.reshape(eig.n_states, -1)
        psi = (c.c @ states).reshape(eig.spec.shape)
        write_field(os.path.join(tmp, "psi.qsf"),
                    WaveFunction(eig.spec, psi))
        for n in range(eig.n_states):
            write_field(os.path.join(tmp, f"basis_{n:02d}.qsf"),
                        eig.wavefunction(n))
        if os.path.isdir(final):
            shutil.rmtree(final)
        os.rename(tmp, final)
        return final
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def load_checkpoint(path: str, grid: GridSpec) -> CheckpointData:
    with open(os.path.join(path, "meta.json")) as f:
        meta = json.load(f)
    n = meta["n_states"]
    basis = np.empty((n,) + grid.shape, dtype=np.complex128)
    for i in range(n):
        fld = read_field(os.path.join(path, f"basis_{i:02d}.qsf"))
        basis[i] = fld.amplitudes
    psi = read_field(os.path.join(path, "psi.qsf")).amplitudes
    c = np.array(meta["c_re"]) + 1j * np.array(meta["c_im"])
    return CheckpointData(
        scenario_hash=meta["scenario_hash"], t=meta["t"], step=meta["step"],
        c=c, leaked=meta["leaked"], energies=np.array(meta["energies"]),
        basis=basis, psi=psi, prev_xc=meta["prev_xc"],
        prev_mean_x=meta["prev_mean_x"], extra=meta.get("extra"))
