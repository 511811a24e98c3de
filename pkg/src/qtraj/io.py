"""Dataset, trajectory and table I/O, run configuration and coarse-graining.

Records are stored as JSONL (one record per line), ground-truth trajectories
in a JSONL sidecar, tables as CSV with a leading ``#`` metadata line, and
configs/manifests as JSON.  Every format carries ``schema_version``.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence

import numpy as np

from .core import BlochState, CARDINAL_STATES, Drive, PhysicalParams, Trajectory, VoltageRecord
from .simulator import Dataset, SimRegime

SCHEMA_VERSION = 1
CODE_VERSION = "0.1.0"

RECORDS_FILE = "records.jsonl"
TRUTH_FILE = "truth.jsonl"
MANIFEST_FILE = "manifest.json"


class SchemaError(ValueError):
    """File content does not match the expected schema."""


def _check_schema(d: dict, what: str):
    v = d.get("schema_version")
    if v != SCHEMA_VERSION:
        raise SchemaError(f"{what}: schema_version {v!r}, expected {SCHEMA_VERSION}")


# ---------------------------------------------------------------------------
# records and trajectories


def record_to_dict(r: VoltageRecord) -> dict:
    n = r.n_steps
    return {
        "schema_version": SCHEMA_VERSION,
        "id": r.id,
        "regime": r.regime,
        "omega_spec": r.drive.to_dict(),
        "dt": r.dt,
        "t_m": r.t_m,
        "length": len(r),
        "i_samples": r.i[:n].tolist(),
        "q_samples": r.q[:n].tolist(),
        "tomo_axis": r.tomo_axis,
        "tomo_outcome": r.tomo_outcome,
        "init_state": [r.init_state.x, r.init_state.y, r.init_state.z, r.init_state.p],
    }


def record_from_dict(d: dict) -> VoltageRecord:
    _check_schema(d, f"record {d.get('id')}")
    try:
        i = np.asarray(d["i_samples"], dtype=float)
        q = np.asarray(d["q_samples"], dtype=float)
        length = int(d.get("length", len(i)))
        pad = length - len(i)
        if pad < 0:
            raise SchemaError("length shorter than sample list")
        return VoltageRecord(
            i=np.pad(i, (0, pad)), q=np.pad(q, (0, pad)), dt=float(d["dt"]), t_m=float(d["t_m"]),
            init_state=BlochState(*d["init_state"]), tomo_axis=d.get("tomo_axis"),
            tomo_outcome=d.get("tomo_outcome"), drive=Drive.from_dict(d["omega_spec"]),
            id=d.get("id"), regime=d.get("regime"),
        )
    except KeyError as e:
        raise SchemaError(f"record missing field {e}") from None


def trajectory_to_dict(t: Trajectory) -> dict:
    return {"schema_version": SCHEMA_VERSION, "id": t.id, "dt": t.dt, "states": t.states.tolist()}


def trajectory_from_dict(d: dict) -> Trajectory:
    _check_schema(d, f"trajectory {d.get('id')}")
    return Trajectory(np.asarray(d["states"], dtype=float), float(d["dt"]), id=d.get("id"))


def write_jsonl(path, rows: Iterable[dict]):
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, separators=(",", ":")))
            fh.write("\n")


def read_jsonl(path) -> Iterator[dict]:
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"{path}:{n}: {e.msg}") from None


def write_records(path, records: Sequence[VoltageRecord]):
    write_jsonl(path, (record_to_dict(r) for r in records))


def read_records(path) -> List[VoltageRecord]:
    return [record_from_dict(d) for d in read_jsonl(path)]


def write_trajectories(path, trajectories: Iterable[Trajectory]):
    write_jsonl(path, (trajectory_to_dict(t) for t in trajectories))


def read_trajectories(path) -> List[Trajectory]:
    return [trajectory_from_dict(d) for d in read_jsonl(path)]


# ---------------------------------------------------------------------------
# manifests


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def manifest_hash(config: dict, seed: int, code_version: str = CODE_VERSION) -> str:
    payload = canonical_json({"config": config, "seed": int(seed), "code_version": code_version})
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def make_manifest(config: dict, seed: int, stage: str, files: Sequence[str] = (), **extra) -> dict:
    m = {
        "schema_version": SCHEMA_VERSION,
        "stage": stage,
        "code_version": CODE_VERSION,
        "seed": int(seed),
        "config": config,
        "hash": manifest_hash(config, seed),
        "files": list(files),
    }
    m.update(extra)
    return m


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def read_manifest(directory) -> dict:
    p = Path(directory) / MANIFEST_FILE
    if not p.exists():
        raise FileNotFoundError(f"no manifest in {directory}")
    m = read_json(p)
    _check_schema(m, str(p))
    return m


# ---------------------------------------------------------------------------
# datasets


def write_dataset(directory, dataset: Dataset, config: Optional[dict] = None, seed: int = 0) -> dict:
    """Write records, truth sidecar (if any) and manifest; returns the manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_records(d / RECORDS_FILE, dataset.records)
    files = [RECORDS_FILE]
    if dataset.truth:
        write_trajectories(d / TRUTH_FILE, (dataset.truth[r.id] for r in dataset.records if r.id in dataset.truth))
        files.append(TRUTH_FILE)
    extra = {"n_records": len(dataset)}
    if dataset.params is not None:
        extra["params"] = dataset.params.to_dict()
    if dataset.regime is not None:
        extra["regime"] = asdict(dataset.regime)
    m = make_manifest(config or {}, seed, "simulate", files, **extra)
    write_json(d / MANIFEST_FILE, m)
    return m


def read_dataset(directory, require_truth: bool = False) -> Dataset:
    d = Path(directory)
    if not (d / RECORDS_FILE).exists():
        raise FileNotFoundError(f"no {RECORDS_FILE} in {directory} (run simulate first)")
    m = read_manifest(d)
    records = read_records(d / RECORDS_FILE)
    if len(records) != m.get("n_records", len(records)):
        raise SchemaError("record count does not match manifest")
    truth = {}
    if TRUTH_FILE in m.get("files", []):
        if not (d / TRUTH_FILE).exists():
            raise FileNotFoundError(f"manifest lists {TRUTH_FILE} but it is missing")
        truth = {t.id: t for t in read_trajectories(d / TRUTH_FILE)}
    elif require_truth:
        raise FileNotFoundError(f"ground-truth sidecar {TRUTH_FILE} missing in {directory}")
    params = PhysicalParams.from_dict(m["params"]) if "params" in m else None
    regime = SimRegime(**m["regime"]) if "regime" in m else None
    return Dataset(records, truth, params, regime)


# ---------------------------------------------------------------------------
# CSV tables


def write_csv(path, rows: Sequence[dict], manifest: Optional[str] = None):
    """CSV with a ``# schema_version=..`` metadata line; columns from the first row."""
    rows = list(rows)
    cols = list(rows[0].keys()) if rows else []
    for r in rows[1:]:
        cols += [k for k in r if k not in cols]
    with open(path, "w", newline="") as fh:
        meta = f"# schema_version={SCHEMA_VERSION}"
        if manifest:
            meta += f" manifest={manifest}"
        fh.write(meta + "\n")
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.bool_,)):
        return bool(v)
    return v


def _parse(v: str):
    if v == "":
        return None
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    if v in ("True", "False"):
        return v == "True"
    return v


def read_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("#"):
            raise SchemaError(f"{path}: missing metadata line")
        meta = dict(kv.split("=", 1) for kv in first[1:].split())
        if int(meta.get("schema_version", -1)) != SCHEMA_VERSION:
            raise SchemaError(f"{path}: unsupported schema_version")
        return [{k: _parse(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def csv_manifest(path) -> Optional[str]:
    with open(path) as fh:
        first = fh.readline()
    meta = dict(kv.split("=", 1) for kv in first[1:].split())
    return meta.get("manifest")


# ---------------------------------------------------------------------------
# coarse graining


def coarse_grain(record: VoltageRecord, k: int) -> VoltageRecord:
    """Block means of ``k`` samples; ``dt`` becomes ``k * dt``.

    A remainder of fewer than ``k`` samples is dropped with a warning.
    """
    if k <= 0:
        raise ValueError("coarse-graining factor must be positive")
    if k == 1:
        return record
    n = record.n_steps
    m, rem = divmod(n, k)
    if rem:
        warnings.warn(f"dropping {rem} trailing samples of record {record.id}", stacklevel=2)
    i = record.i[: m * k].reshape(m, k).mean(axis=1)
    q = record.q[: m * k].reshape(m, k).mean(axis=1)
    pad = max(len(record) // k - m, 0)
    return replace(record, i=np.pad(i, (0, pad)), q=np.pad(q, (0, pad)), dt=record.dt * k,
                   t_m=m * k * record.dt)


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    """Everything a CLI stage needs; JSON-serialisable."""

    params: PhysicalParams = field(default_factory=PhysicalParams)
    regime: str = "memoryless"
    seed: int = 0
    n: int = 100
    t_m_grid: List[float] = field(default_factory=lambda: [0.2e-6 * k for k in range(1, 21)])
    axes: List[str] = field(default_factory=lambda: ["X", "Y", "Z"])
    init_state: str = "+Z"
    variant: str = "standard"
    hidden_size: int = 32
    num_layers: int = 1
    batch_size: int = 512
    max_epochs: int = 50
    base_lr: float = 1e-4
    max_lr: float = 5e-3
    cycle_len: int = 400
    grid: int = 20
    min_samples: int = 50
    window: Optional[float] = None
    out: str = "out"

    def __post_init__(self):
        if isinstance(self.params, dict):
            self.params = PhysicalParams.from_dict(self.params)
        SimRegime(self.regime)
        if self.init_state not in CARDINAL_STATES:
            raise ValueError(f"unknown init_state {self.init_state!r}")
        if self.variant.lower() not in ("standard", "numerics", "analytics", "lstm"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.n < 1:
            raise ValueError("n must be >= 1")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["params"] = self.params.to_dict()
        d["schema_version"] = SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        d.pop("schema_version", None)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SchemaError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        d = read_json(path)
        if "schema_version" in d:
            _check_schema(d, str(path))
        return cls.from_dict(d)

    def save(self, path):
        write_json(path, self.to_dict())

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("out")
        return manifest_hash(d, self.seed)


def worker_count() -> int:
    """Worker cap from ``TRAJ_THREADS`` (default: all CPUs)."""
    n_cpu = os.cpu_count() or 1
    v = os.environ.get("TRAJ_THREADS")
    if not v:
        return n_cpu
    try:
        n = int(v)
    except ValueError:
        raise ValueError(f"TRAJ_THREADS must be an integer, got {v!r}") from None
    if n < 1:
        raise ValueError("TRAJ_THREADS must be >= 1")
    return min(n, n_cpu)
