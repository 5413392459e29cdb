"""Landmark files, study manifests and result bundles."""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInput, ParseError
from .preshape import LandmarkConfiguration

SCHEMA_VERSION = 1


def parse_landmark_file(path) -> LandmarkConfiguration:
    """Read one landmark per line, fields separated by whitespace or commas.

    Blank lines and text after ``#`` are ignored.  The dimension is taken
    from the first data line.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ParseError("file not found", path=str(path)) from None
    except UnicodeDecodeError as exc:
        raise ParseError(f"not UTF-8 text ({exc.reason})", path=str(path)) from None
    rows = []
    m = None
    last = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.replace(",", " ").split()
        try:
            vals = [float(f) for f in fields]
        except ValueError:
            raise ParseError(f"non-numeric field in {line!r}", line=lineno, path=str(path)) from None
        if not all(math.isfinite(v) for v in vals):
            raise ParseError("non-finite coordinate", line=lineno, path=str(path))
        if m is None:
            m = len(vals)
        elif len(vals) != m:
            raise ParseError(f"expected {m} fields, got {len(vals)}", line=lineno, path=str(path))
        rows.append(vals)
        last = lineno
    if not rows:
        raise ParseError("no landmarks", path=str(path))
    if len(rows) < m + 1:
        raise ParseError(f"need at least m+1 = {m + 1} landmarks, got {len(rows)}", line=last, path=str(path))
    return LandmarkConfiguration(np.array(rows), label=path.stem)


def format_landmarks(points) -> str:
    pts = np.asarray(points, dtype=float)
    return "".join(" ".join(f"{v:.17g}" for v in row) + "\n" for row in pts)


def atomic_write(path, data: str | bytes):
    """Write to a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_landmark_file(path, points):
    atomic_write(path, format_landmarks(points))


@dataclass(frozen=True)
class Observation:
    time: float
    path: Path


@dataclass(frozen=True)
class SubjectEntry:
    subject_id: str
    group: str
    observations: tuple


@dataclass(frozen=True)
class TrajectoryManifest:
    subjects: tuple
    reference: Path | None = None
    source_hash: str = ""

    @property
    def groups(self):
        return sorted({s.group for s in self.subjects})


def load_manifest(path) -> TrajectoryManifest:
    """Load and validate a manifest; relative paths resolve against its folder."""
    path = Path(path)
    try:
        raw = path.read_bytes()
        doc = json.loads(raw.decode("utf-8"))
    except FileNotFoundError:
        raise ParseError("manifest not found", path=str(path)) from None
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"invalid manifest JSON: {exc}", path=str(path)) from None
    if not isinstance(doc, dict):
        raise InvalidInput(f"{path}: manifest must be a JSON object")
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise InvalidInput(f"{path}: unsupported schema_version {version}")
    base = path.parent
    subjects = []
    seen = set()
    entries = doc.get("subjects")
    if not isinstance(entries, list) or not entries:
        raise InvalidInput(f"{path}: 'subjects' must be a non-empty list")
    for i, s in enumerate(entries):
        where = f"{path}: subjects[{i}]"
        if not isinstance(s, dict):
            raise InvalidInput(f"{where} must be an object")
        sid = s.get("subject_id")
        if not isinstance(sid, str) or not sid:
            raise InvalidInput(f"{where}: missing subject_id")
        if sid in seen:
            raise InvalidInput(f"{where}: duplicate subject_id {sid!r}")
        seen.add(sid)
        group = s.get("group")
        if not isinstance(group, str) or not group:
            raise InvalidInput(f"{where}: missing group label for {sid!r}")
        obs = s.get("observations")
        if not isinstance(obs, list) or len(obs) < 2:
            raise InvalidInput(f"{where}: {sid!r} needs at least two observations")
        parsed = []
        for j, o in enumerate(obs):
            try:
                t = float(o["time"])
                p = base / o["path"]
            except (KeyError, TypeError, ValueError):
                raise InvalidInput(f"{where}.observations[{j}]: needs numeric 'time' and 'path'") from None
            if not p.is_file():
                raise InvalidInput(f"{where}.observations[{j}]: file {p} does not exist")
            parsed.append(Observation(t, p))
        times = [o.time for o in parsed]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise InvalidInput(f"{where}: times of {sid!r} must be strictly increasing")
        subjects.append(SubjectEntry(sid, group, tuple(parsed)))
    ref = doc.get("reference")
    ref_path = None
    if ref is not None:
        ref_path = base / ref
        if not ref_path.is_file():
            raise InvalidInput(f"{path}: reference file {ref_path} does not exist")
    return TrajectoryManifest(tuple(subjects), ref_path, hashlib.sha256(raw).hexdigest())


def _clean(obj):
    """Convert numpy values to JSON types; non-finite floats become ``None``."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, Path):
        return obj.as_posix()
    return obj


@dataclass
class ResultBundle:
    command: str
    subjects: list = field(default_factory=list)
    groups: dict = field(default_factory=dict)
    tests: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def to_json(self) -> str:
        return json.dumps(_clean(asdict(self)), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ResultBundle":
        doc = json.loads(text)
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise InvalidInput(f"unsupported bundle schema_version {doc.get('schema_version')}")
        return cls(**doc)

    def write(self, path):
        atomic_write(path, self.to_json())


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(_clean(config), sort_keys=True).encode()).hexdigest()


__all__ = [
    "parse_landmark_file",
    "format_landmarks",
    "write_landmark_file",
    "atomic_write",
    "Observation",
    "SubjectEntry",
    "TrajectoryManifest",
    "load_manifest",
    "ResultBundle",
    "config_hash",
    "SCHEMA_VERSION",
]
