"""Stride tables on disk, run manifests, and the synthetic stride generator.

A dataset directory holds

``metadata.txt``
    ``key = value`` lines: ``sample_rate``, ``accel_range_g``,
    ``gyro_range_dps``, ``calibrated``, ``definition``, ``source``.
``strides.csv``
    ``patient_id, foot, stride_id, start, end, reference_length_cm``; an
    empty reference length marks a stride without reference (skipped).
``recordings/<patient>_<foot>.csv``
    ``patient_id, foot, stride_id, sample_idx, ax, ay, az, gx, gy, gz`` in
    g and deg/s (raw counts when ``calibrated = false``).
"""

import csv
import dataclasses
import hashlib
import io
import logging
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .preprocessing import (
    ACCEL_RANGE_G,
    GYRO_RANGE_DPS,
    RawStride,
    StrideDefinition,
)

logger = logging.getLogger(__name__)

__all__ = [
    "DatasetFormatError",
    "StrideTable",
    "RunConfig",
    "atomic_write_text",
    "atomic_write_bytes",
    "load_dataset",
    "save_dataset",
    "dataset_hash",
    "write_manifest",
    "generate_synthetic",
    "synthetic_functional",
    "SYNTH_GAIN_CM_PER_DEG",
]

STRIDE_COLUMNS = ["patient_id", "foot", "stride_id", "start", "end", "reference_length_cm"]
SAMPLE_COLUMNS = ["patient_id", "foot", "stride_id", "sample_idx", "ax", "ay", "az", "gx", "gy", "gz"]


class DatasetFormatError(ValueError):
    """A dataset file is malformed; the message names file and line."""


@dataclass
class StrideTable:
    strides: list
    sample_rate: float = 102.4
    accel_range: float = ACCEL_RANGE_G
    gyro_range: float = GYRO_RANGE_DPS
    calibrated: bool = True
    definition: StrideDefinition = StrideDefinition.MSDTW
    source: str = ""
    skipped: int = 0

    def __len__(self):
        return len(self.strides)

    @property
    def patient_ids(self):
        return sorted({s.patient_id for s in self.strides})


@dataclass
class RunConfig:
    """Everything needed to reproduce one CLI run."""

    command: str
    seed: int
    definition: str = "msDTW"
    train: dict = field(default_factory=dict)
    network: dict = field(default_factory=dict)
    folds: int = 10
    data: str = ""
    out: str = ""
    accel_range: float = ACCEL_RANGE_G
    gyro_range: float = GYRO_RANGE_DPS
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.seed is None:
            raise ValueError("a seed is mandatory")

    def manifest_lines(self):
        lines = []
        for key, value in dataclasses.asdict(self).items():
            if isinstance(value, dict):
                for sub in sorted(value):
                    lines.append(f"{key}.{sub} = {value[sub]}")
            else:
                lines.append(f"{key} = {value}")
        return lines


def atomic_write_bytes(path, data):
    """Write via a temporary file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def _rows(text):
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(text)
    return buf.getvalue()


def _safe_name(text):
    return re.sub(r"[^A-Za-z0-9._-]", "_", text)


def _fmt(v):
    return repr(float(v))


def save_dataset(table, path):
    """Write ``table`` as a dataset directory (see module docstring)."""
    path = Path(path)
    meta = [
        f"sample_rate = {table.sample_rate!r}",
        f"accel_range_g = {table.accel_range!r}",
        f"gyro_range_dps = {table.gyro_range!r}",
        f"calibrated = {'true' if table.calibrated else 'false'}",
        f"definition = {table.definition.value}",
        f"source = {table.source}",
    ]
    atomic_write_text(path / "metadata.txt", "\n".join(meta) + "\n")

    index = [STRIDE_COLUMNS]
    recordings = {}
    for s in table.strides:
        index.append([s.patient_id, s.foot, s.stride_id, s.start, s.end, _fmt(s.reference_length)])
        rows = recordings.setdefault((s.patient_id, s.foot), [])
        for i in range(s.n_samples):
            rows.append([s.patient_id, s.foot, s.stride_id, s.start + i,
                         *(_fmt(v) for v in s.accel[:, i]), *(_fmt(v) for v in s.gyro[:, i])])
    atomic_write_text(path / "strides.csv", _rows(index))
    for (pid, foot), rows in sorted(recordings.items()):
        atomic_write_text(path / "recordings" / f"{_safe_name(pid)}_{foot}.csv", _rows([SAMPLE_COLUMNS] + rows))


def _read_metadata(path):
    meta = {}
    if not path.exists():
        return meta
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DatasetFormatError(f"{path}:{lineno}: expected 'key = value'")
        k, v = (p.strip() for p in line.split("=", 1))
        meta[k] = v
    return meta


def _parse_bool(text, where):
    t = text.strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise DatasetFormatError(f"{where}: expected true/false, got {text!r}")


def load_dataset(path):
    """Read a dataset directory into a :class:`StrideTable`.

    ``path`` may be the directory or its ``strides.csv``. Strides without a
    reference length are skipped and counted in ``table.skipped``.
    """
    path = Path(path)
    root = path.parent if path.is_file() else path
    index_path = root / "strides.csv"
    meta = _read_metadata(root / "metadata.txt")
    try:
        sample_rate = float(meta.get("sample_rate", 102.4))
        accel_range = float(meta.get("accel_range_g", ACCEL_RANGE_G))
        gyro_range = float(meta.get("gyro_range_dps", GYRO_RANGE_DPS))
    except ValueError as exc:
        raise DatasetFormatError(f"{root / 'metadata.txt'}: {exc}") from None
    calibrated = _parse_bool(meta.get("calibrated", "true"), root / "metadata.txt")
    definition = StrideDefinition.parse(meta.get("definition", "msDTW"))
    table = StrideTable([], sample_rate, accel_range, gyro_range, calibrated, definition,
                        meta.get("source", ""))
    if not index_path.exists():
        raise FileNotFoundError(f"{index_path} not found")

    wanted = {}
    order = []
    with open(index_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return table
        if header != STRIDE_COLUMNS:
            raise DatasetFormatError(f"{index_path}:1: expected header {STRIDE_COLUMNS}, got {header}")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(STRIDE_COLUMNS):
                raise DatasetFormatError(f"{index_path}:{lineno}: expected {len(STRIDE_COLUMNS)} fields, got {len(row)}")
            pid, foot, sid, start, end, ref = row
            if not pid:
                raise DatasetFormatError(f"{index_path}:{lineno}: empty patient id")
            if foot not in ("left", "right"):
                raise DatasetFormatError(f"{index_path}:{lineno}: foot must be left or right, got {foot!r}")
            try:
                start, end = int(start), int(end)
            except ValueError:
                raise DatasetFormatError(f"{index_path}:{lineno}: start/end must be integers") from None
            if end <= start:
                raise DatasetFormatError(f"{index_path}:{lineno}: end {end} must exceed start {start}")
            if ref.strip() == "":
                table.skipped += 1
                logger.warning("%s:%d: stride %s has no reference length, skipped", index_path, lineno, sid)
                continue
            try:
                ref = float(ref)
            except ValueError:
                raise DatasetFormatError(f"{index_path}:{lineno}: bad reference length {ref!r}") from None
            if not ref > 0:
                raise DatasetFormatError(f"{index_path}:{lineno}: reference length must be positive, got {ref}")
            key = (pid, foot, sid)
            if key in wanted:
                raise DatasetFormatError(f"{index_path}:{lineno}: duplicate stride {key}")
            wanted[key] = (start, end, ref)
            order.append(key)

    samples = {key: [] for key in wanted}
    rec_dir = root / "recordings"
    files = sorted(rec_dir.glob("*.csv")) if rec_dir.exists() else []
    for rec in files:
        with open(rec, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                continue
            if header != SAMPLE_COLUMNS:
                raise DatasetFormatError(f"{rec}:1: expected header {SAMPLE_COLUMNS}, got {header}")
            for lineno, row in enumerate(reader, 2):
                if not row:
                    continue
                if len(row) != len(SAMPLE_COLUMNS):
                    n_ch = len(row) - 4
                    raise DatasetFormatError(f"{rec}:{lineno}: expected 6 sensor channels, got {n_ch}")
                key = (row[0], row[1], row[2])
                if key not in samples:
                    # samples of skipped strides
                    continue
                try:
                    idx = int(row[3])
                    vals = [float(v) for v in row[4:]]
                except ValueError:
                    raise DatasetFormatError(f"{rec}:{lineno}: non-numeric sample value") from None
                if not all(np.isfinite(vals)):
                    raise DatasetFormatError(f"{rec}:{lineno}: non-finite sample value")
                buf = samples[key]
                expected = wanted[key][0] + len(buf)
                if idx != expected:
                    raise DatasetFormatError(f"{rec}:{lineno}: sample_idx {idx} out of order, expected {expected}")
                buf.append(vals)

    for key in order:
        start, end, ref = wanted[key]
        vals = samples[key]
        if len(vals) != end - start:
            raise DatasetFormatError(f"stride {key}: index says {end - start} samples, recordings hold {len(vals)}")
        arr = np.array(vals).T
        table.strides.append(RawStride(
            accel=arr[:3], gyro=arr[3:], patient_id=key[0], foot=key[1], reference_length=ref,
            start=start, end=end, stride_id=key[2], sample_rate=sample_rate, calibrated=calibrated,
        ))
    return table


def dataset_hash(path):
    """SHA-256 over the dataset's files in sorted relative-path order.

    A ``manifest.txt`` in the directory is run metadata, not data, and is
    left out.
    """
    path = Path(path)
    root = path.parent if path.is_file() else path
    h = hashlib.sha256()
    for f in sorted(p for p in root.rglob("*") if p.is_file() and not p.name.startswith(".")
                    and p.relative_to(root) != Path("manifest.txt")):
        h.update(str(f.relative_to(root)).encode())
        h.update(b"\0")
        h.update(f.read_bytes())
    return h.hexdigest()


def write_manifest(path, run_config, version, data_hash=""):
    lines = [f"version = {version}", f"dataset_sha256 = {data_hash}"] + run_config.manifest_lines()
    atomic_write_text(path, "\n".join(lines) + "\n")


# -- synthetic strides -------------------------------------------------------

SYNTH_GAIN_CM_PER_DEG = 1.6


def synthetic_functional(gyro_y, sample_rate):
    """Stride length implied by a synthetic stride: gain times the forward swing rotation.

    ``gain * dt * sum(max(gyro_y, 0))`` in cm, with ``gyro_y`` in deg/s.
    """
    return SYNTH_GAIN_CM_PER_DEG * float(np.sum(np.maximum(gyro_y, 0.0))) / sample_rate


def _bump(phase, lo, hi):
    # sin^2 bump that is exactly zero outside [lo, hi)
    inside = (phase >= lo) & (phase < hi)
    return np.where(inside, np.sin(np.pi * (phase - lo) / (hi - lo)) ** 2, 0.0)


def _synthetic_stride(rng, n, target_cm, style, sample_rate, sensor_noise):
    phase = np.arange(n) / n
    dt = 1.0 / sample_rate
    swing_lo, swing_hi = 0.05, 0.50
    # a sin^2 bump integrates to half its support
    amp = target_cm / (SYNTH_GAIN_CM_PER_DEG * 0.5 * (swing_hi - swing_lo) * n * dt)
    swing = _bump(phase, swing_lo, swing_hi)
    heel = _bump(phase, 0.54, 0.60)
    push = _bump(phase, 0.84, 1.0)

    gy = amp * swing - style["push"] * push - 40.0 * heel
    gx = style["roll"] * amp * np.sin(2 * np.pi * phase + style["phase"]) * (swing + push)
    gz = style["yaw"] * amp * np.sin(4 * np.pi * phase) * swing
    ax = (style["ax"] * (amp / 300.0) * np.sin(2 * np.pi * (phase - swing_lo) / (swing_hi - swing_lo)) * swing
          - style["heel"] * heel + 0.6 * push)
    ay = 0.15 * np.sin(2 * np.pi * phase + style["phase"]) * swing
    az = 1.0 + 0.8 * swing * (amp / 300.0) - 1.5 * heel * style["heel"] / 3.0
    accel = np.vstack([ax, ay, az]) + sensor_noise * 0.01 * rng.standard_normal((3, n))
    gyro = np.vstack([gx, gy, gz]) + sensor_noise * rng.standard_normal((3, n))
    # the sensors saturate at their range
    np.clip(accel, -ACCEL_RANGE_G, ACCEL_RANGE_G, out=accel)
    np.clip(gyro, -GYRO_RANGE_DPS, GYRO_RANGE_DPS, out=gyro)
    return accel, gyro


def generate_synthetic(n_patients, strides_per_patient, rng, noise_level=1.0, sample_rate=102.4,
                       length_mode="imbalanced", sensor_noise=1.0):
    """Gait-like 6-channel strides whose reference length is a known functional of the signal.

    Each patient gets a walking style and a typical stride length and
    duration; strides alternate feet and are contiguous within each foot's
    recording. The stored reference length is
    :func:`synthetic_functional` of the stored gyroscope y-channel plus
    Gaussian label noise with standard deviation ``noise_level`` cm.

    ``length_mode="imbalanced"`` draws patient stride lengths from a
    right-skewed distribution (many short strides, few long ones);
    ``"uniform"`` spreads them evenly over 50-140 cm.
    """
    if n_patients < 1 or strides_per_patient < 1:
        raise ValueError("need at least one patient and one stride per patient")
    if length_mode not in ("imbalanced", "uniform"):
        raise ValueError(f"unknown length_mode {length_mode!r}")
    strides = []
    width = len(str(n_patients))
    for p in range(n_patients):
        pid = f"P{p + 1:0{width}d}"
        if length_mode == "imbalanced":
            base_len = 50.0 + 90.0 * rng.beta(2.0, 4.0)
        else:
            base_len = rng.uniform(50.0, 140.0)
        # slower walkers take shorter and slightly longer-lasting strides
        base_dur = (1.35 - 0.003 * (base_len - 50.0)) * rng.uniform(0.92, 1.08)
        style = {
            "push": rng.uniform(40.0, 120.0),
            "roll": rng.uniform(0.05, 0.2),
            "yaw": rng.uniform(0.02, 0.1),
            "phase": rng.uniform(0, 2 * np.pi),
            "ax": rng.uniform(0.5, 1.5),
            "heel": rng.uniform(1.5, 3.5),
        }
        cursor = {"left": 0, "right": 0}
        counts = {"left": 0, "right": 0}
        for k in range(strides_per_patient):
            foot = "left" if k % 2 == 0 else "right"
            target = base_len * rng.uniform(0.93, 1.07)
            n = int(round(base_dur * rng.uniform(0.96, 1.04) * sample_rate))
            n = min(max(n, 60), 250)
            accel, gyro = _synthetic_stride(rng, n, target, style, sample_rate, sensor_noise)
            label = synthetic_functional(gyro[1], sample_rate)
            if noise_level > 0:
                label += noise_level * rng.standard_normal()
            start = cursor[foot]
            strides.append(RawStride(
                accel=accel, gyro=gyro, patient_id=pid, foot=foot, reference_length=label,
                start=start, end=start + n, stride_id=f"{foot[0]}{counts[foot]:02d}",
                sample_rate=sample_rate, calibrated=True,
            ))
            cursor[foot] += n
            counts[foot] += 1
    return StrideTable(strides, sample_rate=sample_rate, calibrated=True,
                       definition=StrideDefinition.MSDTW, source=f"synthetic:{length_mode}")
