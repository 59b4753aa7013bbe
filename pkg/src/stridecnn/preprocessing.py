"""From annotated per-stride sensor records to fixed-size network inputs.

The steps are: affine calibration to g and deg/s, per-foot axis alignment,
optional re-segmentation at mid-stance or heel-strike events, range
normalization, and trailing zero padding to 256 samples.
"""

import enum
import logging
from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

__all__ = [
    "StrideDefinition",
    "RawStride",
    "CalibrationProfile",
    "PreprocessedStride",
    "StrideTooLongError",
    "EventOrderError",
    "calibrate",
    "detect_midstance",
    "detect_heelstrike",
    "detect_event",
    "redefine_strides",
    "normalize_and_pad",
    "prepare_strides",
    "preprocess",
    "parse_calibration_profile",
    "format_calibration_profile",
    "INPUT_LENGTH",
    "ACCEL_RANGE_G",
    "GYRO_RANGE_DPS",
]

INPUT_LENGTH = 256
ACCEL_RANGE_G = 6.0
GYRO_RANGE_DPS = 500.0
MS_WINDOW = 5


class StrideDefinition(enum.Enum):
    MSDTW = "msDTW"
    HS_TO_HS = "HS_to_HS"
    MS_TO_MS = "MS_to_MS"

    @classmethod
    def parse(cls, text):
        """Accept the canonical value or a CLI alias such as ``ms-ms``."""
        if isinstance(text, cls):
            return text
        key = str(text).strip().lower().replace("_to_", "-").replace("_", "-")
        aliases = {"msdtw": cls.MSDTW, "hs-hs": cls.HS_TO_HS, "ms-ms": cls.MS_TO_MS}
        if key not in aliases:
            raise ValueError(f"unknown stride definition {text!r}; expected msdtw, hs-hs or ms-ms")
        return aliases[key]


class StrideTooLongError(ValueError):
    """A stride does not fit into the fixed network input length."""


class EventOrderError(ValueError):
    """Gait events of consecutive strides are not strictly increasing in time."""


@dataclass
class RawStride:
    """One annotated stride of a single foot.

    ``accel`` and ``gyro`` are ``(3, n)`` arrays, either raw sensor counts
    (``calibrated=False``) or g and deg/s in the common foot frame.
    ``start``/``end`` are absolute sample indices in the recording, end
    exclusive.
    """

    accel: np.ndarray
    gyro: np.ndarray
    patient_id: str
    foot: str
    reference_length: float
    start: int
    end: int
    stride_id: str = ""
    sample_rate: float = 102.4
    calibrated: bool = True

    def __post_init__(self):
        self.accel = np.asarray(self.accel, dtype=np.float64)
        self.gyro = np.asarray(self.gyro, dtype=np.float64)
        if self.accel.ndim != 2 or self.accel.shape[0] != 3 or self.gyro.shape != self.accel.shape:
            raise ValueError(f"accel/gyro must both be (3, n), got {self.accel.shape} and {self.gyro.shape}")
        if self.n_samples < 1:
            raise ValueError("a stride needs at least one sample")
        if self.end - self.start != self.n_samples:
            raise ValueError(f"stride borders [{self.start}, {self.end}) disagree with {self.n_samples} samples")
        if not self.reference_length > 0:
            raise ValueError(f"reference length must be positive, got {self.reference_length}")
        if not self.sample_rate > 0:
            raise ValueError("sample rate must be positive")
        if self.foot not in ("left", "right"):
            raise ValueError(f"foot must be 'left' or 'right', got {self.foot!r}")

    @property
    def n_samples(self):
        return self.accel.shape[1]

    @property
    def channels(self):
        """All six channels stacked as ``(6, n)``: accel x, y, z then gyro x, y, z."""
        return np.vstack([self.accel, self.gyro])


def _is_signed_permutation(m):
    m = np.asarray(m)
    if m.shape != (3, 3) or not np.all(np.isin(m, (-1.0, 0.0, 1.0))):
        return False
    nz = m != 0
    return bool(np.all(nz.sum(axis=0) == 1) and np.all(nz.sum(axis=1) == 1))


@dataclass
class CalibrationProfile:
    """Affine per-axis calibration and per-foot axis alignment.

    Physical value = ``scale * (raw - offset)`` per axis, then the foot's
    signed-permutation matrix maps sensor axes onto the common frame. The
    same alignment is used for accelerometer and gyroscope.
    """

    accel_scale: np.ndarray
    accel_offset: np.ndarray
    gyro_scale: np.ndarray
    gyro_offset: np.ndarray
    alignment: dict

    def __post_init__(self):
        for name in ("accel_scale", "accel_offset", "gyro_scale", "gyro_offset"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if arr.shape != (3,):
                raise ValueError(f"{name} needs three values, got {arr.size}")
            setattr(self, name, arr)
        self.alignment = {foot: np.asarray(m, dtype=np.float64) for foot, m in self.alignment.items()}
        for foot, m in self.alignment.items():
            if not _is_signed_permutation(m):
                raise ValueError(f"alignment for {foot} foot is not a signed permutation:\n{m}")

    @classmethod
    def identity(cls):
        return cls(np.ones(3), np.zeros(3), np.ones(3), np.zeros(3),
                   {"left": np.eye(3), "right": np.eye(3)})


@dataclass
class PreprocessedStride:
    signal: np.ndarray
    reference_length: float
    patient_id: str
    definition: StrideDefinition
    foot: str = "left"
    stride_id: str = ""
    n_samples: int = 0


def calibrate(raw, profile):
    """Convert raw counts to g and deg/s and rotate into the common foot frame."""
    if profile is None:
        raise ValueError("calibration profile is missing")
    if raw.foot not in profile.alignment:
        raise ValueError(f"profile has no alignment for the {raw.foot} foot")
    align = profile.alignment[raw.foot]
    accel = profile.accel_scale[:, None] * (raw.accel - profile.accel_offset[:, None])
    gyro = profile.gyro_scale[:, None] * (raw.gyro - profile.gyro_offset[:, None])
    return replace(raw, accel=align @ accel, gyro=align @ gyro, calibrated=True)


def detect_midstance(stride, window=MS_WINDOW):
    """Index of the centre of the ``window``-sample span with least gyroscope energy.

    Ties go to the earliest window.
    """
    n = stride.n_samples
    if window < 1:
        raise ValueError("window must be >= 1")
    if n <= window:
        raise ValueError(f"stride of {n} samples is not longer than the mid-stance window {window}")
    energy = np.sum(stride.gyro * stride.gyro, axis=0)
    sums = sliding_window_view(energy, window).sum(axis=1)
    return int(np.argmin(sums)) + window // 2


def detect_heelstrike(stride, search=None):
    """Index of the accelerometer-x minimum within ``search = (lo, hi)`` (hi exclusive).

    The default search range is the second half of the stride.
    """
    n = stride.n_samples
    lo, hi = (n // 2, n) if search is None else search
    if not 0 <= lo < hi <= n:
        raise ValueError(f"heel-strike search range [{lo}, {hi}) is empty or outside the stride (n={n})")
    return lo + int(np.argmin(stride.accel[0, lo:hi]))


def detect_event(stride, definition, ms_window=MS_WINDOW, hs_search=None):
    if definition is StrideDefinition.MS_TO_MS:
        return detect_midstance(stride, ms_window)
    if definition is StrideDefinition.HS_TO_HS:
        search = hs_search(stride) if callable(hs_search) else hs_search
        return detect_heelstrike(stride, search)
    raise ValueError(f"{definition} has no detectable event")


def _stitch(strides):
    # contiguous sample buffer covering all strides; gaps are not allowed
    first = strides[0].start
    total = strides[-1].end - first
    buf = np.empty((6, total))
    covered = np.zeros(total, dtype=bool)
    for s in strides:
        buf[:, s.start - first:s.end - first] = s.channels
        covered[s.start - first:s.end - first] = True
    return buf, covered, first


def redefine_strides(strides, definition, ms_window=MS_WINDOW, hs_search=None):
    """Move stride borders to detected mid-stance or heel-strike events.

    ``strides`` must be consecutive strides of one foot of one patient.
    Stride ``i`` of the result runs from the event in input stride ``i`` to
    the event in input stride ``i + 1``, so ``k`` inputs give ``k - 1``
    outputs. The reference length of a new stride is the mean of the two
    input strides it straddles. ``msDTW`` returns the input unchanged.
    """
    definition = StrideDefinition.parse(definition)
    strides = list(strides)
    if definition is StrideDefinition.MSDTW:
        return strides
    if len(strides) < 2:
        return []
    keys = {(s.patient_id, s.foot) for s in strides}
    if len(keys) != 1:
        raise ValueError(f"strides to redefine must come from one patient and foot, got {sorted(keys)}")

    events = [s.start + detect_event(s, definition, ms_window, hs_search) for s in strides]
    for a, b in zip(events, events[1:]):
        if not b > a:
            raise EventOrderError(f"gait events not strictly increasing: {a} then {b}")

    buf, covered, first = _stitch(strides)
    out = []
    for i in range(len(strides) - 1):
        lo, hi = events[i] - first, events[i + 1] - first
        if not covered[lo:hi].all():
            raise ValueError(f"recording gap between samples {events[i]} and {events[i + 1]}")
        seg = buf[:, lo:hi]
        a, b = strides[i], strides[i + 1]
        out.append(RawStride(
            accel=seg[:3].copy(), gyro=seg[3:].copy(),
            patient_id=a.patient_id, foot=a.foot,
            reference_length=0.5 * (a.reference_length + b.reference_length),
            start=events[i], end=events[i + 1],
            stride_id=f"{a.stride_id}-{b.stride_id}",
            sample_rate=a.sample_rate, calibrated=a.calibrated,
        ))
    return out


def normalize_and_pad(stride, definition=StrideDefinition.MSDTW, accel_range=ACCEL_RANGE_G,
                      gyro_range=GYRO_RANGE_DPS, length=INPUT_LENGTH):
    """Scale by the sensor ranges and zero-pad at the end to ``length`` samples.

    Values beyond the range are clipped, as the sensor would saturate there.
    """
    if not stride.calibrated:
        raise ValueError("stride must be calibrated before normalization")
    n = stride.n_samples
    if n > length:
        raise StrideTooLongError(f"stride {stride.stride_id!r} has {n} samples, input length is {length}")
    signal = np.zeros((6, length))
    signal[:3, :n] = stride.accel / accel_range
    signal[3:, :n] = stride.gyro / gyro_range
    np.clip(signal, -1.0, 1.0, out=signal)
    return PreprocessedStride(
        signal=signal, reference_length=float(stride.reference_length),
        patient_id=stride.patient_id, definition=StrideDefinition.parse(definition),
        foot=stride.foot, stride_id=stride.stride_id, n_samples=n,
    )


def _group_consecutive(strides):
    groups = {}
    for s in strides:
        groups.setdefault((s.patient_id, s.foot), []).append(s)
    return [sorted(g, key=lambda s: s.start) for _, g in sorted(groups.items())]


def prepare_strides(strides, definition, profile=None, ms_window=MS_WINDOW, hs_search=None):
    """Calibrate (where needed) and re-segment strides of a whole table.

    Strides are grouped per patient and foot and ordered by start index.
    Uncalibrated strides require ``profile``.
    """
    definition = StrideDefinition.parse(definition)
    out = []
    for group in _group_consecutive(strides):
        if any(not s.calibrated for s in group):
            group = [s if s.calibrated else calibrate(s, profile) for s in group]
        out.extend(redefine_strides(group, definition, ms_window, hs_search))
    return out


def preprocess(strides, definition, profile=None, accel_range=ACCEL_RANGE_G,
               gyro_range=GYRO_RANGE_DPS, ms_window=MS_WINDOW, hs_search=None):
    """Full pipeline from per-stride records to network inputs."""
    definition = StrideDefinition.parse(definition)
    ready = prepare_strides(strides, definition, profile, ms_window, hs_search)
    return [normalize_and_pad(s, definition, accel_range, gyro_range) for s in ready]


def _parse_vector(text):
    return np.array([float(t) for t in text.replace(",", " ").split()])


def parse_calibration_profile(text):
    """Read a profile from ``key = value`` lines.

    Keys: ``accel_scale``, ``accel_offset``, ``gyro_scale``, ``gyro_offset``
    (three numbers each) and ``align_left``, ``align_right`` (nine numbers,
    rows separated by ``;``). Missing keys default to the identity.
    """
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"calibration profile line {lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        values[key] = value
    known = {"accel_scale", "accel_offset", "gyro_scale", "gyro_offset", "align_left", "align_right"}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown calibration keys: {sorted(unknown)}")
    base = CalibrationProfile.identity()
    kwargs = {}
    for key in ("accel_scale", "accel_offset", "gyro_scale", "gyro_offset"):
        kwargs[key] = _parse_vector(values[key]) if key in values else getattr(base, key)
    alignment = dict(base.alignment)
    for foot in ("left", "right"):
        key = f"align_{foot}"
        if key in values:
            alignment[foot] = _parse_vector(values[key].replace(";", " ")).reshape(3, 3)
    return CalibrationProfile(alignment=alignment, **kwargs)


def format_calibration_profile(profile):
    def vec(a):
        return " ".join(repr(float(v)) for v in a)

    lines = [f"{k} = {vec(getattr(profile, k))}"
             for k in ("accel_scale", "accel_offset", "gyro_scale", "gyro_offset")]
    for foot in ("left", "right"):
        m = profile.alignment[foot]
        lines.append(f"align_{foot} = " + "; ".join(vec(row) for row in m))
    return "\n".join(lines) + "\n"
