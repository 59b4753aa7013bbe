"""Two conv/pool stages, a dense hidden layer with dropout, and a linear readout.

Gradients are derived by hand for exactly this architecture. All functions
take one ``(N0, L0)`` stride or a ``(B, N0, L0)`` batch.
"""

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError,
    conv_tm,
    conv_tm_backward,
    pool_tm,
    pool_tm_backward,
    relu,
    sample_truncated_normal,
)

__all__ = [
    "NetworkConfig",
    "NetworkParams",
    "ForwardCache",
    "FULL_CONFIG",
    "DESK_CONFIG",
    "REDUCED_CONFIG",
    "PARAM_NAMES",
    "init_params",
    "forward",
    "backward",
    "predict",
    "save_params",
    "load_params",
]

PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "fc_w", "fc_b", "ro_w", "ro_b")


@dataclass(frozen=True)
class NetworkConfig:
    L0: int = 256
    N0: int = 6
    N1: int = 32
    L1: int = 30
    N2: int = 64
    L2: int = 15
    r: int = 2
    Nfc: int = 1024
    p_drop: float = 0.5

    def __post_init__(self):
        for name in ("L0", "N0", "N1", "L1", "N2", "L2", "r", "Nfc"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.L0 % (self.r * self.r):
            raise ValueError(f"L0={self.L0} must be divisible by r^2={self.r * self.r}")
        if self.L1 != self.r * self.L2:
            raise ValueError(f"receptive field rule L1 = r*L2 violated ({self.L1} != {self.r}*{self.L2})")
        if not 0.0 <= self.p_drop < 1.0:
            raise ValueError(f"p_drop must be in [0, 1), got {self.p_drop}")

    @property
    def flat_size(self):
        return self.N2 * self.L0 // (self.r * self.r)

    def param_shapes(self):
        return {
            "conv1_w": (self.L1, self.N0, self.N1),
            "conv1_b": (self.N1,),
            "conv2_w": (self.L2, self.N1, self.N2),
            "conv2_b": (self.N2,),
            "fc_w": (self.flat_size, self.Nfc),
            "fc_b": (self.Nfc,),
            "ro_w": (self.Nfc, 1),
            "ro_b": (1,),
        }

    def param_count(self):
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    def layer_shapes(self):
        """Per-sample activation shapes from conv1 output to the readout."""
        r = self.r
        return [
            (self.N1, self.L0),
            (self.N1, self.L0 // r),
            (self.N2, self.L0 // r),
            (self.N2, self.L0 // (r * r)),
            (self.flat_size,),
            (self.Nfc,),
            (1,),
        ]


FULL_CONFIG = NetworkConfig()
# Same input format and dense width, fewer and shorter kernels; about two
# minutes per 4000-iteration fold on one core. Nfc stays at 1024 because
# narrower dense layers make dropout bias the outputs low.
DESK_CONFIG = NetworkConfig(N1=8, L1=8, N2=8, L2=4)
# Tiny network used for finite-difference gradient checks.
REDUCED_CONFIG = NetworkConfig(L0=16, N0=2, N1=3, L1=4, N2=4, L2=2, r=2, Nfc=8)


@dataclass
class NetworkParams:
    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    fc_w: np.ndarray
    fc_b: np.ndarray
    ro_w: np.ndarray
    ro_b: np.ndarray

    def as_dict(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}

    @classmethod
    def from_dict(cls, d):
        return cls(**{name: d[name] for name in PARAM_NAMES})

    def copy(self):
        return NetworkParams.from_dict({k: v.copy() for k, v in self.as_dict().items()})

    def zeros_like(self):
        return NetworkParams.from_dict({k: np.zeros_like(v) for k, v in self.as_dict().items()})

    def check(self, config):
        shapes = config.param_shapes()
        for name in PARAM_NAMES:
            got = getattr(self, name).shape
            if got != shapes[name]:
                raise ShapeError(f"parameter {name} has shape {got}, config expects {shapes[name]}")


@dataclass
class ForwardCache:
    """Intermediate values kept from :func:`forward` for :func:`backward`.

    Convolution-stage arrays are time-major, ``(B, length, channels)``;
    ``arg1``/``arg2`` hold the within-window offset picked by each max pool.
    """

    x: np.ndarray
    cols1: np.ndarray
    z1: np.ndarray
    o1: np.ndarray
    arg1: np.ndarray
    cols2: np.ndarray
    z2: np.ndarray
    o2: np.ndarray
    arg2: np.ndarray
    flat: np.ndarray
    z_fc: np.ndarray
    o_fc: np.ndarray
    mask: np.ndarray
    dropped: np.ndarray
    y: np.ndarray
    # inverted-dropout scale, 1.0 when dropout is off
    keep_scale: float = 1.0


def init_params(config, rng, stddev=0.1, bias=0.1):
    """Truncated-normal weights and constant biases."""
    tensors = {}
    for name, shape in config.param_shapes().items():
        if name.endswith("_b"):
            tensors[name] = np.full(shape, bias, dtype=np.float64)
        else:
            tensors[name] = sample_truncated_normal(rng, shape, stddev)
    return NetworkParams.from_dict(tensors)


def _as_batch(x, config):
    x = np.asarray(x, dtype=np.float64)
    unbatched = x.ndim == 2
    if unbatched:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (config.N0, config.L0):
        raise ShapeError(f"input must be ({config.N0}, {config.L0}) or batched, got {x.shape}")
    return x, unbatched


def forward(params, x, config, dropout=None):
    """Run the network.

    Parameters
    ----------
    params : NetworkParams
    x : ndarray, shape (N0, L0) or (B, N0, L0)
    config : NetworkConfig
    dropout : None, numpy Generator, or ndarray
        ``None`` disables dropout. A Generator draws a fresh keep-mask with
        keep probability ``1 - config.p_drop``. An explicit 0/1 array of
        shape ``(Nfc,)`` or ``(B, Nfc)`` is used as given.

    Returns
    -------
    y : float or ndarray of shape (B,)
    cache : ForwardCache
    """
    params.check(config)
    xb, unbatched = _as_batch(x, config)
    batch = xb.shape[0]
    r = config.r

    xt = np.ascontiguousarray(xb.transpose(0, 2, 1))
    z1, cols1 = conv_tm(xt, params.conv1_w, params.conv1_b)
    o1, arg1 = pool_tm(relu(z1), r)
    z2, cols2 = conv_tm(o1, params.conv2_w, params.conv2_b)
    o2, arg2 = pool_tm(relu(z2), r)
    # channel-major flattening: index j * (L0 / r^2) + i
    flat = o2.transpose(0, 2, 1).reshape(batch, -1)
    z_fc = flat @ params.fc_w + params.fc_b
    o_fc = relu(z_fc)

    if dropout is None:
        mask = np.ones((batch, config.Nfc))
        scale = 1.0
    else:
        if isinstance(dropout, np.random.Generator):
            mask = (dropout.random((batch, config.Nfc)) >= config.p_drop).astype(np.float64)
        else:
            mask = np.broadcast_to(np.asarray(dropout, dtype=np.float64), (batch, config.Nfc)).copy()
            if not np.all((mask == 0.0) | (mask == 1.0)):
                raise ValueError("dropout mask must be binary")
        scale = 1.0 / (1.0 - config.p_drop)
    dropped = o_fc * mask * scale

    y = (dropped @ params.ro_w)[:, 0] + params.ro_b[0]
    cache = ForwardCache(
        x=xt, cols1=cols1, z1=z1, o1=o1, arg1=arg1, cols2=cols2, z2=z2, o2=o2, arg2=arg2,
        flat=flat, z_fc=z_fc, o_fc=o_fc, mask=mask, dropped=dropped, y=y, keep_scale=scale,
    )
    return (float(y[0]) if unbatched else y), cache


def backward(params, cache, dL_dy, config):
    """Gradient of ``sum_b dL_dy[b] * y[b]`` with respect to every parameter.

    ``dL_dy`` is a scalar for an unbatched forward call or a ``(B,)`` vector.
    Returns a :class:`NetworkParams` holding gradients.
    """
    params.check(config)
    batch = cache.x.shape[0]
    if cache.z1.shape != (batch, config.L0, config.N1) or cache.z_fc.shape != (batch, config.Nfc):
        raise ShapeError("forward cache does not match the network configuration")
    g_y = np.asarray(dL_dy, dtype=np.float64).reshape(-1)
    if g_y.shape != (batch,):
        raise ShapeError(f"dL_dy must have {batch} entries, got {g_y.shape[0]}")
    if not np.all(np.isfinite(g_y)):
        raise FloatingPointError("non-finite upstream gradient")

    grad_ro_w = cache.dropped.T @ g_y[:, None]
    grad_ro_b = np.array([g_y.sum()])

    g_dropped = g_y[:, None] * params.ro_w[:, 0][None, :]
    g_ofc = g_dropped * cache.mask * cache.keep_scale
    g_zfc = g_ofc * (cache.z_fc > 0)
    grad_fc_w = cache.flat.T @ g_zfc
    grad_fc_b = g_zfc.sum(axis=0)

    g_flat = g_zfc @ params.fc_w.T
    g_o2 = g_flat.reshape(batch, config.N2, -1).transpose(0, 2, 1)
    g_z2 = pool_tm_backward(g_o2, cache.arg2, config.r) * (cache.z2 > 0)
    g_o1, grad_conv2_w, grad_conv2_b = conv_tm_backward(cache.cols2, params.conv2_w, g_z2)
    g_z1 = pool_tm_backward(g_o1, cache.arg1, config.r) * (cache.z1 > 0)
    _, grad_conv1_w, grad_conv1_b = conv_tm_backward(cache.cols1, params.conv1_w, g_z1, input_grad=False)

    return NetworkParams(
        conv1_w=grad_conv1_w, conv1_b=grad_conv1_b,
        conv2_w=grad_conv2_w, conv2_b=grad_conv2_b,
        fc_w=grad_fc_w, fc_b=grad_fc_b,
        ro_w=grad_ro_w, ro_b=grad_ro_b,
    )


def predict(params, x, config, batch_size=256):
    """Test-time output with the full architecture (no dropout)."""
    xb, unbatched = _as_batch(x, config)
    out = np.empty(xb.shape[0])
    for start in range(0, xb.shape[0], batch_size):
        y, _ = forward(params, xb[start:start + batch_size], config)
        out[start:start + batch_size] = y
    return float(out[0]) if unbatched else out


_MAGIC = b"STRIDECNN-PARAMS\x00v1"


def save_params(path, params, config):
    """Write a config header followed by each tensor as little-endian float64."""
    from .data import atomic_write_bytes

    params.check(config)
    header = {
        "config": dataclasses.asdict(config),
        "tensors": [{"name": n, "shape": list(getattr(params, n).shape)} for n in PARAM_NAMES],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [_MAGIC, struct.pack("<Q", len(head)), head]
    for name in PARAM_NAMES:
        chunks.append(np.ascontiguousarray(getattr(params, name), dtype="<f8").tobytes())
    atomic_write_bytes(path, b"".join(chunks))


def load_params(path, config=None):
    """Read parameters written by :func:`save_params`.

    If ``config`` is given it must match the stored one. Any tensor whose
    stored shape disagrees with the config is rejected.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(_MAGIC):
        raise ValueError(f"{path}: not a parameter file")
    pos = len(_MAGIC)
    (hlen,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    stored = NetworkConfig(**header["config"])
    if config is not None and config != stored:
        raise ShapeError(f"{path}: stored config {stored} differs from requested {config}")
    expected = stored.param_shapes()
    tensors = {}
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if expected.get(name) != shape:
            raise ShapeError(f"{path}: tensor {name} has shape {shape}, config expects {expected.get(name)}")
        n = int(np.prod(shape))
        tensors[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(blob):
        raise ValueError(f"{path}: trailing bytes after last tensor")
    missing = set(PARAM_NAMES) - set(tensors)
    if missing:
        raise ValueError(f"{path}: missing tensors {sorted(missing)}")
    return NetworkParams.from_dict(tensors), stored
