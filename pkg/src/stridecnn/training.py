"""Relative-RMS loss, Adam, and the mini-batch training loop."""

import csv
import io
import logging
from dataclasses import dataclass

import numpy as np

from .network import PARAM_NAMES, NetworkParams, backward, forward, init_params, predict
from .tensor import make_rng

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "AdamState",
    "TrainLogEntry",
    "relative_errors",
    "loss",
    "loss_gradient",
    "adam_step",
    "train",
    "stack_inputs",
    "train_log_csv",
]


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 4000
    batch_size: int = 100
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros(cls, params):
        d = params.as_dict() if isinstance(params, NetworkParams) else params
        return cls(m={k: np.zeros_like(a) for k, a in d.items()},
                   v={k: np.zeros_like(a) for k, a in d.items()})


@dataclass(frozen=True)
class TrainLogEntry:
    iteration: int
    loss: float
    precision_cm: float


def relative_errors(y, y_ref):
    y = np.asarray(y, dtype=np.float64)
    y_ref = np.asarray(y_ref, dtype=np.float64)
    if y.shape != y_ref.shape:
        raise ValueError(f"prediction and reference lengths differ: {y.shape} vs {y_ref.shape}")
    if np.any(y_ref <= 0):
        raise ValueError("reference stride lengths must be positive")
    return (y - y_ref) / y_ref


def loss(eps):
    """Root mean square of the relative errors."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.size == 0:
        raise ValueError("loss of an empty batch is undefined")
    return float(np.sqrt(np.mean(eps * eps)))


def loss_gradient(y, y_ref):
    """dE/dy for the relative-RMS loss.

    ``dE/dy_i = eps_i / (N * E * y_ref_i)``. At an exact fit (E = 0) the
    loss has no derivative and the zero vector is returned.
    """
    eps = relative_errors(y, y_ref)
    e = loss(eps)
    if e == 0.0:
        return np.zeros_like(eps)
    return eps / (eps.size * e * np.asarray(y_ref, dtype=np.float64))


def _check_grads(p, g, t):
    if set(g) != set(p):
        raise ValueError(f"gradient keys {sorted(g)} do not match parameter keys {sorted(p)}")
    for name in p:
        if np.shape(g[name]) != np.shape(p[name]):
            raise ValueError(f"gradient for {name} has shape {np.shape(g[name])}, expected {np.shape(p[name])}")
        if not np.all(np.isfinite(g[name])):
            raise FloatingPointError(f"non-finite gradient in {name} at step {t}")


def _adam_update(p, g, m, v, t, config, scratch=None):
    # in place on p, m, v; same arithmetic as the textbook update
    b1, b2 = config.beta1, config.beta2
    step = config.alpha / (1.0 - b1 ** t)
    root_c2 = np.sqrt(1.0 - b2 ** t)
    for name in p:
        gn, mn, vn, pn = g[name], m[name], v[name], p[name]
        tmp = np.empty_like(pn) if scratch is None else scratch[name]
        mn *= b1
        np.multiply(gn, 1.0 - b1, out=tmp)
        mn += tmp
        vn *= b2
        np.multiply(gn, gn, out=tmp)
        tmp *= 1.0 - b2
        vn += tmp
        # sqrt(v_hat) + eps
        np.sqrt(vn, out=tmp)
        tmp /= root_c2
        tmp += config.eps
        np.divide(mn, tmp, out=tmp)
        tmp *= step
        pn -= tmp


def adam_step(params, grads, state, config):
    """One bias-corrected Adam update.

    ``params`` and ``grads`` are :class:`NetworkParams` or plain dicts of
    arrays with matching keys. Returns new ``(params, state)`` of the
    same kind; the inputs are not modified.
    """
    is_net = isinstance(params, NetworkParams)
    p = params.as_dict() if is_net else dict(params)
    g = grads.as_dict() if isinstance(grads, NetworkParams) else dict(grads)
    t = state.t + 1
    _check_grads(p, g, t)
    new_p = {k: np.array(a, dtype=np.float64) for k, a in p.items()}
    new_m = {k: np.array(a, dtype=np.float64) for k, a in state.m.items()}
    new_v = {k: np.array(a, dtype=np.float64) for k, a in state.v.items()}
    _adam_update(new_p, g, new_m, new_v, t, config)
    new_params = NetworkParams.from_dict(new_p) if is_net else new_p
    return new_params, AdamState(m=new_m, v=new_v, t=t)


def stack_inputs(strides):
    """Stack preprocessed strides into ``(B, 6, 256)`` inputs and ``(B,)`` labels."""
    x = np.stack([s.signal for s in strides])
    y_ref = np.array([s.reference_length for s in strides], dtype=np.float64)
    return x, y_ref


def _evaluate(params, x, y_ref, net_config):
    y = predict(params, x, net_config)
    err = y - y_ref
    precision = float(np.std(err, ddof=1)) if err.size > 1 else 0.0
    return loss(relative_errors(y, y_ref)), precision


def train(dataset, config, net_config, rng=None):
    """Fit a network to preprocessed strides.

    Each iteration draws ``batch_size`` strides uniformly with replacement,
    back-propagates the batch loss with dropout active, and applies one
    Adam step. Loss and precision on the whole training set (dropout off)
    are logged at iteration 0, every ``log_every`` iterations, and at the
    end.

    Parameters
    ----------
    dataset : sequence of PreprocessedStride
    config : TrainConfig
    net_config : NetworkConfig
    rng : numpy Generator, optional
        Defaults to a generator seeded with ``config.seed``.

    Returns
    -------
    params : NetworkParams
    log : list of TrainLogEntry
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    definitions = {s.definition for s in dataset}
    if len(definitions) > 1:
        raise ValueError(f"training strides mix stride definitions: {sorted(d.value for d in definitions)}")
    if rng is None:
        rng = make_rng(config.seed)

    x, y_ref = stack_inputs(dataset)
    params = init_params(net_config, rng)
    state = AdamState.zeros(params)
    log = [TrainLogEntry(0, *_evaluate(params, x, y_ref, net_config))]

    n = len(dataset)
    # the loop owns params and state, so Adam runs in place
    p = params.as_dict()
    scratch = {k: np.empty_like(a) for k, a in p.items()}
    for it in range(1, config.iterations + 1):
        idx = rng.integers(0, n, size=config.batch_size)
        y, cache = forward(params, x[idx], net_config, dropout=rng)
        grads = backward(params, cache, loss_gradient(y, y_ref[idx]), net_config).as_dict()
        state.t = it
        _check_grads(p, grads, it)
        _adam_update(p, grads, state.m, state.v, it, config, scratch)
        if it % config.log_every == 0 or it == config.iterations:
            entry = TrainLogEntry(it, *_evaluate(params, x, y_ref, net_config))
            log.append(entry)
            logger.debug("iter %d loss %.5f precision %.3f cm", it, entry.loss, entry.precision_cm)
    return params, log


def train_log_csv(log):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "loss", "precision_cm"])
    for e in log:
        w.writerow([e.iteration, repr(e.loss), repr(e.precision_cm)])
    return buf.getvalue()
