"""Variational ECVQ compressors with decoder side information.

Two variants share one decoder g(u, y):

* ``marginal``: index model q(u) given directly by K learnable logits; the
  rate is what a classic entropy coder would spend.
* ``conditional``: index model q(u | y) produced by a dense net from y; the
  rate is what an ideal Slepian-Wolf coder would spend.

The encoder has no parameters of its own. For each x it draws N samples of
y ~ p(y|x), scores every index k by the sample-mean Lagrangian

    l(k, x) = 1/N sum_n [ -log2 q(k | .) + lam * (x - g(k, y_n))^2 ]

and returns the argmin (ties go to the smaller index). Indices are 0-based.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ad
from .ad import DenseNetSpec, Node, ParamStore
from .sources import SourceSpec, sample_conditional_y

MARGINAL = "marginal"
CONDITIONAL = "conditional"
VARIANTS = (MARGINAL, CONDITIONAL)

LN2 = np.log(2.0)

# rows handed to one decoder evaluation inside the encoder
_ENCODE_ROW_BLOCK = 1 << 16


@dataclass
class WzModel:
    variant: str
    K: int
    lam: float
    n_samples: int
    decoder: DenseNetSpec
    prior_net: DenseNetSpec | None
    store: ParamStore = field(repr=False)

    @property
    def hidden(self) -> tuple[int, ...]:
        return self.decoder.widths[1:-1]

    def meta(self) -> dict:
        return {
            "variant": self.variant,
            "K": self.K,
            "lambda": self.lam,
            "n_samples": self.n_samples,
            "hidden": list(self.hidden),
            "negative_slope": self.decoder.negative_slope,
        }


def build_model(variant: str, K: int = 32, lam: float = 1.0, n_samples: int = 24,
                hidden=(100, 100, 100), negative_slope: float = 0.2, seed=0,
                zero_decoder: bool = False) -> WzModel:
    """Fresh model with seeded random weights; marginal logits start at zero."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if K < 1 or n_samples < 1:
        raise ValueError("K and n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    hidden = tuple(int(h) for h in hidden)
    decoder = DenseNetSpec((K + 1, *hidden, 1), negative_slope)
    arrays: dict[str, np.ndarray] = {}
    prior_net = None
    if variant == MARGINAL:
        arrays["logits"] = np.zeros(K)
    else:
        prior_net = DenseNetSpec((1, *hidden, K), negative_slope)
        arrays.update(ad.init_dense(prior_net, "prior", rng))
    dec = ad.init_dense(decoder, "dec", rng)
    if zero_decoder:
        dec = {k: np.zeros_like(v) for k, v in dec.items()}
    arrays.update(dec)
    return WzModel(variant, K, float(lam), int(n_samples), decoder, prior_net, ParamStore(arrays))


def index_embed(k: int, K: int) -> np.ndarray:
    """One-hot representation of index ``k`` (0-based) fed to the decoder."""
    if not 0 <= k < K:
        raise IndexError(f"index {k} out of range for K={K}")
    v = np.zeros(K)
    v[k] = 1.0
    return v


# --- no-grad evaluation -------------------------------------------------------------

def log2_probs(model: WzModel, y=None) -> np.ndarray:
    """log2 q(k) as shape (K,), or log2 q(k | y) as shape y.shape + (K,)."""
    if model.variant == MARGINAL:
        return ad.log_softmax_np(model.store.view("logits")) / LN2
    y = np.asarray(y, dtype=np.float64)
    out = ad.forward(model.prior_net, model.store, "prior", y.reshape(-1, 1))
    return (ad.log_softmax_np(out) / LN2).reshape(y.shape + (model.K,))


def decode(model: WzModel, u, y) -> np.ndarray:
    """Reconstruction g(u, y); ``u`` and ``y`` broadcast against each other."""
    u = np.asarray(u)
    if np.any((u < 0) | (u >= model.K)):
        raise IndexError("index out of range")
    y = np.asarray(y, dtype=np.float64)
    u, y = np.broadcast_arrays(u, y)
    return _decode_flat(model, u.ravel(), y.ravel()).reshape(y.shape)


def _decode_flat(model: WzModel, u: np.ndarray, y: np.ndarray) -> np.ndarray:
    # one-hot @ W0 is a row lookup; computed that way to skip a (rows x K) matmul
    spec, store = model.decoder, model.store
    w0 = store.view("dec.0.w")
    h = np.multiply.outer(y, w0[model.K])
    h += (w0[:model.K] + store.view("dec.0.b"))[u]
    tmp = np.empty_like(h)
    for i in range(1, spec.n_layers):
        np.multiply(h, spec.negative_slope, out=tmp)
        np.maximum(h, tmp, out=h)
        h = h @ store.view(f"dec.{i}.w")
        h += store.view(f"dec.{i}.b")
        if h.shape[1] == tmp.shape[1] or i == spec.n_layers - 1:
            continue
        tmp = np.empty_like(h)
    return h[:, 0]


def _mean_sq_err(model: WzModel, k: np.ndarray, x: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """(1/N) sum_n (x_i - g(k_i, y_in))^2 for each row i, by direct network evaluation."""
    n = ys.shape[1]
    xhat = _decode_flat(model, np.repeat(k, n), ys.ravel()).reshape(ys.shape)
    err = x[:, None] - xhat
    return np.mean(err * err, axis=1)


def _trace_knots(spec: DenseNetSpec, store: ParamStore, prefix: str, slope_y: np.ndarray,
                 offsets: np.ndarray, lo: float, hi: float):
    """Breakpoints of t -> net(offsets[k] + t * slope_y) on [lo, hi] for every row k.

    ``slope_y`` and ``offsets[k]`` give the first pre-activation as an affine
    function of the scalar input t. Returns sorted (k, t) arrays.
    """
    n = offsets.shape[0]

    def preact(k, t, layer):
        z = np.multiply.outer(t, slope_y)
        z += offsets[k]
        for i in range(1, layer + 1):
            z = ad.leaky_relu_np(z, spec.negative_slope) @ store.view(f"{prefix}.{i}.w")
            z += store.view(f"{prefix}.{i}.b")
        return z

    k = np.repeat(np.arange(n), 2)
    t = np.tile([float(lo), float(hi)], n)
    for layer in range(spec.n_layers - 1):
        z = preact(k, t, layer)
        z0, z1 = z[:-1], z[1:]
        same_k = (k[:-1] == k[1:])[:, None]
        m, j = np.nonzero((((z0 < 0) & (z1 > 0)) | ((z0 > 0) & (z1 < 0))) & same_k)
        a, b = z0[m, j], z1[m, j]
        t_new = t[m] + (t[m + 1] - t[m]) * (a / (a - b))
        k = np.concatenate([k, k[m]])
        t = np.concatenate([t, t_new])
        order = np.lexsort((t, k))
        k, t = k[order], t[order]
        keep = np.ones(k.size, dtype=bool)
        keep[1:] = (k[1:] != k[:-1]) | (t[1:] != t[:-1])
        k, t = k[keep], t[keep]
    return k, t


def _padded_range(lo, hi):
    lo, hi = float(lo), float(hi)
    return (lo - 0.5, hi + 0.5) if not hi > lo else (lo, hi)


class DecoderTable:
    """Exact piecewise-linear form of y -> g(k, y) on [lo, hi], for every k.

    With leaky-rectifier hidden layers and a linear output, the decoder is
    piecewise linear in its single real input y once k is fixed. Knots are
    found layer by layer: on each interval between current knots the
    pre-activations of the next layer are affine, so their sign changes are
    located exactly by linear interpolation. The network is then evaluated at
    the knots and queries are answered by linear interpolation, which
    reproduces the network output up to float rounding.
    """

    def __init__(self, model: WzModel, lo: float, hi: float):
        lo, hi = _padded_range(lo, hi)
        store, K = model.store, model.K
        w0 = store.view("dec.0.w")
        k, t = _trace_knots(model.decoder, store, "dec", w0[K], w0[:K] + store.view("dec.0.b"), lo, hi)
        self.lo, self.hi = lo, hi
        self.knots = t
        self.values = _decode_flat(model, k, t)
        self.starts = np.searchsorted(k, np.arange(K + 1))

    def covers(self, y: np.ndarray) -> bool:
        return y.size == 0 or (y.min() >= self.lo and y.max() <= self.hi)

    def __call__(self, k: int, y: np.ndarray) -> np.ndarray:
        lo, hi = self.starts[k], self.starts[k + 1]
        return np.interp(y, self.knots[lo:hi], self.values[lo:hi])

    def decode(self, u: np.ndarray, y: np.ndarray) -> np.ndarray:
        """g(u_i, y_i) for paired arrays."""
        out = np.empty(y.shape)
        for k in np.unique(u):
            sel = u == k
            out[sel] = self(k, y[sel])
        return out


class PriorTable:
    """Exact piecewise-linear form of the conditional index model's logits in y."""

    def __init__(self, model: WzModel, lo: float, hi: float):
        if model.variant != CONDITIONAL:
            raise ValueError("PriorTable needs a conditional model")
        lo, hi = _padded_range(lo, hi)
        store = model.store
        w0 = store.view("prior.0.w")
        _, t = _trace_knots(model.prior_net, store, "prior", w0[0], store.view("prior.0.b")[None], lo, hi)
        self.lo, self.hi = lo, hi
        self.knots = t
        self.logits = ad.forward(model.prior_net, store, "prior", t[:, None])

    def covers(self, y: np.ndarray) -> bool:
        return y.size == 0 or (y.min() >= self.lo and y.max() <= self.hi)

    def log2_probs(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        flat = y.ravel()
        logits = np.empty((flat.size, self.logits.shape[1]))
        for j in range(self.logits.shape[1]):
            logits[:, j] = np.interp(flat, self.knots, self.logits[:, j])
        return (ad.log_softmax_np(logits) / LN2).reshape(y.shape + (-1,))


def rate_terms(model: WzModel, ys: np.ndarray, prior: PriorTable | None = None) -> np.ndarray:
    """Sample-mean -log2 q(k | .) for every candidate: shape (B, K)."""
    if model.variant == MARGINAL:
        return np.broadcast_to(-log2_probs(model), (ys.shape[0], model.K))
    if prior is not None and prior.covers(ys):
        return -np.mean(prior.log2_probs(ys), axis=1)
    return -np.mean(log2_probs(model, ys), axis=1)


def candidate_losses(model: WzModel, x, ys, table: DecoderTable | None = None,
                     exact: bool = False, prior: PriorTable | None = None) -> np.ndarray:
    """(B, K) matrix of sample losses l(k, x_i) with the shared samples ``ys[i]``.

    ``exact=True`` evaluates the decoder network directly instead of through
    its piecewise-linear table.
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    ys = np.asarray(ys, dtype=np.float64).reshape(x.size, -1)
    out = np.array(rate_terms(model, ys, None if exact else prior), dtype=np.float64)
    if exact:
        for k in range(model.K):
            out[:, k] += model.lam * _mean_sq_err(model, np.full(x.size, k), x, ys)
        return out
    if table is None or not table.covers(ys):
        table = DecoderTable(model, ys.min(), ys.max())
    for k in range(model.K):
        err = x[:, None] - table(k, ys)
        out[:, k] += model.lam * np.mean(err * err, axis=1)
    return out


def sample_loss(model: WzModel, k: int, x: float, y_samples) -> float:
    """Monte-Carlo sample loss of sending index ``k`` for source value ``x``."""
    if not 0 <= k < model.K:
        raise IndexError(f"index {k} out of range for K={model.K}")
    ys = np.asarray(y_samples, dtype=np.float64).reshape(1, -1)
    if ys.shape[1] < 1:
        raise ValueError("need at least one y sample")
    rate = rate_terms(model, ys)[0, k]
    dist = _mean_sq_err(model, np.array([k]), np.array([float(x)]), ys)[0]
    return float(rate + model.lam * dist)


def encode_with_samples(model: WzModel, x, ys, table: DecoderTable | None = None,
                        prior: PriorTable | None = None) -> np.ndarray:
    """argmin_k of the sample loss, one shared y-sample set per x; ties -> smaller k."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    ys = np.asarray(ys, dtype=np.float64).reshape(x.size, -1)
    if model.K == 1:
        return np.zeros(x.size, dtype=np.int64)
    if table is None or not table.covers(ys):
        table = DecoderTable(model, ys.min(), ys.max())
    if model.variant == CONDITIONAL and (prior is None or not prior.covers(ys)):
        prior = PriorTable(model, ys.min(), ys.max())
    step = max(1, _ENCODE_ROW_BLOCK // ys.shape[1])
    out = np.empty(x.size, dtype=np.int64)
    for i in range(0, x.size, step):
        losses = candidate_losses(model, x[i:i + step], ys[i:i + step], table, prior=prior)
        out[i:i + step] = np.argmin(losses, axis=1)
    return out


def draw_encoder_samples(source: SourceSpec, x, n: int, rng) -> np.ndarray:
    """y-samples for the encoder; a point-mass p(y|x) needs only one column."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    return sample_conditional_y(source, x, 1 if source.deterministic_side_info else n, rng)


def encode(model: WzModel, x, source: SourceSpec, rng, n_samples: int | None = None) -> np.ndarray:
    """Encode source values with fresh conditional samples from ``rng``."""
    n = model.n_samples if n_samples is None else n_samples
    return encode_with_samples(model, x, draw_encoder_samples(source, x, n, rng))


# --- recorded losses ----------------------------------------------------------------

def _one_hot(u: np.ndarray, K: int) -> np.ndarray:
    out = np.zeros((u.size, K))
    out[np.arange(u.size), u] = 1.0
    return out


def decoder_node(model: WzModel, u: np.ndarray, y: np.ndarray) -> Node:
    """Recorded g(u, y) on the concatenated (one-hot(u), y) input; returns shape (B,)."""
    inp = np.concatenate([_one_hot(u, model.K), y[:, None]], axis=1)
    out = ad.forward_node(model.decoder, model.store, "dec", inp)
    return ad.reshape(out, (u.size,))


def log2_prob_node(model: WzModel, u: np.ndarray, y: np.ndarray) -> Node:
    """Recorded log2 q(u_i | y_i) (or log2 q(u_i)) per row."""
    if model.variant == MARGINAL:
        lp = ad.log_softmax(ad.param(model.store, "logits"))
        return ad.take(lp, u) * (1.0 / LN2)
    logits = ad.forward_node(model.prior_net, model.store, "prior", y[:, None])
    return ad.take(ad.log_softmax(logits), u) * (1.0 / LN2)


def batch_loss(model: WzModel, x, y, u) -> Node:
    """Batch mean of -log2 q(u | .) + lam (x - g(u, y))^2 with the indices held fixed.

    ``u`` is the encoder output for ``x``; the min over candidates is not
    differentiated, so gradients flow through the selected branch only.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    u = np.asarray(u, dtype=np.int64).ravel()
    rate = -log2_prob_node(model, u, y)
    err = x - decoder_node(model, u, y)
    return ad.mean(rate + model.lam * ad.square(err))


def sample_loss_node(model: WzModel, u, x, ys) -> Node:
    """Recorded batch mean of the N-sample loss l(u_i, x_i)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    ys = np.asarray(ys, dtype=np.float64).reshape(x.size, -1)
    n = ys.shape[1]
    uu = np.repeat(np.asarray(u, dtype=np.int64).ravel(), n)
    rate = -log2_prob_node(model, uu, ys.ravel())
    err = np.repeat(x, n) - decoder_node(model, uu, ys.ravel())
    return ad.mean(rate + model.lam * ad.square(err))


def distortion_node(model: WzModel, u, x, ys) -> Node:
    """Recorded mean of (x_i - g(u_i, y_in))^2 over all rows and samples."""
    x = np.asarray(x, dtype=np.float64).ravel()
    ys = np.asarray(ys, dtype=np.float64).reshape(x.size, -1)
    n = ys.shape[1]
    uu = np.repeat(np.asarray(u, dtype=np.int64).ravel(), n)
    err = np.repeat(x, n) - decoder_node(model, uu, ys.ravel())
    return ad.mean(ad.square(err))
