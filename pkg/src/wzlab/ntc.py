"""Scalar nonlinear transform coding with a side-information decoder.

Analysis f(x) -> latent z, uniform rounding, synthesis g(round(z), y). The
latent is entropy coded with a learned CDF m(.), so an integer latent u
costs -log2(m(u + 1/2) - m(u - 1/2)) bits. During training the rounding is
replaced by additive uniform dither, then by hard rounding with an identity
gradient once training progress reaches ``t_hard``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ad
from .ad import DenseNetSpec, Node, ParamStore

LIKELIHOOD_BOUND = 1e-9
DENSITY_FILTERS = (1, 3, 3, 3, 1)


@dataclass
class NtcModel:
    lam: float
    analysis: DenseNetSpec
    synthesis: DenseNetSpec
    store: ParamStore = field(repr=False)
    t_hard: float = 0.8
    density_filters: tuple[int, ...] = DENSITY_FILTERS

    def meta(self) -> dict:
        return {
            "variant": "ntc",
            "lambda": self.lam,
            "hidden": list(self.analysis.widths[1:-1]),
            "negative_slope": self.analysis.negative_slope,
            "t_hard": self.t_hard,
        }


def build_ntc(lam: float = 1.0, hidden=(100, 100, 100), negative_slope: float = 0.2,
              seed=0, t_hard: float = 0.8) -> NtcModel:
    rng = np.random.default_rng(seed)
    hidden = tuple(int(h) for h in hidden)
    analysis = DenseNetSpec((1, *hidden, 1), negative_slope)
    synthesis = DenseNetSpec((2, *hidden, 1), negative_slope)
    arrays = {}
    arrays.update(ad.init_dense(analysis, "ana", rng))
    arrays.update(ad.init_dense(synthesis, "syn", rng))
    arrays.update(_init_density(DENSITY_FILTERS, rng))
    return NtcModel(float(lam), analysis, synthesis, ParamStore(arrays), t_hard)


def _init_density(filters, rng, init_scale: float = 10.0) -> dict[str, np.ndarray]:
    # factorized monotone density: softplus(H) > 0
    # and a gated tanh with |tanh(a)| < 1 keep every layer increasing
    arrays = {}
    n = len(filters) - 1
    scale = init_scale ** (1.0 / n)
    for i in range(n):
        f_in, f_out = filters[i], filters[i + 1]
        h_init = np.log(np.expm1(1.0 / scale / f_out))
        arrays[f"dens.{i}.h"] = np.full((f_in, f_out), h_init)
        arrays[f"dens.{i}.b"] = rng.uniform(-0.5, 0.5, size=f_out)
        if i < n - 1:
            arrays[f"dens.{i}.a"] = np.zeros(f_out)
    return arrays


# --- density model ------------------------------------------------------------------

def cdf_logits_np(model: NtcModel, z: np.ndarray) -> np.ndarray:
    """Logit of the learned CDF at each point of ``z`` (no recording)."""
    store, n = model.store, len(model.density_filters) - 1
    h = np.asarray(z, dtype=np.float64).reshape(-1, 1)
    for i in range(n):
        h = h @ np.logaddexp(0.0, store.view(f"dens.{i}.h")) + store.view(f"dens.{i}.b")
        if i < n - 1:
            h = h + np.tanh(store.view(f"dens.{i}.a")) * np.tanh(h)
    return h[:, 0]


def cdf_np(model: NtcModel, z) -> np.ndarray:
    return ad.sigmoid_np(cdf_logits_np(model, z))


def cdf_logits_node(model: NtcModel, z: Node) -> Node:
    store, n = model.store, len(model.density_filters) - 1
    h = ad.reshape(z, (z.shape[0], 1))
    for i in range(n):
        h = ad.matmul(h, ad.softplus(ad.param(store, f"dens.{i}.h"))) + ad.param(store, f"dens.{i}.b")
        if i < n - 1:
            h = h + ad.tanh(ad.param(store, f"dens.{i}.a")) * ad.tanh(h)
    return ad.reshape(h, (z.shape[0],))


def _mass_np(model: NtcModel, v: np.ndarray) -> np.ndarray:
    lower = cdf_logits_np(model, v - 0.5)
    upper = cdf_logits_np(model, v + 0.5)
    s = -np.sign(lower + upper)
    s[s == 0] = 1.0
    p = s * (ad.sigmoid_np(s * upper) - ad.sigmoid_np(s * lower))
    return np.maximum(p, LIKELIHOOD_BOUND)


def _mass_node(model: NtcModel, v: Node) -> Node:
    lower = cdf_logits_node(model, v - 0.5)
    upper = cdf_logits_node(model, v + 0.5)
    # evaluate the difference in whichever tail keeps it away from 1 - 1
    s = -np.sign(lower.value + upper.value)
    s[s == 0] = 1.0
    p = (ad.sigmoid(upper * s) - ad.sigmoid(lower * s)) * s
    return ad.lower_bound(p, LIKELIHOOD_BOUND)


def latent_rate_bits(model: NtcModel, u) -> np.ndarray:
    """Bits for integer latents under the learned CDF."""
    return -np.log2(_mass_np(model, np.asarray(u, dtype=np.float64)))


# --- quantization proxy -------------------------------------------------------------

def quantize_proxy(z: Node, t: float, rng: np.random.Generator, t_hard: float = 0.8) -> Node:
    """Dithered quantization before ``t_hard``, straight-through rounding after."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("training progress t must be in [0, 1]")
    if t < t_hard:
        return z + rng.uniform(-0.5, 0.5, size=z.shape)
    return z + (np.round(z.value) - z.value)


# --- forward passes -----------------------------------------------------------------

def analysis_np(model: NtcModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    return ad.forward(model.analysis, model.store, "ana", x[:, None])[:, 0]


def encode(model: NtcModel, x) -> np.ndarray:
    return np.round(analysis_np(model, x)).astype(np.int64)


def decode(model: NtcModel, u, y) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    inp = np.stack([u, y], axis=1)
    return ad.forward(model.synthesis, model.store, "syn", inp)[:, 0]


def ntc_loss(model: NtcModel, x, y, t: float, rng: np.random.Generator,
             noise: np.ndarray | None = None) -> Node:
    """Batch mean of -log2 P(z~) + lam (x - g(z~, y))^2.

    ``noise`` fixes the dither (used by gradient checks); otherwise it is drawn
    from ``rng``.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    z = ad.reshape(ad.forward_node(model.analysis, model.store, "ana", x[:, None]), (x.size,))
    if noise is not None and t < model.t_hard:
        zt = z + noise
    else:
        zt = quantize_proxy(z, t, rng, model.t_hard)
    rate = ad.log(_mass_node(model, zt)) * (-1.0 / np.log(2.0))
    inp = ad.concat_cols([ad.reshape(zt, (x.size, 1)), y[:, None]])
    xhat = ad.reshape(ad.forward_node(model.synthesis, model.store, "syn", inp), (x.size,))
    return ad.mean(rate + model.lam * ad.square(x - xhat))
