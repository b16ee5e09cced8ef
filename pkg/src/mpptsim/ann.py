"""Zone-prediction network: per-module irradiance -> GMPP voltage window.

A 3-10-2 perceptron (tanh hidden layer, linear outputs) trained by
full-batch gradient descent with heavy-ball momentum on oracle-labelled
zones. Irradiances are sorted before entering the network: the string
curve does not depend on the order of modules in series, and the sorted
representation makes the zone map far easier to fit.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DivergenceError
from .pvmodel import ModuleSpec, ShadingPattern, find_gmpp, module_voltage, string_curve

log = logging.getLogger(__name__)

FORMAT_TAG = "mpptsim-mlp 1"


@dataclass(frozen=True)
class ZoneSample:
    irradiances: tuple
    v_min: float
    v_max: float
    v_gmpp: float = math.nan
    widened: bool = False

    def __post_init__(self):
        if not self.v_min < self.v_max:
            raise ValueError("zone requires v_min < v_max")


@dataclass
class Mlp:
    sizes: tuple
    weights: list
    biases: list
    g_scale: float = 1000.0
    v_scale: float = 100.0
    sort_inputs: bool = True
    train_mse: float | None = None
    history: list = field(default_factory=list, repr=False)

    @classmethod
    def init(cls, sizes=(3, 10, 2), seed=0, v_scale=100.0, g_scale=1000.0):
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            weights.append(rng.normal(0.0, 1.0 / math.sqrt(n_in), (n_out, n_in)))
            biases.append(np.zeros(n_out))
        return cls(tuple(sizes), weights, biases, g_scale, v_scale)

    def copy(self):
        return Mlp(self.sizes, [w.copy() for w in self.weights],
                   [b.copy() for b in self.biases], self.g_scale, self.v_scale,
                   self.sort_inputs, self.train_mse, list(self.history))

    def forward(self, x):
        """Normalized forward pass; ``x`` has shape (batch, n_in)."""
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            h = z if k == last else np.tanh(z)
            acts.append(h)
        return h, acts

    def loss_and_grads(self, x, y):
        out, acts = self.forward(x)
        diff = out - y
        loss = float(np.mean(diff ** 2))
        delta = 2.0 * diff / diff.size
        gw = [None] * len(self.weights)
        gb = [None] * len(self.weights)
        for k in range(len(self.weights) - 1, -1, -1):
            gw[k] = delta.T @ acts[k]
            gb[k] = delta.sum(axis=0)
            if k > 0:
                delta = (delta @ self.weights[k]) * (1.0 - acts[k] ** 2)
        return loss, gw, gb

    def normalize_inputs(self, g):
        x = np.atleast_2d(np.asarray(g, dtype=float)) / self.g_scale
        return np.sort(x, axis=1) if self.sort_inputs else x

    def predict_raw(self, g):
        out, _ = self.forward(self.normalize_inputs(g))
        return out * self.v_scale

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(FORMAT_TAG + "\n")
            fh.write("sizes " + " ".join(str(s) for s in self.sizes) + "\n")
            fh.write(f"g_scale {self.g_scale!r}\n")
            fh.write(f"v_scale {self.v_scale!r}\n")
            fh.write(f"sort_inputs {int(self.sort_inputs)}\n")
            for k, (w, b) in enumerate(zip(self.weights, self.biases)):
                fh.write(f"W{k} " + " ".join(repr(float(x)) for x in w.ravel()) + "\n")
                fh.write(f"b{k} " + " ".join(repr(float(x)) for x in b.ravel()) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
        if not lines or lines[0] != FORMAT_TAG:
            raise ConfigError(f"{path}: not a network file (missing '{FORMAT_TAG}')")
        fields = {}
        for ln in lines[1:]:
            key, _, rest = ln.partition(" ")
            fields[key] = rest.split()
        sizes = tuple(int(s) for s in fields["sizes"])
        weights, biases = [], []
        for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            weights.append(np.array([float(x) for x in fields[f"W{k}"]]).reshape(n_out, n_in))
            biases.append(np.array([float(x) for x in fields[f"b{k}"]]))
        return cls(sizes, weights, biases, float(fields["g_scale"][0]),
                   float(fields["v_scale"][0]),
                   bool(int(fields.get("sort_inputs", ["1"])[0])))


def conducting_modules(specs, pattern, v_gmpp, p_gmpp, v_bypass=0.0) -> int:
    """Number of modules not bypassed at the GMPP current."""
    if v_gmpp <= 0.0:
        return 0
    i_g = p_gmpp / v_gmpp
    k = 0
    for spec, g in zip(specs, pattern.irradiances):
        if g > 0.0 and float(module_voltage(spec, g, pattern.temperature, i_g)) > -v_bypass:
            k += 1
    return k


def zone_for(specs: Sequence[ModuleSpec], pattern: ShadingPattern,
             half_width_frac: float = 0.15, n_samples: int = 2000) -> ZoneSample:
    """Oracle zone label for one shading pattern.

    The nominal zone is centred on ``k * v_mp_stc`` for ``k`` conducting
    modules; when the GMPP falls outside, the zone is extended to keep a
    half-width margin around the GMPP voltage.
    """
    curve = string_curve(specs, pattern, n_samples)
    v_g, p_g = find_gmpp(curve)
    v_mp = specs[0].v_mp_stc
    hw = half_width_frac * v_mp
    k = max(conducting_modules(specs, pattern, v_g, p_g), 1)
    lo, hi = k * v_mp - hw, k * v_mp + hw
    widened = not lo <= v_g <= hi
    if widened:
        log.debug("GMPP %.2f V outside zone %d [%.2f, %.2f] for %s; widening",
                  v_g, k, lo, hi, pattern.irradiances)
        lo, hi = min(lo, v_g - hw), max(hi, v_g + hw)
    lo = max(lo, 0.0)
    hi = min(hi, curve.v_oc)
    return ZoneSample(pattern.irradiances, float(lo), float(hi), float(v_g), widened)


def generate_zone_dataset(specs, patterns, half_width_frac=0.15):
    data = [zone_for(specs, p, half_width_frac) for p in patterns]
    n = sum(s.widened for s in data)
    if n:
        log.warning("%d of %d zone labels widened to contain an off-centre GMPP",
                    n, len(data))
    return data


def irradiance_grid(levels=(200, 400, 600, 800, 1000), n_modules=3, temperature=298.15):
    return [ShadingPattern(g, temperature)
            for g in itertools.product(levels, repeat=n_modules)]


def _arrays(mlp: Mlp, data):
    x = mlp.normalize_inputs([s.irradiances for s in data])
    y = np.array([(s.v_min, s.v_max) for s in data], dtype=float) / mlp.v_scale
    return x, y


def train(mlp: Mlp, data, epochs: int = 60000, learning_rate: float = 0.3,
          momentum: float = 0.9) -> Mlp:
    """Full-batch gradient descent on normalized mean squared error.

    Returns a trained copy whose ``history`` holds the per-epoch loss and
    ``train_mse`` the final training loss. ``momentum=0`` gives plain
    steepest descent.
    """
    if not data:
        raise ValueError("training data is empty")
    net = mlp.copy()
    x, y = _arrays(net, data)
    vel_w = [np.zeros_like(w) for w in net.weights]
    vel_b = [np.zeros_like(b) for b in net.biases]
    hist = []
    for epoch in range(epochs):
        with np.errstate(over="ignore", invalid="ignore"):
            loss, gw, gb = net.loss_and_grads(x, y)
        if not math.isfinite(loss):
            raise DivergenceError(
                f"loss became non-finite at epoch {epoch}; lower the learning rate "
                f"(currently {learning_rate})")
        hist.append(loss)
        for k in range(len(net.weights)):
            vel_w[k] = momentum * vel_w[k] - learning_rate * gw[k]
            vel_b[k] = momentum * vel_b[k] - learning_rate * gb[k]
            net.weights[k] += vel_w[k]
            net.biases[k] += vel_b[k]
    final, _, _ = net.loss_and_grads(x, y)
    if not math.isfinite(final):
        raise DivergenceError("final loss is non-finite; lower the learning rate")
    hist.append(final)
    net.history = hist
    net.train_mse = final
    return net


def mse(mlp: Mlp, data) -> float:
    x, y = _arrays(mlp, data)
    return mlp.loss_and_grads(x, y)[0]


def predict_zone(mlp: Mlp, g, v_max_limit: float | None = None) -> tuple[float, float]:
    """Denormalized zone for one irradiance vector; inverted outputs are swapped."""
    lo, hi = (float(v) for v in mlp.predict_raw(g)[0])
    if lo >= hi:
        log.warning("network predicted inverted zone (%.2f, %.2f); swapping", lo, hi)
        lo, hi = hi, lo
    lo = max(lo, 0.0)
    if v_max_limit is not None:
        hi = min(hi, v_max_limit)
        lo = min(lo, v_max_limit)
    if not lo < hi:
        # extrapolation far outside the training grid; fall back to the full range
        log.warning("network zone (%.2f, %.2f) collapsed after clipping; "
                    "using the full voltage range", lo, hi)
        lo, hi = 0.0, v_max_limit if v_max_limit is not None else max(hi, 1.0)
    return lo, hi


def containment_rate(mlp: Mlp, data) -> float:
    """Share of samples whose GMPP voltage lies inside the raw predicted zone.

    Scored on the network output itself (inverted pairs swapped), without
    the clipping fallback of ``predict_zone``.
    """
    pred = np.sort(mlp.predict_raw([s.irradiances for s in data]), axis=1)
    v = np.array([s.v_gmpp for s in data])
    return float(np.mean((pred[:, 0] <= v) & (v <= pred[:, 1])))
