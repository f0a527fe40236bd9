"""Dense networks with hand-written backpropagation, Adam and gradient checking."""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from garmentforge import io

ACTIVATIONS = ("relu", "linear")


class NetworkError(ValueError):
    pass


class DenseNet:
    """Stack of affine layers ``y = act(x @ W + b)``.

    ``dims`` lists the layer widths including input and output. Hidden layers
    default to relu and the output layer to linear.
    """

    def __init__(self, dims, activations=None, rng=None, dtype=np.float64, init="he", out_scale=1.0):
        dims = [int(d) for d in dims]
        if len(dims) < 2 or min(dims) < 1:
            raise NetworkError(f"bad layer dims {dims}")
        n_layers = len(dims) - 1
        if activations is None:
            activations = ["relu"] * (n_layers - 1) + ["linear"]
        if len(activations) != n_layers or any(a not in ACTIVATIONS for a in activations):
            raise NetworkError(f"need {n_layers} activations from {ACTIVATIONS}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.dtype = np.dtype(dtype)
        self.activations = list(activations)
        self.weights = []
        self.biases = []
        for k, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            if init == "zero":
                w = np.zeros((a, b))
            elif init == "he":
                limit = np.sqrt(6.0 / a)
                w = rng.uniform(-limit, limit, (a, b))
                if k == n_layers - 1:
                    w *= out_scale
            else:
                raise NetworkError(f"unknown init {init!r}")
            self.weights.append(w.astype(self.dtype))
            self.biases.append(np.zeros(b, dtype=self.dtype))

    @property
    def dims(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def input_dim(self):
        return self.weights[0].shape[0]

    @property
    def output_dim(self):
        return self.weights[-1].shape[1]

    def params(self):
        """Parameter arrays in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def param_names(self):
        return [f"{kind}{k}" for k in range(len(self.weights)) for kind in ("W", "b")]

    def n_params(self):
        return sum(p.size for p in self.params())

    def forward(self, x):
        """Returns ``(y, cache)``; ``cache['acts'][k]`` is the input to layer k."""
        x = np.asarray(x)
        if x.ndim == 1:
            x = x[None]
        if x.shape[1] != self.input_dim:
            raise NetworkError(f"input width {x.shape[1]} != {self.input_dim}")
        if not np.isfinite(x).all():
            raise NetworkError("non-finite network input")
        h = x.astype(self.dtype, copy=False)
        acts, pre = [], []
        for w, b, act in zip(self.weights, self.biases, self.activations):
            acts.append(h)
            z = h @ w + b
            pre.append(z)
            h = np.maximum(z, 0) if act == "relu" else z
        return h, {"acts": acts, "pre": pre, "out": h}

    def __call__(self, x):
        return self.forward(x)[0]

    def hidden(self, cache, k):
        """Post-activation output of layer ``k`` (input to layer k + 1)."""
        return cache["acts"][k + 1] if k + 1 < len(self.weights) else cache["out"]

    def backward(self, cache, grad_out, hidden_grads=None):
        """Reverse pass. Returns ``(param_grads, grad_input)``.

        ``hidden_grads`` maps a layer index to an extra gradient on that layer's
        post-activation output (used for skip connections).
        """
        if cache is None or "acts" not in cache:
            raise NetworkError("backward needs the cache from forward")
        g = np.asarray(grad_out, dtype=self.dtype)
        if g.ndim == 1:
            g = g[None]
        hidden_grads = hidden_grads or {}
        grads = [None] * (2 * len(self.weights))
        for k in range(len(self.weights) - 1, -1, -1):
            if k in hidden_grads:
                g = g + hidden_grads[k]
            if self.activations[k] == "relu":
                g = g * (cache["pre"][k] > 0)
            grads[2 * k] = cache["acts"][k].T @ g
            grads[2 * k + 1] = g.sum(0)
            g = g @ self.weights[k].T
        return grads, g

    def copy(self):
        other = DenseNet.__new__(DenseNet)
        other.dtype = self.dtype
        other.activations = list(self.activations)
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        return other

    def astype(self, dtype):
        other = self.copy()
        other.dtype = np.dtype(dtype)
        other.weights = [w.astype(dtype) for w in other.weights]
        other.biases = [b.astype(dtype) for b in other.biases]
        return other


def save_net(net, directory, name):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    dt = "f32" if net.dtype == np.float32 else "f64"
    for pname, p in zip(net.param_names(), net.params()):
        io.save_tensor(d / f"{name}_{pname}.gft", p, dt)
    return {"dims": net.dims, "activations": net.activations, "dtype": dt}


def load_net(directory, name, info):
    d = Path(directory)
    dtype = np.float32 if info["dtype"] == "f32" else np.float64
    net = DenseNet(info["dims"], info["activations"], dtype=dtype, init="zero")
    for k in range(len(net.weights)):
        net.weights[k] = io.load_tensor(d / f"{name}_W{k}.gft").astype(dtype)
        net.biases[k] = io.load_tensor(d / f"{name}_b{k}.gft").astype(dtype)
    return net


class Adam:
    """Adam with bias correction; updates parameter arrays in place."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        if len(params) != len(self.m):
            raise NetworkError("parameter list does not match optimizer state")
        for p, g, m in zip(params, grads, self.m):
            if p.shape != g.shape or p.shape != m.shape:
                raise NetworkError(f"shape mismatch {p.shape} / {g.shape}")
        if not all(np.isfinite(g).all() for g in grads):
            raise NetworkError("non-finite gradient; step refused")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        step = self.lr * np.sqrt(c2) / c1
        eps = self.eps * np.sqrt(c2)
        for p, g, m, v in zip(params, grads, self.m, self.v):
            g = g.astype(p.dtype, copy=False)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= step * m / (np.sqrt(v) + eps)
        for p in params:
            if not np.isfinite(p).all():
                raise NetworkError("non-finite parameter after optimizer step")
        return params

    def state(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t}


def adam_step(state, params, grads):
    return state.step(params, grads)


@dataclass
class GradcheckReport:
    blocks: dict = field(default_factory=dict)  # name -> relative error of the block

    @property
    def max_rel(self):
        return max(self.blocks.values()) if self.blocks else 0.0

    @property
    def mean_rel(self):
        return float(np.mean(list(self.blocks.values()))) if self.blocks else 0.0

    def merge(self, other, prefix=""):
        for k, v in other.blocks.items():
            key = prefix + k
            self.blocks[key] = max(self.blocks.get(key, 0.0), v)


def gradcheck(fn, params, h=1e-6, max_probes=40, rng=None):
    """Central differences against analytic gradients, per parameter block.

    ``fn(params) -> (value, grads)`` with ``params`` and ``grads`` dicts of
    arrays. Blocks larger than ``max_probes`` entries are probed at random
    entries. The block error is ``|a - n| / max(|a|, |n|)`` over the probed
    entries, with a tiny floor for all-zero blocks.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, grads = fn(params)
    report = GradcheckReport()
    for name, p in params.items():
        flat = p.reshape(-1)
        analytic = np.asarray(grads[name], dtype=np.float64).reshape(-1)
        idx = np.arange(flat.size) if flat.size <= max_probes else rng.choice(flat.size, max_probes, replace=False)
        numeric = np.empty(len(idx))
        for n, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            fp = fn(params)[0]
            flat[i] = old - h
            fm = fn(params)[0]
            flat[i] = old
            numeric[n] = (fp - fm) / (2 * h)
        a = analytic[idx]
        denom = max(np.abs(a).max(), np.abs(numeric).max(), 1e-12)
        report.blocks[name] = float(np.abs(a - numeric).max() / denom)
    return report
