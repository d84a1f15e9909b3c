"""Dense residual networks with GLU conditioning, reverse-mode gradients and Adam.

All parameters of a network live in one flat float64 array (:class:`ParameterStore`);
layers hold names into it. Gradients use the same flat layout, so the optimizer and
checkpoint code never need to know about layers.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from fmpe import kernels
from fmpe.errors import ConfigError, NumericError, ShapeError, StorageError

CHECKPOINT_MAGIC = "# fmpe checkpoint v1"
_BINARY_MARKER = "---\n"


class ParameterStore:
    """Flat parameter vector with named, shaped views."""

    def __init__(self, specs):
        self.offsets = {}
        start = 0
        for name, shape in specs:
            if name in self.offsets:
                raise ValueError(f"duplicate parameter name {name!r}")
            size = int(np.prod(shape))
            self.offsets[name] = (start, start + size, tuple(shape))
            start += size
        if start == 0:
            raise ValueError("a parameter store needs at least one parameter")
        self.data = np.zeros(start)

    @property
    def count(self):
        return self.data.size

    def view(self, name, flat=None):
        """View of parameter ``name`` into ``flat`` (default: the parameters themselves)."""
        lo, hi, shape = self.offsets[name]
        buf = self.data if flat is None else flat
        return buf[lo:hi].reshape(shape)

    def zeros_like(self):
        return np.zeros_like(self.data)

    def check_finite(self):
        if not np.all(np.isfinite(self.data)):
            bad = int(np.flatnonzero(~np.isfinite(self.data))[0])
            raise NumericError("non-finite parameter", index=bad)


# ----------------------------------------------------------------------------
# activations


def _tanh(z):
    a = np.tanh(z)
    return a, 1.0 - a * a


def _relu(z):
    return np.maximum(z, 0.0), (z > 0).astype(np.float64)


def _silu(z):
    s = kernels.sigmoid(z)
    return z * s, s * (1.0 + z * (1.0 - s))


def _gelu(z):
    return kernels.gelu(z)


ACTIVATIONS = {"gelu": _gelu, "tanh": _tanh, "relu": _relu, "silu": _silu}


def get_activation(name):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


# ----------------------------------------------------------------------------
# layers


class Dense:
    def __init__(self, name, n_in, n_out):
        self.name, self.n_in, self.n_out = name, n_in, n_out
        self.w_key, self.b_key = f"{name}.weight", f"{name}.bias"

    def specs(self):
        return [(self.w_key, (self.n_out, self.n_in)), (self.b_key, (self.n_out,))]

    def init(self, store, rng):
        bound = 1.0 / np.sqrt(self.n_in)
        store.view(self.w_key)[...] = rng.uniform(-bound, bound, size=(self.n_out, self.n_in))
        store.view(self.b_key)[...] = rng.uniform(-bound, bound, size=self.n_out)

    def forward(self, store, h):
        return h @ store.view(self.w_key).T + store.view(self.b_key)

    def backward(self, store, grad, h, dz):
        store.view(self.w_key, grad)[...] += dz.T @ h
        store.view(self.b_key, grad)[...] += dz.sum(axis=0)
        return dz @ store.view(self.w_key)

    def tangent(self, store, dh):
        return dh @ store.view(self.w_key).T


def glu_condition(hidden, context, weight, bias):
    """Gate ``hidden`` by ``sigmoid(weight @ context + bias)`` elementwise.

    ``hidden`` is ``(..., h)``, ``context`` is ``(..., c)``, ``weight`` is ``(h, c)``.
    """
    hidden = np.asarray(hidden, dtype=np.float64)
    context = np.asarray(context, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    if weight.ndim != 2 or weight.shape[0] != hidden.shape[-1] or weight.shape[1] != context.shape[-1]:
        raise ShapeError(
            f"gate weight {weight.shape} does not map context width {context.shape[-1]} "
            f"to hidden width {hidden.shape[-1]}"
        )
    return hidden * kernels.sigmoid(context @ weight.T + bias)


class ResidualBlock:
    """``h + gate(c) * W2 act(W1 act(h))``; the gate is omitted for ungated blocks."""

    def __init__(self, name, width, activation, context_dim=None):
        self.name = name
        self.act = get_activation(activation)
        self.lin1 = Dense(f"{name}.lin1", width, width)
        self.lin2 = Dense(f"{name}.lin2", width, width)
        self.gate = None if context_dim is None else Dense(f"{name}.gate", context_dim, width)

    def layers(self):
        return [self.lin1, self.lin2] + ([self.gate] if self.gate else [])

    def forward(self, store, h, c=None):
        a0, d0 = self.act(h)
        a1, d1 = self.act(self.lin1.forward(store, a0))
        z2 = self.lin2.forward(store, a1)
        s = None
        if self.gate is not None:
            s = kernels.sigmoid(self.gate.forward(store, c))
            r = z2 * s
        else:
            r = z2
        return h + r, (a0, d0, a1, d1, z2, s, c)

    def backward(self, store, grad, cache, dout):
        a0, d0, a1, d1, z2, s, c = cache
        dc = None
        if self.gate is not None:
            dz2 = dout * s
            dc = self.gate.backward(store, grad, c, dout * z2 * s * (1.0 - s))
        else:
            dz2 = dout
        da1 = self.lin2.backward(store, grad, a1, dz2)
        da0 = self.lin1.backward(store, grad, a0, da1 * d1)
        return dout + da0 * d0, dc

    def jvp(self, store, h, c, th, tc):
        """Forward pass plus tangents; ``th``/``tc`` are ``(k, N, .)`` or ``None`` for zero."""
        a0, d0 = self.act(h)
        z1 = self.lin1.forward(store, a0)
        a1, d1 = self.act(z1)
        z2 = self.lin2.forward(store, a1)
        tz2 = None
        if th is not None:
            tz2 = self.lin2.tangent(store, d1 * self.lin1.tangent(store, d0 * th))
        if self.gate is None:
            return h + z2, (None if th is None else th + tz2)
        s = kernels.sigmoid(self.gate.forward(store, c))
        out = h + z2 * s
        if th is None and tc is None:
            return out, None
        tr = 0.0
        if tz2 is not None:
            tr = tz2 * s
        if tc is not None:
            tr = tr + z2 * (s * (1.0 - s)) * self.gate.tangent(store, tc)
        return out, (tr if th is None else th + tr)


# ----------------------------------------------------------------------------
# networks


@dataclass
class ResidualMLPConfig:
    input_dim: int
    output_dim: int
    hidden_widths: tuple = (64, 128, 128, 64)
    activation: str = "gelu"
    conditioning_mode: str = "glu"
    glu_start_block: int = 0
    context_widths: tuple = (16, 32, 64)

    def __post_init__(self):
        self.hidden_widths = tuple(int(w) for w in self.hidden_widths)
        self.context_widths = tuple(int(w) for w in self.context_widths)
        if self.output_dim < 1 or self.input_dim < 1:
            raise ConfigError("input_dim and output_dim must be >= 1")
        if not self.hidden_widths:
            raise ConfigError("hidden_widths must be nonempty")
        if self.conditioning_mode not in ("glu", "concat"):
            raise ConfigError(f"conditioning_mode must be 'glu' or 'concat', got {self.conditioning_mode!r}")
        if self.conditioning_mode == "glu":
            if not 0 <= self.glu_start_block < len(self.hidden_widths):
                raise ConfigError("glu_start_block must index an existing block")
            if not self.context_widths:
                raise ConfigError("context_widths must be nonempty in glu mode")
        get_activation(self.activation)

    @property
    def context_dim(self):
        """Width of the (t, theta) embedding fed to the gates."""
        return self.context_widths[-1] if self.conditioning_mode == "glu" else 0

    def to_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(str(w) for w in v) if isinstance(v, tuple) else str(v)
        return out

    @classmethod
    def from_dict(cls, d):
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            raw = d[f.name]
            if f.name in ("hidden_widths", "context_widths"):
                kw[f.name] = tuple(int(w) for w in str(raw).split(",") if w.strip())
            elif f.name in ("input_dim", "output_dim", "glu_start_block"):
                kw[f.name] = int(raw)
            else:
                kw[f.name] = str(raw)
        return cls(**kw)


def _stack(first, rest_widths, prefix, activation, context_dim=None, gated_from=0):
    """Residual trunk: projection into the first width, then blocks with projections between width changes."""
    layers = []
    prev = first
    for i, w in enumerate(rest_widths):
        proj = Dense(f"{prefix}.proj{i}", prev, w) if (i == 0 or w != prev) else None
        block = ResidualBlock(
            f"{prefix}.block{i}", w, activation,
            context_dim if (context_dim is not None and i >= gated_from) else None,
        )
        layers.append((proj, block))
        prev = w
    return layers


class VectorFieldNetwork:
    """Map ``(t, theta, x) -> v`` with shape of ``theta``.

    In ``glu`` mode the trunk runs on ``x`` and every block from ``glu_start_block``
    on is gated by an embedding of ``(t, theta)``. In ``concat`` mode the trunk runs
    on the concatenated ``(t, theta, x)`` and no gates exist.
    """

    def __init__(self, config, seed=0):
        self.config = config
        cfg = config
        n, m = cfg.output_dim, cfg.input_dim
        if cfg.conditioning_mode == "glu":
            self.embed = _stack(1 + n, cfg.context_widths, "embed", cfg.activation)
            self.trunk = _stack(m, cfg.hidden_widths, "trunk", cfg.activation,
                                context_dim=cfg.context_dim, gated_from=cfg.glu_start_block)
        else:
            self.embed = []
            self.trunk = _stack(1 + n + m, cfg.hidden_widths, "trunk", cfg.activation)
        self.head = Dense("head", cfg.hidden_widths[-1], n)
        specs = []
        for layer in self._dense_layers():
            specs.extend(layer.specs())
        self.params = ParameterStore(specs)
        self.seed = seed
        rng = np.random.default_rng(seed)
        for layer in self._dense_layers():
            layer.init(self.params, rng)

    def _dense_layers(self):
        out = []
        for proj, block in self.embed + self.trunk:
            if proj is not None:
                out.append(proj)
            out.extend(block.layers())
        out.append(self.head)
        return out

    @property
    def n_params(self):
        return self.params.count

    # -- input handling -------------------------------------------------

    def _prepare(self, t, theta, x):
        n, m = self.config.output_dim, self.config.input_dim
        theta = np.asarray(theta, dtype=np.float64)
        x = np.asarray(x, dtype=np.float64)
        single = theta.ndim == 1
        theta2 = np.atleast_2d(theta)
        if theta2.ndim != 2 or theta2.shape[1] != n:
            raise ShapeError(f"theta must have trailing dimension {n}, got shape {theta.shape}")
        N = theta2.shape[0]
        x2 = np.atleast_2d(x)
        if x2.ndim != 2 or x2.shape[1] != m:
            raise ShapeError(f"x must have trailing dimension {m}, got shape {x.shape}")
        if x2.shape[0] == 1 and N > 1:
            x2 = np.broadcast_to(x2, (N, m))
        elif x2.shape[0] != N:
            raise ShapeError(f"batch mismatch: theta has {N} rows, x has {x2.shape[0]}")
        t_arr = np.asarray(t, dtype=np.float64).reshape(-1)
        if t_arr.size == 1:
            t_arr = np.full(N, t_arr[0])
        elif t_arr.size != N:
            raise ShapeError(f"t must be scalar or length {N}, got {t_arr.size}")
        for name, arr in (("t", t_arr), ("theta", theta2), ("x", x2)):
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"non-finite {name} input")
        return t_arr[:, None], theta2, x2, single

    def _inputs(self, t, theta, x):
        if self.config.conditioning_mode == "glu":
            return np.concatenate([t, theta], axis=1), x
        return None, np.concatenate([t, theta, x], axis=1)

    # -- forward ---------------------------------------------------------

    def _run(self, t, theta, x, keep_cache):
        p = self.params
        ctx_in, h = self._inputs(t, theta, x)
        caches = {"embed": [], "trunk": [], "ctx_in": ctx_in, "h_in": h}
        c = None
        if self.embed:
            c = ctx_in
            for proj, block in self.embed:
                caches["embed"].append(c)
                if proj is not None:
                    c = proj.forward(p, c)
                c, bc = block.forward(p, c)
                caches["embed"].append(bc)
        for proj, block in self.trunk:
            caches["trunk"].append(h)
            if proj is not None:
                h = proj.forward(p, h)
            h, bc = block.forward(p, h, c)
            caches["trunk"].append(bc)
        caches["h_last"] = h
        caches["c"] = c
        out = self.head.forward(p, h)
        return out, (caches if keep_cache else None)

    def __call__(self, t, theta, x):
        return self.forward(t, theta, x)

    def forward(self, t, theta, x):
        t2, th2, x2, single = self._prepare(t, theta, x)
        out, _ = self._run(t2, th2, x2, keep_cache=False)
        return out[0] if single else out

    def forward_with_cache(self, t, theta, x):
        t2, th2, x2, _ = self._prepare(t, theta, x)
        return self._run(t2, th2, x2, keep_cache=True)

    # -- reverse mode ----------------------------------------------------

    def backward_from_cache(self, cache, upstream):
        """Gradient of ``sum(upstream * output)`` with respect to the flat parameters."""
        p = self.params
        grad = p.zeros_like()
        upstream = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
        dh = self.head.backward(p, grad, cache["h_last"], upstream)
        dc_total = None
        trunk = cache["trunk"]
        for i in range(len(self.trunk) - 1, -1, -1):
            proj, block = self.trunk[i]
            h_in, bc = trunk[2 * i], trunk[2 * i + 1]
            dh, dc = block.backward(p, grad, bc, dh)
            if dc is not None:
                dc_total = dc if dc_total is None else dc_total + dc
            if proj is not None:
                dh = proj.backward(p, grad, h_in, dh)
        if self.embed and dc_total is not None:
            emb = cache["embed"]
            dcur = dc_total
            for i in range(len(self.embed) - 1, -1, -1):
                proj, block = self.embed[i]
                c_in, bc = emb[2 * i], emb[2 * i + 1]
                dcur, _ = block.backward(p, grad, bc, dcur)
                if proj is not None:
                    dcur = proj.backward(p, grad, c_in, dcur)
        return grad

    def backward(self, t, theta, x, upstream_grad):
        out, cache = self.forward_with_cache(t, theta, x)
        up = np.asarray(upstream_grad, dtype=np.float64)
        if up.shape[-1] != self.config.output_dim or np.atleast_2d(up).shape[0] != out.shape[0]:
            raise ShapeError(f"upstream gradient shape {up.shape} does not match output {out.shape}")
        return self.backward_from_cache(cache, up)

    # -- forward mode ----------------------------------------------------

    def jvp(self, t, theta, x, tangents):
        """Output and directional derivatives along ``tangents`` in theta-space.

        ``tangents`` has shape ``(k, N, n)``; returns ``(v, dv)`` with ``dv`` of shape ``(k, N, n)``.
        """
        t2, th2, x2, _ = self._prepare(t, theta, x)
        tangents = np.asarray(tangents, dtype=np.float64)
        if tangents.ndim != 3 or tangents.shape[1:] != th2.shape:
            raise ShapeError(f"tangents must be (k, {th2.shape[0]}, {th2.shape[1]}), got {tangents.shape}")
        p = self.params
        k = tangents.shape[0]
        ctx_in, h = self._inputs(t2, th2, x2)
        c = tc = th = None
        if self.embed:
            c = ctx_in
            tc = np.concatenate([np.zeros((k, th2.shape[0], 1)), tangents], axis=2)
            for proj, block in self.embed:
                if proj is not None:
                    c, tc = proj.forward(p, c), proj.tangent(p, tc)
                c, tc = block.jvp(p, c, None, tc, None)
        else:
            zeros_t = np.zeros((k, th2.shape[0], 1))
            zeros_x = np.zeros((k, th2.shape[0], x2.shape[1]))
            th = np.concatenate([zeros_t, tangents, zeros_x], axis=2)
        for proj, block in self.trunk:
            if proj is not None:
                h = proj.forward(p, h)
                th = None if th is None else proj.tangent(p, th)
            h, th = block.jvp(p, h, c, th, tc)
        out = self.head.forward(p, h)
        tout = np.zeros((k,) + out.shape) if th is None else self.head.tangent(p, th)
        return out, tout

    def divergence(self, t, theta, x):
        """Velocity and exact divergence (trace of d v / d theta), one tangent per coordinate."""
        theta2 = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        N, n = theta2.shape
        basis = np.zeros((n, N, n))
        for i in range(n):
            basis[i, :, i] = 1.0
        v, dv = self.jvp(t, theta2, x, basis)
        div = np.einsum("iNi->N", dv)
        return v, div


class MLPClassifier:
    """Plain MLP with a single logit output (used by the classifier two-sample test)."""

    def __init__(self, input_dim, hidden=(64, 64), activation="relu", seed=0):
        widths = (input_dim,) + tuple(hidden)
        self.layers = [Dense(f"fc{i}", a, b) for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))]
        self.out = Dense("out", widths[-1], 1)
        self.act = get_activation(activation)
        specs = []
        for layer in self.layers + [self.out]:
            specs.extend(layer.specs())
        self.params = ParameterStore(specs)
        rng = np.random.default_rng(seed)
        for layer in self.layers + [self.out]:
            layer.init(self.params, rng)

    def logits(self, x):
        h = x
        for layer in self.layers:
            h, _ = self.act(layer.forward(self.params, h))
        return self.out.forward(self.params, h)[:, 0]

    def loss_and_grad(self, x, y):
        """Mean binary cross-entropy with logits and its parameter gradient."""
        p = self.params
        grad = p.zeros_like()
        hs, ds = [x], []
        h = x
        for layer in self.layers:
            h, d = self.act(layer.forward(p, h))
            hs.append(h)
            ds.append(d)
        z = self.out.forward(p, h)[:, 0]
        loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
        dz = (kernels.sigmoid(z) - y)[:, None] / x.shape[0]
        dh = self.out.backward(p, grad, hs[-1], dz)
        for i in range(len(self.layers) - 1, -1, -1):
            dh = self.layers[i].backward(p, grad, hs[i], dh * ds[i])
        return loss, grad


# ----------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, out=None):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``.

    Pass ``out=params`` to update in place.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != np.shape(params):
        raise ShapeError(f"gradient shape {grads.shape} != parameter shape {np.shape(params)}")
    if not np.all(np.isfinite(grads)):
        raise NumericError("non-finite gradient", index=int(np.flatnonzero(~np.isfinite(grads))[0]))
    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    update = lr * m_hat / (np.sqrt(v_hat) + eps)
    if out is None:
        new = params - update
    else:
        np.subtract(params, update, out=out)
        new = out
    return new, AdamState(m, v, step)


# ----------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(net, metadata=None):
    """Serialize ``net``: key=value manifest lines, a ``---`` line, then raw little-endian float64."""
    lines = [CHECKPOINT_MAGIC]
    for k, v in net.config.to_dict().items():
        lines.append(f"config.{k}={v}")
    lines.append(f"init_seed={net.seed}")
    for k, v in (metadata or {}).items():
        if "\n" in str(v) or "=" in str(k):
            raise ValueError(f"metadata entry {k!r} cannot be serialized")
        lines.append(f"meta.{k}={v}")
    lines.append(f"param_count={net.n_params}")
    head = "\n".join(lines) + "\n" + _BINARY_MARKER
    return head.encode("utf-8") + net.params.data.astype("<f8").tobytes()


def save_checkpoint(path, net, metadata=None):
    data = checkpoint_bytes(net, metadata)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise StorageError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def parse_checkpoint(blob):
    marker = ("\n" + _BINARY_MARKER).encode()
    cut = blob.find(marker)
    if not blob.startswith(CHECKPOINT_MAGIC.encode()) or cut < 0:
        raise StorageError("not an fmpe checkpoint")
    header = blob[:cut].decode("utf-8").splitlines()[1:]
    payload = blob[cut + len(marker):]
    config, meta, top = {}, {}, {}
    for line in header:
        key, _, value = line.partition("=")
        if key.startswith("config."):
            config[key[len("config."):]] = value
        elif key.startswith("meta."):
            meta[key[len("meta."):]] = value
        else:
            top[key] = value
    count = int(top["param_count"])
    if len(payload) != 8 * count:
        raise StorageError(f"checkpoint payload has {len(payload)} bytes, expected {8 * count}")
    net = VectorFieldNetwork(ResidualMLPConfig.from_dict(config), seed=int(top.get("init_seed", 0)))
    if net.n_params != count:
        raise StorageError("parameter count does not match the stored architecture")
    net.params.data[:] = np.frombuffer(payload, dtype="<f8")
    return net, meta


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise StorageError(f"cannot read checkpoint {path}: {exc}") from exc
    return parse_checkpoint(blob)
