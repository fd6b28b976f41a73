"""Dense neural-network kernel: parameter store, layers, optimizer, checks.

Layers are thin compositions over the autograd engine with exact
hand-written gradients underneath; every trainable op here is covered by
the finite-difference harness in ``grad_check``.
"""
from __future__ import annotations

import json

import numpy as np

from . import autograd as ag
from .autograd import Var

CHECKPOINT_MAGIC = b"RSPCKPT1"


class DegenerateMaskError(ValueError):
    """An attention row excludes every key under exclusion semantics."""


class ParamStore:
    """Named parameter tensors with paired gradients and Adam moments."""

    def __init__(self):
        self._order = []
        self._values = {}
        self._grads = {}
        self._m = {}
        self._v = {}
        self.step = 0

    def add(self, name, value):
        if name in self._values:
            raise ValueError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        self._order.append(name)
        self._values[name] = arr
        self._grads[name] = np.zeros_like(arr)
        self._m[name] = np.zeros_like(arr)
        self._v[name] = np.zeros_like(arr)
        return arr

    def names(self):
        return list(self._order)

    def value(self, name):
        return self._values[name]

    def grad(self, name):
        return self._grads[name]

    def set_value(self, name, value):
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != self._values[name].shape:
            raise ValueError(f"shape mismatch for {name!r}")
        self._values[name] = arr.copy()

    def vars(self, track=True):
        """Fresh leaf Vars over the current values, one per parameter."""
        return {n: Var(self._values[n], track=track) for n in self._order}

    def accumulate(self, leaves):
        for name, leaf in leaves.items():
            if leaf.grad is not None:
                self._grads[name] += leaf.grad

    def zero_grads(self):
        for name in self._order:
            self._grads[name][...] = 0.0

    def l2_grad_norm(self):
        return float(np.sqrt(sum(float((g * g).sum()) for g in self._grads.values())))


def affine(x, w, b):
    """y = x @ w + b (bias broadcast over rows)."""
    return ag.add(ag.matmul(x, w), b)


def _heads(mat, n_heads, d_head):
    return [ag.slice_cols(mat, h * d_head, (h + 1) * d_head) for h in range(n_heads)]


def _attend(q, k, v, n_heads, mask_literal=None):
    d_model = q.value.shape[1]
    d_head = d_model // n_heads
    inv_sqrt = 1.0 / np.sqrt(d_head)
    outs = []
    for qh, kh, vh in zip(_heads(q, n_heads, d_head), _heads(k, n_heads, d_head), _heads(v, n_heads, d_head)):
        logits = ag.scale(ag.matmul(qh, ag.transpose(kh)), inv_sqrt)
        if mask_literal is not None:
            logits = ag.mul(logits, Var(mask_literal))
        weights = ag.softmax_rows(logits)
        outs.append(ag.matmul(weights, vh))
    return ag.concat_cols(outs)


def multi_head_attention(q_in, kv_in, mask, wq, wk, wv, n_heads, semantics="exclusion"):
    """Masked multi-head cross attention.

    q_in: (n_q, D) queries source, kv_in: (n_kv, D) key/value pool,
    mask: (n_q, n_kv) truthy where a key is admitted.

    Exclusion semantics remove masked keys from the pool before the
    projections, so the result is bitwise identical to attention computed
    over the admitted keys alone. Literal semantics multiply the logits
    elementwise by the mask (a zeroed logit still carries weight exp(0)
    through the softmax), kept for fidelity experiments.
    """
    q_in, kv_in = ag._lift(q_in), ag._lift(kv_in)
    mask = np.asarray(mask)
    n_q = q_in.value.shape[0]
    n_kv = kv_in.value.shape[0]
    if mask.shape != (n_q, n_kv):
        raise ValueError(f"mask must be ({n_q}, {n_kv}), got {mask.shape}")
    if q_in.value.shape[1] % n_heads != 0:
        raise ValueError("head count must divide the model dimension")
    if semantics == "literal_multiplicative":
        k = ag.matmul(kv_in, wk)
        v = ag.matmul(kv_in, wv)
        q = ag.matmul(q_in, wq)
        return _attend(q, k, v, n_heads, mask_literal=mask.astype(np.float64))
    if semantics != "exclusion":
        raise ValueError(f"unknown mask semantics {semantics!r}")
    boolean = mask.astype(bool)
    if not boolean.any(axis=1).all():
        row = int(np.flatnonzero(~boolean.any(axis=1))[0])
        raise DegenerateMaskError(f"query row {row} excludes every key")
    if np.all(boolean == boolean[0:1]):
        admitted = np.flatnonzero(boolean[0])
        kv_sel = ag.gather_rows(kv_in, admitted)
        q = ag.matmul(q_in, wq)
        k = ag.matmul(kv_sel, wk)
        v = ag.matmul(kv_sel, wv)
        return _attend(q, k, v, n_heads)
    # per-row admitted sets differ: attend row by row
    rows = []
    for i in range(n_q):
        admitted = np.flatnonzero(boolean[i])
        kv_sel = ag.gather_rows(kv_in, admitted)
        q = ag.matmul(ag.gather_rows(q_in, [i]), wq)
        k = ag.matmul(kv_sel, wk)
        v = ag.matmul(kv_sel, wv)
        rows.append(_attend(q, k, v, n_heads))
    return ag.concat_rows(rows)


GRU_PARAM_KEYS = ("wz", "uz", "bz", "wr", "ur", "br", "wh", "uh", "bh")


def gru_step(h, x, p):
    """One GRU update: h' = (1 - z) * h + z * h_cand.

    p maps the keys in GRU_PARAM_KEYS to Vars: input weights w*, hidden
    weights u*, biases b*. Batched inputs (B, dim) are supported.
    """
    z = ag.sigmoid(ag.add(ag.add(ag.matmul(x, p["wz"]), ag.matmul(h, p["uz"])), p["bz"]))
    r = ag.sigmoid(ag.add(ag.add(ag.matmul(x, p["wr"]), ag.matmul(h, p["ur"])), p["br"]))
    cand = ag.tanh(ag.add(ag.add(ag.matmul(x, p["wh"]), ag.matmul(ag.mul(r, h), p["uh"])), p["bh"]))
    one = Var(np.float64(1.0))
    return ag.add(ag.mul(ag.sub(one, z), h), ag.mul(z, cand))


def init_gru_params(store, prefix, input_dim, hidden_dim, rng):
    sw = 1.0 / np.sqrt(input_dim)
    su = 1.0 / np.sqrt(hidden_dim)
    for gate in ("z", "r", "h"):
        store.add(f"{prefix}w{gate}", rng.normal(0.0, sw, (input_dim, hidden_dim)))
        store.add(f"{prefix}u{gate}", rng.normal(0.0, su, (hidden_dim, hidden_dim)))
        store.add(f"{prefix}b{gate}", np.zeros((1, hidden_dim)))


def gru_param_view(leaves, prefix):
    return {key: leaves[prefix + key] for key in GRU_PARAM_KEYS}


def strided_conv1d(stream, kernel, bias, width, stride):
    """1-D convolution over a (T, C) stream, no padding.

    kernel is stored flattened as (width*C, F), laid out row-major over
    (width, C); output step i aggregates input rows [i*stride, i*stride+width).
    """
    stream = ag._lift(stream)
    t_len, channels = stream.value.shape
    if t_len < width or (t_len - width) % stride != 0:
        raise ValueError(
            f"stream length {t_len} is not compatible with width {width} / stride {stride}"
        )
    n_out = (t_len - width) // stride + 1
    idx = (np.arange(n_out)[:, None] * stride + np.arange(width)[None, :]).reshape(-1)
    windows = ag.reshape(ag.gather_rows(stream, idx), (n_out, width * channels))
    return affine(windows, kernel, bias)


def adam_update(store, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Standard Adam with bias correction over every parameter in the store."""
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name in store.names():
        g = store._grads[name]
        m = store._m[name]
        v = store._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        store._values[name] = store._values[name] - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def grad_check(f, store, names=None, eps=1e-5, max_entries=None, seed=0):
    """Central finite differences against analytic gradients.

    f() must deterministically rebuild the forward graph from the store's
    current values and return (loss Var, leaves dict). The relative error
    per coordinate is |num - ana| / max(1, |num|, |ana|); the worst over
    all checked coordinates is returned. For larger tensors a seeded
    subset of max_entries coordinates is checked.
    """
    loss, leaves = f()
    loss.backward()
    analytic = {}
    for name, leaf in leaves.items():
        analytic[name] = np.zeros_like(leaf.value) if leaf.grad is None else leaf.grad.copy()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in names if names is not None else store.names():
        val = store._values[name]
        flat = val.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            coords = rng.choice(n, size=max_entries, replace=False)
        else:
            coords = np.arange(n)
        ana_flat = analytic[name].reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            f_plus = f()[0].item()
            flat[c] = orig - eps
            f_minus = f()[0].item()
            flat[c] = orig
            num = (f_plus - f_minus) / (2.0 * eps)
            ana = ana_flat[c]
            rel = abs(num - ana) / max(1.0, abs(num), abs(ana))
            worst = max(worst, rel)
    return worst


def save_checkpoint(path, store, meta=None):
    """Write magic + JSON header (names, shapes, step, meta) + raw <f8 data."""
    header = {
        "names": store.names(),
        "shapes": {n: list(store.value(n).shape) for n in store.names()},
        "step": store.step,
        "meta": meta or {},
    }
    blob = bytearray(CHECKPOINT_MAGIC)
    blob += json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob += b"\n"
    for name in store.names():
        blob += np.ascontiguousarray(store.value(name), dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path):
    """Read a checkpoint; returns (ParamStore, meta dict)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint (bad magic)")
    nl = blob.index(b"\n", 8)
    header = json.loads(blob[8:nl].decode("utf-8"))
    store = ParamStore()
    at = nl + 1
    for name in header["names"]:
        shape = tuple(header["shapes"][name])
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=at).reshape(shape)
        at += count * 8
        store.add(name, arr)
    store.step = int(header["step"])
    return store, header.get("meta", {})
