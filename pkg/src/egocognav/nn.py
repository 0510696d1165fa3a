"""Layers built on the autodiff tape."""
import json
import math
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .errors import LengthMismatch, ShapeMismatch


class Module:
    """Container whose Parameters and sub-Modules are found by attribute order."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self):
        return int(sum(p.data.size for p in self.parameters()))

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.data.shape:
                raise ShapeMismatch(f"{name}: expected {p.data.shape}, got {value.shape}")
            p.data = value.astype(p.data.dtype, copy=True)
            p.zero_grad()


def _uniform(rng, fan_in, shape, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True, dtype=np.float64):
        self.weight = Parameter(_uniform(rng, d_in, (d_in, d_out), dtype), decay=True)
        self.bias = Parameter(_uniform(rng, d_in, (d_out,), dtype), decay=False) if bias else None

    def __call__(self, x):
        x = ad.as_tensor(x)
        vector = x.ndim == 1
        if vector:
            x = ad.reshape(x, (1, x.shape[0]))
        out = ad.matmul(x, self.weight)
        if self.bias is not None:
            out = ad.add(out, self.bias)
        return ad.reshape(out, (out.shape[-1],)) if vector else out


class LayerNorm(Module):
    def __init__(self, d, dtype=np.float64):
        self.gain = Parameter(np.ones(d, dtype=dtype), decay=False)
        self.shift = Parameter(np.zeros(d, dtype=dtype), decay=False)

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.shift)


class MultiHeadAttention(Module):
    """Multi-head attention. The key projection carries no bias: a key bias
    shifts every score of a query equally and so never gets a gradient."""

    def __init__(self, d_model, n_heads, rng, dtype=np.float64):
        if d_model % n_heads:
            raise ShapeMismatch(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.q = Linear(d_model, d_model, rng, dtype=dtype)
        self.k = Linear(d_model, d_model, rng, bias=False, dtype=dtype)
        self.v = Linear(d_model, d_model, rng, dtype=dtype)
        self.out = Linear(d_model, d_model, rng, dtype=dtype)

    def _split(self, x):
        *lead, t, d = x.shape
        h = self.n_heads
        x = ad.reshape(x, (*lead, t, h, d // h))
        n = len(lead)
        return ad.transpose(x, (*range(n), n + 1, n, n + 2))

    def _merge(self, x):
        *lead, h, t, dh = x.shape
        n = len(lead)
        x = ad.transpose(x, (*range(n), n + 1, n, n + 2))
        return ad.reshape(x, (*lead, t, h * dh))

    def __call__(self, query, memory, mask=None):
        q = self._split(self.q(query))
        k = self._split(self.k(memory))
        v = self._split(self.v(memory))
        return self.out(self._merge(ad.scaled_dot_attention(q, k, v, mask)))


class FeedForward(Module):
    def __init__(self, d_model, d_hidden, rng, dtype=np.float64):
        self.fc1 = Linear(d_model, d_hidden, rng, dtype=dtype)
        self.fc2 = Linear(d_hidden, d_model, rng, dtype=dtype)

    def __call__(self, x):
        return self.fc2(ad.gelu(self.fc1(x)))


class AttentionBlock(Module):
    """Post-norm block: x <- LN(x + MHA(x, memory)); x <- LN(x + FFN(x))."""

    def __init__(self, d_model, n_heads, rng, ff_mult=2, dtype=np.float64):
        self.attn = MultiHeadAttention(d_model, n_heads, rng, dtype)
        self.norm1 = LayerNorm(d_model, dtype)
        self.ff = FeedForward(d_model, ff_mult * d_model, rng, dtype)
        self.norm2 = LayerNorm(d_model, dtype)

    def __call__(self, x, memory=None):
        memory = x if memory is None else memory
        x = self.norm1(ad.add(x, self.attn(x, memory)))
        return self.norm2(ad.add(x, self.ff(x)))


class DecoderBlock(Module):
    """Query self-attention, cross-attention to memory, then feed-forward."""

    def __init__(self, d_model, n_heads, rng, ff_mult=2, dtype=np.float64):
        self.self_attn = MultiHeadAttention(d_model, n_heads, rng, dtype)
        self.norm1 = LayerNorm(d_model, dtype)
        self.cross = AttentionBlock(d_model, n_heads, rng, ff_mult, dtype)

    def __call__(self, x, memory):
        x = self.norm1(ad.add(x, self.self_attn(x, x)))
        return self.cross(x, memory)


def sinusoidal_encoding(length, d_model, dtype=np.float64):
    pos = np.arange(length)[:, None]
    i = np.arange(d_model // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d_model)
    pe = np.zeros((length, d_model), dtype=dtype)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : (d_model - d_model // 2)])
    return pe


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, module, seed=None, extra=None):
    """Write ``manifest.json`` plus a little-endian f32 ``params.bin`` blob."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    for name, p in module.named_parameters():
        entries.append({"name": name, "shape": list(p.data.shape)})
        blobs.append(np.ascontiguousarray(p.data, dtype="<f4").ravel())
    payload = np.concatenate(blobs) if blobs else np.zeros(0, dtype="<f4")
    manifest = {"dtype": "float32", "byteorder": "little", "seed": seed,
                "params": entries, "extra": extra or {}}
    (path / "params.bin").write_bytes(payload.tobytes())
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def read_checkpoint(path):
    """Return (manifest, {name: float32 array})."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    raw = np.frombuffer((path / "params.bin").read_bytes(), dtype="<f4")
    expected = sum(int(np.prod(e["shape"])) for e in manifest["params"])
    if raw.size != expected:
        raise LengthMismatch(f"checkpoint payload has {raw.size} values, manifest says {expected}")
    state = {}
    offset = 0
    for entry in manifest["params"]:
        n = int(np.prod(entry["shape"]))
        state[entry["name"]] = raw[offset:offset + n].reshape(entry["shape"]).copy()
        offset += n
    return manifest, state
