"""The EgoCogNav forecasting network.

Video tokens (one per step, from the pooled feature grid) attend over
time, then cross-attend to motion, head and gaze embeddings in turn. A
small MLP on the pooled fused sequence predicts perceived uncertainty
``u_hat``, which mixes the fused sequence with a goal embedding::

    h_tilde = (1 - u_hat) * h_fuse + u_hat * h_goal

Two decoders with learnable future queries read ``h_tilde`` and emit body
deltas and 6D head rotations. Auxiliary linear heads classify environment
and behaviour labels from the pooled fused sequence.
"""
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .episodes.data import BEHAVIOR_LABELS, ENV_LABELS, T_FUTURE, T_PAST, WindowSample, stack_windows
from .errors import BadConfig, ShapeMismatch
from .geometry import IDENTITY_6D
from .nn import (AttentionBlock, DecoderBlock, Linear, Module, read_checkpoint, save_checkpoint,
                 sinusoidal_encoding)

MODALITIES = ("video", "motion", "head", "gaze")
STREAM_DIMS = {"motion": 3, "head": 6, "gaze": 2, "goal": 3}


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_fusion_layers: int = 2
    n_decoder_layers: int = 2
    t_past: int = T_PAST
    t_future: int = T_FUTURE
    grid: int = 4
    channels: int = 32
    n_env_classes: int = len(ENV_LABELS)
    n_behavior_classes: int = len(BEHAVIOR_LABELS)
    ff_mult: int = 2
    modalities: tuple = MODALITIES
    cross_order: tuple = ("motion", "head", "gaze")
    dtype: str = "float64"

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        self.cross_order = tuple(self.cross_order)
        self.validate()

    def validate(self):
        for name in ("d_model", "n_heads", "t_past", "t_future", "grid", "channels", "ff_mult"):
            if int(getattr(self, name)) < 1:
                raise BadConfig(f"{name} must be positive")
        if self.n_fusion_layers < 0 or self.n_decoder_layers < 1:
            raise BadConfig("need n_fusion_layers >= 0 and n_decoder_layers >= 1")
        if self.d_model % self.n_heads:
            raise BadConfig(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.d_model % 2:
            raise BadConfig("d_model must be even for the sinusoidal encoding")
        unknown = set(self.modalities) - set(MODALITIES)
        if unknown or not self.modalities:
            raise BadConfig(f"modalities must be a non-empty subset of {MODALITIES}")
        if sorted(self.cross_order) != sorted(("motion", "head", "gaze")):
            raise BadConfig("cross_order must be a permutation of motion, head, gaze")
        if self.dtype not in ("float32", "float64"):
            raise BadConfig("dtype must be float32 or float64")

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise BadConfig(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        out = asdict(self)
        out["modalities"] = list(self.modalities)
        out["cross_order"] = list(self.cross_order)
        return out

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class ForecastBundle:
    """Model outputs; arrays carry a leading batch axis unless built from one sample."""

    traj: np.ndarray
    head: np.ndarray
    u_hat: np.ndarray = None
    env_logits: np.ndarray = None
    behavior_logits: np.ndarray = None

    def __post_init__(self):
        if self.u_hat is not None and (np.any(self.u_hat < 0) or np.any(self.u_hat > 1)):
            raise ValueError("u_hat outside [0, 1]")


@dataclass
class FusedSequence:
    h_fuse: ad.Tensor
    h_goal: ad.Tensor = None


@dataclass
class InputStats:
    """Per-channel standardization applied to raw inputs inside the network."""

    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)

    @classmethod
    def fit(cls, batch):
        mean, std = {}, {}
        for name in ("motion", "gaze", "goal"):
            x = np.asarray(getattr(batch, name), dtype=np.float64).reshape(-1, getattr(batch, name).shape[-1])
            mean[name] = x.mean(axis=0)
            std[name] = np.maximum(x.std(axis=0), 1e-3)
        # float64 so the stats survive a JSON round trip unchanged
        pooled = batch.features.astype(np.float64).mean(axis=(-3, -2)).reshape(-1, batch.features.shape[-1])
        mean["video"] = pooled.mean(axis=0)
        std["video"] = np.maximum(pooled.std(axis=0), 1e-3)
        return cls(mean, std)

    def apply(self, name, x):
        if name not in self.mean:
            return x
        return (x - self.mean[name]) / self.std[name]

    def to_dict(self):
        return {"mean": {k: v.tolist() for k, v in self.mean.items()},
                "std": {k: v.tolist() for k, v in self.std.items()}}

    @classmethod
    def from_dict(cls, data):
        return cls({k: np.asarray(v) for k, v in data.get("mean", {}).items()},
                   {k: np.asarray(v) for k, v in data.get("std", {}).items()})


def _as_batch(sample):
    single = isinstance(sample, WindowSample)
    return stack_windows([sample]) if single else stack_windows(sample), single


class _Network(Module):
    """Shared plumbing: config, dtype, input checks, checkpoints."""

    def _init_common(self, config):
        self.config = config
        self.stats = InputStats()
        self._pe = sinusoidal_encoding(config.t_past, config.d_model, config.np_dtype)

    def _const(self, x):
        return ad.as_tensor(np.asarray(x, dtype=self.config.np_dtype), dtype=self.config.np_dtype)

    def _check_batch(self, batch):
        c = self.config
        b = len(batch.motion)
        expected = {"features": (b, c.t_past, c.grid, c.grid, c.channels), "motion": (b, c.t_past, 3),
                    "head": (b, c.t_past, 6), "gaze": (b, c.t_past, 2), "goal": (b, c.t_past, 3)}
        for name, shape in expected.items():
            if getattr(batch, name).shape != shape:
                raise ShapeMismatch(f"{name}: expected {shape}, got {getattr(batch, name).shape}")

    def _masked_inputs(self, batch):
        """Standardized inputs with excluded modalities zeroed."""
        keep = set(self.config.modalities)
        pooled = batch.features.mean(axis=(-3, -2))
        out = {
            "video": self.stats.apply("video", pooled),
            "motion": self.stats.apply("motion", batch.motion),
            "head": np.asarray(batch.head, dtype=float),
            "gaze": self.stats.apply("gaze", batch.gaze),
            "goal": self.stats.apply("goal", batch.goal),
        }
        for name in MODALITIES:
            if name not in keep:
                out[name] = np.zeros_like(out[name])
        return {k: self._const(v) for k, v in out.items()}

    def save(self, path, seed=None, extra=None):
        meta = {"model": type(self).__name__, "config": self.config.to_dict(),
                "input_stats": self.stats.to_dict()}
        meta.update(extra or {})
        save_checkpoint(path, self, seed=seed, extra=meta)

    @classmethod
    def load(cls, path):
        manifest, state = read_checkpoint(path)
        extra = manifest.get("extra", {})
        net = cls(ModelConfig.from_dict(extra["config"]), seed=manifest.get("seed") or 0)
        net.load_state_dict(state)
        net.stats = InputStats.from_dict(extra.get("input_stats", {}))
        return net, manifest


class EgoCogNav(_Network):
    def __init__(self, config=None, seed=0):
        config = config or ModelConfig()
        self._init_common(config)
        rng = np.random.default_rng(seed)
        d, h, dt = config.d_model, config.n_heads, config.np_dtype
        self.video_proj = Linear(config.channels, d, rng, dtype=dt)
        self.video_attn = AttentionBlock(d, h, rng, config.ff_mult, dt)
        self.motion_embed = Linear(3, d, rng, dtype=dt)
        self.head_embed = Linear(6, d, rng, dtype=dt)
        self.gaze_embed = Linear(2, d, rng, dtype=dt)
        self.goal_embed = Linear(3, d, rng, dtype=dt)
        # n_fusion_layers rounds of one cross-attention block per action stream
        self.fusion = [AttentionBlock(d, h, rng, config.ff_mult, dt)
                       for _ in range(config.n_fusion_layers * len(config.cross_order))]
        self.u_hidden = Linear(d, d, rng, dtype=dt)
        self.u_out = Linear(d, 1, rng, dtype=dt)
        self.traj_queries = Parameter(rng.normal(0, 0.5, (config.t_future, d)).astype(dt))
        self.traj_decoder = [DecoderBlock(d, h, rng, config.ff_mult, dt)
                             for _ in range(config.n_decoder_layers)]
        self.traj_out = Linear(d, 3, rng, dtype=dt)
        self.head_queries = Parameter(rng.normal(0, 0.5, (config.t_future, d)).astype(dt))
        self.head_decoder = [DecoderBlock(d, h, rng, config.ff_mult, dt)
                             for _ in range(config.n_decoder_layers)]
        self.head_out = Linear(d, 6, rng, dtype=dt)
        self.head_out.bias.data = IDENTITY_6D.astype(dt).copy()
        self.env_head = Linear(d, config.n_env_classes, rng, dtype=dt)
        self.behavior_head = Linear(d, config.n_behavior_classes, rng, dtype=dt)

    # ------------------------------------------------------------ ops

    def project_video(self, pooled):
        """Per-step linear projection of the spatially pooled grid (before positions)."""
        return self.video_proj(pooled)

    def encode_video(self, features, _pooled=None):
        """``(..., T1, G, G, C)`` features -> ``(..., T1, d_model)`` tokens."""
        if _pooled is None:
            features = np.asarray(features)
            c = self.config
            if features.shape[-4:] != (c.t_past, c.grid, c.grid, c.channels):
                raise ShapeMismatch(f"features: expected (..., {c.t_past}, {c.grid}, {c.grid}, "
                                    f"{c.channels}), got {features.shape}")
            _pooled = self._const(self.stats.apply("video", features.mean(axis=(-3, -2))))
        tokens = ad.add(self.project_video(_pooled), self._const(self._pe))
        return self.video_attn(tokens)

    def encode_actions(self, motion, head, gaze, goal):
        """Embed each stream to ``d_model`` and add the shared positional encoding."""
        lengths = {np.shape(getattr(x, "data", x))[-2] for x in (motion, head, gaze, goal)}
        if len(lengths) != 1:
            raise ShapeMismatch(f"action streams have different lengths {sorted(lengths)}")
        pe = self._const(self._pe[: lengths.pop()])
        out = []
        for layer, x in ((self.motion_embed, motion), (self.head_embed, head),
                         (self.gaze_embed, gaze), (self.goal_embed, goal)):
            out.append(ad.add(layer(self._const(x) if not isinstance(x, ad.Tensor) else x), pe))
        return tuple(out)

    def fuse(self, video_tokens, motion_e, head_e, gaze_e, goal_e=None):
        if video_tokens.shape[-1] != self.config.d_model:
            raise ShapeMismatch(f"video tokens have width {video_tokens.shape[-1]}")
        streams = {"motion": motion_e, "head": head_e, "gaze": gaze_e}
        for name, s in streams.items():
            if s.shape[-2:] != video_tokens.shape[-2:]:
                raise ShapeMismatch(f"{name} stream shape {s.shape} vs video {video_tokens.shape}")
        x = video_tokens
        order = self.config.cross_order
        for i, block in enumerate(self.fusion):
            x = block(x, streams[order[i % len(order)]])
        return FusedSequence(x, goal_e)

    def predict_uncertainty(self, fused):
        pooled = ad.mean_pool_over_time(fused.h_fuse)
        return ad.sigmoid(self.u_out(ad.gelu(self.u_hidden(pooled))))

    @staticmethod
    def condition_on_goal(fused, u_hat):
        """``(1 - u) * h_fuse + u * h_goal`` with one ``u`` per sequence."""
        u = ad.as_tensor(u_hat)
        h_fuse, h_goal = ad.as_tensor(fused.h_fuse), ad.as_tensor(fused.h_goal)
        if u.ndim and h_fuse.ndim >= 2:
            # one mixing weight per sequence, broadcast over steps and width
            u = ad.reshape(u, (-1,) + (1,) * (h_fuse.ndim - 1) if h_fuse.ndim > 2 else (1, 1))
        ud = np.asarray(u.data)
        if np.any(ud < 0) or np.any(ud > 1):
            raise ValueError("u_hat must lie in [0, 1]")
        one_minus = ad.sub(ad.as_tensor(np.ones_like(ud)), u)
        return ad.add(ad.mul(one_minus, h_fuse), ad.mul(u, h_goal))

    def _decode(self, queries, blocks, out, memory):
        lead = memory.shape[:-2]
        q = queries
        if lead:
            q = ad.add(ad.as_tensor(np.zeros(lead + queries.shape, dtype=queries.data.dtype)), queries)
        for block in blocks:
            q = block(q, memory)
        return out(q)

    def decode_trajectory(self, h_tilde):
        return self._decode(self.traj_queries, self.traj_decoder, self.traj_out, h_tilde)

    def decode_head(self, h_tilde):
        return self._decode(self.head_queries, self.head_decoder, self.head_out, h_tilde)

    def auxiliary_heads(self, fused):
        pooled = ad.mean_pool_over_time(fused.h_fuse)
        return self.env_head(pooled), self.behavior_head(pooled)

    # ------------------------------------------------------------ composition

    def forward_tensors(self, batch):
        """Tensor outputs for a WindowBatch; used by training."""
        self._check_batch(batch)
        x = self._masked_inputs(batch)
        video = self.encode_video(None, _pooled=x["video"])
        motion_e, head_e, gaze_e, goal_e = self.encode_actions(x["motion"], x["head"], x["gaze"], x["goal"])
        fused = self.fuse(video, motion_e, head_e, gaze_e, goal_e)
        u = self.predict_uncertainty(fused)
        h_tilde = self.condition_on_goal(fused, u)
        env, beh = self.auxiliary_heads(fused)
        return {"traj": self.decode_trajectory(h_tilde), "head": self.decode_head(h_tilde),
                "u_hat": ad.reshape(u, u.shape[:-1]), "env_logits": env, "behavior_logits": beh}

    def forward(self, sample):
        batch, single = _as_batch(sample)
        out = self.forward_tensors(batch)
        arrays = {k: np.array(v.data, dtype=float) for k, v in out.items()}
        if single:
            arrays = {k: v[0] for k, v in arrays.items()}
        return ForecastBundle(**arrays)

    __call__ = forward


class MTransformer(_Network):
    """Early-fusion baseline: concatenated stream embeddings, one self-attention
    stack, a query decoder and two linear heads. No uncertainty output."""

    def __init__(self, config=None, seed=0):
        config = config or ModelConfig()
        self._init_common(config)
        rng = np.random.default_rng(seed)
        d, h, dt = config.d_model, config.n_heads, config.np_dtype
        self.video_proj = Linear(config.channels, d, rng, dtype=dt)
        self.motion_embed = Linear(3, d, rng, dtype=dt)
        self.head_embed = Linear(6, d, rng, dtype=dt)
        self.gaze_embed = Linear(2, d, rng, dtype=dt)
        self.goal_embed = Linear(3, d, rng, dtype=dt)
        self.merge = Linear(5 * d, d, rng, dtype=dt)
        self.encoder = [AttentionBlock(d, h, rng, config.ff_mult, dt)
                        for _ in range(max(config.n_fusion_layers, 1))]
        self.queries = Parameter(rng.normal(0, 0.5, (config.t_future, d)).astype(dt))
        self.decoder = [DecoderBlock(d, h, rng, config.ff_mult, dt) for _ in range(config.n_decoder_layers)]
        self.traj_out = Linear(d, 3, rng, dtype=dt)
        self.head_out = Linear(d, 6, rng, dtype=dt)
        self.head_out.bias.data = IDENTITY_6D.astype(dt).copy()

    def forward_tensors(self, batch):
        self._check_batch(batch)
        x = self._masked_inputs(batch)
        parts = [self.video_proj(x["video"]), self.motion_embed(x["motion"]), self.head_embed(x["head"]),
                 self.gaze_embed(x["gaze"]), self.goal_embed(x["goal"])]
        h = ad.add(self.merge(ad.concat(parts, axis=-1)), self._const(self._pe))
        for block in self.encoder:
            h = block(h)
        lead = h.shape[:-2]
        q = ad.add(ad.as_tensor(np.zeros(lead + self.queries.shape, dtype=self.queries.data.dtype)),
                   self.queries)
        for block in self.decoder:
            q = block(q, h)
        return {"traj": self.traj_out(q), "head": self.head_out(q)}

    def forward(self, sample):
        batch, single = _as_batch(sample)
        out = {k: np.array(v.data, dtype=float) for k, v in self.forward_tensors(batch).items()}
        if single:
            out = {k: v[0] for k, v in out.items()}
        return ForecastBundle(**out)

    __call__ = forward


NETWORKS = {"EgoCogNav": EgoCogNav, "MTransformer": MTransformer}


def load_network(path):
    """Load either network type from a checkpoint directory."""
    manifest, _ = read_checkpoint(path)
    kind = manifest.get("extra", {}).get("model", "EgoCogNav")
    if kind not in NETWORKS:
        raise BadConfig(f"unknown model type {kind!r} in checkpoint")
    return NETWORKS[kind].load(path)


def config_json(config):
    return json.dumps(config.to_dict(), sort_keys=True)
