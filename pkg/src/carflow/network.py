"""Coarse-to-fine scene flow network, its configuration and checkpoint files."""
from __future__ import annotations

import dataclasses
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import geom
from .binio import (BadMagicError, ByteReader, FormatError, InconsistentSizeError,  # noqa: F401
                    TruncatedFileError, VersionMismatchError)
from .layers import (AttentiveCostVolume, ContextAwareSetConv, ResidualFlowRefinement, SetUpConv,
                     flatten_seed, gather_np, interpolate)
from .tensor import MLP, Linear, Module, Tensor, concat

LEVEL_RATIOS = (4, 8, 32, 128)
PAPER_LOSS_WEIGHTS = (0.2, 0.4, 0.8, 1.6)  # finest (N/4) first


class ConfigError(ValueError):
    pass


class InsufficientPointsError(ValueError):
    pass


@dataclass
class NetworkConfig:
    n_input: int = 512
    level_sizes: tuple = ()
    embedding_conv_sizes: tuple = ()
    widths: tuple = (16, 32, 64, 64)
    embedding_width: int = 32
    refine_widths: tuple = (32, 32, 32)
    k_conv: int = 16
    k_cost1: int = 8
    k_cost2: int = 8
    k_upconv: int = 8
    fc_width: int = 16
    loss_weights: tuple = PAPER_LOSS_WEIGHTS
    aggregation: str = "context"
    encoding: str = "full"
    residual: bool = True
    init_seed: int = 0

    def __post_init__(self):
        n = self.n_input
        if not self.level_sizes:
            self.level_sizes = tuple(max(n // r, 1) for r in LEVEL_RATIOS)
        if not self.embedding_conv_sizes:
            self.embedding_conv_sizes = (max(n // 128, 1), max(n // 512, 1))
        self.level_sizes = tuple(int(v) for v in self.level_sizes)
        self.embedding_conv_sizes = tuple(int(v) for v in self.embedding_conv_sizes)
        self.widths = tuple(int(v) for v in self.widths)
        self.refine_widths = tuple(int(v) for v in self.refine_widths)
        self.loss_weights = tuple(float(v) for v in self.loss_weights)
        self.validate()

    def validate(self):
        ls = self.level_sizes
        if len(ls) != 4 or any(b >= a for a, b in zip(ls, ls[1:])) or ls[-1] < 1:
            raise ConfigError(f"level_sizes must be 4 strictly decreasing counts, got {ls}")
        if ls[0] > self.n_input:
            raise ConfigError("first level larger than n_input")
        if len(self.embedding_conv_sizes) != 2 or self.embedding_conv_sizes[0] > ls[2]:
            raise ConfigError(f"bad embedding_conv_sizes {self.embedding_conv_sizes}")
        if len(self.widths) != 4 or len(self.refine_widths) != 3:
            raise ConfigError("widths needs 4 entries and refine_widths 3")
        if len(self.loss_weights) != 4:
            raise ConfigError("loss_weights needs 4 entries")
        if self.aggregation not in ("context", "max"):
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")
        if self.encoding not in ("full", "relative"):
            raise ConfigError(f"unknown encoding {self.encoding!r}")
        if min(self.k_conv, self.k_cost1, self.k_cost2, self.k_upconv, self.fc_width) < 1:
            raise ConfigError("K values and fc_width must be positive")

    @property
    def output_sizes(self):
        """Rows of the supervised flows, coarsest first."""
        return tuple(reversed(self.level_sizes))

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class PyramidState:
    """Per-level tensors from one forward pass (levels 0 = input .. 4 = N/128)."""
    coords1: list = field(default_factory=list)
    coords2: list = field(default_factory=list)
    features1: list = field(default_factory=list)
    features2: list = field(default_factory=list)
    sample_idx1: list = field(default_factory=list)   # relative to the previous level
    index1: list = field(default_factory=list)        # composed, relative to the input
    embeddings: dict = field(default_factory=dict)
    flows: dict = field(default_factory=dict)
    coarse_flows: dict = field(default_factory=dict)
    residuals: dict = field(default_factory=dict)


class SceneFlowNet(Module):
    def __init__(self, config: NetworkConfig):
        self.config = cfg = config
        rng = np.random.default_rng(cfg.init_seed)
        w = cfg.widths
        conv_kw = dict(k=cfg.k_conv, fc_width=cfg.fc_width, aggregation=cfg.aggregation,
                       encoding=cfg.encoding)
        self.convs = []
        c_in = 3
        for i, width in enumerate(w):
            self.convs.append(ContextAwareSetConv(c_in, [width, width], rng=rng,
                                                  sampler="random" if i == 0 else "fps", **conv_kw))
            c_in = width
        ew = cfg.embedding_width
        self.cost_volume = AttentiveCostVolume(w[2], w[2], [ew, ew], rng, k1=cfg.k_cost1, k2=cfg.k_cost2)
        emb_kw = dict(k=cfg.k_conv, fc_width=cfg.fc_width, encoding=cfg.encoding)
        self.embedding_convs = [ContextAwareSetConv(ew, [ew, ew], rng=rng, **emb_kw),
                                ContextAwareSetConv(ew, [ew, ew], rng=rng, **emb_kw)]
        self.upconv = SetUpConv(ew, [ew, ew], rng, k=cfg.k_upconv, c_dense=w[3], fuse_widths=[ew])
        self.coarse_fc = Linear(ew, 3, rng)
        # refinements at N/128 (in place), N/32 and N/8
        feat = [w[3], w[2], w[1]]
        self.refinements = []
        c_prev = ew
        for width, cf in zip(cfg.refine_widths, feat):
            r = ResidualFlowRefinement(c_prev, cf, cf, rng, upconv_widths=[width, width],
                                       cost_widths=[width, width], predictor_widths=[width, width],
                                       k_up=cfg.k_upconv, k1=cfg.k_cost1, k2=cfg.k_cost2,
                                       residual=cfg.residual)
            self.refinements.append(r)
            c_prev = r.c_out
        self.final_mlp = MLP(c_prev + w[0], [cfg.refine_widths[-1], 3], rng, final_activation=False)

    # -- helpers -----------------------------------------------------------
    def residual_layers(self):
        """Linear layers that emit residual flows (zeroing them collapses refinement)."""
        return [r.predictor.flow_fc for r in self.refinements] + [self.final_mlp.layers[-1]]

    def param_dict(self):
        return dict(self.named_parameters())

    def prepare_inputs(self, pc1, pc2, seed=0):
        """Batch and subsample to ``n_input``; returns (pc1, pc2, input_idx1)."""
        n = self.config.n_input
        pc1, pc2 = np.asarray(pc1, np.float64), np.asarray(pc2, np.float64)
        if pc1.ndim == 2:
            pc1, pc2 = pc1[None], pc2[None]
        if pc1.shape[1] < n or pc2.shape[1] < n:
            raise InsufficientPointsError(
                f"need at least {n} points per frame, got {pc1.shape[1]} and {pc2.shape[1]}")
        idx1 = np.stack([geom.random_sample(pc1.shape[1], n, seed=flatten_seed(seed, b, 1)) for b in range(len(pc1))])
        idx2 = np.stack([geom.random_sample(pc2.shape[1], n, seed=flatten_seed(seed, b, 2)) for b in range(len(pc2))])
        if pc1.shape[1] == n:
            idx1 = np.broadcast_to(np.arange(n), idx1.shape).copy()
        if pc2.shape[1] == n:
            idx2 = np.broadcast_to(np.arange(n), idx2.shape).copy()
        return gather_np(pc1, idx1), gather_np(pc2, idx2), idx1

    def forward(self, pc1, pc2, seed=0, dtype=np.float64, first_idx=None):
        """Run the network on batched ``(B, n_input, 3)`` frames.

        Returns the supervised flows coarsest first (N/128, N/32, N/8, N/4)
        and the :class:`PyramidState`. ``first_idx`` optionally fixes the
        randomly sampled first-level indices as a ``(idx1, idx2)`` pair.
        """
        cfg = self.config
        pc1 = np.asarray(pc1, np.float64)
        pc2 = np.asarray(pc2, np.float64)
        if pc1.ndim == 2:
            pc1, pc2 = pc1[None], pc2[None]
        if pc1.shape[1] != cfg.n_input or pc2.shape[1] != cfg.n_input:
            pc1, pc2, _ = self.prepare_inputs(pc1, pc2, seed)
        if dtype != np.float64:
            self._cast(dtype)
        st = PyramidState()
        sizes = cfg.level_sizes
        B = pc1.shape[0]
        st.coords1.append(pc1)
        st.coords2.append(pc2)
        st.features1.append(Tensor(pc1, dtype=dtype))
        st.features2.append(Tensor(pc2, dtype=dtype))
        st.index1.append(np.broadcast_to(np.arange(cfg.n_input), (B, cfg.n_input)))
        for lvl, conv in enumerate(self.convs):
            # frame 2 samples with a different seed; FPS levels are seed-independent
            fixed = first_idx if lvl == 0 and first_idx is not None else (None, None)
            x1, f1, i1 = conv(st.coords1[-1], st.features1[-1], sizes[lvl], seed=(seed, lvl, 1), idx=fixed[0])
            x2, f2, _ = conv(st.coords2[-1], st.features2[-1], sizes[lvl], seed=(seed, lvl, 2), idx=fixed[1])
            st.coords1.append(x1)
            st.coords2.append(x2)
            st.features1.append(f1)
            st.features2.append(f2)
            st.sample_idx1.append(i1)
            st.index1.append(gather_np(st.index1[-1][..., None], i1)[..., 0])

        # initial embedding at N/32, then two set convs on the embedding
        emb = self.cost_volume(st.coords1[3], st.features1[3], st.coords2[3], st.features2[3])
        st.embeddings["cost_volume"] = emb
        xe, fe = st.coords1[3], emb
        for j, conv in enumerate(self.embedding_convs):
            xe, fe, _ = conv(xe, fe, cfg.embedding_conv_sizes[j], seed=(seed, 10 + j))
        st.embeddings["lowest"] = fe
        e4 = self.upconv(xe, fe, st.coords1[4], st.features1[4])
        flow = self.coarse_fc(e4)
        st.flows["initial"] = flow
        emb, xyz = e4, st.coords1[4]

        flows = []
        for r, lvl in zip(self.refinements, (4, 3, 2)):
            flow, emb, info = r(xyz, flow, emb, st.coords1[lvl], st.features1[lvl],
                                st.coords2[lvl], st.features2[lvl])
            xyz = st.coords1[lvl]
            st.flows[lvl] = flow
            st.embeddings[lvl] = emb
            st.coarse_flows[lvl] = info["coarse"]
            st.residuals[lvl] = info["residual"]
            flows.append(flow)

        idx, w = geom.three_nn_weights_batched(st.coords1[1], xyz)
        coarse = interpolate(flow, idx, w)
        e_int = interpolate(emb, idx, w)
        res = self.final_mlp(concat([e_int, st.features1[1]]))
        flow = res + coarse if cfg.residual else res
        st.flows[1] = flow
        st.coarse_flows[1] = coarse
        st.residuals[1] = res
        flows.append(flow)
        if dtype != np.float64:
            self._cast(np.float64)
        return flows, st

    __call__ = forward

    def level_indices(self, state):
        """Composed input indices for the supervised levels, coarsest first."""
        return [state.index1[lvl] for lvl in (4, 3, 2, 1)]

    def _cast(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)


# -- checkpoints ----------------------------------------------------------------

CKPT_MAGIC = b"CARF"
CKPT_VERSION = 1


class CheckpointError(FormatError):
    pass


def config_to_text(cfg: dict):
    lines = []
    for key, val in cfg.items():
        if isinstance(val, (tuple, list)):
            val = ",".join(str(v) for v in val)
        lines.append(f"{key}={val}")
    return "\n".join(lines)


def config_from_text(text):
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed config line {line!r}")
        out[key.strip()] = val.strip()
    return out


def save_checkpoint(params, config, path, extra=None):
    """Write named parameters (as f32) and a key=value config block.

    ``config`` may be a :class:`NetworkConfig` or a plain mapping; ``extra``
    holds additional string entries appended to the config block.
    """
    if isinstance(config, NetworkConfig):
        config = config.to_dict()
    config = dict(config)
    if extra:
        config.update(extra)
    buf = bytearray()
    buf += CKPT_MAGIC
    buf += struct.pack("<II", CKPT_VERSION, len(params))
    for name, value in params.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        nb = name.encode("utf-8")
        buf += struct.pack("<I", len(nb)) + nb
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    text = config_to_text(config).encode("utf-8")
    buf += struct.pack("<I", len(text)) + text
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(buf))
    os.replace(tmp, path)


def load_checkpoint(path):
    """Return ``(params, config)``: name -> float64 array, and the raw config dict."""
    with open(path, "rb") as fh:
        data = fh.read()
    rd = ByteReader(data)
    magic = rd.take(4, "magic")
    if magic != CKPT_MAGIC:
        raise BadMagicError(f"bad checkpoint magic {magic!r}")
    version = rd.u32("version")
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {CKPT_VERSION}")
    count = rd.u32("parameter count")
    params = {}
    for _ in range(count):
        name = rd.take(rd.u32("name length"), "parameter name").decode("utf-8")
        rank = rd.u32(f"rank of {name}")
        dims = struct.unpack(f"<{rank}I", rd.take(4 * rank, f"dims of {name}"))
        n = int(np.prod(dims)) if rank else 1
        blob = rd.take(4 * n, f"payload of {name}")
        params[name] = np.frombuffer(blob, dtype="<f4").astype(np.float64).reshape(dims)
    text = rd.take(rd.u32("config length"), "config block").decode("utf-8")
    if rd.pos != len(data):
        raise CheckpointError(f"{len(data) - rd.pos} trailing bytes after config block")
    return params, config_from_text(text)


_TUPLE_FIELDS = {"level_sizes", "embedding_conv_sizes", "widths", "refine_widths", "loss_weights"}


def network_config_from_strings(raw: dict):
    """Build a :class:`NetworkConfig` from string values, ignoring non-network keys."""
    kwargs = {}
    for f in dataclasses.fields(NetworkConfig):
        if f.name not in raw:
            continue
        val = raw[f.name]
        if not isinstance(val, str):
            kwargs[f.name] = val
        elif f.name in _TUPLE_FIELDS:
            conv = float if f.name == "loss_weights" else int
            kwargs[f.name] = tuple(conv(v) for v in val.split(",") if v.strip())
        elif f.type in ("int", int):
            kwargs[f.name] = int(val)
        elif f.type in ("bool", bool):
            word = val.strip().lower()
            if word not in ("1", "true", "yes", "0", "false", "no"):
                raise ConfigError(f"{f.name} expects a boolean, got {val!r}")
            kwargs[f.name] = word in ("1", "true", "yes")
        else:
            kwargs[f.name] = val
    return NetworkConfig(**kwargs)


def load_network(path):
    """Rebuild a network from a checkpoint; returns ``(net, params, raw_config)``."""
    params, raw = load_checkpoint(path)
    net = SceneFlowNet(network_config_from_strings(raw))
    assign_params(net, params)
    return net, params, raw


def assign_params(net, params):
    own = net.param_dict()
    missing = [k for k in own if k not in params]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters {missing[:3]}...")
    for name, p in own.items():
        arr = np.asarray(params[name], dtype=np.float64)
        if arr.shape != p.shape:
            raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
        p.data = arr.copy()
