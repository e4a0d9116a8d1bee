"""Run configuration, the training loop, and checkpoint-backed resume."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .evaluation import MetricsAccumulator, multiscale_loss
from .network import (CheckpointError, NetworkConfig, SceneFlowNet, assign_params, load_checkpoint,
                      network_config_from_strings, save_checkpoint)
from .tensor import AdamState, NonFiniteError, adam_step

ADAM_PREFIX = "__adam__"


class ConfigParseError(ValueError):
    def __init__(self, msg, line=None):
        super().__init__(f"line {line}: {msg}" if line is not None else msg)
        self.line = line


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    epsilon: float = 1e-8
    decay_rate: float = 0.5
    decay_step: int = 80
    batch_size: int = 4
    max_steps: int = 100
    seed: int = 0
    checkpoint_every: int = 0

    def adam_state(self):
        return AdamState(lr=self.lr, beta1=self.beta1, beta2=self.beta2, epsilon=self.epsilon,
                         decay_rate=self.decay_rate, decay_step=self.decay_step)

    def to_dict(self):
        out = self.network.to_dict()
        for f in dataclasses.fields(self):
            if f.name != "network":
                out[f.name] = getattr(self, f.name)
        return out


_RUN_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig) if f.name != "network"}
_NET_KEYS = {f.name for f in dataclasses.fields(NetworkConfig)}


def parse_run_config(text, overrides=None):
    """Parse ``key = value`` lines (``#`` comments) into a :class:`RunConfig`."""
    raw, lines = {}, {}
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or not key:
            raise ConfigParseError(f"expected 'key = value', got {line!r}", no)
        if key not in _RUN_TYPES and key not in _NET_KEYS:
            raise ConfigParseError(f"unknown key {key!r}", no)
        if key in raw:
            raise ConfigParseError(f"duplicate key {key!r}", no)
        raw[key], lines[key] = val, no
    raw.update(overrides or {})
    return run_config_from_strings(raw, lines)


def run_config_from_strings(raw, lines=None):
    lines = lines or {}
    kw = {}
    for key, typ in _RUN_TYPES.items():
        if key not in raw:
            continue
        try:
            kw[key] = (int if typ in ("int", int) else float)(raw[key])
        except ValueError:
            raise ConfigParseError(f"bad value {raw[key]!r} for {key}", lines.get(key)) from None
    net_raw = {k: v for k, v in raw.items() if k in _NET_KEYS}
    try:
        net = network_config_from_strings(net_raw)
    except (ValueError, TypeError) as exc:
        bad = next(iter(net_raw), None)
        raise ConfigParseError(str(exc), lines.get(bad) if len(net_raw) == 1 else None) from None
    try:
        cfg = RunConfig(network=net, **kw)
        cfg.adam_state()
    except ValueError as exc:
        raise ConfigParseError(str(exc)) from None
    return cfg


def save_training_checkpoint(path, net, cfg: RunConfig, state: AdamState | None = None):
    params = dict(net.param_dict())
    extra = {}
    if state is not None:
        for name in net.param_dict():
            if name in state.first_moment:
                params[f"{ADAM_PREFIX}/m/{name}"] = state.first_moment[name]
                params[f"{ADAM_PREFIX}/v/{name}"] = state.second_moment[name]
        extra["adam_step_count"] = state.step_count
    save_checkpoint(params, cfg.to_dict(), path, extra=extra)


def load_training_checkpoint(path):
    """Return ``(net, cfg, adam_state)`` restored from a checkpoint."""
    params, raw = load_checkpoint(path)
    raw = dict(raw)
    step_count = int(raw.pop("adam_step_count", 0))
    known = {k: v for k, v in raw.items() if k in _RUN_TYPES or k in _NET_KEYS}
    cfg = run_config_from_strings(known)
    net = SceneFlowNet(cfg.network)
    assign_params(net, {k: v for k, v in params.items() if not k.startswith(ADAM_PREFIX)})
    state = cfg.adam_state()
    state.step_count = step_count
    for name in net.param_dict():
        m = params.get(f"{ADAM_PREFIX}/m/{name}")
        v = params.get(f"{ADAM_PREFIX}/v/{name}")
        if (m is None) != (v is None):
            raise CheckpointError(f"incomplete optimizer state for {name}")
        if m is not None:
            state.first_moment[name] = m.copy()
            state.second_moment[name] = v.copy()
    return net, cfg, state


class Trainer:
    """Adam training with the multi-scale loss; persistent state stays float32-exact."""

    def __init__(self, cfg: RunConfig, dataset, net=None, state=None):
        self.cfg = cfg
        self.dataset = dataset
        self.net = net or SceneFlowNet(cfg.network)
        self.state = state or cfg.adam_state()
        # checkpoints store f32; keeping the live state f32-exact makes resume bitwise
        for p in self.net.parameters():
            p.data = p.data.astype(np.float32).astype(np.float64)
        self.steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
        self._epoch_cache = (None, None)

    @property
    def step(self):
        return self.state.step_count

    def _batch(self, step):
        epoch, pos = divmod(step, self.steps_per_epoch)
        if self._epoch_cache[0] != epoch:
            self._epoch_cache = (epoch, list(self.dataset.batches(self.cfg.batch_size, self.cfg.seed, epoch)))
        return epoch, self._epoch_cache[1][pos]

    def loss_on(self, batch, seed):
        flows, st = self.net.forward(batch.pc1, batch.pc2, seed=seed)
        w = tuple(reversed(self.cfg.network.loss_weights))
        loss = multiscale_loss(flows, batch.gt_flow, self.net.level_indices(st), w, mask=batch.mask)
        return loss, flows, st

    def train_step(self):
        epoch, batch = self._batch(self.step)
        params = self.net.param_dict()
        self.net.zero_grad()
        loss, _, _ = self.loss_on(batch, seed=[self.cfg.seed, self.step])
        if not np.isfinite(loss.data).all():
            raise NonFiniteError(f"loss is {float(loss.data)} at step {self.step + 1}")
        loss.backward()
        lr = adam_step(params, self.state, epoch=epoch, round_to=np.float32)
        return float(loss.data), lr

    def run(self, until, log=None, checkpoint_path=None, callback=None):
        """Train until ``step == until``; ``log`` receives ``step,loss,lr`` CSV rows."""
        history = []
        while self.step < until:
            loss, lr = self.train_step()
            history.append((self.step, loss, lr))
            if log is not None:
                log.write(f"{self.step},{loss:.10g},{lr:.10g}\n")
            if callback is not None:
                callback(self.step, loss, lr)
            every = self.cfg.checkpoint_every
            if checkpoint_path and every and self.step % every == 0:
                save_training_checkpoint(checkpoint_path, self.net, self.cfg, self.state)
        return history


def predict_dataset(net, dataset, seed=0, batch_size=4):
    """Yield ``(name, pc1_level, pred, gt, mask)`` at the network's output resolution."""
    for batch in dataset.batches(batch_size, seed, epoch=0, shuffle=False):
        flows, st = net.forward(batch.pc1, batch.pc2, seed=[seed, 0])
        idx = st.index1[1]
        final = flows[-1].data
        for b, name in enumerate(batch.names):
            gt = batch.gt_flow[b][idx[b]] if batch.gt_flow is not None else None
            yield name, st.coords1[1][b], final[b], gt, batch.mask[b][idx[b]]


def evaluate_dataset(net, dataset, seed=0, intrinsics=None, with_2d=True):
    acc = MetricsAccumulator(intrinsics=intrinsics, with_2d=with_2d)
    for name, xyz, pred, gt, mask in predict_dataset(net, dataset, seed):
        acc.add(xyz, pred, gt, mask, name=name)
    return acc
