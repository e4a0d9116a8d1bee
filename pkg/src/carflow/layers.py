"""Differentiable building blocks of the flow network.

All layers take batched inputs: coordinates ``(B, N, 3)`` (numpy arrays or
tensors, for warped clouds) and features as :class:`Tensor` ``(B, N, C)``.
Neighbour selection runs on raw values and is not differentiated.
"""
from __future__ import annotations

import numpy as np

from . import geom
from .tensor import (MLP, Linear, Module, Tensor, as_tensor, broadcast_to, concat, gather,
                     l2_norm_last_axis, reduce_sum, softmax)


class FeatureWidthError(ValueError):
    pass


def _values(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def spatial_encode(center, neighbor):
    """Concatenate center, neighbour, offset and offset length (10 channels).

    ``center`` broadcasts against ``neighbor`` (e.g. ``(B, M, 1, 3)`` against
    ``(B, M, K, 3)``). Plain 3-vectors return a plain 10-vector.
    """
    if not isinstance(center, Tensor) and not isinstance(neighbor, Tensor):
        c = np.asarray(center, dtype=np.float64)
        n = np.asarray(neighbor, dtype=np.float64)
        c, n = np.broadcast_arrays(c, n)
        rel = n - c
        return np.concatenate([c, n, rel, np.linalg.norm(rel, axis=-1, keepdims=True)], axis=-1)
    c, n = as_tensor(center), as_tensor(neighbor)
    shape = np.broadcast_shapes(c.shape, n.shape)
    c = broadcast_to(c, shape) if c.shape != shape else c
    n = broadcast_to(n, shape) if n.shape != shape else n
    rel = n - c
    return concat([c, n, rel, l2_norm_last_axis(rel)], axis=-1)


def relative_encode(center, neighbor):
    """Translation-invariant variant of :func:`spatial_encode`: offset and length only."""
    c, n = as_tensor(center), as_tensor(neighbor)
    rel = n - c
    return concat([rel, l2_norm_last_axis(rel)], axis=-1)


def flatten_seed(*parts):
    """Flatten nested integer seed tuples into a SeedSequence entropy list."""
    out = []
    for p in parts:
        if isinstance(p, (tuple, list)):
            out.extend(flatten_seed(*p))
        else:
            out.append(int(p))
    return out


def sample_indices(coords, n_out, sampler, seed):
    """Per-batch-item sampling indices ``(B, n_out)``."""
    if sampler == "fps":
        return geom.farthest_point_sample_batched(coords, n_out, seed=0)
    if sampler == "random":
        return np.stack([geom.random_sample(coords.shape[1], n_out, seed=flatten_seed(seed, b))
                         for b in range(coords.shape[0])])
    raise ValueError(f"unknown sampler {sampler!r}")


def gather_np(arr, idx):
    """Batched numpy gather matching :func:`tensor.gather`."""
    b = np.arange(arr.shape[0]).reshape((-1,) + (1,) * (idx.ndim - 1))
    return arr[b, idx]


def canonical_neighbors(centers, coords, neighbors):
    """Reorder each neighbour row by (distance, index).

    The soft aggregation sums over K; a fixed order keeps that sum bitwise
    independent of how the neighbour list was produced.
    """
    d2 = geom.sq_dist(gather_np(coords, neighbors), centers[:, :, None, :])
    order = np.lexsort((neighbors, d2), axis=-1)
    return np.take_along_axis(neighbors, order, axis=-1)


class ContextAwareSetConv(Module):
    """Downsample and softly aggregate neighbour features.

    Neighbour features come from a shared MLP on offset and raw feature; each
    is weighted per channel by a softmax over the K neighbours of an MLP on
    ``FC(spatial encoding)``, the neighbour feature and the raw feature.
    ``aggregation="max"`` swaps the soft weights for max-pooling and
    ``encoding="relative"`` drops the absolute coordinates.
    """

    def __init__(self, c_in, widths, k, rng, fc_width=16, weight_widths=None,
                 sampler="fps", aggregation="context", encoding="full"):
        if aggregation not in ("context", "max"):
            raise ValueError(f"unknown aggregation {aggregation!r}")
        if encoding not in ("full", "relative"):
            raise ValueError(f"unknown encoding {encoding!r}")
        self.c_in, self.k, self.sampler = c_in, k, sampler
        self.aggregation, self.encoding = aggregation, encoding
        self.feature_mlp = MLP(3 + c_in, widths, rng)
        self.c_out = self.feature_mlp.n_out
        if aggregation == "context":
            enc_width = 10 if encoding == "full" else 4
            self.encode_fc = Linear(enc_width, fc_width, rng)
            weight_widths = list(weight_widths or [self.c_out])
            if weight_widths[-1] != self.c_out:
                weight_widths.append(self.c_out)
            self.weight_mlp = MLP(fc_width + self.c_out + c_in, weight_widths, rng,
                                  final_activation=False)

    def __call__(self, coords, features, n_out, seed=0, idx=None, neighbors=None):
        """Return ``(new_coords, new_features, sample_idx)``."""
        coords = _values(coords)
        features = as_tensor(features)
        if features.shape[-1] != self.c_in:
            raise FeatureWidthError(f"expected {self.c_in} input channels, got {features.shape[-1]}")
        if n_out > coords.shape[1]:
            raise ValueError(f"n_out={n_out} exceeds {coords.shape[1]} input points")
        if idx is None:
            idx = sample_indices(coords, n_out, self.sampler, seed)
        new_xyz = gather_np(coords, idx)
        if neighbors is None:
            neighbors, _ = geom.knn_batched(new_xyz, coords, self.k)
        return new_xyz, self.aggregate(new_xyz, coords, features, neighbors), idx

    def aggregate(self, new_xyz, coords, features, neighbors):
        neighbors = canonical_neighbors(new_xyz, coords, neighbors)
        grouped_xyz = gather_np(coords, neighbors)                    # B,M,K,3
        rel = grouped_xyz - new_xyz[:, :, None, :]
        grouped_f = gather(features, neighbors)                       # B,M,K,C
        local = self.feature_mlp(concat([Tensor(rel, dtype=features.dtype), grouped_f]))
        if self.aggregation == "max":
            return local.max(axis=2)
        center = Tensor(new_xyz[:, :, None, :], dtype=features.dtype)
        nbr = Tensor(grouped_xyz, dtype=features.dtype)
        enc = spatial_encode(center, nbr) if self.encoding == "full" else relative_encode(center, nbr)
        enc = self.encode_fc(enc).relu()
        logits = self.weight_mlp(concat([enc, local, grouped_f]))
        w = softmax(logits, axis=2)
        return reduce_sum(local * w, axis=2)


class AttentiveCostVolume(Module):
    """Two-stage attentive flow embedding between frame 1 and frame 2.

    Stage 1 attends over the K1 nearest frame-2 points of each frame-1 point;
    stage 2 re-aggregates the result over the K2 nearest frame-1 points.
    """

    def __init__(self, c1, c2, widths, rng, k1=8, k2=8, attn_widths=None):
        self.c1, self.c2, self.k1, self.k2 = c1, c2, k1, k2
        self.cost_mlp = MLP(c1 + c2 + 10, widths, rng)
        self.c_out = self.cost_mlp.n_out
        attn = list(attn_widths or [self.c_out])
        if attn[-1] != self.c_out:
            attn.append(self.c_out)
        self.attn1 = MLP(10 + self.c_out, attn, rng, final_activation=False)
        self.attn2 = MLP(10 + self.c_out, attn, rng, final_activation=False)

    def __call__(self, xyz1, f1, xyz2, f2):
        f1, f2 = as_tensor(f1), as_tensor(f2)
        if f1.shape[-1] != self.c1 or f2.shape[-1] != self.c2:
            raise FeatureWidthError(
                f"cost volume expects widths ({self.c1}, {self.c2}), got ({f1.shape[-1]}, {f2.shape[-1]})")
        dtype = f1.dtype
        x1 = xyz1 if isinstance(xyz1, Tensor) else Tensor(xyz1, dtype=dtype)
        xyz2 = _values(xyz2)
        B, n1, _ = x1.shape
        center = x1.reshape(B, n1, 1, 3)

        nb1, _ = geom.knn_batched(x1.data, xyz2, self.k1)
        y = Tensor(gather_np(xyz2, nb1), dtype=dtype)
        enc1 = spatial_encode(center, y)
        k1 = nb1.shape[2]
        f_rep = broadcast_to(f1.reshape(B, n1, 1, self.c1), (B, n1, k1, self.c1))
        h = self.cost_mlp(concat([f_rep, gather(f2, nb1), enc1]))
        a1 = softmax(self.attn1(concat([enc1, h])), axis=2)
        e_hat = reduce_sum(a1 * h, axis=2)

        nb2, _ = geom.knn_batched(x1.data, x1.data, self.k2)
        enc2 = spatial_encode(center, gather(x1, nb2))
        e_nb = gather(e_hat, nb2)
        a2 = softmax(self.attn2(concat([enc2, e_nb])), axis=2)
        return reduce_sum(a2 * e_nb, axis=2)


class SetUpConv(Module):
    """Propagate sparse embeddings to dense points: MLP on offset and embedding, max over K."""

    def __init__(self, c_sparse, widths, rng, k=8, c_dense=0, fuse_widths=None):
        self.c_sparse, self.c_dense, self.k = c_sparse, c_dense, k
        self.mlp = MLP(3 + c_sparse, widths, rng)
        self.c_out = self.mlp.n_out
        if fuse_widths:
            self.fuse = MLP(self.c_out + c_dense, fuse_widths, rng)
            self.c_out = self.fuse.n_out

    def __call__(self, sparse_xyz, sparse_emb, dense_xyz, dense_feat=None):
        sparse_xyz, dense_xyz = _values(sparse_xyz), _values(dense_xyz)
        sparse_emb = as_tensor(sparse_emb)
        if sparse_xyz.shape[1] == 0:
            raise ValueError("set upconv needs at least one sparse point")
        if sparse_emb.shape[-1] != self.c_sparse:
            raise FeatureWidthError(f"expected {self.c_sparse} sparse channels, got {sparse_emb.shape[-1]}")
        nb, _ = geom.knn_batched(dense_xyz, sparse_xyz, self.k)
        rel = gather_np(sparse_xyz, nb) - dense_xyz[:, :, None, :]
        v = self.mlp(concat([Tensor(rel, dtype=sparse_emb.dtype), gather(sparse_emb, nb)]))
        agg = v.max(axis=2)
        if hasattr(self, "fuse"):
            parts = [agg]
            if self.c_dense:
                if dense_feat is None or dense_feat.shape[-1] != self.c_dense:
                    raise FeatureWidthError("set upconv fusion needs dense features of the configured width")
                parts.append(as_tensor(dense_feat))
            agg = self.fuse(concat(parts))
        return agg


def warp(coords, flow):
    """Move points by ``flow``; differentiable in ``flow``."""
    c = coords if isinstance(coords, Tensor) else Tensor(coords)
    flow = as_tensor(flow)
    if c.shape != flow.shape:
        raise ValueError(f"warp shape mismatch {c.shape} vs {flow.shape}")
    return c + flow


def interpolate(values, idx, weights):
    """Weighted neighbour sum: ``out[b, i] = sum_k w[b, i, k] * values[b, idx[b, i, k]]``."""
    values = as_tensor(values)
    w = Tensor(weights[..., None], dtype=values.dtype)
    return reduce_sum(gather(values, idx) * w, axis=2)


class SceneFlowPredictor(Module):
    """Refine the embedding from (features, re-embedding, upsampled embedding) and add a residual flow."""

    def __init__(self, c1, c2, c3, widths, rng, residual=True):
        self.widths_in = (c1, c2, c3)
        self.mlp = MLP(c1 + c2 + c3, widths, rng)
        self.c_out = self.mlp.n_out
        self.flow_fc = Linear(self.c_out, 3, rng)
        self.residual = residual

    def __call__(self, pf, re, e_up, coarse_flow):
        pf, re, e_up = as_tensor(pf), as_tensor(re), as_tensor(e_up)
        n = {pf.shape[1], re.shape[1], e_up.shape[1], as_tensor(coarse_flow).shape[1]}
        if len(n) != 1:
            raise ValueError("scene flow predictor inputs have different row counts")
        e_ref = self.mlp(concat([pf, re, e_up]))
        sf_res = self.flow_fc(e_ref)
        flow = sf_res + coarse_flow if self.residual else sf_res
        return flow, e_ref, sf_res


class ResidualFlowRefinement(Module):
    """Upsample the previous estimate, warp frame 1, re-embed against frame 2, predict a residual."""

    def __init__(self, c_emb_in, c_feat1, c_feat2, rng, upconv_widths, cost_widths,
                 predictor_widths, k_up=8, k1=8, k2=8, residual=True):
        self.upconv = SetUpConv(c_emb_in, upconv_widths, rng, k=k_up, c_dense=c_feat1,
                                fuse_widths=[upconv_widths[-1]])
        self.cost_volume = AttentiveCostVolume(c_feat1, c_feat2, cost_widths, rng, k1=k1, k2=k2)
        self.predictor = SceneFlowPredictor(c_feat1, self.cost_volume.c_out, self.upconv.c_out,
                                            predictor_widths, rng, residual=residual)
        self.c_out = self.predictor.c_out

    def __call__(self, prev_xyz, prev_flow, prev_emb, xyz1, f1, xyz2, f2):
        """Return ``(flow, embedding, info)``; ``info`` keeps the coarse flow and residual."""
        prev_xyz, xyz1 = _values(prev_xyz), _values(xyz1)
        idx, w = geom.three_nn_weights_batched(xyz1, prev_xyz)
        coarse = interpolate(prev_flow, idx, w)
        e_up = self.upconv(prev_xyz, prev_emb, xyz1, f1)
        warped = warp(Tensor(xyz1, dtype=coarse.dtype), coarse)
        re = self.cost_volume(warped, f1, xyz2, f2)
        flow, emb, res = self.predictor(f1, re, e_up, coarse)
        return flow, emb, {"coarse": coarse, "residual": res}
