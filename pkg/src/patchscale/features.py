"""Surrogate patch encoder and spatial-semantic attention.

All attention functions accept either numpy arrays or :class:`Tensor` inputs.
Numpy in, numpy out; tensors in, a tensor on the autodiff tape out.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .scene import ClusterRegion

DIST_EPS = 1.0
MASK_FILL = -1e30
FUSIONS = ("hadamard", "matmul")


def _attributes(region: ClusterRegion, width: float, height: float) -> np.ndarray:
    cx, cy = region.center
    _, _, w, h = region.bbox
    profile = region.category_counts / len(region.objects)
    head = [
        cx / width,
        cy / height,
        w / width * 4.0,
        h / height * 4.0,
        (np.log2(region.mean_px_size) - 5.0) / 2.0,
        len(region.objects) / 4.0,
        1.0,
    ]
    return np.concatenate([head, profile])


def projection_matrix(n_attributes: int, dim: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([0x9A7C, int(seed), n_attributes, dim]))
    return rng.normal(0.0, 1.0 / np.sqrt(n_attributes), size=(n_attributes, dim))


def encode_patch(
    region: ClusterRegion, scene_size: tuple[float, float], dim: int = 32, seed: int = 0
) -> np.ndarray:
    """Fixed random projection of normalized region attributes to ``dim`` features."""
    if dim < 8:
        raise ValueError(f"feature dimension must be >= 8, got {dim}")
    attrs = _attributes(region, *scene_size)
    return attrs @ projection_matrix(attrs.size, dim, seed)


def encode_regions(
    regions: Sequence[ClusterRegion], scene_size: tuple[float, float], dim: int = 32, seed: int = 0
) -> np.ndarray:
    if not regions:
        return np.zeros((0, dim))
    attrs = np.stack([_attributes(r, *scene_size) for r in regions])
    if dim < 8:
        raise ValueError(f"feature dimension must be >= 8, got {dim}")
    return attrs @ projection_matrix(attrs.shape[1], dim, seed)


def spatial_affinity(regions: Sequence[ClusterRegion], eps: float = DIST_EPS) -> np.ndarray:
    """Inverse center distance, clamped below at ``eps`` pixels."""
    centers = np.array([r.center for r in regions], dtype=float).reshape(len(regions), 2)
    diff = centers[:, None, :] - centers[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=-1))
    return 1.0 / np.maximum(dist, eps)


def _wrap(*arrays):
    is_tensor = any(isinstance(a, Tensor) for a in arrays)
    return is_tensor, [nx.as_tensor(a) for a in arrays]


def _unwrap(out: Tensor, is_tensor: bool):
    return out if is_tensor else out.data


def project_qkv(X, theta_q, theta_k, theta_v):
    is_tensor, (X, tq, tk, tv) = _wrap(X, theta_q, theta_k, theta_v)
    d = X.cols
    for name, t in (("theta_q", tq), ("theta_k", tk), ("theta_v", tv)):
        if t.shape != (d, d):
            raise ValueError(f"{name} must be {d}x{d}, got {t.shape}")
    return tuple(_unwrap(nx.matmul(X, t), is_tensor) for t in (tq, tk, tv))


def semantic_attention(Q, K):
    is_tensor, (Q, K) = _wrap(Q, K)
    if Q.shape != K.shape:
        raise ValueError(f"Q and K shapes differ: {Q.shape} vs {K.shape}")
    return _unwrap(nx.scale(nx.matmul(Q, nx.transpose(K)), 1.0 / np.sqrt(Q.cols)), is_tensor)


def attention_weights(sem, S, fusion: str = "hadamard", mask: np.ndarray | None = None):
    """Row-softmax of the fused semantic/spatial affinities.

    ``mask`` (boolean, True = allowed) confines each row to its own scene when
    several scenes share one batch.
    """
    is_tensor, (sem, S) = _wrap(sem, S)
    if sem.shape != S.shape or sem.rows != sem.cols:
        raise ValueError(f"sem and S must be matching square matrices: {sem.shape}, {S.shape}")
    if fusion == "hadamard":
        fused = nx.mul(sem, S)
    elif fusion == "matmul":
        fused = nx.matmul(sem, S)
    else:
        raise ValueError(f"unknown fusion {fusion!r}; expected one of {FUSIONS}")
    if mask is not None:
        fused = nx.add(fused, Tensor(np.where(mask, 0.0, MASK_FILL)))
    return _unwrap(nx.softmax_rows(fused), is_tensor)


def aggregate_attention(sem, S, V, fusion: str = "hadamard", mask: np.ndarray | None = None):
    """Attended features: row_softmax(sem (*) S) @ V."""
    is_tensor, (sem, S, V) = _wrap(sem, S, V)
    if V.rows != sem.rows:
        raise ValueError(f"V has {V.rows} rows but attention is {sem.shape}")
    weights = attention_weights(sem, S, fusion, mask)
    return _unwrap(nx.matmul(weights, V), is_tensor)


def spatial_semantic_attention(X, theta_q, theta_k, theta_v, S, fusion="hadamard", mask=None):
    """Full attention block from appearance features to attended features."""
    Q, K, V = project_qkv(X, theta_q, theta_k, theta_v)
    return aggregate_attention(semantic_attention(Q, K), S, V, fusion, mask)
