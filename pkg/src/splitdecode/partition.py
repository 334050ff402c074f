"""Lossless two-party split of one decode step's attention.

One softmax over concatenated keys equals a convex combination of the
softmaxes over each part, weighted by their denominators. Each side
reports, per head, a PartialAttention: the weighted-value vector ``a``,
the denominator ``gamma`` relative to its own running max ``m``, and
``m`` itself. The merge rescales both denominators to a common max, which
keeps the combination exact while never exponentiating large scores.

Private partitions (prompt-derived K/V) must never cross a wire: nothing
in the wire module accepts a KvPartition, and the protocol tests fuzz
outbound frames to confirm no private rows leak.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import DimensionError, EmptyPartitionError

__all__ = [
    "KvPartition",
    "PartialAttention",
    "batched_public_partials",
    "merge_partials",
    "private_partial",
    "public_partial",
]

PRIVATE = "private"
PUBLIC = "public"


@dataclass(frozen=True)
class PartialAttention:
    """One party's per-head contribution to a single attention output.

    For an empty partition gamma is 0 and m is -inf; that sentinel acts as
    the additive identity under merge_partials. Payload on the wire is
    exactly head_dim + 2 scalars: a, gamma, m.
    """

    a: np.ndarray
    gamma: float
    m: float

    @classmethod
    def empty(cls, head_dim: int) -> "PartialAttention":
        return cls(a=np.zeros(head_dim), gamma=0.0, m=-np.inf)

    @property
    def is_empty(self) -> bool:
        return self.gamma == 0.0

    def scalars(self) -> np.ndarray:
        return np.concatenate([self.a, [self.gamma, self.m]])


@dataclass
class KvPartition:
    """Per-layer, per-head K/V rows labeled private or public.

    k[layer][head] and v[layer][head] are (n, head_dim) arrays of equal
    row count. Private partitions are confined to the user party by
    construction: no serializer in this package accepts one.
    """

    label: str
    k: list[list[np.ndarray]]
    v: list[list[np.ndarray]]

    def __post_init__(self):
        if self.label not in (PRIVATE, PUBLIC):
            raise ValueError(f"unknown partition label {self.label!r}")

    @classmethod
    def single_head(cls, label: str, K, V) -> "KvPartition":
        K = np.atleast_2d(np.asarray(K, dtype=np.float64))
        V = np.atleast_2d(np.asarray(V, dtype=np.float64))
        return cls(label=label, k=[[K]], v=[[V]])

    @classmethod
    def empty(cls, label: str, n_layers: int, n_heads: int, head_dim: int) -> "KvPartition":
        mk = lambda: np.zeros((0, head_dim))
        return cls(
            label=label,
            k=[[mk() for _ in range(n_heads)] for _ in range(n_layers)],
            v=[[mk() for _ in range(n_heads)] for _ in range(n_layers)],
        )

    def rows(self, layer: int = 0, head: int = 0) -> int:
        return self.k[layer][head].shape[0]

    def append(self, layer: int, head: int, k_row: np.ndarray, v_row: np.ndarray):
        self.k[layer][head] = np.vstack([self.k[layer][head], k_row])
        self.v[layer][head] = np.vstack([self.v[layer][head], v_row])


def _partial(q: np.ndarray, K: np.ndarray, V: np.ndarray) -> PartialAttention:
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if K.shape[0] != V.shape[0]:
        raise DimensionError("K and V row counts differ")
    if K.shape[0] == 0:
        return PartialAttention.empty(V.shape[1] if V.ndim == 2 else q.size)
    if K.shape[1] != q.size:
        raise DimensionError(f"query width {q.size} vs key width {K.shape[1]}")
    # inline softmax statistics; scores here are always finite 1-D float64
    scores = K @ q
    m = scores.max()
    e = np.exp(scores - m)
    gamma = e.sum()
    return PartialAttention(a=(e / gamma) @ V, gamma=float(gamma), m=float(m))


def private_partial(
    q: np.ndarray, part: KvPartition, layer: int = 0, head: int = 0
) -> PartialAttention:
    """The user party's softmax-weighted V contribution over its private rows."""
    if part.label != PRIVATE:
        raise ValueError("private_partial requires a private partition")
    return _partial(q, part.k[layer][head], part.v[layer][head])


def public_partial(
    q: np.ndarray, part: KvPartition, layer: int = 0, head: int = 0
) -> PartialAttention:
    """The model party's contribution over the generated-token rows."""
    if part.label != PUBLIC:
        raise ValueError("public_partial requires a public partition")
    return _partial(q, part.k[layer][head], part.v[layer][head])


def merge_partials(pvt: PartialAttention, pub: PartialAttention) -> np.ndarray:
    """Combine two partial results into the full attention output.

    Both denominators are rescaled to the shared max before mixing, so the
    coefficients gamma_pvt/(gamma_pvt + alpha*gamma_pub) and its mirror are
    evaluated without overflowing either exponential. An empty partial
    contributes nothing; the other side's vector is returned exactly.
    """
    if pvt.is_empty and pub.is_empty:
        raise EmptyPartitionError("cannot merge two empty partials")
    if pub.is_empty:
        return pvt.a.copy()
    if pvt.is_empty:
        return pub.a.copy()
    m = max(pvt.m, pub.m)
    g_pvt = pvt.gamma * np.exp(pvt.m - m)
    g_pub = pub.gamma * np.exp(pub.m - m)
    total = g_pvt + g_pub
    return (g_pvt / total) * pvt.a + (g_pub / total) * pub.a


def batched_public_partials(
    qs: np.ndarray,
    parts: list[KvPartition],
    layer: int = 0,
    head: int = 0,
) -> list[PartialAttention]:
    """Public partials for a batch of users in one padded-matrix pass.

    Users may have different public lengths; shorter ones are masked.
    Elementwise identical (within 1e-12) to calling public_partial per
    user, which the tests assert against a plain loop.
    """
    qs = np.atleast_2d(np.asarray(qs, dtype=np.float64))
    if len(parts) == 0 or qs.shape[0] != len(parts):
        raise ValueError("need one query row per partition")
    head_dim = qs.shape[1]
    ks, vs, lengths = [], [], []
    for part in parts:
        if part.label != PUBLIC:
            raise ValueError("batched_public_partials requires public partitions")
        K, V = part.k[layer][head], part.v[layer][head]
        if K.shape[0] != V.shape[0]:
            raise DimensionError("K and V row counts differ")
        if K.shape[0] > 0 and K.shape[1] != head_dim:
            raise DimensionError(
                f"key width {K.shape[1]} does not match query width {head_dim}"
            )
        ks.append(K)
        vs.append(V)
        lengths.append(K.shape[0])

    n_max = max(lengths)
    if n_max == 0:
        return [PartialAttention.empty(head_dim) for _ in parts]
    batch = len(parts)
    K_pad = np.zeros((batch, n_max, head_dim))
    V_pad = np.zeros((batch, n_max, head_dim))
    for i, (K, V) in enumerate(zip(ks, vs)):
        K_pad[i, : lengths[i]] = K
        V_pad[i, : lengths[i]] = V
    mask = np.arange(n_max)[None, :] < np.asarray(lengths)[:, None]

    scores = np.einsum("bnd,bd->bn", K_pad, qs)
    scores = np.where(mask, scores, -np.inf)
    m = np.max(scores, axis=1)
    safe_m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(scores - safe_m[:, None]), 0.0)
    gamma = e.sum(axis=1)
    out = []
    for i in range(batch):
        if lengths[i] == 0:
            out.append(PartialAttention.empty(head_dim))
        else:
            out.append(
                PartialAttention(
                    a=(e[i] / gamma[i]) @ V_pad[i], gamma=float(gamma[i]), m=float(m[i])
                )
            )
    return out
