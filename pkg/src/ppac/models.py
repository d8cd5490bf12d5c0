"""Base scorers (BPRMF, NCF, LightGCN) and the PP/GP regression heads.

All scorers read one :class:`~ppac.numerics.ParameterStore`.  Tape-aware
functions (``score_*``) take id batches; ``*_all`` functions score whole
catalogues in plain numpy for ranking.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import ParameterStore, SparseAdjacency, Tensor

BASE_KINDS = ("bprmf", "ncf", "lightgcn")


@dataclass
class ScorerBundle:
    kind: str
    num_users: int
    num_items: int
    d: int
    store: ParameterStore
    has_pp: bool = True
    has_gp: bool = True
    share_embeddings: bool = True
    layers: int = 3
    adjacency: SparseAdjacency | None = None
    _final: tuple[Tensor, Tensor] | None = field(default=None, repr=False)

    def head_shapes(self) -> dict[str, list[int]]:
        out = {}
        if self.has_pp:
            out["pp"] = [2 * self.d, self.d, 1]
        if self.has_gp:
            out["gp"] = [self.d, self.d // 2, 1]
        return out

    def header_meta(self) -> dict:
        return {
            "kind": self.kind,
            "layers": self.layers,
            "has_pp": self.has_pp,
            "has_gp": self.has_gp,
            "share_embeddings": self.share_embeddings,
            "head_shapes": self.head_shapes(),
        }

    # embedding tables per consumer
    def table(self, role: str) -> Tensor:
        if self.share_embeddings or role in ("user_emb", "item_emb"):
            return self.store[role.split(".")[-1]]
        return self.store[role]


def _xavier(rng, fan_in, fan_out, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def _add_mlp(store, rng, prefix, widths, dtype, zero=False):
    for j, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        w = np.zeros((a, b), dtype=dtype) if zero else _xavier(rng, a, b, dtype)
        store.add(f"{prefix}.w{j}", w)
        store.add(f"{prefix}.b{j}", np.zeros(b, dtype=dtype))


def init_bundle(
    kind: str,
    num_users: int,
    num_items: int,
    d: int = 64,
    *,
    seed: int = 0,
    pp_head: bool = True,
    gp_head: bool = True,
    layers: int = 3,
    adjacency: SparseAdjacency | None = None,
    share_embeddings: bool = True,
    zero_heads: bool = False,
    dtype=nx.DTYPE,
) -> ScorerBundle:
    """Fresh parameters: embeddings ~ N(0, 0.01^2), MLP weights Xavier-uniform, biases 0."""
    if kind not in BASE_KINDS:
        raise ValueError(f"unknown base model {kind!r}; expected one of {BASE_KINDS}")
    if kind == "lightgcn" and adjacency is None:
        raise ValueError("lightgcn needs an adjacency")
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    store.add("user_emb", (rng.standard_normal((num_users, d)) * 0.01).astype(dtype))
    store.add("item_emb", (rng.standard_normal((num_items, d)) * 0.01).astype(dtype))
    if kind == "ncf":
        _add_mlp(store, rng, "ncf", [2 * d, d, d // 2], dtype)
        store.add("ncf.h", _xavier(rng, d + d // 2, 1, dtype))
        store.add("ncf.hb", np.zeros(1, dtype=dtype))
    if pp_head:
        if not share_embeddings:
            store.add("pp.user_emb", (rng.standard_normal((num_users, d)) * 0.01).astype(dtype))
            store.add("pp.item_emb", (rng.standard_normal((num_items, d)) * 0.01).astype(dtype))
        _add_mlp(store, rng, "pp", [2 * d, d, 1], dtype, zero=zero_heads)
    if gp_head:
        if not share_embeddings:
            store.add("gp.item_emb", (rng.standard_normal((num_items, d)) * 0.01).astype(dtype))
        _add_mlp(store, rng, "gp", [d, d // 2, 1], dtype, zero=zero_heads)
    return ScorerBundle(kind, num_users, num_items, d, store, pp_head, gp_head,
                        share_embeddings, layers if kind == "lightgcn" else 0, adjacency)


def bundle_from_store(store: ParameterStore, header: dict, adjacency: SparseAdjacency | None = None) -> ScorerBundle:
    meta = header["meta"]
    return ScorerBundle(header["kind"], header["num_users"], header["num_items"], header["d"], store,
                        meta["has_pp"], meta["has_gp"], meta["share_embeddings"], meta["layers"], adjacency)


def _mlp(store: ParameterStore, prefix: str, x: Tensor, depth: int) -> Tensor:
    for j in range(depth):
        x = nx.add(nx.matmul(x, store[f"{prefix}.w{j}"]), store[f"{prefix}.b{j}"])
        if j < depth - 1:
            x = nx.relu(x)
    return x


def _depth(store: ParameterStore, prefix: str) -> int:
    j = 0
    while f"{prefix}.w{j}" in store:
        j += 1
    return j


def final_embeddings(bundle: ScorerBundle) -> tuple[Tensor, Tensor]:
    """User and item tables seen by the base scorer (layer-averaged for LightGCN)."""
    U, I = bundle.store["user_emb"], bundle.store["item_emb"]
    if bundle.kind != "lightgcn" or bundle.layers == 0:
        return U, I
    E = nx.concat([U, I], axis=0)
    layers = [E]
    for _ in range(bundle.layers):
        E = nx.sparse_propagate(bundle.adjacency, E)
        layers.append(E)
    mean = nx.stack_rows_mean(layers)
    n = bundle.num_users
    users = nx.gather_rows(mean, np.arange(n))
    items = nx.gather_rows(mean, np.arange(n, n + bundle.num_items))
    return users, items


def _check_ids(ids, n, what):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"{what} id out of range [0, {n})")
    return ids


def score_base(bundle: ScorerBundle, users, items, final: tuple[Tensor, Tensor] | None = None) -> Tensor:
    """r_hat for aligned id batches.  Pass ``final`` to reuse one LightGCN propagation."""
    users = _check_ids(users, bundle.num_users, "user")
    items = _check_ids(items, bundle.num_items, "item")
    U, I = final if final is not None else final_embeddings(bundle)
    eu, ei = nx.gather_rows(U, users), nx.gather_rows(I, items)
    if bundle.kind != "ncf":
        return nx.dot_rows(eu, ei)
    s = bundle.store
    gmf = nx.mul(eu, ei)
    deep = nx.relu(_mlp(s, "ncf", nx.concat([eu, ei], axis=1), 2))
    fused = nx.concat([gmf, deep], axis=1)
    out = nx.add(nx.matmul(fused, s["ncf.h"]), s["ncf.hb"])
    return nx.reshape(out, (len(users),))


def score_pp_head(bundle: ScorerBundle, users, items) -> Tensor:
    """Pre-sigmoid PP estimate from concatenated user and item embeddings."""
    users = _check_ids(users, bundle.num_users, "user")
    items = _check_ids(items, bundle.num_items, "item")
    eu = nx.gather_rows(bundle.table("pp.user_emb"), users)
    ei = nx.gather_rows(bundle.table("pp.item_emb"), items)
    out = _mlp(bundle.store, "pp", nx.concat([eu, ei], axis=1), _depth(bundle.store, "pp"))
    return nx.reshape(out, (len(users),))


def score_gp_head(bundle: ScorerBundle, items) -> Tensor:
    items = _check_ids(items, bundle.num_items, "item")
    ei = nx.gather_rows(bundle.table("gp.item_emb"), items)
    out = _mlp(bundle.store, "gp", ei, _depth(bundle.store, "gp"))
    return nx.reshape(out, (len(items),))


# -- whole-catalogue scoring (no tape) --------------------------------------

def _pairwise_mlp(left: np.ndarray, right: np.ndarray, store: ParameterStore, prefix: str,
                  start: int, depth: int, relu_last: bool = False) -> np.ndarray:
    """Run an MLP over every (left row, right row) pair.

    ``left``/``right`` are already the first layer's contributions of each
    side, so ``relu(left[a] + right[b])`` is the first hidden activation.
    """
    h = np.maximum(left[:, None, :] + right[None, :, :], 0)
    for j in range(start, depth):
        h = h @ store[f"{prefix}.w{j}"].data + store[f"{prefix}.b{j}"].data
        if j < depth - 1 or relu_last:
            h = np.maximum(h, 0)
    return h


def base_scores_all(bundle: ScorerBundle, users, final=None) -> np.ndarray:
    """r_hat for ``users`` x every item."""
    users = _check_ids(users, bundle.num_users, "user")
    if final is None:
        final = final_embeddings(bundle)
    U, I = final[0].data[users], final[1].data
    if bundle.kind != "ncf":
        return U @ I.T
    s = bundle.store
    d = bundle.d
    h = s["ncf.h"].data[:, 0]
    gmf = (U * h[:d]) @ I.T
    w0 = s["ncf.w0"].data
    left = U @ w0[:d] + s["ncf.b0"].data
    right = I @ w0[d:]
    deep = _pairwise_mlp(left, right, s, "ncf", 1, 2, relu_last=True)
    return gmf + deep @ h[d:] + s["ncf.hb"].data[0]


def pp_logits_all(bundle: ScorerBundle, users) -> np.ndarray:
    users = _check_ids(users, bundle.num_users, "user")
    s = bundle.store
    d = bundle.d
    U = bundle.table("pp.user_emb").data[users]
    I = bundle.table("pp.item_emb").data
    w0 = s["pp.w0"].data
    left = U @ w0[:d] + s["pp.b0"].data
    right = I @ w0[d:]
    return _pairwise_mlp(left, right, s, "pp", 1, _depth(s, "pp"))[..., 0]


def gp_logits_all(bundle: ScorerBundle) -> np.ndarray:
    return score_gp_head(bundle, np.arange(bundle.num_items)).data
