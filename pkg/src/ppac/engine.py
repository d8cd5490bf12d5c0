"""Training with popularity-aware factual scores and counterfactual ranking.

Training fits ``y = sigmoid(pp_logit) * sigmoid(gp_logit) * r`` with a BPR
loss, plus MSE regressions of the two heads onto observed PP and GP.  At
ranking time the observed popularities are added back with weights
``gamma`` and ``beta``::

    score(u, i) = sigmoid(pp_logit) * sigmoid(gp_logit) * r + gamma * p[u, i] + beta * g[i]

Variants (ablations):

==========  ===================================  ==============================
variant     trained score                        ranking score
==========  ===================================  ==============================
base        r                                    r
full        s_p * s_g * r                        s_p * s_g * r + gamma p + beta g
no_ci       s_p * s_g * r                        s_p * s_g * r
no_pp       s_g * r                              s_g * r + beta g
no_gp       s_p * r                              s_p * r + gamma p
pred_only   s_p * s_g * r                        s_p * s_g * r + gamma s_p + beta s_g
obs_only    p * g * r                            p * g * r + gamma p + beta g
==========  ===================================  ==============================
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .data import InteractionDataset, sample_negatives
from .evaluate import ground_truth, ranking_metrics
from .models import (
    ScorerBundle,
    base_scores_all,
    final_embeddings,
    gp_logits_all,
    pp_logits_all,
    score_base,
    score_gp_head,
    score_pp_head,
)
from .numerics import NumericError, OptimizerConfig, Tensor
from .popularity import PopularityIndex, _top_items

_logger = logging.getLogger(__name__)

VARIANTS = ("base", "full", "no_ci", "no_pp", "no_gp", "pred_only", "obs_only")


def variant_heads(variant: str) -> tuple[bool, bool]:
    """Which of (pp head, gp head) a variant trains."""
    return {
        "base": (False, False),
        "no_pp": (False, True),
        "no_gp": (True, False),
        "obs_only": (False, False),
    }.get(variant, (True, True))


@dataclass
class TrainConfig:
    alpha: float = 0.1
    lam: float = 1e-4
    epochs: int = 400
    batch_size: int = 8192
    lr: float = 0.01
    seed: int = 0
    patience: int = 20
    eval_every: int = 1
    variant: str = "full"
    optimizer: str = "adam"
    l2_batch_mean: bool = True

    def __post_init__(self):
        if self.alpha < 0 or self.lam < 0:
            raise ValueError("alpha and lam must be non-negative")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")


@dataclass
class InferenceConfig:
    gamma: float = 256.0
    beta: float = -128.0
    k: int = 50

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")


# -- loss pieces ------------------------------------------------------------------

def _combine(variant: str, r: Tensor, p_logit: Tensor | None, g_logit: Tensor | None,
             p_obs: np.ndarray | None = None, g_obs: np.ndarray | None = None) -> Tensor:
    if variant == "base":
        return r
    if variant == "obs_only":
        return nx.mul(r, Tensor((p_obs * g_obs).astype(r.data.dtype)))
    y = r
    if p_logit is not None:
        y = nx.mul(nx.sigmoid(p_logit), y)
    if g_logit is not None:
        y = nx.mul(nx.sigmoid(g_logit), y)
    return y


def factual_predict(bundle: ScorerBundle, users, items, variant: str = "full",
                    popularity: PopularityIndex | None = None, final=None) -> Tensor:
    """Training-time score for aligned (user, item) batches."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    r = score_base(bundle, users, items, final)
    if variant == "obs_only":
        return _combine(variant, r, None, None, popularity.pp.values(users, items), popularity.gp[items])
    use_pp, use_gp = variant_heads(variant)
    p = score_pp_head(bundle, users, items) if use_pp and bundle.has_pp else None
    g = score_gp_head(bundle, items) if use_gp and bundle.has_gp else None
    return _combine(variant, r, p, g)


def bpr_loss(y_pos: Tensor, y_neg: Tensor) -> Tensor:
    """Mean of -log sigmoid(y_pos - y_neg), written as softplus(y_neg - y_pos)."""
    if y_pos.shape != y_neg.shape:
        raise nx.ShapeError(f"bpr_loss: {y_pos.shape} vs {y_neg.shape}")
    return nx.mean_all(nx.softplus(nx.sub(y_neg, y_pos)))


def mse_to_target(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean of (target - sigmoid(logits))^2."""
    diff = nx.sub(nx.sigmoid(logits), Tensor(np.asarray(target, dtype=logits.data.dtype)))
    return nx.mean_all(nx.square(diff))


def regression_losses(bundle: ScorerBundle, users, pos_items, popularity: PopularityIndex,
                      gp_items=None, p_obs: np.ndarray | None = None) -> tuple[Tensor | None, Tensor | None]:
    """(L_P over the observed pairs, L_G over ``gp_items`` or all items); None for missing heads."""
    l_p = l_g = None
    if bundle.has_pp:
        if p_obs is None:
            p_obs = popularity.pp.values(users, pos_items)
        l_p = mse_to_target(score_pp_head(bundle, users, pos_items), p_obs)
    if bundle.has_gp:
        items = np.arange(bundle.num_items) if gp_items is None else np.asarray(gp_items)
        l_g = mse_to_target(score_gp_head(bundle, items), popularity.gp[items])
    return l_p, l_g


def total_loss(l_r: Tensor, l_p: Tensor | None, l_g: Tensor | None, alpha: float,
               penalty: Tensor | None = None) -> Tensor:
    """L_R + alpha (L_P + L_G) + penalty; absent terms count as zero."""
    total = l_r
    reg = [t for t in (l_p, l_g) if t is not None]
    if reg and alpha:
        s = reg[0] if len(reg) == 1 else nx.add(reg[0], reg[1])
        total = nx.add(total, nx.scale(s, alpha))
    if penalty is not None:
        total = nx.add(total, penalty)
    return total


def _embedding_tables(bundle: ScorerBundle) -> list[tuple[nx.Tensor, str]]:
    out = [(bundle.store["user_emb"], "user"), (bundle.store["item_emb"], "item")]
    for name in ("pp.user_emb", "pp.item_emb", "gp.item_emb"):
        if name in bundle.store:
            out.append((bundle.store[name], name.split(".")[1].split("_")[0]))
    return out


def batch_penalty(bundle: ScorerBundle, touched_users, touched_items, lam: float, batch_size: int | None) -> Tensor:
    """L2 over embedding rows touched this step plus every dense (MLP) parameter.

    With ``batch_size`` set the embedding part is divided by it, matching the
    per-example scale of the mean BPR loss.
    """
    if lam == 0:
        return Tensor(np.zeros((), dtype=nx.DTYPE))
    users = np.unique(touched_users)
    items = np.unique(touched_items)
    rows = []
    for table, side in _embedding_tables(bundle):
        rows.append(nx.gather_rows(table, users if side == "user" else items))
    emb_lam = lam / batch_size if batch_size else lam
    dense = [p for name, p in bundle.store.items() if not name.endswith("_emb")]
    pen = nx.l2_penalty(rows, emb_lam)
    if dense:
        pen = nx.add(pen, nx.l2_penalty(dense, lam))
    return pen


# -- scoring and ranking ------------------------------------------------------------

def score_matrix(bundle: ScorerBundle, popularity: PopularityIndex | None, infer: InferenceConfig,
                 variant: str, users, final=None, parts: bool = False):
    """Ranking scores for ``users`` x all items (float64).

    With ``parts=True`` returns ``(factual, popularity_term)`` separately.
    """
    users = np.asarray(users, dtype=np.int64)
    if final is None:
        final = final_embeddings(bundle)
    r = base_scores_all(bundle, users, final).astype(np.float64)
    zero = np.zeros_like(r)
    if variant == "base":
        return (r, zero) if parts else r
    use_pp, use_gp = variant_heads(variant)
    sp = sg = None
    if use_pp and bundle.has_pp:
        sp = nx._sigmoid(pp_logits_all(bundle, users).astype(np.float64))
    if use_gp and bundle.has_gp:
        sg = nx._sigmoid(gp_logits_all(bundle).astype(np.float64))[None, :]
    need_obs = variant in ("full", "no_pp", "no_gp", "obs_only")
    p = popularity.pp.rows(users) if need_obs and variant != "no_pp" else None
    g = popularity.gp[None, :] if need_obs and variant != "no_gp" else None

    if variant == "obs_only":
        factual = p * g * r
    else:
        factual = r
        if sp is not None:
            factual = sp * factual
        if sg is not None:
            factual = sg * factual

    extra = zero
    if variant == "full" or variant == "obs_only":
        extra = infer.gamma * p + infer.beta * g
    elif variant == "no_pp":
        extra = infer.beta * g + zero
    elif variant == "no_gp":
        extra = infer.gamma * p
    elif variant == "pred_only":
        extra = infer.gamma * sp + infer.beta * sg
    if parts:
        return factual, extra
    return factual + extra


def counterfactual_score(bundle: ScorerBundle, popularity: PopularityIndex, infer: InferenceConfig,
                         user: int, items, variant: str = "full") -> np.ndarray:
    """Ranking scores of ``items`` for one user."""
    row = score_matrix(bundle, popularity, infer, variant, [user])[0]
    return row[np.asarray(items, dtype=np.int64)]


def decompose_score(bundle: ScorerBundle, popularity: PopularityIndex, infer: InferenceConfig,
                    user: int, items) -> dict[str, np.ndarray]:
    """Split the full score into the factual part and the PP / GP adjustments."""
    items = np.asarray(items, dtype=np.int64)
    factual, _ = score_matrix(bundle, popularity, infer, "full", [user], parts=True)
    pp = infer.gamma * popularity.pp.values(np.full(len(items), user), items)
    gp = infer.beta * popularity.gp[items]
    f = factual[0, items]
    return {"factual": f, "pp_effect": pp, "gp_effect": gp, "total": f + pp + gp}


def top_k(scores: np.ndarray, exclude: list[np.ndarray], k: int) -> list[list[int]]:
    """Per-row top-k indices; ties go to the lower index, ``exclude[r]`` never returned."""
    scores = np.array(scores, dtype=np.float64, copy=True)
    for r, ex in enumerate(exclude):
        scores[r, ex] = -np.inf
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    out = []
    for r, ex in enumerate(exclude):
        n_valid = scores.shape[1] - len(np.unique(ex))
        out.append(order[r, :min(k, n_valid)].tolist())
    return out


def rank_users(bundle: ScorerBundle, popularity: PopularityIndex | None, infer: InferenceConfig,
               variant: str, ds: InteractionDataset, users, chunk: int = 256, threads: int = 1) -> dict[int, list[int]]:
    """Top-k lists (train items excluded) for every user in ``users``."""
    users = np.asarray(list(users), dtype=np.int64)
    final = final_embeddings(bundle)

    def run(block):
        s = score_matrix(bundle, popularity, infer, variant, block, final)
        return dict(zip(block.tolist(), top_k(s, [ds.user_items(u) for u in block], infer.k)))

    blocks = [users[i:i + chunk] for i in range(0, len(users), chunk)]
    out: dict[int, list[int]] = {}
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as ex:
            for part in ex.map(run, blocks):
                out.update(part)
    else:
        for block in blocks:
            out.update(run(block))
    return out


def recommend(bundle: ScorerBundle, popularity: PopularityIndex | None, infer: InferenceConfig,
              ds: InteractionDataset, user: int, variant: str = "full") -> list[int]:
    return rank_users(bundle, popularity, infer, variant, ds, [user])[user]


def mostpop_rank(popularity: PopularityIndex, ds: InteractionDataset, user: int, k: int) -> list[int]:
    return _top_items(popularity.gp, ds.user_items(user), k).tolist()


def mostppop_rank(popularity: PopularityIndex, ds: InteractionDataset, user: int, k: int) -> list[int]:
    row = popularity.pp.rows([user])[0]
    return _top_items(row, ds.user_items(user), k).tolist()


def rank_baseline(name: str, popularity: PopularityIndex, ds: InteractionDataset, users, k: int) -> dict[int, list[int]]:
    """MostPop / MostPPop lists for ``users``."""
    users = np.asarray(list(users), dtype=np.int64)
    out = {}
    if name == "mostpop":
        gp = np.broadcast_to(popularity.gp, (1, ds.num_items))
        for u in users.tolist():
            out[u] = top_k(gp, [ds.user_items(u)], k)[0]
        return out
    if name != "mostppop":
        raise ValueError(f"unknown baseline {name!r}")
    for start in range(0, len(users), 256):
        block = users[start:start + 256]
        rows = popularity.pp.rows(block)
        out.update(zip(block.tolist(), top_k(rows, [ds.user_items(u) for u in block], k)))
    return out


# -- training -------------------------------------------------------------------

@dataclass
class TrainResult:
    bundle: ScorerBundle
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_recall: float = 0.0


def _validate(bundle, popularity, infer, variant, ds, gt):
    users = sorted(gt)
    if not users:
        return None
    lists = rank_users(bundle, popularity, infer, variant, ds, users)
    return ranking_metrics(lists, gt, infer.k)


def _step(bundle, ds, popularity, cfg, opt, variant, u, ip, ineg, gp_items, p_obs):
    """One optimizer step on a batch; returns the loss pieces for logging."""
    with nx.Tape() as tape:
        final = final_embeddings(bundle)
        y_pos = factual_predict(bundle, u, ip, variant, popularity, final)
        y_neg = factual_predict(bundle, u, ineg, variant, popularity, final)
        l_r = bpr_loss(y_pos, y_neg)
        l_p, l_g = regression_losses(bundle, u, ip, popularity, gp_items, p_obs)
        items_touched = np.concatenate([ip, ineg, gp_items if bundle.has_gp else ip[:0]])
        pen = batch_penalty(bundle, u, items_touched, cfg.lam, len(u) if cfg.l2_batch_mean else None)
        loss = total_loss(l_r, l_p, l_g, cfg.alpha, pen)
        if not np.isfinite(loss.data).all():
            raise NumericError("non-finite loss")
        tape.backward(loss)
    nx.optimizer_step(bundle.store, opt)
    return loss, l_r, l_p, l_g


def train(bundle: ScorerBundle, ds: InteractionDataset, popularity: PopularityIndex, cfg: TrainConfig,
          infer: InferenceConfig | None = None, log_path: str | Path | None = None) -> TrainResult:
    """Minimise L_R + alpha (L_P + L_G) + L2 with early stopping on validation recall.

    The best parameters (by validation Recall@k) are restored into ``bundle``.
    """
    infer = infer or InferenceConfig()
    variant = cfg.variant
    rng = np.random.default_rng(cfg.seed)
    opt = OptimizerConfig(algo=cfg.optimizer, lr=cfg.lr)
    users_all, pos_all = ds.pairs("train")
    n = len(users_all)
    if n == 0:
        raise ValueError("no training interactions")
    p_obs_all = popularity.pp.values(users_all, pos_all) if bundle.has_pp else None
    val_gt = ground_truth(ds, "valid")
    n_batches = max(1, -(-n // cfg.batch_size))

    result = TrainResult(bundle)
    best_snapshot = bundle.store.snapshot()
    best = -1.0
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            perm = rng.permutation(n)
            neg_all = sample_negatives(ds, users_all[perm], pos_all[perm], rng)
            item_chunks = np.array_split(rng.permutation(ds.num_items), n_batches)
            sums = {"L_R": 0.0, "L_P": 0.0, "L_G": 0.0, "total": 0.0}
            for b in range(n_batches):
                sl = slice(b * cfg.batch_size, min((b + 1) * cfg.batch_size, n))
                idx = perm[sl]
                u, ip, ineg = users_all[idx], pos_all[idx], neg_all[sl]
                gp_items = item_chunks[b]
                try:
                    loss, l_r, l_p, l_g = _step(bundle, ds, popularity, cfg, opt, variant, u, ip, ineg, gp_items,
                                                p_obs_all[idx] if p_obs_all is not None else None)
                except NumericError as exc:
                    raise NumericError(f"epoch {epoch}, batch {b}: {exc}") from None
                w = len(idx) / n
                sums["L_R"] += float(l_r.data) * w
                sums["L_P"] += float(l_p.data) * w if l_p is not None else 0.0
                sums["L_G"] += float(l_g.data) * len(gp_items) / ds.num_items if l_g is not None else 0.0
                sums["total"] += float(loss.data) * w
            rec = {"epoch": epoch, "seed": cfg.seed, **{k: float(v) for k, v in sums.items()},
                   "val_recall": None, "val_ndcg": None}
            if val_gt and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
                m = _validate(bundle, popularity, infer, variant, ds, val_gt)
                rec["val_recall"], rec["val_ndcg"] = m["recall"], m["ndcg"]
                if m["recall"] > best:
                    best, result.best_epoch = m["recall"], epoch
                    best_snapshot = bundle.store.snapshot()
            rec["elapsed_ms"] = round((time.perf_counter() - t0) * 1000, 3)
            result.log.append(rec)
            _logger.info("epoch %d L_R=%.5f L_P=%.5f L_G=%.5f val_recall=%s",
                         epoch, rec["L_R"], rec["L_P"], rec["L_G"], rec["val_recall"])
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
            if val_gt and epoch - result.best_epoch >= cfg.patience:
                break
    finally:
        if log_fh:
            log_fh.close()
    if val_gt:
        bundle.store.restore(best_snapshot)
        result.best_recall = best
    else:
        result.best_epoch = len(result.log)
    return result

