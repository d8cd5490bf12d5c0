"""Small datasets for tests, demos and offline experiments."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import RawInteraction


def toy_interactions() -> list[RawInteraction]:
    """Four users, five items.

    u1: i1 i2 i3, u2: i2 i3 i4, u3: i1 i2, u4: i5.
    """
    rows = [("u1", "i1"), ("u1", "i2"), ("u1", "i3"), ("u2", "i2"), ("u2", "i3"),
            ("u2", "i4"), ("u3", "i1"), ("u3", "i2"), ("u4", "i5")]
    return [RawInteraction(u, i) for u, i in rows]


def community_interactions(
    num_users: int = 600,
    num_items: int = 800,
    num_communities: int = 12,
    mean_degree: int = 40,
    popularity_skew: float = 1.0,
    affinity: float = 20.0,
    seed: int = 0,
) -> list[RawInteraction]:
    """Users in latent taste communities, observed through a popularity-skewed exposure.

    Each item belongs to one community and has a Zipf-like global weight.  A
    user samples items with probability proportional to
    ``weight ** popularity_skew * (affinity if same community else 1)``, so
    the log mixes a shared popularity signal with a community signal that
    only similar users reveal.  Ratings (1-5) are higher inside the user's
    community.  Users and items are emitted with string ids ``u<n>`` and
    ``i<n>``.
    """
    rng = np.random.default_rng(seed)
    item_comm = rng.integers(0, num_communities, size=num_items)
    ranks = rng.permutation(num_items) + 1
    weight = 1.0 / ranks.astype(np.float64)
    user_comm = rng.integers(0, num_communities, size=num_users)
    degrees = np.clip(rng.poisson(mean_degree, size=num_users), 3, num_items // 2)

    rows: list[RawInteraction] = []
    base = weight ** popularity_skew
    for u in range(num_users):
        pref = base * np.where(item_comm == user_comm[u], affinity, 1.0)
        pref /= pref.sum()
        chosen = rng.choice(num_items, size=degrees[u], replace=False, p=pref)
        for i in chosen.tolist():
            match = item_comm[i] == user_comm[u]
            rating = int(np.clip(np.rint(rng.normal(4.2 if match else 2.8, 0.7)), 1, 5))
            rows.append(RawInteraction(f"u{u}", f"i{i}", rating, None))
    return rows


def write_tsv(rows: list[RawInteraction], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            extra = "" if r.rating is None else f"\t{r.rating}"
            fh.write(f"{r.user}\t{r.item}{extra}\n")
