"""Independent reference implementations used only by the tests."""

import math
from collections import Counter

import mpmath


def vote_voxel(votes, n_fg, w_fg):
    """Weighted majority label of one voxel, by explicit tallying."""
    counts = Counter(votes)
    best_label, best_score = None, -1
    for label in range(n_fg + 1):
        score = counts.get(label, 0) * (1 if label == 0 else w_fg)
        if score > best_score:
            best_label, best_score = label, score
    return best_label, len(votes) - max(counts.values())


def brute_vote(predictions, n_fg, w_fg):
    shape = predictions[0].shape
    fused, disagreement = {}, {}
    for idx in ((i, j, k) for i in range(shape[0]) for j in range(shape[1]) for k in range(shape[2])):
        fused[idx], disagreement[idx] = vote_voxel([int(p[idx]) for p in predictions], n_fg, w_fg)
    return fused, disagreement


def fleiss_pairs(ratings):
    """Fleiss' kappa written as pairwise agreement over plain Python lists."""
    items = [list(row) for row in ratings]
    n_items, n_raters = len(items), len(items[0])
    pairs_per_item = n_raters * (n_raters - 1)
    agree = 0.0
    for row in items:
        same = sum(1 for a in range(n_raters) for b in range(n_raters) if a != b and row[a] == row[b])
        agree += same / pairs_per_item
    p_obs = agree / n_items
    totals = Counter(x for row in items for x in row)
    p_exp = sum((c / (n_items * n_raters)) ** 2 for c in totals.values())
    return (p_obs - p_exp) / (1 - p_exp)


def student_t(a, b):
    """Pooled two-sample t and two-sided p via the regularized incomplete beta."""
    na, nb = len(a), len(b)
    ma, mb = sum(a) / na, sum(b) / nb
    ssa = sum((x - ma) ** 2 for x in a)
    ssb = sum((x - mb) ** 2 for x in b)
    df = na + nb - 2
    sp2 = (ssa + ssb) / df
    t = (ma - mb) / math.sqrt(sp2 * (1 / na + 1 / nb))
    x = df / (df + t * t)
    p = mpmath.betainc(df / 2, 0.5, 0, x, regularized=True)
    return t, float(p)
