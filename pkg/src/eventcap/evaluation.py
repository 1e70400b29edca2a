"""Evaluation: proposal recall curves and caption quality metrics.

Proposal quality is summarized as the area under the recall-vs-average-
proposals curve at a range of overlap thresholds.  Budgets are applied
tie-inclusively: asking for the top n keeps every prediction whose score
ties the nth one, so uniformly scored predictions are kept as a block and
the curve does not depend on an arbitrary ordering among equals.

Caption quality follows the dense protocol: each predicted segment is
scored against the reference sentences whose segments overlap it by at
least alpha, and the per-prediction scores are averaged; predictions with
no overlapping reference count as zero.  The reported number is the mean
over alpha in {0.3, 0.5, 0.7, 0.9}.
"""

from __future__ import annotations

import json
import math
import warnings
from collections import Counter

import numpy as np

from .autodiff import ContractError
from .captioner import tokenize
from .proposals import Segment, tiou

DEFAULT_TIOUS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
CAPTION_ALPHAS = (0.3, 0.5, 0.7, 0.9)
SENTENCE_METRICS = ("bleu_1", "bleu_2", "bleu_3", "bleu_4", "rouge_l", "meteor")
ALL_METRICS = SENTENCE_METRICS + ("cider",)


# ---------------------------------------------------------------------------
# proposal recall


def top_scoring(segments: list[Segment], budget: int) -> list[Segment]:
    """The top ``budget`` segments by score, tie-inclusively."""
    if budget < 1:
        raise ContractError("budget must be at least 1")
    if len(segments) <= budget:
        return list(segments)
    order = sorted(range(len(segments)), key=lambda i: (-segments[i].score, i))
    cutoff = segments[order[budget - 1]].score
    return [s for s in segments if s.score >= cutoff]


def greedy_match_count(preds: list[Segment], gts: list[Segment], threshold: float) -> int:
    """One-to-one matches with overlap >= threshold, assigned greedily in
    descending overlap order (ties broken by prediction then gt index)."""
    pairs = []
    for pi, p in enumerate(preds):
        for gi, g in enumerate(gts):
            t = tiou(p, g)
            if t >= threshold:
                pairs.append((-t, pi, gi))
    pairs.sort()
    used_p: set[int] = set()
    used_g: set[int] = set()
    count = 0
    for _, pi, gi in pairs:
        if pi not in used_p and gi not in used_g:
            used_p.add(pi)
            used_g.add(gi)
            count += 1
    return count


def recall_curve(preds_by_video: dict[str, list[Segment]],
                 gts_by_video: dict[str, list[Segment]],
                 threshold: float,
                 budgets: list[int] | None = None):
    """Recall against average kept proposals per video, one point per budget.

    Returns (avg_proposals, recalls) as float arrays.  Every video needs a
    non-empty ground truth list; prediction lists may be empty.
    """
    if not gts_by_video:
        raise ContractError("no ground truth to evaluate against")
    if set(preds_by_video) != set(gts_by_video):
        raise ContractError("prediction and ground-truth video sets differ")
    for vid, gts in gts_by_video.items():
        if not gts:
            raise ContractError(f"{vid}: empty ground truth")
        if any(p.score is None for p in preds_by_video[vid]):
            raise ContractError(f"{vid}: prediction without a score")
    if budgets is None:
        longest = max((len(p) for p in preds_by_video.values()), default=0)
        budgets = list(range(1, max(longest, 1) + 1))
    if list(budgets) != sorted(set(budgets)) or (budgets and budgets[0] < 1):
        raise ContractError("budgets must be strictly increasing positive integers")
    total_gt = sum(len(g) for g in gts_by_video.values())
    n_videos = len(gts_by_video)
    xs, ys = [], []
    for budget in budgets:
        matched = 0
        kept_total = 0
        for vid, gts in gts_by_video.items():
            kept = top_scoring(preds_by_video[vid], budget)
            kept_total += len(kept)
            matched += greedy_match_count(kept, gts, threshold)
        xs.append(kept_total / n_videos)
        ys.append(matched / total_gt)
    return np.array(xs), np.array(ys)


def curve_auc(x: np.ndarray, y: np.ndarray) -> float:
    """Trapezoidal area under y(x), normalized by the x span; a degenerate
    span (single point or all budgets saturated) reduces to the mean."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size == 0:
        raise ContractError("empty curve")
    if x.size == 1 or x[-1] == x[0]:
        return float(np.mean(y))
    area = float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) * 0.5))
    return area / float(x[-1] - x[0])


def proposal_eval(preds_by_video: dict[str, list[Segment]],
                  gts_by_video: dict[str, list[Segment]],
                  thresholds=DEFAULT_TIOUS,
                  budgets: list[int] | None = None) -> dict:
    """AUC of the recall curve at each overlap threshold plus their mean."""
    auc_by_tiou: dict[float, float] = {}
    curves: dict[float, dict] = {}
    for thr in thresholds:
        x, y = recall_curve(preds_by_video, gts_by_video, thr, budgets)
        auc_by_tiou[thr] = curve_auc(x, y)
        curves[thr] = {"avg_proposals": x.tolist(), "recall": y.tolist()}
    return {
        "auc_by_tiou": auc_by_tiou,
        "average_auc": float(np.mean(list(auc_by_tiou.values()))),
        "curves": curves,
    }


# ---------------------------------------------------------------------------
# sentence metrics


def ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_n(candidate: list[str], references: list[list[str]], max_n: int = 1) -> float:
    """Geometric mean of clipped n-gram precisions with a brevity penalty.

    The effective reference length is the closest to the candidate's (ties
    go to the shorter); any zero precision zeroes the whole score.
    """
    if not references:
        raise ContractError("bleu needs at least one reference")
    c = len(candidate)
    if c == 0:
        return 0.0
    precisions = []
    for n in range(1, max_n + 1):
        cand_counts = ngram_counts(candidate, n)
        total = sum(cand_counts.values())
        if total == 0:
            return 0.0
        best = Counter()
        for ref in references:
            for gram, cnt in ngram_counts(ref, n).items():
                best[gram] = max(best[gram], cnt)
        clipped = sum(min(cnt, best[gram]) for gram, cnt in cand_counts.items())
        if clipped == 0:
            return 0.0
        precisions.append(clipped / total)
    r = min((len(ref) for ref in references), key=lambda L: (abs(L - c), L))
    brevity = 1.0 if c > r else math.exp(1.0 - r / c)
    return brevity * math.exp(sum(math.log(p) for p in precisions) / max_n)


def rouge_l(candidate: list[str], references: list[list[str]], beta: float = 1.2) -> float:
    """Longest-common-subsequence F measure, maximized over references."""
    if not references:
        raise ContractError("rouge needs at least one reference")
    best = 0.0
    for ref in references:
        lcs = _lcs_length(candidate, ref)
        if lcs == 0 or not candidate or not ref:
            continue
        prec = lcs / len(candidate)
        rec = lcs / len(ref)
        score = (1 + beta ** 2) * prec * rec / (rec + beta ** 2 * prec)
        best = max(best, score)
    return best


def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[-1]))
        prev = cur
    return prev[-1]


def meteor_lite(candidate: list[str], references: list[list[str]]) -> float:
    """Exact-match harmonic mean with a fragmentation penalty, maximized
    over references: F = 10PR/(R+9P), penalty = 0.5 (chunks/matches)^3."""
    if not references:
        raise ContractError("meteor needs at least one reference")
    best = 0.0
    for ref in references:
        m = sum(min(candidate.count(t), ref.count(t)) for t in set(candidate))
        if m == 0 or not candidate or not ref:
            continue
        chunks = _min_chunks(candidate, ref, m)
        prec = m / len(candidate)
        rec = m / len(ref)
        fmean = 10 * prec * rec / (rec + 9 * prec)
        penalty = 0.5 * (chunks / m) ** 3
        best = max(best, fmean * (1 - penalty))
    return best


def _min_chunks(candidate: list[str], ref: list[str], m: int) -> int:
    """Fewest contiguous blocks over all maximum exact alignments.

    A chunk extends when consecutive candidate tokens map to consecutive
    reference positions.  Exhaustive search with branch-and-bound; caption
    sentences are short, and the bound collapses repeated-token blowups.
    """
    ref_positions: dict[str, list[int]] = {}
    for j, t in enumerate(ref):
        ref_positions.setdefault(t, []).append(j)
    counts = Counter(ref)
    best = [m]   # never more chunks than matches

    def remaining_possible(i: int, avail: Counter) -> int:
        tail = Counter(candidate[i:])
        return sum(min(tail[t], avail[t]) for t in tail)

    def dfs(i: int, used: int, matched: int, last_i: int, last_j: int, chunks: int,
            avail: Counter):
        if chunks >= best[0] and matched < m:
            return
        if matched == m:
            best[0] = min(best[0], chunks)
            return
        if matched + remaining_possible(i, avail) < m:
            return
        tok = candidate[i]
        for j in ref_positions.get(tok, ()):
            if used & (1 << j):
                continue
            grow = 1 if not (last_i == i - 1 and j == last_j + 1) else 0
            if chunks + grow <= best[0]:
                avail[tok] -= 1
                dfs(i + 1, used | (1 << j), matched + 1, i, j, chunks + grow, avail)
                avail[tok] += 1
        dfs(i + 1, used, matched, last_i, last_j, chunks, avail)

    dfs(0, 0, 0, -5, -5, 0, counts.copy())
    return best[0]


def cider_d(candidates: list[list[str]], references: list[list[list[str]]],
            sigma: float = 6.0, max_n: int = 4) -> tuple[float, list[float]]:
    """Consensus score: clipped TF-IDF cosine per n-gram order, averaged over
    n = 1..4, Gaussian length penalty, scaled by 10.

    The IDF corpus is this call's reference sets.  Returns (mean, per item).
    If every reference set is identical the IDF degenerates and all scores
    are zero; that is reported with a warning rather than an error.
    """
    if len(candidates) != len(references):
        raise ContractError("candidate and reference counts differ")
    if len(candidates) < 2:
        raise ContractError("consensus scoring needs at least two instances")
    log_n = math.log(len(references))
    doc_freq: list[Counter] = [Counter() for _ in range(max_n)]
    for refs in references:
        seen: list[set] = [set() for _ in range(max_n)]
        for ref in refs:
            for k in range(max_n):
                seen[k].update(ngram_counts(ref, k + 1))
        for k in range(max_n):
            doc_freq[k].update(seen[k])
    if all(v == len(references) for k in range(max_n) for v in doc_freq[k].values()):
        warnings.warn("every reference set is identical; consensus scores are all zero")

    def tfidf(tokens: list[str]):
        vecs, norms = [], []
        for k in range(max_n):
            vec = {g: c * (log_n - math.log(max(1.0, doc_freq[k][g])))
                   for g, c in ngram_counts(tokens, k + 1).items()}
            vecs.append(vec)
            norms.append(math.sqrt(sum(v * v for v in vec.values())))
        return vecs, norms

    scores = []
    for cand, refs in zip(candidates, references):
        cv, cn = tfidf(cand)
        total = 0.0
        for ref in refs:
            rv, rn = tfidf(ref)
            delta = len(cand) - len(ref)
            pen = math.exp(-delta * delta / (2 * sigma * sigma))
            sim = 0.0
            for k in range(max_n):
                if cn[k] > 0 and rn[k] > 0:
                    dot = sum(min(v, rv[k].get(g, 0.0)) * rv[k].get(g, 0.0)
                              for g, v in cv[k].items())
                    sim += dot / (cn[k] * rn[k]) * pen
            total += sim / max_n
        scores.append(10.0 * total / len(refs) if refs else 0.0)
    return float(np.mean(scores)), scores


# ---------------------------------------------------------------------------
# dense caption protocol


def match_references(pred: Segment, gt_segments: list[Segment], alpha: float) -> list[int]:
    return [i for i, g in enumerate(gt_segments) if tiou(pred, g) >= alpha]


def dense_caption_eval(predictions: dict, annotations: dict,
                       alphas=CAPTION_ALPHAS, keep_top: int = 1000) -> dict:
    """Score predicted captions against overlapping references.

    ``predictions`` is {"results": {vid: [{sentence, timestamp,
    proposal_score}, ...]}}; ``annotations`` is {vid: {"timestamps":
    [[s, e], ...], "sentences": [...]}}.  Returns per-alpha metric means and
    their average over alphas.
    """
    results = predictions.get("results")
    if results is None:
        raise ContractError("predictions lack a results table")
    unknown = set(results) - set(annotations)
    if unknown:
        raise ContractError(f"predictions for unannotated videos: {sorted(unknown)}")
    gt_segs = {vid: [Segment.from_bounds(s, e) for s, e in ann["timestamps"]]
               for vid, ann in annotations.items()}
    gt_tokens = {vid: [tokenize(s) for s in ann["sentences"]]
                 for vid, ann in annotations.items()}

    instances = []   # (candidate tokens, pred segment, video id)
    for vid in sorted(results):
        ranked = sorted(results[vid], key=lambda p: -p["proposal_score"])[:keep_top]
        for p in ranked:
            seg = Segment.from_bounds(p["timestamp"][0], p["timestamp"][1])
            instances.append((tokenize(p["sentence"]), seg, vid))

    per_alpha: dict[float, dict[str, float]] = {}
    for alpha in alphas:
        refsets = [[gt_tokens[vid][i] for i in match_references(seg, gt_segs[vid], alpha)]
                   for cand, seg, vid in instances]
        metrics = {name: 0.0 for name in SENTENCE_METRICS}
        for (cand, _, _), refs in zip(instances, refsets):
            if refs:
                for n in range(1, 5):
                    metrics[f"bleu_{n}"] += bleu_n(cand, refs, n)
                metrics["rouge_l"] += rouge_l(cand, refs)
                metrics["meteor"] += meteor_lite(cand, refs)
        count = len(instances)
        means = {k: (v / count if count else 0.0) for k, v in metrics.items()}
        scored = [(cand, refs) for (cand, _, _), refs in zip(instances, refsets) if refs]
        if len(scored) >= 2:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                consensus, per_item = cider_d([c for c, _ in scored], [r for _, r in scored])
            means["cider"] = sum(per_item) / count
        else:
            if count:
                warnings.warn(f"alpha={alpha}: too few matched predictions for a "
                              "consensus score; reporting zero")
            means["cider"] = 0.0
        per_alpha[alpha] = means
    mean_over_alpha = {name: float(np.mean([per_alpha[a][name] for a in alphas]))
                       for name in ALL_METRICS}
    return {
        "alphas": list(alphas),
        "per_alpha": {str(a): per_alpha[a] for a in alphas},
        "mean": mean_over_alpha,
        "num_predictions": len(instances),
    }


def report_to_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def report_to_csv(report: dict) -> str:
    """Flat rows: alpha (or "mean"), metric, value."""
    lines = ["alpha,metric,value"]
    for alpha in report["per_alpha"]:
        for name in ALL_METRICS:
            lines.append(f"{alpha},{name},{report['per_alpha'][alpha][name]!r}")
    for name in ALL_METRICS:
        lines.append(f"mean,{name},{report['mean'][name]!r}")
    return "\n".join(lines) + "\n"
