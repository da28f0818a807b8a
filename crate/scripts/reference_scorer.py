#!/usr/bin/env python3
"""Independent reference implementation of the caption metrics.

Generates a deterministic fixture corpus, scores it with straightforward
transcriptions of the published metric formulas (BLEU-4, ROUGE-L, CIDEr,
CIDEr-D), and writes corpus + expected scores to a JSON fixture consumed by
the Rust test suite. Run once; the output is checked in.

Usage: python3 scripts/reference_scorer.py <output.json>
"""

import json
import math
import random
import sys
from collections import Counter

MAX_ORDER = 4
ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0


# ---------------------------------------------------------------- BLEU-4

def ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def clipped_counts(cand, refs, n):
    c = ngrams(cand, n)
    total = sum(c.values())
    best = Counter()
    for r in refs:
        for g, k in ngrams(r, n).items():
            best[g] = max(best[g], k)
    matched = sum(min(k, best[g]) for g, k in c.items())
    return matched, total


def closest_ref_len(cand_len, refs):
    best = None
    for r in refs:
        l = len(r)
        if best is None or abs(l - cand_len) < abs(best - cand_len) or (
                abs(l - cand_len) == abs(best - cand_len) and l < best):
            best = l
    return best


def brevity_penalty(cand_len, ref_len):
    if cand_len == 0:
        return 0.0
    if cand_len > ref_len:
        return 1.0
    return math.exp(1.0 - ref_len / cand_len)


def bleu4_corpus(cands, refsets):
    matched = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    cand_len = 0
    ref_len = 0
    for c, refs in zip(cands, refsets):
        for n in range(1, MAX_ORDER + 1):
            m, t = clipped_counts(c, refs, n)
            matched[n - 1] += m
            totals[n - 1] += t
        cand_len += len(c)
        ref_len += closest_ref_len(len(c), refs)
    if any(m == 0 or t == 0 for m, t in zip(matched, totals)):
        return 0.0
    log_sum = sum(math.log(m / t) for m, t in zip(matched, totals))
    return brevity_penalty(cand_len, ref_len) * math.exp(log_sum / MAX_ORDER)


def bleu4_sentence(cand, refs):
    if not cand:
        return 0.0
    log_sum = 0.0
    for n in range(1, MAX_ORDER + 1):
        m, t = clipped_counts(cand, refs, n)
        log_sum += math.log((m + 1) / (t + 1))
    bp = brevity_penalty(len(cand), closest_ref_len(len(cand), refs))
    return bp * math.exp(log_sum / MAX_ORDER)


# --------------------------------------------------------------- ROUGE-L

def lcs(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b):
            cur[j + 1] = prev[j] + 1 if x == y else max(cur[j], prev[j + 1])
        prev = cur
    return prev[len(b)]


def rouge_l(cand, refs):
    best = 0.0
    for r in refs:
        if not cand or not r:
            continue
        l = lcs(cand, r)
        p = l / len(cand)
        rc = l / len(r)
        if p + rc > 0:
            b2 = ROUGE_BETA * ROUGE_BETA
            best = max(best, (1 + b2) * p * rc / (rc + b2 * p))
    return best


def rouge_l_corpus(cands, refsets):
    return sum(rouge_l(c, r) for c, r in zip(cands, refsets)) / len(cands)


# ----------------------------------------------------------------- CIDEr

def build_df(refsets):
    df = Counter()
    for refs in refsets:
        seen = set()
        for r in refs:
            for n in range(1, MAX_ORDER + 1):
                seen.update(tuple(r[i:i + n]) for i in range(len(r) - n + 1))
        for g in seen:
            df[g] += 1
    return df


def tfidf_vector(tokens, n, df, log_n, normalize):
    counts = ngrams(tokens, n)
    total = sum(counts.values())
    vec = {}
    for g, c in counts.items():
        tf = c / total if normalize and total > 0 else float(c)
        idf = log_n - math.log(max(df[g], 1))
        vec[g] = tf * idf
    return vec


def cider_score(cand, refs, df, log_n, variant):
    order_sum = 0.0
    normalize = variant == "plain"
    for n in range(1, MAX_ORDER + 1):
        vc = tfidf_vector(cand, n, df, log_n, normalize)
        nc = math.sqrt(sum(v * v for v in vc.values()))
        ref_sum = 0.0
        for r in refs:
            vr = tfidf_vector(r, n, df, log_n, normalize)
            nr = math.sqrt(sum(v * v for v in vr.values()))
            if nc == 0.0 or nr == 0.0:
                continue
            if variant == "plain":
                dot = sum(v * vr[g] for g, v in vc.items() if g in vr)
            else:
                dot = sum(min(v, vr[g]) * vr[g] for g, v in vc.items() if g in vr)
            sim = dot / (nc * nr)
            if variant == "d":
                dl = len(cand) - len(r)
                sim *= math.exp(-dl * dl / (2.0 * CIDER_SIGMA * CIDER_SIGMA))
            ref_sum += sim
        order_sum += ref_sum / len(refs)
    return 10.0 * order_sum / MAX_ORDER


def cider_corpus(cands, refsets, variant):
    df = build_df(refsets)
    log_n = math.log(max(len(refsets), 2))
    per = [cider_score(c, r, df, log_n, variant) for c, r in zip(cands, refsets)]
    return per, sum(per) / len(per)


# --------------------------------------------------------------- fixture

OBJECTS = ["cat", "dog", "car", "bird", "boat", "book", "ball", "box",
           "cup", "hat", "fish", "frog", "duck", "bear", "lamp", "shoe"]
COLORS = ["red", "blue", "green", "yellow", "black", "white", "brown", "pink"]
RELATIONS = ["on", "near", "under", "beside", "above", "behind"]
GROUNDS = ["mat", "rug", "floor", "desk", "shelf", "bench", "couch", "bed",
           "road", "grass", "field", "wall"]


def make_corpus(rng, n_items=50):
    cands, refsets = [], []
    for _ in range(n_items):
        o, c = rng.choice(OBJECTS), rng.choice(COLORS)
        rel, g = rng.choice(RELATIONS), rng.choice(GROUNDS)
        templates = [
            f"a {c} {o} {rel} a {g}",
            f"the {c} {o} is {rel} a {g}",
            f"there is a {c} {o} {rel} the {g}",
            f"one {c} {o} sits {rel} the {g}",
        ]
        refs = [t.split() for t in rng.sample(templates, rng.randint(2, 4))]
        base = list(rng.choice(refs))
        # Perturb some candidates so scores are not all trivially perfect.
        roll = rng.random()
        if roll < 0.3:
            base[rng.randrange(len(base))] = rng.choice(OBJECTS)
        elif roll < 0.5:
            base = base[:-1]
        elif roll < 0.6:
            base = base + ["a"]
        cands.append(base)
        refsets.append(refs)
    return cands, refsets


def make_dangling_fixture():
    """Corpus where the dangling phrase 'with a' is so common among the
    references that appending it to a candidate raises its score."""
    refsets = []
    for o, g in [("cat", "hat"), ("dog", "bone"), ("car", "wheel"),
                 ("bird", "worm"), ("boat", "sail"), ("bear", "fish"),
                 ("frog", "fly"), ("duck", "pond")]:
        refsets.append([f"a {o} with a {g}".split(),
                        f"the {o} with a {g} with a {g}".split()])
    plain_cand = "a cat".split()
    dangling_cand = "a cat with a".split()
    df = build_df(refsets)
    log_n = math.log(max(len(refsets), 2))
    before = cider_score(plain_cand, refsets[0], df, log_n, "d")
    after = cider_score(dangling_cand, refsets[0], df, log_n, "d")
    assert after > before, (before, after)
    return {
        "refsets": refsets,
        "candidate_plain": plain_cand,
        "candidate_dangling": dangling_cand,
        "cider_d_plain": before,
        "cider_d_dangling": after,
    }


def main():
    out_path = sys.argv[1]
    rng = random.Random(20260824)
    cands, refsets = make_corpus(rng)
    per_d, mean_d = cider_corpus(cands, refsets, "d")
    per_plain, mean_plain = cider_corpus(cands, refsets, "plain")
    fixture = {
        "candidates": cands,
        "references": refsets,
        "expected": {
            "bleu4_corpus": bleu4_corpus(cands, refsets),
            "bleu4_sentence_mean": sum(
                bleu4_sentence(c, r) for c, r in zip(cands, refsets)) / len(cands),
            "rouge_l": rouge_l_corpus(cands, refsets),
            "cider": mean_plain,
            "cider_d": mean_d,
            "per_item_cider_d": per_d,
        },
        "dangling_phrase": make_dangling_fixture(),
    }
    with open(out_path, "w") as f:
        json.dump(fixture, f, indent=1)
    print(f"wrote {out_path}")
    for k, v in fixture["expected"].items():
        if isinstance(v, float):
            print(f"  {k}: {v:.6f}")


if __name__ == "__main__":
    main()
