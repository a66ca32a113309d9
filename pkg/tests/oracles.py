"""Independent brute-force oracles shared across the test suite.

Everything here deliberately avoids the library's interval machinery:
hypotheses are rasterized on a 10 ms grid and scored with explicit loops,
and assignments are found by enumerating permutations.
"""

from itertools import permutations

import numpy as np

GRID = 0.01  # seconds


def rasterize_intervals(intervals, n_frames, step=GRID):
    """Frame f is active when its midpoint lies inside some interval."""
    mask = np.zeros(n_frames, dtype=bool)
    mids = (np.arange(n_frames) + 0.5) * step
    for a, b in intervals:
        mask |= (mids >= a) & (mids < b)
    return mask


def rasterize_hypothesis(hyp, n_frames, step=GRID):
    """dict speaker -> bool activity array."""
    out = {}
    for spk in sorted({s.speaker for s in hyp.segments}):
        ivs = [(s.onset, s.offset) for s in hyp.segments if s.speaker == spk]
        out[spk] = rasterize_intervals(ivs, n_frames, step)
    return out


def grid_frames(*hyps, step=GRID, margin=1.0):
    extent = max((s.offset for h in hyps for s in h.segments), default=0.0)
    return int(np.ceil((extent + margin) / step))


def best_permutation_mapping(co_matrix):
    """Max-total-co-occurrence one-to-one mapping by enumerating permutations."""
    r, h = co_matrix.shape
    best, best_score = {}, -1.0
    if r <= h:
        for perm in permutations(range(h), r):
            score = sum(co_matrix[i, perm[i]] for i in range(r))
            if score > best_score:
                best_score = score
                best = {i: perm[i] for i in range(r)}
    else:
        for perm in permutations(range(r), h):
            score = sum(co_matrix[perm[j], j] for j in range(h))
            if score > best_score:
                best_score = score
                best = {perm[j]: j for j in range(h)}
    return best


def grid_der(ref, hyp, collar=0.0, score_overlap=True, step=GRID):
    """Frame-level DER components (percent) with a permutation-enumerated mapping."""
    n = grid_frames(ref, hyp, step=step)
    ref_masks = rasterize_hypothesis(ref, n, step)
    hyp_masks = rasterize_hypothesis(hyp, n, step)
    ref_spk = sorted(ref_masks)
    hyp_spk = sorted(hyp_masks)

    scored = np.ones(n, dtype=bool)
    if collar > 0:
        for spk in ref_spk:
            # Boundaries of the merged per-speaker activity.
            m = ref_masks[spk]
            edges = np.flatnonzero(np.diff(np.concatenate([[0], m.view(np.int8), [0]])))
            for e in edges:
                t = e * step
                zone = rasterize_intervals([(t - collar, t + collar)], n, step)
                scored &= ~zone
    ref_counts = np.sum([ref_masks[s] for s in ref_spk], axis=0) if ref_spk else np.zeros(n)
    if not score_overlap:
        scored &= ref_counts < 2

    co = np.zeros((len(ref_spk), len(hyp_spk)))
    for i, r in enumerate(ref_spk):
        for j, h in enumerate(hyp_spk):
            co[i, j] = np.sum(ref_masks[r] & hyp_masks[h] & scored)
    mapping = best_permutation_mapping(co) if co.size else {}

    miss = fa = err = speech = 0
    for f in range(n):
        if not scored[f]:
            continue
        r_act = [s for s in ref_spk if ref_masks[s][f]]
        h_act = [s for s in hyp_spk if hyp_masks[s][f]]
        n_ref, n_hyp = len(r_act), len(h_act)
        correct = sum(
            1
            for i, r in enumerate(ref_spk)
            if ref_masks[r][f] and i in mapping and hyp_masks[hyp_spk[mapping[i]]][f]
        )
        miss += max(0, n_ref - n_hyp)
        fa += max(0, n_hyp - n_ref)
        err += min(n_ref, n_hyp) - correct
        speech += n_ref
    if speech == 0:
        raise ValueError("oracle: no scored reference speech")
    return (
        100.0 * miss / speech,
        100.0 * fa / speech,
        100.0 * err / speech,
        100.0 * (miss + fa + err) / speech,
    )


def grid_jer(ref, hyp, step=GRID):
    n = grid_frames(ref, hyp, step=step)
    ref_masks = rasterize_hypothesis(ref, n, step)
    hyp_masks = rasterize_hypothesis(hyp, n, step)
    ref_spk = sorted(ref_masks)
    hyp_spk = sorted(hyp_masks)
    co = np.zeros((len(ref_spk), len(hyp_spk)))
    for i, r in enumerate(ref_spk):
        for j, h in enumerate(hyp_spk):
            co[i, j] = np.sum(ref_masks[r] & hyp_masks[h])
    mapping = best_permutation_mapping(co) if co.size else {}
    errors = []
    for i, r in enumerate(ref_spk):
        if i not in mapping:
            errors.append(100.0)
            continue
        h = hyp_spk[mapping[i]]
        inter = np.sum(ref_masks[r] & hyp_masks[h])
        union = np.sum(ref_masks[r] | hyp_masks[h])
        errors.append(100.0 * (1.0 - inter / union) if union else 0.0)
    return float(np.mean(errors))


def brute_force_assignment_cost(costs):
    """Minimum assignment cost over min(R, H) pairs by full enumeration."""
    costs = np.asarray(costs)
    r, h = costs.shape
    best = np.inf
    if r <= h:
        for perm in permutations(range(h), r):
            best = min(best, sum(costs[i, perm[i]] for i in range(r)))
    else:
        for perm in permutations(range(r), h):
            best = min(best, sum(costs[perm[j], j] for j in range(h)))
    return best


def sweep_eer(trials):
    """Exhaustive-threshold EER with the same linear-interpolation rule."""
    scores = np.array([t.score for t in trials])
    labels = np.array([t.is_target for t in trials])
    n_tar, n_non = labels.sum(), (~labels).sum()
    thresholds = np.concatenate([np.unique(scores), [scores.max() + 1.0]])
    points = []
    for th in thresholds:
        fr = np.sum(labels & (scores < th)) / n_tar
        fa = np.sum(~labels & (scores >= th)) / n_non
        points.append((fr, fa))
    for (fr0, fa0), (fr1, fa1) in zip(points, points[1:]):
        if (fr0 - fa0) < 0 <= (fr1 - fa1):
            denom = (fr1 - fr0) - (fa1 - fa0)
            t = 0.0 if denom == 0 else (fa0 - fr0) / denom
            return 100.0 * (fr0 + t * (fr1 - fr0))
    fr0, fa0 = points[0]
    return 100.0 * 0.5 * (fr0 + fa0)


def sweep_min_dcf(trials, p_target=0.01, c_miss=1.0, c_fa=1.0):
    scores = np.array([t.score for t in trials])
    labels = np.array([t.is_target for t in trials])
    n_tar, n_non = labels.sum(), (~labels).sum()
    best = np.inf
    for th in np.concatenate([np.unique(scores), [scores.max() + 1.0]]):
        p_miss = np.sum(labels & (scores < th)) / n_tar
        p_fa = np.sum(~labels & (scores >= th)) / n_non
        best = min(best, c_miss * p_target * p_miss + c_fa * (1.0 - p_target) * p_fa)
    return best / min(c_miss * p_target, c_fa * (1.0 - p_target))


def random_hypothesis(rng, rec="rec", speakers=("A", "B"), n_segments=6, extent=30.0, grid=GRID):
    """Random grid-aligned hypothesis for round-trip and scoring tests."""
    from tsdiar.segments import DiarizationHypothesis, Segment

    segs = []
    for _ in range(n_segments):
        spk = speakers[rng.integers(len(speakers))]
        onset = round(float(rng.uniform(0, extent - 1.0)) / grid) * grid
        dur = round(float(rng.uniform(0.2, 5.0)) / grid) * grid
        segs.append(Segment(round(onset, 6), round(max(dur, grid), 6), spk))
    return DiarizationHypothesis(rec, tuple(segs))
