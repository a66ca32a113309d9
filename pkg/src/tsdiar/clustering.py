"""Clustering-based first-pass diarization seeding TS-VAD: uniform segmentation,
embedding extraction, cosine affinity, spectral clustering.

The affinity is plain cosine similarity (the learned affinity network this
replaces is out of scope). Eigendecomposition is cyclic Jacobi; speaker
count comes from the largest eigengap among the smallest eigenvalues.
"""

from __future__ import annotations

import numpy as np

from .features import FbankConfig, Waveform
from .segments import DiarizationHypothesis, Segment, Timeline


class ClusteringError(ValueError):
    pass


def uniform_segment(
    timeline: Timeline, length: float = 1.28, shift: float = 0.64
) -> list[tuple[float, float]]:
    """Sliding windows inside each speech region.

    Full windows step by ``shift``; a shorter final window is kept when at
    least ``shift`` seconds remain past the last full window, and a region
    shorter than ``length`` yields itself when it is at least ``shift`` long.
    """
    windows = []
    for a, b in timeline.regions:
        dur = b - a
        if dur < shift:
            continue
        if dur < length:
            windows.append((a, b))
            continue
        n_full = int(np.floor((dur - length) / shift)) + 1
        for k in range(n_full):
            windows.append((a + k * shift, a + k * shift + length))
        tail_start = n_full * shift
        if dur - tail_start >= shift and dur - (length + (n_full - 1) * shift) > 1e-9:
            windows.append((a + tail_start, b))
    return windows


def cosine_affinity(embeddings: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity, symmetrized with a unit diagonal."""
    emb = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(emb, axis=1)
    if np.any(norms <= 1e-12):
        raise ClusteringError("zero embedding cannot enter a cosine affinity")
    unit = emb / norms[:, None]
    aff = unit @ unit.T
    aff = 0.5 * (aff + aff.T)
    np.fill_diagonal(aff, 1.0)
    return np.clip(aff, -1.0, 1.0)


def refine_affinity(
    affinity: np.ndarray, prune_percentile: float = 80.0, keep_fraction: float = 0.8
) -> np.ndarray:
    """Row-wise percentile pruning plus max-symmetrization.

    Raw cosine graphs are near-fully connected, which hides the block
    structure from the Laplacian eigengap; damping each row's weak edges
    (x0.01 below the percentile) recovers it. Edges within ``keep_fraction``
    of the row's strongest off-diagonal edge are never damped, so a genuinely
    homogeneous recording is not carved into spurious clusters. 0 disables.
    """
    aff = np.asarray(affinity, dtype=np.float64)
    if prune_percentile <= 0:
        return aff.copy()
    if not 0 < prune_percentile < 100:
        raise ClusteringError("prune percentile must lie in (0, 100)")
    refined = aff.copy()
    n = refined.shape[0]
    for i in range(n):
        off = np.delete(refined[i], i)
        strongest = off.max() if off.size else 1.0
        threshold = min(np.percentile(refined[i], prune_percentile), keep_fraction * strongest)
        refined[i, refined[i] < threshold] *= 0.01
    return np.maximum(refined, refined.T)


def jacobi_eigh(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Returns (eigenvalues ascending, eigenvectors as columns).
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ClusteringError("jacobi_eigh needs a square matrix")
    if not np.allclose(a, a.T, atol=1e-8):
        raise ClusteringError("jacobi_eigh needs a symmetric matrix")
    n = a.shape[0]
    m = 0.5 * (a + a.T)
    v = np.eye(n)
    scale = np.linalg.norm(m)
    if scale == 0.0 or n == 1:
        return np.sort(np.diag(m)), v
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(m, -1) ** 2) * 2.0)
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = m[p, q]
                if abs(apq) <= 1e-30:
                    continue
                theta = (m[q, q] - m[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot_p = m[:, p].copy()
                rot_q = m[:, q].copy()
                m[:, p] = c * rot_p - s * rot_q
                m[:, q] = s * rot_p + c * rot_q
                rot_p = m[p, :].copy()
                rot_q = m[q, :].copy()
                m[p, :] = c * rot_p - s * rot_q
                m[q, :] = s * rot_p + c * rot_q
                vec_p = v[:, p].copy()
                vec_q = v[:, q].copy()
                v[:, p] = c * vec_p - s * vec_q
                v[:, q] = s * vec_p + c * vec_q
    eigvals = np.diag(m).copy()
    order = np.argsort(eigvals, kind="stable")
    return eigvals[order], v[:, order]


def _farthest_point_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[int(rng.integers(x.shape[0]))]]
    for _ in range(1, k):
        dists = np.min(
            [np.sum((x - c) ** 2, axis=1) for c in centers], axis=0
        )
        centers.append(x[int(np.argmax(dists))])
    return np.stack(centers)


def kmeans(
    x: np.ndarray,
    k: int,
    rng: np.random.Generator,
    restarts: int = 20,
    iters: int = 100,
) -> np.ndarray:
    """Seeded Lloyd iterations with farthest-point init; best inertia wins."""
    x = np.asarray(x, dtype=np.float64)
    best_labels = np.zeros(x.shape[0], dtype=int)
    best_inertia = np.inf
    for _ in range(restarts):
        centers = _farthest_point_init(x, k, rng)
        labels = np.zeros(x.shape[0], dtype=int)
        for _ in range(iters):
            dists = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2)
            new_labels = np.argmin(dists, axis=1)
            for j in range(k):
                members = x[new_labels == j]
                if members.size:
                    centers[j] = members.mean(axis=0)
                else:  # re-seed an empty cluster at the farthest point
                    far = np.argmax(np.min(dists, axis=1))
                    centers[j] = x[far]
                    new_labels[far] = j
            if np.array_equal(new_labels, labels):
                labels = new_labels
                break
            labels = new_labels
        inertia = float(np.sum((x - centers[labels]) ** 2))
        if inertia < best_inertia:
            best_inertia = inertia
            best_labels = labels.copy()
    return best_labels


def spectral_cluster(
    affinity: np.ndarray,
    max_speakers: int = 4,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, int]:
    """Normalized-Laplacian spectral clustering with eigengap model selection."""
    aff = np.asarray(affinity, dtype=np.float64)
    if aff.ndim != 2 or aff.shape[0] != aff.shape[1]:
        raise ClusteringError("affinity must be square")
    if aff.shape[0] < 2:
        raise ClusteringError("need at least 2 points to cluster")
    if not np.allclose(aff, aff.T, atol=1e-9):
        raise ClusteringError("affinity must be symmetric")
    if rng is None:
        rng = np.random.default_rng(0)

    m = aff.shape[0]
    # Negative similarities carry no graph weight; keep the unit diagonal.
    a_nn = np.clip(aff, 0.0, None)
    deg = a_nn.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(np.maximum(deg, 1e-12))
    lap = np.eye(m) - inv_sqrt[:, None] * a_nn * inv_sqrt[None, :]
    eigvals, eigvecs = jacobi_eigh(lap)

    n_gaps = min(max_speakers, m - 1)
    gaps = eigvals[1 : n_gaps + 1] - eigvals[:n_gaps]
    k = int(np.argmax(gaps)) + 1
    if k == 1:
        return np.zeros(m, dtype=int), 1
    embedding = eigvecs[:, :k]
    norms = np.linalg.norm(embedding, axis=1)
    embedding = embedding / np.maximum(norms, 1e-12)[:, None]
    labels = kmeans(embedding, k, rng)
    return labels, k


def diarize_clustering(
    wave: Waveform,
    embedder,
    timeline: Timeline,
    fbank_cfg: FbankConfig,
    rng: np.random.Generator,
    max_speakers: int = 4,
    window_length: float = 1.28,
    window_shift: float = 0.64,
    min_embed_duration: float = 0.5,
    jitter_sigma: float = 0.0,
    prune_percentile: float = 80.0,
) -> DiarizationHypothesis:
    """Uniform windows -> embeddings -> refined cosine affinity -> spectral clusters.

    ``jitter_sigma`` adds seeded Gaussian noise to the window embeddings
    (stand-in for the out-of-scope embedding augmentation), off by default.
    """
    windows = uniform_segment(timeline, window_length, window_shift)
    if not windows:
        return DiarizationHypothesis(timeline.recording_id, ())
    embeddings = []
    for a, b in windows:
        emb = embedder.embed_waveform(
            wave.slice(a, b), fbank_cfg, min_duration=min(min_embed_duration, b - a)
        )
        embeddings.append(emb)
    emb = np.stack(embeddings)
    if jitter_sigma > 0:
        emb = emb + rng.normal(scale=jitter_sigma, size=emb.shape)

    if len(windows) == 1:
        labels = np.zeros(1, dtype=int)
    else:
        affinity = refine_affinity(cosine_affinity(emb), prune_percentile)
        labels, _ = spectral_cluster(affinity, max_speakers, rng)

    # Windows overlap; cut at the midpoints of consecutive windows per region
    # so the hypothesis has no same-speaker self-overlap.
    segs: list[Segment] = []
    bounds: list[tuple[float, float, int]] = []
    for (a, b), lab in zip(windows, labels):
        bounds.append((a, b, int(lab)))
    cells: list[tuple[float, float, int]] = []
    for i, (a, b, lab) in enumerate(bounds):
        lo = a if i == 0 or bounds[i - 1][1] <= a else 0.5 * (a + bounds[i - 1][1])
        nxt = bounds[i + 1] if i + 1 < len(bounds) else None
        hi = b if nxt is None or nxt[0] >= b else 0.5 * (nxt[0] + b)
        if hi > lo:
            cells.append((lo, hi, lab))
    for lo, hi, lab in cells:
        name = f"C{lab}"
        if segs and segs[-1].speaker == name and abs(segs[-1].offset - lo) < 1e-9:
            segs[-1] = Segment(segs[-1].onset, hi - segs[-1].onset, name)
        else:
            segs.append(Segment(lo, hi - lo, name))
    return DiarizationHypothesis(timeline.recording_id, tuple(segs))
