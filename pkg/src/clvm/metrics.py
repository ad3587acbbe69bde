"""Evaluation scores for latent representations."""

import numpy as np
from scipy.spatial import procrustes
from sklearn.cluster import KMeans
from sklearn.metrics import adjusted_rand_score, silhouette_score


def kmeans_labels(latents, n_clusters, seed=0):
    km = KMeans(n_clusters=n_clusters, n_init=10, random_state=seed)
    return km.fit_predict(np.asarray(latents, dtype=np.float64))


def kmeans_ari(latents, labels, seed=0):
    """ARI between k-means clusters (k = number of distinct labels) and ``labels``."""
    labels = np.asarray(labels)
    pred = kmeans_labels(latents, len(np.unique(labels)), seed=seed)
    return float(adjusted_rand_score(labels, pred))


def ari(a, b):
    return float(adjusted_rand_score(a, b))


def silhouette(latents, labels):
    return float(silhouette_score(np.asarray(latents, dtype=np.float64), np.asarray(labels)))


def procrustes_distance(a, b):
    """Disparity after optimal translation, scaling, rotation and reflection.

    Zero for identical configurations; scale-free in both arguments.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"configurations differ in shape: {a.shape} vs {b.shape}")
    if np.allclose(a, b, rtol=0, atol=0):
        return 0.0
    _, _, disparity = procrustes(a, b)
    return float(disparity)


def select_by_silhouette(values, scores, fraction=0.98):
    """Largest grid value whose score is at least ``fraction`` of the best score.

    Favors the strongest regularization that keeps the latent clustering
    essentially as well separated as the best setting in the grid.
    """
    values = np.asarray(values, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if values.size == 0 or values.shape != scores.shape:
        raise ValueError("need one score per grid value")
    best = np.nanmax(scores)
    ok = scores >= fraction * best if best > 0 else scores >= best
    return float(values[ok].max())
