"""Density clustering of ground-truth centroids and buffered coverage hulls.

DBSCAN runs on lon/lat points with a degree-valued eps; a point's
neighborhood includes itself when counting min_samples (the classical
definition). Each cluster's member centroids produce one convex hull,
buffered outward; noise points produce nothing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import shapely
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

DBSCAN_EPS_DEG = 0.1
DBSCAN_MIN_SAMPLES = 3
HULL_BUFFER_DEG = 0.025

NOISE = -1


def dbscan(points: np.ndarray, eps: float = DBSCAN_EPS_DEG, min_samples: int = DBSCAN_MIN_SAMPLES):
    """Cluster labels per point; noise is -1.

    Core points have at least ``min_samples`` neighbors within ``eps``
    (inclusive of the point itself); clusters are maximal density-connected
    sets. Cluster ids are assigned in point-index discovery order.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = points.shape[0]
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return labels
    tree = cKDTree(points)
    neighborhoods = tree.query_ball_point(points, r=eps)
    core = np.array([len(nb) >= min_samples for nb in neighborhoods])

    cluster = 0
    for start in range(n):
        if labels[start] != NOISE or not core[start]:
            continue
        labels[start] = cluster
        frontier = [start]
        while frontier:
            p = frontier.pop()
            for q in neighborhoods[p]:
                if labels[q] == NOISE:
                    labels[q] = cluster
                    if core[q]:
                        frontier.append(q)
        cluster += 1
    return labels


@dataclass
class CoverageHull:
    """Buffered convex hulls delimiting trustworthy reference coverage."""

    country: str
    polygons: list[shapely.Geometry]

    def contains(self, lon, lat) -> np.ndarray:
        lon = np.atleast_1d(np.asarray(lon, dtype=np.float64))
        lat = np.atleast_1d(np.asarray(lat, dtype=np.float64))
        hit = np.zeros(lon.shape, dtype=bool)
        for poly in self.polygons:
            hit |= shapely.intersects_xy(poly, lon, lat)
        return hit


def coverage_hulls(
    centroids_by_country: dict[str, np.ndarray],
    eps: float = DBSCAN_EPS_DEG,
    min_samples: int = DBSCAN_MIN_SAMPLES,
    buffer_deg: float = HULL_BUFFER_DEG,
) -> list[CoverageHull]:
    """Per-country buffered convex hulls of DBSCAN clusters of centroids."""
    hulls = []
    for country in sorted(centroids_by_country):
        points = np.asarray(centroids_by_country[country], dtype=np.float64).reshape(-1, 2)
        labels = dbscan(points, eps=eps, min_samples=min_samples)
        polygons = []
        for cluster in range(labels.max() + 1):
            members = points[labels == cluster]
            hull = shapely.MultiPoint(members).convex_hull.buffer(buffer_deg)
            polygons.append(hull)
        if not polygons:
            logger.warning("coverage_hulls: no clusters for %s; empty hull set", country)
        hulls.append(CoverageHull(country=country, polygons=polygons))
    return hulls
