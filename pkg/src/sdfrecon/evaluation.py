"""Mesh-to-mesh 3D metrics: accuracy, completeness, Chamfer-L1, precision,
recall, F-score at a distance threshold, and normal consistency.

Point sets are sampled area-uniformly from each mesh with face normals
attached; nearest neighbors come from a KD-tree (exact queries).
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
from scipy.spatial import cKDTree

from .extraction import TriangleMesh, face_normals

DEFAULT_TAU = 0.05


@dataclass
class PointSampleSet:
    points: np.ndarray     # (K, 3)
    normals: np.ndarray    # (K, 3) unit, from the source triangle


@dataclass
class MetricReport:
    acc: float
    comp: float
    chamfer_l1: float
    precision: float
    recall: float
    fscore: float
    normal_consistency: float
    tau: float

    def as_dict(self):
        return asdict(self)

    def to_text(self):
        return "".join(f"{k} = {v:.9g}\n" for k, v in self.as_dict().items())

    @staticmethod
    def csv_header():
        return "acc,comp,chamfer_l1,precision,recall,fscore,normal_consistency,tau"

    def csv_row(self):
        d = self.as_dict()
        return ",".join(f"{d[k]:.9g}" for k in
                        MetricReport.csv_header().split(","))


def sample_mesh(mesh: TriangleMesh, k, rng):
    """K points sampled area-uniformly; each carries its triangle's normal."""
    if mesh.is_empty():
        raise ValueError("sample_mesh: mesh has no triangles")
    v = mesh.vertices
    tri = mesh.triangles
    e1 = v[tri[:, 1]] - v[tri[:, 0]]
    e2 = v[tri[:, 2]] - v[tri[:, 0]]
    cross = np.cross(e1, e2)
    area = 0.5 * np.linalg.norm(cross, axis=1)
    total = area.sum()
    if total <= 0:
        raise ValueError("sample_mesh: degenerate mesh (zero total area)")
    choice = rng.choice(tri.shape[0], size=k, p=area / total)
    u = rng.uniform(size=(k, 1))
    w = rng.uniform(size=(k, 1))
    su = np.sqrt(u)
    a = 1.0 - su
    b = su * (1.0 - w)
    c = su * w
    pts = (a * v[tri[choice, 0]] + b * v[tri[choice, 1]] + c * v[tri[choice, 2]])
    nrm = face_normals(mesh)[choice]
    return PointSampleSet(points=pts, normals=nrm)


def compute_metrics(pred: PointSampleSet, gt: PointSampleSet, tau=DEFAULT_TAU):
    """All seven metrics between a predicted and a ground-truth sample set."""
    if pred.points.shape[0] == 0 or gt.points.shape[0] == 0:
        raise ValueError("compute_metrics: empty point set")
    tree_gt = cKDTree(gt.points)
    tree_pred = cKDTree(pred.points)
    d_p2g, i_p2g = tree_gt.query(pred.points, workers=1)
    d_g2p, i_g2p = tree_pred.query(gt.points, workers=1)
    acc = float(np.mean(d_p2g))
    comp = float(np.mean(d_g2p))
    precision = float(np.mean(d_p2g <= tau))
    recall = float(np.mean(d_g2p <= tau))
    fscore = 0.0 if precision + recall == 0 else \
        2.0 * precision * recall / (precision + recall)
    nc_fwd = float(np.mean(np.abs(np.sum(pred.normals * gt.normals[i_p2g], axis=1))))
    nc_bwd = float(np.mean(np.abs(np.sum(gt.normals * pred.normals[i_g2p], axis=1))))
    return MetricReport(
        acc=acc,
        comp=comp,
        chamfer_l1=0.5 * (acc + comp),
        precision=precision,
        recall=recall,
        fscore=fscore,
        normal_consistency=0.5 * (nc_fwd + nc_bwd),
        tau=float(tau),
    )


def evaluate_meshes(pred_mesh, gt_mesh, k=20000, tau=DEFAULT_TAU, seed=0):
    """Sample both meshes and compute the metric report."""
    rng_pred = np.random.default_rng([int(seed), 0xE7A1])
    rng_gt = np.random.default_rng([int(seed), 0xE7A2])
    pred = sample_mesh(pred_mesh, k, rng_pred)
    gt = sample_mesh(gt_mesh, k, rng_gt)
    return compute_metrics(pred, gt, tau)
