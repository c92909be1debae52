"""Forward simulation from the generative model and recovery metrics."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .fileio import atomic_write_json
from .model import EdgeCountPanel, HyperParams, Partition, check_paths
from .samplers import sample_prior_paths


@dataclass
class GroundTruth:
    partition: Partition
    base_rates: np.ndarray
    paths: np.ndarray
    deviations: np.ndarray
    theta: np.ndarray
    panel: EdgeCountPanel
    hypers: HyperParams

    def to_dict(self) -> dict:
        return {
            "format": "multirel-truth v1",
            "partition": self.partition.assignment.tolist(),
            "base_rates": self.base_rates.tolist(),
            "paths": self.paths.tolist(),
            "deviations": self.deviations.tolist(),
            "theta": self.theta.tolist(),
            "hypers": self.hypers.to_dict(),
        }

    def save(self, path):
        atomic_write_json(path, self.to_dict())

    @classmethod
    def load(cls, path, panel: EdgeCountPanel) -> "GroundTruth":
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        if d.get("format") != "multirel-truth v1":
            raise ValueError(f"{path}: not a truth sidecar")
        hypers = HyperParams.from_dict(d["hypers"])
        part = Partition(d["partition"])
        paths = check_paths(d["paths"], part.G, panel.T, hypers.K)
        return cls(part, np.asarray(d["base_rates"], dtype=float), paths,
                   np.asarray(d["deviations"], dtype=float),
                   np.asarray(d["theta"], dtype=float), panel, hypers)


def sample_crp(n: int, alpha: float, rng: np.random.Generator) -> np.ndarray:
    """Sequential Chinese-restaurant seating; labels in order of first appearance."""
    labels = np.empty(n, dtype=np.int64)
    sizes: list[float] = []
    u = rng.random(n)
    for i in range(n):
        total = i + alpha
        x = u[i] * total
        acc = 0.0
        for g, size in enumerate(sizes):
            acc += size
            if x < acc:
                break
        else:
            g = len(sizes)
            sizes.append(0.0)
        sizes[g] += 1.0
        labels[i] = g
    return labels


def generate(n_edges: int, T: int, hypers: HyperParams, rng: np.random.Generator,
             edge_names=None) -> GroundTruth:
    if n_edges < 1 or T < 1:
        raise ValueError("need n_edges >= 1 and T >= 1")
    labels = sample_crp(n_edges, hypers.alpha, rng)
    G = int(labels.max()) + 1
    rates = rng.gamma(hypers.gamma_shape, hypers.gamma_scale, size=n_edges)
    rates = np.maximum(rates, np.finfo(float).tiny)
    theta = np.array([rng.dirichlet(row) for row in hypers.dirichlet])
    theta /= theta.sum(axis=1, keepdims=True)
    paths = sample_prior_paths(theta, G, T, rng)
    deviations = rng.gamma(hypers.shape[paths], hypers.scale[paths])
    counts = rng.poisson(rates[:, None] * deviations[labels])
    if edge_names is None:
        width = len(str(n_edges - 1))
        edge_names = [(f"S{i:0{width}d}", f"R{i:0{width}d}") for i in range(n_edges)]
    panel = EdgeCountPanel(edge_names, counts, bins=f"synthetic:{T}")
    return GroundTruth(Partition(labels), rates, paths, deviations, theta, panel, hypers)


# -- recovery metrics ----------------------------------------------------------

def base_rate_error(truth, estimate) -> float:
    """Mean relative absolute error of estimated base rates."""
    truth = np.asarray(truth, dtype=float)
    estimate = np.asarray(estimate, dtype=float)
    if truth.shape != estimate.shape:
        raise ValueError("base-rate vectors differ in length")
    return float(np.mean(np.abs(estimate - truth) / truth))


def state_error(true_labels, true_paths, est_labels, est_paths) -> float:
    """Fraction of (edge, time) cells whose group state disagrees with the truth."""
    a = np.asarray(true_paths)[np.asarray(true_labels)]
    b = np.asarray(est_paths)[np.asarray(est_labels)]
    if a.shape != b.shape:
        raise ValueError("state paths cover different edges or times")
    return float(np.mean(a != b))


def variation_of_information(p1, p2) -> float:
    """VI = H(p1) + H(p2) - 2 I(p1; p2), natural log."""
    a = np.asarray(getattr(p1, "assignment", p1))
    b = np.asarray(getattr(p2, "assignment", p2))
    if a.shape != b.shape:
        raise ValueError("partitions cover different edge sets")
    n = a.size
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1.0)
    pa = table.sum(axis=1) / n
    pb = table.sum(axis=0) / n
    pab = table[table > 0] / n
    h_joint = -float(np.sum(pab * np.log(pab)))
    h_a = -float(np.sum(pa * np.log(pa)))
    h_b = -float(np.sum(pb * np.log(pb)))
    # VI = 2 H(a,b) - H(a) - H(b)
    return max(0.0, 2.0 * h_joint - h_a - h_b)


def stationary_distribution(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    w, v = np.linalg.eig(theta.T)
    pi = np.real(v[:, np.argmin(np.abs(w - 1.0))])
    return pi / pi.sum()


def prior_mean_transition(hypers: HyperParams) -> np.ndarray:
    return hypers.dirichlet / hypers.dirichlet.sum(axis=1, keepdims=True)

