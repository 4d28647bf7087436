"""Dataset bundle I/O: the on-disk format shared by the CLI commands.

A dataset directory contains::

    adjacency.csv    edge list, header "i,j", 0-based indices
    membership.csv   m x n weight matrix, headerless floats
    covariates.csv   n x p covariate matrix, headerless floats
    data.csv         header "y,E": counts and expected counts per membership
    truth.json       (simulated bundles only) generating parameters

Floats are written with 17 significant digits so files round-trip
exactly and repeated runs are byte-identical.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os

import numpy as np

from .graph import AdjacencyGraph, read_adjacency_csv, write_adjacency_csv
from .membership import MembershipMatrix, read_membership_csv, write_membership_csv
from .model import ParamVector

__all__ = [
    "write_dataset",
    "read_dataset",
    "truth_to_dict",
    "truth_from_dict",
    "sha256_file",
    "DATASET_FILES",
]

DATASET_FILES = ("adjacency.csv", "membership.csv", "covariates.csv", "data.csv")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


def truth_to_dict(theta: ParamVector, parameterisation: str) -> dict:
    return {
        "parameterisation": parameterisation,
        "gamma": theta.gamma,
        "beta": theta.beta.tolist(),
        "phi": None if theta.phi is None else theta.phi.tolist(),
        "alpha": theta.alpha,
        "tau": theta.tau,
        "psi": theta.psi,
    }


def truth_from_dict(raw: dict) -> ParamVector:
    return ParamVector(
        gamma=raw["gamma"],
        beta=np.asarray(raw["beta"], dtype=float),
        phi=None if raw.get("phi") is None else np.asarray(raw["phi"], dtype=float),
        alpha=raw.get("alpha"),
        tau=raw.get("tau"),
        psi=raw.get("psi"),
    )


def write_dataset(
    outdir,
    graph: AdjacencyGraph,
    membership: MembershipMatrix,
    covariates: np.ndarray,
    offsets: np.ndarray,
    y: np.ndarray,
    truth: dict | None = None,
) -> list[str]:
    """Write the bundle into ``outdir``; returns the paths written."""
    os.makedirs(outdir, exist_ok=True)
    paths = []

    p = os.path.join(outdir, "adjacency.csv")
    write_adjacency_csv(graph, p)
    paths.append(p)

    p = os.path.join(outdir, "membership.csv")
    write_membership_csv(membership, p)
    paths.append(p)

    p = os.path.join(outdir, "covariates.csv")
    np.savetxt(p, np.asarray(covariates, dtype=float), delimiter=",", fmt="%.17g")
    paths.append(p)

    p = os.path.join(outdir, "data.csv")
    with open(p, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["y", "E"])
        for yi, ei in zip(np.asarray(y), np.asarray(offsets, dtype=float)):
            writer.writerow([int(yi), "%.17g" % ei])
    paths.append(p)

    if truth is not None:
        p = os.path.join(outdir, "truth.json")
        with open(p, "w") as fh:
            json.dump(truth, fh, sort_keys=True, indent=2)
            fh.write("\n")
        paths.append(p)
    return paths


def read_dataset(datadir) -> dict:
    """Load a bundle; validates the membership matrix and data shapes.

    Returns a dict with keys ``graph``, ``membership``, ``covariates``,
    ``y``, ``offsets`` and, when present, ``truth`` (raw dict).
    """
    graph = read_adjacency_csv(os.path.join(datadir, "adjacency.csv"))
    membership = read_membership_csv(os.path.join(datadir, "membership.csv"))
    if membership.n != graph.n:
        raise ValueError(
            f"membership matrix has {membership.n} columns but the adjacency "
            f"file describes {graph.n} areas"
        )
    covariates = np.loadtxt(
        os.path.join(datadir, "covariates.csv"), delimiter=",", ndmin=2
    )
    if covariates.shape[0] != graph.n:
        raise ValueError(
            f"covariates.csv has {covariates.shape[0]} rows, expected {graph.n}"
        )
    ys, es = [], []
    data_path = os.path.join(datadir, "data.csv")
    with open(data_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["y", "E"]:
            raise ValueError(f"{data_path}: expected header 'y,E'")
        for row in reader:
            if not row:
                continue
            ys.append(int(row[0]))
            es.append(float(row[1]))
    y = np.asarray(ys, dtype=np.int64)
    offsets = np.asarray(es, dtype=float)
    if y.size != membership.m:
        raise ValueError(
            f"data.csv has {y.size} rows but membership.csv has {membership.m}"
        )
    out = {
        "graph": graph,
        "membership": membership,
        "covariates": covariates,
        "y": y,
        "offsets": offsets,
    }
    truth_path = os.path.join(datadir, "truth.json")
    if os.path.exists(truth_path):
        with open(truth_path) as fh:
            out["truth"] = json.load(fh)
    return out
