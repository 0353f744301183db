"""From raw layer gradients to retrieval-ready fused feature vectors.

The chain is: flatten the layer gradient (weights with the bias appended as
a final column), multiply by a seeded random projection down to the
embedding width, L2-normalize every segment and concatenate with the
normalized embedding, then optionally compress the fused vector with a PCA
fitted on the training split only.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import store

PROJECTION_KINDS = ("binary", "gaussian", "sparse")


def derive_seed(base_seed, *labels):
    """Stable 32-bit seed derived from a base seed and string labels."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(base_seed)).encode())
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode())
    return int.from_bytes(h.digest()[:4], "little")


@dataclass
class ProjectionMatrix:
    """Seeded random projection, regenerated from its seed on demand."""

    kind: str
    out_dim: int
    in_dim: int
    seed: int
    _matrix: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in PROJECTION_KINDS:
            raise ValueError(f"unknown projection kind {self.kind!r}")
        if self.out_dim < 1 or self.in_dim < 1:
            raise ValueError("projection dims must be positive")

    @property
    def matrix(self):
        if self._matrix is None:
            self._matrix = self._generate()
        return self._matrix

    def _generate(self):
        rng = np.random.default_rng(self.seed)
        shape = (self.out_dim, self.in_dim)
        if self.kind == "binary":
            return (rng.integers(0, 2, size=shape) * 2 - 1).astype(np.float64)
        if self.kind == "gaussian":
            return rng.standard_normal(shape)
        density = 1.0 / np.sqrt(self.in_dim)
        u = rng.random(shape)
        mat = np.zeros(shape)
        mat[u < density / 2] = -1.0
        mat[u > 1.0 - density / 2] = 1.0
        return mat

    @property
    def entry_variance(self):
        """Variance of a single matrix entry (for distance-scale checks)."""
        if self.kind in ("binary", "gaussian"):
            return 1.0
        return 1.0 / np.sqrt(self.in_dim)


def flatten_gradient(dw, db):
    """Row-major [dW | db] flattening; the bias is the last column."""
    dw = np.asarray(dw)
    db = np.asarray(db)
    if dw.ndim != 2 or db.shape != (dw.shape[0],):
        raise ValueError(f"inconsistent gradient shapes {dw.shape} / {db.shape}")
    return np.concatenate([dw, db[:, None]], axis=1).ravel()


def unflatten_gradient(flat, out_dim, in_dim):
    flat = np.asarray(flat)
    if flat.size != out_dim * (in_dim + 1):
        raise ValueError("flattened gradient has the wrong length")
    block = flat.reshape(out_dim, in_dim + 1)
    return block[:, :in_dim].copy(), block[:, in_dim].copy()


def project(projection, gradient):
    """Down-project a flattened gradient; no scale factor is applied."""
    gradient = np.asarray(gradient)
    if gradient.shape != (projection.in_dim,):
        raise ValueError(
            f"gradient length {gradient.shape} does not match projection input {projection.in_dim}"
        )
    return projection.matrix @ gradient.astype(np.float64)


def l2n(x):
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x)
    if not norm > 0:
        raise ValueError("zero-norm segment cannot be normalized")
    return x / norm


def fuse(embedding, gradient_vectors=()):
    """Concatenate unit-norm gradient segments with the unit-norm embedding.

    Gradient segments come first in registration order; the embedding is the
    final segment. Rescaling any input leaves the output unchanged.
    """
    segments = [l2n(g) for g in gradient_vectors]
    segments.append(l2n(embedding))
    return np.concatenate(segments)


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (out_dim, D) rows, orthonormal
    explained_variance: np.ndarray

    def __post_init__(self):
        gram = self.components @ self.components.T
        if np.max(np.abs(gram - np.eye(self.components.shape[0]))) > 1e-5:
            raise ValueError("PCA components are not orthonormal")
        if np.any(np.diff(self.explained_variance) > 1e-10):
            raise ValueError("explained variance must be non-increasing")

    @property
    def out_dim(self):
        return self.components.shape[0]

    def save(self, path):
        store.write_sections(
            path,
            {
                "pca_mean": self.mean,
                "pca_components": self.components,
                "pca_explained_variance": self.explained_variance,
            },
        )

    @classmethod
    def load(cls, path):
        s = store.read_sections(path)
        return cls(
            mean=s["pca_mean"],
            components=s["pca_components"],
            explained_variance=s["pca_explained_variance"],
        )


def fit_pca(data, out_dim):
    """Centered PCA via SVD; no whitening."""
    data = np.asarray(data, dtype=np.float64)
    n, dim = data.shape
    if out_dim > min(dim, n):
        raise ValueError(f"out_dim {out_dim} exceeds min(D={dim}, n={n})")
    mean = data.mean(axis=0)
    centered = data - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    variance = (s * s) / max(n - 1, 1)
    return PcaModel(mean=mean, components=vt[:out_dim], explained_variance=variance[:out_dim])


def apply_pca(model, data):
    """Project vectors (or a matrix of rows) onto the fitted components."""
    data = np.asarray(data, dtype=np.float64)
    return (data - model.mean) @ model.components.T


@dataclass
class FeatureRecord:
    sample_id: int
    label: int
    embedding: np.ndarray
    gradients: dict
    fused: np.ndarray


@dataclass
class FeatureBank:
    """Per-sample fused features with provenance, in a fixed column layout."""

    ids: np.ndarray
    labels: np.ndarray
    fused: np.ndarray
    embedding: np.ndarray = None
    gradients: dict = field(default_factory=dict)  # objective name -> (n, d)
    objective_names: tuple = ()
    split: str = "train"
    config_echo: str = ""
    config_hash: str = ""
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int32)
        self.labels = np.asarray(self.labels, dtype=np.int32)
        n = len(self.ids)
        if len(np.unique(self.ids)) != n:
            raise ValueError("feature bank ids must be unique")
        if self.fused.shape[0] != n or self.labels.shape[0] != n:
            raise ValueError("feature bank arrays disagree on sample count")

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self):
        return self.fused.shape[1]

    def records(self):
        for i in range(len(self)):
            yield FeatureRecord(
                sample_id=int(self.ids[i]),
                label=int(self.labels[i]),
                embedding=None if self.embedding is None else self.embedding[i],
                gradients={k: v[i] for k, v in self.gradients.items()},
                fused=self.fused[i],
            )

    def save(self, path):
        sections = {
            "ids": self.ids,
            "labels": self.labels,
            "fused": self.fused.astype(np.float32),
            "split": store.encode_text(self.split),
            "objectives": store.encode_text(",".join(self.objective_names)),
            "config_echo": store.encode_text(self.config_echo),
            "config_hash": store.encode_text(self.config_hash),
        }
        if self.embedding is not None:
            sections["embedding"] = self.embedding.astype(np.float32)
        for name, grads in self.gradients.items():
            sections[f"grad::{name}"] = grads.astype(np.float32)
        for key, value in self.provenance.items():
            sections[f"prov::{key}"] = store.encode_text(str(value))
        store.write_sections(path, sections)

    @classmethod
    def load(cls, path):
        s = store.read_sections(path)
        gradients = {
            name[len("grad::") :]: arr for name, arr in s.items() if name.startswith("grad::")
        }
        provenance = {
            name[len("prov::") :]: store.decode_text(arr)
            for name, arr in s.items()
            if name.startswith("prov::")
        }
        objectives = store.decode_text(s["objectives"])
        return cls(
            ids=s["ids"],
            labels=s["labels"],
            fused=s["fused"],
            embedding=s.get("embedding"),
            gradients=gradients,
            objective_names=tuple(x for x in objectives.split(",") if x),
            split=store.decode_text(s["split"]),
            config_echo=store.decode_text(s["config_echo"]),
            config_hash=store.decode_text(s["config_hash"]),
            provenance=provenance,
        )
