"""Self-supervised scalar losses whose layer gradients become features.

Three objectives produce a scalar loss on top of the frozen encoder plus a
random head: a KL term pulling projected logits toward uniform, a
teacher/student cross-entropy over global and local crops, and an InfoNCE
term contrasting overlapping patches against a fixed negative bank. A dense
variant of the contrastive loss yields one gradient per patch token for
retrieval-based segmentation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

# large negative logit used to exclude self-similarity terms from softmax
# denominators while keeping every tape value finite
_NEG_INF = -1e30


def kl_loss(z, tau=15.0, to_uniform=False):
    """Divergence between softmax(z / tau) and the uniform distribution.

    The default direction is KL(uniform || softmax(z / tau)); passing
    to_uniform=True computes KL(softmax(z / tau) || uniform) instead. Both
    are zero exactly when the softmax is uniform.
    """
    z = ad.as_tensor(z)
    dim = z.size
    log_dim = float(np.log(dim))
    ls = ad.log_softmax(z, axis=-1, tau=tau)
    if to_uniform:
        probs = ad.softmax(z, axis=-1, tau=tau)
        return ad.add(ad.total(ad.mul(probs, ls)), ad.as_tensor(log_dim, dtype=z.dtype))
    return ad.add(ad.scale(ad.mean(ls), -1.0), ad.as_tensor(-log_dim, dtype=z.dtype))


def dino_loss(student_z, teacher_z, tau_s=0.1, tau_t=0.07):
    """Mean teacher/student cross-entropy over crop pairs.

    teacher_z are the latents of the global crops and are treated as
    constants (no gradient flows through them). student_z holds the latents
    of all crops, globals first, so pairs with identical view index are
    skipped.
    """
    if len(teacher_z) < 2:
        raise ValueError("dino_loss requires at least 2 global (teacher) views")
    terms = []
    for t_idx, zt in enumerate(teacher_z):
        zt = zt.data if isinstance(zt, ad.Tensor) else np.asarray(zt)
        scaled = zt / tau_t
        scaled = scaled - scaled.max()
        probs = np.exp(scaled)
        probs /= probs.sum()
        pt = ad.as_tensor(probs)
        for s_idx, zs in enumerate(student_z):
            if s_idx == t_idx:
                continue
            ls = ad.log_softmax(zs, axis=-1, tau=tau_s)
            terms.append(ad.scale(ad.total(ad.mul(pt, ls)), -1.0))
    return ad.mean(ad.stack(terms))


@dataclass
class NegativeBank:
    """Fixed set of unit-norm latents contrasted against every sample."""

    rows: np.ndarray
    seed: int = 0

    def __post_init__(self):
        rows = np.asarray(self.rows)
        if rows.ndim != 2:
            raise ValueError("negative bank must be a 2-D matrix")
        norms = np.linalg.norm(rows, axis=1)
        if np.any(norms <= 0):
            raise ValueError("negative bank contains a zero row")
        self.rows = rows / norms[:, None]

    def __len__(self):
        return self.rows.shape[0]

    def save(self, path):
        from . import store

        store.write_sections(
            path,
            {
                "negative_rows": self.rows.astype(np.float32),
                "negative_seed": np.array([self.seed], dtype=np.int32),
            },
        )

    @classmethod
    def load(cls, path):
        from . import store

        sections = store.read_sections(path)
        return cls(rows=sections["negative_rows"], seed=int(sections["negative_seed"][0]))


def _check_unit_rows(data, what, tol=1e-4):
    norms = np.linalg.norm(data, axis=-1)
    if np.max(np.abs(norms - 1.0)) > tol:
        raise ValueError(f"{what} must be L2-normalized (max deviation {np.max(np.abs(norms - 1.0)):.2e})")


def _info_nce(z_norm, bank_rows, tau):
    """Mean of -log softmax terms over ordered positive pairs.

    z_norm: (P, D) tape tensor of unit rows. bank_rows: (M, D) constant
    unit rows. Every positive row is scored against the other positives and
    the whole bank; the self term is masked out of each denominator.
    """
    p = z_norm.shape[0]
    if p < 2:
        raise ValueError("contrastive loss needs at least 2 positive views")
    sims_pos = ad.matmul(z_norm, ad.transpose(z_norm))
    blocks = [sims_pos]
    if bank_rows is not None and len(bank_rows):
        sims_bank = ad.matmul(z_norm, ad.as_tensor(np.asarray(bank_rows, dtype=z_norm.dtype).T))
        blocks.append(sims_bank)
    logits = ad.scale(ad.concat(blocks, axis=1), 1.0 / tau)

    total_cols = logits.shape[1]
    self_mask = np.zeros((p, total_cols), dtype=logits.dtype)
    self_mask[np.arange(p), np.arange(p)] = _NEG_INF
    log_probs = ad.log_softmax(ad.add(logits, ad.as_tensor(self_mask)), axis=1)

    pair_mask = np.zeros((p, total_cols), dtype=logits.dtype)
    pair_mask[:p, :p] = 1.0 - np.eye(p)
    n_pairs = p * (p - 1)
    return ad.scale(ad.total(ad.mul(log_probs, ad.as_tensor(pair_mask))), -1.0 / n_pairs)


def simclr_loss(z_views, bank, tau=0.07):
    """InfoNCE over ordered pairs of positive views against a fixed bank.

    z_views is a (P, D) tensor (or list of D-vectors) of already normalized
    latents; bank is a NegativeBank. Each denominator ranges over the other
    P - 1 positives plus every bank row.
    """
    if isinstance(z_views, (list, tuple)):
        z_views = ad.stack(z_views)
    _check_unit_rows(z_views.data, "positive latents")
    rows = None
    if bank is not None:
        rows = bank.rows if isinstance(bank, NegativeBank) else np.asarray(bank)
        _check_unit_rows(rows, "negative bank rows", tol=1e-6)
    return _info_nce(z_views, rows, tau)


@dataclass
class SupportIndex:
    """Exact cosine-similarity index over unit-norm latents."""

    rows: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows)
        if rows.ndim != 2 or rows.shape[0] == 0:
            raise ValueError("support index needs a non-empty 2-D latent matrix")
        self.rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)

    def __len__(self):
        return self.rows.shape[0]

    def search(self, queries, k):
        """Top-k row ids by cosine similarity, ties broken by lower id."""
        if k > len(self):
            raise ValueError(f"k={k} exceeds index size {len(self)}")
        sims = np.asarray(queries) @ self.rows.T
        order = np.argsort(-sims, axis=1, kind="stable")
        return order[:, :k]


def simclr_patch_loss(patch_tokens, head, support, tau=0.07, seed=0, retrieved_per_patch=2, kept_per_patch=1):
    """Per-patch gradients of a dense contrastive loss.

    patch_tokens: (T + 1, d) array of backbone tokens, CLS first. Every token
    is projected by the head; each projected token retrieves its
    retrieved_per_patch nearest neighbors from the support index and a
    seeded draw keeps kept_per_patch of them as negatives. The InfoNCE loss
    treats all T + 1 tokens as positives and the kept neighbors as the
    negative batch, and is differentiated w.r.t. the tokens themselves.

    Returns (per_patch_grads, loss_value) where per_patch_grads has shape
    (T, d): the CLS row is dropped from the output.
    """
    tokens_data = np.asarray(patch_tokens.data if isinstance(patch_tokens, ad.Tensor) else patch_tokens)
    if len(support) < retrieved_per_patch:
        raise ValueError("support index smaller than retrieved_per_patch")

    latents = head.apply_array(tokens_data)
    latents = latents / np.linalg.norm(latents, axis=1, keepdims=True)
    neighbor_ids = support.search(latents, retrieved_per_patch)

    rng = np.random.default_rng(seed)
    kept = np.empty((tokens_data.shape[0], kept_per_patch), dtype=np.int64)
    for i in range(tokens_data.shape[0]):
        choice = rng.choice(retrieved_per_patch, size=kept_per_patch, replace=False)
        kept[i] = neighbor_ids[i, np.sort(choice)]
    negatives = support.rows[kept.reshape(-1)]

    leaf = ad.parameter(tokens_data)
    with ad.GradTape() as tape:
        z = head.apply(leaf)
        z_norm = ad.l2_normalize(z, axis=-1)
        loss = _info_nce(z_norm, negatives, tau)
    grads = tape.backward(loss)[leaf]
    return grads[1:], loss.item()
