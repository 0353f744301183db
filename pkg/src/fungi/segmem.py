"""Retrieval-based in-context semantic segmentation.

A memory bank stores one feature per image patch together with the patch's
majority class label. Query patches retrieve their nearest neighbors (exact
scan or IVF with exact re-ranking) and predict a class distribution by
softmax-similarity-weighted voting over the neighbors' labels. Patch
features are either the backbone's patch embeddings or, with gradient
fusion enabled, the concatenation of normalized per-patch contrastive
gradients and the normalized embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import augment
from . import backbone as bb
from . import evalkit
from . import objectives as obj

IGNORE_LABEL = 255


@dataclass(frozen=True)
class IvfParams:
    num_leaves: int = 512
    leaves_to_search: int = 32
    rerank: int = 120
    kmeans_iters: int = 25
    # recorded for config fidelity; the score-aware quantizer itself is
    # replaced by exact candidate scoring + re-ranking
    dims_per_block: int = 4
    anisotropic_threshold: float = 0.2


@dataclass(frozen=True)
class SegConfig:
    k: int = 30
    temperature: float = 0.02
    augmentation_epochs: int = 1
    bank_cap: int = None
    ivf: IvfParams = field(default_factory=IvfParams)

    def __post_init__(self):
        if self.k < 1 or self.temperature <= 0:
            raise ValueError("k must be >= 1 and temperature positive")


def few_shot_seg_config():
    """Few-shot preset: wider attention, more augmentation, deeper search."""
    return SegConfig(
        k=90,
        temperature=0.1,
        augmentation_epochs=8,
        ivf=IvfParams(num_leaves=512, leaves_to_search=256, rerank=1800),
    )


def downsample_mask(mask, patch_size, ignore_label=IGNORE_LABEL):
    """Per-cell majority label; ignore pixels don't vote. All-ignore cells
    keep the ignore label."""
    mask = np.asarray(mask)
    h, w = mask.shape
    if h % patch_size or w % patch_size:
        raise ValueError("mask size not divisible by patch size")
    gh, gw = h // patch_size, w // patch_size
    cells = mask.reshape(gh, patch_size, gw, patch_size).transpose(0, 2, 1, 3)
    cells = cells.reshape(gh, gw, patch_size * patch_size)
    out = np.full((gh, gw), ignore_label, dtype=np.int32)
    for i in range(gh):
        for j in range(gw):
            votes = cells[i, j]
            votes = votes[votes != ignore_label]
            if votes.size:
                counts = np.bincount(votes)
                out[i, j] = np.argmax(counts)
    return out


@dataclass
class PatchFeatureExtractor:
    """Computes per-patch features for bank building and querying."""

    params: bb.EncoderParams
    use_fungi: bool = False
    head: bb.Head = None
    tau: float = 0.07
    retrieved_per_patch: int = 2
    kept_per_patch: int = 1
    support: obj.SupportIndex = None

    def __post_init__(self):
        if self.use_fungi and self.head is None:
            raise ValueError("gradient fusion needs a projection head")

    @property
    def dim(self):
        d = self.params.config.dim
        return 2 * d if self.use_fungi else d

    def _tokens(self, image):
        out = bb.encode(self.params, image)
        return out.embedding.data, out.patch_tokens.data

    def build_support(self, images):
        """Support index over the head latents of all bank patches."""
        latents = []
        for image in images:
            _, patches = self._tokens(image)
            latents.append(self.head.apply_array(patches))
        self.support = obj.SupportIndex(np.concatenate(latents, axis=0))
        return self.support

    def features(self, image, seed=0):
        """(patches, dim) unit-norm feature rows for one image."""
        cls_emb, patches = self._tokens(image)
        emb_n = patches / np.linalg.norm(patches, axis=1, keepdims=True)
        if not self.use_fungi:
            return emb_n.astype(np.float32)
        if self.support is None:
            raise ValueError("support index not built")
        tokens = np.concatenate([cls_emb[None], patches], axis=0)
        grads, _ = obj.simclr_patch_loss(
            tokens,
            self.head,
            self.support,
            tau=self.tau,
            seed=seed,
            retrieved_per_patch=self.retrieved_per_patch,
            kept_per_patch=self.kept_per_patch,
        )
        grads_n = grads / np.linalg.norm(grads, axis=1, keepdims=True)
        fused = np.concatenate([grads_n, emb_n], axis=1)
        fused /= np.linalg.norm(fused, axis=1, keepdims=True)
        return fused.astype(np.float32)


@dataclass
class PatchMemoryBank:
    features: np.ndarray  # (M, D) unit rows
    labels: np.ndarray  # (M,) int32
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int32)
        if len(self.features) != len(self.labels):
            raise ValueError("bank features and labels disagree")
        norms = np.linalg.norm(self.features, axis=1)
        if len(norms) and np.max(np.abs(norms - 1.0)) > 1e-4:
            raise ValueError("bank rows must be unit-norm")

    def __len__(self):
        return len(self.features)


def _augment_pair(image, mask, rng):
    """Seeded square crop (area fraction in [0.5, 1.0]) + color jitter.

    The mask is cropped identically with nearest-neighbor resizing so patch
    labels stay aligned.
    """
    _, h, w = image.shape
    s = min(h, w)
    area = rng.uniform(0.5, 1.0)
    side = max(1, int(round(s * np.sqrt(area))))
    y0 = int(rng.integers(0, h - side + 1))
    x0 = int(rng.integers(0, w - side + 1))
    img_c = image[:, y0 : y0 + side, x0 : x0 + side]
    mask_c = mask[y0 : y0 + side, x0 : x0 + side]
    img_out = augment.resize_bilinear(img_c, h, w)
    img_out = augment.color_jitter(img_out, max_delta=0.1, p=0.5, seed=int(rng.integers(2**31)))
    mask_out = augment.resize_nearest(mask_c, h, w)
    return np.clip(img_out, 0.0, 1.0), mask_out


def build_bank(images, masks, extractor, config, seed=0, ignore_label=IGNORE_LABEL):
    """Patch memory bank over all images and augmentation epochs.

    Epoch 0 uses the images untouched; later epochs add augmented copies.
    Ignore-labeled patches are not stored. When config.bank_cap is set the
    bank is uniformly subsampled (after augmentation) with the given seed.
    """
    patch_size = extractor.params.config.patch_size
    if extractor.use_fungi and extractor.support is None:
        extractor.build_support(images)
    rng = np.random.default_rng(seed)
    feats, labels = [], []
    for epoch in range(config.augmentation_epochs):
        for idx, (image, mask) in enumerate(zip(images, masks)):
            image = np.asarray(image)
            mask = np.asarray(mask)
            if mask.shape != image.shape[1:]:
                raise ValueError("mask and image sizes disagree")
            if epoch > 0:
                image, mask = _augment_pair(image, mask, rng)
            grid = downsample_mask(mask, patch_size, ignore_label)
            rows = extractor.features(image, seed=int(rng.integers(2**31)) if epoch else seed + idx)
            keep = grid.ravel() != ignore_label
            feats.append(rows[keep])
            labels.append(grid.ravel()[keep])
    features = np.concatenate(feats, axis=0)
    labels = np.concatenate(labels, axis=0)
    if config.bank_cap is not None and len(labels) > config.bank_cap:
        pick = np.sort(rng.choice(len(labels), size=config.bank_cap, replace=False))
        features, labels = features[pick], labels[pick]
    num_classes = int(labels.max()) + 1 if len(labels) else 0
    return PatchMemoryBank(
        features=features,
        labels=labels,
        num_classes=num_classes,
        meta={
            "images": len(images),
            "epochs": config.augmentation_epochs,
            "seed": seed,
            "fungi": extractor.use_fungi,
            "order": "augment-then-subsample",
        },
    )


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------


def _top_by_similarity(sims, ids, k):
    """ids of the k largest sims; ties broken by lower id."""
    order = np.lexsort((ids, -sims))[:k]
    return ids[order], sims[order]


def exact_search(features, query, k):
    """Exact top-k by cosine similarity over unit-norm rows."""
    sims = features @ np.asarray(query, dtype=features.dtype)
    return _top_by_similarity(sims, np.arange(len(features)), k)


@dataclass
class IvfIndex:
    centroids: np.ndarray
    posting: list  # leaf -> array of bank row ids
    features: np.ndarray
    params: IvfParams

    def __len__(self):
        return len(self.features)


def ivf_build(bank_features, params, seed=0):
    """Partition bank rows into k-means leaves with posting lists."""
    features = np.asarray(bank_features, dtype=np.float32)
    if len(features) < params.num_leaves:
        raise ValueError("bank smaller than the requested number of leaves")
    result = evalkit.kmeans(
        features.astype(np.float64), params.num_leaves, seed=seed, max_iter=params.kmeans_iters
    )
    posting = [np.flatnonzero(result.assignments == leaf) for leaf in range(params.num_leaves)]
    return IvfIndex(
        centroids=result.centroids.astype(np.float32),
        posting=posting,
        features=features,
        params=params,
    )


def ivf_search(index, query, k):
    """Scan the nearest leaves, then exactly re-rank the best candidates.

    With leaves_to_search == num_leaves every bank row is a candidate and
    the result equals the exact scan.
    """
    params = index.params
    if k > params.rerank:
        raise ValueError(f"k={k} exceeds rerank budget {params.rerank}")
    query = np.asarray(query, dtype=index.features.dtype)
    # leaves are Voronoi cells of a Euclidean k-means: rank them by the same
    # geometry (||c||^2 - 2 q.c), not by raw dot product
    leaf_d2 = np.sum(index.centroids**2, axis=1) - 2.0 * (index.centroids @ query)
    leaf_order = np.lexsort((np.arange(len(leaf_d2)), leaf_d2))
    chosen = leaf_order[: params.leaves_to_search]
    candidates = np.concatenate([index.posting[leaf] for leaf in chosen])
    sims = index.features[candidates] @ query
    ids, sims = _top_by_similarity(sims, candidates, min(params.rerank, len(candidates)))
    return ids[:k], sims[:k]


# ---------------------------------------------------------------------------
# label propagation
# ---------------------------------------------------------------------------


def query_label(bank, query, k=None, tau=None, config=None, index=None):
    """Class distribution for one patch by attention over its neighbors."""
    if config is not None:
        k = config.k if k is None else k
        tau = config.temperature if tau is None else tau
    if k is None or tau is None:
        raise ValueError("k and tau (or a config) are required")
    if len(bank) == 0:
        raise ValueError("empty bank")
    if k > len(bank):
        raise ValueError(f"k={k} exceeds bank size {len(bank)}")
    if index is not None:
        ids, sims = ivf_search(index, query, k)
    else:
        ids, sims = exact_search(bank.features, query, k)
    scaled = sims.astype(np.float64) / tau
    scaled -= scaled.max()
    weights = np.exp(scaled)
    weights /= weights.sum()
    dist = np.zeros(bank.num_classes)
    np.add.at(dist, bank.labels[ids], weights)
    return dist


def predict_grid(bank, features, config, index=None):
    """Argmax class per patch row; returns (labels, distributions)."""
    dists = np.stack(
        [query_label(bank, row, config=config, index=index) for row in features]
    )
    return np.argmax(dists, axis=1).astype(np.int32), dists


def segment_image(extractor, bank, image, config, index=None, seed=0):
    """Pixel-resolution class prediction via patch retrieval."""
    cfg = extractor.params.config
    rows = extractor.features(np.asarray(image), seed=seed)
    labels, _ = predict_grid(bank, rows, config, index=index)
    grid = labels.reshape(cfg.grid, cfg.grid)
    return augment.resize_nearest(grid, cfg.image_size, cfg.image_size)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def miou(pred_masks, gt_masks, num_classes, ignore_label=IGNORE_LABEL):
    """Mean IoU over classes present in ground truth or predictions.

    Pixels whose ground truth is the ignore label are excluded everywhere.
    Returns (mean, per-class dict).
    """
    pred_masks = np.asarray(pred_masks)
    gt_masks = np.asarray(gt_masks)
    if pred_masks.shape != gt_masks.shape:
        raise ValueError("prediction and ground-truth shapes disagree")
    valid = gt_masks != ignore_label
    pred = pred_masks[valid].astype(np.int64)
    gt = gt_masks[valid].astype(np.int64)
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (gt, pred), 1)
    tp = np.diag(confusion).astype(np.float64)
    fp = confusion.sum(axis=0) - tp
    fn = confusion.sum(axis=1) - tp
    present = (confusion.sum(axis=0) + confusion.sum(axis=1)) > 0
    per_class = {}
    for cls in np.flatnonzero(present):
        denom = tp[cls] + fp[cls] + fn[cls]
        per_class[int(cls)] = float(tp[cls] / denom) if denom else 0.0
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return mean, per_class
