"""Extraction pipeline: encoder + heads + objectives -> feature banks.

Per sample: encode once for the embedding, then for each configured
objective build its views, evaluate its loss on a fresh tape, harvest the
designated layer's gradient, flatten it, and project it down to the
embedding width. Fused rows are the unit-norm gradient segments followed by
the unit-norm embedding.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import autodiff as ad
from . import augment
from . import backbone as bb
from . import features as feat
from . import objectives as obj

log = logging.getLogger("fungi")


def _dtype_of(config):
    return np.float64 if config.gradients.precision == "f64" else np.float32


def build_encoder(config):
    params = bb.init_encoder(config.encoder_config(), config.encoder.seed, dtype=_dtype_of(config))
    if config.encoder.collapse_output_paths:
        params = bb.collapse_output_paths(params)
    return params


def build_heads(config):
    """One frozen head per objective; the distillation objective gets an
    independent student/teacher pair."""
    dtype = _dtype_of(config)
    dim = config.encoder.dim
    seed = config.encoder.seed
    heads = {}
    for name in config.gradients.objectives:
        section = config.objective_section(name)
        if name == "dino":
            heads[name] = (
                bb.attach_head(dim, section.proj_dim, feat.derive_seed(seed, "head", "dino", "student"),
                               normalize_input=section.normalize_input, dtype=dtype),
                bb.attach_head(dim, section.proj_dim, feat.derive_seed(seed, "head", "dino", "teacher"),
                               normalize_input=section.normalize_input, dtype=dtype),
            )
        else:
            heads[name] = bb.attach_head(
                dim, section.proj_dim, feat.derive_seed(seed, "head", name),
                normalize_input=section.normalize_input, dtype=dtype,
            )
    return heads


def build_projections(config):
    """One projection per objective, sized to the source layer's gradient."""
    params_cfg = config.encoder_config()
    source = config.gradient_source()
    probe = bb.init_encoder(params_cfg, config.encoder.seed)
    w, b = source.resolve(probe)
    in_dim = w.shape[0] * (w.shape[1] + 1)
    return {
        name: feat.ProjectionMatrix(
            kind=config.projection.kind,
            out_dim=config.encoder.dim,
            in_dim=in_dim,
            seed=feat.derive_seed(config.projection.seed, "projection", name),
        )
        for name in config.gradients.objectives
    }


def _simclr_views(image, config):
    grid = int(math.isqrt(config.simclr.positive_views))
    size = config.encoder.image_size
    patches = augment.patchify_overlap(image, patch=config.simclr.view_patch, grid=grid)
    return [augment.resize_bilinear(v, size, size) for v in patches]


def build_negative_bank(params, head, train_images, config):
    """Encode and project patch views of seeded training images once."""
    scfg = config.simclr
    rng = np.random.default_rng(feat.derive_seed(config.encoder.seed, "negative-bank"))
    n = len(train_images)
    picked = rng.choice(n, size=scfg.negative_images, replace=n < scfg.negative_images)
    rows = []
    for idx in picked:
        for view in _simclr_views(np.asarray(train_images[idx]), config):
            emb = bb.encode(params, view).embedding.data
            rows.append(head.apply_array(emb))
    bank = obj.NegativeBank(np.stack(rows), seed=int(picked[0]))
    log.info("negative bank: %d rows from %d images", len(bank), scfg.negative_images)
    return bank


def make_objective(name, config, heads, image, neg_bank, sample_seed, params):
    """Loss closure for one sample, evaluated against a parameter set.

    The distillation teacher is frozen here, at closure creation: its
    latents are plain constants of the unperturbed encoder, so the closure's
    derivative is exactly the stop-gradient objective the tape computes.
    """
    if name == "kl":
        head, kl_cfg = heads["kl"], config.kl

        def kl_fn(p):
            z = head.apply(bb.encode(p, image).embedding)
            return obj.kl_loss(z, tau=kl_cfg.temperature)

        return kl_fn

    if name == "dino":
        student_head, teacher_head = heads["dino"]
        dcfg = config.dino
        globals_, locals_ = augment.dino_crops(
            image,
            seed=sample_seed,
            n_global=dcfg.global_crops,
            n_local=dcfg.local_crops,
            global_scale=tuple(dcfg.global_scale),
            local_scale=tuple(dcfg.local_scale),
            out_size=config.encoder.image_size,
        )
        views = list(globals_) + list(locals_)
        with ad.no_grad():
            teacher = [
                teacher_head.apply_array(bb.encode(params, v).embedding.data) for v in globals_
            ]

        def dino_fn(p):
            student = [student_head.apply(bb.encode(p, v).embedding) for v in views]
            return obj.dino_loss(
                student, teacher, tau_s=dcfg.student_temperature, tau_t=dcfg.teacher_temperature
            )

        return dino_fn

    if name == "simclr":
        head, scfg = heads["simclr"], config.simclr
        views = _simclr_views(image, config)

        def simclr_fn(p):
            latents = [head.apply(bb.encode(p, v).embedding) for v in views]
            z = ad.l2_normalize(ad.stack(latents), axis=-1)
            return obj.simclr_loss(z, neg_bank, tau=scfg.temperature)

        return simclr_fn

    raise ValueError(f"unknown objective {name!r}")


def extract_bank(config, params, heads, projections, images, labels, split, neg_bank=None, jobs=1):
    """FeatureBank for one split; deterministic in (config, images, seeds)."""
    source = config.gradient_source()
    objectives = tuple(config.gradients.objectives)
    if "simclr" in objectives and neg_bank is None:
        raise ValueError("simclr objective requires a negative bank")

    def worker(i):
        image = np.asarray(images[i])
        embedding = bb.encode(params, image).embedding.data
        grads = {}
        for name in objectives:
            seed = feat.derive_seed(config.encoder.seed, "views", split, name, i)
            fn = make_objective(name, config, heads, image, neg_bank, seed, params)
            dw, db = bb.loss_gradient(params, source, fn)
            grads[name] = feat.project(projections[name], feat.flatten_gradient(dw, db))
        return embedding, grads

    start = time.monotonic()
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(worker, range(len(images))))
    else:
        results = [worker(i) for i in range(len(images))]
    elapsed = max(time.monotonic() - start, 1e-9)
    log.info(
        "extracted %s: %d samples, %d objectives, %.2f samples/s",
        split, len(images), len(objectives), len(images) / elapsed,
    )

    embeddings = np.stack([r[0] for r in results]).astype(np.float32)
    grad_mats = {
        name: np.stack([r[1][name] for r in results]).astype(np.float32) for name in objectives
    }
    fused = np.stack(
        [
            feat.fuse(embeddings[i], [grad_mats[name][i] for name in objectives])
            for i in range(len(images))
        ]
    ).astype(np.float32)
    provenance = {f"projection_seed_{n}": projections[n].seed for n in objectives}
    provenance["gradient_source"] = f"block{source.block_index}.{source.layer_kind}"
    return feat.FeatureBank(
        ids=np.arange(len(images), dtype=np.int32),
        labels=np.asarray(labels if labels is not None else -np.ones(len(images)), dtype=np.int32),
        fused=fused,
        embedding=embeddings,
        gradients=grad_mats,
        objective_names=objectives,
        split=split,
        config_echo=config.to_text(),
        config_hash=config.config_hash(),
        provenance=provenance,
    )


def extract_splits(config, train_images, train_labels, test_images, test_labels, jobs=1):
    """Extract train and test banks with a shared encoder and bank."""
    params = build_encoder(config)
    heads = build_heads(config)
    projections = build_projections(config)
    neg_bank = None
    if "simclr" in config.gradients.objectives:
        simclr_head = heads["simclr"]
        neg_bank = build_negative_bank(params, simclr_head, train_images, config)
    train_bank = extract_bank(
        config, params, heads, projections, train_images, train_labels, "train",
        neg_bank=neg_bank, jobs=jobs,
    )
    test_bank = extract_bank(
        config, params, heads, projections, test_images, test_labels, "test",
        neg_bank=neg_bank, jobs=jobs,
    )
    return train_bank, test_bank


def fuse_pca_banks(train_bank, test_bank, out_dim):
    """Fit PCA on the training fused rows, transform both splits."""
    if train_bank.config_hash != test_bank.config_hash:
        raise ValueError("banks were extracted with different configurations")
    model = feat.fit_pca(train_bank.fused.astype(np.float64), out_dim)
    out = []
    for bank in (train_bank, test_bank):
        transformed = feat.apply_pca(model, bank.fused.astype(np.float64)).astype(np.float32)
        out.append(
            feat.FeatureBank(
                ids=bank.ids,
                labels=bank.labels,
                fused=transformed,
                embedding=bank.embedding,
                gradients=bank.gradients,
                objective_names=bank.objective_names,
                split=bank.split,
                config_echo=bank.config_echo,
                config_hash=bank.config_hash,
                provenance={**bank.provenance, "pca_out_dim": out_dim},
            )
        )
    return out[0], out[1], model


def bank_feature_matrix(bank, kind="fused"):
    """Rows used for evaluation: the fused matrix, a single normalized
    segment, or a normalized gradient segment by objective name."""
    if kind == "fused":
        return bank.fused.astype(np.float64)
    if kind == "embedding":
        if bank.embedding is None:
            raise ValueError("bank carries no embedding section")
        rows = bank.embedding.astype(np.float64)
        return rows / np.linalg.norm(rows, axis=1, keepdims=True)
    if kind in bank.gradients:
        rows = bank.gradients[kind].astype(np.float64)
        return rows / np.linalg.norm(rows, axis=1, keepdims=True)
    raise ValueError(f"unknown feature kind {kind!r}")
