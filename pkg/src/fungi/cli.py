"""Command-line front end.

Commands: synth, extract, fuse-pca, eval, cluster, probe, retrieve, cka,
segment. All outputs are pure functions of flags, config file, and input
files; the only nondeterminism is the timestamp in log lines on stderr.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from . import evalkit
from . import features as feat
from . import pipeline
from . import segmem
from . import store
from . import synth
from .config import ConfigError, RunConfig

log = logging.getLogger("fungi")


class DataError(ValueError):
    """Missing or inconsistent input data."""


def _load_config(args):
    if getattr(args, "config", None):
        config = RunConfig.load(args.config)
    else:
        config = RunConfig().validate()
    if getattr(args, "seed", None) is not None:
        config.encoder.seed = args.seed
        config.projection.seed = args.seed
    return config


def _load_split(data_dir, split, need_labels=False, need_masks=False):
    path = os.path.join(data_dir, f"{split}.fngi")
    if not os.path.exists(path):
        raise DataError(f"missing dataset split {path}")
    data = synth.load_dataset(path)
    if need_labels and data["labels"] is None:
        raise DataError(f"{path} has no labels section")
    if need_masks and data["masks"] is None:
        raise DataError(f"{path} has no masks section")
    return data


def _load_banks(train_path, test_path, config=None):
    for p in (train_path, test_path):
        if not os.path.exists(p):
            raise DataError(f"missing feature bank {p}")
    train = feat.FeatureBank.load(train_path)
    test = feat.FeatureBank.load(test_path)
    if train.config_hash != test.config_hash:
        raise ConfigError("train/test banks carry different config hashes")
    if config is not None and config.config_hash() != train.config_hash:
        raise ConfigError("banks were not extracted with the given config")
    return train, test


def _echo_lines(config_echo, config_hash):
    lines = [f"config_hash={config_hash}"]
    lines.extend(line for line in config_echo.splitlines() if line)
    return lines


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args):
    paths = synth.write_dataset_dir(
        args.out, args.kind, args.n, args.classes, args.image_size, args.seed
    )
    log.info("wrote %s", ", ".join(paths.values()))
    return 0


def cmd_extract(args):
    config = _load_config(args)
    train = _load_split(args.data, "train", need_labels=True)
    test = _load_split(args.data, "test", need_labels=True)
    train_bank, test_bank = pipeline.extract_splits(
        config, train["images"], train["labels"], test["images"], test["labels"], jobs=args.jobs
    )
    os.makedirs(args.out, exist_ok=True)
    train_path = os.path.join(args.out, "bank_train.fngi")
    test_path = os.path.join(args.out, "bank_test.fngi")
    train_bank.save(train_path)
    test_bank.save(test_path)
    log.info("wrote %s and %s", train_path, test_path)
    return 0


def cmd_fuse_pca(args):
    train, test = _load_banks(args.train, args.test)
    out_dim = args.out_dim
    if out_dim is None:
        config = RunConfig.from_text(train.config_echo)
        out_dim = config.pca.out_dim
    train2, test2, model = pipeline.fuse_pca_banks(train, test, out_dim)
    os.makedirs(args.out, exist_ok=True)
    train2.save(os.path.join(args.out, "bank_train_pca.fngi"))
    test2.save(os.path.join(args.out, "bank_test_pca.fngi"))
    model.save(os.path.join(args.out, "pca.fngi"))
    log.info("PCA %d -> %d fitted on %d rows", train.dim, out_dim, len(train))
    return 0


def _knn_report(train_bank, test_bank, kind, k, rows=None):
    features_train = pipeline.bank_feature_matrix(train_bank, kind)
    features_test = pipeline.bank_feature_matrix(test_bank, kind)
    if rows is not None:
        features_train = features_train[rows]
        train_labels = train_bank.labels[rows]
    else:
        train_labels = train_bank.labels
    index = evalkit.KnnIndex(features_train, train_labels, k=k)
    preds = evalkit.knn_classify(index, features_test)
    return (
        evalkit.accuracy(preds, test_bank.labels, "top1"),
        evalkit.accuracy(preds, test_bank.labels, "mean_per_class"),
        evalkit.per_class_accuracy(preds, test_bank.labels),
    )


def cmd_eval(args):
    config = _load_config(args) if args.config else None
    train, test = _load_banks(args.train, args.test, config)
    run_cfg = RunConfig.from_text(train.config_echo)
    k = run_cfg.eval.knn_k
    if k > len(train):
        log.warning("clamping k=%d to train size %d", k, len(train))
        k = len(train)
    kinds = ["embedding"] + [f for f in train.objective_names] + ["fused"]
    reports = []
    table_rows = []
    baseline = None
    for kind in kinds:
        top1, mpc, per_class = _knn_report(train, test, kind, k)
        if kind == "embedding":
            baseline = top1
        reports.append(evalkit.EvalReport(f"knn_top1_{kind}", top1, per_class=per_class))
        reports.append(evalkit.EvalReport(f"knn_mean_per_class_{kind}", mpc))
        table_rows.append([kind, f"{top1:.4f}", f"{mpc:.4f}", f"{top1 - baseline:+.4f}"])
    if args.shots:
        rows = evalkit.few_shot_subset(train.labels, shots=args.shots,
                                       seed=feat.derive_seed(run_cfg.encoder.seed, "few-shot"))
        for kind in ("embedding", "fused"):
            top1, mpc, _ = _knn_report(train, test, kind, k=min(k, len(rows)), rows=rows)
            reports.append(evalkit.EvalReport(f"knn_top1_{kind}_{args.shots}shot", top1))
            table_rows.append([f"{kind} ({args.shots}-shot)", f"{top1:.4f}", f"{mpc:.4f}", ""])
    evalkit.write_csv(args.out, reports, _echo_lines(train.config_echo, train.config_hash))
    print(evalkit.render_table(table_rows, header=["features", "top1", "mean_per_class", "delta_vs_emb"]))
    log.info("wrote %s", args.out)
    return 0


def cmd_cluster(args):
    train, test = _load_banks(args.train, args.test)
    run_cfg = RunConfig.from_text(train.config_echo)
    labels = test.labels
    n_classes = len(np.unique(labels))
    reports, table_rows = [], []
    for kind in ("embedding", "fused"):
        x = pipeline.bank_feature_matrix(test, kind)
        result = evalkit.kmeans(x, n_classes, seed=feat.derive_seed(run_cfg.encoder.seed, "kmeans"))
        overlap = evalkit.cluster_overlap(result.assignments, labels)
        reports.append(evalkit.EvalReport(f"cluster_overlap_{kind}", overlap))
        table_rows.append([kind, f"{overlap:.4f}"])
    evalkit.write_csv(args.out, reports, _echo_lines(train.config_echo, train.config_hash))
    print(evalkit.render_table(table_rows, header=["features", "cluster_overlap"]))
    return 0


def cmd_probe(args):
    train, test = _load_banks(args.train, args.test)
    run_cfg = RunConfig.from_text(train.config_echo)
    reports, table_rows = [], []
    for kind in ("embedding", "fused"):
        result = evalkit.logistic_probe(
            pipeline.bank_feature_matrix(train, kind),
            train.labels,
            lambda_grid=run_cfg.probe_lambda_grid(),
            max_epochs=run_cfg.eval.probe_max_epochs,
            seed=feat.derive_seed(run_cfg.encoder.seed, "probe"),
        )
        preds = result.model.predict(pipeline.bank_feature_matrix(test, kind))
        acc = evalkit.accuracy(preds, test.labels)
        reports.append(evalkit.EvalReport(f"probe_top1_{kind}", acc))
        table_rows.append([kind, f"{acc:.4f}", repr(result.best_lambda)])
    evalkit.write_csv(args.out, reports, _echo_lines(train.config_echo, train.config_hash))
    print(evalkit.render_table(table_rows, header=["features", "probe_top1", "lambda"]))
    return 0


def cmd_retrieve(args):
    train, test = _load_banks(args.train, args.test)
    reports, table_rows = [], []
    for kind in ("embedding", "fused"):
        gallery = pipeline.bank_feature_matrix(train, kind)
        queries = pipeline.bank_feature_matrix(test, kind)
        relevance = [set(np.flatnonzero(train.labels == lbl)) for lbl in test.labels]
        mean_ap, _ = evalkit.retrieval_map(queries, gallery, relevance)
        reports.append(evalkit.EvalReport(f"retrieval_map_{kind}", mean_ap))
        table_rows.append([kind, f"{mean_ap:.4f}"])
    evalkit.write_csv(args.out, reports, _echo_lines(train.config_echo, train.config_hash))
    print(evalkit.render_table(table_rows, header=["features", "mAP"]))
    return 0


def cmd_cka(args):
    train, _ = _load_banks(args.train, args.test)
    kinds = ["embedding"] + list(train.objective_names) + ["fused"]
    mats = {kind: pipeline.bank_feature_matrix(train, kind) for kind in kinds}
    with open(args.out, "w", encoding="utf-8") as fh:
        for line in _echo_lines(train.config_echo, train.config_hash):
            fh.write(f"# {line}\n")
        fh.write("features," + ",".join(kinds) + "\n")
        for a in kinds:
            values = [f"{evalkit.linear_cka(mats[a], mats[b]):.6f}" for b in kinds]
            fh.write(a + "," + ",".join(values) + "\n")
    log.info("wrote %s", args.out)
    return 0


def cmd_segment(args):
    config = _load_config(args)
    train = _load_split(args.data, "train", need_masks=True)
    test = _load_split(args.data, "test", need_masks=True)
    seg = config.segmentation
    data_size = int(train["images"].shape[-1])
    if config.encoder.image_size != data_size:
        # dense prediction runs the encoder at the dataset's resolution
        log.info("building segmentation encoder for %dx%d inputs", data_size, data_size)
        config.encoder.image_size = data_size
        config.validate()
    if args.few_shot:
        seg_cfg = segmem.SegConfig(
            k=seg.few_shot_k,
            temperature=seg.few_shot_temperature,
            augmentation_epochs=seg.few_shot_augmentation_epochs,
            bank_cap=args.bank_cap,
            ivf=segmem.IvfParams(
                num_leaves=seg.ivf_num_leaves,
                leaves_to_search=seg.few_shot_ivf_leaves_to_search,
                rerank=seg.few_shot_ivf_rerank,
                dims_per_block=seg.ivf_dims_per_block,
                anisotropic_threshold=seg.ivf_anisotropic_threshold,
            ),
        )
    else:
        seg_cfg = segmem.SegConfig(
            k=seg.k,
            temperature=seg.temperature,
            augmentation_epochs=seg.augmentation_epochs,
            bank_cap=args.bank_cap,
            ivf=segmem.IvfParams(
                num_leaves=seg.ivf_num_leaves,
                leaves_to_search=seg.ivf_leaves_to_search,
                rerank=seg.ivf_rerank,
                dims_per_block=seg.ivf_dims_per_block,
                anisotropic_threshold=seg.ivf_anisotropic_threshold,
            ),
        )
    params = pipeline.build_encoder(config)
    head = None
    if args.fungi:
        head = bb.attach_head(
            config.encoder.dim,
            seg.simclr_proj_dim,
            feat.derive_seed(config.encoder.seed, "head", "seg-simclr"),
            normalize_input=False,
            dtype=params.dtype,
        )
    extractor = segmem.PatchFeatureExtractor(
        params=params,
        use_fungi=args.fungi,
        head=head,
        tau=seg.simclr_temperature,
        retrieved_per_patch=seg.retrieved_negatives_per_patch,
        kept_per_patch=seg.loss_negatives_per_patch,
    )
    bank = segmem.build_bank(
        list(train["images"]), list(train["masks"]), extractor, seg_cfg,
        seed=feat.derive_seed(config.encoder.seed, "seg-bank"),
    )
    if seg_cfg.k > len(bank):
        log.warning("clamping k=%d to bank size %d", seg_cfg.k, len(bank))
        seg_cfg = dataclasses.replace(seg_cfg, k=len(bank))
    index = None
    if len(bank) >= seg_cfg.ivf.num_leaves and not args.exact:
        index = segmem.ivf_build(bank.features, seg_cfg.ivf,
                                 seed=feat.derive_seed(config.encoder.seed, "seg-ivf"))
        log.info("IVF index: %d leaves over %d rows", seg_cfg.ivf.num_leaves, len(bank))
    else:
        log.info("exact search over %d bank rows", len(bank))

    preds, gts = [], []
    for i, (image, mask) in enumerate(zip(test["images"], test["masks"])):
        pred = segmem.segment_image(
            extractor, bank, image, seg_cfg, index=index,
            seed=feat.derive_seed(config.encoder.seed, "seg-query", i),
        )
        preds.append(pred)
        gts.append(np.asarray(mask))
    num_classes = int(max(bank.labels.max(), max(int(g[g != segmem.IGNORE_LABEL].max()) for g in gts))) + 1
    mean, per_class = segmem.miou(np.stack(preds), np.stack(gts), num_classes)
    report = evalkit.EvalReport(
        "miou_fungi" if args.fungi else "miou_embeddings", mean, per_class=per_class
    )
    evalkit.write_csv(args.out, [report], _echo_lines(config.to_text(), config.config_hash()))
    print(evalkit.render_table(
        [[report.metric, f"{mean:.4f}", str(len(bank))]],
        header=["metric", "miou", "bank_rows"],
    ))
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fungi",
        description="Gradient-feature extraction, fusion, and retrieval-based evaluation",
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--kind", choices=("blobs", "stripes", "segmentation"), default="blobs")
    p.add_argument("--n", type=int, default=80)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--image-size", type=int, default=224)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="extract embeddings and gradient features")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("fuse-pca", help="fit PCA on the train bank, transform both banks")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out-dim", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse_pca)

    p = sub.add_parser("eval", help="kNN classification of bank features")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--shots", type=int, default=0, help="also run an N-shot protocol")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cluster", help="k-means cluster/class overlap")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("probe", help="logistic-regression probe")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("retrieve", help="same-label retrieval mAP")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("cka", help="pairwise similarity matrix of feature families")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cka)

    p = sub.add_parser("segment", help="retrieval-based semantic segmentation")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--fungi", action="store_true", help="fuse per-patch gradients")
    p.add_argument("--few-shot", action="store_true")
    p.add_argument("--exact", action="store_true", help="skip the IVF index")
    p.add_argument("--bank-cap", type=int)
    p.set_defaults(func=cmd_segment)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return 2
    except (DataError, store.StoreError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return 3
    except ad.NumericError as exc:
        log.error("numeric failure: %s", exc)
        return 4


if __name__ == "__main__":
    sys.exit(main())
