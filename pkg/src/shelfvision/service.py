"""Command-line facade binding the pipeline modules.

Subcommands: synth, mine, train, classify, evaluate, pr-curve,
build-index, query-word, active-learn, serve.  Every command writes its
artifacts under the configured work directory plus a JSON run report
with content hashes, so runs are auditable and comparable.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import cv2
import numpy as np

from . import activelearn, classify, encoder, patchmine, textmap
from .config import ConfigError, PipelineConfig, load_config
from .dataset import Catalog, SplitSpec, generate_synthetic, load_catalog
from .imagecore import hog_pyramid, to_grayscale


def artifact_paths(cfg: PipelineConfig) -> dict[str, Path]:
    work = Path(cfg.work_dir)
    return {
        "bank": work / "bank.shdb",
        "model": work / f"model_{cfg.variant}.shsm",
        "index": work / "word_index.json",
    }


def model_path(cfg: PipelineConfig, variant: str) -> Path:
    return Path(cfg.work_dir) / f"model_{variant}.shsm"


def file_hash(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_report(cfg: PipelineConfig, command: str, payload: dict,
                 artifacts: list[Path]) -> Path:
    work = Path(cfg.work_dir)
    work.mkdir(parents=True, exist_ok=True)
    report = {
        "command": command,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "artifacts": {str(p): file_hash(p) for p in artifacts if Path(p).is_file()},
        **payload,
    }
    path = work / f"{command.replace('-', '_')}_report.json"
    path.write_text(json.dumps(report, indent=1, sort_keys=True), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Pipeline steps shared by CLI and HTTP service
# ---------------------------------------------------------------------------

def mining_params(cfg: PipelineConfig) -> patchmine.MiningParams:
    return patchmine.MiningParams(rounds=cfg.mining_rounds,
                                  per_image=cfg.mining_per_image,
                                  top_k=cfg.top_k,
                                  fire_threshold=cfg.fire_threshold)


def mine_catalog(catalog: Catalog, cfg: PipelineConfig) -> patchmine.DetectorBank:
    class_grids, class_refs = [], []
    for name in catalog.classes:
        refs = catalog.train_images[name]
        grids = [hog_pyramid(to_grayscale(catalog.load_train_image(r)))
                 for r in refs]
        class_grids.append(grids)
        class_refs.append(refs)
    return patchmine.mine_bank(class_grids, class_refs, cfg.seed,
                               mining_params(cfg))


def encode_images(catalog: Catalog, bank: patchmine.DetectorBank,
                  refs: list[str], pyramid: bool, train: bool,
                  workers: int = 1) -> np.ndarray:
    loader = catalog.load_train_image if train else catalog.load_test_image
    feats = [encoder.encode(to_grayscale(loader(r)), bank, pyramid, workers)
             for r in refs]
    return encoder.stack_features(feats)


def train_features(catalog: Catalog, bank: patchmine.DetectorBank,
                   pyramid: bool, workers: int = 1
                   ) -> tuple[np.ndarray, np.ndarray]:
    refs, labels = [], []
    for ci, name in enumerate(catalog.classes):
        for r in catalog.train_images[name]:
            refs.append(r)
            labels.append(ci)
    X = encode_images(catalog, bank, refs, pyramid, train=True, workers=workers)
    return X, np.array(labels, dtype=np.int64)


def test_features(catalog: Catalog, bank: patchmine.DetectorBank,
                  pyramid: bool, workers: int = 1
                  ) -> tuple[np.ndarray, np.ndarray]:
    refs = [r for r, _ in catalog.test_images]
    X = encode_images(catalog, bank, refs, pyramid, train=False, workers=workers)
    y = np.array([c for _, c in catalog.test_images], dtype=np.int64)
    return X, y


def train_variant(catalog: Catalog, cfg: PipelineConfig, variant: str,
                  bank: patchmine.DetectorBank | None) -> classify.SvmModel:
    mode, decision = cfg.variant_settings(variant)
    if decision != "svm":
        raise ConfigError(f"variant {variant} uses the highest-score rule; "
                          f"there is no SVM to train")
    if mode == "bow":
        images, labels = [], []
        for ci, name in enumerate(catalog.classes):
            for r in catalog.train_images[name]:
                images.append(catalog.load_train_image(r))
                labels.append(ci)
        _, model = classify.bow_baseline_train(
            images, np.array(labels), catalog.classes,
            vocab_size=cfg.bow_vocab_size, seed=cfg.seed, C=cfg.svm_c,
            kernel=cfg.kernel, gamma=cfg.rbf_gamma)
        model.feature_mode = "bow"
        return model
    if bank is None:
        raise ConfigError("variant requires a mined detector bank")
    X, y = train_features(catalog, bank, pyramid=(mode == "pyramid"),
                          workers=cfg.workers)
    return classify.train_ovr(X, y, catalog.classes, C=cfg.svm_c,
                              kernel=cfg.kernel, gamma=cfg.rbf_gamma,
                              feature_mode=mode)


def classify_array(rgb: np.ndarray, catalog_classes: list[str],
                   cfg: PipelineConfig, variant: str,
                   bank: patchmine.DetectorBank | None,
                   model: classify.SvmModel | None) -> tuple[int | None, float]:
    """(class index, score) of one RGB image under a system variant.

    Highest-score variants may yield None (nothing fired anywhere).
    """
    mode, decision = cfg.variant_settings(variant)
    if mode == "bow":
        feat = classify.bow_encode(rgb, model.vocab)
        return classify.predict(model, feat)
    gray = to_grayscale(rgb)
    vec = encoder.encode(gray, bank, pyramid=(mode == "pyramid"),
                         workers=cfg.workers)
    if decision == "hs":
        c = encoder.highest_score_class(vec)
        if c is None:
            return None, float(vec.values.max())
        L = vec.num_classes
        per_class = (vec.values.reshape(5, L).max(axis=0) if vec.pyramid
                     else vec.values)
        return c, float(per_class[c])
    return classify.predict(model, vec.values)


def predictions_for_variant(catalog: Catalog, cfg: PipelineConfig, variant: str,
                            bank: patchmine.DetectorBank | None,
                            model: classify.SvmModel | None
                            ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(predictions, scores, truth) over the catalog's test set."""
    mode, decision = cfg.variant_settings(variant)
    truth = np.array([c for _, c in catalog.test_images], dtype=np.int64)
    if mode == "bow":
        X = np.stack([classify.bow_encode(catalog.load_test_image(r), model.vocab)
                      for r, _ in catalog.test_images])
        preds, scores = classify.predict_batch(model, X)
        return preds, scores, truth
    X, _ = test_features(catalog, bank, pyramid=(mode == "pyramid"),
                         workers=cfg.workers)
    if decision == "svm":
        preds, scores = classify.predict_batch(model, X)
        return preds, scores, truth
    preds, scores = [], []
    L = len(catalog.classes)
    for row in X:
        vec = encoder.FeatureVector(values=row, pyramid=(mode == "pyramid"))
        c = encoder.highest_score_class(vec)
        per_class = (row.reshape(5, L).max(axis=0) if mode == "pyramid" else row)
        preds.append(0 if c is None else c)   # nothing fired: count as a miss
        scores.append(float(per_class.max()))
    return np.array(preds, dtype=np.int64), np.array(scores), truth


def build_ocr(catalog: Catalog, cfg: PipelineConfig) -> textmap.SyntheticOcr:
    if not catalog.words:
        raise ConfigError("catalog has no rendered-word sidecar (words.json); "
                          "the synthetic OCR adapter has nothing to look up")
    return textmap.SyntheticOcr.from_catalog(catalog)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    logo = None
    if args.shared_logo:
        a, b = (int(v) for v in args.shared_logo.split(","))
        logo = (a, b)
    catalog = generate_synthetic(args.classes, args.per_class, args.shelves,
                                 args.seed, args.out,
                                 domain_shift=args.domain_shift,
                                 shared_logo_classes=logo)
    print(json.dumps({"root": str(args.out), "classes": catalog.classes,
                      "train": sum(len(v) for v in catalog.train_images.values()),
                      "test": len(catalog.test_images)}))
    return 0


def cmd_mine(cfg: PipelineConfig) -> int:
    catalog = load_catalog(cfg.dataset_root)
    t0 = time.time()
    bank = mine_catalog(catalog, cfg)
    paths = artifact_paths(cfg)
    paths["bank"].parent.mkdir(parents=True, exist_ok=True)
    patchmine.save_bank(bank, paths["bank"])
    report = write_report(cfg, "mine", {
        "elapsed_s": time.time() - t0,
        "detectors_per_class": {c: len(d) for c, d in
                                zip(catalog.classes, bank.detectors)},
    }, [paths["bank"]])
    print(f"bank: {paths['bank']}  report: {report}")
    return 0


def cmd_train(cfg: PipelineConfig, variant: str) -> int:
    catalog = load_catalog(cfg.dataset_root)
    paths = artifact_paths(cfg)
    bank = None
    mode, _ = cfg.variant_settings(variant)
    if mode != "bow":
        bank = patchmine.load_bank(paths["bank"])
    t0 = time.time()
    model = train_variant(catalog, cfg, variant, bank)
    out = model_path(cfg, variant)
    out.parent.mkdir(parents=True, exist_ok=True)
    classify.save_model(model, out)
    report = write_report(cfg, "train", {
        "variant": variant, "elapsed_s": time.time() - t0,
        "kernel": model.kernel, "C": model.C, "gamma": model.gamma,
    }, [out])
    print(f"model: {out}  report: {report}")
    return 0


def cmd_classify(cfg: PipelineConfig, image: str, tau: float | None,
                 variant: str) -> int:
    catalog = load_catalog(cfg.dataset_root)
    paths = artifact_paths(cfg)
    mode, decision = cfg.variant_settings(variant)
    bank = patchmine.load_bank(paths["bank"]) if mode != "bow" else None
    model = (classify.load_model(model_path(cfg, variant))
             if decision == "svm" else None)
    bgr = cv2.imread(image, cv2.IMREAD_COLOR)
    if bgr is None:
        print(f"error: cannot decode image {image}", file=sys.stderr)
        return 1
    rgb = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)
    c, score = classify_array(rgb, catalog.classes, cfg, variant, bank, model)
    tau = cfg.notify_tau if tau is None else tau
    notified = c is not None and score > tau
    result = {
        "class_index": c,
        "class_name": catalog.classes[c] if c is not None else None,
        "score": score, "tau": tau, "notified": notified,
    }
    if not notified:
        result["message"] = "no confident product"
    print(json.dumps(result))
    return 0


def cmd_evaluate(cfg: PipelineConfig, variant: str) -> int:
    catalog = load_catalog(cfg.dataset_root)
    paths = artifact_paths(cfg)
    mode, decision = cfg.variant_settings(variant)
    bank = patchmine.load_bank(paths["bank"]) if mode != "bow" else None
    model = (classify.load_model(model_path(cfg, variant))
             if decision == "svm" else None)
    preds, _, truth = predictions_for_variant(catalog, cfg, variant, bank, model)
    report = classify.evaluate(preds, truth, len(catalog.classes))
    work = Path(cfg.work_dir)
    work.mkdir(parents=True, exist_ok=True)
    eval_json = work / f"evaluation_{variant}.json"
    eval_json.write_text(report.to_json(catalog.classes), encoding="utf-8")
    confusion_csv = work / f"confusion_{variant}.csv"
    report.confusion_csv(confusion_csv, catalog.classes)
    write_report(cfg, "evaluate", {"variant": variant,
                                   "accuracy": report.accuracy},
                 [eval_json, confusion_csv])
    print(json.dumps({"variant": variant, "accuracy": report.accuracy}))
    return 0


def cmd_pr_curve(cfg: PipelineConfig, variant: str) -> int:
    catalog = load_catalog(cfg.dataset_root)
    paths = artifact_paths(cfg)
    bank = patchmine.load_bank(paths["bank"])
    model = classify.load_model(model_path(cfg, variant))
    mode, decision = cfg.variant_settings(variant)
    if decision != "svm":
        raise ConfigError("pr-curve needs an SVM variant")
    X, y = test_features(catalog, bank, pyramid=(mode == "pyramid"),
                         workers=cfg.workers)
    _, scores = classify.predict_batch(model, X)
    lo, hi = float(scores.min()), float(scores.max())
    taus = np.concatenate([[-np.inf], np.linspace(lo - 1e-6, hi + 1e-6, 50)])
    curve = classify.pr_curve(model, X, y, taus)
    work = Path(cfg.work_dir)
    work.mkdir(parents=True, exist_ok=True)
    out = work / f"pr_curve_{variant}.csv"
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("tau,precision,recall\n")
        for tau, p, r in curve:
            fh.write(f"{tau!r},{p!r},{r!r}\n")
    write_report(cfg, "pr-curve", {"variant": variant, "points": len(curve)},
                 [out])
    print(f"pr curve: {out}")
    return 0


def cmd_build_index(cfg: PipelineConfig) -> int:
    catalog = load_catalog(cfg.dataset_root)
    ocr = build_ocr(catalog, cfg)
    index = textmap.build_word_index(catalog, ocr)
    paths = artifact_paths(cfg)
    paths["index"].parent.mkdir(parents=True, exist_ok=True)
    index.save(paths["index"])
    write_report(cfg, "build-index", {
        "tokens_per_class": {name: index.total(i)
                             for i, name in enumerate(index.classes)},
    }, [paths["index"]])
    print(f"word index: {paths['index']}")
    return 0


def cmd_query_word(cfg: PipelineConfig, word: str) -> int:
    paths = artifact_paths(cfg)
    if not paths["index"].is_file():
        raise ConfigError(f"word index missing: {paths['index']}; "
                          f"run build-index first")
    index = textmap.WordClassIndex.load(paths["index"])
    result = textmap.query_word(index, word)
    print(json.dumps(word_query_payload(result)))
    return 0


def word_query_payload(result) -> dict:
    if isinstance(result, textmap.AutoMapped):
        return {"auto": result.class_name}
    if isinstance(result, textmap.Ranked):
        return {"ranked": [{"class": e.class_name, "count": e.count,
                            "confidence": e.confidence}
                           for e in result.entries]}
    return {"unknown": True}


def cmd_active_learn(cfg: PipelineConfig) -> int:
    catalog = load_catalog(cfg.dataset_root)
    paths = artifact_paths(cfg)
    bank = patchmine.load_bank(paths["bank"])
    model = classify.load_model(model_path(cfg, "FULL"))
    pyramid = model.feature_mode == "pyramid"
    base_X, base_y = train_features(catalog, bank, pyramid, cfg.workers)
    pool_X, _ = test_features(catalog, bank, pyramid, cfg.workers)
    spec = SplitSpec(cfg.al_learning_size, cfg.al_testing_size, cfg.al_step,
                     cfg.al_runs, cfg.seed)
    curve = activelearn.run_protocol(catalog, model, base_X, base_y, pool_X,
                                     spec, selection=cfg.al_selection)
    work = Path(cfg.work_dir)
    work.mkdir(parents=True, exist_ok=True)
    csv_path = work / "learning_curve.csv"
    curve.to_csv(csv_path)
    json_path = work / "learning_curve.json"
    json_path.write_text(curve.to_json(), encoding="utf-8")
    write_report(cfg, "active-learn", {
        "first_point": curve.means[0], "final_point": curve.means[-1],
    }, [csv_path, json_path])
    print(json.dumps({"points": len(curve.counts),
                      "first": curve.means[0], "final": curve.means[-1]}))
    return 0


def cmd_serve(cfg: PipelineConfig, host: str, port: int) -> int:
    import uvicorn

    from .webapi import ServiceState, create_app
    state = ServiceState.from_config(cfg)
    uvicorn.run(create_app(state), host=host, port=port, log_level="warning")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shelfvision",
        description="Fine-grained product class recognition toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument("--dataset-root", default=None)
        p.add_argument("--work-dir", default=None)
        p.add_argument("--variant", default=None)
        return p

    p = sub.add_parser("synth", help="generate a synthetic catalog")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=20)
    p.add_argument("--shelves", type=int, default=40)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--domain-shift", type=float, default=0.0)
    p.add_argument("--shared-logo", default=None, metavar="I,J")

    with_config(sub.add_parser("mine", help="mine the detector bank"))
    with_config(sub.add_parser("train", help="train a variant's classifier"))
    p = with_config(sub.add_parser("classify", help="classify one image"))
    p.add_argument("image")
    p.add_argument("--tau", type=float, default=None)
    with_config(sub.add_parser("evaluate", help="accuracy and confusion matrix"))
    with_config(sub.add_parser("pr-curve", help="precision/recall sweep"))
    with_config(sub.add_parser("build-index", help="build the word-class index"))
    p = with_config(sub.add_parser("query-word", help="map a word to classes"))
    p.add_argument("word")
    with_config(sub.add_parser("active-learn", help="run the learning-curve protocol"))
    p = with_config(sub.add_parser("serve", help="start the HTTP service"))
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "synth":
        return cmd_synth(args)
    try:
        overrides = {"dataset_root": args.dataset_root,
                     "work_dir": args.work_dir,
                     "variant": args.variant}
        cfg = load_config(args.config, overrides=overrides)
        variant = cfg.variant
        if args.command == "mine":
            return cmd_mine(cfg)
        if args.command == "train":
            return cmd_train(cfg, variant)
        if args.command == "classify":
            return cmd_classify(cfg, args.image, args.tau, variant)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, variant)
        if args.command == "pr-curve":
            return cmd_pr_curve(cfg, variant)
        if args.command == "build-index":
            return cmd_build_index(cfg)
        if args.command == "query-word":
            return cmd_query_word(cfg, args.word)
        if args.command == "active-learn":
            return cmd_active_learn(cfg)
        if args.command == "serve":
            return cmd_serve(cfg, args.host, args.port)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    parser.error(f"unknown command {args.command!r}")
    return 2


if __name__ == "__main__":
    sys.exit(main())
