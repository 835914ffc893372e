"""End-to-end zero-shot experiment: folds, seeding, graph, propagation, scoring."""

from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import io as zio
from .errors import InvalidInputError, StageError, ZSLError
from .hiernet import (HierBatch, Hierarchy, TARGET, SOURCE, TrainConfig, extract_features,
                      init_params, train as train_network)
from .propagation import (ARGMAX_MODES, PI_MODES, build_operator, fixed_point_residual,
                          predict_labels, propagate_closed, tied_rows)
from .seeder import FeatureDataset, seed_matrix, train_logreg
from .semantic_graph import SemanticSpace, build_weight_matrix

logger = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    features: str | None = None
    semantic: str | None = None
    hierarchy: str | None = None
    splits: str | None = None
    n_folds: int = 4
    k1: int = 5
    k2: int = 3
    eta: float = 0.001
    alpha: float = 0.8
    c: float = 0.01
    pi_mode: str = "literal"
    argmax_mode: str = "unseen"
    zscore_semantic: bool = False
    standardize_features: bool = False
    train_net: bool = False
    net: TrainConfig = field(default_factory=TrainConfig)
    net_trunk_widths: tuple = (32, 32, 32)
    net_head_hidden: int = 16
    seed: int = 0
    output_dir: str | None = None
    figures: bool = True

    def validate(self):
        if self.pi_mode not in PI_MODES:
            raise InvalidInputError(f"pi_mode must be one of {PI_MODES}, got {self.pi_mode!r}")
        if self.argmax_mode not in ARGMAX_MODES:
            raise InvalidInputError(f"argmax_mode must be one of {ARGMAX_MODES}, got {self.argmax_mode!r}")
        if not 0 <= self.alpha < 1:
            raise InvalidInputError(f"alpha must lie in [0, 1), got {self.alpha}")
        if not 0 <= self.eta < 1:
            raise InvalidInputError(f"eta must lie in [0, 1), got {self.eta}")
        if not self.c > 0:
            raise InvalidInputError(f"c must be positive, got {self.c}")
        if self.k1 < 1 or self.k2 < 1:
            raise InvalidInputError("k1 and k2 must be positive")
        for name in ("features", "semantic", "hierarchy", "splits"):
            path = getattr(self, name)
            if path is not None and not Path(path).is_file():
                raise InvalidInputError(f"{name} file not found: {path}")

    def echo(self) -> dict:
        doc = dataclasses.asdict(self)
        doc.pop("output_dir")
        doc.pop("figures")
        for name in ("features", "semantic", "hierarchy", "splits"):
            if doc[name] is not None:
                doc[name] = Path(doc[name]).name
        doc["net_trunk_widths"] = list(self.net_trunk_widths)
        if not self.train_net:
            doc.pop("net")
        return doc


@dataclass
class FoldResult:
    index: int
    seen_ids: tuple
    unseen_ids: tuple
    image_ids: tuple
    true_labels: tuple
    predicted: tuple
    diagnostics: dict
    scores: object = field(default=None, repr=False)

    @property
    def n_test(self) -> int:
        return len(self.image_ids)

    @property
    def accuracy(self) -> float:
        if not self.image_ids:
            return 0.0
        return sum(t == p for t, p in zip(self.true_labels, self.predicted)) / len(self.image_ids)

    def confusion(self) -> dict:
        counts = {t: {} for t in self.unseen_ids}
        for t, p in zip(self.true_labels, self.predicted):
            row = counts.setdefault(t, {})
            row[p] = row.get(p, 0) + 1
        return counts

    def summary(self) -> dict:
        return {
            "fold": self.index,
            "seen": list(self.seen_ids),
            "unseen": list(self.unseen_ids),
            "n_test": self.n_test,
            "accuracy": self.accuracy,
            "chance": 1.0 / len(self.unseen_ids),
            "confusion": self.confusion(),
            "diagnostics": self.diagnostics,
        }


@dataclass
class EvalReport:
    folds: list
    config: dict

    @property
    def accuracies(self) -> list:
        return [f.accuracy for f in self.folds]

    @property
    def mean_accuracy(self) -> float | None:
        acc = self.accuracies
        return sum(acc) / len(acc) if acc else None

    @property
    def mean_chance(self) -> float | None:
        if not self.folds:
            return None
        return sum(1.0 / len(f.unseen_ids) for f in self.folds) / len(self.folds)

    def to_dict(self) -> dict:
        return {
            "n_folds": len(self.folds),
            "fold_accuracy": self.accuracies,
            "mean_accuracy": self.mean_accuracy,
            "mean_chance": self.mean_chance,
            "folds": [f.summary() for f in self.folds],
            "config": self.config,
        }


def make_folds(class_ids: Sequence, n_folds: int, seed: int = 0) -> list:
    """Partition classes into ``n_folds`` groups; fold ``i`` holds out group ``i`` as unseen."""
    class_ids = list(class_ids)
    if n_folds < 2:
        raise InvalidInputError(f"n_folds must be at least 2, got {n_folds}")
    if n_folds > len(class_ids):
        raise InvalidInputError(f"n_folds={n_folds} exceeds the number of classes ({len(class_ids)})")
    if len(set(class_ids)) != len(class_ids):
        raise InvalidInputError("duplicate class identifiers")
    perm = np.random.default_rng(seed).permutation(len(class_ids))
    groups = [[class_ids[j] for j in sorted(chunk)] for chunk in np.array_split(perm, n_folds)]
    folds = []
    for i, unseen in enumerate(groups):
        held = set(unseen)
        folds.append(([c for c in class_ids if c not in held], unseen))
    return folds


@contextmanager
def _stage(name, fold):
    """Re-raise errors from the wrapped block as StageError tagged with ``name``/``fold``."""
    try:
        yield
    except StageError:
        raise
    except (ZSLError, ValueError, np.linalg.LinAlgError) as exc:
        raise StageError(name, fold, exc) from exc


def _standardize(train: np.ndarray, *others):
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd[sd == 0] = 1.0
    return [(a - mu) / sd for a in (train,) + others]


def _net_features(train: FeatureDataset, test: FeatureDataset, seen: Sequence,
                  hierarchy: Hierarchy, config: ExperimentConfig):
    Xtr, Xte = _standardize(train.features, test.features)
    species_index = {s: i for i, s in enumerate(seen)}
    lab = np.array([hierarchy.labels_for(y, species_index) for y in train.labels])
    n_te = len(test)
    data = HierBatch(
        X=np.vstack([Xtr, Xte]),
        y_f=np.concatenate([lab[:, 0], -np.ones(n_te, dtype=int)]),
        y_g=np.concatenate([lab[:, 1], -np.ones(n_te, dtype=int)]),
        y_s=np.concatenate([lab[:, 2], -np.ones(n_te, dtype=int)]),
        y_d=np.concatenate([np.full(len(train), SOURCE), np.full(n_te, TARGET)]),
    )
    params = init_params(train.dim, len(hierarchy.families), len(hierarchy.genera), len(seen),
                         trunk_widths=config.net_trunk_widths, head_hidden=config.net_head_hidden,
                         seed=config.net.seed)
    params, history = train_network(data, params, config.net)
    ftr = extract_features(Xtr, params)
    fte = extract_features(Xte, params)
    return (FeatureDataset(train.image_ids, ftr, train.labels),
            FeatureDataset(test.image_ids, fte, test.labels), history)


def run_fold(index: int, seen: Sequence, unseen: Sequence, data: FeatureDataset, vectors: dict,
             config: ExperimentConfig, hierarchy: Hierarchy | None = None) -> FoldResult:
    """One held-out split: seed on seen-class images, propagate to unseen classes."""
    seen, unseen = tuple(seen), tuple(unseen)
    labels = np.array([l if l is not None else "" for l in data.labels], dtype=object)
    with _stage("ingest", index):
        if set(seen) & set(unseen):
            raise InvalidInputError("seen and unseen classes overlap")
        train_mask = np.isin(labels, seen)
        test_mask = np.isin(labels, unseen)
        train_set = data.subset(train_mask)
        test_set = data.subset(test_mask)
        leaked = set(train_set.labels) & set(unseen)
        if leaked:
            raise InvalidInputError(f"unseen classes in training labels: {sorted(leaked)}")
        if len(test_set) == 0:
            raise InvalidInputError("no test images belong to the unseen classes")

    diagnostics = {}
    if config.train_net:
        with _stage("train-net", index):
            train_set, test_set, history = _net_features(train_set, test_set, seen, hierarchy, config)
            diagnostics["net_loss_start"] = history[0]
            diagnostics["net_loss_end"] = history[-1]
    if config.standardize_features:
        Xtr, Xte = _standardize(train_set.features, test_set.features)
        train_set = FeatureDataset(train_set.image_ids, Xtr, train_set.labels)
        test_set = FeatureDataset(test_set.image_ids, Xte, test_set.labels)

    with _stage("seeder", index):
        model = train_logreg(train_set, config.c, class_order=seen)
        Y = seed_matrix(test_set, model, unseen)
        diagnostics["seeder_max_grad_norm"] = max(model.grad_norms)
    with _stage("build-graph", index):
        space = SemanticSpace(seen, unseen, vectors)
        if config.zscore_semantic:
            space = space.zscored()
        graph = build_weight_matrix(space, config.k1, config.k2)
    with _stage("operator", index):
        op = build_operator(graph, eta=config.eta, alpha=config.alpha, pi_mode=config.pi_mode)
        diagnostics.update(op.diagnostics())
        if not diagnostics["system_positive_definite"]:
            logger.warning("fold %d: I - alpha*Theta is indefinite (alpha*rho(Theta)=%.3f); "
                           "propagation amplifies instead of smoothing", index,
                           diagnostics["alpha_spectral_radius"])
    with _stage("propagate", index):
        scores = propagate_closed(Y, op)
        diagnostics["fixed_point_residual"] = fixed_point_residual(scores.values, Y.values, op)
    with _stage("predict", index):
        pred = predict_labels(scores, config.argmax_mode)
        n_tied = tied_rows(scores, config.argmax_mode)
        diagnostics["tied_rows"] = n_tied
        diagnostics["degenerate"] = n_tied == len(pred)
        if diagnostics["degenerate"]:
            logger.warning("fold %d: every prediction is an index tie-break (alpha=%s)", index, config.alpha)

    return FoldResult(index, seen, unseen, test_set.image_ids, tuple(test_set.labels), tuple(pred),
                      diagnostics, scores)


def load_inputs(config: ExperimentConfig):
    with _stage("config", None):
        config.validate()
        if config.features is None or config.semantic is None:
            raise InvalidInputError("features and semantic files are required")
    with _stage("ingest", None):
        data = zio.read_features_csv(config.features)
        if data.labels is None:
            raise InvalidInputError(f"{config.features}: every image needs a class label")
        vectors = zio.read_semantic_csv(config.semantic)
        hierarchy = Hierarchy.from_csv(config.hierarchy) if config.hierarchy else None
    return data, vectors, hierarchy


def resolve_folds(config: ExperimentConfig, vectors: dict) -> list:
    with _stage("make-folds", None):
        if config.splits is None:
            return make_folds(list(vectors), config.n_folds, config.seed)
        doc = json.loads(Path(config.splits).read_text(encoding="utf-8"))
        docs = doc if isinstance(doc, list) else [doc]
        try:
            return [([str(c) for c in d["seen"]], [str(c) for c in d["unseen"]]) for d in docs]
        except (KeyError, TypeError):
            raise InvalidInputError(f"{config.splits}: expected split objects with seen/unseen") from None


def run_experiment(config: ExperimentConfig, data: FeatureDataset | None = None,
                   vectors: dict | None = None, hierarchy: Hierarchy | None = None) -> EvalReport:
    """Run every fold and, when ``config.output_dir`` is set, write the report files.

    In-memory ``data``/``vectors``/``hierarchy`` override the file paths in ``config``.
    """
    if data is None or vectors is None:
        data, vectors, file_hier = load_inputs(config)
        hierarchy = hierarchy or file_hier
    else:
        with _stage("config", None):
            config.validate()
    if config.train_net and hierarchy is None:
        raise StageError("config", None, InvalidInputError("train_net requires a hierarchy"))
    folds = resolve_folds(config, vectors)
    results = [run_fold(i, seen, unseen, data, vectors, config, hierarchy)
               for i, (seen, unseen) in enumerate(folds)]
    report = EvalReport(results, config.echo())
    if config.output_dir is not None:
        emit_report(report, config.output_dir, figures=config.figures)
    return report


def emit_report(report: EvalReport, output_dir, figures: bool = True) -> list:
    """Write report.json plus per-fold predictions, scores and diagnostics; return written paths."""
    out = Path(output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = [out / "report.json"]
        zio.write_json(written[0], report.to_dict())
        for f in report.folds:
            path = out / f"predictions_fold{f.index}.csv"
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write("image_id,true_label,predicted_label\n")
                for iid, t, p in zip(f.image_ids, f.true_labels, f.predicted):
                    fh.write(f"{iid},{t},{p}\n")
            written.append(path)
            path = out / f"diagnostics_fold{f.index}.json"
            zio.write_json(path, f.diagnostics)
            written.append(path)
            if f.scores is not None:
                path = out / f"scores_fold{f.index}.csv"
                zio.write_scores_csv(path, f.scores)
                written.append(path)
    except OSError as exc:
        raise StageError("report", None, InvalidInputError(f"cannot write to {out}: {exc}")) from exc
    if figures and report.folds:
        from . import plotting
        written.append(plotting.plot_fold_accuracy(report, out / "fold_accuracy.png"))
        for f in report.folds:
            written.append(plotting.plot_confusion(f, out / f"confusion_fold{f.index}.png"))
    return written


def recount_accuracy(predictions_csv) -> float:
    """Accuracy recomputed from a predictions CSV written by ``emit_report``."""
    with open(predictions_csv, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return 0.0
    return sum(r["true_label"] == r["predicted_label"] for r in rows) / len(rows)


# --------------------------------------------------------------------------- tuning

TUNABLE = ("k1", "k2", "alpha", "eta", "c", "pi_mode", "mu_f", "mu_g", "mu_d")


def _apply(config: ExperimentConfig, params: dict) -> ExperimentConfig:
    top = {k: v for k, v in params.items() if not k.startswith("mu_")}
    mus = {k: v for k, v in params.items() if k.startswith("mu_")}
    cfg = dataclasses.replace(config, output_dir=None, **top)
    if mus:
        cfg.net = dataclasses.replace(config.net, **mus)
    return cfg


def validation_split(seen: Sequence, fraction: float, seed: int):
    """Hold out ``fraction`` of the seen classes as pseudo-unseen classes."""
    seen = list(seen)
    n_val = max(1, int(round(len(seen) * fraction)))
    if n_val >= len(seen) - 1:
        raise InvalidInputError(f"cannot hold out {n_val} of {len(seen)} seen classes")
    perm = np.random.default_rng(seed).permutation(len(seen))
    val = {seen[j] for j in perm[:n_val]}
    return [c for c in seen if c not in val], [c for c in seen if c in val]


def tune(config: ExperimentConfig, grid: dict, data=None, vectors=None, hierarchy=None,
         val_fraction: float = 1 / 3) -> dict:
    """Grid search on nested splits inside each fold's seen classes.

    Combinations that violate a precondition (for example ``k2`` larger than
    the number of validation classes) are recorded as skipped.
    """
    unknown = set(grid) - set(TUNABLE)
    if unknown:
        raise InvalidInputError(f"cannot tune {sorted(unknown)}; tunable: {TUNABLE}")
    if data is None or vectors is None:
        data, vectors, hierarchy = load_inputs(config)
    folds = resolve_folds(config, vectors)
    names = sorted(grid)
    rows = []
    for combo in itertools.product(*(grid[n] for n in names)):
        params = dict(zip(names, combo))
        cfg = _apply(config, params)
        accs, skipped = [], None
        for i, (seen, _) in enumerate(folds):
            tr, val = validation_split(seen, val_fraction, config.seed + i)
            try:
                accs.append(run_fold(i, tr, val, data, vectors, cfg, hierarchy).accuracy)
            except StageError as exc:
                if not isinstance(exc.cause, InvalidInputError):
                    raise
                skipped = str(exc)
                break
        rows.append({"params": params,
                     "mean_accuracy": None if skipped else sum(accs) / len(accs),
                     "skipped": skipped})
    valid = [r for r in rows if r["mean_accuracy"] is not None]
    best = max(valid, key=lambda r: r["mean_accuracy"]) if valid else None
    result = {"grid": {n: list(grid[n]) for n in names}, "results": rows,
              "best": best, "val_fraction": val_fraction}
    if config.output_dir is not None:
        out = Path(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        zio.write_json(out / "tune.json", result)
    return result
