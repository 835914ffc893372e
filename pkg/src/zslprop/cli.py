"""Command-line entry point: ``zslprop <subcommand> [flags]``.

Settings are layered: built-in defaults, then ``--config`` (flat
``key = value`` file), then explicit flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as zio
from .errors import StageError, ZSLError
from .hiernet import HierBatch, HierNetParams, Hierarchy, TrainConfig, SOURCE, TARGET, extract_features, init_params, train
from .pipeline import ExperimentConfig, make_folds, run_experiment, tune
from .propagation import ScoreMatrix, build_operator, fixed_point_residual, predict_labels, propagate_closed, propagate_iterative
from .seeder import FeatureDataset, seed_matrix, train_logreg
from .semantic_graph import SemanticSpace, build_weight_matrix

log = logging.getLogger("zslprop")

# flag dest -> (type, default)
SETTINGS = {
    "k1": (int, 5),
    "k2": (int, 3),
    "eta": (float, 0.001),
    "alpha": (float, 0.8),
    "c": (float, 0.01),
    "mu_f": (float, 1.0),
    "mu_g": (float, 1.0),
    "mu_d": (float, 0.1),
    "learning_rate": (float, 0.01),
    "momentum": (float, 0.9),
    "batch_size": (int, 20),
    "epochs": (int, 50),
    "pi_mode": (str, "literal"),
    "argmax": (str, "unseen"),
    "seed": (int, 0),
    "n_folds": (int, 4),
    "features": (str, None),
    "semantic": (str, None),
    "hierarchy": (str, None),
    "splits": (str, None),
    "split": (str, None),
    "out": (str, None),
    "zscore_semantic": (bool, False),
    "standardize_features": (bool, False),
    "train_net": (bool, False),
    "figures": (bool, True),
}


def _parse_bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def resolve(args) -> dict:
    """Merge defaults < config file < explicit flags into one settings dict."""
    settings = {k: d for k, (_, d) in SETTINGS.items()}
    if getattr(args, "config", None):
        for key, raw in zio.read_config_file(args.config).items():
            if key == "pi":
                key = "pi_mode"
            if key not in SETTINGS:
                raise ZSLError(f"{args.config}: unknown setting {key!r}")
            typ = SETTINGS[key][0]
            settings[key] = _parse_bool(raw) if typ is bool else typ(raw)
    for key in SETTINGS:
        val = getattr(args, key, None)
        if val is not None:
            settings[key] = val
    if settings["pi_mode"] not in ("literal", "stationary"):
        raise ZSLError(f"pi mode must be literal or stationary, got {settings['pi_mode']!r}")
    if settings["argmax"] not in ("unseen", "all"):
        raise ZSLError(f"argmax must be unseen or all, got {settings['argmax']!r}")
    return settings


def _train_config(s) -> TrainConfig:
    return TrainConfig(mu_f=s["mu_f"], mu_g=s["mu_g"], mu_d=s["mu_d"], learning_rate=s["learning_rate"],
                       momentum=s["momentum"], batch_size=s["batch_size"], seed=s["seed"], epochs=s["epochs"])


def _experiment_config(s) -> ExperimentConfig:
    return ExperimentConfig(
        features=s["features"], semantic=s["semantic"], hierarchy=s["hierarchy"], splits=s["splits"],
        n_folds=s["n_folds"], k1=s["k1"], k2=s["k2"], eta=s["eta"], alpha=s["alpha"], c=s["c"],
        pi_mode=s["pi_mode"], argmax_mode=s["argmax"], zscore_semantic=s["zscore_semantic"],
        standardize_features=s["standardize_features"], train_net=s["train_net"], net=_train_config(s),
        seed=s["seed"], output_dir=s["out"], figures=s["figures"])


def _require(s, *names):
    missing = [n for n in names if s.get(n) is None]
    if missing:
        raise ZSLError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


def _out_dir(s) -> Path:
    _require(s, "out")
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _space(s) -> SemanticSpace:
    _require(s, "semantic", "split")
    vectors = zio.read_semantic_csv(s["semantic"])
    seen, unseen = zio.read_split_json(s["split"])
    space = SemanticSpace(seen, unseen, vectors)
    return space.zscored() if s["zscore_semantic"] else space


# --------------------------------------------------------------------------- subcommands

def cmd_run(s):
    _require(s, "features", "semantic")
    report = run_experiment(_experiment_config(s))
    mean = report.mean_accuracy
    for f in report.folds:
        print(f"fold {f.index}: accuracy {f.accuracy:.4f} (chance {1 / len(f.unseen_ids):.4f}, n={f.n_test})")
    print(f"mean accuracy: {'n/a' if mean is None else f'{mean:.4f}'}")


def cmd_build_graph(s):
    out = _out_dir(s)
    graph = build_weight_matrix(_space(s), s["k1"], s["k2"])
    op = build_operator(graph, eta=s["eta"], alpha=s["alpha"], pi_mode=s["pi_mode"])
    zio.write_matrix_csv(out / "weights.csv", graph.weight_matrix, graph.class_order)
    zio.write_matrix_csv(out / "transition.csv", op.P, graph.class_order)
    zio.write_json(out / "graph.json", {"k1": graph.k1, "k2": graph.k2, "class_order": list(graph.class_order),
                                        "p": graph.p, "q": graph.q, "diagnostics": op.diagnostics()})
    if s["figures"]:
        from .plotting import plot_weight_matrix
        plot_weight_matrix(graph, out / "weights.png")
    print(f"graph over {graph.p} seen + {graph.q} unseen classes written to {out}")


def cmd_propagate(args, s):
    out = _out_dir(s)
    space = _space(s)
    seeds = zio.read_scores_csv(args.seeds, 0)
    if seeds.class_order != space.class_order:
        raise ZSLError("seed CSV columns must list seen then unseen classes in split order")
    seeds = ScoreMatrix(seeds.values, seeds.image_ids, seeds.class_order, space.p)
    graph = build_weight_matrix(space, s["k1"], s["k2"])
    op = build_operator(graph, eta=s["eta"], alpha=s["alpha"], pi_mode=s["pi_mode"])
    diag = op.diagnostics()
    if args.iterative:
        res = propagate_iterative(seeds, op, tol=args.tol, max_iter=args.max_iter)
        scores = res.scores
        diag.update(iterative_converged=res.converged, iterations=res.iterations, last_delta=res.last_delta)
    else:
        scores = propagate_closed(seeds, op)
    diag["fixed_point_residual"] = fixed_point_residual(scores.values, seeds.values, op)
    zio.write_scores_csv(out / "scores.csv", scores)
    with open(out / "predictions.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("image_id,predicted_label\n")
        for iid, lab in zip(scores.image_ids, predict_labels(scores, s["argmax"])):
            fh.write(f"{iid},{lab}\n")
    zio.write_json(out / "diagnostics.json", diag)
    print(f"propagated {len(scores.image_ids)} images; outputs in {out}")


def cmd_train_seeder(args, s):
    _require(s, "features")
    out = _out_dir(s)
    data = zio.read_features_csv(s["features"])
    order, unseen = None, []
    if s["split"]:
        order, unseen = zio.read_split_json(s["split"])
        if data.labels is not None:
            data = data.subset(np.isin(np.array(data.labels, dtype=object), order))
    model = train_logreg(data, s["c"], class_order=order)
    zio.write_json(out / "model.json", model.to_dict())
    if args.test:
        test = zio.read_features_csv(args.test)
        zio.write_scores_csv(out / "seeds.csv", seed_matrix(test, model, unseen))
    print(f"trained {model.n_classes} one-vs-rest classifiers (max grad norm {max(model.grad_norms):.2e})")


def cmd_train_net(args, s):
    _require(s, "features", "hierarchy")
    out = _out_dir(s)
    data = zio.read_features_csv(s["features"])
    hier = Hierarchy.from_csv(s["hierarchy"])
    if data.labels is None:
        raise ZSLError(f"{s['features']}: training features need species labels")
    species = tuple(dict.fromkeys(data.labels))
    idx = {sp: i for i, sp in enumerate(species)}
    lab = np.array([hier.labels_for(y, idx) for y in data.labels])
    X, yf, yg, ys, yd = [data.features], [lab[:, 0]], [lab[:, 1]], [lab[:, 2]], [np.full(len(data), SOURCE)]
    if args.target:
        tgt = zio.read_features_csv(args.target)
        n = len(tgt)
        X.append(tgt.features)
        for arr in (yf, yg, ys):
            arr.append(-np.ones(n, dtype=int))
        yd.append(np.full(n, TARGET))
    batch = HierBatch(np.vstack(X), *(np.concatenate(a) for a in (yf, yg, ys, yd)))
    cfg = _train_config(s)
    params = init_params(data.dim, len(hier.families), len(hier.genera), len(species),
                         trunk_widths=tuple(args.trunk_widths), head_hidden=args.head_hidden,
                         domain_source=args.domain_source, seed=cfg.seed)
    params, history = train(batch, params, cfg)
    doc = params.to_dict()
    doc["species_order"] = list(species)
    (out / "params.json").write_text(json.dumps(doc))
    with open(out / "loss_history.csv", "w", encoding="utf-8") as fh:
        fh.write("epoch,hierarchical_loss\n")
        for e, v in enumerate(history):
            fh.write(f"{e},{v!r}\n")
    if s["figures"]:
        from .plotting import plot_loss_history
        plot_loss_history(history, out / "loss_history.png")
    print(f"hierarchical loss {history[0]:.4f} -> {history[-1]:.4f} over {len(history) - 1} epochs")


def cmd_extract_features(args, s):
    _require(s, "features", "out")
    params = HierNetParams.from_dict(json.loads(Path(args.params).read_text(encoding="utf-8")))
    data = zio.read_features_csv(s["features"])
    feats = extract_features(data.features, params)
    Path(s["out"]).parent.mkdir(parents=True, exist_ok=True)
    zio.write_features_csv(s["out"], FeatureDataset(data.image_ids, feats, data.labels))
    print(f"wrote {feats.shape[0]} x {feats.shape[1]} features to {s['out']}")


def _grid(text, typ):
    return [typ(v.strip()) for v in text.split(",") if v.strip()]


def cmd_tune(args, s):
    _require(s, "features", "semantic")
    cfg = _experiment_config(s)
    grid = {"k1": _grid(args.grid_k1, int), "k2": _grid(args.grid_k2, int),
            "alpha": _grid(args.grid_alpha, float)}
    if args.grid_c:
        grid["c"] = _grid(args.grid_c, float)
    if args.grid_mu_d:
        grid["mu_d"] = _grid(args.grid_mu_d, float)
    if args.grid_pi_mode:
        grid["pi_mode"] = _grid(args.grid_pi_mode, str)
    result = tune(cfg, grid, val_fraction=args.val_fraction)
    best = result["best"]
    if best is None:
        print("no valid grid point")
    else:
        print(f"best {best['params']} mean validation accuracy {best['mean_accuracy']:.4f}")


def cmd_make_folds(s):
    _require(s, "semantic", "out")
    classes = list(zio.read_semantic_csv(s["semantic"]))
    folds = make_folds(classes, s["n_folds"], s["seed"])
    Path(s["out"]).parent.mkdir(parents=True, exist_ok=True)
    Path(s["out"]).write_text(json.dumps([{"seen": a, "unseen": b} for a, b in folds], indent=2) + "\n",
                              encoding="utf-8")
    print(f"{len(folds)} folds over {len(classes)} classes written to {s['out']}")


def cmd_make_synthetic(args, s):
    from .synthetic import make_hierarchical_dataset
    out = _out_dir(s)
    d = make_hierarchical_dataset(n_family=args.families, genera_per_family=args.genera,
                                  species_per_genus=args.species, dim=args.dim,
                                  images_per_class=args.images, seed=s["seed"])
    zio.write_features_csv(out / "features.csv", d.features)
    zio.write_semantic_csv(out / "semantic.csv", d.semantic)
    d.hierarchy.to_csv(out / "hierarchy.csv")
    print(f"synthetic dataset with {len(d.semantic)} classes written to {out}")


# --------------------------------------------------------------------------- parser

def _common(p, *, model=True, net=False):
    p.add_argument("--config", help="flat key = value settings file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (or file for make-folds/extract-features)")
    p.add_argument("--no-figures", dest="figures", action="store_const", const=False)
    if model:
        p.add_argument("--k1", type=int, help="seen neighbours per seen class (default 5)")
        p.add_argument("--k2", type=int, help="unseen neighbours per seen class (default 3)")
        p.add_argument("--eta", type=float, help="uniform jump weight (default 0.001)")
        p.add_argument("--alpha", type=float, help="propagation strength in [0,1) (default 0.8)")
        p.add_argument("--c", type=float, help="logistic-regression data weight (default 0.01)")
        p.add_argument("--pi-mode", dest="pi_mode", choices=("literal", "stationary"))
        p.add_argument("--argmax", choices=("unseen", "all"))
        p.add_argument("--zscore-semantic", dest="zscore_semantic", action="store_const", const=True)
    if net:
        p.add_argument("--mu-f", dest="mu_f", type=float)
        p.add_argument("--mu-g", dest="mu_g", type=float)
        p.add_argument("--mu-d", dest="mu_d", type=float)
        p.add_argument("--lr", dest="learning_rate", type=float)
        p.add_argument("--momentum", type=float)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--epochs", type=int)


def _experiment_args(p):
    p.add_argument("--features", help="features CSV (image_id,label,f0,...)")
    p.add_argument("--semantic", help="semantic vectors CSV (class_id,v0,...)")
    p.add_argument("--hierarchy", help="hierarchy CSV (species_id,genus_id,family_id)")
    p.add_argument("--splits", help="JSON split object or list of split objects; default: seeded folds")
    p.add_argument("--n-folds", dest="n_folds", type=int)
    p.add_argument("--train-net", dest="train_net", action="store_const", const=True,
                   help="learn hierarchical features per fold before seeding")
    p.add_argument("--standardize-features", dest="standardize_features", action="store_const", const=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zslprop", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="cross-validated zero-shot experiment")
    _common(p, net=True)
    _experiment_args(p)

    p = sub.add_parser("build-graph", help="class graph and transition matrix for one split")
    _common(p)
    p.add_argument("--semantic")
    p.add_argument("--split")

    p = sub.add_parser("propagate", help="propagate a seed score CSV over the class graph")
    _common(p)
    p.add_argument("--semantic")
    p.add_argument("--split")
    p.add_argument("--seeds", required=True, help="seed score CSV (image_id,<seen...>,<unseen...>)")
    p.add_argument("--iterative", action="store_true", help="fixed-point iteration instead of the LU solve")
    p.add_argument("--tol", type=float, default=1e-12)
    p.add_argument("--max-iter", dest="max_iter", type=int, default=100_000)

    p = sub.add_parser("train-seeder", help="one-vs-rest logistic regression on seen-class features")
    _common(p)
    p.add_argument("--features")
    p.add_argument("--split", help="restrict training to the split's seen classes and fix their order")
    p.add_argument("--test", help="unlabeled features CSV; writes seeds.csv")

    p = sub.add_parser("train-net", help="train the hierarchical network")
    _common(p, model=False, net=True)
    p.add_argument("--features", help="labeled source-domain features CSV")
    p.add_argument("--target", help="unlabeled target-domain features CSV")
    p.add_argument("--hierarchy")
    p.add_argument("--trunk-widths", dest="trunk_widths", type=int, nargs="+", default=[32, 32, 32])
    p.add_argument("--head-hidden", dest="head_hidden", type=int, default=16)
    p.add_argument("--domain-source", dest="domain_source", choices=("species_head", "species_tap"),
                   default="species_head")

    p = sub.add_parser("extract-features", help="concatenated head features from trained parameters")
    _common(p, model=False)
    p.add_argument("--params", required=True)
    p.add_argument("--features")

    p = sub.add_parser("tune", help="grid search on nested validation splits")
    _common(p, net=True)
    _experiment_args(p)
    p.add_argument("--grid-k1", default="3,5")
    p.add_argument("--grid-k2", default="1,2,3")
    p.add_argument("--grid-alpha", default="0.5,0.8,0.9")
    p.add_argument("--grid-c", default="")
    p.add_argument("--grid-mu-d", default="")
    p.add_argument("--grid-pi-mode", default="", help="e.g. literal,stationary")
    p.add_argument("--val-fraction", dest="val_fraction", type=float, default=1 / 3)

    p = sub.add_parser("make-folds", help="seeded class folds as JSON")
    _common(p, model=False)
    p.add_argument("--semantic")
    p.add_argument("--n-folds", dest="n_folds", type=int)

    p = sub.add_parser("make-synthetic", help="write a synthetic hierarchical dataset")
    _common(p, model=False)
    p.add_argument("--families", type=int, default=3)
    p.add_argument("--genera", type=int, default=2, help="genera per family")
    p.add_argument("--species", type=int, default=2, help="species per genus")
    p.add_argument("--dim", type=int, default=20)
    p.add_argument("--images", type=int, default=30, help="images per species")
    return parser


COMMANDS = {
    "run": lambda a, s: cmd_run(s),
    "build-graph": lambda a, s: cmd_build_graph(s),
    "propagate": cmd_propagate,
    "train-seeder": cmd_train_seeder,
    "train-net": cmd_train_net,
    "extract-features": cmd_extract_features,
    "tune": cmd_tune,
    "make-folds": lambda a, s: cmd_make_folds(s),
    "make-synthetic": cmd_make_synthetic,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = resolve(args)
        COMMANDS[args.command](args, settings)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ZSLError, ValueError, OSError, np.linalg.LinAlgError) as exc:
        print(f"error: [stage={args.command}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
