"""Batch command-line interface wiring all modules together.

Subcommands: split, train, eval, predict, sample, grid.  Every command is
deterministic given (inputs, config, seed), writes its artifacts under the
--out directory, and records a run manifest there.  CDL_LOG_LEVEL selects
the log level (error, warn, info, debug).
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import logging
import os
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, data, factors as mf, metrics, sampling, sdae, training
from .exceptions import ArgumentError, CdlError, ConfigError

log = logging.getLogger(__name__)

_LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING,
               "info": logging.INFO, "debug": logging.DEBUG}

GRID_KEYS = ("lambda_u", "lambda_v", "lambda_n", "lambda_w")

_VARIANTS = ("cdl", "two-step", "encoder-only", "mf")


def _version_string():
    try:
        described = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
            cwd=os.path.dirname(os.path.abspath(__file__)),
        )
        if described.returncode == 0:
            return f"cdl {__version__} ({described.stdout.strip()})"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"cdl {__version__}"


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir, command, args, inputs, outputs, seed=None, config=None):
    """Record what produced the artifacts in ``out_dir``."""
    manifest = {
        "command": command,
        "args": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "seed": seed,
        "config": config,
        "version": _version_string(),
    }
    path = Path(out_dir) / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return path


def _read_manifest(model_dir):
    path = Path(model_dir) / "manifest.json"
    if not path.exists():
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _require_file(path, what):
    if not Path(path).is_file():
        raise ArgumentError(f"{what} file not found: {path}")
    return Path(path)


def _parse_m_grid(text):
    if ":" in text:
        parts = [int(tok) for tok in text.split(":")]
        if len(parts) != 3 or parts[2] < 1 or parts[1] < parts[0]:
            raise ArgumentError(f"bad M grid {text!r}; want start:stop:step")
        return tuple(range(parts[0], parts[1] + 1, parts[2]))
    grid = tuple(int(tok) for tok in text.split(","))
    if not grid or min(grid) < 1:
        raise ArgumentError(f"bad M grid {text!r}")
    return grid


def cmd_split(args):
    ratings_path = _require_file(args.ratings, "ratings")
    ratings = data.load_ratings(ratings_path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = data.SplitSpec(args.P, args.seed, args.reps)
    outputs = []
    for rep, (train, test, eval_users) in enumerate(data.split_repetitions(ratings, spec)):
        rep_dir = out / f"rep_{rep:02d}"
        rep_dir.mkdir(exist_ok=True)
        data.save_ratings(train, rep_dir / "train.tsv")
        data.save_ratings(test, rep_dir / "test.tsv")
        rep_seed = int(np.random.SeedSequence([spec.seed, rep]).generate_state(1)[0])
        data.write_split_manifest(rep_dir / "split_manifest.txt", train,
                                  data.SplitSpec(spec.P, rep_seed))
        outputs += [rep_dir / "train.tsv", rep_dir / "test.tsv",
                    rep_dir / "split_manifest.txt"]
        log.info("rep %d: %d train / %d test pairs, %d eval users",
                 rep, train.nnz, test.nnz, len(eval_users))
    write_manifest(out, "split", args, [ratings_path], outputs, seed=args.seed)
    return 0


def _train_one(ratings, content, hyper, variant, report_path=None):
    if variant == "cdl":
        return training.fit(ratings, content, hyper, report_path=report_path)
    if variant == "two-step":
        return training.fit_two_step(ratings, content, hyper, report_path=report_path)
    if variant == "encoder-only":
        return training.fit_encoder_only(ratings, content, hyper, report_path=report_path)
    if variant == "mf":
        factors, report = training.fit_mf_baseline(ratings, hyper, report_path=report_path)
        return None, factors, report
    raise ArgumentError(f"unknown variant {variant!r}")


def cmd_train(args):
    config_path = _require_file(args.config, "config")
    ratings_path = _require_file(args.ratings, "ratings")
    hyper = training.load_config(config_path)
    if args.seed is not None:
        hyper.seed = args.seed
        hyper.validate()
    ratings = data.load_ratings(ratings_path)
    inputs = [config_path, ratings_path]

    content = None
    if args.variant == "mf":
        if args.content:
            log.warning("variant 'mf' is content-free; ignoring %s", args.content)
    else:
        if not args.content:
            raise ArgumentError(f"variant {args.variant!r} needs --content")
        content_path = _require_file(args.content, "content")
        content = data.load_content(content_path, mode=args.content_mode,
                                    num_items=ratings.num_items)
        inputs.append(content_path)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "report.tsv"
    net, factors, _report = _train_one(ratings, content, hyper, args.variant,
                                       report_path=report_path)
    outputs = [report_path]
    if net is not None:
        sdae.save_network(net, out / "network.npz",
                          config=training.config_text(hyper))
        outputs.append(out / "network.npz")
    mf.save_factors(factors, out / "factors.npz")
    mf.export_factors_text(factors, out / "factors.tsv")
    outputs += [out / "factors.npz", out / "factors.tsv"]
    with open(out / "config.txt", "w", encoding="utf-8") as fh:
        fh.write(training.config_text(hyper))
    outputs.append(out / "config.txt")
    write_manifest(out, "train", args, inputs, outputs, seed=hyper.seed,
                   config=training.config_text(hyper))
    return 0


def _load_model(model_dir):
    model_dir = Path(model_dir)
    factors_path = model_dir / "factors.npz"
    if not factors_path.is_file():
        raise ArgumentError(f"no factors checkpoint under {model_dir}")
    factors = mf.load_factors(factors_path)
    net = None
    net_path = model_dir / "network.npz"
    if net_path.is_file():
        net = sdae.load_network(net_path)
    return net, factors


def _train_path_from_manifest(model_dir):
    manifest = _read_manifest(model_dir)
    ratings = manifest.get("args", {}).get("ratings")
    if ratings is None:
        raise ArgumentError(
            f"--train not given and no ratings path recorded in {model_dir}/manifest.json"
        )
    return ratings


def cmd_eval(args):
    models = args.model
    tests = args.test
    if len(models) == 1 and len(tests) > 1:
        models = models * len(tests)
    if len(models) != len(tests):
        raise ArgumentError(
            f"got {len(models)} models for {len(tests)} test files"
        )
    trains = args.train or []
    if trains and len(trains) not in (1, len(tests)):
        raise ArgumentError("--train must appear once or once per test file")
    m_grid = _parse_m_grid(args.m_grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = []
    per_rep = []
    for rep, (model_dir, test_path) in enumerate(zip(models, tests)):
        net, factors = _load_model(model_dir)
        if trains:
            train_path = trains[rep if len(trains) > 1 else 0]
        else:
            train_path = _train_path_from_manifest(model_dir)
        train_path = _require_file(train_path, "train ratings")
        test_path = _require_file(test_path, "test ratings")
        train = data.load_ratings(train_path)
        test = data.load_ratings(test_path)
        if train.num_items != factors.V.shape[0]:
            raise ArgumentError(
                f"checkpoint has {factors.V.shape[0]} items but "
                f"{train_path} has {train.num_items}"
            )
        if test.num_items != train.num_items or test.num_users != train.num_users:
            raise ArgumentError(
                f"train {train_path} and test {test_path} dimensions differ"
            )
        if test.nnz == 0:
            log.warning("test set %s is empty: no users evaluated", test_path)
        policy = metrics.ALL_ITEMS if args.all_items else metrics.EXCLUDE_TRAIN
        per_rep.append(metrics.evaluate_run(factors, train, test, m_grid,
                                            policy=policy))
        inputs += [train_path, test_path]
    report = metrics.aggregate(per_rep)
    report.write_tsv(out / "metrics.tsv")
    write_manifest(out, "eval", args, inputs, [out / "metrics.tsv"])
    for name in report.metric_names:
        print(f"{name}\t{report.mean[name]:.6f}\t(std {report.std[name]:.6f})")
    return 0


def _read_new_item(path, vocab_size, mode):
    """One item's content as word<TAB>count lines, normalized like a content row."""
    triples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise ArgumentError(f"{path}:{lineno}: expected 'word<TAB>count'")
            triples.append((0, int(fields[0]), float(fields[1])))
    content = data.content_from_triples(triples, mode=mode, num_items=1,
                                        vocab_size=vocab_size)
    return content.row(0)


def cmd_predict(args):
    net, factors = _load_model(args.model)
    num_users = factors.U.shape[0]
    if not 0 <= args.user < num_users:
        raise ArgumentError(f"unknown user id {args.user} (have {num_users} users)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    u = factors.U[args.user]
    lines = []
    inputs = []
    if args.item_content:
        if net is None:
            raise ArgumentError("cold-start scoring needs a network checkpoint")
        content_path = _require_file(args.item_content, "item content")
        inputs.append(content_path)
        x = _read_new_item(content_path, net.widths[0], args.content_mode)
        score = mf.predict_new_item(u, sdae.encode(net, x))
        lines.append(f"new\t{score:.17g}")
    else:
        train_path = args.train or _train_path_from_manifest(args.model)
        train_path = _require_file(train_path, "train ratings")
        inputs.append(train_path)
        train = data.load_ratings(train_path)
        ranked = metrics.rank(u.reshape(1, -1), factors.V,
                              _SingleUserView(train, args.user),
                              policy=metrics.EXCLUDE_TRAIN, limit=args.top)
        items = ranked.items[0]
        scores = factors.V[items] @ u
        lines += [f"{item}\t{score:.17g}" for item, score in zip(items, scores)]
    pred_path = out / "predictions.tsv"
    with open(pred_path, "w", encoding="utf-8") as fh:
        fh.write("item\tscore\n")
        for line in lines:
            fh.write(line + "\n")
    write_manifest(out, "predict", args, inputs, [pred_path])
    for line in lines:
        print(line)
    return 0


class _SingleUserView:
    """Adapter exposing one user's training items as user 0."""

    def __init__(self, ratings, user):
        self._items = ratings.items_of(user)

    def items_of(self, user):
        return self._items


def cmd_sample(args):
    config_path = _require_file(args.config, "config")
    ratings_path = _require_file(args.ratings, "ratings")
    content_path = _require_file(args.content, "content")
    hyper = training.load_config(config_path)
    if args.seed is not None:
        hyper.seed = args.seed
        hyper.validate()
    ratings = data.load_ratings(ratings_path)
    content = data.load_content(content_path, mode=args.content_mode,
                                num_items=ratings.num_items)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = sampling.run_chain(ratings, content, hyper,
                                 iters=args.iters, burn_in=args.burn_in,
                                 thin=args.thin)
    summary.write_tsv(out / "chain.tsv")
    with open(out / "chain_summary.json", "w", encoding="utf-8") as fh:
        json.dump({
            "acceptance": summary.acceptance,
            "step_sizes": summary.step_sizes,
            "posterior_mean": summary.posterior_mean,
            "posterior_var": summary.posterior_var,
            "warnings": summary.warnings,
            "kept_iterations": len(summary.iterations),
        }, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for warning in summary.warnings:
        log.warning("%s", warning)
    write_manifest(out, "sample", args,
                   [config_path, ratings_path, content_path],
                   [out / "chain.tsv", out / "chain_summary.json"],
                   seed=hyper.seed, config=training.config_text(hyper))
    return 0


def _grid_points(raw_config, path):
    """Expand comma lists on the searched keys into the run grid."""
    base_lines = {}
    lists = {}
    for lineno, line in enumerate(raw_config.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if key in GRID_KEYS and "," in value:
            try:
                lists[key] = [float(tok) for tok in value.split(",")]
            except ValueError:
                raise ConfigError(
                    f"{path}:{lineno}: bad grid list for {key}: {value!r}", [key]
                ) from None
            if not lists[key]:
                raise ConfigError(f"{path}:{lineno}: empty grid list for {key}", [key])
        else:
            base_lines[key] = value
    names = [k for k in GRID_KEYS if k in lists]
    combos = list(itertools.product(*(lists[k] for k in names))) or [()]
    points = []
    for combo in combos:
        lines = dict(base_lines)
        for name, value in zip(names, combo):
            lines[name] = repr(value)
        text = "\n".join(f"{k}={v}" for k, v in lines.items()) + "\n"
        points.append((dict(zip(names, combo)), training.config_from_text(text, path)))
    return points


def _round_robin_folds(ratings, n_folds, seed):
    """Per-user round-robin fold assignment over a seeded item shuffle."""
    rng = np.random.default_rng(seed)
    fold_pairs = [[] for _ in range(n_folds)]
    for user in range(ratings.num_users):
        items = np.array(ratings.items_of(user))
        rng.shuffle(items)
        for k in range(n_folds):
            for item in items[k::n_folds]:
                fold_pairs[k].append((user, item))
    folds = []
    for k in range(n_folds):
        held = fold_pairs[k]
        rest = [p for kk in range(n_folds) if kk != k for p in fold_pairs[kk]]
        folds.append((
            data.RatingsMatrix(ratings.num_users, ratings.num_items, rest),
            data.RatingsMatrix(ratings.num_users, ratings.num_items, held),
        ))
    return folds


def cmd_grid(args):
    config_path = _require_file(args.config, "config")
    ratings_path = _require_file(args.ratings, "ratings")
    content_path = _require_file(args.content, "content")
    raw = config_path.read_text(encoding="utf-8")
    points = _grid_points(raw, config_path)
    if not points:
        raise ConfigError(f"{config_path}: empty grid")
    ratings = data.load_ratings(ratings_path)
    content = data.load_content(content_path, mode=args.content_mode,
                                num_items=ratings.num_items)
    folds = _round_robin_folds(ratings, args.folds, points[0][1].seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    metric_name = f"recall@{args.select_m}"

    def run_one(task):
        point_idx, fold_idx, hyper = task
        run_hyper = training.HyperParams(**{
            **{name: getattr(hyper, name) for name in training.CONFIG_FIELDS},
            "seed": int(np.random.SeedSequence(
                [hyper.seed, point_idx, fold_idx]).generate_state(1)[0]) % (2 ** 31),
        })
        train, held = folds[fold_idx]
        _, factors, _ = _train_one(train, content, run_hyper, args.variant)
        ranked = metrics.rank(factors.U, factors.V, train,
                              policy=metrics.EXCLUDE_TRAIN, limit=args.select_m)
        _, mean_recall = metrics.recall_at_m(ranked, held, args.select_m)
        return mean_recall

    tasks = [(pi, fi, hyper)
             for pi, (_, hyper) in enumerate(points)
             for fi in range(len(folds))]
    with ThreadPoolExecutor(max_workers=max(args.threads, 1)) as pool:
        results = list(pool.map(run_one, tasks))

    runs_path = out / "grid_runs.tsv"
    with open(runs_path, "w", encoding="utf-8") as fh:
        fh.write("point\tfold\t" + "\t".join(GRID_KEYS) + f"\t{metric_name}\n")
        for (pi, fi, hyper), value in zip(tasks, results):
            cells = [str(pi), str(fi)]
            cells += [repr(getattr(hyper, k)) for k in GRID_KEYS]
            cells.append(format(value, ".10g"))
            fh.write("\t".join(cells) + "\n")

    means = []
    for pi, (combo, hyper) in enumerate(points):
        vals = [value for (qi, _, _), value in zip(tasks, results) if qi == pi]
        means.append((sum(vals) / len(vals), pi, combo, hyper))
    # stable sort keeps enumeration order among ties; argmax below prefers
    # the first enumerated point
    table = sorted(means, key=lambda rec: (-rec[0], rec[1]))
    results_path = out / "grid_results.tsv"
    with open(results_path, "w", encoding="utf-8") as fh:
        fh.write("point\t" + "\t".join(GRID_KEYS) + f"\tmean_{metric_name}\n")
        for value, pi, combo, hyper in table:
            cells = [str(pi)] + [repr(getattr(hyper, k)) for k in GRID_KEYS]
            cells.append(format(value, ".10g"))
            fh.write("\t".join(cells) + "\n")
    best = max(means, key=lambda rec: (rec[0], -rec[1]))
    best_path = out / "best_config.txt"
    with open(best_path, "w", encoding="utf-8") as fh:
        fh.write(training.config_text(best[3]))
    write_manifest(out, "grid", args, [config_path, ratings_path, content_path],
                   [runs_path, results_path, best_path], seed=points[0][1].seed)
    print(f"best point {best[1]}: mean {metric_name} = {best[0]:.6f}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cdl",
        description="Collaborative deep learning recommender toolkit",
    )
    parser.add_argument("--version", action="version", version=_version_string())
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="per-user train/test splits")
    p.add_argument("--ratings", required=True)
    p.add_argument("--P", type=int, required=True,
                   help="training items per user (1=sparse, 10=dense)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model variant")
    p.add_argument("--config", required=True)
    p.add_argument("--ratings", required=True, help="training ratings file")
    p.add_argument("--content", default=None)
    p.add_argument("--content-mode", default=data.BINARY_PRESENCE,
                   choices=[data.BINARY_PRESENCE, data.COUNT_MAXNORM])
    p.add_argument("--variant", default="cdl", choices=_VARIANTS)
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="recall@M grid and mAP on held-out ratings")
    p.add_argument("--model", required=True, nargs="+",
                   help="train output dir(s), one per repetition")
    p.add_argument("--test", required=True, nargs="+")
    p.add_argument("--train", nargs="+", default=None,
                   help="training ratings (defaults to the path in the model manifest)")
    p.add_argument("--M-grid", "--m-grid", dest="m_grid", default="50:300:50")
    p.add_argument("--all-items", action="store_true",
                   help="rank training items too instead of excluding them")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="top-N items or a cold-start score")
    p.add_argument("--model", required=True)
    p.add_argument("--user", type=int, required=True)
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--item-content", default=None,
                   help="word<TAB>count file for one unrated item")
    p.add_argument("--content-mode", default=data.BINARY_PRESENCE,
                   choices=[data.BINARY_PRESENCE, data.COUNT_MAXNORM])
    p.add_argument("--train", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("sample", help="posterior sampling chain")
    p.add_argument("--config", required=True)
    p.add_argument("--ratings", required=True)
    p.add_argument("--content", required=True)
    p.add_argument("--content-mode", default=data.BINARY_PRESENCE,
                   choices=[data.BINARY_PRESENCE, data.COUNT_MAXNORM])
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--burn-in", type=int, default=250)
    p.add_argument("--thin", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("grid", help="cross-validated grid search")
    p.add_argument("--config", required=True,
                   help="config where lambda_u/v/n/w may hold comma lists")
    p.add_argument("--ratings", required=True)
    p.add_argument("--content", required=True)
    p.add_argument("--content-mode", default=data.BINARY_PRESENCE,
                   choices=[data.BINARY_PRESENCE, data.COUNT_MAXNORM])
    p.add_argument("--variant", default="cdl", choices=_VARIANTS)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--select-m", type=int, default=300)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_grid)
    return parser


def main(argv=None):
    level = os.environ.get("CDL_LOG_LEVEL", "warn").lower()
    logging.basicConfig(level=_LOG_LEVELS.get(level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CdlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
