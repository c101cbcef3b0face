"""Command-line driver wiring the pipeline end to end.

Subcommands: ``synth`` (write synthetic multi-center datasets),
``cluster`` (write a voxel clustering per center), ``run`` (score one
method on each center and write score/support files), ``aggregate``
(overlap supports across centers), ``compare`` (run every method and
tabulate selected counts and overlap), ``fpr`` (permutation-based
false-positive ratio), ``predict`` (pooled prediction accuracy on a
support), and ``report`` (per-voxel CSV and PGM slice images).

Configuration is a flat ``key = value`` text file with ``#`` comments.
All randomness flows from one integer seed: center number c in the
argument order uses clustering/subsample seed ``seed + c``, so reruns
are bit-identical.  Exit codes: 0 success, 2 configuration/usage/format
errors, 3 when more than 10% of stability draws failed to converge.
"""

from __future__ import annotations

import argparse
import glob
import os
import sys

import numpy as np

from .analysis import (
    estimate_false_positives,
    evaluate_prediction,
    laplace_support,
    overlap,
    write_overlap_csv,
    write_score_slices,
    write_voxel_report,
)
from .clustering import Clustering, cluster_voxels, load_clustering, save_clustering
from .data_model import (
    CenterCollection,
    Dataset,
    FormatError,
    SupportSet,
    load_dataset,
    load_support,
    save_dataset,
    save_support,
)
from .rss_engine import RSSConfig, randomized_l1_run, rss_run, save_score_map
from .solvers import (
    SolverConfig,
    compute_alpha_max,
    solve_l1_logistic,
    solve_l2_logistic,
    solve_l2_svm,
    two_sample_ttest,
)
from .subsampling import SubsampleConfig
from .synthgen import SynthConfig, generate_multicenter

METHODS = ("rss", "randomized_l1", "l1", "l2_logistic", "l2_svm", "ttest")

# Cross-validation grids for the single-solve baselines.  The L2 grid is
# absolute; the L1 grid is expressed as fractions of alpha_max so it stays
# on the useful part of the path for any data scale.
CV_GRID = tuple(10.0 ** k for k in range(-3, 4))
L1_FRACTIONS = (0.5, 0.3, 0.2, 0.1, 0.05, 0.02, 0.01)

TTEST_P = 0.05


class ConfigError(Exception):
    """A configuration file or command invocation is invalid."""


_KNOWN_KEYS = {
    # generator
    "dims", "n_centers", "n_per_center", "true_clusters", "effect_size",
    "noise_sigma", "center_scale_range", "center_shift_sigma",
    # pipeline
    "seed", "method", "q", "row_rate", "voxel_rate", "block_edge", "draws",
    "alpha_fraction", "p0", "data_dir",
}


def parse_config(path) -> dict:
    """Parse a flat ``key = value`` file with ``#`` comments."""
    if not os.path.exists(path):
        raise ConfigError("config file not found: %s" % path)
    values = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError("%s:%d: expected 'key = value', got %r" % (path, lineno, raw.strip()))
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in _KNOWN_KEYS:
                raise ConfigError("%s:%d: unknown config key '%s'" % (path, lineno, key))
            if key in values:
                raise ConfigError("%s:%d: duplicate config key '%s'" % (path, lineno, key))
            if not value:
                raise ConfigError("%s:%d: empty value for key '%s'" % (path, lineno, key))
            values[key] = value
    return values


class RunConfig:
    """Typed access to a parsed configuration."""

    def __init__(self, values: dict):
        self.values = values

    def _raw(self, key, default=None):
        if key in self.values:
            return self.values[key]
        if default is None:
            raise ConfigError("missing config key '%s'" % key)
        return default

    def get_int(self, key, default=None) -> int:
        raw = self._raw(key, default)
        try:
            return int(raw)
        except (TypeError, ValueError):
            raise ConfigError("config key '%s' must be an integer, got %r" % (key, raw)) from None

    def get_float(self, key, default=None) -> float:
        raw = self._raw(key, default)
        try:
            return float(raw)
        except (TypeError, ValueError):
            raise ConfigError("config key '%s' must be a number, got %r" % (key, raw)) from None

    def get_str(self, key, default=None) -> str:
        return str(self._raw(key, default))

    def _numbers(self, key, default=None):
        raw = str(self._raw(key, default))
        try:
            return tuple(float(tok) for tok in raw.replace(",", " ").split())
        except ValueError:
            raise ConfigError("config key '%s' must be numbers, got %r" % (key, raw)) from None

    def get_triple(self, key, default=None) -> tuple:
        nums = self._numbers(key, default)
        if len(nums) != 3 or any(v != int(v) for v in nums):
            raise ConfigError("config key '%s' must be three integers" % key)
        return tuple(int(v) for v in nums)

    def get_pair(self, key, default=None) -> tuple:
        nums = self._numbers(key, default)
        if len(nums) != 2:
            raise ConfigError("config key '%s' must be two numbers" % key)
        return nums

    def get_boxes(self, key) -> tuple:
        """Semicolon-separated sextuples: 'x y z ex ey ez ; x y z ex ey ez'."""
        raw = self.get_str(key)
        boxes = []
        for part in raw.split(";"):
            part = part.strip()
            if not part:
                continue
            try:
                nums = [int(tok) for tok in part.replace(",", " ").split()]
            except ValueError:
                raise ConfigError("config key '%s': box %r is not integers" % (key, part)) from None
            if len(nums) != 6:
                raise ConfigError("config key '%s': box %r needs 6 integers" % (key, part))
            boxes.append(tuple(nums))
        if not boxes:
            raise ConfigError("config key '%s' lists no boxes" % key)
        return tuple(boxes)

    def synth_config(self, seed: int) -> SynthConfig:
        try:
            return SynthConfig(
                dims=self.get_triple("dims"),
                n_centers=self.get_int("n_centers"),
                n_per_center=self.get_int("n_per_center"),
                true_clusters=self.get_boxes("true_clusters"),
                effect_size=self.get_float("effect_size"),
                noise_sigma=self.get_float("noise_sigma"),
                center_scale_range=self.get_pair("center_scale_range"),
                center_shift_sigma=self.get_float("center_shift_sigma"),
                seed=seed,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def subsample_config(self, seed: int) -> SubsampleConfig:
        try:
            return SubsampleConfig(
                row_rate=self.get_float("row_rate", "0.5"),
                voxel_rate=self.get_float("voxel_rate", "0.1"),
                block_edge=self.get_int("block_edge", "5"),
                draws=self.get_int("draws", "200"),
                seed=seed,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def rss_config(self, seed: int) -> RSSConfig:
        try:
            return RSSConfig(
                subsample=self.subsample_config(seed),
                alpha_fraction=self.get_float("alpha_fraction", "0.1"),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def q(self) -> int:
        return self.get_int("q", "200")

    @property
    def p0(self) -> float:
        p0 = self.get_float("p0", "0.975")
        if not 0.0 < p0 < 1.0:
            raise ConfigError("config key 'p0' must lie in (0, 1)")
        return p0

    @property
    def method(self) -> str:
        method = self.get_str("method")
        if method not in METHODS:
            raise ConfigError("unknown method '%s' (choose from %s)" % (method, ", ".join(METHODS)))
        return method


def _resolve_seed(args, cfg: RunConfig) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    return cfg.get_int("seed")


def _resolve_threads(args) -> int:
    if getattr(args, "threads", None) is not None:
        return max(1, args.threads)
    env = os.environ.get("RSS_THREADS", "").strip()
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError("RSS_THREADS must be an integer, got %r" % env) from None
    return 1


def _sibling_paths(matrix_path: str) -> tuple:
    """Labels and mask paths conventionally stored next to a matrix."""
    stem, _ = os.path.splitext(matrix_path)
    labels = stem + ".labels"
    mask = os.path.join(os.path.dirname(matrix_path) or ".", "mask.rssmask")
    return labels, mask


def _load_center(matrix_path: str) -> Dataset:
    labels, mask = _sibling_paths(matrix_path)
    for path in (matrix_path, labels, mask):
        if not os.path.exists(path):
            raise ConfigError("dataset file not found: %s" % path)
    return load_dataset(matrix_path, labels, mask)


def _dataset_args(args, cfg: RunConfig) -> list:
    """Positional dataset paths, or every *.rssmat under config data_dir."""
    paths = list(getattr(args, "datasets", []) or [])
    if not paths:
        data_dir = cfg.get_str("data_dir", "")
        if not data_dir:
            raise ConfigError("no datasets given and no 'data_dir' in config")
        paths = sorted(glob.glob(os.path.join(data_dir, "*.rssmat")))
        if not paths:
            raise ConfigError("no *.rssmat files under data_dir '%s'" % data_dir)
    return paths


def _out_dir(args, fallback=".") -> str:
    out = getattr(args, "out", None) or fallback
    os.makedirs(out, exist_ok=True)
    return out


def _stem(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def _cv_accuracy(model, X, y) -> float:
    return float(np.mean(((X @ model.w + model.c) >= 0) == (y > 0)))


def _cv_pick(X, y, solve, grid) -> float:
    """3-fold cross-validated accuracy; first maximizer wins ties."""
    folds = [np.arange(i, X.shape[0], 3) for i in range(3)]
    best, best_acc = grid[0], -1.0
    for alpha in grid:
        accs = []
        for fold in folds:
            hold = np.zeros(X.shape[0], dtype=bool)
            hold[fold] = True
            if np.unique(y[~hold]).size < 2:
                continue
            model = solve(X[~hold], y[~hold], SolverConfig(alpha=alpha))
            accs.append(_cv_accuracy(model, X[hold], y[hold]))
        acc = float(np.mean(accs)) if accs else -1.0
        if acc > best_acc:
            best, best_acc = alpha, acc
    return best


def method_support(ds: Dataset, method: str, cfg: RunConfig, seed: int,
                   threads: int = 1, clustering: Clustering | None = None):
    """One center, one method -> (SupportSet, ScoreMap or None).

    ``seed`` is the per-center seed (experiment seed + center index).
    Stability methods threshold their scores, weight baselines threshold
    |w|, both with the Laplace quantile at p0; the t-test selects
    p < 0.05.
    """
    p0 = cfg.p0
    if method == "rss":
        if clustering is None:
            clustering = cluster_voxels(ds, cfg.q, seed=seed)
        score_map = rss_run(ds, clustering, cfg.rss_config(seed), threads=threads)
        return laplace_support(score_map.scores, p0), score_map
    if method == "randomized_l1":
        score_map = randomized_l1_run(ds, cfg.rss_config(seed), threads=threads)
        return laplace_support(score_map.scores, p0), score_map
    if method == "ttest":
        _, pvals = two_sample_ttest(ds.X, ds.y)
        return SupportSet(np.flatnonzero(pvals < TTEST_P)), None
    if method == "l1":
        alpha_max = compute_alpha_max(ds.X, ds.y)
        grid = tuple(f * alpha_max for f in L1_FRACTIONS)
        alpha = _cv_pick(ds.X, ds.y, solve_l1_logistic, grid)
        w = solve_l1_logistic(ds.X, ds.y, SolverConfig(alpha=alpha)).w
    elif method == "l2_logistic":
        alpha = _cv_pick(ds.X, ds.y, solve_l2_logistic, CV_GRID)
        w = solve_l2_logistic(ds.X, ds.y, SolverConfig(alpha=alpha)).w
    elif method == "l2_svm":
        alpha = _cv_pick(ds.X, ds.y, solve_l2_svm, CV_GRID)
        w = solve_l2_svm(ds.X, ds.y, SolverConfig(alpha=alpha)).w
    else:
        raise ConfigError("unknown method '%s'" % method)
    return laplace_support(np.abs(w), p0), None


def _maybe_clustering(matrix_path: str, out: str) -> Clustering | None:
    """Reuse <stem>.rssclu next to the dataset or in the output directory."""
    stem = _stem(matrix_path)
    for cand in (
        os.path.join(os.path.dirname(matrix_path) or ".", stem + ".rssclu"),
        os.path.join(out, stem + ".rssclu"),
    ):
        if os.path.exists(cand):
            return load_clustering(cand)
    return None


def cmd_synth(args) -> int:
    cfg = RunConfig(parse_config(args.config))
    seed = _resolve_seed(args, cfg)
    out = _out_dir(args)
    scfg = cfg.synth_config(seed)
    centers, truth = generate_multicenter(scfg)
    mask_path = os.path.join(out, "mask.rssmask")
    for ds in centers.datasets:
        save_dataset(
            ds,
            os.path.join(out, ds.center_id + ".rssmat"),
            os.path.join(out, ds.center_id + ".labels"),
            mask_path,
        )
    save_support(os.path.join(out, "truth.rssgt"), truth.true_support,
                 centers.datasets[0].p, magic="RSSGT")
    print("wrote %d centers under %s" % (len(centers.datasets), out))
    return 0


def cmd_cluster(args) -> int:
    cfg = RunConfig(parse_config(args.config))
    seed = _resolve_seed(args, cfg)
    paths = _dataset_args(args, cfg)
    out = _out_dir(args, fallback=os.path.dirname(paths[0]) or ".")
    for c, matrix_path in enumerate(paths):
        ds = _load_center(matrix_path)
        clustering = cluster_voxels(ds, cfg.q, seed=seed + c)
        save_clustering(os.path.join(out, _stem(matrix_path) + ".rssclu"), clustering)
    print("clustered %d centers (q=%d) under %s" % (len(paths), cfg.q, out))
    return 0


def cmd_run(args) -> int:
    cfg = RunConfig(parse_config(args.config))
    seed = _resolve_seed(args, cfg)
    threads = _resolve_threads(args)
    method = cfg.method
    paths = _dataset_args(args, cfg)
    out = _out_dir(args, fallback=os.path.dirname(paths[0]) or ".")
    flagged = False
    for c, matrix_path in enumerate(paths):
        ds = _load_center(matrix_path)
        clustering = _maybe_clustering(matrix_path, out) if method == "rss" else None
        support, score_map = method_support(ds, method, cfg, seed + c,
                                            threads=threads, clustering=clustering)
        stem = _stem(matrix_path)
        save_support(os.path.join(out, "%s.%s.rsssup" % (stem, method)), support, ds.p)
        if score_map is not None:
            save_score_map(os.path.join(out, "%s.%s.rssscore" % (stem, method)), score_map)
            if score_map.flagged:
                flagged = True
                print("warning: %s: %d of %d draws did not converge"
                      % (stem, score_map.n_nonconverged, score_map.draws), file=sys.stderr)
        print("%s %s: selected %d of %d voxels" % (stem, method, len(support), ds.p))
    return 3 if flagged else 0


def cmd_aggregate(args) -> int:
    out = _out_dir(args)
    supports, sizes = [], []
    for path in args.supports:
        if not os.path.exists(path):
            raise ConfigError("support file not found: %s" % path)
        support, p = load_support(path)
        supports.append(support)
        sizes.append(p)
    if len(set(sizes)) != 1:
        raise ConfigError("support files disagree on voxel count: %s" % sorted(set(sizes)))
    if not 1 <= args.s <= len(supports):
        raise ConfigError("S must lie in [1, %d], got %d" % (len(supports), args.s))
    result = overlap(supports, args.s, p=sizes[0])
    write_overlap_csv(os.path.join(out, "overlap.csv"), result)
    save_support(os.path.join(out, "overlap_support.rsssup"),
                 result.at(args.s), sizes[0])
    for level in range(1, len(supports) + 1):
        print("overlapped(%d) %d" % (level, len(result.at(level))))
    return 0


def cmd_compare(args) -> int:
    cfg = RunConfig(parse_config(args.config))
    seed = _resolve_seed(args, cfg)
    threads = _resolve_threads(args)
    paths = _dataset_args(args, cfg)
    out = _out_dir(args)
    datasets = [_load_center(path) for path in paths]
    n_centers = len(datasets)

    truth = None
    truth_path = os.path.join(os.path.dirname(paths[0]) or ".", "truth.rssgt")
    if os.path.exists(truth_path):
        truth_support, _ = load_support(truth_path)
        truth = truth_support

    flagged = False
    rows = []
    for method in METHODS:
        supports = []
        for c, (matrix_path, ds) in enumerate(zip(paths, datasets)):
            clustering = _maybe_clustering(matrix_path, out) if method == "rss" else None
            support, score_map = method_support(ds, method, cfg, seed + c,
                                                threads=threads, clustering=clustering)
            if score_map is not None and score_map.flagged:
                flagged = True
            supports.append(support)
            save_support(os.path.join(out, "%s.%s.rsssup" % (_stem(matrix_path), method)),
                         support, ds.p)
        ov = overlap(supports, n_centers, p=datasets[0].p).at(n_centers)
        row = {"method": method,
               "sizes": [len(s) for s in supports],
               "overlap_all": len(ov)}
        if truth is not None:
            tp = len(ov.intersection(truth))
            precision = tp / len(ov) if len(ov) else 1.0
            recall = tp / len(truth) if len(truth) else 0.0
            f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
            row.update(precision=precision, recall=recall, f1=f1)
        rows.append(row)
        print("%-14s sizes=%s overlapped(%d)=%d%s" % (
            method, row["sizes"], n_centers, row["overlap_all"],
            "" if truth is None else "  P=%.3f R=%.3f F1=%.3f" % (row["precision"], row["recall"], row["f1"]),
        ))

    table = os.path.join(out, "comparison.csv")
    with open(table, "w", encoding="ascii") as f:
        header = ["method"] + ["selected_center%d" % c for c in range(n_centers)] + ["overlap_all"]
        if truth is not None:
            header += ["precision", "recall", "f1"]
        f.write(",".join(header) + "\n")
        for row in rows:
            cells = [row["method"]] + [str(v) for v in row["sizes"]] + [str(row["overlap_all"])]
            if truth is not None:
                cells += ["%.17g" % row[k] for k in ("precision", "recall", "f1")]
            f.write(",".join(cells) + "\n")
    print("wrote %s" % table)
    return 3 if flagged else 0


def cmd_fpr(args) -> int:
    cfg = RunConfig(parse_config(args.config))
    seed = _resolve_seed(args, cfg)
    threads = _resolve_threads(args)
    matrix_path = args.datasets[0]
    ds = _load_center(matrix_path)
    support, p = load_support(args.support)
    if p != ds.p:
        raise ConfigError("support voxel count %d does not match dataset (%d)" % (p, ds.p))
    clustering = _maybe_clustering(matrix_path, args.out or ".")
    if clustering is None:
        clustering = cluster_voxels(ds, cfg.q, seed=seed)
    ratio, inside = estimate_false_positives(
        ds, clustering, cfg.rss_config(seed), support,
        n_perm=args.n_perm, seed=seed, p0=cfg.p0, threads=threads)
    print("false_positive_ratio %.6f" % ratio)
    print("inside_counts %s" % " ".join(str(int(v)) for v in inside))
    return 0


def cmd_predict(args) -> int:
    cfg = RunConfig(parse_config(args.config))
    seed = _resolve_seed(args, cfg)
    paths = _dataset_args(args, cfg)
    datasets = [_load_center(path) for path in paths]
    support, p = load_support(args.support)
    if any(ds.p != p for ds in datasets):
        raise ConfigError("support voxel count %d does not match the datasets" % p)
    if len(support) == 0:
        raise ConfigError("support is empty; nothing to evaluate")
    pooled = CenterCollection(datasets)
    mean, std = evaluate_prediction(pooled, support, n_splits=args.splits,
                                    train_fraction=args.train_fraction, seed=seed)
    print("accuracy_mean %.6f" % mean)
    print("accuracy_std %.6f" % std)
    return 0


def cmd_report(args) -> int:
    out = _out_dir(args)
    from .rss_engine import load_score_map

    score_map = load_score_map(args.score)
    support, p = load_support(args.support)
    matrix_path = args.datasets[0]
    ds = _load_center(matrix_path)
    if score_map.scores.size != ds.p or p != ds.p:
        raise ConfigError("score/support voxel counts do not match the dataset")
    stem = _stem(args.score)
    csv_path = os.path.join(out, stem + "_voxels.csv")
    write_voxel_report(csv_path, ds.mask, score_map.scores, support)
    slice_dir = os.path.join(out, stem + "_slices")
    os.makedirs(slice_dir, exist_ok=True)
    written = write_score_slices(slice_dir, ds.mask, score_map.scores)
    print("wrote %s and %d slices under %s" % (csv_path, len(written), slice_dir))
    return 0


def _add_common(sub, config=True, seed=True, out=True, threads=False, datasets=False):
    if config:
        sub.add_argument("--config", required=True, help="key = value configuration file")
    if seed:
        sub.add_argument("--seed", type=int, default=None, help="override the config seed")
    if out:
        sub.add_argument("--out", default=None, help="output directory (default: data directory)")
    if threads:
        sub.add_argument("--threads", type=int, default=None,
                         help="worker count (default: RSS_THREADS or 1)")
    if datasets:
        sub.add_argument("datasets", nargs="*", metavar="DATASET.rssmat",
                         help="center matrices (labels/mask are siblings); default: config data_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rss-select",
        description="Multi-center voxel support identification by randomized structural sparsity.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    s = subs.add_parser("synth", help="generate synthetic multi-center datasets")
    _add_common(s, threads=False)
    s.set_defaults(func=cmd_synth)

    s = subs.add_parser("cluster", help="cluster each center's voxels")
    _add_common(s, datasets=True)
    s.set_defaults(func=cmd_cluster)

    s = subs.add_parser("run", help="run the configured method on each center")
    _add_common(s, threads=True, datasets=True)
    s.set_defaults(func=cmd_run)

    s = subs.add_parser("aggregate", help="overlap support files across centers")
    _add_common(s, config=False, seed=False)
    s.add_argument("--s", type=int, required=True, help="minimum number of centers sharing a voxel")
    s.add_argument("supports", nargs="+", metavar="SUPPORT.rsssup")
    s.set_defaults(func=cmd_aggregate)

    s = subs.add_parser("compare", help="run every method and tabulate overlap")
    _add_common(s, threads=True, datasets=True)
    s.set_defaults(func=cmd_compare)

    s = subs.add_parser("fpr", help="permutation-based false-positive ratio")
    _add_common(s, out=True, threads=True)
    s.add_argument("--support", required=True, help="final support file to test")
    s.add_argument("--n-perm", type=int, default=20, help="number of permutations")
    s.add_argument("datasets", nargs=1, metavar="DATASET.rssmat")
    s.set_defaults(func=cmd_fpr)

    s = subs.add_parser("predict", help="pooled prediction accuracy on a support")
    _add_common(s, out=False, datasets=True)
    s.add_argument("--support", required=True)
    s.add_argument("--splits", type=int, default=100)
    s.add_argument("--train-fraction", type=float, default=0.9)
    s.set_defaults(func=cmd_predict)

    s = subs.add_parser("report", help="per-voxel CSV and PGM slices from a score map")
    _add_common(s, config=False, seed=False)
    s.add_argument("--score", required=True, help="RSSSCORE file")
    s.add_argument("--support", required=True, help="RSSSUP file")
    s.add_argument("datasets", nargs=1, metavar="DATASET.rssmat")
    s.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FormatError, FileNotFoundError, ValueError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
