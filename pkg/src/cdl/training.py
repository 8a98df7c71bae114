"""Alternating MAP training and its degenerate variants.

Each sweep runs a full exact user pass, a full exact item pass, then a block
of momentum gradient epochs on the autoencoder with a fresh corruption mask
per epoch.  The objective is tracked per sweep with a per-term breakdown;
non-finite objectives trigger a restore-and-halve-learning-rate recovery.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import factors as mf
from . import sdae
from .data import corrupt
from .exceptions import (
    ArgumentError,
    ConfigError,
    NumericError,
    ShapeError,
    TrainingError,
)
from .factors import ConfidenceParams, LatentFactors

MAX_LR_HALVINGS = 5

REPORT_COLUMNS = (
    "sweep", "total", "user_prior", "weight_prior", "item_offset",
    "reconstruction", "rating", "seconds",
)


@dataclass
class HyperParams:
    """Every knob of a training run; one config key per field."""

    lambda_u: float = 0.1
    lambda_v: float = 10.0
    lambda_n: float = 1000.0
    lambda_w: float = 1e-4
    lambda_s: float = math.inf
    conf_a: float = 1.0
    conf_b: float = 0.01
    n_factors: int = 50
    widths: tuple | None = None
    noise_level: float = 0.3
    dropout_rate: float = 0.1
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs_per_block: int = 5
    max_sweeps: int = 30
    early_stop_tol: float = 1e-6
    early_stop_patience: int = 3
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        # infinite precisions are legal limits for data synthesis; the MAP
        # fitters check finiteness where they need it
        for name in ("lambda_u", "lambda_v", "lambda_n", "lambda_w", "lambda_s"):
            if not getattr(self, name) > 0:
                raise ArgumentError(f"{name} must be positive")
        ConfidenceParams(self.conf_a, self.conf_b)
        if self.n_factors < 1:
            raise ArgumentError("n_factors must be at least 1")
        if not 0.0 <= self.noise_level <= 1.0:
            raise ArgumentError("noise_level must lie in [0, 1]")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ArgumentError("dropout_rate must lie in [0, 1)")
        if not self.learning_rate >= 0.0:
            raise ArgumentError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ArgumentError("momentum must lie in [0, 1)")
        if self.epochs_per_block < 0 or self.max_sweeps < 1:
            raise ArgumentError("epochs_per_block >= 0 and max_sweeps >= 1 required")
        if self.early_stop_tol < 0 or self.early_stop_patience < 1:
            raise ArgumentError("bad early-stop settings")
        if self.widths is not None:
            self.widths = tuple(int(w) for w in self.widths)
            L = len(self.widths) - 1
            if L < 2 or L % 2:
                raise ArgumentError("widths must describe an even layer count >= 2")
            if self.widths[L // 2] != self.n_factors:
                raise ArgumentError(
                    f"middle width {self.widths[L // 2]} must equal n_factors {self.n_factors}"
                )

    def confidence(self):
        return ConfidenceParams(self.conf_a, self.conf_b)

    def require_finite(self, *names):
        for name in names:
            if math.isinf(getattr(self, name)):
                raise ArgumentError(f"{name} must be finite here")

    def network_widths(self, vocab_size):
        """Resolve the architecture against the data's vocabulary size."""
        if self.widths is None:
            return (vocab_size, self.n_factors, vocab_size)
        if self.widths[0] != vocab_size or self.widths[-1] != vocab_size:
            raise ShapeError(
                f"widths end at {self.widths[0]}/{self.widths[-1]} "
                f"but the vocabulary has {vocab_size} words"
            )
        return self.widths


_INT_FIELDS = {"n_factors", "epochs_per_block", "max_sweeps", "early_stop_patience", "seed"}


def _parse_field(name, text):
    text = text.strip()
    if name == "widths":
        if text == "auto":
            return None
        return tuple(int(tok) for tok in text.split(","))
    if name in _INT_FIELDS:
        return int(text)
    return float(text)


def _format_field(name, value):
    if name == "widths":
        return "auto" if value is None else ",".join(str(w) for w in value)
    if name in _INT_FIELDS:
        return str(value)
    return repr(float(value))


CONFIG_FIELDS = tuple(f.name for f in fields(HyperParams))


def config_from_text(text, path="<config>"):
    """Parse a flat key=value config covering every hyperparameter field.

    Missing and unknown keys are rejected together, listing every offender.
    """
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in raw:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}", [key])
        raw[key] = value
    unknown = sorted(set(raw) - set(CONFIG_FIELDS))
    missing = sorted(set(CONFIG_FIELDS) - set(raw))
    if unknown or missing:
        parts = []
        if missing:
            parts.append("missing keys: " + ", ".join(missing))
        if unknown:
            parts.append("unknown keys: " + ", ".join(unknown))
        raise ConfigError(f"{path}: " + "; ".join(parts), unknown + missing)
    kwargs = {}
    for name in CONFIG_FIELDS:
        try:
            kwargs[name] = _parse_field(name, raw[name])
        except ValueError:
            raise ConfigError(f"{path}: bad value for {name}: {raw[name]!r}", [name]) from None
    return HyperParams(**kwargs)


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return config_from_text(fh.read(), path=str(path))


def config_text(hyper):
    """Render a HyperParams back into the flat key=value format."""
    lines = [f"{name}={_format_field(name, getattr(hyper, name))}"
             for name in CONFIG_FIELDS]
    return "\n".join(lines) + "\n"


@dataclass
class SweepRow:
    sweep: int
    total: float
    user_prior: float
    weight_prior: float
    item_offset: float
    reconstruction: float
    rating: float
    seconds: float


@dataclass
class TrainReport:
    """Per-sweep objective values with the five-term breakdown.

    Row 0 records the state before any sweep; later rows follow each sweep.
    """

    rows: list = field(default_factory=list)

    def totals(self):
        return np.array([row.total for row in self.rows])

    def term_series(self, name):
        return np.array([getattr(row, name) for row in self.rows])

    def write_tsv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\t".join(REPORT_COLUMNS) + "\n")
            for row in self.rows:
                fh.write(_row_tsv(row))

    @staticmethod
    def read_tsv(path):
        rows = []
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n").split("\t")
            if tuple(header) != REPORT_COLUMNS:
                raise ConfigError(f"{path}: unexpected report header {header}")
            for line in fh:
                vals = line.rstrip("\n").split("\t")
                rows.append(SweepRow(int(vals[0]), *(float(v) for v in vals[1:])))
        return TrainReport(rows)


def _row_tsv(row):
    vals = [str(row.sweep)] + [
        format(getattr(row, name), ".17g") for name in REPORT_COLUMNS[1:]
    ]
    return "\t".join(vals) + "\n"


class _ReportWriter:
    """Streams report rows to an append-only TSV as training progresses."""

    def __init__(self, path):
        self.path = path
        self._started = False

    def write(self, row):
        if self.path is None:
            return
        mode = "a" if self._started else "w"
        with open(self.path, mode, encoding="utf-8") as fh:
            if not self._started:
                fh.write("\t".join(REPORT_COLUMNS) + "\n")
            fh.write(_row_tsv(row))
        self._started = True


def objective_terms(ratings, U, V, conf, lambda_u, lambda_v, lambda_n, lambda_w,
                    net=None, x0=None, content=None, v_prior_mean=None,
                    batch_size=None):
    """Per-term breakdown of the joint objective; every term is <= 0.

    The item-offset term measures V against ``v_prior_mean`` when given,
    otherwise against the network encodings of ``x0``; the reconstruction
    term needs ``net``, ``x0`` and ``content`` and is exactly 0.0 when
    lambda_n is 0 or there is no network.
    """
    U = np.asarray(U, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    terms = {
        "user_prior": -0.5 * lambda_u * float(np.sum(U * U)),
        "weight_prior": -0.5 * lambda_w * net.squared_norm() if net is not None else 0.0,
    }
    if net is not None and lambda_n > 0 and v_prior_mean is None:
        enc_ss, rec_ss = sdae.coupling_residuals(net, x0, content, V, batch_size)
        terms["item_offset"] = -0.5 * lambda_v * enc_ss
        terms["reconstruction"] = -0.5 * lambda_n * rec_ss
    else:
        if v_prior_mean is None:
            v_prior_mean = sdae.encode(net, x0) if net is not None else np.zeros_like(V)
        diff = V - v_prior_mean
        terms["item_offset"] = -0.5 * lambda_v * float(np.sum(diff * diff))
        if net is not None and lambda_n > 0:
            _, rec_ss = sdae.coupling_residuals(net, x0, content, V, batch_size)
            terms["reconstruction"] = -0.5 * lambda_n * rec_ss
        else:
            terms["reconstruction"] = 0.0
    terms["rating"] = mf.rating_objective(U, V, ratings, conf)
    return terms


def objective(ratings, U, V, conf, lambda_u, lambda_v, lambda_n, lambda_w,
              net=None, x0=None, content=None, v_prior_mean=None,
              batch_size=None, check=True):
    """Joint objective value and its five-term breakdown.

    With ``check`` set, a non-finite result raises NumericError naming the
    offending term.
    """
    terms = objective_terms(ratings, U, V, conf, lambda_u, lambda_v, lambda_n,
                            lambda_w, net=net, x0=x0, content=content,
                            v_prior_mean=v_prior_mean, batch_size=batch_size)
    total = sum(terms.values())
    if check:
        for name, value in terms.items():
            if not math.isfinite(value):
                raise NumericError(f"objective term {name!r} is non-finite")
    return total, terms


class _MomentumState:
    """Heavy-ball velocities for every weight and bias."""

    def __init__(self, net):
        self.vel_w = [np.zeros_like(w) for w in net.weights]
        self.vel_b = [np.zeros_like(b) for b in net.biases]

    def step(self, net, grads_w, grads_b, learning_rate, momentum):
        for l in range(len(net.weights)):
            self.vel_w[l] = momentum * self.vel_w[l] + learning_rate * grads_w[l]
            self.vel_b[l] = momentum * self.vel_b[l] + learning_rate * grads_b[l]
            net.weights[l] += self.vel_w[l]
            net.biases[l] += self.vel_b[l]

    def copy(self):
        dup = object.__new__(_MomentumState)
        dup.vel_w = [v.copy() for v in self.vel_w]
        dup.vel_b = [v.copy() for v in self.vel_b]
        return dup


def _next_seed(seedseq):
    return seedseq.spawn(1)[0]


def _joint_fit(ratings, content, hyper, lambda_n, report_path=None, batch_size=None):
    hyper.require_finite("lambda_u", "lambda_v", "lambda_n", "lambda_w")
    conf = hyper.confidence()
    if content.num_items != ratings.num_items:
        raise ShapeError(
            f"content has {content.num_items} items, ratings {ratings.num_items}"
        )
    widths = hyper.network_widths(content.vocab_size)
    root = np.random.SeedSequence(hyper.seed)
    net_seed, noise_seq, mask_seq = root.spawn(3)
    net = sdae.init_network(widths, net_seed, hyper.lambda_w)
    momentum = _MomentumState(net)
    x0 = corrupt(content, hyper.noise_level, _next_seed(noise_seq))
    V = sdae.encode(net, x0)
    U = np.zeros((ratings.num_users, hyper.n_factors))

    lr = hyper.learning_rate
    halvings = 0
    writer = _ReportWriter(report_path)
    report = TrainReport()

    def evaluate(sweep, seconds):
        total, terms = objective(
            ratings, U, V, conf, hyper.lambda_u, hyper.lambda_v, lambda_n,
            hyper.lambda_w, net=net, x0=x0, content=content,
            batch_size=batch_size, check=False,
        )
        return SweepRow(sweep, total, terms["user_prior"], terms["weight_prior"],
                        terms["item_offset"], terms["reconstruction"],
                        terms["rating"], seconds)

    row = evaluate(0, 0.0)
    report.rows.append(row)
    writer.write(row)

    streak = 0
    sweep = 1
    while sweep <= hyper.max_sweeps:
        snapshot = (U.copy(), V.copy(), net.copy(), momentum.copy(), x0)
        start = time.perf_counter()
        try:
            U = mf.sweep_users(V, ratings, conf, hyper.lambda_u)
            encodings = sdae.encode(net, x0)
            V = mf.sweep_items(U, ratings, conf, hyper.lambda_v, encodings)
            for _ in range(hyper.epochs_per_block):
                x0 = corrupt(content, hyper.noise_level, _next_seed(noise_seq))
                mask = None
                if hyper.dropout_rate > 0:
                    mask = sdae.dropout_mask(widths, ratings.num_items,
                                             hyper.dropout_rate, _next_seed(mask_seq))
                grads_w, grads_b = sdae.gradients(
                    net, x0, content, V, hyper.lambda_v, lambda_n,
                    hyper.lambda_w, mask=mask, batch_size=batch_size,
                )
                momentum.step(net, grads_w, grads_b, lr, hyper.momentum)
            row = evaluate(sweep, time.perf_counter() - start)
            diverged = not math.isfinite(row.total)
        except NumericError:
            diverged = True
        if diverged:
            U, V, net, momentum, x0 = snapshot
            halvings += 1
            if halvings > MAX_LR_HALVINGS:
                raise TrainingError(
                    f"objective stayed non-finite after {MAX_LR_HALVINGS} "
                    "learning-rate halvings",
                    checkpoint={"net": net, "factors": LatentFactors(U, V),
                                "report": report},
                )
            lr *= 0.5
            continue
        report.rows.append(row)
        writer.write(row)
        prev = report.rows[-2].total
        if abs(row.total - prev) / max(abs(row.total), 1e-300) < hyper.early_stop_tol:
            streak += 1
            if streak >= hyper.early_stop_patience:
                break
        else:
            streak = 0
        sweep += 1
    return net, LatentFactors(U, V), report


def fit(ratings, content, hyper, report_path=None, batch_size=None):
    """Joint training: exact factor sweeps alternating with autoencoder epochs.

    Returns (network, factors, report); deterministic for a fixed seed.
    """
    return _joint_fit(ratings, content, hyper, hyper.lambda_n,
                      report_path=report_path, batch_size=batch_size)


def fit_encoder_only(ratings, content, hyper, report_path=None, batch_size=None):
    """Degenerate variant with the reconstruction term dropped: the decoder
    receives only weight decay and the objective excludes reconstruction."""
    return _joint_fit(ratings, content, hyper, 0.0,
                      report_path=report_path, batch_size=batch_size)


def fit_two_step(ratings, content, hyper, report_path=None, batch_size=None):
    """Degenerate variant that first trains the autoencoder on reconstruction
    alone (ratings never enter), freezes the encodings, then runs factor
    sweeps with the frozen encodings as the item-prior mean."""
    hyper.require_finite("lambda_u", "lambda_v", "lambda_n", "lambda_w")
    conf = hyper.confidence()
    if content.num_items != ratings.num_items:
        raise ShapeError(
            f"content has {content.num_items} items, ratings {ratings.num_items}"
        )
    widths = hyper.network_widths(content.vocab_size)
    root = np.random.SeedSequence(hyper.seed)
    net_seed, noise_seq, mask_seq = root.spawn(3)
    net = sdae.init_network(widths, net_seed, hyper.lambda_w)
    momentum = _MomentumState(net)
    x0 = corrupt(content, hyper.noise_level, _next_seed(noise_seq))

    writer = _ReportWriter(report_path)
    report = TrainReport()
    U = np.zeros((ratings.num_users, hyper.n_factors))
    zero_v = np.zeros((ratings.num_items, hyper.n_factors))

    def evaluate(sweep, seconds, V, v_prior_mean, rec_ss=None):
        if rec_ss is None:
            total, terms = objective(
                ratings, U, V, conf, hyper.lambda_u, hyper.lambda_v,
                hyper.lambda_n, hyper.lambda_w, net=net, x0=x0, content=content,
                v_prior_mean=v_prior_mean, batch_size=batch_size, check=False,
            )
        else:
            # factor phase: network is frozen, reuse the cached reconstruction
            terms = objective_terms(
                ratings, U, V, conf, hyper.lambda_u, hyper.lambda_v, 0.0,
                hyper.lambda_w, net=net, v_prior_mean=v_prior_mean,
            )
            terms["reconstruction"] = -0.5 * hyper.lambda_n * rec_ss
            total = sum(terms.values())
        return SweepRow(sweep, total, terms["user_prior"], terms["weight_prior"],
                        terms["item_offset"], terms["reconstruction"],
                        terms["rating"], seconds)

    # reconstruction phase: the item prior tracks the current encodings, so
    # the offset term stays 0 while only the autoencoder trains
    V = sdae.encode(net, x0)
    row = evaluate(0, 0.0, V, V)
    report.rows.append(row)
    writer.write(row)
    lr = hyper.learning_rate
    halvings = 0
    sweep = 1
    while sweep <= hyper.max_sweeps:
        snapshot = (net.copy(), momentum.copy(), x0)
        start = time.perf_counter()
        try:
            for _ in range(hyper.epochs_per_block):
                x0 = corrupt(content, hyper.noise_level, _next_seed(noise_seq))
                mask = None
                if hyper.dropout_rate > 0:
                    mask = sdae.dropout_mask(widths, ratings.num_items,
                                             hyper.dropout_rate, _next_seed(mask_seq))
                grads_w, grads_b = sdae.gradients(
                    net, x0, content, zero_v, 0.0, hyper.lambda_n,
                    hyper.lambda_w, mask=mask, batch_size=batch_size,
                )
                momentum.step(net, grads_w, grads_b, lr, hyper.momentum)
            V = sdae.encode(net, x0)
            row = evaluate(sweep, time.perf_counter() - start, V, V)
            diverged = not math.isfinite(row.total)
        except NumericError:
            diverged = True
        if diverged:
            net, momentum, x0 = snapshot
            halvings += 1
            if halvings > MAX_LR_HALVINGS:
                raise TrainingError(
                    f"objective stayed non-finite after {MAX_LR_HALVINGS} "
                    "learning-rate halvings",
                    checkpoint={"net": net, "report": report},
                )
            lr *= 0.5
            continue
        report.rows.append(row)
        writer.write(row)
        sweep += 1

    # factor phase with frozen encodings
    encodings = sdae.encode(net, x0)
    _, rec_ss = sdae.coupling_residuals(net, x0, content, encodings, batch_size)
    V = encodings.copy()
    for sweep in range(hyper.max_sweeps + 1, 2 * hyper.max_sweeps + 1):
        start = time.perf_counter()
        U = mf.sweep_users(V, ratings, conf, hyper.lambda_u)
        V = mf.sweep_items(U, ratings, conf, hyper.lambda_v, encodings)
        row = evaluate(sweep, time.perf_counter() - start, V, encodings, rec_ss)
        report.rows.append(row)
        writer.write(row)
    return net, LatentFactors(U, V), report


def fit_mf_baseline(ratings, hyper, report_path=None):
    """Content-free control: factor sweeps with a zero-mean item prior.

    Returns (factors, report); the weight-prior and reconstruction terms of
    the report are identically zero.
    """
    hyper.require_finite("lambda_u", "lambda_v")
    conf = hyper.confidence()
    rng = np.random.default_rng(np.random.SeedSequence(hyper.seed))
    V = rng.normal(scale=hyper.lambda_v ** -0.5,
                   size=(ratings.num_items, hyper.n_factors))
    U = np.zeros((ratings.num_users, hyper.n_factors))
    zero_mean = np.zeros_like(V)
    writer = _ReportWriter(report_path)
    report = TrainReport()

    def evaluate(sweep, seconds):
        total, terms = objective(
            ratings, U, V, conf, hyper.lambda_u, hyper.lambda_v, hyper.lambda_n,
            hyper.lambda_w, v_prior_mean=zero_mean,
        )
        return SweepRow(sweep, total, terms["user_prior"], terms["weight_prior"],
                        terms["item_offset"], terms["reconstruction"],
                        terms["rating"], seconds)

    row = evaluate(0, 0.0)
    report.rows.append(row)
    writer.write(row)
    streak = 0
    for sweep in range(1, hyper.max_sweeps + 1):
        start = time.perf_counter()
        U = mf.sweep_users(V, ratings, conf, hyper.lambda_u)
        V = mf.sweep_items(U, ratings, conf, hyper.lambda_v, zero_mean)
        row = evaluate(sweep, time.perf_counter() - start)
        report.rows.append(row)
        writer.write(row)
        prev = report.rows[-2].total
        if abs(row.total - prev) / max(abs(row.total), 1e-300) < hyper.early_stop_tol:
            streak += 1
            if streak >= hyper.early_stop_patience:
                break
        else:
            streak = 0
    return LatentFactors(U, V), report
