"""Posterior sampling for the finite-precision model.

User and item vectors have conjugate Gaussian conditionals and are drawn
exactly.  Weight columns (with their bias entry) and per-item hidden rows are
updated by Langevin-style Metropolis steps: the proposal mean follows the
gradient of the block's log conditional, and the acceptance ratio carries the
asymmetric-proposal correction, so the kernel targets the exact conditional.
Step sizes adapt toward a 20-40% acceptance band during burn-in and are then
frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import expit

from . import sdae
from .data import corrupt
from .exceptions import ArgumentError, NumericError
from .factors import _item_system, _solve_spd, _user_system, rating_objective

ACCEPT_TARGET = 0.32  # inside the 20-40% adaptation band
ADAPT_GAIN = 1.0
ADAPT_DECAY = 0.6
ADAPT_INTERVAL = 10   # scans pooled per adaptation window


def logpost_w_col(w_col_plus, x_prev, x_col, lambda_w, lambda_s):
    """Unnormalized log conditional of one weight column with its bias entry.

    ``w_col_plus`` is the column stacked with its bias as last entry;
    ``x_prev`` holds the previous layer's rows (items x width) and ``x_col``
    the current layer's column the weights feed.  Constant terms independent
    of the argument are dropped.
    """
    w = np.asarray(w_col_plus, dtype=np.float64)
    if not np.isfinite(w).all():
        raise NumericError("non-finite weight column")
    z = x_prev @ w[:-1] + w[-1]
    resid = x_col - expit(z)
    return -0.5 * lambda_w * float(w @ w) - 0.5 * lambda_s * float(resid @ resid)


def grad_logpost_w_col(w_col_plus, x_prev, x_col, lambda_w, lambda_s):
    w = np.asarray(w_col_plus, dtype=np.float64)
    z = x_prev @ w[:-1] + w[-1]
    s = expit(z)
    back = lambda_s * (x_col - s) * s * (1.0 - s)
    grad = np.empty_like(w)
    grad[:-1] = x_prev.T @ back
    grad[-1] = back.sum()
    return grad - lambda_w * w


def logpost_x_row(layer, num_layers, x, prev_row, w_in, b_in, lambda_s, *,
                  w_out=None, b_out=None, next_row=None, xc_row=None,
                  lambda_n=None, v_row=None, lambda_v=None):
    """Unnormalized log conditional of one hidden row at the given layer.

    Always includes the incoming Gaussian from the previous layer.  Interior
    layers add the outgoing Gaussian toward the next layer; the last layer
    instead couples to the clean content row with precision ``lambda_n``.
    Exactly at the middle layer the item-vector coupling term enters.
    """
    if not 1 <= layer <= num_layers:
        raise ArgumentError(f"layer must lie in [1, {num_layers}], got {layer}")
    x = np.asarray(x, dtype=np.float64)
    mean_in = expit(prev_row @ w_in + b_in)
    diff = x - mean_in
    value = -0.5 * lambda_s * float(diff @ diff)
    if layer == num_layers:
        if xc_row is None or lambda_n is None:
            raise ArgumentError("last layer needs xc_row and lambda_n")
        diff = xc_row - x
        value += -0.5 * lambda_n * float(diff @ diff)
    else:
        if w_out is None or b_out is None or next_row is None:
            raise ArgumentError(f"layer {layer} needs w_out, b_out and next_row")
        diff = next_row - expit(x @ w_out + b_out)
        value += -0.5 * lambda_s * float(diff @ diff)
    if layer == num_layers // 2:
        if v_row is None or lambda_v is None:
            raise ArgumentError("middle layer needs v_row and lambda_v")
        diff = v_row - x
        value += -0.5 * lambda_v * float(diff @ diff)
    return value


def grad_logpost_x_row(layer, num_layers, x, prev_row, w_in, b_in, lambda_s, *,
                       w_out=None, b_out=None, next_row=None, xc_row=None,
                       lambda_n=None, v_row=None, lambda_v=None):
    x = np.asarray(x, dtype=np.float64)
    grad = -lambda_s * (x - expit(prev_row @ w_in + b_in))
    if layer == num_layers:
        grad += lambda_n * (xc_row - x)
    else:
        s = expit(x @ w_out + b_out)
        grad += lambda_s * (w_out @ ((next_row - s) * s * (1.0 - s)))
    if layer == num_layers // 2:
        grad += lambda_v * (v_row - x)
    return grad


def _gaussian_draw(A, rhs, rng):
    """One draw from N(mean, A^-1) where mean solves A mean = rhs.

    The mean is computed through the same SPD solve as the MAP block updates,
    so it matches them bit for bit.
    """
    mean = _solve_spd(A, rhs)
    try:
        upper = scipy.linalg.cholesky(A, lower=False)
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise NumericError(f"covariance factorization failed: {exc}") from exc
    z = rng.standard_normal(len(rhs))
    return mean + scipy.linalg.solve_triangular(upper, z, lower=False)


def sample_u(V, rated_items, conf, lambda_u, rng):
    """Exact draw from the Gaussian conditional of one user vector."""
    A, rhs = _user_system(V, rated_items, conf, lambda_u)
    return _gaussian_draw(A, rhs, rng)


def sample_v(U, rated_users, conf, lambda_v, code_row, rng):
    """Exact draw from the Gaussian conditional of one item vector, centered
    on its middle-layer code."""
    A, rhs = _item_system(U, rated_users, conf, lambda_v, code_row)
    return _gaussian_draw(A, rhs, rng)


def mala_log_ratio(logpost, grad, x, proposal, step):
    """Metropolis-Hastings log acceptance ratio for a Langevin proposal.

    Swapping (x, proposal) flips the sign exactly: the kernel is reversible.
    """
    half = 0.5 * step * step
    fwd = proposal - x - half * grad(x)
    rev = x - proposal - half * grad(proposal)
    return (logpost(proposal) - logpost(x)
            + (float(fwd @ fwd) - float(rev @ rev)) / (2.0 * step * step))


def _mala_update(x, logpost, grad, step, rng):
    proposal = x + 0.5 * step * step * grad(x) + step * rng.standard_normal(x.shape)
    log_ratio = mala_log_ratio(logpost, grad, x, proposal, step)
    if log_ratio >= 0.0 or rng.random() < math.exp(log_ratio):
        return proposal, True
    return x, False


@dataclass
class SamplerState:
    """Mutable chain state: network, hidden rows, factors, and step sizes."""

    net: sdae.SdaeNetwork
    layers: list          # layers[l]: items x width_l; layers[0] is fixed
    U: np.ndarray
    V: np.ndarray
    w_steps: dict = field(default_factory=dict)   # layer -> step size
    x_steps: dict = field(default_factory=dict)
    iteration: int = 0


@dataclass
class ChainSummary:
    """Thinned draws, per-block acceptance, and posterior summaries."""

    tracked: dict                 # name -> array over kept iterations
    kept_U: np.ndarray
    kept_V: np.ndarray
    acceptance: dict              # block -> post-burn-in acceptance rate
    running_acceptance: dict      # block -> running rate at each kept iteration
    step_sizes: dict              # block -> frozen step size
    posterior_mean: dict
    posterior_var: dict
    warnings: list
    iterations: np.ndarray

    def write_tsv(self, path):
        names = sorted(self.tracked)
        blocks = sorted(self.running_acceptance)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("iteration\t" + "\t".join(f"accept_{b}" for b in blocks)
                     + "\t" + "\t".join(names) + "\n")
            for k, it in enumerate(self.iterations):
                cells = [str(int(it))]
                cells += [format(self.running_acceptance[b][k], ".6f") for b in blocks]
                cells += [format(self.tracked[n][k], ".17g") for n in names]
                fh.write("\t".join(cells) + "\n")


def log_joint(state, ratings, content, hyper):
    """Finite-precision joint log density (up to a constant) of the current
    chain state, including the per-layer consistency terms."""
    net = state.net
    L = net.num_layers
    lam_s = hyper.lambda_s
    value = -0.5 * hyper.lambda_u * float(np.sum(state.U * state.U))
    value += -0.5 * hyper.lambda_w * net.squared_norm()
    offsets = state.V - state.layers[net.middle]
    value += -0.5 * hyper.lambda_v * float(np.sum(offsets * offsets))
    recon = content.toarray() - state.layers[L]
    value += -0.5 * hyper.lambda_n * float(np.sum(recon * recon))
    for l in range(1, L + 1):
        mean = expit(state.layers[l - 1] @ net.weights[l - 1] + net.biases[l - 1])
        diff = state.layers[l] - mean
        value += -0.5 * lam_s * float(np.sum(diff * diff))
    value += rating_objective(state.U, state.V, ratings, hyper.confidence())
    return value


def mwg_step(state, ratings, content, hyper, rng,
             blocks=("w", "x", "v", "u")):
    """One full scan; returns per-block (accepted, proposed) counts."""
    net = state.net
    L = net.num_layers
    mid = net.middle
    conf = hyper.confidence()
    lam_s = hyper.lambda_s
    counts = {}
    if "w" in blocks:
        for l in range(1, L + 1):
            x_prev = state.layers[l - 1]
            x_cur = state.layers[l]
            step = state.w_steps[l]
            accepted = 0
            width = net.weights[l - 1].shape[1]
            for n in range(width):
                col = np.append(net.weights[l - 1][:, n], net.biases[l - 1][n])
                x_col = x_cur[:, n]
                new, ok = _mala_update(
                    col,
                    lambda w: logpost_w_col(w, x_prev, x_col, hyper.lambda_w, lam_s),
                    lambda w: grad_logpost_w_col(w, x_prev, x_col, hyper.lambda_w, lam_s),
                    step, rng,
                )
                if ok:
                    net.weights[l - 1][:, n] = new[:-1]
                    net.biases[l - 1][n] = new[-1]
                    accepted += 1
            counts[f"w{l}"] = (accepted, width)
    if "x" in blocks:
        xc = content.toarray()
        for l in range(1, L + 1):
            step = state.x_steps[l]
            accepted = 0
            kwargs = {}
            if l < L:
                kwargs["w_out"] = net.weights[l]
                kwargs["b_out"] = net.biases[l]
            for j in range(ratings.num_items):
                kw = dict(kwargs)
                if l == L:
                    kw["xc_row"] = xc[j]
                    kw["lambda_n"] = hyper.lambda_n
                else:
                    kw["next_row"] = state.layers[l + 1][j]
                if l == mid:
                    kw["v_row"] = state.V[j]
                    kw["lambda_v"] = hyper.lambda_v
                prev = state.layers[l - 1][j]
                w_in = net.weights[l - 1]
                b_in = net.biases[l - 1]
                new, ok = _mala_update(
                    state.layers[l][j],
                    lambda x: logpost_x_row(l, L, x, prev, w_in, b_in, lam_s, **kw),
                    lambda x: grad_logpost_x_row(l, L, x, prev, w_in, b_in, lam_s, **kw),
                    step, rng,
                )
                if ok:
                    state.layers[l][j] = new
                    accepted += 1
            counts[f"x{l}"] = (accepted, ratings.num_items)
    if "v" in blocks:
        codes = state.layers[mid]
        for j in range(ratings.num_items):
            state.V[j] = sample_v(state.U, ratings.users_of(j), conf,
                                  hyper.lambda_v, codes[j], rng)
    if "u" in blocks:
        for i in range(ratings.num_users):
            state.U[i] = sample_u(state.V, ratings.items_of(i), conf,
                                  hyper.lambda_u, rng)
    state.iteration += 1
    return counts


def _adapt(steps, layer, accepted, proposed, window):
    """Robbins-Monro update of the log step size toward the target rate;
    the decaying gain makes late windows barely move the step."""
    if proposed == 0:
        return
    rate = accepted / proposed
    gain = ADAPT_GAIN / (1.0 + window) ** ADAPT_DECAY
    steps[layer] *= math.exp(gain * (rate - ACCEPT_TARGET))


def run_chain(ratings, content, hyper, iters, burn_in, thin=1,
              blocks=("w", "x", "v", "u"), initial_step=0.1):
    """Run the Metropolis-within-Gibbs chain and summarize it.

    Step sizes adapt per block during ``burn_in`` scans and are frozen after;
    kept iterations are every ``thin``-th post-burn-in scan.  Deterministic
    per ``hyper.seed``.
    """
    if not math.isfinite(hyper.lambda_s):
        raise ArgumentError("the sampler needs a finite lambda_s")
    if iters <= burn_in:
        raise ArgumentError("iters must exceed burn_in")
    if thin < 1:
        raise ArgumentError("thin must be at least 1")
    root = np.random.SeedSequence(hyper.seed)
    net_seed, noise_seed, chain_seed = root.spawn(3)
    rng = np.random.default_rng(chain_seed)
    widths = hyper.network_widths(content.vocab_size)
    net = sdae.init_network(widths, net_seed, hyper.lambda_w)
    x0 = corrupt(content, hyper.noise_level, noise_seed)
    trace = sdae.forward(net, x0)
    layers = [x0.matrix.toarray()] + [out.copy() for out in trace.raw_outputs[1:]]
    state = SamplerState(
        net=net, layers=layers,
        U=np.zeros((ratings.num_users, hyper.n_factors)),
        V=layers[net.middle].copy(),
        w_steps={l: initial_step for l in range(1, net.num_layers + 1)},
        x_steps={l: initial_step for l in range(1, net.num_layers + 1)},
    )

    post_counts = {}
    adapt_counts = {}
    kept_iters = []
    tracked = {name: [] for name in
               ("u_0_0", "v_0_0", "w1_0_0", "x_mid_0_0", "log_joint")}
    running = {}
    kept_U, kept_V = [], []
    for it in range(iters):
        counts = mwg_step(state, ratings, content, hyper, rng, blocks=blocks)
        if it < burn_in:
            for block, (acc, prop) in counts.items():
                tot = adapt_counts.setdefault(block, [0, 0])
                tot[0] += acc
                tot[1] += prop
            if (it + 1) % ADAPT_INTERVAL == 0 or it + 1 == burn_in:
                window = it // ADAPT_INTERVAL
                for block, (acc, prop) in adapt_counts.items():
                    steps = state.w_steps if block.startswith("w") else state.x_steps
                    _adapt(steps, int(block[1:]), acc, prop, window)
                adapt_counts = {}
        else:
            for block, (acc, prop) in counts.items():
                tot = post_counts.setdefault(block, [0, 0])
                tot[0] += acc
                tot[1] += prop
            if (it - burn_in) % thin == 0:
                kept_iters.append(it)
                tracked["u_0_0"].append(state.U[0, 0])
                tracked["v_0_0"].append(state.V[0, 0])
                tracked["w1_0_0"].append(state.net.weights[0][0, 0])
                tracked["x_mid_0_0"].append(state.layers[net.middle][0, 0])
                tracked["log_joint"].append(log_joint(state, ratings, content, hyper))
                kept_U.append(state.U.copy())
                kept_V.append(state.V.copy())
                for block, (acc, prop) in post_counts.items():
                    running.setdefault(block, []).append(acc / prop if prop else 0.0)

    acceptance = {block: (acc / prop if prop else 0.0)
                  for block, (acc, prop) in post_counts.items()}
    warnings = [
        f"block {block} acceptance pinned at {rate:.2f} after adaptation"
        for block, rate in acceptance.items() if rate <= 0.0 or rate >= 1.0
    ]
    tracked = {name: np.asarray(vals) for name, vals in tracked.items()}
    step_sizes = {f"w{l}": s for l, s in state.w_steps.items()}
    step_sizes.update({f"x{l}": s for l, s in state.x_steps.items()})
    return ChainSummary(
        tracked=tracked,
        kept_U=np.asarray(kept_U),
        kept_V=np.asarray(kept_V),
        acceptance=acceptance,
        running_acceptance={b: np.asarray(v) for b, v in running.items()},
        step_sizes=step_sizes,
        posterior_mean={n: float(v.mean()) for n, v in tracked.items()},
        posterior_var={n: float(v.var(ddof=1)) if len(v) > 1 else 0.0
                       for n, v in tracked.items()},
        warnings=warnings,
        iterations=np.asarray(kept_iters),
    )
