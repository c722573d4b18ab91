"""Training: regularized objective, grouped Adam, and 1-D fitting runs.

The objective is the sum of per-sample squared errors plus ``lambda_`` times
the total second-order variation of all spline activations; baseline
activations contribute no regularization.  Adam runs with its default
moment constants and a per-group learning rate: weights and biases (and any
baseline activation parameters) at ``eta``, spline scaling factors at
``eta/4``, spline coefficients at ``eta/40``.

``fit_1d`` trains on one of three zero-mean 1-Lipschitz targets on [-1, 1]
(1000 uniform random training points, a 10000-point uniform test partition)
and logs per-epoch metrics — including a full Lipschitz audit — to CSV.
Runs are bitwise reproducible for a fixed seed.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .config import atomic_open
from .autodiff import Tensor, squared_l2_norm
from .network import Network, NetworkSpec, build_network, lipschitz_audit
from .spline import SplineBank

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8

GROUP_RATES = {"weights": 1.0, "spline_alpha": 0.25, "spline_c": 0.025}

METRIC_COLUMNS = ("epoch", "train_mse", "test_mse", "mean_aelr",
                  "lipschitz_audit")


@dataclass
class TrainConfig:
    eta: float = 1e-3
    batch_size: int = 10
    epochs: int = 100
    lambda_: float = 0.0
    seed: int = 0
    loss: str = "mse"
    audit_pairs: int = 10_000

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.lambda_ < 0:
            raise ValueError("lambda must be nonnegative")
        if self.loss not in ("mse", "negated-dual"):
            raise ValueError("loss must be 'mse' or 'negated-dual'")


@dataclass
class AdamState:
    """First/second moment accumulators per parameter, grouped by rate."""

    groups: dict[str, list[Tensor]]
    m: dict[str, list[np.ndarray]] = field(default_factory=dict)
    v: dict[str, list[np.ndarray]] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        if not self.m:
            self.m = {k: [np.zeros_like(p.data) for p in ps]
                      for k, ps in self.groups.items()}
            self.v = {k: [np.zeros_like(p.data) for p in ps]
                      for k, ps in self.groups.items()}


def collect_gradients(groups: dict[str, list[Tensor]]):
    """Snapshot .grad per parameter (zeros when absent) and clear them."""
    grads = {}
    for name, params in groups.items():
        rows = []
        for p in params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            rows.append(np.array(g, dtype=np.float64))
            p.grad = None
        grads[name] = rows
    return grads


def adam_step(state: AdamState, grads, config: TrainConfig) -> None:
    """One Adam update over all groups; aborts on a non-finite gradient."""
    for name, rows in grads.items():
        for g in rows:
            if not np.all(np.isfinite(g)):
                raise ValueError(
                    f"non-finite gradient in group {name!r}; step aborted")
    state.step += 1
    t = state.step
    bias1 = 1.0 - BETA1 ** t
    bias2 = 1.0 - BETA2 ** t
    for name, params in state.groups.items():
        lr = config.eta * GROUP_RATES.get(name, 1.0)
        for i, p in enumerate(params):
            g = grads[name][i]
            state.m[name][i] = BETA1 * state.m[name][i] + (1 - BETA1) * g
            state.v[name][i] = BETA2 * state.v[name][i] + (1 - BETA2) * g * g
            m_hat = state.m[name][i] / bias1
            v_hat = state.v[name][i] / bias2
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + EPSILON)


def objective(network: Network, batch, lambda_: float) -> Tensor:
    """Sum of squared errors plus lambda * total tv2 of spline activations."""
    x, y = batch
    pred = network.forward_graph(Tensor(np.asarray(x, dtype=np.float64)))
    loss = squared_l2_norm(pred - Tensor(np.asarray(y, dtype=np.float64)))
    if lambda_ > 0:
        for bank in network.spline_banks():
            loss = loss + bank.tv2_total() * lambda_
    return loss


# ---------------------------------------------------------------------------
# 1-D targets: zero mean on [-1, 1], Lipschitz constant at most 1


def f1_stand_in(x):
    """Zero-mean triangular wave, period 1/2 (four teeth), |slope| = 1 a.e."""
    x = np.asarray(x, dtype=np.float64)
    return np.abs((x + 1.0) % 0.5 - 0.25) - 0.125


def f2_stand_in(x):
    """Zero-mean staircase ramp: slope alternates 1, 0 on 8 subintervals."""
    x = np.asarray(x, dtype=np.float64)
    u = np.clip(x + 1.0, 0.0, 2.0)
    i = np.minimum(np.floor(u / 0.25), 7.0)
    base = 0.25 * np.ceil(i / 2.0)
    sloped = (i % 2.0) == 0.0
    return base + np.where(sloped, u - 0.25 * i, 0.0) - 0.5625


def f3(x):
    """sin(7 pi x) / (7 pi): highly varying, 1-Lipschitz, zero mean."""
    x = np.asarray(x, dtype=np.float64)
    return np.sin(7.0 * np.pi * x) / (7.0 * np.pi)


TARGETS = {"f1_stand_in": f1_stand_in, "f2_stand_in": f2_stand_in, "f3": f3}

N_TRAIN = 1000
N_TEST = 10_000


@dataclass
class FitResult:
    network: Network
    train_mse: float
    test_mse: float
    history: list[dict]


def _mse(network: Network, x: np.ndarray, y: np.ndarray) -> float:
    pred = network.forward_array(x[:, None])[:, 0]
    return float(np.mean((pred - y) ** 2))


def _mean_aelr(network: Network) -> float:
    banks = network.spline_banks()
    if not banks:
        return float("nan")
    values = np.concatenate([b.aelr_values() for b in banks])
    return float(values.mean())


def write_metrics_csv(path: str, history: list[dict]) -> None:
    with atomic_open(path, "w", newline="") as fh:
        _write_metrics(fh, history)


def _write_metrics(fh, history) -> None:
    writer = csv.writer(fh)
    writer.writerow(METRIC_COLUMNS)
    for row in history:
        writer.writerow([row["epoch"]] + [repr(float(row[c]))
                                          for c in METRIC_COLUMNS[1:]])


def metrics_csv_text(history: list[dict]) -> str:
    buf = io.StringIO()
    _write_metrics(buf, history)
    return buf.getvalue()


def train_epochs(network: Network, x_train, y_train, config: TrainConfig,
                 *, epoch_hook=None) -> list[dict]:
    """Run the epoch loop on prepared data; returns per-epoch metric rows.

    ``epoch_hook(network, epoch)`` may add extra entries to the metric row.
    """
    x_train = np.asarray(x_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.float64)
    n = x_train.shape[0]
    rng = np.random.default_rng(config.seed)
    state = AdamState(network.parameter_groups())
    history = []
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            network.refresh(iters=1)
            loss = objective(network, (x_train[idx], y_train[idx]),
                             config.lambda_)
            loss.backward()
            grads = collect_gradients(state.groups)
            adam_step(state, grads, config)
            network.invalidate()
        row = {"epoch": epoch}
        if epoch_hook is not None:
            row.update(epoch_hook(network, epoch))
        history.append(row)
    return history


def fit_1d(target: str, spec: NetworkSpec, config: TrainConfig,
           metrics_path: str | None = None) -> FitResult:
    """Train on one named 1-D target; returns the network and test MSE."""
    if target not in TARGETS:
        raise ValueError(f"unknown target {target!r}; choose from "
                         f"{sorted(TARGETS)}")
    fn = TARGETS[target]
    data_rng = np.random.default_rng(config.seed)
    x_train = data_rng.uniform(-1.0, 1.0, size=N_TRAIN)
    y_train = fn(x_train)
    x_test = np.linspace(-1.0, 1.0, N_TEST)
    y_test = fn(x_test)

    network = build_network(spec)

    def epoch_hook(net: Network, epoch: int) -> dict:
        audit_rng = np.random.default_rng([config.seed, epoch])
        return {
            "train_mse": _mse(net, x_train, y_train),
            "test_mse": _mse(net, x_test, y_test),
            "mean_aelr": _mean_aelr(net),
            "lipschitz_audit": lipschitz_audit(
                net, n_pairs=config.audit_pairs, rng=audit_rng),
        }

    history = train_epochs(network, x_train[:, None], y_train[:, None],
                           config, epoch_hook=epoch_hook)
    if metrics_path is not None:
        write_metrics_csv(metrics_path, history)
    last = history[-1]
    return FitResult(network=network, train_mse=last["train_mse"],
                     test_mse=last["test_mse"], history=history)
