"""Batch entry points: ``lipspline <subcommand> [--config ...] [--out ...]``.

Subcommands
-----------
fit1d           train a 1-D regression network on a named target
w1              train a critic and estimate a Wasserstein-1 distance
train-denoiser  train a 1-Lipschitz convolutional denoiser on patches
pnp             run (or certify) the plug-and-play solver on one problem
audit           empirical Lipschitz audit of a checkpoint or fresh network
inspect-spline  dump one spline activation as CSV and print TV(2)/AELR

Every run resolves its flat key=value config against the subcommand schema
(unknown keys rejected), writes the resolved copy to ``<out>/config.resolved``,
and writes all artifacts atomically.  Randomness flows from the single
``seed`` key (overridable with ``--seed``), so identical config + seed give
byte-identical CSV outputs.

Exit codes: 0 success; 1 configuration error (bad keys/values, unreadable
inputs, precondition violations such as a contractive certificate with
K >= 1); 2 numeric failure (solver divergence, non-finite values, or a
certificate whose inequality was violated); 3 certificate refusal (its
preconditions could not be established, e.g. beta > 1/2 or non-converged
fixed points).
"""

from __future__ import annotations

import argparse
import os
import sys
import zipfile

import numpy as np

from .config import (
    atomic_open,
    parse_config_file,
    resolve_config,
    write_resolved_config,
)
from .denoiser import (
    AveragedDenoiser,
    ConvNet,
    ConvNetSpec,
    DenoiserTrainConfig,
    IdentityMap,
    ScaledDenoiser,
    ZeroMap,
    conv_lipschitz_audit,
    train_denoiser,
    write_aelr_csv,
)
from .forward_models import circular_blur, default_blur_kernel, masked_dft
from .imaging import phantom, psnr, read_pgm, write_pgm
from .layers import load_archive
from .network import Network, NetworkSpec, build_network, lipschitz_audit
from .pnp import (
    DivergenceError,
    pnp_fbs,
    stability_certificate_prop3,
    stability_certificate_prop4,
    write_run_csv,
)
from .spline import SplineBank
from .training import TrainConfig, fit_1d
from .wasserstein import (
    MixtureParams,
    estimate_w1,
    gaussian_params,
    train_critic,
    w1_1d_oracle,
    write_results_csv,
)


def _write_csv(path: str, columns: list[str], rows: list[dict]) -> None:
    """Small atomic CSV writer with repr-exact floats."""
    import csv

    with atomic_open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(float(row[c]))
                             if isinstance(row[c], float) else row[c]
                             for c in columns])


def _network_spec(settings: dict, in_dim: int, out_dim: int) -> NetworkSpec:
    widths = [in_dim] + [settings["width"]] * settings["depth"] + [out_dim]
    return NetworkSpec(widths=widths,
                       activation=settings["activation"],
                       constraint=settings["constraint"],
                       init=settings["init"],
                       spline_K=settings["spline_K"],
                       spline_range=settings["spline_range"],
                       spline_preset=settings["spline_preset"],
                       spline_shared=settings["spline_shared"],
                       groupsort_size=settings["groupsort_size"],
                       prelu_init=settings["prelu_init"],
                       seed=settings["seed"])


# ---------------------------------------------------------------------------
# subcommand handlers


def _run_fit1d(settings: dict, args) -> int:
    from .reporting import save_training_curves

    spec = _network_spec(settings, 1, 1)
    config = TrainConfig(eta=settings["eta"],
                         batch_size=settings["batch_size"],
                         epochs=settings["epochs"],
                         lambda_=settings["lambda"],
                         seed=settings["seed"],
                         audit_pairs=settings["audit_pairs"])
    metrics = os.path.join(args.out, "metrics.csv")
    result = fit_1d(settings["target"], spec, config, metrics_path=metrics)
    result.network.save(os.path.join(args.out, "checkpoint.npz"))
    save_training_curves(os.path.join(args.out, "training.png"),
                         result.history)
    print(f"target = {settings['target']}")
    print(f"train_mse = {result.train_mse!r}")
    print(f"test_mse = {result.test_mse!r}")
    return 0


def _w1_pair(settings: dict):
    """(params_pair, oracle-or-None) for the configured distribution pair."""
    dim = settings["dim"]
    if dim < 1:
        raise ValueError("dim must be at least 1")
    kind = settings["pair"]
    eye = np.eye(dim)
    if kind == "shifted":
        shift = settings["shift"]
        mu = np.zeros(dim)
        mu[0] = shift
        # translated copies of one distribution are exactly |shift| apart
        return (gaussian_params(mu, eye), gaussian_params(np.zeros(dim), eye),
                abs(shift))
    if kind == "scaled":
        s2 = settings["scale2"]
        pair = (gaussian_params(np.zeros(dim), eye),
                gaussian_params(np.zeros(dim), s2 * eye))
        oracle = (w1_1d_oracle(("gaussian", 0.0, 1.0),
                               ("gaussian", 0.0, abs(s2)))
                  if dim == 1 else None)
        return (*pair, oracle)
    if kind == "mixtures":
        rng = np.random.default_rng([settings["seed"], 7])

        def random_mixture():
            means = rng.uniform(-2.0, 2.0, size=(2, dim))
            factors = rng.normal(0.0, 0.6, size=(2, dim, dim))
            return MixtureParams(means=means, factors=factors)

        p1, p2 = random_mixture(), random_mixture()
        oracle = (w1_1d_oracle(("mixture1d", p1), ("mixture1d", p2))
                  if dim == 1 else None)
        return p1, p2, oracle
    raise ValueError(f"unknown pair {kind!r}; choose shifted | scaled | "
                     f"mixtures")


def _run_w1(settings: dict, args) -> int:
    from .reporting import save_dual_curve

    p1, p2, oracle = _w1_pair(settings)
    spec = _network_spec(settings, settings["dim"], 1)
    critic = build_network(spec)
    config = TrainConfig(eta=settings["eta"],
                         batch_size=settings["batch_size"],
                         epochs=settings["epochs"],
                         lambda_=settings["lambda"],
                         seed=settings["seed"],
                         loss="negated-dual")
    history = train_critic((p1, p2), critic, config,
                           n_train=settings["n_train"],
                           audit_pairs=settings["audit_pairs"])
    mean, std = estimate_w1(critic, (p1, p2), settings["n_mc"],
                            np.random.default_rng([settings["seed"], 3]),
                            repeats=settings["repeats"])
    _write_csv(os.path.join(args.out, "history.csv"),
               ["epoch", "train_dual", "lipschitz_audit"], history)
    write_results_csv(os.path.join(args.out, "results.csv"), [{
        "activation": settings["activation"],
        "depth": settings["depth"],
        "width": settings["width"],
        "seed": settings["seed"],
        "estimate_mean": mean,
        "estimate_std": std,
        "oracle": oracle,
    }])
    critic.save(os.path.join(args.out, "critic.npz"))
    save_dual_curve(os.path.join(args.out, "w1.png"), history)
    print(f"estimate = {mean!r} +/- {std!r}")
    print(f"oracle = {oracle!r}" if oracle is not None else "oracle = n/a")
    return 0


def _training_images(settings: dict) -> list[np.ndarray]:
    if settings["data"] == "phantom":
        return [phantom(settings["image_size"], seed=[settings["seed"], i])
                for i in range(settings["n_images"])]
    return settings["data"]  # directory path; loader validates it


def _run_train_denoiser(settings: dict, args) -> int:
    from .reporting import save_training_curves

    spec = ConvNetSpec(channels=settings["channels"],
                       kernel_size=settings["kernel_size"],
                       activation=settings["activation"],
                       constraint=settings["constraint"],
                       norm_hw=(settings["norm_hw"], settings["norm_hw"]),
                       spline_K=settings["spline_K"],
                       spline_range=settings["spline_range"],
                       spline_preset=settings["spline_preset"],
                       spline_shared=settings["spline_shared"],
                       groupsort_size=settings["groupsort_size"],
                       prelu_init=settings["prelu_init"],
                       seed=settings["seed"])
    config = DenoiserTrainConfig(
        sigma=settings["sigma255"] / 255.0,
        patch_size=settings["patch_size"],
        n_patches=settings["n_patches"],
        epochs=settings["epochs"],
        batch_size=settings["batch_size"],
        eta=settings["eta"],
        lambda_=settings["lambda"],
        seed=settings["seed"],
        audit_pairs=settings["audit_pairs"],
        audit_hw=(settings["audit_hw"], settings["audit_hw"]),
        probe_patches=settings["probe_patches"])
    network, history = train_denoiser(
        _training_images(settings), spec, config,
        checkpoint_path=os.path.join(args.out, "denoiser.npz"),
        metrics_path=os.path.join(args.out, "metrics.csv"))
    write_aelr_csv(os.path.join(args.out, "aelr.csv"), network)
    save_training_curves(os.path.join(args.out, "training.png"), history)
    last = history[-1]
    print(f"epochs = {last['epoch']}")
    print(f"train_mse = {last['train_mse']!r}")
    print(f"lipschitz_audit = {last['lipschitz_audit']!r}")
    return 0


def _pnp_problem(settings: dict):
    """(truth, model, measurement) for the configured inverse problem."""
    if settings["image"] == "phantom":
        truth = phantom(settings["image_size"], seed=[settings["seed"], 11])
    else:
        truth = read_pgm(settings["image"])
    size = truth.shape
    if settings["problem"] == "blur":
        model = circular_blur(default_blur_kernel(), size)
    elif settings["problem"] == "mask":
        mask = settings["mask"] or list(range(size[1] // 4 + 1))
        model = masked_dft(mask, size)
    else:
        raise ValueError(f"unknown problem {settings['problem']!r}; "
                         f"choose blur | mask")
    y = model.apply(truth)
    sigma = settings["noise_sigma255"] / 255.0
    if sigma > 0:
        noise_rng = np.random.default_rng([settings["seed"], 13])
        y = y + sigma * noise_rng.normal(size=y.shape)
    return truth, model, y


def _pnp_base(settings: dict):
    kind = settings["denoiser"]
    if kind == "zero":
        return ZeroMap()
    if kind == "identity":
        return IdentityMap()
    if kind == "checkpoint":
        if not settings["checkpoint"]:
            raise ValueError("denoiser = checkpoint needs a checkpoint path")
        return ConvNet.load(settings["checkpoint"])
    raise ValueError(f"unknown denoiser {kind!r}; choose zero | identity | "
                     f"checkpoint")


def _run_pnp(settings: dict, args) -> int:
    from .reporting import save_image_panel, save_residual_curve

    truth, model, y = _pnp_problem(settings)
    base = _pnp_base(settings)
    alpha = settings["alpha"] if settings["alpha"] > 0 else None

    if args.certify is not None:
        perturb_rng = np.random.default_rng([settings["seed"], 17])
        y2 = y + settings["perturb255"] / 255.0 * perturb_rng.normal(
            size=y.shape)
        if args.certify == "prop3":
            denoiser = AveragedDenoiser(base, settings["beta"])
            report = stability_certificate_prop3(
                model, denoiser, y, y2, alpha=alpha,
                tol=settings["cert_tol"],
                max_iter=settings["cert_max_iter"])
        else:
            denoiser = ScaledDenoiser(base, settings["K"])
            report = stability_certificate_prop4(
                model, denoiser, y, y2, alpha=alpha,
                tol=settings["cert_tol"],
                max_iter=settings["cert_max_iter"])
        lines = report.lines()
        with atomic_open(os.path.join(args.out, "certificate.txt")) as fh:
            fh.write("\n".join(lines) + "\n")
        for line in lines:
            print(line)
        if report.refused:
            return 3
        return 0 if report.passed else 2

    denoiser = AveragedDenoiser(base, settings["beta"])
    reference = truth if settings["image"] == "phantom" else None
    run = pnp_fbs(y, model, denoiser, alpha=alpha, tol=settings["tol"],
                  max_iter=settings["max_iter"], reference=reference)
    recon = np.clip(run.x, 0.0, 1.0)
    write_pgm(os.path.join(args.out, "recon.pgm"), recon)
    write_run_csv(os.path.join(args.out, "run.csv"), run)
    save_residual_curve(os.path.join(args.out, "residuals.png"),
                        run.residuals, run.psnrs)
    save_image_panel(os.path.join(args.out, "recon.png"),
                     {"truth": truth, "backprojection": model.adjoint(y),
                      "reconstruction": recon})
    print(f"iterations = {run.iterations}")
    print(f"converged = {run.converged}")
    if run.psnrs is not None:
        print(f"psnr = {run.psnrs[-1]!r}")
    return 0


def _run_audit(settings: dict, args) -> int:
    rng = np.random.default_rng(settings["seed"])
    if settings["checkpoint"]:
        _, meta = load_archive(settings["checkpoint"])
        fmt = meta.get("format", "")
        if fmt == "lipspline-convnet-v1":
            network = ConvNet.load(settings["checkpoint"])
            kind = "conv"
            ratio = conv_lipschitz_audit(
                network, hw=(settings["hw"], settings["hw"]),
                n_pairs=settings["n_pairs"], rng=rng)
        elif fmt == "lipspline-network-v1":
            network = Network.load(settings["checkpoint"])
            kind = "dense"
            ratio = lipschitz_audit(network, n_pairs=settings["n_pairs"],
                                    rng=rng)
        else:
            raise ValueError(f"unrecognized checkpoint format {fmt!r}")
    else:
        network = build_network(_network_spec(settings, 1, 1))
        kind = "dense"
        ratio = lipschitz_audit(network, n_pairs=settings["n_pairs"], rng=rng)
    _write_csv(os.path.join(args.out, "audit.csv"),
               ["kind", "n_pairs", "lipschitz_audit"],
               [{"kind": kind, "n_pairs": settings["n_pairs"],
                 "lipschitz_audit": float(ratio)}])
    print(f"lipschitz_audit = {ratio!r}")
    return 0


def _load_any_network(path: str):
    _, meta = load_archive(path)
    fmt = meta.get("format", "")
    if fmt == "lipspline-convnet-v1":
        return ConvNet.load(path)
    if fmt == "lipspline-network-v1":
        return Network.load(path)
    raise ValueError(f"unrecognized checkpoint format {fmt!r}")


def inspect_spline(checkpoint: str, layer: int, neuron: int):
    """The (bank, spline, tv2, aelr) for one spline activation slot entry."""
    network = _load_any_network(checkpoint)
    if not 0 <= layer < len(network.activations):
        raise ValueError(f"layer {layer} out of range "
                         f"[0, {len(network.activations)})")
    bank = network.activations[layer]
    if not isinstance(bank, SplineBank):
        raise ValueError(f"activation slot {layer} holds no splines")
    spline = bank.spline(neuron)  # raises IndexError when out of range
    tv2 = float(bank.tv2_values()[neuron])
    aelr = float(bank.aelr_values()[neuron])
    return bank, spline, tv2, aelr


def _run_inspect_spline(settings: dict, args) -> int:
    from .reporting import save_spline_plot
    from .spline import dump_spline_csv

    if not settings["checkpoint"]:
        raise ValueError("inspect-spline needs a checkpoint path")
    _, spline, tv2, aelr = inspect_spline(
        settings["checkpoint"], settings["layer"], settings["neuron"])
    dump_spline_csv(spline, os.path.join(args.out, "spline.csv"))
    save_spline_plot(os.path.join(args.out, "spline.png"), spline)
    print(f"tv2 = {tv2!r}")
    print(f"aelr = {aelr!r}")
    return 0


_HANDLERS = {
    "fit1d": _run_fit1d,
    "w1": _run_w1,
    "train-denoiser": _run_train_denoiser,
    "pnp": _run_pnp,
    "audit": _run_audit,
    "inspect-spline": _run_inspect_spline,
}


# ---------------------------------------------------------------------------
# argument parsing and dispatch


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lipspline",
        description="1-Lipschitz spline networks: training, auditing, and "
                    "plug-and-play reconstruction.")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in _HANDLERS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None,
                       help="flat key=value config file")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        if name == "pnp":
            p.add_argument("--certify", choices=["prop3", "prop4"],
                           default=None,
                           help="emit a stability certificate instead of a "
                                "reconstruction")
        else:
            p.set_defaults(certify=None)
    return parser


def run(argv=None) -> int:
    """Parse argv, dispatch, and map failures to documented exit codes."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors itself
        # --help exits 0; any usage problem is a configuration error
        return 0 if exc.code == 0 else 1
    try:
        raw = parse_config_file(args.config) if args.config else {}
        settings = resolve_config(args.subcommand, raw)
        if args.seed is not None:
            settings["seed"] = args.seed
        os.makedirs(args.out, exist_ok=True)
        write_resolved_config(os.path.join(args.out, "config.resolved"),
                              args.subcommand, settings)
        return _HANDLERS[args.subcommand](settings, args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, IndexError, OSError, zipfile.BadZipFile) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
