"""Run configuration and atomic artifact writing.

Config grammar (documented for provenance diffing):

* one ``key = value`` pair per line (spaces around ``=`` optional);
* blank lines and lines starting with ``#`` are ignored;
* values are typed by the subcommand schema: int, float, bool
  (true/false/yes/no/1/0), str, or comma-separated int/float lists;
* unknown keys are rejected, duplicates are rejected.

``resolve_config`` fills every schema default, so the resolved copy written
next to run outputs is complete and can be replayed with ``--config``.

All artifact writers in the package go through :func:`atomic_open` /
:func:`atomic_write_text`: content lands in a temp file in the target
directory and is renamed into place, so readers never observe a partial file.
"""

from __future__ import annotations

import os
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass


# ---------------------------------------------------------------------------
# atomic writes


@contextmanager
def atomic_open(path: str, mode: str = "w", **kwargs):
    """Open a temp file for writing and rename it over ``path`` on success."""
    if not ("w" in mode or "x" in mode):
        raise ValueError("atomic_open is for writing")
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".partial-",
                               suffix="-" + os.path.basename(path))
    try:
        with os.fdopen(fd, mode, **kwargs) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def atomic_write_text(path: str, text: str) -> None:
    with atomic_open(path, "w") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# schemas


@dataclass(frozen=True)
class Field:
    """One config key: value kind, default, and a short description."""

    kind: str  # int | float | bool | str | ints | floats
    default: object
    help: str = ""


def _net_fields(activation="lls", constraint="spectral",
                preset="maxmin_pairing", spline_range=1.0):
    return {
        "activation": Field("str", activation,
                            "lls | relu | absolute_value | prelu | "
                            "groupsort | householder"),
        "constraint": Field("str", constraint, "spectral | orthonormal | none"),
        "spline_K": Field("int", 21, "coefficients per spline (odd)"),
        "spline_range": Field("float", spline_range,
                              "half-width of the nonlinear interval"),
        "spline_preset": Field("str", preset, "initial spline shape"),
        "spline_shared": Field("bool", False, "one spline per layer"),
        "groupsort_size": Field("int", 2, "group size for groupsort"),
        "prelu_init": Field("str", "absolute_value", "prelu slope preset"),
    }


def _optim_fields(eta, batch_size, epochs):
    return {
        "eta": Field("float", eta, "base Adam learning rate"),
        "batch_size": Field("int", batch_size, ""),
        "epochs": Field("int", epochs, ""),
        "lambda": Field("float", 0.0, "second-order TV penalty weight"),
        "seed": Field("int", 0, "root seed for all run randomness"),
    }


SCHEMAS: dict[str, dict[str, Field]] = {
    "fit1d": {
        "target": Field("str", "f3", "f1_stand_in | f2_stand_in | f3"),
        "depth": Field("int", 2, "number of hidden layers"),
        "width": Field("int", 16, "neurons per hidden layer"),
        "init": Field("str", "kaiming", "kaiming | orthogonal"),
        "audit_pairs": Field("int", 10_000, "pairs per epoch audit"),
        **_net_fields(),
        **_optim_fields(eta=1e-3, batch_size=10, epochs=100),
    },
    "w1": {
        "pair": Field("str", "shifted", "shifted | scaled | mixtures"),
        "dim": Field("int", 1, "sample dimension"),
        "shift": Field("float", 3.0, "mean offset for the shifted pair"),
        "scale2": Field("float", 2.0, "second std for the scaled pair"),
        "depth": Field("int", 3, "number of hidden layers"),
        "width": Field("int", 16, "neurons per hidden layer"),
        "init": Field("str", "orthogonal", "kaiming | orthogonal"),
        "n_train": Field("int", 4096, "training samples per distribution"),
        "n_mc": Field("int", 20_000, "Monte Carlo samples per estimate"),
        "repeats": Field("int", 5, "fresh-sample estimate repeats"),
        "audit_pairs": Field("int", 2_000, "pairs per epoch audit"),
        **_net_fields(activation="groupsort", constraint="orthonormal"),
        **_optim_fields(eta=5e-3, batch_size=256, epochs=25),
    },
    "train-denoiser": {
        "data": Field("str", "phantom",
                      "directory of .pgm images, or 'phantom' for synthetic"),
        "n_images": Field("int", 8, "synthetic images when data = phantom"),
        "image_size": Field("int", 64, "synthetic image side"),
        "sigma255": Field("float", 10.0, "noise level on the 0..255 scale"),
        "channels": Field("ints", [1, 16, 16, 1], "conv channel counts"),
        "kernel_size": Field("int", 3, "odd conv kernel side"),
        "norm_hw": Field("int", 32, "spectral-normalization image side"),
        "patch_size": Field("int", 32, ""),
        "n_patches": Field("int", 512, ""),
        "audit_pairs": Field("int", 10_000, "pairs per epoch audit"),
        "audit_hw": Field("int", 8, "audit image side"),
        "probe_patches": Field("int", 128, "patches for the probe MSEs"),
        **_net_fields(preset="identity"),
        **_optim_fields(eta=4e-3, batch_size=16, epochs=8),
    },
    "pnp": {
        "problem": Field("str", "blur", "blur | mask"),
        "image": Field("str", "phantom", "'phantom' or a .pgm path"),
        "image_size": Field("int", 64, "synthetic image side"),
        "mask": Field("ints", [], "sampled DFT columns; empty = low quarter"),
        "noise_sigma255": Field("float", 0.0, "measurement noise, 0..255"),
        "denoiser": Field("str", "zero", "zero | identity | checkpoint"),
        "checkpoint": Field("str", "", "denoiser checkpoint (.npz)"),
        "beta": Field("float", 0.5, "averaging weight D = beta*R+(1-beta)*Id"),
        "K": Field("float", 0.9, "Lipschitz scale for --certify prop4"),
        "alpha": Field("float", 0.0, "step size; 0 = 1/||H'H||"),
        "tol": Field("float", 1e-7, "relative fixed-point tolerance"),
        "cert_tol": Field("float", 1e-9, "fixed-point tolerance for --certify"),
        "max_iter": Field("int", 1000, ""),
        "cert_max_iter": Field("int", 20_000, "iteration cap for --certify"),
        "perturb255": Field("float", 1.0,
                            "second-measurement offset for --certify"),
        "seed": Field("int", 0, "root seed for all run randomness"),
    },
    "audit": {
        "checkpoint": Field("str", "", "network checkpoint; empty = fresh"),
        "depth": Field("int", 2, "hidden layers for a fresh network"),
        "width": Field("int", 16, "neurons per hidden layer"),
        "init": Field("str", "kaiming", "kaiming | orthogonal"),
        "n_pairs": Field("int", 10_000, ""),
        "hw": Field("int", 8, "image side for conv checkpoints"),
        "seed": Field("int", 0, "root seed for all run randomness"),
        **_net_fields(),
    },
    "inspect-spline": {
        "checkpoint": Field("str", "", "network checkpoint (.npz)"),
        "layer": Field("int", 0, "activation slot index"),
        "neuron": Field("int", 0, "spline index inside the slot"),
        "seed": Field("int", 0, "unused; kept for uniform provenance"),
    },
}


# ---------------------------------------------------------------------------
# parsing and resolution


def parse_config_text(text: str) -> dict[str, str]:
    """Raw key -> value strings from the flat config grammar."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"line {lineno}: expected 'key = value', "
                             f"got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        if key in raw:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value.strip()
    return raw


def parse_config_file(path: str) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


_BOOL = {"true": True, "yes": True, "1": True,
         "false": False, "no": False, "0": False}


def _coerce(key: str, field: Field, raw: str):
    try:
        if field.kind == "int":
            return int(raw)
        if field.kind == "float":
            return float(raw)
        if field.kind == "bool":
            return _BOOL[raw.lower()]
        if field.kind == "ints":
            return [int(tok) for tok in raw.split(",") if tok.strip() != ""]
        if field.kind == "floats":
            return [float(tok) for tok in raw.split(",") if tok.strip() != ""]
        return raw
    except (ValueError, KeyError):
        raise ValueError(f"config key {key!r} expects a {field.kind} "
                         f"value, got {raw!r}") from None


def resolve_config(subcommand: str, raw: dict[str, str]) -> dict:
    """Typed settings with every default filled; unknown keys rejected."""
    if subcommand not in SCHEMAS:
        raise ValueError(f"unknown subcommand {subcommand!r}; choose from "
                         f"{sorted(SCHEMAS)}")
    schema = SCHEMAS[subcommand]
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ValueError(f"unknown config keys for {subcommand}: "
                         f"{', '.join(unknown)}")
    resolved = {}
    for key, field in schema.items():
        if key in raw:
            resolved[key] = _coerce(key, field, raw[key])
        else:
            resolved[key] = field.default
    return resolved


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


def format_config(subcommand: str, resolved: dict) -> str:
    """Render a resolved config; replayable via ``--config``."""
    lines = [f"# resolved configuration for subcommand: {subcommand}"]
    for key in sorted(resolved):
        lines.append(f"{key} = {_format_value(resolved[key])}")
    return "\n".join(lines) + "\n"


def write_resolved_config(path: str, subcommand: str, resolved: dict) -> None:
    atomic_write_text(path, format_config(subcommand, resolved))
