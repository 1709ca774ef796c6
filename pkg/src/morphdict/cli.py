"""``morphdict`` command-line entry point.

Subcommands::

    train-nmf       sparse NMF on a split, save the factorization and a report row
    train-asymae    train the auto-encoder, save checkpoint, trace and report row
    eval            recompute the three metrics for a saved artifact
    export-atoms    atom montage (PGM) of a saved artifact
    approx-dilate   per-image montage rows: input | dilation | part-based dilation
    grad-check      finite-difference check of the tiny auto-encoder

Settings come from a flat ``key = value`` file (``--config``) and are
overridden by command-line flags.  Exit codes: 0 success, 1 usage error,
2 I/O error, 3 numerical error.
"""

from __future__ import annotations

import argparse
import os
import struct
import sys
import tempfile
import warnings
from dataclasses import dataclass

import numpy as np

from . import asymae as ae
from .dataset import DATA_DIR_ENV, IdxFormatError, IdxLengthError, load_split
from .evaluation import MetricsReport, emit_report, evaluate, montage, pgm_bytes
from .morphology import Dictionary, dilate, disk_se
from .nmf import (DICT_MAGIC, NmfConfig, encode_offline, factorization_from_bytes,
                  factorization_to_bytes, factorize)
from .nn.checkpoint import NET_MAGIC

EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 1, 2, 3

# key -> (default, type, help); None means "unset"
SETTINGS = {
    "data_dir": (None, str, f"directory with IDX files (falls back to ${DATA_DIR_ENV})"),
    "dataset": ("mnist", str, "data set name used in reports and artifact names"),
    "split": (None, str, "split to train/evaluate on (nmf/eval: test, asymae: train)"),
    "eval_split": ("test", str, "split the auto-encoder is evaluated on"),
    "limit": (0, int, "use only the first N images of the training split (0 = all)"),
    "eval_limit": (0, int, "use only the first N images of the evaluation split (0 = all)"),
    "seed": (0, int, "random seed"),
    "out": ("runs", str, "output directory"),
    "precision": (32, int, "auto-encoder float precision, 32 or 64"),
    "radius": (1.0, float, "disk radius of the dilation"),
    "workers": (1, int, "threads for per-image evaluation"),
    "k": (100, int, "number of atoms"),
    "s_h": (0.6, float, "NMF code sparseness target (none = unconstrained)"),
    "s_w": (None, float, "NMF atom sparseness target (none = unconstrained)"),
    "max_iter": (500, int, "NMF iteration cap"),
    "tol": (1e-5, float, "NMF relative-decrease stopping threshold"),
    "p": (0.05, float, "auto-encoder target mean activation"),
    "beta": (0.001, float, "auto-encoder sparsity weight"),
    "epochs": (50, int, "auto-encoder epoch budget"),
    "batch_size": (64, int, "auto-encoder mini-batch size"),
    "lr": (1e-3, float, "Adam learning rate"),
    "patience": (5, int, "early-stop patience in epochs (0 = off)"),
    "codes": ("auto", str, "NMF eval codes: stored, encode, or auto (stored iff sizes match)"),
    "cols": (10, int, "montage columns"),
    "indices": ("0,1,2,3,4,5,6,7,8,9", str, "comma-separated image indices"),
    "corrupt": (0.0, float, "grad-check fault injection: relative error added to one gradient"),
}


class UsageError(Exception):
    pass


class NumericError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in SETTINGS:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = value
    return values


def _convert(key, raw):
    default, typ, _ = SETTINGS[key]
    if raw is None or (isinstance(raw, str) and raw.lower() in ("none", "")):
        return None
    try:
        return typ(raw)
    except ValueError:
        raise UsageError(f"invalid value for {key}: {raw!r}") from None


@dataclass
class RunConfig:
    command: str
    values: dict

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key) from None


def build_config(command, args) -> RunConfig:
    values = {k: v[0] for k, v in SETTINGS.items()}
    if args.config:
        if not os.path.exists(args.config):
            raise FileNotFoundError(f"config file not found: {args.config}")
        values.update({k: _convert(k, v) for k, v in read_config(args.config).items()})
    for key in SETTINGS:
        raw = getattr(args, key, None)
        if raw is not None:
            values[key] = _convert(key, raw)
    if values["data_dir"] is None:
        values["data_dir"] = os.environ.get(DATA_DIR_ENV)
    if values["precision"] not in (32, 64):
        raise UsageError("precision must be 32 or 64")
    if values["radius"] is None or values["radius"] < 0:
        raise UsageError("radius must be non-negative")
    if values["workers"] is None or values["workers"] < 1:
        raise UsageError("workers must be >= 1")
    return RunConfig(command, values)


# --- io helpers ---------------------------------------------------------

def _atomic_write(path, data: bytes | str):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    mode = "w" if isinstance(data, str) else "wb"
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", prefix=".tmp-")
    try:
        with os.fdopen(fd, mode) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _out(cfg, sub, name):
    return os.path.join(cfg.out, sub, name)


def _load_images(cfg, split, limit):
    if not cfg.data_dir:
        raise FileNotFoundError(f"no data directory: set data_dir or ${DATA_DIR_ENV}")
    data = load_split(cfg.data_dir, split, name=cfg.dataset)
    if limit:
        data = data.subset(np.arange(min(limit, len(data))))
    return data


def _load_artifact(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"artifact not found: {path}")
    with open(path, "rb") as f:
        raw = f.read()
    try:
        if raw[:4] == DICT_MAGIC:
            return "nmf", factorization_from_bytes(raw)
        if raw[:4] == NET_MAGIC:
            return "asymae", ae.model_from_bytes(raw)
    except (ValueError, KeyError, struct.error) as exc:
        raise OSError(f"{path}: corrupt artifact: {exc}") from exc
    raise OSError(f"{path}: unknown container magic {raw[:4]!r}")


def _nmf_dictionary(W, image_shape):
    return Dictionary.from_matrix(W, image_shape)


def _leaky(alpha):
    return lambda z: np.where(z >= 0, z, alpha * z)


def _artifact_views(kind, artifact, X, image_shape, cfg):
    """(codes, reconstruction, dictionary, offset, activation, label) for a data matrix."""
    if kind == "nmf":
        H, W = artifact
        mode = cfg.codes
        if mode not in ("auto", "stored", "encode"):
            raise UsageError(f"codes must be auto, stored or encode, got {mode!r}")
        if mode == "stored" or (mode == "auto" and H.shape[0] == X.shape[0]):
            if H.shape[0] != X.shape[0]:
                raise UsageError("stored codes do not match the evaluation set size")
            codes = H
        else:
            codes = encode_offline(X, W)
        return codes, codes @ W, _nmf_dictionary(W, image_shape), None, None, "sparse-nmf"
    model = artifact
    codes = ae.encode(model, X)
    recon = ae.decode(model, codes)
    alpha = model.decoder.layers[1].alpha
    return (codes, recon, ae.atoms(model), model.decoder_bias.astype(np.float64),
            _leaky(alpha), "asymae")


def _report(label, cfg, X, image_shape, views) -> MetricsReport:
    codes, recon, dictionary, offset, activation, _ = views
    return evaluate(label, cfg.dataset, X.reshape(-1, *image_shape), codes, recon, dictionary,
                    disk_se(cfg.radius), offset, activation, workers=cfg.workers)


# --- commands -----------------------------------------------------------

def cmd_train_nmf(cfg: RunConfig):
    data = _load_images(cfg, cfg.split or "test", cfg.limit)
    X = data.as_matrix()
    nmf_cfg = NmfConfig(k=cfg.k, s_H=cfg.s_h, s_W=cfg.s_w, max_iter=cfg.max_iter,
                        tol=cfg.tol, seed=cfg.seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fac = factorize(X, nmf_cfg)
    if not np.isfinite(fac.objective):
        raise NumericError("factorization produced a non-finite objective")
    name = f"sparse-nmf-{cfg.dataset}-k{cfg.k}-seed{cfg.seed}"
    views = _artifact_views("nmf", (fac.H, fac.W), X, data.image_shape, cfg)
    report = _report("sparse-nmf", cfg, X, data.image_shape, views)
    csv_text = emit_report([report])
    _atomic_write(_out(cfg, "artifacts", name + ".mdic"), factorization_to_bytes(fac.H, fac.W))
    _atomic_write(_out(cfg, "trace", name + ".csv"), "iteration,objective\n" + "".join(
        f"{i},{v:.17g}\n" for i, v in enumerate(fac.objective_trace)))
    _atomic_write(_out(cfg, "reports", name + ".csv"), csv_text)
    sys.stdout.write(csv_text)
    return 0


def cmd_train_asymae(cfg: RunConfig):
    train_set = _load_images(cfg, cfg.split or "train", cfg.limit)
    test_set = _load_images(cfg, cfg.eval_split, cfg.eval_limit)
    ae_cfg = ae.AsymAeConfig(k=cfg.k, p=cfg.p, beta=cfg.beta, epochs=cfg.epochs,
                             batch_size=cfg.batch_size, lr=cfg.lr, seed=cfg.seed,
                             early_stop_patience=cfg.patience or None, precision=cfg.precision)
    model = ae.build_model(ae_cfg, train_set.image_shape)
    try:
        model, trace = ae.train(model, train_set.as_matrix(), ae_cfg)
    except ae.TrainingDivergedError as exc:
        raise NumericError(str(exc)) from exc
    name = f"asymae-{cfg.dataset}-k{cfg.k}-seed{cfg.seed}"
    X = test_set.as_matrix()
    views = _artifact_views("asymae", model, X, test_set.image_shape, cfg)
    report = _report("asymae", cfg, X, test_set.image_shape, views)
    csv_text = emit_report([report])
    _atomic_write(_out(cfg, "artifacts", name + ".mnet"), ae.model_to_bytes(model))
    _atomic_write(_out(cfg, "trace", name + ".csv"), ae.trace_to_csv(trace))
    _atomic_write(_out(cfg, "reports", name + ".csv"), csv_text)
    sys.stdout.write(csv_text)
    return 0


def cmd_eval(cfg: RunConfig, artifact_path):
    kind, artifact = _load_artifact(artifact_path)
    data = _load_images(cfg, cfg.split or "test", cfg.limit)
    X = data.as_matrix()
    views = _artifact_views(kind, artifact, X, data.image_shape, cfg)
    report = _report(views[-1], cfg, X, data.image_shape, views)
    csv_text = emit_report([report])
    stem = os.path.splitext(os.path.basename(artifact_path))[0]
    _atomic_write(_out(cfg, "reports", f"eval-{stem}-r{cfg.radius:g}.csv"), csv_text)
    sys.stdout.write(csv_text)
    return 0


def _artifact_atoms(kind, artifact, image_shape=None):
    if kind == "nmf":
        W = artifact[1]
        from ._validation import square_shape
        return _nmf_dictionary(W, image_shape or square_shape(W.shape[1]))
    return ae.atoms(artifact)


def cmd_export_atoms(cfg: RunConfig, artifact_path):
    kind, artifact = _load_artifact(artifact_path)
    if cfg.cols < 1:
        raise UsageError("cols must be >= 1")
    dictionary = _artifact_atoms(kind, artifact)
    stem = os.path.splitext(os.path.basename(artifact_path))[0]
    path = _out(cfg, "montages", f"atoms-{stem}.pgm")
    _atomic_write(path, pgm_bytes(montage(dictionary.atoms, cfg.cols)))
    print(path)
    return 0


def cmd_approx_dilate(cfg: RunConfig, artifact_path):
    kind, artifact = _load_artifact(artifact_path)
    try:
        indices = [int(s) for s in (cfg.indices or "").split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"invalid indices: {cfg.indices!r}") from None
    if not indices:
        raise UsageError("no image indices given")
    data = _load_images(cfg, cfg.split or "test", cfg.limit)
    if min(indices) < 0 or max(indices) >= len(data):
        raise UsageError(f"image index out of range (0..{len(data) - 1})")
    X_all = data.as_matrix()
    se = disk_se(cfg.radius)
    if kind == "nmf":
        H, W = artifact
        full = H.shape[0] == X_all.shape[0] and cfg.codes != "encode"
        codes = H[indices] if full else encode_offline(X_all[indices], W)
        dictionary = _nmf_dictionary(W, data.image_shape)
        from .evaluation import part_based_dilation
        approx = part_based_dilation(codes, dictionary, se)
    else:
        codes = ae.encode(artifact, X_all[indices])
        from .evaluation import part_based_dilation
        approx = part_based_dilation(codes, ae.atoms(artifact), se,
                                     artifact.decoder_bias.astype(np.float64),
                                     _leaky(artifact.decoder.layers[1].alpha))
    images = data.images[indices]
    tiles = np.stack([images, dilate(images, se), np.clip(approx, 0, 1)], axis=1)
    stem = os.path.splitext(os.path.basename(artifact_path))[0]
    path = _out(cfg, "montages", f"dilation-{stem}-r{cfg.radius:g}.pgm")
    _atomic_write(path, pgm_bytes(montage(tiles.reshape(-1, *data.image_shape), 3,
                                          normalize=False)))
    print(path)
    return 0


GRAD_CHECK_THRESHOLD = {64: 1e-5, 32: 1e-3}


def cmd_grad_check(cfg: RunConfig):
    tiny = ae.tiny_config(seed=cfg.seed, precision=cfg.precision)
    model = ae.build_model(tiny, (8, 8))
    x = np.random.default_rng(cfg.seed).random((4, 64))
    worst, per = ae.model_grad_check(model, x, eps=1e-5, corrupt=cfg.corrupt or 0.0,
                                     return_details=True)
    threshold = GRAD_CHECK_THRESHOLD[cfg.precision]
    for name, err in per.items():
        print(f"{name:24s} {err:.3e}")
    ok = worst <= threshold
    print(f"worst relative error {worst:.3e} (threshold {threshold:g}, "
          f"{cfg.precision}-bit): {'PASS' if ok else 'FAIL'}")
    return 0 if ok else EXIT_NUMERIC


# --- argument parsing ---------------------------------------------------

def _parser():
    parser = _Parser(prog="morphdict", description=__doc__.split("\n\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value settings file")
    common.add_argument("--seed")
    common.add_argument("--out")
    common.add_argument("--precision")
    common.add_argument("--radius")
    common.add_argument("--workers")
    common.add_argument("--data-dir", dest="data_dir")
    for key in ("dataset", "split", "eval_split", "limit", "eval_limit", "k", "s_h", "s_w",
                "max_iter", "tol", "p", "beta", "epochs", "batch_size", "lr", "patience",
                "codes", "cols", "indices"):
        common.add_argument("--" + key.replace("_", "-"), dest=key, help=SETTINGS[key][2])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train-nmf", parents=[common], help="sparse NMF")
    sub.add_parser("train-asymae", parents=[common], help="asymmetric auto-encoder")
    for name in ("eval", "export-atoms", "approx-dilate"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("artifact", help="saved .mdic or .mnet artifact")
    g = sub.add_parser("grad-check", parents=[common])
    g.add_argument("--corrupt", dest="corrupt", help=SETTINGS["corrupt"][2])
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = build_config(args.command, args)
        if args.command == "train-nmf":
            return cmd_train_nmf(cfg)
        if args.command == "train-asymae":
            return cmd_train_asymae(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.artifact)
        if args.command == "export-atoms":
            return cmd_export_atoms(cfg, args.artifact)
        if args.command == "approx-dilate":
            return cmd_approx_dilate(cfg, args.artifact)
        return cmd_grad_check(cfg)
    except UsageError as exc:
        print(f"morphdict: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, IdxFormatError, IdxLengthError) as exc:
        print(f"morphdict: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, FloatingPointError, ArithmeticError) as exc:
        print(f"morphdict: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
