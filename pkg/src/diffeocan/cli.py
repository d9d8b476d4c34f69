"""Command-line entry point: ``diffeocan <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data or parse error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .bench import (
    BenchError,
    diffeonn_classifier,
    diffeonn_segmenter,
    invariance_check,
    naive_classifier,
    naive_segmenter,
    run_benchmark,
)
from .canon import CanonError, canonicalise, reverse_segmentation, write_artefacts
from .config import ConfigError, RunConfig, load_config
from .data import (
    DataError,
    DatasetSplit,
    images,
    labels,
    load_mnist_idx,
    make_transformed_set,
    mnist_paths_from_env,
    partition,
    read_manifest,
    squares_split,
    write_manifest,
)
from .energy import EnergyError, EnergyNets, EnergyWeights
from .gradcheck import format_table, run_all
from .io import FormatError, read_pgm, write_pgm
from .nets import Discriminator, TrainReport, VaeNet, train_discriminator, train_inner, train_vae
from .nets.models import Classifier, InnerModel, Segmenter

log = logging.getLogger("diffeocan")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOL = 1e-3


class UsageError(Exception):
    pass


class NumericalError(Exception):
    pass


# ------------------------------------------------------------------ pipeline steps

def build_datasets(cfg: RunConfig, seed: int, mnist_files: tuple | None = None) -> tuple:
    """(canonical split, transformed split) for the configured dataset."""
    d = cfg.data
    if d.kind == "squares":
        canonical = squares_split(d.n_train, d.n_val, d.n_test, d.squares(), seed)
    else:
        files = mnist_files or _mnist_files(d.mnist_dir)
        pool = load_mnist_idx(*files).train
        canonical = partition(pool, {"train": d.n_train, "val": d.n_val, "test": d.n_test}, seed)
    return canonical, make_transformed_set(canonical, d.rbf.build(seed))


def _mnist_files(mnist_dir) -> tuple:
    if mnist_dir:
        base = Path(mnist_dir)
        for stem in ("train", "t10k"):
            for ext in ("", ".gz"):
                pair = (base / f"{stem}-images-idx3-ubyte{ext}", base / f"{stem}-labels-idx1-ubyte{ext}")
                if all(p.exists() for p in pair):
                    return pair
        raise DataError(f"no MNIST IDX files found in {base}")
    found = mnist_paths_from_env()
    if found is None:
        raise DataError("MNIST data needs data.mnist_dir or DIFFEOCAN_MNIST_DIR")
    return found


def fit_vae(cfg: RunConfig, split: DatasetSplit, seed: int, report: TrainReport | None = None) -> VaeNet:
    s = cfg.train_vae
    return train_vae(images(split.train), s.build(seed), latent_dim=s.latent_dim,
                     kl_weight=s.kl_weight, report=report)


def fit_critic(cfg: RunConfig, split: DatasetSplit, seed: int,
               report: TrainReport | None = None) -> Discriminator:
    s = cfg.train_disc
    # fresh warps, independent of the ones used for the transformed test set
    rbf = cfg.data.rbf.build(seed + 1000)
    return train_discriminator(images(split.train), rbf, s.build(seed), mu=s.mu,
                               real_jitter=s.real_jitter, report=report)


def fit_inner(cfg: RunConfig, canonical: DatasetSplit, seed: int, augmented_with: DatasetSplit | None = None,
              report: TrainReport | None = None) -> InnerModel:
    train = list(canonical.train)
    if augmented_with is not None:
        train += augmented_with.train
    kind = "segmenter" if cfg.data.kind == "squares" else "classifier"
    return train_inner(images(train), labels(train), cfg.train_inner.build(seed), kind=kind, report=report)


MODEL_FILES = {"vae": "vae.dcnw", "disc": "disc.dcnw", "inner": "inner.dcnw", "augmented": "inner_aug.dcnw"}


def save_model(models_dir, name: str, net, arch: dict) -> Path:
    out = Path(models_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / MODEL_FILES[name]
    net.save(path)
    path.with_suffix(".json").write_text(json.dumps(arch, indent=2, sort_keys=True) + "\n")
    return path


def load_model(models_dir, name: str):
    path = Path(models_dir) / MODEL_FILES[name]
    meta_path = path.with_suffix(".json")
    if not path.exists():
        raise DataError(f"missing model checkpoint: {path}")
    if not meta_path.exists():
        raise DataError(f"missing architecture file: {meta_path}")
    arch = json.loads(meta_path.read_text())
    shape = tuple(arch["shape"])
    kind = arch["type"]
    if kind == "vae":
        net = VaeNet(shape, latent_dim=arch["latent_dim"], kl_weight=arch["kl_weight"])
    elif kind == "disc":
        net = Discriminator(shape)
    elif kind == "segmenter":
        net = Segmenter(tuple(arch.get("channels", (16, 32, 64))))
    elif kind == "classifier":
        net = Classifier(shape, n_classes=arch["n_classes"])
    else:
        raise DataError(f"{meta_path}: unknown model type {kind!r}")
    try:
        net.load(path)
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: checkpoint does not match its architecture ({exc})") from None
    return InnerModel(kind, net) if kind in ("segmenter", "classifier") else net


def arch_of(cfg: RunConfig, name: str, model=None) -> dict:
    shape = [cfg.data.size, cfg.data.size]
    if name == "vae":
        return {"type": "vae", "shape": shape, "latent_dim": cfg.train_vae.latent_dim,
                "kl_weight": cfg.train_vae.kl_weight}
    if name == "disc":
        return {"type": "disc", "shape": shape}
    if model.kind == "segmenter":
        return {"type": "segmenter", "shape": shape, "channels": list(model.net.channels)}
    return {"type": "classifier", "shape": shape, "n_classes": model.net.n_classes}


def energy_nets(models_dir, weights: EnergyWeights, required: bool = True) -> EnergyNets:
    """Load the nets the weights need; with ``required=False`` missing ones are dropped."""
    nets = EnergyNets()
    for name, lam in (("vae", weights.lambda_vae), ("disc", weights.lambda_adv)):
        if lam <= 0:
            continue
        try:
            setattr(nets, name, load_model(models_dir, name))
        except DataError:
            if required:
                raise
    return nets


def _without_missing(weights: EnergyWeights, nets: EnergyNets) -> EnergyWeights:
    return EnergyWeights(weights.lambda_vae if nets.vae is not None else 0.0,
                         weights.lambda_adv if nets.disc is not None else 0.0,
                         weights.lambda_grad, weights.lambda_jac)


# ------------------------------------------------------------------ commands

def _data_dirs(args, cfg) -> tuple:
    root = Path(args.data or cfg.paths.data)
    return root / "canonical" / "manifest.jsonl", root / "transformed" / "manifest.jsonl"


def _load_data(args, cfg) -> tuple:
    can, tr = _data_dirs(args, cfg)
    return read_manifest(can), read_manifest(tr)


def cmd_gen_data(args, cfg, seed):
    out = Path(args.out or cfg.paths.data)
    files = None
    if cfg.data.kind == "mnist" and args.input:
        files = _mnist_files(args.input)
    canonical, transformed = build_datasets(cfg, seed, files)
    write_manifest(canonical, out / "canonical")
    write_manifest(transformed, out / "transformed")
    counts = {name: len(part) for name, part in canonical.parts()}
    print(json.dumps({"out": str(out), "counts": counts}, sort_keys=True))


def _train_cmd(name):
    def run(args, cfg, seed):
        canonical, transformed = _load_data(args, cfg)
        report = TrainReport()
        if name == "vae":
            key, model = name, fit_vae(cfg, canonical, seed, report)
        elif name == "disc":
            key, model = name, fit_critic(cfg, canonical, seed, report)
        else:
            key = "augmented" if args.augmented else "inner"
            model = fit_inner(cfg, canonical, seed, transformed if args.augmented else None, report)
        net = model.net if isinstance(model, InnerModel) else model
        path = save_model(args.out or cfg.paths.models, key, net, arch_of(cfg, key, model))
        _write_report(path, report)
    return run


def _write_report(path: Path, report: TrainReport):
    rec = {"losses": [float(x) for x in report.losses], "flags": report.flags}
    path.with_suffix(".train.json").write_text(json.dumps(rec, indent=1) + "\n")
    print(json.dumps({"checkpoint": str(path), "final_loss": rec["losses"][-1] if rec["losses"] else None,
                      "flags": report.flags}))


def _inputs(args) -> list:
    if not args.input:
        raise UsageError("--input is required")
    return [Path(p) for p in args.input]


def cmd_canonicalise(args, cfg, seed):
    ccfg = cfg.canon.build(seed, args.steps)
    models = args.models or cfg.paths.models
    nets = energy_nets(models, ccfg.weights, required=ccfg.steps > 0)
    if ccfg.steps == 0:
        # identity result either way; missing nets only drop their terms from the trace
        ccfg = replace(ccfg, weights=_without_missing(ccfg.weights, nets))
    out = Path(args.out or cfg.paths.out)
    for path in _inputs(args):
        res = canonicalise(read_pgm(path), nets, ccfg)
        write_artefacts(res, out, path.stem)
        print(json.dumps({"input": str(path), "best_step": res.best_step,
                          "fell_back_to_identity": res.fell_back_to_identity,
                          "initial": res.initial.total, "best": res.best.total}))


def _wrapper_cmd(kind):
    def run(args, cfg, seed):
        ccfg = cfg.canon.build(seed, args.steps)
        models = args.models or cfg.paths.models
        inner = load_model(models, "inner")
        if inner.kind != kind:
            raise DataError(f"the inner model in {models} is a {inner.kind}, not a {kind}")
        nets = energy_nets(models, ccfg.weights)
        out = Path(args.out or cfg.paths.out)
        out.mkdir(parents=True, exist_ok=True)
        for path in _inputs(args):
            res = canonicalise(read_pgm(path), nets, ccfg)
            if kind == "segmenter":
                mask = reverse_segmentation(inner(res.x_c), res)
                write_pgm(out / f"{path.stem}_mask.pgm", mask.astype(np.float32))
                print(json.dumps({"input": str(path), "mask": str(out / f"{path.stem}_mask.pgm"),
                                  "fell_back_to_identity": res.fell_back_to_identity}))
            else:
                logits = inner(res.x_c)
                rec = {"input": str(path), "class": int(np.argmax(logits)),
                       "logits": [round(float(z), 6) for z in logits],
                       "fell_back_to_identity": res.fell_back_to_identity}
                (out / f"{path.stem}_class.json").write_text(json.dumps(rec, sort_keys=True) + "\n")
                print(json.dumps(rec))
    return run


def build_predictors(models_dir, ccfg) -> tuple:
    inner = load_model(models_dir, "inner")
    augmented = load_model(models_dir, "augmented")
    nets = energy_nets(models_dir, ccfg.weights)
    if inner.kind == "segmenter":
        models = {"naive": naive_segmenter(inner), "diffeonn": diffeonn_segmenter(inner, nets, ccfg),
                  "augmented": naive_segmenter(augmented)}
        return models, "segmentation"
    models = {"naive": naive_classifier(inner), "diffeonn": diffeonn_classifier(inner, nets, ccfg),
              "augmented": naive_classifier(augmented)}
    return models, "classification"


def cmd_bench(args, cfg, seed):
    ccfg = cfg.canon.build(seed, args.steps)
    _, transformed = _load_data(args, cfg)
    models, task = build_predictors(args.models or cfg.paths.models, ccfg)
    test = transformed.test[:cfg.bench.n_test]
    report = run_benchmark(models, test, task, out_dir=args.out or cfg.paths.out,
                           prefix=cfg.profile, jobs=args.jobs or cfg.bench.jobs)
    metric = "iou" if task == "segmentation" else "acc"
    print(json.dumps({f"mean_{metric}": report.means(metric)}, sort_keys=True))


def cmd_invariance(args, cfg, seed):
    ccfg = cfg.canon.build(seed, args.steps)
    canonical, transformed = _load_data(args, cfg)
    nets = energy_nets(args.models or cfg.paths.models, ccfg.weights)
    by_id = {s.id: s for s in canonical.test}
    pairs, ids = [], []
    for t in transformed.test:
        src = by_id.get(t.id[:-2] if t.id.endswith("-t") else None)
        if src is not None:
            pairs.append((src.image, t.image))
            ids.append(src.id)
        if len(pairs) == cfg.bench.n_pairs:
            break
    rep = invariance_check(pairs, nets, ccfg, out_dir=args.out or cfg.paths.out, ids=ids,
                           jobs=args.jobs or cfg.bench.jobs)
    print(json.dumps(rep.summary(), sort_keys=True))


def cmd_gradcheck(args, cfg, seed):
    table = run_all(points=args.points, seed=seed)
    text = format_table(table, GRADCHECK_TOL)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.txt").write_text(text + "\n")
    worst = max(table.values())
    if not worst < GRADCHECK_TOL:
        raise NumericalError(f"gradient check failed: worst relative error {worst:.3e}")


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate canonical and transformed datasets"),
    "train-vae": (_train_cmd("vae"), "train the VAE similarity model"),
    "train-disc": (_train_cmd("disc"), "train the adversarial critic"),
    "train-inner": (_train_cmd("inner"), "train the inner segmenter or classifier"),
    "canonicalise": (cmd_canonicalise, "canonicalise PGM images and write x_c, maps and traces"),
    "segment": (_wrapper_cmd("segmenter"), "equivariant segmentation of PGM images"),
    "classify": (_wrapper_cmd("classifier"), "invariant classification of PGM images"),
    "bench": (cmd_bench, "naive / DiffeoNN / augmented benchmark on the transformed test set"),
    "invariance-check": (cmd_invariance, "energy gaps of canonicalised (x, g'.x) pairs"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of every autodiff primitive"),
}


# ------------------------------------------------------------------ parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="diffeocan", description="Diffeomorphism canonicalisation toolkit.")
    parser.add_argument("--version", action="version", version=f"diffeocan {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", help="JSON run config (unknown keys are rejected)")
        p.add_argument("--profile", choices=("synthetic", "mnist"), help="built-in defaults to start from")
        p.add_argument("--seed", type=int, help="overrides the config seed and DIFFEOCAN_SEED")
        p.add_argument("--out", help="output directory")
        p.add_argument("--jobs", type=int, help="worker threads (1 is the reproducible reference)")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        if name not in ("gen-data", "gradcheck"):
            p.add_argument("--data", help="dataset root written by gen-data")
            p.add_argument("--models", help="directory holding the checkpoints")
        if name in ("canonicalise", "segment", "classify", "gen-data"):
            p.add_argument("--input", nargs="+" if name != "gen-data" else None,
                           help="MNIST IDX directory" if name == "gen-data" else "PGM image(s)")
        if name in ("canonicalise", "segment", "classify", "bench", "invariance-check"):
            p.add_argument("--steps", type=int, help="canonicalisation steps")
        if name == "train-inner":
            p.add_argument("--augmented", action="store_true",
                           help="train on canonical plus transformed images")
        if name == "gradcheck":
            p.add_argument("--points", type=int, default=10, help="random points per primitive")
    return parser


def _write_meta(args, cfg, seed):
    out = getattr(args, "out", None)
    if not out or args.command == "gradcheck":
        return
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    meta = {"command": args.command, "argv": sys.argv[1:], "version": __version__, "seed": seed,
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z")}
    (out / "run_meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        steps = getattr(args, "steps", None)
        if steps is not None and steps < 0:
            raise UsageError("--steps must be non-negative")
        if args.jobs is not None and args.jobs < 1:
            raise UsageError("--jobs must be at least 1")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        cfg = load_config(args.config, args.profile)
        if args.seed is not None:
            cfg.seed = args.seed
        seed = cfg.resolved_seed()
        handler = COMMANDS[args.command][0]
        handler(args, cfg, seed)
        _write_meta(args, cfg, seed)
        return EXIT_OK
    except UsageError as exc:
        print(f"diffeocan: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CanonError, NumericalError, ad.AutodiffError, FloatingPointError) as exc:
        print(f"diffeocan: numerical failure: {_one_line(exc)}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DataError, FormatError, BenchError, EnergyError, FileNotFoundError,
            json.JSONDecodeError) as exc:
        print(f"diffeocan: error: {_one_line(exc)}", file=sys.stderr)
        return EXIT_DATA


def _one_line(exc) -> str:
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
