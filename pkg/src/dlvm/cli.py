"""Command-line experiment runner.

Subcommands::

    dlvm synth-data     seeded synthetic dataset plus ground truth
    dlvm train          fit a decoder/encoder pair by maximising the ELBO
    dlvm blowup         per-datum likelihood along a blow-up parameter path
    dlvm mixture-bound  finite-mixture upper bound (and sandwich report)
    dlvm impute         pseudo-Gibbs or Metropolis-within-Gibbs imputation
    dlvm eval           Wilcoxon comparison of two imputation result files

Every option can also come from a JSON file passed with ``--config`` (keys
are option names with underscores); command-line flags override it.  The
effective configuration is written next to the outputs together with its
digest, and every CSV/JSON output records the digest, seed and package
version, so a run can be repeated from its saved configuration.

Outputs go to ``--output-dir``, else ``$DLVM_OUTPUT_DIR``, else
``./dlvm-out``.  Exit codes: 0 success, 2 invalid configuration, 3 bad or
missing input file, 4 numerical failure (e.g. divergence), 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, canonical_digest, load_checkpoint, save_checkpoint
from .data import SYNTH_KINDS, IdxFormatError, load_dataset, save_csv, save_truth, synth_data
from .distributions import make_rng

OUTPUT_ENV = "DLVM_OUTPUT_DIR"
EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3, 4


class ConfigError(Exception):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class InputError(Exception):
    pass


def _floats(text):
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip()]


def _ints(text):
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(v) for v in str(text).split(",") if v.strip()]


def _json_obj(text):
    if isinstance(text, dict):
        return text
    return json.loads(text)


# name -> (type, default, help); defaults follow the values used in the
# reference experiments wherever one is stated.
OPTIONS = {
    "synth-data": {
        "kind": (str, "ppca", f"one of {', '.join(SYNTH_KINDS)}"),
        "n": (int, 200, "number of data points"),
        "params": (_json_obj, {}, "generator parameters as a JSON object"),
    },
    "train": {
        "data": (str, None, "dataset path (.csv or IDX)"),
        "binarize": (bool, False, "binarise inputs at --threshold"),
        "threshold": (float, 0.5, "binarisation threshold (values >= threshold become 1)"),
        "output_kind": (str, "gaussian", "gaussian or bernoulli"),
        "d": (int, 2, "latent dimension"),
        "h": (int, 16, "hidden units"),
        "xi": (float, 0.0, "variance floor; > 0 keeps the likelihood bounded"),
        "learning_rate": (float, 1e-4, "Adam step size"),
        "batch_size": (int, 10, "minibatch size"),
        "steps": (int, 1000, "optimisation steps"),
        "mc_samples": (int, 1, "ELBO samples per datum"),
        "valid_fraction": (float, 0.0, "held-out fraction for monitoring"),
        "iw_samples": (int, 0, "importance samples for held-out log-likelihood (0 = off)"),
        "allow_divergence": (bool, False, "keep going when the loss diverges"),
    },
    "blowup": {
        "data": (str, None, "dataset path"),
        "d": (int, 2, "latent dimension"),
        "index": (int, 0, "datum whose contribution is driven to infinity"),
        "w": (_floats, None, "direction w in latent space (default: random unit vector)"),
        "alphas": (_floats, [float(a) for a in range(0, 21, 2)], "alpha grid"),
        "mc_samples": (int, 100_000, "prior draws per alpha"),
        "quadrature": (bool, True, "also evaluate the 1-D quadrature oracle"),
    },
    "mixture-bound": {
        "data": (str, None, "dataset path"),
        "binarize": (bool, False, "binarise inputs at --threshold"),
        "threshold": (float, 0.5, "binarisation threshold"),
        "kind": (str, "gaussian", "gaussian or bernoulli components"),
        "xi": (float, 2.0**-4, "variance floor for Gaussian components"),
        "k_schedule": (_ints, None, "component counts to try (default 1,2,4,...,n)"),
        "restarts": (int, 10, "EM restarts per component count"),
        "max_iters": (int, 500, "EM iterations per run"),
        "tol": (float, 1e-7, "relative log-likelihood gain at which EM stops"),
        "checkpoint": (str, None, "optional trained model for the sandwich report"),
        "iw_samples": (int, 256, "importance samples for the sandwich report"),
    },
    "impute": {
        "data": (str, None, "dataset of complete test items"),
        "checkpoint": (str, None, "trained model"),
        "binarize": (bool, False, "binarise inputs at --threshold"),
        "threshold": (float, 0.5, "binarisation threshold"),
        "scenario": (str, "mar:0.5", "mar:<fraction>, top-half or bottom-half"),
        "sampler": (str, "mwg", "pseudo-gibbs or mwg"),
        "chain_length": (int, 2000, "iterations T"),
        "warmup": (int, 20, "initial pseudo-Gibbs iterations"),
        "n_items": (int, 0, "use only the first n items (0 = all)"),
        "mask_seed": (int, None, "seed for MAR masks (default: --seed)"),
        "dump_trace": (bool, False, "write the full chain as raw float64 with a JSON sidecar"),
    },
    "eval": {
        "pg": (str, None, "pseudo-Gibbs per-item results CSV"),
        "mwg": (str, None, "Metropolis-within-Gibbs per-item results CSV"),
        "dataset": (str, "data", "dataset label for the table"),
        "method": (str, "auto", "auto, exact or normal"),
    },
}

REQUIRED = {
    "train": ["data"],
    "blowup": ["data"],
    "mixture-bound": ["data"],
    "impute": ["data", "checkpoint"],
    "eval": ["pg", "mwg"],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dlvm", description="Exact-likelihood tools for deep latent variable models.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, options in OPTIONS.items():
        p = sub.add_parser(command, help=(_HANDLER_DOCS.get(command) or "").strip())
        p.add_argument("--config", help="JSON file of option values")
        p.add_argument("--output-dir", help=f"output directory (default ${OUTPUT_ENV} or ./dlvm-out)")
        p.add_argument("--seed", type=int, default=None, help="global seed (default 0)")
        for name, (typ, default, text) in options.items():
            flag = "--" + name.replace("_", "-")
            if typ is bool:
                p.add_argument(flag, dest=name, action=argparse.BooleanOptionalAction, default=None, help=f"{text} (default {default})")
            else:
                p.add_argument(flag, dest=name, default=None, help=f"{text} (default {default})")
    return parser


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """defaults < --config file < flags, with every value converted and checked."""
    options = OPTIONS[command]
    file_cfg = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise InputError(f"config file {path} does not exist")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config file {path} is not valid JSON: {exc}"]) from exc
        file_cfg.pop("digest", None)
        file_cfg.pop("version", None)
    errors = []
    unknown = set(file_cfg) - set(options) - {"seed", "command"}
    errors += [f"{k}: unknown option for {command}" for k in sorted(unknown)]
    cfg = {"command": command}
    seed = args.seed if args.seed is not None else file_cfg.get("seed", 0)
    try:
        cfg["seed"] = int(seed)
    except (TypeError, ValueError):
        errors.append(f"seed: expected an integer, got {seed!r}")
    unparsed = set()
    for name, (typ, default, _) in options.items():
        raw = getattr(args, name, None)
        if raw is None:
            raw = file_cfg.get(name, default)
        if raw is None:
            cfg[name] = None
            continue
        try:
            cfg[name] = typ(raw) if typ is not bool else bool(raw)
        except (TypeError, ValueError) as exc:
            errors.append(f"{name}: cannot parse {raw!r} ({exc})")
            unparsed.add(name)
            cfg[name] = default
    # check the remaining fields too, so every problem is reported in one go
    errors += [e for e in validate(command, cfg) if e.split(":", 1)[0] not in unparsed]
    if errors:
        raise ConfigError(errors)
    return cfg


def validate(command: str, cfg: dict) -> list[str]:
    """Every violated field, so a user can fix them all in one go."""
    errors = [f"{name}: required" for name in REQUIRED.get(command, []) if cfg.get(name) in (None, "")]
    for name in ("data", "checkpoint", "pg", "mwg"):
        if cfg.get(name) and not Path(cfg[name]).exists():
            errors.append(f"{name}: path {cfg[name]} does not exist")

    def positive(*names):
        for n in names:
            if n in cfg and cfg[n] is not None and not cfg[n] > 0:
                errors.append(f"{n}: must be > 0, got {cfg[n]}")

    if command == "synth-data":
        if cfg["kind"] not in SYNTH_KINDS:
            errors.append(f"kind: must be one of {SYNTH_KINDS}")
        if cfg["n"] < 0:
            errors.append("n: must be >= 0")
    elif command == "train":
        positive("d", "h", "learning_rate", "batch_size", "mc_samples")
        if cfg["steps"] < 0:
            errors.append("steps: must be >= 0")
        if cfg["output_kind"] not in ("gaussian", "bernoulli"):
            errors.append("output_kind: must be gaussian or bernoulli")
        if cfg["xi"] < 0:
            errors.append("xi: must be >= 0")
        if not 0 <= cfg["valid_fraction"] < 1:
            errors.append("valid_fraction: must be in [0, 1)")
        if cfg["iw_samples"] < 0:
            errors.append("iw_samples: must be >= 0")
    elif command == "blowup":
        positive("d", "mc_samples")
        if cfg["index"] < 0:
            errors.append("index: must be >= 0")
        if cfg["w"] is not None and len(cfg["w"]) != cfg["d"]:
            errors.append(f"w: needs {cfg['d']} entries, got {len(cfg['w'])}")
        if not cfg["alphas"] or min(cfg["alphas"]) < 0:
            errors.append("alphas: need at least one nonnegative value")
    elif command == "mixture-bound":
        positive("restarts", "max_iters", "tol", "iw_samples")
        if cfg["kind"] not in ("gaussian", "bernoulli"):
            errors.append("kind: must be gaussian or bernoulli")
        if cfg["kind"] == "gaussian" and not cfg["xi"] > 0:
            errors.append("xi: Gaussian mixtures need xi > 0")
        if cfg["k_schedule"] is not None and (not cfg["k_schedule"] or min(cfg["k_schedule"]) < 1):
            errors.append("k_schedule: component counts must be >= 1")
    elif command == "impute":
        positive("chain_length")
        if cfg["sampler"] not in ("pseudo-gibbs", "mwg"):
            errors.append("sampler: must be pseudo-gibbs or mwg")
        if cfg["warmup"] is not None and not 0 <= cfg["warmup"] < cfg["chain_length"]:
            errors.append("warmup: must satisfy 0 <= warmup < chain_length")
        if cfg["n_items"] < 0:
            errors.append("n_items: must be >= 0")
        try:
            from .imputation import parse_scenario

            name, frac = parse_scenario(cfg["scenario"])
            if name == "mar" and not 0 < frac < 1:
                errors.append("scenario: MAR fraction must be in (0, 1)")
        except ValueError as exc:
            errors.append(f"scenario: {exc}")
    elif command == "eval":
        if cfg["method"] not in ("auto", "exact", "normal"):
            errors.append("method: must be auto, exact or normal")
    return errors


def output_dir(args) -> Path:
    path = Path(args.output_dir or os.environ.get(OUTPUT_ENV) or "dlvm-out")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _stamp(cfg: dict) -> dict:
    return {"config_digest": config_digest(cfg), "seed": cfg["seed"], "version": __version__}


def config_digest(cfg: dict) -> str:
    return canonical_digest({k: v for k, v in cfg.items()})


def write_effective_config(cfg: dict, out: Path) -> Path:
    record = dict(cfg)
    record["digest"] = config_digest(cfg)
    record["version"] = __version__
    path = out / f"{cfg['command']}_config.json"
    path.write_text(json.dumps(record, indent=1, sort_keys=True))
    return path


def _write_json(path: Path, payload: dict, cfg: dict) -> Path:
    payload = dict(payload)
    payload.update(_stamp(cfg))
    path.write_text(json.dumps(payload, indent=1, sort_keys=True, default=float))
    return path


def _load_data(cfg):
    try:
        return load_dataset(cfg["data"], binarize=cfg.get("binarize", False), threshold=cfg.get("threshold", 0.5))
    except (IdxFormatError, ValueError) as exc:
        raise InputError(str(exc)) from exc


def _load_model(path):
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise InputError(str(exc)) from exc


# -- handlers --------------------------------------------------------------------


def cmd_synth_data(cfg, out: Path) -> list[Path]:
    """Generate a seeded synthetic dataset and its ground truth."""
    ds, truth = synth_data(cfg["kind"], cfg["params"], cfg["n"], cfg["seed"])
    data_path = save_csv(ds, out / "data.csv", _stamp(cfg))
    truth.update(_stamp(cfg))
    return [data_path, save_truth(truth, out / "truth.json")]


def cmd_train(cfg, out: Path) -> list[Path]:
    """Maximise the ELBO with Adam and save a checkpoint plus metrics trace."""
    from .training import TrainConfig, TrainingDiverged, train

    ds = _load_data(cfg)
    X, X_valid = ds.X, None
    if cfg["valid_fraction"] > 0:
        split = ds.with_splits({"train": 1 - cfg["valid_fraction"], "valid": cfg["valid_fraction"]}, cfg["seed"])
        X, X_valid = split.subset("train"), split.subset("valid")
    tc = TrainConfig(
        d=cfg["d"],
        h=cfg["h"],
        p=ds.p,
        output_kind=cfg["output_kind"],
        xi=cfg["xi"],
        learning_rate=cfg["learning_rate"],
        batch_size=cfg["batch_size"],
        steps=cfg["steps"],
        seed=cfg["seed"],
        mc_samples=cfg["mc_samples"],
        iw_samples=cfg["iw_samples"],
        allow_divergence=cfg["allow_divergence"],
    )
    problems = tc.validate()
    if cfg["output_kind"] == "bernoulli" and ds.kind != "binary":
        problems.append("output_kind: bernoulli outputs need binary data (use --binarize)")
    if problems:
        raise ConfigError(problems)
    try:
        ckpt, trace = train(tc, X, X_valid)
    except TrainingDiverged as exc:
        raise NumericError(str(exc)) from exc
    ckpt.meta["config_digest"] = config_digest(cfg)
    return [save_checkpoint(ckpt, out / "checkpoint.json"), trace.to_csv(out / "metrics.csv", _stamp(cfg))]


def cmd_blowup(cfg, out: Path) -> list[Path]:
    """Evaluate per-datum likelihood contributions along the blow-up path."""
    from .blowup import BlowupSpec, blowup_trace

    ds = _load_data(cfg)
    if cfg["index"] >= ds.n:
        raise ConfigError([f"index: {cfg['index']} out of range for {ds.n} data points"])
    w = cfg["w"]
    if w is None:
        v = make_rng(cfg["seed"]).standard_normal(cfg["d"])
        w = v / np.linalg.norm(v)
    spec = BlowupSpec(cfg["index"], np.asarray(w, dtype=np.float64), np.asarray(cfg["alphas"]), cfg["mc_samples"], cfg["seed"])
    trace = blowup_trace(ds.X, spec, quadrature=cfg["quadrature"])
    csv_path = trace.to_csv(out / "blowup.csv", _stamp(cfg))
    summary = {
        "index": cfg["index"],
        "w": list(map(float, w)),
        "growth_nats": float(trace.growth),
        "others_above_floor": trace.others_above_floor(),
        "floor_other": [float(v) for v in trace.floor_other],
    }
    return [csv_path, _write_json(out / "blowup_summary.json", summary, cfg)]


def cmd_mixture_bound(cfg, out: Path) -> list[Path]:
    """Fit constrained finite mixtures by EM and report the likelihood upper bound."""
    from .mixture import nonparametric_bound, sandwich_report, save_mixture

    ds = _load_data(cfg)
    if cfg["kind"] == "bernoulli" and ds.kind != "binary":
        raise ConfigError(["kind: Bernoulli mixtures need binary data (use --binarize)"])
    if cfg["k_schedule"] is not None and max(cfg["k_schedule"]) > ds.n:
        raise ConfigError([f"k_schedule: component counts must not exceed n = {ds.n}"])
    result = nonparametric_bound(ds.X, cfg["kind"], cfg["xi"], cfg["k_schedule"], cfg["restarts"], cfg["seed"], cfg["max_iters"], cfg["tol"])
    paths = [save_mixture(result.mixture, out / "mixture.json")]
    best_report = max(result.reports, key=lambda r: r.loglik)
    paths.append(best_report.to_csv(out / "em_trace.csv", _stamp(cfg)))
    summary = {
        "bound": result.loglik,
        "schedule": [{"K": k, "loglik": ll, "best_so_far": best} for k, ll, best in result.schedule],
        "effective_components": result.mixture.effective_components(),
        "note": "multi-restart EM finds local optima, so the bound is a lower estimate of the true maximum",
    }
    if cfg["checkpoint"]:
        from .training import paired_bounds

        ckpt = _load_model(cfg["checkpoint"])
        if ckpt.decoder.dims[2] != ds.p:
            raise ConfigError([f"checkpoint: model has p = {ckpt.decoder.dims[2]}, data has {ds.p}"])
        pb = paired_bounds(ckpt.decoder, ckpt.encoder, ds.X, cfg["iw_samples"], make_rng(cfg["seed"]))
        rep = sandwich_report(pb.total_elbo, pb.total_iw, result.loglik, pb.total_elbo_se, pb.total_iw_se)
        summary["sandwich"] = {
            "elbo": rep.elbo,
            "iw_loglik": rep.iw_loglik,
            "bound": rep.bound,
            "elbo_se": rep.elbo_se,
            "iw_se": rep.iw_se,
            "parsimony_gap": rep.parsimony_gap,
            "kl_upper_bound": rep.kl_upper_bound,
            "ordered": rep.ordered,
            "flags": rep.flags,
        }
    paths.append(_write_json(out / "bound.json", summary, cfg))
    return paths


def cmd_impute(cfg, out: Path) -> list[Path]:
    """Impute masked test items with one sampler and score them by F1."""
    from .imputation import dump_trace, impute_items, make_mask, run_chain, write_item_results

    ds = _load_data(cfg)
    ckpt = _load_model(cfg["checkpoint"])
    if ckpt.decoder.dims[2] != ds.p:
        raise ConfigError([f"checkpoint: model has p = {ckpt.decoder.dims[2]}, data has {ds.p}"])
    if ckpt.decoder.output_kind == "bernoulli" and ds.kind != "binary":
        raise ConfigError(["data: Bernoulli model needs binary data (use --binarize)"])
    X = ds.X[: cfg["n_items"]] if cfg["n_items"] else ds.X
    mask_rng = make_rng(cfg["seed"] if cfg["mask_seed"] is None else cfg["mask_seed"])
    masks = np.array([make_mask(ds.p, cfg["scenario"], mask_rng).missing for _ in range(X.shape[0])])
    rows, res = impute_items(X, masks, ckpt.decoder, ckpt.encoder, cfg["chain_length"], cfg["warmup"], cfg["sampler"], cfg["seed"], cfg["scenario"])
    tag = cfg["sampler"]
    paths = [write_item_results(out / f"impute_{tag}.csv", rows, _stamp(cfg))]
    if cfg["dump_trace"]:
        full = run_chain(np.where(masks, 0.0, X), masks, ckpt.decoder, ckpt.encoder, cfg["chain_length"], cfg["warmup"], cfg["seed"], tag, keep_trace=True)
        paths.extend(dump_trace(out / f"trace_{tag}.f64", full.trace, {"axes": ["t", "item", "feature"], **_stamp(cfg)}))
    return paths


def cmd_eval(cfg, out: Path) -> list[Path]:
    """Pair two per-item result files and tabulate the Wilcoxon comparison."""
    from .imputation import read_item_results
    from .stats import PairedScores, results_table, write_results_table

    try:
        pg_rows, mwg_rows = read_item_results(cfg["pg"]), read_item_results(cfg["mwg"])
    except (KeyError, ValueError) as exc:
        raise InputError(f"malformed results file: {exc}") from exc
    scores = {}
    for scenario in sorted({r.scenario for r in pg_rows} | {r.scenario for r in mwg_rows}):
        a = [r for r in pg_rows if r.scenario == scenario]
        b = [r for r in mwg_rows if r.scenario == scenario]
        try:
            scores[(cfg["dataset"], scenario)] = PairedScores.from_item_results(a, b)
        except ValueError as exc:
            raise InputError(f"scenario {scenario}: {exc}") from exc
    rows = results_table(scores, cfg["method"])
    for r in rows:
        print(f"{r.dataset}\t{r.scenario}\tpg={r.mean_f1_pg:.4f}\tmwg={r.mean_f1_mwg:.4f}\tW={r.W:g}\tp={r.p_display}")
    return [write_results_table(out / "results.csv", rows, _stamp(cfg))]


class NumericError(Exception):
    pass


HANDLERS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "blowup": cmd_blowup,
    "mixture-bound": cmd_mixture_bound,
    "impute": cmd_impute,
    "eval": cmd_eval,
}
_HANDLER_DOCS = {k: v.__doc__ for k, v in HANDLERS.items()}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args.command, args)
        out = output_dir(args)
        print(f"dlvm {__version__} {args.command}: " + json.dumps(cfg, sort_keys=True, default=str), file=sys.stderr)
        write_effective_config(cfg, out)
        for path in HANDLERS[args.command](cfg, out):
            print(path)
        return EXIT_OK
    except ConfigError as exc:
        print("invalid configuration:", file=sys.stderr)
        for err in exc.errors:
            print(f"  - {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:  # noqa: BLE001 - last-resort categorisation for the exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
