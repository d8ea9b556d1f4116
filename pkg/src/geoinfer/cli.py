"""Command-line entry point: ``geoinfer <command> [options]``.

Commands
  soil-demo   classification study on the built-in N / Vs table
  generate    sample a synthetic Gaussian benchmark as CSV files
  impute      iterated conditional-mean imputation of missing targets
  explain     Shapley attributions for an imputation run
  replay      re-run a command from its manifest and verify checksums

Every command writes ``manifest.json`` into its output directory. Logs go to
stderr; ``--json`` prints a machine-readable summary to stdout.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import data as gd
from . import explain as gx
from . import imputation as gi
from . import predictor as gp
from . import report as gr

log = logging.getLogger("geoinfer")

MANIFEST = "manifest.json"
LOCK = ".geoinfer.lock"
SEED_ENV = "GEOINFER_SEED"

# Keys every command resolves; per-command extras are merged on top.
COMMON_DEFAULTS = {
    "seed": 0,
    "iterations": gi.DEFAULT_ITERATIONS,
    "bins": gp.DEFAULT_BINS,
    "bandwidth": None,
    "k": None,
    "alpha": gp.DEFAULT_ALPHA,
    "log_features": False,
    "shap_mode": "exact",
    "shap_perms": gx.DEFAULT_PERMUTATIONS,
    "background_size": gx.DEFAULT_BACKGROUND,
}

COMMAND_DEFAULTS = {
    # Log-scaled features and two neighbours: the soil classes follow power
    # laws in N, so ratios rather than differences separate them.
    "soil-demo": {"k": 2, "log_features": True, "resolution": 100, "n_range": [1.0, 50.0], "vs_range": [80.0, 400.0]},
    "generate": {"n_train": 500, "n_test": 40, "missing_rate": 0.5},
    "impute": {"target_order": None},
    "explain": {"targets": None, "rows": None},
}


class CommandError(RuntimeError):
    pass


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: dict[str, dict] = field(default_factory=dict)  # role -> {path, sha256}
    outputs: dict[str, str] = field(default_factory=dict)  # relative path -> sha256
    version: str = __version__

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "version": self.version,
            "seed": self.seed,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": dict(sorted(self.outputs.items())),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        for key in ("command", "config", "seed", "inputs", "outputs"):
            if key not in d:
                raise CommandError(f"manifest lacks {key!r}")
        return cls(d["command"], d["config"], int(d["seed"]), d["inputs"], d["outputs"], d.get("version", ""))


# ---------------------------------------------------------------------------
# Output handling
# ---------------------------------------------------------------------------


class Output:
    """Writes artifacts into one directory and records their checksums."""

    def __init__(self, root: Path):
        self.root = root
        self.written: dict[str, str] = {}

    def text(self, name: str, content: str) -> Path:
        path = self.root / name
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(content)
        self.written[name] = sha256_file(path)
        log.debug("wrote %s", path)
        return path

    def json(self, name: str, obj) -> Path:
        return self.text(name, json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


@contextmanager
def out_lock(root: Path):
    root.mkdir(parents=True, exist_ok=True)
    lock = root / LOCK
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CommandError(f"{root} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _input(path, role: str) -> tuple[Path, dict]:
    p = Path(path)
    if not p.is_file():
        raise CommandError(f"{role} file not found: {p}")
    return p, {"path": str(p.resolve()), "sha256": sha256_file(p)}


def hyper_from_config(cfg: dict) -> gp.PredictorHyper:
    return gp.PredictorHyper(
        bandwidth=cfg["bandwidth"],
        k=cfg["k"],
        bins=int(cfg["bins"]),
        alpha=float(cfg["alpha"]),
        log_features=bool(cfg["log_features"]),
    )


def _shap_mode(cfg: dict) -> gx.ShapMode:
    if cfg["shap_mode"] == "exact":
        return gx.ShapMode.exact()
    return gx.ShapMode.monte_carlo(int(cfg["shap_perms"]), int(cfg["seed"]))


def _json_safe(obj):
    """Replace non-finite floats with None so manifests stay strict JSON."""
    if isinstance(obj, float):
        return obj if np.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# Commands. Each returns a summary dict and fills ``out``.
# ---------------------------------------------------------------------------


def cmd_soil_demo(cfg: dict, inputs: dict, out: Output) -> dict:
    train, test = gd.builtin_soil_dataset()
    ctx = gp.build_context(train, "soil", hyper_from_config(cfg))
    x_test = test.columns(["N", "Vs"])
    labels = test.labels()
    pred = gp.predict_labels(ctx, x_test)
    p_sand = gp.predict_class_proba_batch(ctx, x_test)[:, ctx.classes.index("Sand")]
    metrics = {
        "accuracy": gp.accuracy(labels, pred),
        "roc_auc": gp.roc_auc([lab == "Sand" for lab in labels], p_sand),
        "bandwidth": ctx.bandwidth,
        "k": ctx.k_neighbors,
        "misclassified": [i + 1 for i, (a, b) in enumerate(zip(labels, pred)) if a != b],
    }
    grid = gp.decision_grid(ctx, tuple(cfg["n_range"]), tuple(cfg["vs_range"]), int(cfg["resolution"]), "Sand")
    emb_test = gp.embed_batch(ctx, x_test)
    emb_train = gp.embed_batch(ctx, train.columns(["N", "Vs"]))
    sim = gx.cosine_matrix(
        emb_test,
        emb_train,
        [f"T{i + 1}" for i in range(test.n_rows)],
        [f"{lab[0]}{i + 1}" for i, lab in enumerate(train.labels())],
    )
    out.text("soil_scatter.svg", gr.render_svg(gr.soil_scatter_chart(train, test)))
    out.text("soil_probability.svg", gr.render_svg(gr.probability_heatmap(grid, train)))
    out.text("soil_similarity.svg", gr.render_svg(gr.similarity_heatmap(sim)))
    out.json("metrics.json", {"accuracy": metrics["accuracy"], "roc_auc": metrics["roc_auc"]})
    log.info("accuracy %.4f, ROC-AUC %.4f, misclassified %s", metrics["accuracy"], metrics["roc_auc"], metrics["misclassified"])
    return metrics


def cmd_generate(cfg: dict, inputs: dict, out: Output) -> dict:
    bench = gd.generate_oracle_benchmark(int(cfg["seed"]), int(cfg["n_train"]), int(cfg["n_test"]), float(cfg["missing_rate"]))
    out.text("train.csv", gd.table_to_csv(bench.train))
    out.text("test.csv", gd.table_to_csv(bench.test))
    out.text("truth.csv", gd.table_to_csv(bench.truth))
    out.text("schema.json", gd.dump_schema(bench.train.schema))
    out.json("benchmark.json", bench.to_dict())
    masked = int(bench.test.missing.sum())
    log.info("generated %d train / %d test rows, %d masked cells", bench.train.n_rows, bench.test.n_rows, masked)
    return {"n_train": bench.train.n_rows, "n_test": bench.test.n_rows, "masked_cells": masked}


def cmd_impute(cfg: dict, inputs: dict, out: Output) -> dict:
    schema = gd.load_schema(inputs["schema"])
    train = gd.load_csv(inputs["train"], schema)
    test = gd.load_csv(inputs["test"], schema)
    truth = gd.load_csv(inputs["truth"], schema) if "truth" in inputs else None
    if truth is not None and not truth.is_fully_observed(truth.targets):
        raise CommandError("truth CSV must have every target cell")
    config = gi.ImputationConfig(
        iterations=int(cfg["iterations"]),
        target_order=cfg["target_order"],
        bins=int(cfg["bins"]),
        hyper=hyper_from_config(cfg),
    )
    run = gi.run_icm(train, test, config, truth)
    out.json("run.json", _json_safe(run.to_dict()))
    for target in run.target_order:
        j = test.column_index(target)
        entries = []
        for r in range(test.n_rows):
            label = str(r + 1)
            if test.missing[r, j]:
                t = float(truth.values[r, j]) if truth is not None else None
                entries.append(gr.violin_entry(run.final_posteriors.get((r, target)), truth=t, label=label))
            else:
                entries.append(gr.violin_entry(None, observed=float(test.values[r, j]), label=label))
        chart = gr.violin_chart(entries, f"Posterior of {target} per test sample", target)
        out.text(f"violins_{target}.svg", gr.render_svg(chart))
    summary = {"iterations": run.iterations_run, "missing_cells": int(test.missing.sum())}
    if truth is not None:
        out.text("rmse.csv", gr.table_rmse(run))
        out.text("rmse_trend.svg", gr.render_svg(gr.rmse_trend_chart(gi.normalized_trend(run))))
        summary["rmse"] = gi.rmse_table(run)
        for row in summary["rmse"]:
            log.info("%s: RMSE iter1 %s, iter%d %s", row["target"], row["rmse_iter1"], run.iterations_run, row["rmse_iterK"])
    return _json_safe(summary)


def cmd_explain(cfg: dict, inputs: dict, out: Output) -> dict:
    try:
        run = gi.ImputationRun.from_dict(json.loads(Path(inputs["run"]).read_text(encoding="utf-8")))
    except (KeyError, TypeError, ValueError) as exc:
        raise CommandError(f"cannot read imputation run: {exc}") from None
    targets = cfg["targets"] or list(run.target_order)
    mode = _shap_mode(cfg)
    summary = {}
    for target in targets:
        res = gx.shap_for_target(run, target, cfg["rows"], mode, int(cfg["background_size"]), int(cfg["seed"]))
        for r, resid in zip(res.rows, res.efficiency_residuals()):
            log.info("%s row %d: efficiency residual %.3g", target, r, resid)
        worst = float(res.efficiency_residuals().max())
        if mode.kind == "exact" and worst > 1e-9:
            raise CommandError(f"efficiency residual {worst:.3g} exceeds 1e-9 for {target}")
        means = gx.mean_abs_shap(res)
        top = gx.top_index_feature(res)
        out.text(f"shap_{target}.csv", res.to_csv())
        out.text(f"shap_{target}.json", res.to_json())
        out.text(f"shap_bar_{target}.svg", gr.render_svg(gr.shap_bar_chart(means, target)))
        out.text(f"shap_scatter_{target}.svg", gr.render_svg(gr.shap_scatter_chart(gx.shap_scatter_data(res, top), target, top)))
        summary[target] = {"top_index_feature": top, "max_efficiency_residual": worst, "mean_abs_shap": means}
    return summary


COMMANDS = {
    "soil-demo": cmd_soil_demo,
    "generate": cmd_generate,
    "impute": cmd_impute,
    "explain": cmd_explain,
}


# ---------------------------------------------------------------------------
# Config resolution and execution
# ---------------------------------------------------------------------------


def resolve_config(command: str, cli: dict, file_cfg: dict | None = None, env=os.environ) -> dict:
    """Materialize every setting: CLI flags over the config file over defaults."""
    cfg = {**COMMON_DEFAULTS, **COMMAND_DEFAULTS.get(command, {})}
    if env.get(SEED_ENV):
        try:
            cfg["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise CommandError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    for source in (file_cfg or {}, cli):
        for key, value in source.items():
            if key not in cfg:
                raise CommandError(f"unknown setting {key!r} for {command}")
            if value is not None:
                cfg[key] = value
    if cfg["shap_mode"] not in ("exact", "monte_carlo"):
        raise CommandError(f"unknown SHAP mode {cfg['shap_mode']!r}")
    return cfg


def execute(command: str, cfg: dict, inputs: dict[str, str], out_dir: Path) -> tuple[RunManifest, dict]:
    out_dir = Path(out_dir)
    recorded = {}
    for role, path in inputs.items():
        _, recorded[role] = _input(path, role)
    with out_lock(out_dir):
        out = Output(out_dir)
        summary = COMMANDS[command](cfg, inputs, out)
        manifest = RunManifest(command, cfg, int(cfg["seed"]), recorded, out.written)
        (out_dir / MANIFEST).write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest, summary


def replay(manifest_path: Path, out_dir: Path | None = None) -> tuple[RunManifest, dict]:
    """Re-run the manifest's command and compare every artifact checksum."""
    manifest = RunManifest.from_dict(json.loads(Path(manifest_path).read_text(encoding="utf-8")))
    if manifest.command not in COMMANDS:
        raise CommandError(f"manifest names unknown command {manifest.command!r}")
    inputs = {}
    for role, rec in manifest.inputs.items():
        _, now = _input(rec["path"], role)
        if now["sha256"] != rec["sha256"]:
            raise CommandError(f"input {role} ({rec['path']}) changed since the recorded run")
        inputs[role] = rec["path"]
    cfg = resolve_config(manifest.command, manifest.config, env={})

    def run_into(target: Path):
        again, summary = execute(manifest.command, cfg, inputs, target)
        diffs = sorted(
            name
            for name in set(manifest.outputs) | set(again.outputs)
            if manifest.outputs.get(name) != again.outputs.get(name)
        )
        if diffs:
            raise CommandError(f"replay differs in {len(diffs)} artifact(s): {', '.join(diffs)}")
        return again, summary

    if out_dir is not None:
        return run_into(Path(out_dir))
    with tempfile.TemporaryDirectory(prefix="geoinfer-replay-") as tmp:
        return run_into(Path(tmp))


def _add_predictor_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bins", type=int, help="posterior bins (default 128)")
    p.add_argument("--bandwidth", type=float, help="kernel bandwidth in standardized units (default: median heuristic)")
    p.add_argument("--k", type=int, help="nearest neighbours kept (default min(n, 16))")
    p.add_argument("--alpha", type=float, help="Laplace smoothing for class weights (default 0.5)")


def _add_shap_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--shap-mode", choices=("exact", "monte_carlo"), dest="shap_mode")
    p.add_argument("--shap-perms", type=int, dest="shap_perms", help="permutations for monte_carlo (default 200)")
    p.add_argument("--background-size", type=int, dest="background_size", help="background rows (default 32)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geoinfer", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"geoinfer {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--seed", type=int, help=f"random seed (fallback: ${SEED_ENV}, then 0)")
    common.add_argument("--config", type=Path, help="JSON file of settings; flags take precedence")
    common.add_argument("--json", action="store_true", help="print a JSON summary to stdout")
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("soil-demo", parents=[common], help="classification study on the built-in soil table")
    _add_predictor_flags(p)
    p.add_argument("--resolution", type=int, help="decision grid cells per axis (default 100)")

    p = sub.add_parser("generate", parents=[common], help="write a synthetic Gaussian benchmark")
    p.add_argument("--n-train", type=int, dest="n_train")
    p.add_argument("--n-test", type=int, dest="n_test")
    p.add_argument("--missing-rate", type=float, dest="missing_rate")

    p = sub.add_parser("impute", parents=[common], help="impute missing targets by iterated conditional means")
    p.add_argument("--train", required=True, type=Path)
    p.add_argument("--test", required=True, type=Path)
    p.add_argument("--schema", required=True, type=Path)
    p.add_argument("--truth", type=Path, help="complete test table for RMSE reporting")
    p.add_argument("--iterations", type=int, help="sweeps (default 10)")
    p.add_argument("--target-order", dest="target_order", help="comma-separated sweep order")
    _add_predictor_flags(p)

    p = sub.add_parser("explain", parents=[common], help="Shapley attributions for an imputation run")
    p.add_argument("--run", required=True, type=Path, help="run.json written by impute")
    p.add_argument("--targets", help="comma-separated targets (default: all)")
    p.add_argument("--rows", help="comma-separated 0-based test rows (default: all)")
    _add_shap_flags(p)

    p = sub.add_parser("replay", parents=[common], help="re-run from a manifest and verify identical artifacts")
    p.add_argument("manifest", type=Path)
    return parser


_INPUT_FLAGS = {"impute": ("train", "test", "schema", "truth"), "explain": ("run",)}
_NON_SETTINGS = {"command", "out", "config", "json", "verbose", "manifest", "train", "test", "schema", "truth", "run"}


_handler: logging.Handler | None = None


def _configure_logging(verbose: int) -> None:
    """Route package logs to stderr; -v shows progress, -vv debug detail."""
    global _handler
    pkg = logging.getLogger("geoinfer")
    if _handler is not None:
        pkg.removeHandler(_handler)
    _handler = logging.StreamHandler(sys.stderr)
    _handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    pkg.addHandler(_handler)
    pkg.setLevel(logging.WARNING - 10 * min(verbose, 2))


def _split_list(value: str | None, cast=str):
    if value is None:
        return None
    return [cast(v.strip()) for v in value.split(",") if v.strip()]


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args.verbose)
    try:
        if args.command == "replay":
            manifest, summary = replay(args.manifest, args.out)
            log.info("replay of %s matched %d artifact(s)", manifest.command, len(manifest.outputs))
        else:
            if args.out is None:
                raise CommandError("--out is required")
            file_cfg = None
            if args.config is not None:
                try:
                    file_cfg = json.loads(args.config.read_text(encoding="utf-8"))
                except (OSError, ValueError) as exc:
                    raise CommandError(f"cannot read config {args.config}: {exc}") from None
                if not isinstance(file_cfg, dict):
                    raise CommandError("config file must hold a JSON object")
            cli = {k: v for k, v in vars(args).items() if k not in _NON_SETTINGS}
            for key in ("target_order", "targets"):
                if key in cli:
                    cli[key] = _split_list(cli[key])
            if "rows" in cli:
                cli["rows"] = _split_list(cli["rows"], int)
            cfg = resolve_config(args.command, cli, file_cfg)
            inputs = {k: str(getattr(args, k)) for k in _INPUT_FLAGS.get(args.command, ()) if getattr(args, k) is not None}
            manifest, summary = execute(args.command, cfg, inputs, args.out)
    except (CommandError, gd.DataError, gp.PredictorError, gx.ShapError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return 1
    if args.json:
        payload = {"command": manifest.command, "outputs": manifest.to_dict()["outputs"], "summary": summary}
        json.dump(_json_safe(payload), sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
