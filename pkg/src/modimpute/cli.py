"""Command-line entry point: ``modimpute <synth|train|impute|eval|benchmark|gradcheck>``.

Every command takes an optional JSON config; kebab-case flags override
its fields. Each run writes ``run_meta.json`` next to its outputs with the
resolved config, its hash and the seeds, which is enough to replay it.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import (
    Cohort,
    DataError,
    SynthSpec,
    load_cohort,
    load_synth_spec,
    save_cohort,
    standardize,
    synth_cohort,
)
from .evaluate import (
    ClassifierHyper,
    GeneratedSet,
    downstream_classify,
    effect_size_table,
    emit_reports,
)
from .gradcheck import TOLERANCE, gradcheck_main
from .imputer import (
    ImputationPlan,
    generate_all_pairs,
    impute_cohort,
    impute_with,
    load_provenance,
    mean_impute,
    save_provenance,
    shared_content_generator,
    train_pairwise_set,
)
from .nncore import dump_json
from .phase1 import ContentModel, Phase1Hyper, train_content
from .phase2 import Phase2Hyper, StylePair, style_filename, train_all_styles

log = logging.getLogger("modimpute")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
METHODS = ("ours", "cgan", "wgan", "mean", "complete_case")
CONTENT_FILE = "content.json"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data: str = ""
    out_dir: str = "runs/default"
    checkpoints: str = ""
    modalities: list[str] = field(default_factory=list)
    priority: list[str] = field(default_factory=list)
    strategy: str = "first_available"
    standardize: bool = True
    k: int = 5
    seed: int = 0
    depths: list[int] = field(default_factory=lambda: [4])
    methods: list[str] = field(default_factory=lambda: ["ours", "cgan", "mean", "complete_case"])
    phase1: Phase1Hyper = field(default_factory=Phase1Hyper)
    phase2: Phase2Hyper = field(default_factory=Phase2Hyper)
    classifier: ClassifierHyper = field(default_factory=ClassifierHyper)

    def validate(self) -> None:
        try:
            self.phase1.validate()
            self.phase2.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.k < 2:
            raise ConfigError("k must be at least 2")
        if not self.depths or min(self.depths) < 1:
            raise ConfigError("depths must be positive integers")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown method(s) {unknown}; choose from {list(METHODS)}")
        if self.strategy not in ("first_available", "average"):
            raise ConfigError(f"unknown strategy {self.strategy!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def seeds(self) -> dict:
        return {"run": self.seed, "phase1": self.phase1.seed, "phase2": self.phase2.seed}


NESTED = {"phase1": Phase1Hyper, "phase2": Phase2Hyper, "classifier": ClassifierHyper}
FLAG_PREFIX = {"phase1": "p1", "phase2": "p2", "classifier": "clf"}


def _from_dict(cls, d: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    for key in d:
        if key not in known:
            raise ConfigError(f"{where}: unknown field {key!r}")
    kwargs = {}
    for key, value in d.items():
        if where == "config" and key in NESTED:
            if not isinstance(value, dict):
                raise ConfigError(f"config: field {key!r} must be an object")
            value = _from_dict(NESTED[key], value, key)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path: str | None) -> RunConfig:
    if not path:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return _from_dict(RunConfig, doc, "config")


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _flag(prefix: str | None, name: str) -> str:
    stem = name.replace("_", "-").lower()
    return f"--{prefix}-{stem}" if prefix else f"--{stem}"


def _parse_scalar(kind, text: str):
    if kind is bool or kind == "bool":
        if text.lower() in ("1", "true", "yes"):
            return True
        if text.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return kind(text)


def _field_type(cls, name):
    default = cls()
    value = getattr(default, name)
    return type(value)


def _add_override_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config overrides (flags win over the config file)")
    for f in fields(RunConfig):
        if f.name in NESTED:
            for sub in fields(NESTED[f.name]):
                g.add_argument(_flag(FLAG_PREFIX[f.name], sub.name), dest=f"ov__{f.name}__{sub.name}",
                               metavar="V", default=None)
        else:
            g.add_argument(_flag(None, f.name), dest=f"ov__{f.name}", metavar="V", default=None)


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    for key, text in sorted(vars(args).items()):
        if not key.startswith("ov__") or text is None:
            continue
        path = key.split("__")[1:]
        target, name = (getattr(cfg, path[0]), path[1]) if len(path) == 2 else (cfg, path[0])
        flag = _flag(FLAG_PREFIX.get(path[0]) if len(path) == 2 else None, name)
        kind = _field_type(type(target), name)
        try:
            if kind is list:
                items = [t for t in text.split(",") if t]
                value = [int(t) for t in items] if name == "depths" else items
            else:
                value = _parse_scalar(kind, text)
        except ValueError as exc:
            raise ConfigError(f"{flag}: {exc}") from exc
        setattr(target, name, value)
    return cfg


def resolve_config(args) -> RunConfig:
    cfg = apply_overrides(load_config(getattr(args, "config", None)), args)
    cfg.validate()
    return cfg


def write_run_meta(cfg: RunConfig, out_dir: Path, command: str, extra: dict | None = None) -> None:
    meta = {"command": command, "config": cfg.to_dict(), "config_sha256": config_hash(cfg), "seeds": cfg.seeds()}
    if extra:
        meta.update(extra)
    dump_json(meta, out_dir / "run_meta.json")


def _load_raw(cfg: RunConfig) -> Cohort:
    if not cfg.data:
        raise ConfigError("no data path given (use --data or the config's 'data' field)")
    return load_cohort(cfg.data, modalities=cfg.modalities or None)


def _load_data(cfg: RunConfig) -> Cohort:
    cohort = _load_raw(cfg)
    return standardize(cohort)[0] if cfg.standardize else cohort


def restore_units(raw: Cohort, completed: Cohort) -> Cohort:
    """Observed cells copied from ``raw`` untouched; filled cells mapped back to raw units."""
    stats = completed.standardization
    out = raw.copy()
    for rec, done in zip(out.subjects, completed.subjects):
        for t, f in enumerate(rec.features):
            if f is None:
                v = done.features[t]
                rec.features[t] = v if stats is None else v * stats.std[t] + stats.mean[t]
    return out


# --- commands -----------------------------------------------------------------

def cmd_synth(args) -> int:
    try:
        spec = load_synth_spec(args.spec) if args.spec else SynthSpec()
        if args.seed is not None:
            spec.seed = args.seed
        spec.validate()
    except (ValueError, OSError) as exc:
        raise ConfigError(f"{args.spec}: {exc}") from exc
    cohort, truth = synth_cohort(spec, return_truth=True)
    out = Path(args.out)
    save_cohort(cohort, out)
    dump_json({"spec": spec.to_dict(), "truth": truth.to_dict()}, out.with_suffix(".truth.json"))
    print(f"wrote {len(cohort)} subjects to {out}")
    return EXIT_OK


def train_models(cfg: RunConfig, cohort: Cohort, phase: int = 2):
    cm = train_content(cohort, cfg.phase1)
    pairs = train_all_styles(cohort, cm, cfg.phase2) if phase >= 2 else {}
    return cm, pairs


def save_models(out_dir: Path, cm: ContentModel, pairs: dict[str, StylePair]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cm.save(out_dir / CONTENT_FILE)
    for name, pair in pairs.items():
        pair.save(out_dir / style_filename(name))


def load_models(ckpt_dir: Path, modalities) -> tuple[ContentModel, dict[str, StylePair]]:
    cm = ContentModel.load(ckpt_dir / CONTENT_FILE)
    pairs = {}
    for m in modalities:
        p = ckpt_dir / style_filename(m)
        if p.exists():
            pairs[m] = StylePair.load(p)
    return cm, pairs


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    cohort = _load_data(cfg)
    out = Path(cfg.out_dir)
    cm, pairs = train_models(cfg, cohort, args.phase)
    save_models(out, cm, pairs)
    write_run_meta(cfg, out, "train", {"phase": args.phase})
    print(f"wrote {1 + len(pairs)} checkpoint(s) to {out}")
    return EXIT_OK


def provenance_path(completed: Path) -> Path:
    return completed.with_suffix(".provenance.csv")


def cmd_impute(args) -> int:
    cfg = resolve_config(args)
    raw = _load_raw(cfg)
    cohort = standardize(raw)[0] if cfg.standardize else raw
    ckpt = Path(cfg.checkpoints or cfg.out_dir)
    cm, pairs = load_models(ckpt, cohort.modalities)
    completed, prov = impute_cohort(cohort, cm, pairs, ImputationPlan(cfg.strategy, cfg.priority))
    out = Path(args.out)
    save_cohort(restore_units(raw, completed), out)
    save_provenance(prov, provenance_path(out))
    write_run_meta(cfg, out.parent, "impute")
    print(f"filled {len(prov)} cell(s); wrote {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    actual = _load_data(cfg)
    completed = load_cohort(args.completed, modalities=actual.modalities)
    if cfg.standardize:
        completed, _ = standardize(completed, actual.standardization)
    prov = load_provenance(provenance_path(Path(args.completed)))
    table = effect_size_table(actual, GeneratedSet.from_completed(completed, prov))
    complete_ids = [r.subject_id for r in actual.subjects if all(f is not None for f in r.features)]
    reports = [downstream_classify(completed, d, cfg.k, cfg.seed, fold_pool=complete_ids,
                                   hyper=cfg.classifier, method="completed") for d in cfg.depths]
    out = Path(cfg.out_dir)
    emit_reports({"completed": table}, reports, out, {"mean_abs_d": table.mean_abs_d()})
    write_run_meta(cfg, out, "eval")
    print(f"mean |d| {table.mean_abs_d():.4f}; reports in {out}")
    return EXIT_OK


def run_benchmark(cfg: RunConfig, cohort: Cohort) -> tuple[dict, list, dict]:
    """Every method under identical folds and seeds.

    Folds come from the fully observed subjects. Generators and the
    class-mean imputer are fitted on the remaining (incomplete) subjects,
    which only ever join training splits, so no test subject influences
    any imputer. Realism is scored by translating every observed vector
    and comparing against real target vectors of the same class.
    """
    complete = [r.subject_id for r in cohort.subjects if all(f is not None for f in r.features)]
    incomplete = [r.subject_id for r in cohort.subjects if any(f is None for f in r.features)]
    if not incomplete:
        raise DataError("benchmark needs some incomplete subjects to impute")
    fit = cohort.subset(incomplete)
    plan = ImputationPlan(cfg.strategy, cfg.priority)
    tables, reports, counts = {}, [], {}

    def classify(name, data, pool, n_gen):
        for d in cfg.depths:
            reports.append(downstream_classify(data, d, cfg.k, cfg.seed, fold_pool=pool,
                                               hyper=cfg.classifier, method=name, generator_count=n_gen))

    for method in cfg.methods:
        log.info("benchmark: %s", method)
        if method == "complete_case":
            counts[method] = 0
            classify(method, cohort.subset(complete), complete, 0)
            continue
        if method == "mean":
            completed, _ = mean_impute(cohort, fit_on=fit)
            counts[method] = 0
        else:
            if method == "ours":
                cm, pairs = train_models(cfg, fit)
                gen = shared_content_generator(cm, pairs, cohort.modalities)
                counts[method] = len(pairs)
            else:
                pset = train_pairwise_set(fit, method, cfg.phase2)
                gen = pset.generator_fn(cohort.modalities)
                counts[method] = pset.generator_count
            completed, _ = impute_with(cohort, gen, plan, method)
            tables[method] = effect_size_table(cohort, generate_all_pairs(cohort, gen))
        classify(method, completed, complete, counts[method])
    summary = {
        "generator_counts": counts,
        "mean_abs_d": {m: t.mean_abs_d() for m, t in tables.items()},
        "n_complete": len(complete),
        "n_incomplete": len(incomplete),
    }
    return tables, reports, summary


def cmd_benchmark(args) -> int:
    cfg = resolve_config(args)
    cohort = _load_data(cfg)
    tables, reports, summary = run_benchmark(cfg, cohort)
    out = Path(cfg.out_dir)
    emit_reports(tables, reports, out, summary)
    write_run_meta(cfg, out, "benchmark")
    for r in reports:
        s = r.summary()
        print(f"{r.method:>14} depth {r.model_depth} generators {r.generator_count:>2} "
              f"acc {s['accuracy']['mean']:.4f} prec {s['precision']['mean']:.4f} rec {s['recall']['mean']:.4f}")
    for m, d in summary["mean_abs_d"].items():
        print(f"{m:>14} mean |d| {d:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ok, errs, elapsed = gradcheck_main(args.seed or 0)
    for name, err in errs.items():
        print(f"{name:<32} {err:.3e}")
    print(f"max relative error {max(errs.values()):.3e} (tolerance {TOLERANCE:g}) in {elapsed:.1f}s: "
          f"{'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


# --- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="modimpute", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic cohort CSV plus a ground-truth sidecar")
    s.add_argument("--spec", help="SynthSpec JSON (defaults when omitted)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    for name, func, help_ in (
        ("train", cmd_train, "train the content model and one style pair per modality"),
        ("impute", cmd_impute, "complete a cohort with trained checkpoints"),
        ("eval", cmd_eval, "effect sizes and CV classification of a completed cohort"),
        ("benchmark", cmd_benchmark, "compare imputation methods under identical folds and seeds"),
    ):
        c = sub.add_parser(name, help=help_)
        c.add_argument("--config", help="RunConfig JSON")
        _add_override_flags(c)
        c.set_defaults(func=func)
        if name == "train":
            c.add_argument("--phase", type=int, choices=(1, 2), default=2,
                           help="1 stops after the content model")
        if name == "impute":
            c.add_argument("--out", required=True, help="completed cohort CSV (provenance goes alongside)")
        if name == "eval":
            c.add_argument("--completed", required=True, help="completed cohort CSV written by impute")

    g = sub.add_parser("gradcheck", help="finite-difference check of every architecture and loss")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArithmeticError as exc:
        print(f"numeric failure [{_origin(exc)}]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ValueError, KeyError, OSError) as exc:
        print(f"data error [{_origin(exc)}]: {exc}", file=sys.stderr)
        return EXIT_DATA


def _origin(exc: BaseException) -> str:
    """Module that raised ``exc`` (innermost frame inside this package)."""
    tb, mod = exc.__traceback__, "cli"
    while tb is not None:
        name = tb.tb_frame.f_globals.get("__name__", "")
        if name.startswith("modimpute."):
            mod = name.split(".", 1)[1]
        tb = tb.tb_next
    return mod


if __name__ == "__main__":
    sys.exit(main())
