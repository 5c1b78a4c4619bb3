"""Command-line entry point: gen-data, train-tracer, train-model, eval, report.

Every artifact lands in ``<out>/{data,ckpt,reports}/<fingerprint>/`` where the
fingerprint hashes the config that produced it, so reruns with the same config
reuse what exists and different configs never overwrite each other.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import torch
import yaml

from gimlab import bench
from gimlab import synthgen as sg
from gimlab import tracer as tr
from gimlab.model import gimformer as gf
from gimlab.model import train as mt

log = logging.getLogger("gimlab")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(ValueError):
    pass


@dataclass
class ModelRun:
    setting: str = "mix"
    ablate: tuple[str, ...] = ()
    finetune_tracer: bool = False


@dataclass
class EvalSettings:
    setting: str | None = None  # defaults to the model's training setting
    robustness: bool = False
    threshold: float = 0.5
    score: str = "head"


# section name -> dataclasses whose fields it may set
SECTIONS = {
    "datagen": (sg.DatagenConfig,),
    "tracer": (tr.TracerConfig, tr.TracerHyperparams),
    "model": (gf.ModelConfig, mt.TrainHyperparams, ModelRun),
    "eval": (EvalSettings,),
}
TRACER_EXTRA = ("subsets",)


def _field_names(cls) -> set[str]:
    return {f.name for f in fields(cls)} - {"seed"}


def _coerce(name: str, default, value):
    # YAML 1.1 reads "1e-4" as a string; scalars follow the type of the field's default
    kind = type(default)
    if kind is bool:
        if not isinstance(value, bool):
            raise TypeError(f"{name} must be true/false, got {value!r}")
    elif kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(f"{name} must be an integer, got {value!r}")
    elif kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise TypeError(f"{name} must be a number, got {value!r}")
        return float(value)
    return value


def _build(cls, section: dict, **kw):
    defaults = {f.name: f.default for f in fields(cls) if f.name != "seed"}
    return cls(**{k: _coerce(k, defaults[k], v) for k, v in section.items() if k in defaults}, **kw)


def _hash(blob) -> str:
    return hashlib.sha256(json.dumps(blob, sort_keys=True, default=list).encode()).hexdigest()[:16]


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "out"
    datagen: dict = field(default_factory=dict)
    tracer: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise ConfigError(f"seed must be an integer, got {self.seed!r}")
        for name, classes in SECTIONS.items():
            section = getattr(self, name)
            if not isinstance(section, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            allowed = set().union(*(_field_names(c) for c in classes))
            if name == "tracer":
                allowed |= set(TRACER_EXTRA)
            unknown = sorted(set(section) - allowed)
            if unknown:
                raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
        try:
            self.datagen_config()
            self.tracer_arch(), self.tracer_hp()
            self.model_arch(), self.train_hp()
            run = self.model_run()
            ev = self.eval_settings()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if run.setting not in mt.SETTING_TRAIN_SUBSETS:
            raise ConfigError(f"unknown setting {run.setting!r}")
        if ev.setting is not None and ev.setting not in bench.SETTING_EVAL_SUBSETS:
            raise ConfigError(f"unknown eval setting {ev.setting!r}")
        if ev.score not in ("head", "max_map"):
            raise ConfigError(f"unknown detection score {ev.score!r}")

    # ---- typed views
    def datagen_config(self) -> sg.DatagenConfig:
        return _build(sg.DatagenConfig, self.datagen, seed=self.seed)

    def tracer_arch(self) -> tr.TracerConfig:
        return _build(tr.TracerConfig, self.tracer)

    def tracer_hp(self) -> tr.TracerHyperparams:
        return _build(tr.TracerHyperparams, self.tracer, seed=self.seed)

    def tracer_subsets(self) -> tuple[str, ...]:
        subsets = self.tracer.get("subsets")
        return tuple(subsets) if subsets else mt.SETTING_TRAIN_SUBSETS[self.model_run().setting]

    def model_run(self) -> ModelRun:
        run = _build(ModelRun, self.model)
        ablate = run.ablate
        if isinstance(ablate, str):
            ablate = [a for a in ablate.split(",") if a]
        run.ablate = tuple(sorted(set(ablate)))
        for a in run.ablate:
            if a not in gf.ABLATIONS:
                raise ConfigError(f"unknown ablation {a!r}; choose from {', '.join(gf.ABLATIONS)}")
        return run

    def model_arch(self) -> gf.ModelConfig:
        run = self.model_run()
        base = _build(gf.ModelConfig, self.model)
        return gf.ModelConfig.from_dict({**asdict(base), "use_fsb": "fsb" not in run.ablate,
                                         "use_mwam": "mwam" not in run.ablate,
                                         "use_tracer": "tracer" not in run.ablate})

    def train_hp(self) -> mt.TrainHyperparams:
        return _build(mt.TrainHyperparams, self.model, seed=self.seed)

    def eval_settings(self) -> EvalSettings:
        return _build(EvalSettings, self.eval)

    # ---- fingerprints
    def canonical(self) -> dict:
        return {"seed": self.seed, "datagen": self.datagen, "tracer": self.tracer,
                "model": self.model, "eval": self.eval}

    def fingerprint(self) -> str:
        return _hash(self.canonical())

    def data_fingerprint(self) -> str:
        return self.datagen_config().fingerprint()

    def tracer_fingerprint(self) -> str:
        hp = self.tracer_hp()
        return _hash({"train": tr.training_fingerprint(self.tracer_arch(), hp, self.data_fingerprint()),
                      "subsets": list(self.tracer_subsets())})

    def model_fingerprint(self, tracer_fp: str | None) -> str:
        run = self.model_run()
        arch = self.model_arch()
        base = mt.training_fingerprint(arch, self.train_hp(), self.data_fingerprint(),
                                       tracer_fp if arch.use_tracer else None, run.setting)
        return _hash({"train": base, "finetune_tracer": run.finetune_tracer})

    # ---- paths
    @property
    def root(self) -> Path:
        return Path(self.out)

    def data_dir(self) -> Path:
        return self.root / "data" / self.data_fingerprint()

    def manifest_path(self) -> Path:
        return self.data_dir() / "manifest.tsv"

    def tracer_path(self) -> Path:
        return self.root / "ckpt" / self.tracer_fingerprint() / "tracer.pt"

    def model_path(self, tracer_fp: str | None) -> Path:
        return self.root / "ckpt" / self.model_fingerprint(tracer_fp) / "model.pt"


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_config(path: str | Path | None = None, overrides=(), seed: int | None = None,
                out: str | None = None) -> RunConfig:
    """Defaults, then the YAML file, then ``section.key=value`` overrides, then seed/out."""
    data: dict = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping")
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        node = {}
        cursor = node
        parts = key.split(".")
        for p in parts[:-1]:
            cursor = cursor.setdefault(p, {})
        cursor[parts[-1]] = yaml.safe_load(raw)
        data = _merge(data, node)
    if seed is not None:
        data["seed"] = seed
    if out is not None:
        data["out"] = out
    elif os.environ.get("GIMLAB_OUT"):
        data["out"] = os.environ["GIMLAB_OUT"]
    unknown = sorted(set(data) - {f.name for f in fields(RunConfig)})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    return RunConfig(**data)


# --------------------------------------------------------------------------- commands


def _write_jsonl(path: Path, rows) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), encoding="utf-8")


def _require_manifest(cfg: RunConfig) -> sg.DatasetManifest:
    path = cfg.manifest_path()
    if not path.exists():
        raise ConfigError(f"no dataset at {path}; run gen-data with the same config first")
    manifest = sg.DatasetManifest.read(path)
    if manifest.fingerprint != cfg.data_fingerprint():
        raise ConfigError(f"dataset {path} has fingerprint {manifest.fingerprint}, "
                          f"expected {cfg.data_fingerprint()}")
    return manifest


def cmd_gen_data(cfg: RunConfig) -> Path:
    path = cfg.manifest_path()
    if path.exists():
        existing = sg.DatasetManifest.read(path)
        if existing.fingerprint == cfg.data_fingerprint():
            log.info("dataset %s up to date", path)
            return path
    tmp = cfg.data_dir().with_name(cfg.data_dir().name + ".partial")
    shutil.rmtree(tmp, ignore_errors=True)
    sg.build_dataset(cfg.datagen_config(), tmp)
    (tmp / "config.yaml").write_text(yaml.safe_dump({"datagen": cfg.datagen_config().canonical()}),
                                     encoding="utf-8")
    shutil.rmtree(cfg.data_dir(), ignore_errors=True)
    tmp.rename(cfg.data_dir())
    return path


def cmd_train_tracer(cfg: RunConfig, force: bool = False) -> Path:
    manifest = _require_manifest(cfg)
    path = cfg.tracer_path()
    fp = cfg.tracer_fingerprint()
    if path.exists() and not force:
        tr.load_tracer(path, expected_fingerprint=fp)  # guards against a stale file
        log.info("tracer %s up to date", path)
        return path
    subsets = cfg.tracer_subsets()
    weights = tr.train_tracer(manifest.select(subsets=subsets, split="train"), cfg.tracer_hp(), cfg.tracer_arch(),
                              manifest.select(subsets=subsets, split="test"))
    weights.fingerprint = fp
    path.parent.mkdir(parents=True, exist_ok=True)
    tr.save_tracer(weights, path)
    _write_jsonl(path.parent / "tracer_loss.jsonl", weights.history)
    return path


def _resolve_tracer(cfg: RunConfig, tracer_ckpt: str | None) -> tr.TracerWeights | None:
    if not cfg.model_arch().use_tracer:
        return None
    path = Path(tracer_ckpt) if tracer_ckpt else cfg.tracer_path()
    if not path.exists():
        raise ConfigError(f"no tracer checkpoint at {path}; run train-tracer or pass --tracer-ckpt")
    return tr.load_tracer(path, expected_fingerprint=None if tracer_ckpt else cfg.tracer_fingerprint())


def cmd_train_model(cfg: RunConfig, tracer_ckpt: str | None = None, force: bool = False) -> Path:
    manifest = _require_manifest(cfg)
    tracer = _resolve_tracer(cfg, tracer_ckpt)
    tracer_fp = tracer.fingerprint if tracer is not None else None
    path = cfg.model_path(tracer_fp)
    fp = cfg.model_fingerprint(tracer_fp)
    if path.exists() and not force:
        _, blob = gf.load_model(path, expected_arch=cfg.model_arch())
        if blob["fingerprint"] != fp:
            raise ConfigError(f"checkpoint {path} has fingerprint {blob['fingerprint']}, expected {fp}")
        log.info("model %s up to date", path)
        return path
    run = cfg.model_run()
    result = mt.train_model(manifest, tracer, cfg.train_hp(), cfg.model_arch(), run.setting, run.finetune_tracer)
    path.parent.mkdir(parents=True, exist_ok=True)
    gf.save_model(result.model, path, fp, extra={"setting": run.setting, "data": cfg.data_fingerprint(),
                                                 "tracer": tracer_fp, "init_loss": result.init_loss})
    _write_jsonl(path.parent / "train_log.jsonl", [{"epoch": 0, "monitor_loss": result.init_loss}] + result.history)
    return path


def cmd_eval(cfg: RunConfig, model_ckpt: str | None = None, tracer_ckpt: str | None = None) -> Path:
    manifest = _require_manifest(cfg)
    if model_ckpt:
        path = Path(model_ckpt)
    else:
        tracer = _resolve_tracer(cfg, tracer_ckpt)
        path = cfg.model_path(tracer.fingerprint if tracer is not None else None)
    if not path.exists():
        raise ConfigError(f"no model checkpoint at {path}; run train-model first or pass --model-ckpt")
    model, blob = gf.load_model(path)
    ev = cfg.eval_settings()
    setting = ev.setting or blob["extra"].get("setting", "mix")
    fp = _hash({"model": blob["fingerprint"], "eval": asdict(ev), "setting": setting,
                "data": manifest.fingerprint})
    report = bench.run_setting(model, manifest, setting, seed=cfg.seed, fingerprint=fp, score=ev.score)
    if ev.robustness:
        clean = bench.clean_testset(manifest, bench.SETTING_EVAL_SUBSETS[setting][:1] if setting == "cross"
                                    else bench.SETTING_EVAL_SUBSETS[setting])
        report.robustness = bench.robustness_sweep(model, clean, ev.threshold)
    report.extra = {"model_fingerprint": blob["fingerprint"], "model_ckpt": str(path)}
    table, jsonl = report.write(cfg.root / "reports" / fp)
    print(report.to_table())
    return jsonl


def cmd_report(cfg: RunConfig, paths=()) -> list[Path]:
    targets = [Path(p) for p in paths] or sorted((cfg.root / "reports").glob("*/report.jsonl"))
    if not targets:
        raise ConfigError(f"no reports under {cfg.root / 'reports'}")
    found = []
    for t in targets:
        jsonl = t / "report.jsonl" if t.is_dir() else t
        if not jsonl.exists():
            raise ConfigError(f"no report at {jsonl}")
        print(bench.EvalReport.read(jsonl).to_table())
        print()
        found.append(jsonl)
    return found


# --------------------------------------------------------------------------- argparse


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--out", help="output root (default: $GIMLAB_OUT or ./out)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gimlab", description="Generative manipulation detection toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset")
    t = sub.add_parser("train-tracer", parents=[common], help="train the trace regressor")
    t.add_argument("--force", action="store_true", help="retrain even if a checkpoint exists")
    t.add_argument("--setting", choices=sorted(mt.SETTING_TRAIN_SUBSETS),
                   help="train on this setting's subsets unless tracer.subsets is set")

    def model_flags(q):
        q.add_argument("--tracer-ckpt", help="tracer checkpoint to use instead of the config-derived one")
        q.add_argument("--ablate", action="append", choices=gf.ABLATIONS, default=None,
                       help="drop a component (repeatable)")
        q.add_argument("--finetune-tracer", action="store_true", default=None)
        q.add_argument("--setting", choices=sorted(mt.SETTING_TRAIN_SUBSETS))

    m = sub.add_parser("train-model", parents=[common], help="train the detector/localizer")
    model_flags(m)
    m.add_argument("--force", action="store_true")
    e = sub.add_parser("eval", parents=[common], help="evaluate a trained model")
    model_flags(e)
    e.add_argument("--model-ckpt")
    e.add_argument("--robustness", action="store_true", default=None, help="add the degradation sweep")
    r = sub.add_parser("report", parents=[common], help="print stored reports")
    r.add_argument("paths", nargs="*", help="report.jsonl files or report directories")
    return p


def _flag_overrides(args) -> list[str]:
    extra = []
    if getattr(args, "ablate", None):
        extra.append(f"model.ablate={json.dumps(sorted(set(args.ablate)))}")
    if getattr(args, "finetune_tracer", None):
        extra.append("model.finetune_tracer=true")
    if getattr(args, "setting", None):
        extra.append(f"model.setting={args.setting}")
    if getattr(args, "robustness", None):
        extra.append("eval.robustness=true")
    return extra


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    torch.use_deterministic_algorithms(True, warn_only=True)
    try:
        cfg = load_config(args.config, list(args.overrides) + _flag_overrides(args), args.seed, args.out)
        if args.command == "gen-data":
            print(cmd_gen_data(cfg))
        elif args.command == "train-tracer":
            print(cmd_train_tracer(cfg, force=args.force))
        elif args.command == "train-model":
            print(cmd_train_model(cfg, args.tracer_ckpt, force=args.force))
        elif args.command == "eval":
            print(cmd_eval(cfg, args.model_ckpt, args.tracer_ckpt))
        else:
            cmd_report(cfg, args.paths)
    except ArithmeticError as exc:
        print(f"gimlab: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, sg.SynthError, bench.BenchError, gf.CheckpointError, tr.TracerError,
            mt.TrainingError, FileNotFoundError) as exc:
        print(f"gimlab: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
