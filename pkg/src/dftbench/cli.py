"""Command-line entry point: ``dftbench <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime error. Settings resolve as
defaults < ``--config`` file < ``DFT_SEED`` (seed only) < explicit flags.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import evaluate as ev
from . import scenes
from .finetune import MODES, TrainConfig, prepare_finetune, trainable_fraction, train, write_trace
from .model import DiT, DiTConfig
from .schedule import build_schedule
from .ssei import init_random_embeddings, ssei_assignments
from .tensor import load_checkpoint, save_checkpoint

log = logging.getLogger("dftbench")

SUBCOMMANDS = ("gen-data", "pretrain", "ssei", "finetune", "sample", "analyze-schedule",
               "analyze-survival", "eval")


class UsageError(Exception):
    pass


class ConfigError(UsageError):
    pass


@dataclass
class RunConfig:
    """Union of every subcommand's settings."""

    command: str = ""
    seed: int = 0
    out: str = ""
    # data generation
    kind: str = "target"
    count: int = 500
    # training
    data: str = ""
    source: str = ""
    ckpt: str = ""
    mode: str = "finetune_modulation"
    steps: int = 500
    learning_rate: float = 1e-4
    batch_size: int = 32
    weight_decay: float = 0.0
    tau: int = -1  # -1: equal to steps when the schedule is scos
    osl_lambda: float = 1.0
    schedule: str = "linear"
    scos_power: int = 2
    init: str = "ssei"
    trace: str = ""
    # model shape (pretrain only)
    dim: int = 128
    depth: int = 4
    heads: int = 4
    rank: int = 4
    # sampling / evaluation
    n: int = 40
    k: int = 3
    real: str = ""
    condition: int = 0
    threshold: float = 1.0
    T: int = 1000
    t_probe: int = 200
    samples_dir: str = ""


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
ALIASES = {"lr": "learning_rate", "lambda": "osl_lambda", "batch": "batch_size"}


def canonical_key(key: str) -> str:
    key = key.strip().replace("-", "_")
    return ALIASES.get(key, key)


def _convert(key: str, raw: str):
    typ = FIELD_TYPES[key]
    if typ in ("int", int):
        return int(raw)
    if typ in ("float", float):
        return float(raw)
    return raw


def load_config(path) -> dict:
    """Parse a flat ``key = value`` file (``#`` comments) into RunConfig overrides.

    A manifest CSV written by a previous run (header ``key,value``) is also
    accepted, so a manifest can be replayed directly.
    """
    text = Path(path).read_text()
    lines = text.splitlines()
    is_manifest = bool(lines) and lines[0].strip() == "key,value"
    out: dict = {}
    for lineno, line in enumerate(lines, 1):
        body = line.split("#", 1)[0].strip()
        if not body or (is_manifest and lineno == 1):
            continue
        sep = "," if is_manifest else "="
        if sep not in body:
            raise ConfigError(f"{path}:{lineno}: expected 'key {sep} value', got {line.strip()!r}")
        k, v = (s.strip() for s in body.split(sep, 1))
        key = canonical_key(k)
        if key not in FIELD_TYPES or key == "command":
            if is_manifest and key == "command":
                continue
            raise ConfigError(f"{path}:{lineno}: unknown key {k!r}")
        try:
            out[key] = _convert(key, v)
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: invalid value {v!r} for {k!r}") from None
    return out


def write_manifest(cfg: RunConfig, out_path) -> Path:
    path = Path(str(out_path) + ".manifest.csv")
    with open(path, "w") as fh:
        fh.write("key,value\n")
        for k, v in asdict(cfg).items():
            fh.write(f"{k},{v}\n")
    return path


# -- argument parsing --------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add(p, *names, **kw):
    kw.setdefault("default", argparse.SUPPRESS)
    p.add_argument(*names, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dftbench", description="Toy diffusion-transformer fine-tuning bench.")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        _add(p, "--config", dest="config", help="key = value settings file")
        _add(p, "--seed", type=int)
        return p

    p = cmd("gen-data", "generate a synthetic dataset file")
    _add(p, "--kind", choices=("source", "target"))
    _add(p, "--count", type=int)
    _add(p, "--out")
    _add(p, "--samples-dir", dest="samples_dir", help="also export every image as P6")

    def training_flags(p):
        _add(p, "--data")
        _add(p, "--steps", type=int)
        _add(p, "--lr", dest="learning_rate", type=float)
        _add(p, "--batch-size", dest="batch_size", type=int)
        _add(p, "--weight-decay", dest="weight_decay", type=float)
        _add(p, "--lambda", dest="osl_lambda", type=float)
        _add(p, "--schedule", choices=("linear", "cos", "scos"))
        _add(p, "--scos-power", dest="scos_power", type=int)
        _add(p, "--tau", type=int)
        _add(p, "--trace", help="loss trace CSV path")
        _add(p, "--out")

    p = cmd("pretrain", "train a model from scratch on source data")
    training_flags(p)
    for name in ("dim", "depth", "heads", "rank"):
        _add(p, f"--{name}", type=int)

    p = cmd("ssei", "assign target conditions to source classes")
    _add(p, "--source")
    _add(p, "--data", help="target dataset")
    _add(p, "--ckpt", help="if given with --out, write an SSEI-initialized checkpoint")
    _add(p, "--out")

    p = cmd("finetune", "adapt a pretrained checkpoint to target data")
    training_flags(p)
    _add(p, "--ckpt")
    _add(p, "--source", help="source dataset (needed for --init ssei)")
    _add(p, "--mode", choices=MODES[1:])
    _add(p, "--init", choices=("random", "ssei"))

    p = cmd("sample", "draw samples from a checkpoint")
    _add(p, "--ckpt")
    _add(p, "--condition", type=int, help="embedding row")
    _add(p, "--n", type=int)
    _add(p, "--out", help="output directory for P6 files")

    p = cmd("analyze-schedule", "dump a schedule as CSV")
    _add(p, "--schedule", choices=("linear", "cos", "scos"))
    _add(p, "--scos-power", dest="scos_power", type=int)
    _add(p, "--T", dest="T", type=int)
    _add(p, "--out")

    p = cmd("analyze-survival", "object survival time per box-size bucket")
    _add(p, "--data")
    _add(p, "--scos-power", dest="scos_power", type=int)
    _add(p, "--threshold", type=float)
    _add(p, "--out")

    p = cmd("eval", "sample a checkpoint and score it against real data")
    _add(p, "--real")
    _add(p, "--ckpt")
    _add(p, "--n", type=int)
    _add(p, "--k", type=int)
    _add(p, "--t-probe", dest="t_probe", type=int)
    _add(p, "--out", help="metric CSV path")
    _add(p, "--samples-dir", dest="samples_dir")
    return parser


def resolve(argv: list[str], env=None) -> RunConfig:
    env = os.environ if env is None else env
    ns = vars(build_parser().parse_args(argv))
    if not ns.get("command"):
        raise UsageError("missing subcommand")
    values: dict = {}
    if "config" in ns:
        values.update(load_config(ns.pop("config")))
    if "seed" not in ns and env.get("DFT_SEED"):
        try:
            values["seed"] = int(env["DFT_SEED"])
        except ValueError:
            raise UsageError(f"DFT_SEED={env['DFT_SEED']!r} is not an integer") from None
    values.update(ns)
    return RunConfig(**values)


def _require(cfg: RunConfig, *names):
    for n in names:
        if not getattr(cfg, n):
            raise UsageError(f"{cfg.command}: --{n.replace('_', '-')} is required")


# -- subcommand bodies -------------------------------------------------------

def _model_from_ckpt(path) -> tuple[DiT, dict]:
    params, meta = load_checkpoint(path)
    keys = {f.name for f in fields(DiTConfig)}
    model = DiT(DiTConfig.from_dict({k: v for k, v in meta.items() if k in keys}))
    model.load_state_dict(params)
    return model, meta


def _save_model(model: DiT, path, **extra) -> None:
    meta = dict(model.cfg.to_dict())
    meta.update(extra)
    save_checkpoint(path, model.state_dict(), meta)


def _train_cfg(cfg: RunConfig, mode: str) -> TrainConfig:
    tau = cfg.tau if cfg.tau >= 0 else (cfg.steps if cfg.schedule == "scos" else 0)
    return TrainConfig(mode=mode, steps=cfg.steps, batch_size=cfg.batch_size, learning_rate=cfg.learning_rate,
                       weight_decay=cfg.weight_decay, seed=cfg.seed, tau=tau, osl_lambda=cfg.osl_lambda,
                       schedule=cfg.schedule, scos_power=cfg.scos_power)


def run_gen_data(cfg: RunConfig) -> None:
    _require(cfg, "out")
    data = scenes.gen_dataset(cfg.kind, cfg.count, cfg.seed)
    scenes.write_dataset(data, cfg.out)
    if cfg.samples_dir:
        d = Path(cfg.samples_dir)
        d.mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(data):
            scenes.write_ppm(d / f"{cfg.kind}_{i:05d}_c{s.condition_id}.ppm", s.image)
    print(f"wrote {len(data)} {cfg.kind} samples to {cfg.out}")


def run_pretrain(cfg: RunConfig) -> None:
    _require(cfg, "data", "out")
    data = scenes.read_dataset(cfg.data)
    n_cls = max(s.condition_id for s in data) + 1
    model = DiT(DiTConfig(dim=cfg.dim, depth=cfg.depth, heads=cfg.heads, rank=cfg.rank,
                          num_embeddings=n_cls, T=cfg.T), seed=cfg.seed)
    tc = _train_cfg(cfg, "pretrain_full")
    res = train(model, data, tc, log_every=50)
    _save_model(model, cfg.out, sample_schedule=tc.schedule, sample_power=tc.final_power)
    if cfg.trace:
        write_trace(res.trace, cfg.trace)
    print(f"pretrained {cfg.steps} steps in {res.seconds:.1f}s, final loss {res.losses[-50:].mean():.4f}")


def _ssei_rows(source_path, target_path):
    src = scenes.read_dataset(source_path)
    tgt = scenes.read_dataset(target_path)
    return ssei_assignments(scenes.stack_images(src), [s.condition_id for s in src],
                            scenes.stack_images(tgt), [s.condition_id for s in tgt])


def run_ssei(cfg: RunConfig) -> None:
    _require(cfg, "source", "data")
    rows = _ssei_rows(cfg.source, cfg.data)
    print("condition_id,assigned_source_class,cosine_similarity")
    for cond, cls, cos in rows:
        print(f"{cond},{cls},{cos:.6f}")
    if cfg.ckpt and cfg.out:
        model, _ = _model_from_ckpt(cfg.ckpt)
        if model.embed.extra:
            raise UsageError(f"{cfg.ckpt} already has condition rows for target data")
        prepare_finetune(model, "finetune_full", [cls for _, cls, _ in rows])
        _save_model(model, cfg.out, label_offset=model.embed.num_base)
        print(f"wrote SSEI-initialized checkpoint to {cfg.out}")


def run_finetune(cfg: RunConfig) -> None:
    _require(cfg, "ckpt", "data", "out")
    model, meta = _model_from_ckpt(cfg.ckpt)
    data = scenes.read_dataset(cfg.data)
    n_cond = max(s.condition_id for s in data) + 1
    if model.embed.extra:
        assign = None  # rows already present (for example from the ssei subcommand)
    elif cfg.init == "ssei":
        _require(cfg, "source")
        assign = [cls for _, cls, _ in _ssei_rows(cfg.source, cfg.data)]
    else:
        init_random_embeddings(model.embed, n_cond, np.random.default_rng(cfg.seed))
        assign = None
    trainable = prepare_finetune(model, cfg.mode, assign)
    tc = _train_cfg(cfg, cfg.mode)
    res = train(model, data, tc, label_offset=model.embed.num_base, trainable=trainable, log_every=50)
    frac = trainable_fraction(model, trainable)
    # sampling uses the last schedule the model was trained on
    _save_model(model, cfg.out, label_offset=model.embed.num_base, trainable_fraction=f"{frac:.8g}",
                sample_schedule=tc.schedule, sample_power=tc.final_power)
    if cfg.trace:
        write_trace(res.trace, cfg.trace)
    print(f"fine-tuned {cfg.steps} steps ({cfg.mode}, trainable fraction {frac:.4%}) in {res.seconds:.1f}s")


def _offset(model: DiT, meta: dict) -> int:
    return int(meta.get("label_offset", model.embed.num_base if model.embed.extra else 0))


def _sampling_schedule(model: DiT, meta: dict):
    kind = meta.get("sample_schedule", "linear")
    return build_schedule(kind, model.cfg.T, s=int(meta.get("sample_power", 2)))


def run_sample(cfg: RunConfig) -> None:
    _require(cfg, "ckpt", "out")
    model, meta = _model_from_ckpt(cfg.ckpt)
    if not 0 <= cfg.condition < model.embed.num_rows:
        raise UsageError(f"--condition {cfg.condition} outside [0, {model.embed.num_rows})")
    sched = _sampling_schedule(model, meta)
    imgs = ev.ddpm_sample(model, sched, cfg.condition, np.random.default_rng(cfg.seed), cfg.n)
    d = Path(cfg.out)
    d.mkdir(parents=True, exist_ok=True)
    for i, im in enumerate(imgs):
        scenes.write_ppm(d / f"sample_{i:04d}.ppm", im)
    print(f"wrote {len(imgs)} samples to {d}")


def run_analyze_schedule(cfg: RunConfig) -> None:
    sched = build_schedule(cfg.schedule, cfg.T, s=cfg.scos_power)
    snr = sched.snr()
    lines = ["t,beta,alpha_bar,snr,schedule_name"]
    for t in range(1, sched.T + 1):
        lines.append(f"{t},{sched.beta[t]:.10g},{sched.alpha_bar[t]:.10g},{snr[t - 1]:.10g},{sched.name}")
    _emit("\n".join(lines) + "\n", cfg.out)


def run_analyze_survival(cfg: RunConfig) -> None:
    _require(cfg, "data")
    data = scenes.read_dataset(cfg.data)
    scheds = {"linear": build_schedule("linear", cfg.T)}
    s = build_schedule("scos", cfg.T, s=cfg.scos_power)
    scheds[s.name] = s
    _emit(ev.survival_csv(ev.survival_report(data, scheds, cfg.threshold)), cfg.out)


def run_eval(cfg: RunConfig) -> None:
    _require(cfg, "real", "ckpt")
    model, meta = _model_from_ckpt(cfg.ckpt)
    real = scenes.read_dataset(cfg.real)
    frac = float(meta.get("trainable_fraction", 0.0))
    sched = _sampling_schedule(model, meta)
    report, gen = ev.evaluate(model, sched, real, cfg.n, cfg.k, cfg.seed, _offset(model, meta), frac, cfg.t_probe)
    _emit(report.to_csv(), cfg.out)
    if cfg.samples_dir:
        d = Path(cfg.samples_dir)
        d.mkdir(parents=True, exist_ok=True)
        for i, im in enumerate(gen):
            scenes.write_ppm(d / f"eval_{i:04d}.ppm", im)


def _emit(text: str, out: str) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


RUNNERS = {
    "gen-data": run_gen_data, "pretrain": run_pretrain, "ssei": run_ssei, "finetune": run_finetune,
    "sample": run_sample, "analyze-schedule": run_analyze_schedule,
    "analyze-survival": run_analyze_survival, "eval": run_eval,
}


def dispatch(argv: list[str], env=None) -> int:
    if not argv:
        print(build_parser().format_usage(), file=sys.stderr, end="")
        return 1
    try:
        cfg = resolve(list(argv), env)
    except SystemExit as e:  # --help
        return 0 if e.code in (0, None) else 1
    except (UsageError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        if isinstance(e, UsageError) and argv[0] not in SUBCOMMANDS:
            print(build_parser().format_usage(), file=sys.stderr, end="")
        return 1
    print("resolved config: " + " ".join(f"{k}={v}" for k, v in asdict(cfg).items()), file=sys.stderr)
    start = time.perf_counter()
    try:
        RUNNERS[cfg.command](cfg)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - any runtime failure maps to exit 2
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    if cfg.out:
        write_manifest(cfg, cfg.out)
    log.info("%s finished in %.1fs", cfg.command, time.perf_counter() - start)
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    sys.exit(dispatch(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
