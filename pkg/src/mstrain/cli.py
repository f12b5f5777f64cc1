"""Command line: ``mstrain <subcommand> [flags]``.

Every subcommand writes its table to ``<out>/metrics.csv`` and a
``manifest.json`` describing the resolved configuration.  Settings resolve
as command-line flag > config file > default.  Passing ``--manifest`` instead
of ``--config`` replays an earlier run.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import yaml

from . import memtrack
from .data import EndOfData, TokenFile, MarkovChain, next_batch, sample_entropy, synth_corpus
from .estimator import BF16_MIXED, ByteModel, gib, llama3_8b, predict_peak
from .model import ConfigError, ModelConfig, save_checkpoint
from .optim import OptimConfig
from .seqpar import SeqParSim, sp_max_seq
from .train import BudgetTooSmall, Trainer, max_seq, random_batch

log = logging.getLogger("mstrain")

METRICS_HEADER = ("step", "loss", "grad_norm", "peak_bytes", "flops")
MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
OPTIM_KEYS = {f.name for f in dataclasses.fields(OptimConfig)}
RUN_KEYS = {"steps", "data"}

_REQUIRED = object()
# Subcommand-specific options: recorded in the manifest so that a replay needs
# nothing but ``--manifest``.  Parser defaults are None; these fill the gaps.
SUB_OPTIONS: dict[str, dict[str, Any]] = {
    "train": {},
    "sweep-m": {"component": "head", "m_list": "1,2,4,8,16,32"},
    "estimate": {"preset": None, "compare": False, "seq": None, "batch": None},
    "max-seq": {"budget_bytes": _REQUIRED, "quantum": 64, "limit": 1 << 16},
    "sp-sim": {"workers": _REQUIRED, "budget_bytes": None, "threads": False, "quantum": 64, "limit": 1 << 16},
    "gen-data": {"vocab": None, "tokens": 1_000_000, "path": None},
    "mem-timeline": {},
}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    optim: OptimConfig
    steps: int = 50
    data: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "model": self.model.to_dict(),
            "optim": dataclasses.asdict(self.optim),
            "run": {"steps": self.steps, "data": self.data},
        }


@dataclass
class RunManifest:
    command: str
    config: dict[str, Any]
    seed: int
    out_dir: str
    metrics: list[str] = field(default_factory=list)
    options: dict[str, Any] = field(default_factory=dict)
    run_id: str = ""

    def __post_init__(self):
        if not self.run_id:
            blob = json.dumps({"command": self.command, "config": self.config, "options": self.options}, sort_keys=True)
            self.run_id = hashlib.sha1(blob.encode()).hexdigest()[:12]

    def write(self, path: Path) -> Path:
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


# -- configuration resolution --------------------------------------------


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _split_flat(raw: dict[str, Any], source: str) -> dict[str, dict[str, Any]]:
    parts: dict[str, dict[str, Any]] = {"model": {}, "optim": {}, "run": {}}
    for k, v in raw.items():
        if k in MODEL_KEYS:
            parts["model"][k] = v
        elif k in OPTIM_KEYS:
            parts["optim"][k] = v
        elif k in RUN_KEYS:
            parts["run"][k] = v
        else:
            raise ConfigError(f"{source}: unknown key {k!r}")
    return parts


def load_config_file(path: str | Path) -> dict[str, dict[str, Any]]:
    """YAML or JSON mapping whose keys are model, optimizer or run field names."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return _split_flat(raw, str(path))


def _parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _parse_clip(text: str) -> float | None:
    return None if str(text).lower() in ("none", "off", "0") else float(text)


def _overrides(args: argparse.Namespace) -> dict[str, dict[str, Any]]:
    m: dict[str, Any] = {}
    o: dict[str, Any] = {}
    r: dict[str, Any] = {}
    direct = {"seed": "seed", "dtype": "dtype", "seq": "S", "batch": "B", "layers": "layers", "d": "d", "I": "I", "V": "V", "heads": "heads", "G": "G", "rope": "rope"}
    for flag, key in direct.items():
        v = getattr(args, flag, None)
        if v is not None:
            m[key] = v
    ms = {}
    if args.m_mlp is not None:
        ms["M_mlp"] = args.m_mlp
    if args.m_head is not None:
        ms["M_head"] = args.m_head
    if getattr(args, "loss_mode", None) is not None:
        ms["loss_mode"] = args.loss_mode
    if ms:
        m["miniseq"] = ms
    if args.recompute is not None:
        m["recompute"] = {"enabled": args.recompute}
    for flag, key in (("accum", "accum_steps"), ("in_backward", "in_backward"), ("lr", "lr"), ("weight_decay", "weight_decay"), ("eps", "eps")):
        v = getattr(args, flag, None)
        if v is not None:
            o[key] = v
    if args.clip_norm is not None:
        o["clip_norm"] = _parse_clip(args.clip_norm)
    if args.beta1 is not None or args.beta2 is not None:
        b1, b2 = OptimConfig().betas
        o["betas"] = [args.beta1 if args.beta1 is not None else b1, args.beta2 if args.beta2 is not None else b2]
    if getattr(args, "steps", None) is not None:
        r["steps"] = args.steps
    if getattr(args, "data", None) is not None:
        r["data"] = args.data
    return {"model": m, "optim": o, "run": r}


def _normalise_model(raw: dict[str, Any]) -> dict[str, Any]:
    raw = dict(raw)
    rc = raw.get("recompute")
    if isinstance(rc, bool):
        raw["recompute"] = {"enabled": rc}
    return raw


def resolve_config(args: argparse.Namespace) -> RunConfig:
    base: dict[str, dict[str, Any]] = {"model": {}, "optim": {}, "run": {}}
    if args.manifest:
        snap = RunManifest.read(args.manifest).config
        base = {k: dict(snap.get(k, {})) for k in base}
    elif args.config:
        base = load_config_file(args.config)
    ov = _overrides(args)
    src = args.config or args.manifest or "flags"
    model_raw = _merge(_normalise_model(base["model"]), _normalise_model(ov["model"]))
    optim_raw = _merge(base["optim"], ov["optim"])
    run_raw = _merge(base["run"], ov["run"])
    try:
        model = ModelConfig.from_dict(model_raw)
    except (ConfigError, ValueError, TypeError) as exc:
        raise ConfigError(f"{src}: {exc}") from exc
    try:
        if "betas" in optim_raw:
            optim_raw["betas"] = tuple(optim_raw["betas"])
        optim = OptimConfig(**optim_raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{src}: {exc}") from exc
    unknown = set(run_raw) - RUN_KEYS
    if unknown:
        raise ConfigError(f"{src}: unknown key(s) {sorted(unknown)}")
    return RunConfig(model, optim, **run_raw)


# -- output helpers ------------------------------------------------------


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def _start(args: argparse.Namespace, rc: RunConfig, metrics: list[str]) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    options = {k: getattr(args, k) for k in SUB_OPTIONS[args.command]}
    man = RunManifest(args.command, rc.to_dict(), rc.model.seed, str(out), metrics, options)
    man.write(out / "manifest.json")
    log.info("run %s -> %s", man.run_id, out)
    return out


# -- subcommands ---------------------------------------------------------


def cmd_train(args: argparse.Namespace) -> int:
    rc = resolve_config(args)
    out = _start(args, rc, ["metrics.csv", "final.mstw"])
    cfg, ocfg = rc.model, rc.optim
    per_step = ocfg.accum_steps * cfg.B * cfg.S
    if rc.data:
        tf = TokenFile(rc.data, cfg.V)
    else:
        tf = synth_corpus(cfg.seed, cfg.V, rc.steps * per_step, out / "data.bin")
    trainer = Trainer(cfg, ocfg)
    rows = []
    cursor = 0
    for _ in range(rc.steps):
        batches = []
        for _ in range(ocfg.accum_steps):
            b, cursor = next_batch(tf, cursor, cfg.B, cfg.S)
            batches.append(b.as_tuple())
        m = trainer.step(batches)
        rows.append((m.step, m.loss, m.grad_norm, m.peak_bytes, m.flops))
        log.info("step %d loss %.6f grad_norm %.4f", m.step, m.loss, m.grad_norm)
    write_csv(out / "metrics.csv", METRICS_HEADER, rows)
    with memtrack.use_tracker(trainer.tracker):
        save_checkpoint(out / "final.mstw", cfg, trainer.weights)
    print(f"trained {rc.steps} steps; final loss {rows[-1][1]:.6f}" if rows else "no steps run")
    return 0


def _profiled_step(cfg: ModelConfig, ocfg: OptimConfig) -> dict[str, Any]:
    from .model import backward, forward
    from .optim import InBackwardStepper, adamw_step

    trainer = Trainer(cfg, ocfg, tracker=memtrack.Tracker(record_events=False))
    tokens, labels = random_batch(cfg, cfg.seed)
    tr = trainer.tracker
    with memtrack.use_tracker(tr):
        tr.region_begin("step")
        t0 = time.perf_counter()
        c0 = tr.counters.copy()
        _, saved = forward(cfg, trainer.weights, tokens, labels)
        c1 = tr.counters.copy()
        if ocfg.in_backward:
            backward(cfg, trainer.weights, saved, hook=InBackwardStepper(trainer.weights, trainer.state, ocfg))
            c2 = tr.counters.copy()
        else:
            grads = backward(cfg, trainer.weights, saved)
            c2 = tr.counters.copy()
            adamw_step(trainer.weights, grads, trainer.state, ocfg)
            grads.free()
        elapsed = time.perf_counter() - t0
        rep, _ = tr.region_end("step")
    trainer.free()
    return {
        "peak_bytes": rep.abs_peak_bytes,
        "mlp_inter": rep.class_peak("inter/mlp."),
        "head_inter": rep.class_peak("inter/head."),
        "inter": rep.class_peak("inter/"),
        "flops": (c1 - c0).flops,
        "bwd_flops": (c2 - c1).flops,
        "time": elapsed,
        "report": rep,
    }


def cmd_sweep_m(args: argparse.Namespace) -> int:
    rc = resolve_config(args)
    out = _start(args, rc, ["metrics.csv", "timing.csv"])
    ms = [int(x) for x in args.m_list.split(",")]
    rows, times = [], []
    for m in ms:
        kw = {"M_mlp": m} if args.component == "mlp" else {"M_head": m}
        cfg = rc.model.replace(miniseq=dataclasses.replace(rc.model.miniseq, **kw))
        r = _profiled_step(cfg, rc.optim)
        block = r["mlp_inter"] if args.component == "mlp" else r["head_inter"]
        rows.append((m, r["peak_bytes"], block, r["flops"], r["bwd_flops"]))
        times.append((m, r["time"]))
        print(f"M={m:>4} peak={r['peak_bytes']} {args.component}_intermediate={block} flops={r['flops']}")
    write_csv(out / "metrics.csv", ("M", "peak_bytes", f"{args.component}_intermediate_bytes", "flops", "bwd_flops"), rows)
    write_csv(out / "timing.csv", ("M", "step_time_s"), times)
    return 0


def cmd_estimate(args: argparse.Namespace) -> int:
    rc = resolve_config(args)
    out = _start(args, rc, ["metrics.csv"])
    if args.preset == "llama3-8b":
        cfg = llama3_8b(S=args.seq or 4096, B=args.batch or 1)
        cfg = cfg.replace(miniseq=rc.model.miniseq, recompute=rc.model.recompute)
        bm = BF16_MIXED
    else:
        cfg = rc.model
        bm = ByteModel.uniform(cfg.itemsize)
    br = predict_peak(cfg, in_backward=rc.optim.in_backward, accum=rc.optim.accum_steps, bytes_model=bm)
    tracked = None
    if args.compare:
        if args.preset:
            raise ConfigError("--compare runs a tracked step and needs a desk-scale config, not a preset")
        tracked = _profiled_step(cfg, rc.optim)["peak_bytes"] if rc.optim.accum_steps == 1 else None
    rows = [(k, v, round(gib(v), 3), br.formulas.get(k, "")) for k, v in br.rows().items()]
    header = ("component", "bytes", "gib", "formula")
    if tracked is not None:
        rows.append(("tracked-total", tracked, round(gib(tracked), 3), "measured"))
    write_csv(out / "metrics.csv", header, rows)
    print(f"peak phase: {br.phase}")
    for k, v, g, _ in rows:
        print(f"{k:>18} {v:>16} B {g:>10.3f} GiB")
    return 0


def cmd_max_seq(args: argparse.Namespace) -> int:
    rc = resolve_config(args)
    out = _start(args, rc, ["metrics.csv"])
    res = max_seq(rc.model, rc.optim, args.budget_bytes, quantum=args.quantum, limit=args.limit, seed=rc.model.seed)
    rows = [(s, p, int(p <= args.budget_bytes)) for s, p in res.probes.items()]
    write_csv(out / "metrics.csv", ("S", "peak_bytes", "fits"), rows)
    print(f"max S = {res.S} (peak {res.peak} B <= budget {args.budget_bytes} B)")
    return 0


def cmd_sp_sim(args: argparse.Namespace) -> int:
    rc = resolve_config(args)
    out = _start(args, rc, ["metrics.csv"])
    cfg = rc.model
    from .model import init_weights

    with memtrack.use_tracker(memtrack.Tracker(record_events=False)):
        weights = init_weights(cfg).numpy()
    sim = SeqParSim(cfg, args.workers, weights, threads=args.threads, optimizer_state=True)
    res = sim.train_step(*random_batch(cfg, cfg.seed))
    sim.free()
    rows = [(r, p, a) for r, (p, a) in enumerate(zip(res.peak_bytes(), res.activation_peaks()))]
    write_csv(out / "metrics.csv", ("rank", "peak_bytes", "activation_peak_bytes"), rows)
    print(f"loss {res.loss!r}; per-worker peak {max(res.peak_bytes())} B")
    if args.budget_bytes:
        ms = sp_max_seq(cfg, args.workers, args.budget_bytes, quantum=args.quantum, limit=args.limit, seed=cfg.seed)
        write_csv(out / "max_seq.csv", ("S", "peak_bytes", "fits"), [(s, p, int(p <= args.budget_bytes)) for s, p in ms.probes.items()])
        print(f"max S with {args.workers} workers = {ms.S}")
    return 0


def cmd_gen_data(args: argparse.Namespace) -> int:
    rc = resolve_config(args)
    out = _start(args, rc, ["metrics.csv", "data.bin"])
    seed = rc.model.seed
    vocab = args.vocab or rc.model.V
    path = Path(args.path) if args.path else out / "data.bin"
    tf = synth_corpus(seed, vocab, args.tokens, path)
    h_sample = sample_entropy(tf.read(0, tf.count), vocab) if tf.count else 0.0
    h_chain = MarkovChain.from_seed(seed, vocab).unigram_entropy()
    write_csv(out / "metrics.csv", ("path", "tokens", "vocab", "sample_entropy", "chain_entropy"), [(args.path or "data.bin", tf.count, vocab, h_sample, h_chain)])
    print(f"wrote {tf.count} tokens to {path}")
    return 0


def cmd_mem_timeline(args: argparse.Namespace) -> int:
    rc = resolve_config(args)
    out = _start(args, rc, ["metrics.csv", "timeline.csv"])
    r = _profiled_step_timeline(rc)
    memtrack.export_timeline(r, out / "timeline.csv")
    classes = ("weight/", "grad/", "optim/", "act/", "inter/", "attn/", "tmp/")
    rows = [(c.rstrip("/"), r.class_peak(c, absolute=True), r.at_peak(c)) for c in classes]
    rows.append(("total", r.abs_peak_bytes, r.abs_peak_bytes))
    write_csv(out / "metrics.csv", ("class", "class_peak_bytes", "bytes_at_peak"), rows)
    print(f"{len(r.events)} events; peak {r.abs_peak_bytes} B")
    return 0


def _profiled_step_timeline(rc: RunConfig) -> memtrack.MemReport:
    trainer = Trainer(rc.model, rc.optim, tracker=memtrack.Tracker(record_events=True))
    tr = trainer.tracker
    batches = [random_batch(rc.model, rc.model.seed + k) for k in range(rc.optim.accum_steps)]
    tr.region_begin("step")
    trainer.step(batches)
    rep, _ = tr.region_end("step")
    trainer.free()
    return rep


# -- argument parsing ----------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("common")
    g.add_argument("--config", help="YAML/JSON config file")
    g.add_argument("--manifest", help="replay the configuration of an earlier run")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", default="runs/latest")
    g.add_argument("--dtype", choices=("f64", "f32"))
    g.add_argument("--m-mlp", type=int)
    g.add_argument("--m-head", type=int)
    g.add_argument("--loss-mode", choices=("token-weighted", "paper-mean"))
    g.add_argument("--recompute", type=_parse_bool, metavar="BOOL")
    g.add_argument("--accum", type=int)
    g.add_argument("--in-backward", type=_parse_bool, metavar="BOOL")
    g.add_argument("--lr", type=float)
    g.add_argument("--weight-decay", type=float)
    g.add_argument("--clip-norm", help="float, or 'none' to disable")
    g.add_argument("--beta1", type=float)
    g.add_argument("--beta2", type=float)
    g.add_argument("--eps", type=float)
    g.add_argument("--seq", type=int, help="sequence length S")
    g.add_argument("--batch", type=int, help="micro-batch size B")
    g.add_argument("--layers", type=int)
    g.add_argument("--d", type=int)
    g.add_argument("--I", type=int)
    g.add_argument("--V", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--G", type=int)
    g.add_argument("--rope", type=_parse_bool, metavar="BOOL")
    g.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mstrain", description="mini-sequence transformer training engine")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a token file (synthetic if none given)")
    _common(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--data", help="uint32 token file")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sweep-m", help="peak memory and FLOPs across mini-sequence counts")
    _common(p)
    p.add_argument("--component", choices=("mlp", "head"))
    p.add_argument("--m-list", help="comma-separated M values (default 1,2,4,8,16,32)")
    p.set_defaults(fn=cmd_sweep_m)

    p = sub.add_parser("estimate", help="analytic memory breakdown")
    _common(p)
    p.add_argument("--preset", choices=("llama3-8b",))
    p.add_argument("--compare", action="store_true", default=None, help="also run a tracked step and report its peak")
    p.set_defaults(fn=cmd_estimate)

    p = sub.add_parser("max-seq", help="largest trainable S under a byte budget")
    _common(p)
    p.add_argument("--budget-bytes", type=int, help="required unless replaying a manifest")
    p.add_argument("--quantum", type=int, help="S granularity (default 64)")
    p.add_argument("--limit", type=int, help="largest S probed (default 65536)")
    p.set_defaults(fn=cmd_max_seq)

    p = sub.add_parser("sp-sim", help="sequence-parallel simulation")
    _common(p)
    p.add_argument("--workers", type=int, help="required unless replaying a manifest")
    p.add_argument("--budget-bytes", type=int, help="also search the largest S per worker count")
    p.add_argument("--threads", action="store_true", default=None)
    p.add_argument("--quantum", type=int)
    p.add_argument("--limit", type=int)
    p.set_defaults(fn=cmd_sp_sim)

    p = sub.add_parser("gen-data", help="write a synthetic Markov token file")
    _common(p)
    p.add_argument("--vocab", type=int)
    p.add_argument("--tokens", type=int, help="default 1000000")
    p.add_argument("--path")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("mem-timeline", help="export the allocation timeline of one step")
    _common(p)
    p.set_defaults(fn=cmd_mem_timeline)
    return ap


def _fill_options(args: argparse.Namespace) -> None:
    """Subcommand options: command line, then the replayed manifest, then defaults."""
    if args.manifest:
        man = RunManifest.read(args.manifest)
        if man.command == args.command:
            for k, v in man.options.items():
                if getattr(args, k, None) is None:
                    setattr(args, k, v)
    for k, default in SUB_OPTIONS[args.command].items():
        if getattr(args, k, None) is None:
            if default is _REQUIRED:
                raise ConfigError(f"{args.command}: --{k.replace('_', '-')} is required")
            setattr(args, k, default)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _fill_options(args)
        return args.fn(args)
    except (ConfigError, EndOfData, BudgetTooSmall, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
