"""Run orchestration: declarative TOML configs, stages, persistence.

One stage per invocation. Every artifact is written atomically (temp file +
rename), metrics are append-only JSONL, and checkpoints use the binary
container from ``checkpoint``. Config validation errors name the offending
field, e.g. "paths.checkpoint_in: required for stage 'rl'".
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import checkpoint as ckpt
from . import evaluation, fileio, grpo, remote, sft, tasks
from .errors import ConfigError
from .genctl import GenConfig
from .policy import Arch, PolicyParams
from .tokens import Vocab

STAGES = (
    "gen-data",
    "distill",
    "sft",
    "rl",
    "eval",
    "eval-remote",
    "ablate",
    "report",
)

REPORT_COLUMNS = (
    "step",
    "reward_mean",
    "pg_loss",
    "kl_mean",
    "adv_mean",
    "mean_resp_len",
    "clip_ratio",
    "val_acc",
)


@dataclass
class RunConfig:
    stage: str
    seed: int
    raw: dict
    base_dir: Path
    out_dir: Path | None
    config_bytes: bytes

    def section(self, name: str) -> dict:
        value = self.raw.get(name, {})
        if not isinstance(value, dict):
            raise ConfigError(f"{name}: must be a table")
        return value

    def in_path(self, name: str, required: bool = True) -> Path | None:
        return self._path(name, required, output=False)

    def out_path(self, name: str, required: bool = True) -> Path | None:
        return self._path(name, required, output=True)

    def _path(self, name: str, required: bool, output: bool) -> Path | None:
        paths = self.section("paths")
        value = paths.get(name)
        if value is None:
            if required:
                raise ConfigError(f"paths.{name}: required for stage '{self.stage}'")
            return None
        p = Path(value)
        if not p.is_absolute():
            base = self.out_dir if (output and self.out_dir) else self.base_dir
            p = base / p
        if not output and not p.exists():
            raise ConfigError(f"paths.{name}: file not found: {p}")
        return p


def load_config(
    config_file, *, seed: int | None = None, out_dir: str | None = None
) -> RunConfig:
    config_path = Path(config_file)
    if not config_path.exists():
        raise ConfigError(f"config file not found: {config_path}")
    config_bytes = config_path.read_bytes()
    try:
        raw = tomllib.loads(config_bytes.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as e:
        raise ConfigError(f"config parse error: {e}") from e
    stage = raw.get("stage")
    if stage not in STAGES:
        raise ConfigError(f"stage: must be one of {STAGES}, got {stage!r}")
    if seed is None:
        seed = raw.get("seed")
    if seed is None:
        raise ConfigError("seed: required (set in config or pass --seed)")
    return RunConfig(
        stage=stage,
        seed=int(seed),
        raw=raw,
        base_dir=config_path.parent,
        out_dir=Path(out_dir) if out_dir else None,
        config_bytes=config_bytes,
    )


def _build(cls, section: dict, prefix: str, defaults: dict | None = None):
    """Instantiate a config dataclass from a TOML table, naming bad fields."""
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = dict(defaults or {})
    for key, value in section.items():
        if key not in names:
            raise ConfigError(f"{prefix}.{key}: unknown field")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError as e:
        raise ConfigError(f"{prefix}: {e}") from e
    except TypeError as e:
        raise ConfigError(f"{prefix}: {e}") from e


def _gen_config(cfg: RunConfig, **overrides) -> GenConfig:
    section = dict(cfg.section("gen"))
    section.update(overrides)
    return _build(GenConfig, section, "gen", defaults={"seed": cfg.seed})


def _arch(cfg: RunConfig, vocab: Vocab) -> Arch:
    section = cfg.section("policy")
    return Arch(
        context=int(section.get("context", 16)),
        hidden=int(section.get("hidden", 64)),
        vocab_size=vocab.size,
    )


def _load_policy(cfg: RunConfig, path: Path) -> tuple[PolicyParams, Vocab]:
    loaded = ckpt.load_checkpoint(path)
    vocab = loaded.vocab or Vocab.default()
    return loaded.params, vocab


def _save_policy(cfg: RunConfig, path: Path, params, opt_state, vocab) -> None:
    ckpt.save_checkpoint(
        path,
        params,
        opt_state,
        vocab=vocab,
        config_bytes=cfg.config_bytes,
    )


def _read_dataset(path: Path) -> list[tasks.Example]:
    return tasks.load_examples(fileio.read_text(path))


# --- stages ---


def _stage_gen_data(cfg: RunConfig) -> str:
    data = cfg.section("data")
    kind = data.get("kind", "arithmetic")
    n = int(data.get("n", 100))
    if kind == "arithmetic":
        examples, traces = tasks.gen_arithmetic(
            seed=cfg.seed,
            n=n,
            max_digits=int(data.get("max_digits", 2)),
            ops=tuple(data.get("ops", ["+", "-", "*"])),
        )
    elif kind == "contextual-mcq":
        examples, traces = tasks.gen_contextual_mcq(
            seed=cfg.seed,
            n=n,
            n_options=int(data.get("n_options", 4)),
            planted_fraction=float(data.get("planted_fraction", 0.3)),
        )
    else:
        raise ConfigError(f"data.kind: unknown kind {kind!r}")
    dataset_path = cfg.out_path("dataset")
    traces_path = cfg.out_path("traces")
    fileio.atomic_write_text(dataset_path, tasks.dump_examples(examples))
    fileio.atomic_write_text(traces_path, tasks.dump_traces(traces))
    return f"gen-data: wrote {len(examples)} examples -> {dataset_path}"


def _make_teacher(cfg: RunConfig, vocab: Vocab):
    section = cfg.section("distill")
    teacher_kind = section.get("teacher", "oracle")
    if teacher_kind == "oracle":
        traces = tasks.load_traces(fileio.read_text(cfg.in_path("traces")))
        return sft.oracle_teacher(traces), vocab
    if teacher_kind == "policy":
        params, teacher_vocab = _load_policy(cfg, cfg.in_path("checkpoint_in"))
        gen_cfg = _gen_config(cfg)
        return sft.policy_teacher(params, teacher_vocab, gen_cfg), teacher_vocab
    if teacher_kind == "remote":
        endpoint = _build(
            remote.EndpointConfig, cfg.section("endpoint"), "endpoint"
        )
        gen_cfg = _gen_config(cfg)
        temperature = float(section.get("temperature", 1.0))

        def teach(example, rng):
            prompt = tasks.render_prompt(example, "train")
            return remote.generate_with_forced_exit(
                endpoint, prompt, gen_cfg, temperature=temperature
            ).text

        return teach, vocab
    raise ConfigError(f"distill.teacher: unknown teacher {teacher_kind!r}")


def _stage_distill(cfg: RunConfig) -> str:
    vocab = Vocab.default()
    examples = _read_dataset(cfg.in_path("dataset"))
    section = cfg.section("distill")
    teacher, vocab = _make_teacher(cfg, vocab)
    distill_cfg = sft.DistillConfig(
        keep_per_example=int(section.get("keep_per_example", 1)),
        max_seq_len=int(section.get("max_seq_len", 4096)),
        seed=cfg.seed,
    )
    corpus, stats = sft.distill(
        teacher, examples, int(section.get("k", 1)), distill_cfg, vocab
    )
    corpus_path = cfg.out_path("corpus")
    lines = "".join(
        _corpus_line(item, vocab) for item in corpus
    )
    fileio.atomic_write_text(corpus_path, lines)
    summary_path = cfg.out_path("corpus_summary", required=False)
    if summary_path:
        fileio.write_json(summary_path, stats.to_dict())
    return (
        f"distill: kept {stats.retained_targets} targets from "
        f"{stats.total_examples} examples ({stats.dropped_no_correct} dropped) "
        f"-> {corpus_path}"
    )


def _corpus_line(item: sft.SftItem, vocab: Vocab) -> str:
    import json

    return (
        json.dumps(
            {
                "example_id": item.example_id,
                "prompt": vocab.decode(item.prompt),
                "target": vocab.decode(item.target[item.mask][:-1])
                if item.target[item.mask][-1] == vocab.eos_id
                else vocab.decode(item.target[item.mask]),
            }
        )
        + "\n"
    )


def _read_corpus(path: Path, vocab: Vocab, max_seq_len: int) -> list[sft.SftItem]:
    import numpy as np

    items = []
    for d in fileio.read_jsonl(path):
        prompt = np.asarray(vocab.encode(d["prompt"]), dtype=np.int64)
        target = np.asarray(
            vocab.encode(d["target"]) + [vocab.eos_id], dtype=np.int64
        )
        room = max_seq_len - len(prompt)
        if room < len(target):
            target = target[: max(0, room)]
        if len(target) == 0:
            continue
        items.append(
            sft.SftItem(
                example_id=d["example_id"],
                prompt=prompt,
                target=target,
                mask=np.ones(len(target), dtype=bool),
            )
        )
    return items


def _stage_sft(cfg: RunConfig) -> str:
    vocab = Vocab.default()
    sft_cfg = _build(
        sft.SftConfig, cfg.section("sft"), "sft", defaults={"seed": cfg.seed}
    )
    checkpoint_in = cfg.in_path("checkpoint_in", required=False)
    if checkpoint_in:
        params, vocab = _load_policy(cfg, checkpoint_in)
    else:
        params = PolicyParams.init(
            _arch(cfg, vocab), seed=int(cfg.section("policy").get("init_seed", cfg.seed))
        )
    corpus = _read_corpus(cfg.in_path("corpus"), vocab, sft_cfg.max_seq_len)
    params, log = sft.sft_train(params, corpus, sft_cfg)
    out = cfg.out_path("checkpoint_out")
    _save_policy(cfg, out, params, None, vocab)
    log_path = cfg.out_path("sft_log", required=False)
    if log_path:
        fileio.write_json(log_path, log)
    return f"sft: {len(corpus)} targets, final loss {log[-1]['loss']:.4f} -> {out}"


def _stage_rl(cfg: RunConfig) -> str:
    params, vocab = _load_policy(cfg, cfg.in_path("checkpoint_in"))
    grpo_cfg = _build(
        grpo.GrpoConfig, cfg.section("grpo"), "grpo", defaults={"seed": cfg.seed}
    )
    train = _read_dataset(cfg.in_path("dataset"))
    val_path = cfg.in_path("val_dataset", required=False)
    val = _read_dataset(val_path) if val_path else None
    metrics_path = cfg.out_path("metrics")
    if metrics_path.exists():
        metrics_path.unlink()
    out = cfg.out_path("checkpoint_out")

    def checkpoint_cb(p, opt, step, why):
        _save_policy(cfg, out.with_suffix(f".step{step}{out.suffix}"), p, opt, vocab)

    io_section = cfg.section("grpo_io")
    params, metrics = grpo.rl_train_loop(
        params,
        vocab,
        train,
        grpo_cfg,
        val_examples=val,
        on_step=lambda rec: fileio.append_jsonl(metrics_path, rec),
        checkpoint_cb=checkpoint_cb,
        checkpoint_every=int(io_section.get("checkpoint_every", 0)),
    )
    _save_policy(cfg, out, params, None, vocab)
    last = metrics[-1] if metrics else {}
    return (
        f"rl: {len(metrics)} steps, final reward_mean "
        f"{last.get('reward_mean', float('nan')):.3f} -> {out}"
    )


def _eval_common(cfg: RunConfig, source, dataset, dataset_id: str, max_workers: int) -> str:
    eval_cfg = _build(
        evaluation.EvalRunConfig, cfg.section("eval"), "eval", defaults={"seed": cfg.seed}
    )
    report = evaluation.evaluate(
        source,
        dataset,
        eval_cfg,
        dataset_id=dataset_id,
        max_workers=max_workers,
    )
    report_path = cfg.out_path("report")
    fileio.atomic_write_text(report_path, report.to_json())
    csv_path = cfg.out_path("report_csv", required=False)
    if csv_path:
        fileio.atomic_write_text(csv_path, report.aggregates_csv())
    agg = report.aggregates
    greedy = agg["greedy_acc"]
    greedy_str = f"{greedy:.3f}" if greedy is not None else "n/a"
    return (
        f"eval: {agg['n_questions']} questions, greedy {greedy_str}, "
        f"avg {agg['avg_acc']:.3f}, majority {agg['majority_acc']:.3f}, "
        f"pass@n {agg['pass_at_n']:.3f} -> {report_path}"
    )


def _stage_eval(cfg: RunConfig) -> str:
    params, vocab = _load_policy(cfg, cfg.in_path("checkpoint_in"))
    dataset_path = cfg.in_path("dataset")
    dataset = _read_dataset(dataset_path)
    source = evaluation.LocalPolicySource(params, vocab, _gen_config(cfg))
    return _eval_common(cfg, source, dataset, str(dataset_path), max_workers=1)


def _stage_eval_remote(cfg: RunConfig) -> str:
    endpoint = _build(remote.EndpointConfig, cfg.section("endpoint"), "endpoint")
    dataset_path = cfg.in_path("dataset")
    dataset = _read_dataset(dataset_path)
    source = remote.RemoteSource(endpoint, _gen_config(cfg))
    return _eval_common(
        cfg, source, dataset, str(dataset_path), max_workers=endpoint.max_in_flight
    )


def _ablation_source(cfg: RunConfig, spec: str):
    if spec == "text-oracle":
        return evaluation.TextOracleSource()
    if spec == "remote":
        endpoint = _build(remote.EndpointConfig, cfg.section("endpoint"), "endpoint")
        return remote.RemoteSource(endpoint, _gen_config(cfg))
    if spec.startswith("checkpoint:"):
        path = Path(spec.split(":", 1)[1])
        if not path.is_absolute():
            path = cfg.base_dir / path
        if not path.exists():
            raise ConfigError(f"ablate source checkpoint not found: {path}")
        params, vocab = _load_policy(cfg, path)
        return evaluation.LocalPolicySource(params, vocab, _gen_config(cfg))
    raise ConfigError(f"ablate: unknown source {spec!r}")


def _stage_ablate(cfg: RunConfig) -> str:
    section = cfg.section("ablate")
    dataset = _read_dataset(cfg.in_path("dataset"))
    source_a = _ablation_source(cfg, section.get("source_a", "text-oracle"))
    source_b = _ablation_source(cfg, section.get("source_b", "text-oracle"))
    retained, report = evaluation.context_ablation_filter(
        source_a,
        source_b,
        dataset,
        samples_per_model=int(section.get("samples_per_model", 3)),
        mode=section.get("mode", "union"),
        temperature=float(section.get("temperature", 0.3)),
        max_tokens=int(section.get("max_tokens", 4096)),
        seed=cfg.seed,
    )
    retained_path = cfg.out_path("retained")
    fileio.atomic_write_text(retained_path, tasks.dump_examples(retained))
    report_path = cfg.out_path("ablation_report")
    fileio.atomic_write_text(report_path, report.to_json())
    return f"ablate: {report.format_line()} -> {retained_path}"


def _stage_report(cfg: RunConfig) -> str:
    records = fileio.read_jsonl(cfg.in_path("metrics"))
    rows = [",".join(REPORT_COLUMNS)]
    for rec in records:
        rows.append(
            ",".join(
                "" if rec.get(col) is None else repr(rec.get(col))
                for col in REPORT_COLUMNS
            )
        )
    csv_path = cfg.out_path("report_csv")
    fileio.atomic_write_text(csv_path, "\n".join(rows) + "\n")
    return f"report: {len(records)} steps -> {csv_path}"


_STAGE_FNS = {
    "gen-data": _stage_gen_data,
    "distill": _stage_distill,
    "sft": _stage_sft,
    "rl": _stage_rl,
    "eval": _stage_eval,
    "eval-remote": _stage_eval_remote,
    "ablate": _stage_ablate,
    "report": _stage_report,
}


def run(config_file, *, seed: int | None = None, out_dir: str | None = None) -> int:
    """Execute one stage; prints a one-line summary; non-zero exit on error."""
    try:
        cfg = load_config(config_file, seed=seed, out_dir=out_dir)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    try:
        summary = _STAGE_FNS[cfg.stage](cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"{cfg.stage} failed: {e}", file=sys.stderr)
        return 1
    print(summary)
    return 0
