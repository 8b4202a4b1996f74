"""Command-line interface.

Every option can also come from the environment (``POSTMARK_<OPTION>`` for the
shared ones, ``POSTMARK_<COMMAND>_<OPTION>`` otherwise) or from a JSON config
file passed with ``--config``. Flags beat the environment, which beats the file.

Exit codes: 0 success, 2 usage or input error, 3 key material or fingerprint
error, 4 backend failure.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import click

from .backends import BackendDescriptor, make_embedding_backend, make_instruction_backend
from .detection import DEFAULT_TAU, MatchEmbedder, apply_threshold, presence_score
from .evaluation import (
    DEFAULT_TARGET_FPR,
    calibrate_threshold,
    false_positive_rate,
    read_dataset,
    run_eval,
)
from .exceptions import BackendError, BatchEmbeddingError, InputError, KeyMaterialError, PostMarkError
from .insertion import DEFAULT_MAX_REPAIR_PASSES, insert_words
from .sectable import build_sectable, build_vocabulary, hubness_report, load_sectable, save_sectable
from .selection import (
    DEFAULT_K_PRIME_MULTIPLIER,
    DEFAULT_RATIO,
    DEFAULT_SUBLIST_SIZE,
    InsertionPolicy,
    WordEmbeddingCache,
    select_watermark_words,
)

logger = logging.getLogger("postmark")

EXIT_OK, EXIT_INPUT, EXIT_KEY, EXIT_BACKEND = 0, 2, 3, 4
_DESCRIPTOR_KEYS = ("embedder", "inserter", "attacker")
_CONFIG_ALIASES = {"table": "table_path", "input": "input_path", "output": "output_path"}


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, BatchEmbeddingError) and isinstance(exc.cause, InputError):
        exc = exc.cause
    if isinstance(exc, KeyMaterialError):
        return EXIT_KEY
    if isinstance(exc, (BackendError, BatchEmbeddingError)):
        return EXIT_BACKEND
    if isinstance(exc, (InputError, OSError)):
        return EXIT_INPUT
    return 1


def handled(fn):
    """Turn library errors into a one-line message and the matching exit code."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (PostMarkError, OSError) as exc:
            click.echo(f"error: {exc}", err=True)
            click.get_current_context().exit(exit_code(exc))
    return wrapper


def parse_descriptor(kind: str, value: str) -> BackendDescriptor:
    value = value.strip()
    if value.startswith("{"):
        try:
            data = json.loads(value)
        except ValueError:
            raise InputError(f"{kind} backend is not valid JSON") from None
        return BackendDescriptor.from_dict({"kind": kind, **data})
    return BackendDescriptor.parse(kind, value)


@dataclass
class RunConfig:
    """Resolved settings shared by the commands."""

    table_path: Path | None = None
    embedder: str | None = None
    inserter: str | None = None
    match_vectors: Path | None = None
    match_limit: int | None = None
    policy: InsertionPolicy = field(default_factory=InsertionPolicy)
    tau: float = DEFAULT_TAU
    threshold: float | str | None = None
    target_fpr: float = DEFAULT_TARGET_FPR
    word_cache: Path | None = None
    parallelism: int = 1

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise InputError("tau must be in (0, 1]")
        if isinstance(self.threshold, float) and not 0 <= self.threshold <= 1:
            raise InputError("threshold must be in [0, 1] or 'calibrate'")
        if self.parallelism < 1:
            raise InputError("parallelism must be a positive integer")

    def embedding_backend(self):
        if not self.embedder:
            raise InputError("no embedding backend given (--embedder)")
        return make_embedding_backend(parse_descriptor("embedding", self.embedder))

    def instruction_backend(self, spec=None):
        spec = spec or self.inserter
        if not spec:
            raise InputError("no instruction backend given (--inserter)")
        return make_instruction_backend(parse_descriptor("instruction", spec))

    def load_table(self, backend):
        if self.table_path is None:
            raise InputError("no table given (--table)")
        table = load_sectable(self.table_path)
        table.check_fingerprint(backend)
        if table.policy and table.policy != self.policy.to_dict():
            logger.warning("table was built for policy %s but %s is in use", table.policy, self.policy.to_dict())
        return table

    def load_match_embedder(self):
        if self.match_vectors is None:
            logger.info("no match vectors given; detection uses exact matches only")
            return None
        return MatchEmbedder.load(self.match_vectors, self.match_limit)

    def cache(self, backend):
        return WordEmbeddingCache(backend, self.word_cache)


def parse_threshold(value):
    if value is None or isinstance(value, float):
        return value
    value = str(value).strip()
    if value.lower() == "calibrate":
        return "calibrate"
    path = Path(value)
    if path.suffix == ".json" and path.is_file():
        return float(json.loads(path.read_text(encoding="utf-8"))["threshold"])
    try:
        return float(value)
    except ValueError:
        raise InputError(f"threshold must be a number, 'calibrate' or a calibration JSON file, not {value!r}") \
            from None


def load_config_file(path) -> dict:
    """Read the JSON config into a click ``default_map``.

    Top-level scalar keys apply to every command; an object keyed by a command
    name holds that command's settings and wins over the top level.
    """
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except ValueError as exc:
        raise InputError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise InputError("config file must hold a JSON object")

    def fix(section):
        out = {}
        for k, v in section.items():
            k = k.replace("-", "_")
            k = _CONFIG_ALIASES.get(k, k)
            out[k] = json.dumps(v) if k in _DESCRIPTOR_KEYS and isinstance(v, dict) else v
        return out

    shared = fix({k: v for k, v in data.items() if not (k in cli.commands and isinstance(v, dict))})
    return {name: {**shared, **fix(data.get(name, {}))} for name in cli.commands}


def _write_jsonl(fh, records):
    for rec in records:
        fh.write(json.dumps(rec) + "\n")


def _map(fn, items, jobs):
    if jobs == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# shared options -----------------------------------------------------------------

def _opt(*names, **kw):
    return click.option(*names, show_default=True, **kw)


table_opt = _opt("--table", "table_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
                 envvar="POSTMARK_TABLE", help="Secret table file (PMRK).")
embedder_opt = _opt("--embedder", envvar="POSTMARK_EMBEDDER",
                    help="Embedding backend, e.g. 'mock:seed=7,dim=256' or "
                         "'remote:endpoint=https://host/v1,model=m,token_env=API_KEY'.")
inserter_opt = _opt("--inserter", envvar="POSTMARK_INSERTER",
                    help="Instruction backend, e.g. 'mock:mode=oracle-inserter' or 'remote:endpoint=...,model=...'.")
match_opt = _opt("--match-vectors", type=click.Path(exists=True, dir_okay=False, path_type=Path),
                 envvar="POSTMARK_MATCH_VECTORS", help="Word vectors ('word v1 ... vd' per line) for matching.")
match_limit_opt = _opt("--match-limit", type=click.IntRange(min=1), default=None,
                       help="Read at most this many match vectors.")
cache_opt = _opt("--word-cache", type=click.Path(dir_okay=False, path_type=Path), default=None,
                 help="Persistent word embedding cache (PMWC).")
input_opt = _opt("--input", "input_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
                 required=True, help="JSONL documents with 'id' and 'text'.")
output_opt = _opt("--output", "output_path", type=click.Path(dir_okay=False, path_type=Path), default=None,
                  help="Output file (default: stdout).")
tau_opt = _opt("--tau", type=float, default=DEFAULT_TAU, help="Match cosine cutoff.")
fpr_opt = _opt("--target-fpr", type=float, default=DEFAULT_TARGET_FPR, help="False positive rate to calibrate at.")
jobs_opt = _opt("--jobs", type=click.IntRange(min=1), default=1, help="Documents processed in parallel.")


def policy_opts(fn):
    for opt in reversed([
        _opt("--ratio", type=float, default=DEFAULT_RATIO, help="Watermark words per input word."),
        _opt("--k-prime-multiplier", type=float, default=DEFAULT_K_PRIME_MULTIPLIER,
             help="Candidates kept before the semantic re-rank, as a multiple of k."),
        _opt("--sublist-size", type=click.IntRange(min=1), default=DEFAULT_SUBLIST_SIZE,
             help="Words per insertion prompt."),
    ]):
        fn = opt(fn)
    return fn


def _policy(kw) -> InsertionPolicy:
    return InsertionPolicy(kw.pop("ratio"), kw.pop("k_prime_multiplier"), kw.pop("sublist_size"))


def _open_out(path):
    return click.open_file(str(path) if path else "-", "w", encoding="utf-8", atomic=bool(path))


# commands -----------------------------------------------------------------------

@click.group(context_settings={"auto_envvar_prefix": "POSTMARK", "help_option_names": ["-h", "--help"]})
@click.option("--config", type=click.Path(exists=True, dir_okay=False), envvar="POSTMARK_CONFIG",
              help="JSON config file; flags and environment override it.")
@click.option("-v", "--verbose", count=True, help="More log output (repeatable).")
@click.pass_context
def cli(ctx, config, verbose):
    """Post-hoc text watermarking: build tables, watermark, detect, evaluate."""
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    if config:
        try:
            ctx.default_map = load_config_file(config)
        except InputError as exc:
            click.echo(f"error: {exc}", err=True)
            ctx.exit(EXIT_INPUT)


@cli.command("build-table")
@_opt("--frequencies", type=click.Path(exists=True, dir_okay=False), required=True,
      help="Word frequency file: word<TAB>count[<TAB>pos].")
@_opt("--lexicon", type=click.Path(exists=True, dir_okay=False), required=True,
      help="Part-of-speech lexicon: word<TAB>tag.")
@_opt("--snippets", type=click.Path(exists=True, dir_okay=False), required=True,
      help="Text snippets to embed, one per line or JSONL with 'text'.")
@_opt("--seed", type=int, required=True, envvar="POSTMARK_SEED", help="Secret key for the word/vector pairing.")
@embedder_opt
@_opt("--frequency-floor", type=click.IntRange(min=1), default=1000, help="Minimum corpus frequency.")
@_opt("--out", type=click.Path(dir_okay=False, path_type=Path), required=True, help="Table file to write.")
@_opt("--format-version", type=click.Choice(["1", "2"]), default="2", help="Table file format version.")
@_opt("--created-at", default=None, help="Timestamp recorded in the table metadata (omitted by default).")
@policy_opts
@handled
def build_table_cmd(frequencies, lexicon, snippets, seed, embedder, frequency_floor, out, format_version,
                    created_at, **kw):
    """Build a secret table and save it.

    The selection policy is recorded in the table so later commands can warn
    when they run with a different one.
    """
    cfg = RunConfig(embedder=embedder, policy=_policy(kw))
    backend = cfg.embedding_backend()
    vocab = build_vocabulary(frequencies, lexicon, frequency_floor)
    table = build_sectable(vocab, snippets, seed, backend, created_at=created_at, policy=cfg.policy.to_dict())
    save_sectable(table, out, version=int(format_version))
    click.echo(json.dumps({"table_id": table.table_id, "words": len(table), "dimension": table.dimension,
                           "embedder_fingerprint": table.embedder_fingerprint, "path": str(out)}))


@cli.command("watermark")
@table_opt
@embedder_opt
@inserter_opt
@input_opt
@output_opt
@policy_opts
@_opt("--max-repair-passes", type=click.IntRange(min=0), default=DEFAULT_MAX_REPAIR_PASSES)
@cache_opt
@jobs_opt
@handled
def watermark_cmd(table_path, embedder, inserter, input_path, output_path, max_repair_passes, word_cache,
                  jobs, **kw):
    """Insert watermark words into each document; writes one JSON outcome per line."""
    cfg = RunConfig(table_path=table_path, embedder=embedder, inserter=inserter, policy=_policy(kw),
                    word_cache=word_cache, parallelism=jobs)
    backend = cfg.embedding_backend()
    table = cfg.load_table(backend)
    inserter_backend = cfg.instruction_backend()
    records = read_dataset(input_path)
    if not records:
        raise InputError(f"{input_path} holds no documents")
    cache = cfg.cache(backend)

    def one(rec):
        words = select_watermark_words(rec["text"], table, cfg.policy, backend, cache=cache)
        outcome = insert_words(rec["text"], words, inserter_backend, cfg.policy, max_repair_passes)
        out = {"id": rec["id"], **outcome.to_dict()}
        if outcome.missing_words:
            out["warning"] = f"{len(outcome.missing_words)} of {len(words)} words could not be inserted"
        return out

    results = _map(one, records, cfg.parallelism)
    cache.flush()
    with _open_out(output_path) as fh:
        _write_jsonl(fh, results)
    incomplete = sum("warning" in r for r in results)
    if incomplete:
        click.echo(f"warning: {incomplete} of {len(results)} documents have missing words", err=True)


def _null_scores(cfg, table, backend, me, cache, path):
    records = read_dataset(path)
    if not records:
        raise InputError(f"{path} holds no documents")
    return _map(lambda r: presence_score(r["text"], table, cfg.policy, backend, me, cfg.tau, cache).score,
                records, cfg.parallelism)


@cli.command("calibrate")
@table_opt
@embedder_opt
@match_opt
@match_limit_opt
@input_opt
@output_opt
@policy_opts
@tau_opt
@fpr_opt
@cache_opt
@jobs_opt
@handled
def calibrate_cmd(table_path, embedder, match_vectors, match_limit, input_path, output_path, tau, target_fpr,
                  word_cache, jobs, **kw):
    """Pick a detection threshold from unwatermarked documents."""
    cfg = RunConfig(table_path=table_path, embedder=embedder, match_vectors=match_vectors,
                    match_limit=match_limit, policy=_policy(kw), tau=tau, target_fpr=target_fpr,
                    word_cache=word_cache, parallelism=jobs)
    backend = cfg.embedding_backend()
    table = cfg.load_table(backend)
    cache = cfg.cache(backend)
    scores = _null_scores(cfg, table, backend, cfg.load_match_embedder(), cache, input_path)
    threshold = calibrate_threshold(scores, target_fpr)
    cache.flush()
    with _open_out(output_path) as fh:
        fh.write(json.dumps({"threshold": threshold,
                             "target_fpr": target_fpr,
                             "achieved_fpr": round(false_positive_rate(scores, threshold), 6),
                             "n": len(scores), "table_id": table.table_id}) + "\n")


@cli.command("detect")
@table_opt
@embedder_opt
@match_opt
@match_limit_opt
@input_opt
@output_opt
@policy_opts
@tau_opt
@_opt("--threshold", default="calibrate",
      help="Score cutoff in [0, 1], 'calibrate' (needs --null-corpus), or a JSON file written by 'calibrate'.")
@_opt("--null-corpus", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None,
      help="Unwatermarked JSONL documents for --threshold calibrate.")
@fpr_opt
@_opt("--expose-matches/--no-expose-matches", default=False, help="Include matched words in the output.")
@cache_opt
@jobs_opt
@handled
def detect_cmd(table_path, embedder, match_vectors, match_limit, input_path, output_path, tau, threshold,
               null_corpus, target_fpr, expose_matches, word_cache, jobs, **kw):
    """Score documents; writes one JSON result per line and a final summary line."""
    threshold = parse_threshold(threshold)
    if threshold == "calibrate" and null_corpus is None:
        raise InputError("--threshold calibrate needs --null-corpus")
    cfg = RunConfig(table_path=table_path, embedder=embedder, match_vectors=match_vectors,
                    match_limit=match_limit, policy=_policy(kw), tau=tau, threshold=threshold,
                    target_fpr=target_fpr, word_cache=word_cache, parallelism=jobs)
    backend = cfg.embedding_backend()
    table = cfg.load_table(backend)
    me = cfg.load_match_embedder()
    cache = cfg.cache(backend)
    records = read_dataset(input_path)
    if not records:
        raise InputError(f"{input_path} holds no documents")
    if threshold == "calibrate":
        threshold = calibrate_threshold(_null_scores(cfg, table, backend, me, cache, null_corpus), target_fpr)

    def one(rec):
        result = apply_threshold(presence_score(rec["text"], table, cfg.policy, backend, me, cfg.tau, cache),
                                 threshold)
        return {"id": rec["id"], **result.to_dict(expose_matches=expose_matches)}

    results = _map(one, records, cfg.parallelism)
    cache.flush()
    summary = {"documents": len(results), "watermarked": sum(bool(r["verdict"]) for r in results),
               "threshold": round(threshold, 6), "table_id": table.table_id}
    with _open_out(output_path) as fh:
        _write_jsonl(fh, results + [{"summary": summary}])


@cli.command("eval")
@table_opt
@embedder_opt
@inserter_opt
@match_opt
@match_limit_opt
@_opt("--dataset", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True,
      help="JSONL documents with 'id' and 'text'.")
@_opt("--attack", type=click.Choice(["none", "paraphrase"]), default="none")
@_opt("--attacker", envvar="POSTMARK_ATTACKER", default=None, help="Instruction backend used as paraphraser.")
@policy_opts
@tau_opt
@fpr_opt
@_opt("--max-repair-passes", type=click.IntRange(min=0), default=DEFAULT_MAX_REPAIR_PASSES)
@_opt("--report", type=click.Path(dir_okay=False, path_type=Path), default=None,
      help="Write the JSON report (with per-document samples) here.")
@_opt("--sim/--no-sim", default=True, help="Measure embedding similarity of original and watermarked text.")
@_opt("--timing/--no-timing", default=True, help="Record runtime in the report (off for byte-stable output).")
@cache_opt
@handled
def eval_cmd(table_path, embedder, inserter, match_vectors, match_limit, dataset, attack, attacker, tau,
             target_fpr, max_repair_passes, report, sim, timing, word_cache, **kw):
    """Watermark, optionally attack, and report TPR at the target FPR."""
    cfg = RunConfig(table_path=table_path, embedder=embedder, inserter=inserter, match_vectors=match_vectors,
                    match_limit=match_limit, policy=_policy(kw), tau=tau, target_fpr=target_fpr,
                    word_cache=word_cache)
    backend = cfg.embedding_backend()
    table = cfg.load_table(backend)
    attacker_backend = None
    if attack == "paraphrase":
        if not attacker:
            raise InputError("--attack paraphrase needs --attacker")
        attacker_backend = cfg.instruction_backend(attacker)
    cache = cfg.cache(backend)
    result = run_eval(dataset, table, backend, cfg.instruction_backend(), cfg.load_match_embedder(), cfg.policy,
                      tau, target_fpr, attack, attacker_backend, sim, max_repair_passes, cache)
    cache.flush()
    if not timing:
        result.runtime_per_doc = None
    if report:
        with _open_out(report) as fh:
            fh.write(json.dumps(result.to_dict(), indent=2) + "\n")
    click.echo(result.render_table())
    if not result.valid:
        click.echo(f"warning: {result.n_failed} documents failed; report marked invalid", err=True)


@cli.command("hubness")
@table_opt
@embedder_opt
@input_opt
@output_opt
@policy_opts
@cache_opt
@handled
def hubness_cmd(table_path, embedder, input_path, output_path, word_cache, **kw):
    """How often each table word is selected across a document set."""
    cfg = RunConfig(table_path=table_path, embedder=embedder, policy=_policy(kw), word_cache=word_cache)
    backend = cfg.embedding_backend()
    table = cfg.load_table(backend)
    cache = cfg.cache(backend)
    records = read_dataset(input_path)
    if not records:
        raise InputError(f"{input_path} holds no documents")
    lists = [select_watermark_words(r["text"], table, cfg.policy, backend, cache=cache) for r in records]
    cache.flush()
    with _open_out(output_path) as fh:
        fh.write(json.dumps(hubness_report(lists).to_dict()) + "\n")


@cli.command("serve")
@table_opt
@embedder_opt
@inserter_opt
@match_opt
@match_limit_opt
@policy_opts
@tau_opt
@_opt("--threshold", default=None, help="Score cutoff, 'calibrate', or a calibration JSON file; "
                                        "without one /detect returns scores only.")
@_opt("--null-corpus", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None)
@fpr_opt
@_opt("--max-repair-passes", type=click.IntRange(min=0), default=DEFAULT_MAX_REPAIR_PASSES)
@_opt("--expose-matches/--no-expose-matches", default=False, help="Return matched words from /detect.")
@_opt("--host", default="127.0.0.1")
@_opt("--port", type=int, default=8000)
@_opt("--parallelism", type=click.IntRange(min=1), default=4, help="Requests processed at once.")
@cache_opt
@handled
def serve_cmd(table_path, embedder, inserter, match_vectors, match_limit, tau, threshold, null_corpus,
              target_fpr, max_repair_passes, expose_matches, host, port, parallelism, word_cache, **kw):
    """Run the JSON HTTP service."""
    import uvicorn

    from .service import ServiceState, create_app

    threshold = parse_threshold(threshold)
    if threshold == "calibrate" and null_corpus is None:
        raise InputError("--threshold calibrate needs --null-corpus")
    cfg = RunConfig(table_path=table_path, embedder=embedder, inserter=inserter, match_vectors=match_vectors,
                    match_limit=match_limit, policy=_policy(kw), tau=tau, threshold=threshold,
                    target_fpr=target_fpr, word_cache=word_cache, parallelism=parallelism)
    state = ServiceState()
    app = create_app(state, parallelism)
    backend = cfg.embedding_backend()
    table = cfg.load_table(backend)
    me = cfg.load_match_embedder()
    cache = cfg.cache(backend)
    if threshold == "calibrate":
        threshold = calibrate_threshold(_null_scores(cfg, table, backend, me, cache, null_corpus), target_fpr)
        logger.info("calibrated threshold %.6f", threshold)
    state.load(table, backend, inserter=cfg.instruction_backend() if inserter else None, match_embedder=me,
               threshold=threshold, policy=cfg.policy, tau=tau, max_repair_passes=max_repair_passes,
               expose_matches=expose_matches, cache=cache)
    uvicorn.run(app, host=host, port=port, log_level="info")


def main(argv=None):
    return cli.main(args=argv, prog_name="postmark")


if __name__ == "__main__":
    main()
