"""rgsearch command line: gen, build, search, eval.

Exit codes: 0 success, 2 usage or validation error, 3 I/O failure,
4 too many reranker failures.

Any subcommand accepts ``--config FILE`` holding ``key = value`` lines whose
keys are long flag names (``budgets = 100,300``). Flags given on the
command line win over the file.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .core import (
    InvalidInputError,
    LoadError,
    QueryRecord,
    atomic_write,
    load_corpus,
    load_qrels,
    load_queries,
    save_corpus,
    save_qrels,
    save_queries,
)
from .graph_index import GRAPH_KINDS, BuildParams, build_index, load_index, save_index
from .reranker import API_KEY_ENV, BACKEND_KINDS, BackendSpec, HttpRerankerConfig, make_backend
from .search import (
    START_STRATEGIES,
    RgsParams,
    random_scan_search,
    retrieve_and_rerank,
    rgs_search,
    slidegar_search,
    write_traces,
)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_BACKEND = 0, 2, 3, 4

log = logging.getLogger("rgsearch")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 by default; keep the message format ours
        self.print_usage(sys.stderr)
        raise CliError(message, EXIT_USAGE)


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in str(text).replace(" ", "").split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    return [x for x in str(text).replace(" ", "").split(",") if x]


def _perturb_spec(text: str) -> tuple[str, float, int]:
    """``target:w`` or ``target:w:seed``."""
    parts = str(text).split(":")
    if len(parts) not in (2, 3) or parts[0] not in ("query", "document"):
        raise argparse.ArgumentTypeError(f"expected query:W or document:W[:SEED], got {text!r}")
    try:
        w = float(parts[1])
        seed = int(parts[2]) if len(parts) == 3 else 0
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad number in {text!r}") from None
    return parts[0], w, seed


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file with defaults for any long flag")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _add_data(p: argparse.ArgumentParser, queries: bool = True, qrels: bool = True) -> None:
    p.add_argument("--corpus", help="corpus file (.jsonl or binary)")
    if queries:
        p.add_argument("--queries", help="query file (.jsonl or binary)")
    if qrels:
        p.add_argument("--qrels", help="TREC qrels file")
    p.add_argument("--no-normalize", action="store_true", help="keep embeddings as stored instead of L2-normalising")


def _add_backend(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("reranker backend")
    g.add_argument("--backend", choices=BACKEND_KINDS, default="oracle")
    g.add_argument("--sigma", type=float, default=0.0, help="noise level of noisy_oracle")
    g.add_argument("--backend-seed", type=int, default=0)
    g.add_argument("--endpoint", help=f"http_llm endpoint URL; the key is read from ${API_KEY_ENV}")
    g.add_argument("--model", help="http_llm model name")
    g.add_argument("--template", default="rankgpt_v1")
    g.add_argument("--response-path", default="choices.0.message.content")
    g.add_argument("--max-retries", type=int, default=3)
    g.add_argument("--timeout", type=float, default=60.0)
    g.add_argument("--rate-limit", type=float, default=0.0, help="max requests per second (0 = unlimited)")


def _add_search_params(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("search")
    g.add_argument("--window", type=int, default=10, help="reranker window size")
    g.add_argument("--slidegar-window", type=int, default=20)
    g.add_argument("--ls", type=int, help="RGS search list size (default scales with the budget)")
    g.add_argument("--start", choices=START_STRATEGIES, default="exact", help="RGS start points")
    g.add_argument("--noisy-rank", type=int, default=1000, help="1-based similarity rank of noisy start points")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--max-failed", type=int, help="exit 4 when more queries (eval) or windows (search) fail")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rgsearch", description="Budgeted reranker-guided retrieval over proximity graphs.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="write a synthetic corpus, queries and qrels")
    _add_common(p)
    p.add_argument("--preset", choices=("hard", "easy"), default="hard")
    for name, typ in (
        ("n", int),
        ("dim", int),
        ("clusters", int),
        ("queries", int),
        ("relevant-per-query", int),
        ("cluster-spread", float),
        ("planted-rank-offset", int),
        ("seed", int),
        ("bridge-fraction", float),
    ):
        p.add_argument(f"--{name}", type=typ, help="override the preset")
    p.add_argument("--format", choices=("jsonl", "bin"), default="jsonl", help="corpus file format")
    p.add_argument("--out", required=False, help="output directory")

    p = sub.add_parser("build", help="build a proximity graph index")
    _add_common(p)
    _add_data(p, queries=False, qrels=False)
    p.add_argument("--graph", choices=GRAPH_KINDS, default="diskann")
    p.add_argument("--R", type=int, default=32, help="degree bound")
    p.add_argument("--L-build", type=int, default=64, help="construction beam width")
    p.add_argument("--alpha", type=float, default=1.2)
    p.add_argument("--degree", type=int, default=16, help="out-degree of knn and random graphs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="index file to write")

    p = sub.add_parser("search", help="answer one query and print the top 10")
    _add_common(p)
    _add_data(p)
    p.add_argument("--index", help="index file from `rgsearch build`")
    p.add_argument("--knn-index", help="knn graph for slidegar (built on the fly when omitted)")
    p.add_argument("--method", choices=("rgs", "rr", "slidegar", "random"), default="rgs")
    p.add_argument("--budget", type=int, default=100)
    p.add_argument("--qid", help="query id in --queries")
    p.add_argument("--vector", help="comma-separated query embedding")
    p.add_argument("--text", help="query text (for http_llm)")
    p.add_argument("--trace", default="trace.jsonl", help="trace output (JSON lines)")
    _add_backend(p)
    _add_search_params(p)

    p = sub.add_parser("eval", help="run a Reranker@k sweep")
    _add_common(p)
    _add_data(p)
    p.add_argument("--index", help="prebuilt DiskANN index (built when omitted)")
    p.add_argument("--methods", type=_str_list, default=["rr", "rgs"], help="comma list of rr,slidegar,rgs,random")
    p.add_argument("--budgets", type=_int_list, default=[100, 300, 500])
    p.add_argument("--graph", choices=GRAPH_KINDS, default="diskann", help="graph RGS expands")
    p.add_argument("--degree", type=int, default=16, help="out-degree of knn and random graphs")
    p.add_argument("--perturb", type=_perturb_spec, help="query:W or document:W[:SEED]")
    p.add_argument("--renormalize", action="store_true", help="renormalise perturbed embeddings")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out", default="results", help="output directory")
    p.add_argument("--no-plots", action="store_true")
    _add_backend(p)
    _add_search_params(p)
    return parser


# ---------------------------------------------------------------------------
# Config file
# ---------------------------------------------------------------------------

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def read_config(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}") from None
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}", EXIT_IO) from None
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_").lstrip("_")] = value
    return values


def _apply_config(sub: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in values.items():
        action = actions.get(key)
        if action is None or key in ("config", "help"):
            raise CliError(f"config: unknown key {key!r}")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            lowered = value.lower()
            if lowered not in _TRUE | _FALSE:
                raise CliError(f"config: {key} expects true/false, got {value!r}")
            flag = lowered in _TRUE
            defaults[key] = flag if isinstance(action, argparse._StoreTrueAction) else not flag
            continue
        if action.choices is not None and value not in action.choices:
            raise CliError(f"config: {key} must be one of {', '.join(map(str, action.choices))}")
        # argparse runs string defaults through the action's type
        defaults[key] = value
    sub.set_defaults(**defaults)


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        _apply_config(sub, read_config(args.config))
        args = parser.parse_args(argv)
    return args


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _need(args, *names: str) -> None:
    for name in names:
        if getattr(args, name, None) is None:
            raise CliError(f"--{name.replace('_', '-')} is required")


def _existing(path: str, what: str) -> str:
    if not Path(path).is_file():
        raise CliError(f"{what} not found: {path}")
    return path


def _load_corpus(args):
    _need(args, "corpus")
    return load_corpus(_existing(args.corpus, "corpus"), normalize=not args.no_normalize)


def _load_queries(args):
    _need(args, "queries")
    return load_queries(_existing(args.queries, "queries"), normalize=not args.no_normalize)


def _load_qrels(args, corpus, required: bool):
    if args.qrels is None:
        if required:
            raise CliError(f"--qrels is required for the {args.backend} backend")
        return None
    return load_qrels(_existing(args.qrels, "qrels"), corpus)


def _backend_spec(args) -> BackendSpec:
    http = None
    if args.backend == "http_llm":
        if not args.endpoint or not args.model:
            raise CliError("http_llm backend needs --endpoint and --model")
        http = HttpRerankerConfig(
            endpoint=args.endpoint,
            model=args.model,
            template=args.template,
            max_retries=args.max_retries,
            timeout=args.timeout,
            rate_limit=args.rate_limit,
            response_path=args.response_path,
        )
    return BackendSpec(kind=args.backend, sigma=args.sigma, seed=args.backend_seed, http=http)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    from .eval.synthetic import EASY_FIXTURE, HARD_FIXTURE, SyntheticParams, gen_from_params

    _need(args, "out")
    params = (HARD_FIXTURE if args.preset == "hard" else EASY_FIXTURE).as_dict()
    for key in params:
        value = getattr(args, key, None)
        if value is not None:
            params[key] = value
    corpus, queries, qrels = gen_from_params(SyntheticParams(**params))
    out = Path(args.out)
    corpus_path = out / ("corpus.bin" if args.format == "bin" else "corpus.jsonl")
    save_corpus(corpus, corpus_path, format=args.format)
    save_queries(queries, out / "queries.jsonl")
    save_qrels(qrels, out / "qrels.txt")
    print(f"wrote {len(corpus)} documents, {len(queries)} queries, {len(qrels)} judgments to {out}")
    return EXIT_OK


def cmd_build(args) -> int:
    _need(args, "out")
    corpus = _load_corpus(args)
    params = BuildParams(R=args.R, L_build=args.L_build, alpha=args.alpha, seed=args.seed)
    index = build_index(corpus, args.graph, params, degree=args.degree)
    save_index(index, args.out)
    s = index.stats()
    print(f"kind\t{s['kind']}")
    print(f"vertices\t{s['n']}")
    print(f"max_degree\t{s['max_degree']}")
    print(f"mean_degree\t{s['mean_degree']:.3f}")
    print(f"reachable_pct\t{s['reachable_pct']:.2f}")
    print(f"default_start\t{s['default_start']}")
    return EXIT_OK


def _query_from_args(args, corpus) -> tuple[QueryRecord, list[QueryRecord]]:
    if args.qid is not None:
        queries = _load_queries(args)
        for q in queries:
            if q.qid == args.qid:
                return q, queries
        raise CliError(f"query {args.qid!r} not found in {args.queries}")
    if args.vector is not None:
        try:
            vec = np.array([float(x) for x in args.vector.split(",")], dtype=np.float32)
        except ValueError:
            raise CliError("--vector must be comma-separated numbers") from None
        if vec.shape[0] != corpus.dim:
            raise CliError(f"--vector has {vec.shape[0]} dimensions, corpus has {corpus.dim}")
        if not args.no_normalize:
            norm = float(np.linalg.norm(vec))
            if norm > 0:
                vec = vec / norm
        q = QueryRecord("query", vec, args.text)
        return q, [q]
    raise CliError("give --qid (with --queries) or --vector")


def cmd_search(args) -> int:
    corpus = _load_corpus(args)
    query, queries = _query_from_args(args, corpus)
    spec = _backend_spec(args)
    qrels = _load_qrels(args, corpus, required=spec.kind in ("oracle", "noisy_oracle"))
    backend = make_backend(spec, corpus, qrels, queries)
    index = None
    if args.method != "random":
        _need(args, "index")
        index = load_index(_existing(args.index, "index"), corpus)
    if args.method == "rgs":
        params = RgsParams(
            args.budget, ls=args.ls, window=args.window, start_strategy=args.start, noisy_rank=args.noisy_rank
        )
        ranked, trace = rgs_search(query, corpus, index, backend, params)
    elif args.method == "rr":
        ranked, trace = retrieve_and_rerank(query, corpus, index, backend, args.budget, args.window)
    elif args.method == "slidegar":
        if args.knn_index:
            knn = load_index(_existing(args.knn_index, "knn index"), corpus)
        else:
            knn = build_index(corpus, "knn", degree=16)
        ranked, trace = slidegar_search(query, corpus, knn, backend, args.budget, args.slidegar_window, index)
    else:
        ranked, trace = random_scan_search(query, corpus, backend, args.budget, args.seed, args.window)
    with atomic_write(args.trace, "w") as fh:
        write_traces([trace], fh)
    for pos, doc in enumerate(ranked.entries, 1):
        print(f"{pos}\t{doc}")
    led = trace.ledger
    print(
        f"# scanned={len(led.scanned)} calls={led.calls} doc_views={led.doc_views} failed_windows={trace.failed_windows}",
        file=sys.stderr,
    )
    if args.max_failed is not None and trace.hard_failures > args.max_failed:
        raise CliError(f"{trace.hard_failures} reranker calls failed (limit {args.max_failed})", EXIT_BACKEND)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .eval.runner import ConfigError, ExperimentConfig, Perturbation, run_experiment, write_outputs

    corpus = _load_corpus(args)
    queries = _load_queries(args)
    spec = _backend_spec(args)
    qrels = _load_qrels(args, corpus, required=True)
    perturbation = None
    if args.perturb is not None:
        target, w, seed = args.perturb
        perturbation = Perturbation(target, w, seed, args.renormalize)
    config = ExperimentConfig(
        methods=tuple(args.methods),
        budgets=tuple(args.budgets),
        backend=spec,
        perturbation=perturbation,
        graph_kind=args.graph,
        graph_degree=args.degree,
        start_strategy=args.start,
        noisy_rank=args.noisy_rank,
        window=args.window,
        slidegar_window=args.slidegar_window,
        ls=args.ls,
        seed=args.seed,
        jobs=args.jobs,
        max_failed=args.max_failed,
    )
    try:
        config.validate()
    except ConfigError as exc:
        raise CliError(f"invalid config field {exc.field!r}: {exc}") from None
    index = load_index(_existing(args.index, "index"), corpus) if args.index else None
    result = run_experiment(config, corpus, queries, qrels, index=index)
    write_outputs(result, args.out, plots=not args.no_plots)
    print("method\tbudget\tndcg10\tscanned\tcalls\ttokens_in\tfailed")
    for a in result.aggregates:
        print(f"{a.method}\t{a.budget}\t{a.ndcg10:.4f}\t{a.scanned:.1f}\t{a.calls:.1f}\t{a.tokens_in:.0f}\t{a.failed}")
    if result.failed_queries:
        print(f"# {result.failed_queries} query runs failed and are excluded from the means", file=sys.stderr)
    if args.max_failed is not None and result.failed_queries > args.max_failed:
        raise CliError(f"{result.failed_queries} query runs failed (limit {args.max_failed})", EXIT_BACKEND)
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "build": cmd_build, "search": cmd_search, "eval": cmd_eval}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"rgsearch: error: {exc}", file=sys.stderr)
        return exc.code
    except InvalidInputError as exc:
        print(f"rgsearch: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LoadError, OSError) as exc:
        print(f"rgsearch: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
