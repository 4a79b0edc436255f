"""Operator command line: serve, generate, bench, train-router, inspect.

Settings resolve as flags > environment > config file > defaults. Every
flag has a config-file key (the flag name with dashes as underscores) and
an environment variable (``TOKENROUTE_`` prefix, upper-cased). Exit codes:
0 success, 2 usage, 3 invalid configuration or input, 4 engine/backend
failure, 5 transport/server failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import metrics as metrics_mod
from .clock import make_clock
from .engine import ByteTokenizer, load_weights, random_weights
from .orchestrator import (
    HttpClient,
    LatencyModel,
    LocalClient,
    ServerUnreachable,
    read_event_log,
    stream_generate,
)
from .router import load_router, random_router, save_router
from .server import EchoBackend, EngineBackend, ServingConfig, TokenServer
from .trainer import EmptyDataset, TrainConfig, build_dataset, make_rollout_labeler, save_dataset, train
from .types import GenerationConfig, KvPolicy, Mode, TokenRouteError, validate_config
from .wire import WireError, parse_request

ENV_PREFIX = "TOKENROUTE_"

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_ENGINE = 4
EXIT_TRANSPORT = 5

LLM_MARK_OPEN = "[["
LLM_MARK_CLOSE = "]]"


def _iter_parsers(parser: argparse.ArgumentParser):
    yield parser
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            seen = set()
            for sub in action.choices.values():
                if id(sub) not in seen:
                    seen.add(id(sub))
                    yield from _iter_parsers(sub)


def _overlay_defaults(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    """Apply config-file and environment overrides as parser defaults.

    Every flag's dest doubles as its config-file key and (upper-cased, with
    the package prefix) its environment variable.
    """
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv)
    file_values: dict = {}
    if known.config:
        with open(known.config, encoding="utf-8") as fh:
            file_values = json.load(fh)
        if not isinstance(file_values, dict):
            raise TokenRouteError(f"{known.config}: config file must hold a JSON object")

    for sub in _iter_parsers(parser):
        overrides: dict = {}
        for action in sub._actions:  # flag names are the source of truth
            if not action.option_strings or action.dest in ("help", "config"):
                continue
            key = action.dest
            if key in file_values:
                overrides[key] = file_values[key]
            env_name = ENV_PREFIX + key.upper()
            if env_name in os.environ:
                raw = os.environ[env_name]
                if isinstance(action.default, bool) or action.const is True:
                    overrides[key] = raw.lower() in ("1", "true", "yes", "on")
                elif action.type is not None:
                    overrides[key] = action.type(raw)
                else:
                    overrides[key] = raw
        if overrides:
            sub.set_defaults(**overrides)


def _add_latency_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--comm-delay-ms", type=float, default=170.0, help="injected client/server round trip")
    parser.add_argument("--llm-latency-ms", type=float, default=900.0, help="injected per-call serving latency")
    parser.add_argument("--reprefill-delay-ms", type=float, default=4.0, help="injected per-call re-prefill penalty")
    parser.add_argument("--burst", type=int, default=1, help="tokens the LLM emits per routed call")
    parser.add_argument("--no-latency-injection", action="store_true", help="disable simulated delays")
    parser.add_argument("--real-sleeps", action="store_true", help="injected delays actually sleep")


def _serving_config(args, backend) -> ServingConfig:
    return ServingConfig(
        backend=backend,
        llm_burst=args.burst,
        comm_delay_s=args.comm_delay_ms / 1000.0,
        llm_latency_s=args.llm_latency_ms / 1000.0,
        reprefill_delay_s_per_call=args.reprefill_delay_ms / 1000.0,
        max_sessions=getattr(args, "max_sessions", 64),
        inject_latency=not args.no_latency_injection,
    )


def _load_slm(args):
    if getattr(args, "weights", None):
        return load_weights(args.weights)
    return random_weights(seed=args.seed)


def _load_router_for(args, weights):
    if getattr(args, "router", None):
        return load_router(args.router, expected_dim=weights.d)
    return random_router(weights.d, seed=args.seed)


def _build_backend(args):
    if args.backend == "echo":
        return EchoBackend()
    llm_weights = load_weights(args.llm_weights) if getattr(args, "llm_weights", None) else random_weights(seed=args.llm_seed)
    return EngineBackend(llm_weights)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tokenroute",
        description="Token-level routing between a local small model and a cloud large model.",
    )
    parser.add_argument("--config", help="JSON config file; flags and env vars override it")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p_serve = sub.add_parser("serve", help="run the serving endpoint (and the device gateway)")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8700)
    p_serve.add_argument("--backend", choices=["reference", "echo"], default="reference")
    p_serve.add_argument("--llm-seed", type=int, default=42, help="seed for the reference LLM weights")
    p_serve.add_argument("--llm-weights", help="weight file for the reference LLM backend")
    p_serve.add_argument("--seed", type=int, default=0, help="seed for the gateway's small model")
    p_serve.add_argument("--weights", help="weight file for the gateway's small model")
    p_serve.add_argument("--router", help="router weight file for the gateway")
    p_serve.add_argument("--max-sessions", type=int, default=64)
    p_serve.add_argument("--console", nargs="?", const="frontend/dist", default=None,
                         help="serve console assets from DIR (default frontend/dist)")
    _add_latency_flags(p_serve)

    p_gen = sub.add_parser("generate", help="one-shot generation with provenance markers")
    p_gen.add_argument("--prompt", required=True)
    p_gen.add_argument("--mode", choices=[m.value for m in Mode], default="joint")
    p_gen.add_argument("--threshold", type=float, default=0.7)
    p_gen.add_argument("--max-tokens", type=int, default=100)
    p_gen.add_argument("--kv-policy", choices=[p.value for p in KvPolicy], default="incremental")
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--weights")
    p_gen.add_argument("--router")
    p_gen.add_argument("--llm-seed", type=int, default=42)
    p_gen.add_argument("--llm-weights")
    p_gen.add_argument("--backend", choices=["reference", "echo"], default="reference")
    p_gen.add_argument("--server-url", help="use a remote serving endpoint instead of in-process")
    p_gen.add_argument("--stream", action="store_true", help="print tokens as they are produced")
    p_gen.add_argument("--json", action="store_true", help="emit the full result summary as JSON")
    p_gen.add_argument("--events-out", help="write the session event log to this file")
    _add_latency_flags(p_gen)

    p_bench = sub.add_parser("bench", help="benchmarks")
    bench_sub = p_bench.add_subparsers(dest="bench_command", metavar="subcommand")
    p_sweep = bench_sub.add_parser("sweep", help="threshold sweep producing a results.csv")
    p_sweep.add_argument("--task", help="prompt/answer file (.jsonl or .csv)")
    p_sweep.add_argument("--oracle-task", action="store_true", help="use the synthetic oracle task")
    p_sweep.add_argument("--corruption", type=float, default=0.5)
    p_sweep.add_argument("--items", type=int, default=40)
    p_sweep.add_argument("--target-len", type=int, default=24)
    p_sweep.add_argument("--thresholds", default=",".join(str(t) for t in bench_mod.TABLE_GRID))
    p_sweep.add_argument("--out", required=True, help="output directory")
    p_sweep.add_argument("--max-tokens", type=int, default=100)
    p_sweep.add_argument("--kv-policy", choices=[p.value for p in KvPolicy], default="incremental")
    p_sweep.add_argument("--seed", type=int, default=0)
    p_sweep.add_argument("--weights")
    p_sweep.add_argument("--router")
    p_sweep.add_argument("--backend", choices=["reference", "echo"], default="reference")
    p_sweep.add_argument("--llm-seed", type=int, default=42)
    p_sweep.add_argument("--llm-weights")
    p_sweep.add_argument("--train-epochs", type=int, default=300, help="oracle-task router training epochs")
    p_sweep.add_argument("--scorer", choices=[s.value for s in bench_mod.Scorer], default="exact_match")
    _add_latency_flags(p_sweep)

    p_train = sub.add_parser("train-router", help="corpus -> dataset -> router weight file")
    p_train.add_argument("--corpus", required=True, help="text file (one sequence per line) or directory of .txt")
    p_train.add_argument("--out", required=True, help="router weight file to write")
    p_train.add_argument("--dataset-out", help="also save the labeled dataset container")
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--weights")
    p_train.add_argument("--llm-seed", type=int, default=42)
    p_train.add_argument("--llm-weights")
    p_train.add_argument("--epochs", type=int, default=200)
    p_train.add_argument("--learning-rate", type=float, default=1e-2)
    p_train.add_argument("--batch-size", type=int, default=32)
    p_train.add_argument("--l2-penalty", type=float, default=1e-4)
    p_train.add_argument("--class-balance", action="store_true",
                         help="weight examples inversely to class frequency")
    p_train.add_argument("--rollout-labeling", action="store_true",
                         help="resolve both-wrong positions by comparing short rollouts")
    p_train.add_argument("--rollout-horizon", type=int, default=8)

    p_inspect = sub.add_parser("inspect", help="dump parsed wire messages or event logs")
    inspect_sub = p_inspect.add_subparsers(dest="inspect_command", metavar="subcommand")
    p_iw = inspect_sub.add_parser("wire", help="validate and summarize a wire request file")
    p_iw.add_argument("file")
    p_ie = inspect_sub.add_parser("events", help="metrics summary of an event log")
    p_ie.add_argument("file")

    return parser


def run(argv: list[str]) -> int:
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        _overlay_defaults(parser, argv)
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    except (TokenRouteError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "serve":
            return _cmd_serve(args)
        if args.command == "generate":
            return _cmd_generate(args)
        if args.command == "bench":
            if args.bench_command != "sweep":
                parser.parse_args(["bench", "--help"])
                return EXIT_USAGE
            return _cmd_bench_sweep(args)
        if args.command == "train-router":
            return _cmd_train_router(args)
        if args.command == "inspect":
            return _cmd_inspect(args)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except ServerUnreachable as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except WireError as exc:
        print(f"wire error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EmptyDataset as exc:
        print(
            f"error: {exc}\nhint: with untrained reference models, use corpora the models can "
            "predict (their own continuations) or --oracle-task benchmarks",
            file=sys.stderr,
        )
        return EXIT_CONFIG
    except TokenRouteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ENGINE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def build_serve_app(args):
    """FastAPI app exactly as the serve subcommand runs it."""
    from .clock import MonotonicClock
    from .webapp import create_app

    backend = _build_backend(args)
    serving = _serving_config(args, backend)
    server = TokenServer(serving, clock=MonotonicClock() if args.real_sleeps else None)
    weights = _load_slm(args)
    router = _load_router_for(args, weights)
    console_dir = args.console
    if console_dir is not None and not Path(console_dir).is_dir():
        raise TokenRouteError(f"console directory {console_dir!r} not found (build the frontend first)")
    return create_app(server, weights=weights, router=router, console_dir=console_dir), backend


def _cmd_serve(args) -> int:
    import uvicorn

    try:
        app, backend = build_serve_app(args)
    except TokenRouteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"serving on http://{args.host}:{args.port} (backend={backend.name})")
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


def _cmd_generate(args) -> int:
    weights = _load_slm(args)
    router = _load_router_for(args, weights)
    cfg = validate_config(
        GenerationConfig(
            mode=Mode.parse(args.mode),
            threshold=args.threshold,
            max_tokens=args.max_tokens,
            llm_burst=args.burst,
            kv_policy=KvPolicy.parse(args.kv_policy),
            stream=args.stream,
        )
    )
    clock = make_clock(args.real_sleeps)
    latency = None
    if args.server_url:
        client = HttpClient(args.server_url)
        remote = client.fetch_config()
        latency = LatencyModel(
            comm_delay_s=0.0,  # a real transport pays its own latency
            reprefill_delay_s=remote.get("reprefill_delay_s_per_call", 0.0),
        )
    elif cfg.mode is Mode.JOINT:
        backend = _build_backend(args)
        server = TokenServer(_serving_config(args, backend), clock=clock)
        client = LocalClient(server)
    else:
        client = None

    stream = stream_generate(args.prompt, cfg, weights, router, client, clock=clock, latency=latency)
    pieces = []
    for token in stream:
        piece = f"{LLM_MARK_OPEN}{token.text}{LLM_MARK_CLOSE}" if token.source.value == "LLM" else token.text
        pieces.append(piece)
        if args.stream and not args.json:
            print(piece, end="", flush=True)
    result = stream.result
    if args.stream and not args.json:
        print()
    if args.json:
        print(json.dumps(result.summary(), indent=2))
    elif not args.stream:
        print("".join(pieces))
    if args.events_out:
        from .orchestrator import write_event_log

        write_event_log(result.events, args.events_out)
    if result.error:
        print(f"generation ended with error: {result.error}", file=sys.stderr)
        return EXIT_ENGINE
    return EXIT_OK


def _cmd_bench_sweep(args) -> int:
    thresholds = sorted(float(x) for x in args.thresholds.split(",") if x.strip())
    if not thresholds:
        print("error: empty threshold grid", file=sys.stderr)
        return EXIT_CONFIG
    weights = _load_slm(args)
    cfg_template = GenerationConfig(max_tokens=args.max_tokens, kv_policy=KvPolicy.parse(args.kv_policy))

    if args.oracle_task:
        task = bench_mod.make_oracle_task(
            weights,
            n_items=args.items,
            target_len=args.target_len,
            corruption=args.corruption,
            seed=args.seed + 7,
        )
        backend = task.backend()
        task_set = task.task
        cfg_template = GenerationConfig(max_tokens=args.target_len, kv_policy=KvPolicy.parse(args.kv_policy))
        if args.router:
            router = load_router(args.router, expected_dim=weights.d)
        else:
            print("training router on oracle-task traces ...")
            result = bench_mod.train_task_router(task, weights, epochs=args.train_epochs, seed=args.seed)
            router = result.model
            print(f"  train accuracy {result.train_accuracy:.3f}, final loss {result.final_loss:.4f}")
    elif args.task:
        task_set = bench_mod.load_task_file(args.task, scorer=bench_mod.Scorer(args.scorer))
        backend = _build_backend(args)
        router = _load_router_for(args, weights)
    else:
        print("error: provide --task FILE or --oracle-task", file=sys.stderr)
        return EXIT_CONFIG

    serving = _serving_config(args, backend)
    result = bench_mod.sweep(
        task_set,
        thresholds,
        weights,
        router,
        backend,
        cfg_template=cfg_template,
        serving=serving,
        out_dir=args.out,
    )
    baseline = bench_mod.small_only_accuracy(task_set, weights, cfg_template)
    print(f"small-only baseline accuracy: {baseline:.3f}")
    print(f"{'thr':>5} {'routed':>7} {'ratio':>6} {'acc':>6} {'commllm_s':>10} {'overall_s':>10}")
    for row in result.rows:
        acc = f"{row.accuracy:.3f}" if row.accuracy is not None else "-"
        print(
            f"{row.threshold:>5.2f} {row.routing_number:>7.1f} {row.routed_ratio:>6.3f} "
            f"{acc:>6} {row.comm_llm_s:>10.3f} {row.overall_s:>10.3f}"
        )
    print(f"results written to {args.out}/results.csv")
    return EXIT_OK


def _read_corpus(path: str) -> list[list[int]]:
    tokenizer = ByteTokenizer()
    p = Path(path)
    texts: list[str] = []
    if p.is_dir():
        for child in sorted(p.glob("*.txt")):
            texts.append(child.read_text(encoding="utf-8"))
    else:
        texts = [line for line in p.read_text(encoding="utf-8").splitlines() if line.strip()]
    corpus = [tokenizer.encode(text) for text in texts if text]
    if not corpus:
        raise TokenRouteError(f"no usable sequences in corpus {path!r}")
    return corpus


def _cmd_train_router(args) -> int:
    weights = _load_slm(args)
    llm_weights = load_weights(args.llm_weights) if args.llm_weights else random_weights(seed=args.llm_seed)
    llm_backend = EngineBackend(llm_weights)
    tokenizer = ByteTokenizer()

    def llm_oracle(context_ids) -> int:
        text = tokenizer.decode(context_ids)
        tokens = llm_backend.generate(text, 1)
        return tokens[0].token

    corpus = _read_corpus(args.corpus)
    labeler = make_rollout_labeler(weights, llm_oracle, horizon=args.rollout_horizon) if args.rollout_labeling else None
    build = build_dataset(weights, llm_oracle, corpus, rollout_labeler=labeler)
    counts = {"prefer_slm": 0, "prefer_llm": 0, "needs_rollout": 0}
    for ex in build.examples:
        counts[ex.label.value] += 1
    print(f"dataset: {len(build.examples)} examples {counts}")
    cfg = TrainConfig(
        learning_rate=args.learning_rate,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        l2_penalty=args.l2_penalty,
        class_balance=args.class_balance,
    )
    result = train(build, cfg)
    save_router(args.out, result.model)
    if args.dataset_out:
        save_dataset(args.dataset_out, build.examples)
    print(
        f"router written to {args.out}: train accuracy {result.train_accuracy:.3f}, "
        f"loss {result.initial_loss:.4f} -> {result.final_loss:.4f}"
    )
    return EXIT_OK


def _cmd_inspect(args) -> int:
    if args.inspect_command == "wire":
        raw = Path(args.file).read_bytes()
        request = parse_request(raw)
        print(f"valid routing request (schema ok)")
        print(f"  session/request: {request.session_id} / {request.request_id}")
        print(f"  token_index:     {request.token_index}")
        print(f"  threshold:       {request.routing_threshold}")
        print(f"  context:         {request.context[:60]!r}")
        print(f"  current_token:   {request.current_token!r}")
        dims = len(request.hidden_states) if request.hidden_states is not None else 0
        print(f"  hidden_states:   {dims} dims")
        print(f"  history:         {len(request.history)} decisions")
        return EXIT_OK
    if args.inspect_command == "events":
        record = read_event_log(args.file)
        rm = metrics_mod.compute(record)
        print(f"session {record.session_id}: {len(record.events)} events")
        for name in ("ttft_s", "slm_inference_s", "tbt_slm_s", "comm_llm_s", "overall_s", "residual_s"):
            print(f"  {name:<16} {getattr(rm, name):.4f}")
        print(f"  routing_number   {rm.routing_number}")
        print(f"  tokens           {rm.total_tokens} ({rm.llm_tokens} from LLM)")
        return EXIT_OK
    print("usage: tokenroute inspect {wire,events} FILE", file=sys.stderr)
    return EXIT_USAGE


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
