"""Command-line driver: one subcommand per pipeline stage.

Every stage writes its outputs under ``--out`` plus a manifest in
``<out>/manifests/<stage>.json`` holding content hashes of what it read
and wrote.  Before running, a stage re-hashes its upstream outputs and
refuses to continue if anything changed since that stage ran.

Exit codes:
    0  success
    2  configuration error (bad config file, missing backend settings)
    3  input error (missing or malformed inputs, misaligned evaluation files)
    4  gate failure (a filtering step left nothing to write)
    5  transport error (generation backend unreachable after retries)
    6  stale dependency (an upstream artifact changed; re-run the named stage)
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from . import __version__
from .corpus import Corpus, build_corpus
from .evaluate import (EvalInputError, EvalReport, external_mention_rate, knowledge_advantage, read_jsonl,
                       render_table, score_qa)
from .fixture import make_fixture
from .kg_store import KGError, filter_entities, load_kg
from .nav import NavError, build_doc_graph, load_tasks, sample_nav_pairs, save_tasks
from .nav_env import (MODES, BFSOracleAgent, EnvError, NavEnvironment, RandomClickAgent, RecallAgent,
                      load_transcripts, run_agent, save_transcripts)
from .perturb import PerturbationError, RenamePlan, build_dependency_graph, make_synth_universe, plan_renames
from .ports import (CallLog, ChatBackend, EntityGuesser, FactExtractor, GenerationClient, MockBackend, MockProfile,
                    NameGenerator, PageWriter, QuestionWriter, RequestError, TransportError)
from .qa import build_qa
from .sampler import ConfigError, SamplerConfig, SamplingError, Universe, sample_universe

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_GATE, EXIT_TRANSPORT, EXIT_STALE = 0, 2, 3, 4, 5, 6

# which manifests a stage reads from
UPSTREAM = {
    "sample-universe": (),
    "perturb": ("sample-universe",),
    "build-corpus": ("sample-universe", "perturb"),
    "build-qa": ("sample-universe", "perturb", "build-corpus"),
    "build-nav": ("build-corpus",),
}
CONFIG_SECTIONS = {"kg", "sampler", "perturb", "corpus", "qa", "nav", "mock"}


class CliError(Exception):
    code = EXIT_INPUT


class ConfigProblem(CliError):
    code = EXIT_CONFIG


class InputProblem(CliError):
    code = EXIT_INPUT


class GateFailure(CliError):
    code = EXIT_GATE


class StaleDependency(CliError):
    code = EXIT_STALE

    def __init__(self, stage: str, detail: str):
        self.stage = stage
        super().__init__(f"{detail}; re-run {stage}")


# --- manifests ----------------------------------------------------------------

def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def fingerprint_tree(root: Path, paths) -> dict[str, str]:
    """Relative path -> sha256 for every file under the given paths."""
    out = {}
    for p in paths:
        p = Path(p)
        files = [p] if p.is_file() else sorted(x for x in p.rglob("*") if x.is_file())
        for f in files:
            out[f.relative_to(root).as_posix()] = sha256_file(f)
    return dict(sorted(out.items()))


@dataclass
class RunManifest:
    stage: str
    inputs: dict  # upstream stage -> {path: sha256}, or "external" -> {...}
    config: dict
    outputs: dict[str, str]
    version: str = __version__
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    def save(self, out: Path) -> Path:
        path = out / "manifests" / f"{self.stage}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.__dict__, indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, out: Path, stage: str) -> "RunManifest":
        path = out / "manifests" / f"{stage}.json"
        if not path.exists():
            raise InputProblem(f"no manifest for {stage} in {out}; run {stage} first")
        return cls(**json.loads(path.read_text()))


def check_upstream(out: Path, deps, _seen=None) -> dict[str, dict[str, str]]:
    """Verify the manifest chain behind ``deps``; return their recorded outputs."""
    _seen = set() if _seen is None else _seen
    inputs = {}
    for dep in deps:
        m = RunManifest.load(out, dep)
        if dep not in _seen:
            _seen.add(dep)
            for rel, digest in m.outputs.items():
                f = out / rel
                if not f.exists():
                    raise StaleDependency(dep, f"{rel} from {dep} is missing")
                if sha256_file(f) != digest:
                    raise StaleDependency(dep, f"{rel} changed since {dep} ran")
            # the dependency itself must have been built from the current upstream
            ups = [u for u in m.inputs if u != "external"]
            for up in ups:
                if RunManifest.load(out, up).outputs != m.inputs[up]:
                    raise StaleDependency(dep, f"{up} was re-run after {dep}")
            check_upstream(out, ups, _seen)
        inputs[dep] = m.outputs
    return inputs


def find_orphans(out: Path) -> tuple[list[str], list[str]]:
    """(files no manifest claims, files claimed by more than one manifest)."""
    out = Path(out)
    owners: dict[str, int] = {}
    for mf in sorted((out / "manifests").glob("*.json")):
        for rel in json.loads(mf.read_text())["outputs"]:
            owners[rel] = owners.get(rel, 0) + 1
    files = [f.relative_to(out).as_posix() for f in out.rglob("*") if f.is_file()]
    orphans = sorted(f for f in files if not f.startswith("manifests/") and f not in owners)
    shared = sorted(r for r, n in owners.items() if n > 1)
    return orphans, shared


# --- config -------------------------------------------------------------------

def default_config() -> dict:
    return json.loads(resources.files("kgworlds").joinpath("data/fixture/config.json").read_text())


def load_config(path: str | None, args) -> dict:
    cfg = default_config()
    base = None
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigProblem(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigProblem(f"config file {path}: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigProblem("config must be a JSON object")
        unknown = set(user) - CONFIG_SECTIONS
        if unknown:
            raise ConfigProblem(f"unknown config sections: {sorted(unknown)}")
        for key, val in user.items():
            if isinstance(val, dict) and isinstance(cfg.get(key), dict):
                cfg[key] = {**cfg[key], **val}
            else:
                cfg[key] = val
        base = Path(path).resolve().parent
    cfg = copy.deepcopy(cfg)
    if cfg["kg"] != "fixture" and base is not None and not Path(cfg["kg"]).is_absolute():
        cfg["kg"] = str(base / cfg["kg"])
    if getattr(args, "seed", None) is not None:
        cfg["sampler"]["rng_seed"] = args.seed
        cfg["qa"]["rng_seed"] = args.seed
        cfg["nav"]["rng_seed"] = args.seed
    if getattr(args, "in_flight", None) is not None:
        if args.in_flight < 1:
            raise ConfigProblem("--in-flight must be >= 1")
        cfg["corpus"]["in_flight"] = args.in_flight
    return cfg


def make_client(args, cfg: dict, out: Path, stage: str) -> tuple[GenerationClient, Path]:
    log_path = out / "logs" / f"{stage}.calls.jsonl"
    in_flight = cfg["corpus"].get("in_flight", 1)
    if args.mock:
        try:
            backend = MockBackend(MockProfile(**cfg.get("mock", {})))
        except TypeError as exc:
            raise ConfigProblem(f"mock section: {exc}") from None
    else:
        try:
            backend = ChatBackend.from_env()
        except RequestError as exc:
            raise ConfigProblem(str(exc)) from None
    return GenerationClient(backend, CallLog(log_path), in_flight=in_flight), log_path


# --- stages -------------------------------------------------------------------

def _real_universe(out: Path) -> Universe:
    return Universe.load(out / "universe")


def _synth_universe(out: Path, real: Universe) -> tuple[RenamePlan, Universe]:
    plan = RenamePlan.load(out / "perturb")
    synth = Universe.load(out / "perturb" / "synth", real_labels={e: x.label for e, x in real.graph.entities.items()})
    return plan, synth


def stage_sample_universe(args, cfg, out):
    if cfg["kg"] == "fixture":
        kg_dir = Path(str(resources.files("kgworlds").joinpath("data/fixture")))
    else:
        kg_dir = Path(cfg["kg"])
    if not (kg_dir / "entities.jsonl").exists():
        raise InputProblem(f"no knowledge graph at {kg_dir}")
    kg = load_kg(kg_dir)
    config = SamplerConfig.from_mapping(cfg["sampler"])
    universe = sample_universe(filter_entities(kg), config)
    universe.save(out / "universe")
    inputs = {"external": {"kg": kg.fingerprint()}}
    return inputs, [out / "universe"], {"entities": len(universe.graph.entities),
                                        "facts": len(universe.graph.facts)}


def stage_perturb(args, cfg, out):
    inputs = check_upstream(out, UPSTREAM["perturb"])
    real = _real_universe(out)
    client, log = make_client(args, cfg, out, "perturb")
    p = cfg["perturb"]
    plan = plan_renames(build_dependency_graph(real), real, NameGenerator(client), delta=p.get("delta", 39),
                        retry_cap=p.get("retry_cap", 5), n_candidates=p.get("n_candidates", 1))
    synth = make_synth_universe(real, plan)
    plan.save(out / "perturb")
    synth.save(out / "perturb" / "synth")
    return inputs, [out / "perturb", log], {"renamed": len(plan.mapping), "levels": [len(x) for x in plan.order]}


def stage_build_corpus(args, cfg, out):
    inputs = check_upstream(out, UPSTREAM["build-corpus"])
    real = _real_universe(out)
    plan, synth = _synth_universe(out, real)
    client, log = make_client(args, cfg, out, "build-corpus")
    corpus = build_corpus(real, synth, plan, PageWriter(client), EntityGuesser(client),
                          in_flight=cfg["corpus"].get("in_flight", 1))
    if not corpus.retained:
        raise GateFailure(f"no page survived the gates: {corpus.drop_reasons()}")
    if corpus.hyperlink_edges("rm") != corpus.hyperlink_edges("sm"):
        raise GateFailure("real-mapped and synth-mapped hyperlink graphs differ")
    corpus.save(out / "corpus")
    return inputs, [out / "corpus", log], {"retained": len(corpus.retained), "drops": corpus.drop_reasons()}


def stage_build_qa(args, cfg, out):
    inputs = check_upstream(out, UPSTREAM["build-qa"])
    real = _real_universe(out)
    plan, synth = _synth_universe(out, real)
    corpus = Corpus.load(out / "corpus")
    client, log = make_client(args, cfg, out, "build-qa")
    ds = build_qa(corpus, real, synth, plan, FactExtractor(client), QuestionWriter(client),
                  budget=cfg["qa"].get("budget", 50), rng_seed=cfg["qa"].get("rng_seed", 0))
    if not ds.sm:
        raise GateFailure("no QA instance survived composition and remapping")
    ds.save(out / "qa")
    return inputs, [out / "qa", log], {"pairs": len(ds.sm)}


def stage_build_nav(args, cfg, out):
    inputs = check_upstream(out, UPSTREAM["build-nav"])
    corpus = Corpus.load(out / "corpus")
    graph = build_doc_graph(corpus, "sm")
    if build_doc_graph(corpus, "rm") != graph:
        raise GateFailure("real-mapped and synth-mapped hyperlink graphs differ")
    n = cfg["nav"]
    tasks, report = sample_nav_pairs(graph, n.get("per_bucket", 100), n.get("rng_seed", 0))
    if not tasks:
        raise GateFailure("no navigation pair fell into any bucket")
    save_tasks(tasks, out / "nav" / "tasks.jsonl")
    (out / "nav" / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    return inputs, [out / "nav"], {"tasks": len(tasks)}


def _knowledge(real: Universe) -> dict[str, list[str]]:
    adj = real.graph.adjacency
    return {real.label(e): sorted(real.label(w) for w in adj.get(e, ())) for e in real.graph.entities}


def make_agent(cfg: dict, env: NavEnvironment, real: Universe):
    n = cfg["nav"]
    name = n.get("agent", "bfs_oracle")
    seed = n.get("agent_seed", 0)
    if name == "bfs_oracle":
        return lambda: BFSOracleAgent(env.graph)
    if name == "random_click":
        return lambda: RandomClickAgent(seed)
    if name == "recall":
        knowledge = _knowledge(real)
        return lambda: RecallAgent(knowledge, seed)
    raise ConfigProblem(f"unknown navigation agent {name!r}")


def stage_run_nav(args, cfg, out):
    inputs = check_upstream(out, ("sample-universe", "build-corpus", "build-nav"))
    corpus = Corpus.load(out / "corpus")
    real = _real_universe(out)
    env = NavEnvironment.from_corpus(corpus, args.variant)
    tasks = load_tasks(out / "nav" / "tasks.jsonl")
    transcripts = run_agent(tasks, make_agent(cfg, env, real), env, args.variant, args.mode)
    run_dir = out / "runs" / f"{args.variant}_{args.mode}"
    save_transcripts(transcripts, run_dir / "transcripts.jsonl")
    ok = sum(t.terminal["status"] == "success" for t in transcripts)
    return inputs, [run_dir], {"episodes": len(transcripts), "successes": ok}


def _eval_nav(args, out):
    stages = [f"run-nav.{v}.{args.mode}" for v in ("rm", "sm")]
    inputs = check_upstream(out, ("build-corpus", *stages))
    corpus = Corpus.load(out / "corpus")
    reports, rates = {}, {}
    for v in ("rm", "sm"):
        trs = load_transcripts(out / "runs" / f"{v}_{args.mode}" / "transcripts.jsonl")
        if not trs:
            raise InputProblem(f"no transcripts for {v}")
        reports[v] = EvalReport(v, args.mode, {t.header["pair_id"]: float(t.terminal["status"] == "success")
                                               for t in trs}, metric="success")
        env = NavEnvironment.from_corpus(corpus, v)
        page_labels = {p: env.link_labels(p) for p in env.pages}
        rates[v] = external_mention_rate([t.as_mention_input() for t in trs], env.titles.values(), page_labels)
    ka = knowledge_advantage(reports["rm"], reports["sm"])
    return inputs, reports, ka, {"external_mention_rate": rates}, f"nav_{args.mode}"


def _read_predictions(path: str) -> dict[str, str]:
    if not path:
        raise InputProblem("QA evaluation needs --pred-rm and --pred-sm")
    try:
        rows = read_jsonl(path)
    except FileNotFoundError:
        raise InputProblem(f"prediction file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise InputProblem(f"{path}: {exc}") from None
    return {r["pair_id"]: r.get("prediction", "") for r in rows}


def _eval_qa(args, out):
    inputs = check_upstream(out, ("build-qa",))
    inputs["external"] = {p: sha256_file(Path(p)) for p in (args.pred_rm, args.pred_sm) if p and Path(p).exists()}
    reports = {}
    for v, pred in (("rm", args.pred_rm), ("sm", args.pred_sm)):
        gold = {r["pair_id"]: r["answer"] for r in read_jsonl(out / "qa" / f"qa_{v}.jsonl")}
        preds = _read_predictions(pred)
        extra = sorted(set(preds) - set(gold))
        if extra:
            raise EvalInputError(f"{v} predictions name unknown pair ids, e.g. {extra[:5]}")
        reports[v] = score_qa(preds, gold, v, args.condition)
    ka = knowledge_advantage(reports["rm"], reports["sm"])
    return inputs, reports, ka, {}, f"qa_{args.condition}"


def stage_evaluate(args, cfg, out):
    inputs, reports, ka, extra, name = (_eval_nav if args.task == "nav" else _eval_qa)(args, out)
    d = out / "eval" / name
    d.mkdir(parents=True, exist_ok=True)
    for v, rep in reports.items():
        (d / f"report_{v}.json").write_text(json.dumps(rep.to_dict(), indent=1, sort_keys=True) + "\n")
    (d / "ka.json").write_text(json.dumps({**ka.to_dict(), **extra}, indent=1, sort_keys=True) + "\n")
    csv_text, plain = render_table([ka])
    (d / "table.csv").write_text(csv_text)
    (d / "table.txt").write_text(plain)
    print(plain, end="")
    args.stage_name = f"evaluate.{name}"
    return inputs, [d], {"ka": ka.ka, **extra}


STAGE_FUNCS = {
    "sample-universe": stage_sample_universe,
    "perturb": stage_perturb,
    "build-corpus": stage_build_corpus,
    "build-qa": stage_build_qa,
    "build-nav": stage_build_nav,
    "run-nav": stage_run_nav,
    "evaluate": stage_evaluate,
}


def run_stage(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = load_config(args.config, args)
    if args.command == "run-nav" and args.mode not in MODES:
        raise ConfigProblem(f"unknown mode {args.mode}")
    start = time.perf_counter()
    inputs, paths, summary = STAGE_FUNCS[args.command](args, cfg, out)
    stage = getattr(args, "stage_name", None) or args.command
    if args.command == "run-nav":
        stage = f"run-nav.{args.variant}.{args.mode}"
    manifest = RunManifest(stage, inputs, cfg, fingerprint_tree(out, paths),
                           wall_time=round(time.perf_counter() - start, 3), extra=summary)
    manifest.save(out)
    print(f"{stage}: ok {json.dumps(summary, sort_keys=True)}")
    return EXIT_OK


def cmd_make_fixture(args) -> int:
    out = Path(args.out)
    make_fixture(seed=args.seed if args.seed is not None else 7).save(out)
    print(f"fixture written to {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    out = Path(args.out)
    orphans, shared = find_orphans(out)
    check_upstream(out, [mf.stem for mf in sorted((out / "manifests").glob("*.json"))])
    if orphans or shared:
        raise InputProblem(f"orphans: {orphans[:10]}; claimed twice: {shared[:10]}")
    print("manifests chain; no orphan outputs")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kgworlds", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config; defaults to the bundled fixture config")
        p.add_argument("--out", required=True, help="working directory for artifacts and manifests")
        p.add_argument("--seed", type=int, help="override every RNG seed in the config")
        p.add_argument("--mock", action="store_true", help="use the deterministic offline backend")
        p.add_argument("--in-flight", type=int, dest="in_flight", help="concurrent generation calls")

    for name in ("sample-universe", "perturb", "build-corpus", "build-qa", "build-nav"):
        common(sub.add_parser(name))
    p = sub.add_parser("run-nav")
    common(p)
    p.add_argument("--variant", choices=("rm", "sm"), required=True)
    p.add_argument("--mode", choices=MODES, default="links_only")
    p = sub.add_parser("evaluate")
    common(p)
    p.add_argument("--task", choices=("nav", "qa"), default="nav")
    p.add_argument("--mode", choices=MODES, default="links_only")
    p.add_argument("--pred-rm", dest="pred_rm")
    p.add_argument("--pred-sm", dest="pred_sm")
    p.add_argument("--condition", default="closed_book")
    p = sub.add_parser("make-fixture")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p = sub.add_parser("verify")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "make-fixture":
            return cmd_make_fixture(args)
        if args.command == "verify":
            return cmd_verify(args)
        return run_stage(args)
    except CliError as exc:
        code, msg = exc.code, str(exc)
    except (ConfigError, RequestError) as exc:
        code, msg = EXIT_CONFIG, str(exc)
    except TransportError as exc:
        code, msg = EXIT_TRANSPORT, str(exc)
    except (PerturbationError, SamplingError) as exc:
        code, msg = EXIT_GATE, str(exc)
    except (KGError, EvalInputError, NavError, EnvError, FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        code, msg = EXIT_INPUT, f"{type(exc).__name__}: {exc}"
    print(f"error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
