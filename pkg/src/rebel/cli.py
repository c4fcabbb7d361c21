"""Command line interface: knowledge acquisition, inference, simulation, and
benchmark subcommands. Hermetic mode (the default) uses the deterministic
stub provider and hashed embedder so everything runs offline.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .bench import BenchDeps, ExperimentSpec, run_experiment
from .core import MissionScenario, Objective, PreferenceVector
from .llm import (
    HttpCompletionProvider,
    HttpEmbedder,
    ProviderConfig,
    StubProvider,
    TranscriptRecorder,
)
from .pipeline import (
    KnowledgeAcquisitionConfig,
    RetrievalConfig,
    ScenarioRanges,
    generate_experiences,
    generate_rules,
    infer,
)
from .prompt import parse_ita_plan
from .retrieval import ExperienceDatabase, HashedEmbedder, RulesDatabase
from .sim import SimConfig, run_mission

logger = logging.getLogger(__name__)


def parse_preferences(text: str) -> PreferenceVector:
    """`MT` or `TP=0.5,MT=0.25,HW=0.25`."""
    pairs = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" in part:
            name, weight = part.split("=", 1)
            pairs.append((Objective.parse(name), float(weight)))
        else:
            pairs.append((Objective.parse(part), 1.0))
    return PreferenceVector(tuple(pairs))


def parse_objectives(text: str) -> tuple[Objective, ...]:
    return tuple(Objective.parse(part) for part in text.split(",") if part.strip())


def _add_provider_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--provider", choices=("stub", "http"), default="stub",
                        help="stub is deterministic and fully offline")
    parser.add_argument("--endpoint", default="https://api.openai.com/v1")
    parser.add_argument("--model", default="gpt-4o-mini")
    parser.add_argument("--api-key-env", default="OPENAI_API_KEY",
                        help="environment variable holding the API key")
    parser.add_argument("--timeout", type=float, default=60.0)
    parser.add_argument("--retries", type=int, default=2)
    parser.add_argument("--embedder", choices=("hashed", "http"), default="hashed")
    parser.add_argument("--embed-dim", type=int, default=256)
    parser.add_argument("--transcript", default=None,
                        help="record every prompt/response to this JSONL file")


def _build_provider(args: argparse.Namespace):
    if args.provider == "stub":
        provider = StubProvider()
    else:
        cfg = ProviderConfig(
            endpoint=args.endpoint,
            api_key_env=args.api_key_env,
            timeout_s=args.timeout,
            retries=args.retries,
        )
        provider = HttpCompletionProvider(cfg)
    if args.transcript:
        provider = TranscriptRecorder(provider, args.transcript)
    return provider


def _build_embedder(args: argparse.Namespace):
    if args.embedder == "hashed":
        return HashedEmbedder(dim=args.embed_dim)
    cfg = ProviderConfig(
        endpoint=args.endpoint,
        api_key_env=args.api_key_env,
        timeout_s=args.timeout,
        retries=args.retries,
    )
    return HttpEmbedder(cfg)


def _sim_config(args: argparse.Namespace) -> SimConfig:
    cfg = SimConfig.load(args.sim_config) if args.sim_config else SimConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def cmd_gen_rules(args: argparse.Namespace) -> int:
    db = RulesDatabase(args.rules_db)
    stored = generate_rules(parse_objectives(args.objectives), _build_provider(args), db)
    print(f"stored {len(stored)} new rules ({len(db)} live) in {args.rules_db}")
    for entry in stored:
        print(f"  [{entry.id}] {entry.objective.short}: {entry.text}")
    return 0


def cmd_gen_exp(args: argparse.Namespace) -> int:
    rules_db = RulesDatabase(args.rules_db)
    exp_db = ExperienceDatabase(args.exp_db)
    cfg = KnowledgeAcquisitionConfig(
        objectives=parse_objectives(args.objectives),
        missions_per_objective=args.missions,
        scenario_ranges=ScenarioRanges(
            humans=(args.min_humans, args.max_humans),
            robots=(args.min_robots, args.max_robots),
            tasks=(args.min_tasks, args.max_tasks),
        ),
        refine_every=args.refine_every,
        base_seed=args.seed or 0,
    )
    stored = generate_experiences(
        cfg, _build_provider(args), rules_db, exp_db, _sim_config(args), _build_embedder(args)
    )
    fallbacks = sum(1 for r in stored if r.fallback)
    print(
        f"stored {len(stored)} experience records ({fallbacks} fallbacks) in {args.exp_db}; "
        f"rules database now holds {len(rules_db)} rules"
    )
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    scenario = MissionScenario.parse(Path(args.scenario).read_text(encoding="utf-8"))
    prefs = parse_preferences(args.prefs)
    retrieval = RetrievalConfig(
        rule_k=args.rule_k, exp_k=args.exp_k, exp_m=args.exp_m, embedder=_build_embedder(args)
    )
    result = infer(
        scenario,
        prefs,
        RulesDatabase(args.rules_db),
        ExperienceDatabase(args.exp_db),
        _build_provider(args),
        retrieval,
    )
    plan_text = result.plan.render()
    if args.out:
        Path(args.out).write_text(plan_text + "\n", encoding="utf-8")
    print(plan_text)
    print(f"# fallback: {result.used_fallback}")
    print(f"# retrieved rules: {list(result.rule_ids)}")
    for rule in result.rules:
        print(f"#   [{rule.id}] {rule.objective.short}: {rule.text}")
    print(f"# retrieved experiences: {list(result.exemplar_ids)}")
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    scenario = MissionScenario.parse(Path(args.scenario).read_text(encoding="utf-8"))
    plan = parse_ita_plan(Path(args.plan).read_text(encoding="utf-8"), scenario)
    record, trace = run_mission(scenario, plan, _sim_config(args))
    print(record.serialize())
    if args.trace:
        Path(args.trace).write_text(trace.render_events() + "\n", encoding="utf-8")
        print(f"# trace written to {args.trace}")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    spec = ExperimentSpec.from_json(args.spec)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    deps = BenchDeps(
        provider=_build_provider(args),
        rules_db=RulesDatabase(args.rules_db),
        exp_db=ExperienceDatabase(args.exp_db),
        sim_cfg=_sim_config(args),
        retrieval=RetrievalConfig(embedder=_build_embedder(args)),
        workers=args.workers,
    )
    report = run_experiment(spec, deps)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.to_csv(out_dir / "report.csv")
    (out_dir / "summary.txt").write_text(report.summary_text(), encoding="utf-8")
    print(report.summary_text())
    print(f"report written to {out_dir / 'report.csv'}")
    return 0 if report.all_checks_pass() else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rebel",
        description="Rule-based, experience-enhanced initial task allocation",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-rules", help="stage 1: generate and store allocation rules")
    p.add_argument("--rules-db", required=True)
    p.add_argument("--objectives", default="TP,MT,HW")
    p.add_argument("--seed", type=int, default=None)
    _add_provider_args(p)
    p.set_defaults(func=cmd_gen_rules)

    p = sub.add_parser("gen-exp", help="stage 2: simulate missions and store experiences")
    p.add_argument("--rules-db", required=True)
    p.add_argument("--exp-db", required=True)
    p.add_argument("--objectives", default="TP,MT,HW")
    p.add_argument("--missions", type=int, default=10)
    p.add_argument("--refine-every", type=int, default=None)
    p.add_argument("--min-humans", type=int, default=2)
    p.add_argument("--max-humans", type=int, default=5)
    p.add_argument("--min-robots", type=int, default=3)
    p.add_argument("--max-robots", type=int, default=7)
    p.add_argument("--min-tasks", type=int, default=5)
    p.add_argument("--max-tasks", type=int, default=15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sim-config", default=None)
    _add_provider_args(p)
    p.set_defaults(func=cmd_gen_exp)

    p = sub.add_parser("infer", help="stage 3: allocate an unseen mission")
    p.add_argument("--rules-db", required=True)
    p.add_argument("--exp-db", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--prefs", required=True, help="MT or TP=0.5,MT=0.25,HW=0.25")
    p.add_argument("--rule-k", type=int, default=5)
    p.add_argument("--exp-k", type=int, default=3)
    p.add_argument("--exp-m", type=int, default=2)
    p.add_argument("--out", default=None)
    _add_provider_args(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("simulate", help="run one mission for a scenario and plan")
    p.add_argument("--scenario", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--sim-config", default=None)
    p.add_argument("--trace", default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bench", help="run an experiment spec and emit reports")
    p.add_argument("--spec", required=True)
    p.add_argument("--rules-db", default=None)
    p.add_argument("--exp-db", default=None)
    p.add_argument("--out-dir", default="bench_out")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--sim-config", default=None)
    p.add_argument("--workers", type=int, default=1)
    _add_provider_args(p)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
