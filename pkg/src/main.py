"""
Concept RAG - Main Orchestrator
Command line surface: ingest, build, query, eval, ablate and sweep
"""

import os
import sys
import json
import argparse
import logging
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Add src to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config import Config, ConceptRAGError
from engine import BUILD_STAGES, ConceptRAGEngine

logger = logging.getLogger(__name__)

# CLI flag -> config key
OVERRIDES = {
    "index_dir": "index_dir",
    "seed": "seed",
    "chunk_size": "chunk_size_tokens",
    "tokenizer": "tokenizer",
    "strict": "strict",
    "keyword_count": "keyword_count",
    "theta_sem": "theta_sem",
    "theta_co": "theta_co",
    "linkage": "linkage",
    "cooccurrence_scope": "cooccurrence_scope",
    "concept_embedding": "concept_embedding",
    "concept_ranker": "concept_ranker",
    "chunk_aggregator": "chunk_aggregator",
    "kappa": "kappa",
    "budget": "context_budget_tokens",
    "top_k": "top_k",
    "hops": "hops",
    "lam": "ensemble_lambda",
    "rerank_mode": "rerank_mode",
    "retrieval_mode": "retrieval_mode",
    "cr_mode": "cr_mode",
    "repeats": "repeats",
    "embedder_kind": "embedder.kind",
    "embedder_endpoint": "embedder.endpoint",
    "embedder_model": "embedder.model_name",
    "embedder_dim": "embedder.dim",
    "llm_kind": "llm.kind",
    "llm_endpoint": "llm.endpoint",
    "llm_model": "llm.model_name",
}


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="JSON config file (${VAR} interpolated)")
    common.add_argument("--index-dir", help="Index directory (default: index)")
    common.add_argument("--seed", type=int, help="Seed for every mock and random choice (default: 42)")
    common.add_argument("--verbose", action="store_true", help="Debug logging")
    common.add_argument("--quiet", action="store_true", help="Warnings only, no progress bars")

    params = common.add_argument_group("parameters")
    params.add_argument("--chunk-size", type=int, help="Chunk size limit in tokens (default: 1200)")
    params.add_argument("--tokenizer", help="words, tiktoken:<encoding> or hf:<model>")
    params.add_argument("--strict", action="store_true", default=None,
                        help="Abort on the first malformed corpus line")
    params.add_argument("--keyword-count", type=int, help="Keywords per chunk (default: 10)")
    params.add_argument("--theta-sem", type=float, help="Edge similarity threshold (default: 0.65)")
    params.add_argument("--theta-co", type=int, help="Edge co-occurrence threshold (default: 3)")
    params.add_argument("--linkage", choices=Config.CHOICES["linkage"])
    params.add_argument("--cooccurrence-scope", choices=Config.CHOICES["cooccurrence_scope"])
    params.add_argument("--concept-embedding", choices=Config.CHOICES["concept_embedding"])
    params.add_argument("--concept-ranker", choices=Config.CHOICES["concept_ranker"])
    params.add_argument("--chunk-aggregator", choices=Config.CHOICES["chunk_aggregator"])
    params.add_argument("--kappa", type=float, help="Core chunk ratio (default: 0.8)")
    params.add_argument("--budget", type=int, help="Context budget in tokens (default: 12000)")
    params.add_argument("--top-k", type=int, help="Seed concepts (default: 25)")
    params.add_argument("--hops", type=int, help="BFS depth (default: 2)")
    params.add_argument("--lambda", dest="lam", type=float, help="Ensemble weight (default: 0.6)")
    params.add_argument("--rerank-mode", choices=Config.CHOICES["rerank_mode"])
    params.add_argument("--retrieval-mode", choices=Config.CHOICES["retrieval_mode"])
    params.add_argument("--cr-mode", choices=Config.CHOICES["cr_mode"])
    params.add_argument("--repeats", type=int, help="Evaluation passes (default: 1)")
    params.add_argument("--embedder-kind", choices=("mock", "remote"))
    params.add_argument("--embedder-endpoint")
    params.add_argument("--embedder-model")
    params.add_argument("--embedder-dim", type=int)
    params.add_argument("--llm-kind", choices=("mock", "remote"))
    params.add_argument("--llm-endpoint")
    params.add_argument("--llm-model")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(
        description="Concept-graph RAG engine",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  Index a corpus:
    python main.py ingest corpus.jsonl
    python main.py build --stage all

  Ask a question:
    python main.py query "Where was the treaty signed?"

  Evaluate a QA set with 5 passes:
    python main.py eval qa.jsonl --repeats 5 --out reports/

  Concept deletion study:
    python main.py ablate --direction both --step-tokens 5000 --dataset qa.jsonl
        """
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="Chunk a JSONL corpus into the index")
    p.add_argument("corpus", help="JSONL file with doc_id, title, text")
    p.add_argument("--force", action="store_true", help="Overwrite an existing index")

    p = sub.add_parser("build", parents=[common], help="Build index stages")
    p.add_argument("--stage", choices=BUILD_STAGES + ("all",), default="all")

    p = sub.add_parser("query", parents=[common], help="Answer one question")
    p.add_argument("question")

    p = sub.add_parser("eval", parents=[common], help="Run a QA benchmark")
    p.add_argument("dataset", help="JSONL with query_id, question, answers")
    p.add_argument("--out", default="reports", help="Report directory (default: reports)")

    p = sub.add_parser("ablate", parents=[common], help="Concept deletion study")
    p.add_argument("--direction", choices=("forward", "backward", "both"), default="both")
    p.add_argument("--step-tokens", type=int, required=True)
    p.add_argument("--dataset", help="QA set evaluated through the KG path after each step")
    p.add_argument("--out", default="reports/deletion.csv")

    p = sub.add_parser("sweep", parents=[common], help="Sweep kappa and lambda")
    p.add_argument("dataset")
    p.add_argument("--kappas", type=float, nargs="*", default=[0.2, 0.4, 0.6, 0.8, 1.0])
    p.add_argument("--lambdas", type=float, nargs="*", default=[0.2, 0.4, 0.6, 0.8])
    p.add_argument("--out", default="reports/sweep.csv")
    return parser


def load_config(args: argparse.Namespace) -> Config:
    """CLI flag > config file > defaults"""
    config = Config.load(args.config)
    overrides = {key: getattr(args, flag, None) for flag, key in OVERRIDES.items()}
    return config.with_overrides(overrides).validate()


def run(args: argparse.Namespace) -> int:
    config = load_config(args)
    engine = ConceptRAGEngine(config, show_progress=not args.quiet)

    if args.command == "ingest":
        store = engine.ingest(args.corpus, force=args.force)
        print(json.dumps({"chunks": len(store), "tokens": store.total_tokens,
                          "malformed_lines": len(store.ingest_errors), **engine.status()}, indent=2))
    elif args.command == "build":
        summary = engine.build(args.stage)
        print(json.dumps({"built": summary, **engine.status()}, indent=2))
    elif args.command == "query":
        print(json.dumps(engine.query(args.question), indent=2, ensure_ascii=False))
    elif args.command == "eval":
        report = engine.evaluate(args.dataset, args.out)
        print(json.dumps(report.aggregates(), indent=2))
    elif args.command == "ablate":
        rows = engine.ablate(args.direction, args.step_tokens, args.out, args.dataset)
        print(f"\n{len(rows)} deletion steps written to {args.out}")
    elif args.command == "sweep":
        rows = engine.sweep(args.dataset, args.kappas, args.lambdas, args.out)
        print(f"\n{len(rows)} sweep rows written to {args.out}")
    return 0


def main(argv=None) -> int:
    """Command line interface for the concept-graph RAG engine"""
    parser = build_parser()
    args = parser.parse_args(argv)

    # Configure logging
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )

    try:
        return run(args)
    except ConceptRAGError as e:
        logger.error(f"❌ {e}")
        return e.exit_code
    except (OSError, ValueError) as e:
        logger.error(f"❌ {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
