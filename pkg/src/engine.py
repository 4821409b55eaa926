"""
Concept RAG - Engine
Orchestrates ingestion, the three index stages, querying, evaluation, the
concept-deletion study and parameter sweeps
"""

import hashlib
import logging
import os
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from concept_graph import ConceptGraph, ConceptGraphBuilder
from config import Config, ConceptRAGError
from context_bundle import ContextBundle
from core_kg import DelimitedExtractionBackbone, KnowledgeGraph, kg_local_search
from core_selection import Direction, build_deletion_schedule, score_chunks
from corpus_ingest import ChunkStore, get_token_counter, ingest_corpus
from cost_ledger import CostLedger, Stage
from ensemble import EnsembleConfig, header_overhead, merge_contexts, render_context
from evaluation import EvalReport, QAItem, load_qa_dataset, run_benchmark, write_rows_csv
from index_store import STAGE_CONCEPT_GRAPH, STAGE_INGEST, STAGE_KG, STAGE_SELECT, IndexStore
from prompts import render_answer_prompt
from providers import EmbeddingVector, make_embedder, make_llm
from retrieval import (Query, compute_chunk_vectors, concept_local_search, dual_path_retrieve,
                       make_query)

logger = logging.getLogger(__name__)

BUILD_STAGES = (STAGE_CONCEPT_GRAPH, STAGE_SELECT, STAGE_KG)


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


@dataclass
class LoadedIndex:
    """Everything retrieval reads; immutable once loaded"""
    store: ChunkStore
    graph: ConceptGraph
    chunk_vectors: Dict[str, EmbeddingVector]
    kg: KnowledgeGraph


class ConceptRAGEngine:
    """Main orchestrator for the concept-graph RAG engine"""

    def __init__(self, config: Config, show_progress: bool = True):
        self.config = config.validate()
        self.show_progress = show_progress
        self.ledger = CostLedger()
        self.counter = get_token_counter(config.tokenizer)
        self.index = IndexStore(config.index_dir)
        self.embedder = make_embedder(config.embedder, self.ledger, config.seed,
                                      config.embedder.cache_path or self.index.cache_path,
                                      self.counter)
        self.llm = make_llm(config.llm, self.ledger, self.counter)
        self.backbone = DelimitedExtractionBackbone(config.extraction_parallelism,
                                                    config.extraction_max_output_tokens,
                                                    self.counter, show_progress)
        self._loaded: Optional[LoadedIndex] = None

    # ============================================
    # INDEXING
    # ============================================

    def ingest(self, corpus_path: str, force: bool = False) -> ChunkStore:
        """
        Chunk a corpus file into the index directory.

        Args:
            corpus_path: JSONL corpus (doc_id, title, text)
            force: Overwrite an existing index

        Returns:
            The chunk store that was written
        """
        logger.info(f"📥 Ingesting {corpus_path}...")
        with self.index.lock():
            self.index.ensure_writable(force)
            store = ingest_corpus(corpus_path, self.config)
            self.index.invalidate_from(STAGE_INGEST)
            self.index.save_chunks(store)
            self.index.record_stage(STAGE_INGEST, self.config, {
                "corpus_sha256": file_sha256(corpus_path),
                "chunks": len(store),
                "tokens": store.total_tokens,
                "malformed_lines": len(store.ingest_errors),
                "tokenizer": store.counter_name,
            })
        self._loaded = None
        return store

    def build(self, stage: str = "all") -> Dict[str, dict]:
        stages = BUILD_STAGES if stage == "all" else (stage,)
        summary = {}
        with self.index.lock():
            for name in stages:
                start = time.perf_counter()
                if name == STAGE_CONCEPT_GRAPH:
                    summary[name] = self._build_concept_graph()
                elif name == STAGE_SELECT:
                    summary[name] = self._build_selection()
                elif name == STAGE_KG:
                    summary[name] = self._build_kg()
                else:
                    raise ValueError(f"unknown build stage {name!r}")
                summary[name]["seconds"] = round(time.perf_counter() - start, 3)
        logger.info(f"✅ Built {', '.join(stages)}")
        self._loaded = None
        return summary

    def _build_concept_graph(self) -> dict:
        logger.info("🧩 Building concept graph...")
        self.index.check_fresh_inputs(STAGE_CONCEPT_GRAPH)
        store = self.index.load_chunks(self.counter.name)
        chunk_vectors = compute_chunk_vectors(store, self.embedder)
        builder = ConceptGraphBuilder(self.config, self.embedder)
        graph = builder.build(store, chunk_vectors)
        self.index.save_concept_graph(graph, chunk_vectors)
        params = dict(graph.build_params, concepts=len(graph), edges=len(graph.edges))
        self.index.record_stage(STAGE_CONCEPT_GRAPH, self.config, params)
        logger.info(f"   {len(graph)} concepts, {len(graph.edges)} edges")
        return params

    def _build_selection(self) -> dict:
        logger.info(f"🎯 Selecting core chunks (kappa={self.config.kappa})...")
        self.index.check_fresh_inputs(STAGE_SELECT)
        store = self.index.load_chunks(self.counter.name)
        graph = self.index.load_concept_graph()
        ranking = score_chunks(graph, store, self.config.chunk_aggregator).with_selection(self.config.kappa)
        self.index.save_selection(ranking, self.config.chunk_aggregator)
        params = {"kappa": self.config.kappa, "aggregator": self.config.chunk_aggregator,
                  "selected": len(ranking.selected), "chunks": len(ranking)}
        self.index.record_stage(STAGE_SELECT, self.config, params)
        logger.info(f"   {len(ranking.selected)} of {len(ranking)} chunks selected")
        return params

    def _build_kg(self) -> dict:
        logger.info("🕸️ Extracting core knowledge graph...")
        self.index.check_fresh_inputs(STAGE_KG)
        store = self.index.load_chunks(self.counter.name)
        ranking = self.index.load_selection()
        before = self.ledger.tokens(Stage.EXTRACTION)
        kg = self._extract(ranking.selected, store)
        after = self.ledger.tokens(Stage.EXTRACTION)
        self.index.save_kg(kg)
        params = {
            "backbone": kg.backbone_tag,
            "kappa": ranking.kappa,
            "selected_sha256": hashlib.sha256("\n".join(sorted(ranking.selected)).encode("utf-8")).hexdigest(),
            "entities": len(kg.entities),
            "relations": len(kg.relations),
            "skipped_chunks": len(self.backbone.skipped_chunks),
            "extraction_input_tokens": after["input_tokens"] - before["input_tokens"],
            "extraction_output_tokens": after["output_tokens"] - before["output_tokens"],
        }
        self.index.record_stage(STAGE_KG, self.config, params)
        logger.info(f"   {len(kg.entities)} entities, {len(kg.relations)} relations")
        return params

    def _extract(self, selected, store: ChunkStore) -> KnowledgeGraph:
        kg = self.backbone.extract_kg(set(selected), store, self.llm)
        return self.backbone.embed_entities(kg, self.embedder)

    def load(self) -> LoadedIndex:
        if self._loaded is None:
            needs_kg = self.config.retrieval_mode != "concept"
            self.index.require(STAGE_KG if needs_kg else STAGE_CONCEPT_GRAPH)
            store = self.index.load_chunks(self.counter.name)
            kg = self.index.load_kg() if needs_kg else KnowledgeGraph({}, [])
            self._loaded = LoadedIndex(store, self.index.load_concept_graph(),
                                       self.index.load_chunk_vectors(), kg)
        return self._loaded

    # ============================================
    # QUERYING
    # ============================================

    def retrieve(self, q: Query, config: Optional[Config] = None,
                 loaded: Optional[LoadedIndex] = None) -> Tuple[ContextBundle, ContextBundle, ContextBundle]:
        """(concept-path bundle, KG-path bundle, final context) for one query"""
        cfg = config or self.config
        idx = loaded or self.load()
        budget = cfg.context_budget_tokens
        if cfg.retrieval_mode == "concept":
            concept = concept_local_search(idx.graph, idx.store, q, cfg.top_k, cfg.hops, budget,
                                           idx.chunk_vectors, cfg.rerank_mode)
            return concept, ContextBundle(budget), concept
        if cfg.retrieval_mode == "kg":
            kg = kg_local_search(idx.kg, q.embedding, budget, cfg.kg_seed_entities, cfg.kg_hops,
                                 idx.store, idx.chunk_vectors, self.backbone)
            return ContextBundle(budget), kg, kg
        concept, kg = dual_path_retrieve(idx.graph, idx.kg, idx.store, q, cfg, idx.chunk_vectors,
                                         self.backbone)
        if concept.failed and kg.failed:
            raise ConceptRAGError(f"both retrieval paths failed: {concept.error}; {kg.error}")
        final = merge_contexts(concept, kg, EnsembleConfig(cfg.ensemble_lambda, budget))
        return concept, kg, final

    def answer(self, question: str, query_id: Optional[str] = None, config: Optional[Config] = None,
               loaded: Optional[LoadedIndex] = None) -> Tuple[str, ContextBundle, dict]:
        cfg = config or self.config
        q = make_query(question, self.embedder, query_id)
        concept, kg, final = self.retrieve(q, cfg, loaded)
        context = render_context(final)
        answer = self.llm.complete(render_answer_prompt(question, context), cfg.answer_max_tokens,
                                   stage=Stage.GENERATION).strip()
        detail = {
            "query_id": q.query_id,
            "question": question,
            "answer": answer,
            "final_context": final.to_dict(),
            "rendered_context": context,
            "header_overhead_tokens": header_overhead(final, self.counter),
            "concept_path": concept.to_dict(),
            "kg_path": kg.to_dict(),
        }
        return answer, final, detail

    def query(self, question: str) -> dict:
        """JSON answer record with both raw bundles, the final context and the ledger"""
        logger.info(f"Answering: {question}")
        _, _, record = self.answer(question)
        record["cost"] = self.ledger.summary()
        return record

    # ============================================
    # EVALUATION
    # ============================================

    def _manifest(self, dataset_path: Optional[str] = None) -> dict:
        manifest = {
            "config": self.config.to_manifest(),
            "index": {s: e.get("hash") for s, e in self.index.manifest.get("stages", {}).items()},
            "corpus_sha256": self.index.manifest.get("stages", {}).get(STAGE_INGEST, {})
                                 .get("params", {}).get("corpus_sha256"),
            "providers": {"embedder": self.embedder.tag, "llm": self.llm.tag},
        }
        if dataset_path:
            manifest["dataset_sha256"] = file_sha256(dataset_path)
        return manifest

    def _evaluate(self, items: Sequence[QAItem], config: Config,
                  loaded: Optional[LoadedIndex] = None, manifest: Optional[dict] = None) -> EvalReport:
        def answer_fn(item: QAItem, repeat: int):
            answer, final, _ = self.answer(item.question, item.query_id, config, loaded)
            return answer, final

        return run_benchmark(items, answer_fn, repeats=config.repeats, seed=config.seed,
                             cr_mode=config.cr_mode,
                             scorer=self.embedder if config.semantic_score else None,
                             parallelism=config.eval_parallelism,
                             show_progress=self.show_progress, manifest=manifest)

    def evaluate(self, dataset_path: str, out_dir: str) -> EvalReport:
        items = load_qa_dataset(dataset_path)
        logger.info(f"📊 Evaluating {len(items)} items...")
        report = self._evaluate(items, self.config, manifest=self._manifest(dataset_path))
        report.manifest["cost"] = self.ledger.summary()
        report.write(out_dir)
        return report

    def ablate(self, direction: str, step_tokens: int, out_path: str,
               dataset_path: Optional[str] = None) -> List[dict]:
        """
        Concept-deletion study. One row per deletion step; with a dataset, the KG is
        rebuilt on the remaining chunks and the QA set is answered through the KG path.
        """
        self.index.require(STAGE_CONCEPT_GRAPH)
        store = self.index.load_chunks(self.counter.name)
        graph = self.index.load_concept_graph()
        chunk_vectors = self.index.load_chunk_vectors()
        items = load_qa_dataset(dataset_path) if dataset_path else []
        directions = [Direction.FORWARD, Direction.BACKWARD] if direction == "both" else [Direction(direction)]
        kg_config = self.config.with_overrides({"retrieval_mode": "kg"})

        rows = []
        for d in directions:
            schedule = build_deletion_schedule(graph, store, d, step_tokens)
            for step in schedule.steps:
                row = {
                    "direction": d.value,
                    "step": step.step,
                    "concepts_deleted": len(step.concept_ids),
                    "chunks_deleted": len(step.chunk_ids),
                    "cumulative_tokens": step.cumulative_tokens,
                    "remaining_chunks": step.remaining_chunks,
                    "mean_pagerank": step.mean_pagerank(graph),
                    "em": None, "f1": None, "cr": None,
                }
                if items:
                    deleted = schedule.deleted_through(step.step)
                    remaining = store.subset(c for c in store.ids() if c not in deleted)
                    kg = self._extract(set(remaining.ids()), remaining)
                    loaded = LoadedIndex(remaining, graph, chunk_vectors, kg)
                    agg = self._evaluate(items, kg_config, loaded).aggregates()
                    step.metrics = {k: agg[k] for k in ("em", "f1", "cr")}
                    row.update(step.metrics)
                rows.append(row)
        write_rows_csv(out_path, rows, list(rows[0]) if rows else
                       ["direction", "step", "concepts_deleted", "chunks_deleted",
                        "cumulative_tokens", "remaining_chunks", "mean_pagerank", "em", "f1", "cr"])
        logger.info(f"✅ Deletion table written to {out_path} ({len(rows)} rows)")
        return rows

    def sweep(self, dataset_path: str, kappas: Sequence[float], lambdas: Sequence[float],
              out_path: str) -> List[dict]:
        """
        Vary kappa (rebuilding the KG in memory) with lambda fixed, then lambda with the
        indexed KG. Nothing on disk is modified.
        """
        items = load_qa_dataset(dataset_path)
        base = self.load()
        graph = base.graph
        rows = []
        for kappa in kappas:
            cfg = self.config.with_overrides({"kappa": kappa}).validate()
            ranking = score_chunks(graph, base.store, cfg.chunk_aggregator).with_selection(kappa)
            before = self.ledger.tokens(Stage.EXTRACTION)["input_tokens"]
            kg = self._extract(ranking.selected, base.store)
            spent = self.ledger.tokens(Stage.EXTRACTION)["input_tokens"] - before
            loaded = LoadedIndex(base.store, graph, base.chunk_vectors, kg)
            agg = self._evaluate(items, cfg, loaded).aggregates()
            rows.append({"parameter": "kappa", "kappa": kappa, "lambda": cfg.ensemble_lambda,
                         "em": agg["em"], "f1": agg["f1"], "cr": agg["cr"],
                         "extraction_input_tokens": spent})
        indexed_tokens = self.index.manifest["stages"].get(STAGE_KG, {}).get("params", {}) \
            .get("extraction_input_tokens")
        for lam in lambdas:
            cfg = self.config.with_overrides({"ensemble_lambda": lam}).validate()
            agg = self._evaluate(items, cfg, base).aggregates()
            rows.append({"parameter": "lambda", "kappa": cfg.kappa, "lambda": lam,
                         "em": agg["em"], "f1": agg["f1"], "cr": agg["cr"],
                         "extraction_input_tokens": indexed_tokens})
        write_rows_csv(out_path, rows, ["parameter", "kappa", "lambda", "em", "f1", "cr",
                                        "extraction_input_tokens"])
        logger.info(f"✅ Sweep written to {out_path} ({len(rows)} rows)")
        return rows

    def status(self) -> dict:
        return {"index_dir": os.path.abspath(self.index.root),
                "stages": self.index.built_stages(),
                "manifest_sha256": self.index.manifest_hash()}
