"""
Concept RAG - Retrieval Module
Concept-graph local search (seed concepts, BFS expansion, local then global reranking)
and the dual-path runner that pairs it with core-KG search under the same budget
"""

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from concept_graph import ConceptGraph
from config import Config
from context_bundle import CHUNK, CONCEPT_PATH, KG_PATH, ContextBundle, ContextItem
from core_kg import KGBackbone, KnowledgeGraph, kg_local_search
from corpus_ingest import ChunkStore
from providers import EmbeddingProvider, EmbeddingVector, cosine_matrix

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Query:
    query_id: str
    text: str
    embedding: EmbeddingVector


def make_query(text: str, provider: EmbeddingProvider, query_id: Optional[str] = None) -> Query:
    """Embed the question once; both paths reuse the vector"""
    if query_id is None:
        query_id = hashlib.sha1(text.encode("utf-8")).hexdigest()[:12]
    return Query(query_id, text, provider.embed(text))


def compute_chunk_vectors(store: ChunkStore, provider: EmbeddingProvider) -> Dict[str, EmbeddingVector]:
    ids = store.ids()
    if not ids:
        return {}
    vectors = provider.embed_batch([store.get(cid).text for cid in ids])
    return dict(zip(ids, vectors))


# ============================================
# CONCEPT PATH
# ============================================

def top_k_concepts(graph: ConceptGraph, q: Query, k: int) -> List[str]:
    """Concept ids by cosine to the query, ties by id; zero-vector concepts never match"""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(graph) == 0:
        return []
    ids = list(graph.concepts)
    matrix = graph.embedding_matrix()
    sims = cosine_matrix(q.embedding, matrix)
    candidates = [i for i in range(len(ids)) if np.any(matrix[i])]
    order = sorted(candidates, key=lambda i: (-float(sims[i]), ids[i]))
    return [ids[i] for i in order[:k]]


def expand_bfs(graph: ConceptGraph, seeds: Iterable[str], hops: int) -> List[Tuple[str, int]]:
    """
    Multi-source BFS to depth `hops`, seeds excluded. Inside one hop level, nodes
    come out by their heaviest incoming edge from the previous level, then by id.
    """
    if hops < 0:
        raise ValueError("hops must be >= 0")
    seeds = list(dict.fromkeys(seeds))
    for seed in seeds:
        if seed not in graph.concepts:
            raise KeyError(f"unknown seed concept {seed!r}")
    visited = set(seeds)
    frontier = sorted(seeds)
    expanded: List[Tuple[str, int]] = []
    for hop in range(1, hops + 1):
        incoming: Dict[str, float] = {}
        for node in frontier:
            for neighbor, weight in graph.neighbors(node).items():
                if neighbor in visited:
                    continue
                incoming[neighbor] = max(incoming.get(neighbor, float("-inf")), weight)
        if not incoming:
            break
        level = sorted(incoming, key=lambda c: (-incoming[c], c))
        visited.update(level)
        expanded.extend((c, hop) for c in level)
        frontier = level
    return expanded


def _rank_chunks(chunk_ids: Iterable[str], q: Query,
                 chunk_vectors: Dict[str, EmbeddingVector]) -> List[Tuple[str, float]]:
    ids = list(chunk_ids)
    if not ids:
        return []
    sims = cosine_matrix(q.embedding, np.vstack([chunk_vectors[c] for c in ids]))
    ranked = [(cid, float(s)) for cid, s in zip(ids, sims)]
    ranked.sort(key=lambda item: (-item[1], item[0]))
    return ranked


class _BudgetedAppender:
    """Appends chunks until the first one that would overflow, then refuses everything"""

    def __init__(self, bundle: ContextBundle, store: ChunkStore):
        self.bundle = bundle
        self.store = store
        self.stopped = False

    def add(self, chunk_id: str, score: float) -> bool:
        if self.stopped:
            return False
        if self.bundle.contains(CHUNK, chunk_id):
            return True
        chunk = self.store.get(chunk_id)
        if not self.bundle.fits(chunk.token_count):
            self.stopped = True
            return False
        self.bundle.try_append(ContextItem(CHUNK, chunk_id, chunk.text, chunk.token_count,
                                           CONCEPT_PATH, score))
        return True


def concept_local_search(graph: ConceptGraph, store: ChunkStore, q: Query, k: int, hops: int,
                         budget: int, chunk_vectors: Dict[str, EmbeddingVector],
                         rerank_mode: str = "local_global") -> ContextBundle:
    """
    Budgeted chunk retrieval over the concept graph.

    local_global: each seed concept's chunks are added in query-similarity order
    (seed order preserved), then the chunks of all BFS-expanded concepts are pooled
    and added by similarity. naive: one pooled similarity sort over both sets.
    Retrieval ends at the first chunk that would overflow the budget.
    """
    bundle = ContextBundle(budget)
    if len(graph) == 0:
        return bundle
    seeds = top_k_concepts(graph, q, k)
    expanded = [cid for cid, _ in expand_bfs(graph, seeds, hops)]
    appender = _BudgetedAppender(bundle, store)

    def linked(concept_ids):
        return {c for cid in concept_ids for c in graph.concepts[cid].chunk_ids if c in store}

    if rerank_mode == "naive":
        for chunk_id, score in _rank_chunks(sorted(linked(seeds + expanded)), q, chunk_vectors):
            if not appender.add(chunk_id, score):
                break
        return bundle
    if rerank_mode != "local_global":
        raise ValueError(f"unknown rerank mode {rerank_mode!r}")

    for concept_id in seeds:
        for chunk_id, score in _rank_chunks(sorted(linked([concept_id])), q, chunk_vectors):
            if not appender.add(chunk_id, score):
                return bundle

    seed_chunks = linked(seeds)
    pool = sorted(linked(expanded) - seed_chunks)
    for chunk_id, score in _rank_chunks(pool, q, chunk_vectors):
        if not appender.add(chunk_id, score):
            break
    return bundle


# ============================================
# DUAL PATH
# ============================================

def dual_path_retrieve(graph: ConceptGraph, kg: KnowledgeGraph, store: ChunkStore, q: Query,
                       config: Config, chunk_vectors: Dict[str, EmbeddingVector],
                       backbone: Optional[KGBackbone] = None,
                       concurrent: bool = True) -> Tuple[ContextBundle, ContextBundle]:
    """
    Run both paths with the full budget each. A failing path yields an empty bundle
    flagged as failed; the other path's result is still returned.
    """
    budget = config.context_budget_tokens

    def run_concept() -> ContextBundle:
        return concept_local_search(graph, store, q, config.top_k, config.hops, budget,
                                    chunk_vectors, config.rerank_mode)

    def run_kg() -> ContextBundle:
        return kg_local_search(kg, q.embedding, budget, config.kg_seed_entities, config.kg_hops,
                               store, chunk_vectors, backbone)

    def guarded(name: str, fn) -> ContextBundle:
        try:
            return fn()
        except Exception as e:
            logger.warning(f"{name} retrieval failed for query {q.query_id}: {e}")
            return ContextBundle.failure(budget, str(e))

    if concurrent:
        with ThreadPoolExecutor(max_workers=2) as pool:
            concept_future = pool.submit(guarded, CONCEPT_PATH, run_concept)
            kg_future = pool.submit(guarded, KG_PATH, run_kg)
            return concept_future.result(), kg_future.result()
    return guarded(CONCEPT_PATH, run_concept), guarded(KG_PATH, run_kg)
