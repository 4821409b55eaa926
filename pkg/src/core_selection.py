"""
Concept RAG - Core Selection Module
Ranks chunks by the importance of their concepts, keeps the top fraction as core
chunks, and builds concept-deletion schedules for the ablation study
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, List, Set, Tuple

from concept_graph import ConceptGraph
from corpus_ingest import ChunkStore

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ChunkRanking:
    """Chunks sorted by (score desc, chunk_id asc) plus the selected prefix"""
    ranked: Tuple[Tuple[str, float], ...]
    kappa: float = 1.0
    selected: FrozenSet[str] = frozenset()

    def __len__(self) -> int:
        return len(self.ranked)

    def with_selection(self, kappa: float) -> "ChunkRanking":
        return ChunkRanking(self.ranked, kappa, frozenset(select_core(self, kappa)))

    def score(self, chunk_id: str) -> float:
        return dict(self.ranked)[chunk_id]


AGGREGATORS = {
    "max": max,
    "sum": sum,
    "mean": lambda values: sum(values) / len(values),
}


def score_chunks(graph: ConceptGraph, store: ChunkStore, aggregator: str = "max") -> ChunkRanking:
    """
    Score every chunk by its linked concepts' PageRank (max by default).
    Chunks without concepts score 0 and fall to the end, ties by chunk id.
    """
    if aggregator not in AGGREGATORS:
        raise ValueError(f"unknown chunk aggregator {aggregator!r}")
    combine = AGGREGATORS[aggregator]
    linked = graph.concepts_by_chunk()
    scores = []
    for chunk_id in store.ids():
        ranks = [graph.concepts[cid].pagerank for cid in linked.get(chunk_id, [])]
        scores.append((chunk_id, float(combine(ranks)) if ranks else 0.0))
    scores.sort(key=lambda item: (-item[1], item[0]))
    ranked = tuple(scores)
    return ChunkRanking(ranked, 1.0, frozenset(cid for cid, _ in ranked))


def core_count(n: int, kappa: float) -> int:
    # round first so 0.7 * 10 stays 7, not 8
    return min(n, math.ceil(round(kappa * n, 9)))


def select_core(ranking: ChunkRanking, kappa: float) -> Set[str]:
    """The top ceil(kappa * n) chunks of the ranking"""
    if not 0.0 < kappa <= 1.0:
        raise ValueError(f"kappa must be in (0, 1], got {kappa}")
    n = len(ranking)
    if n == 0:
        return set()
    return {chunk_id for chunk_id, _ in ranking.ranked[:core_count(n, kappa)]}


# ============================================
# CONCEPT DELETION
# ============================================

class Direction(str, Enum):
    FORWARD = "forward"     # highest-ranked concepts first
    BACKWARD = "backward"   # lowest-ranked concepts first


@dataclass
class DeletionStep:
    step: int
    concept_ids: List[str]
    chunk_ids: List[str]
    cumulative_tokens: int
    remaining_chunks: int
    metrics: Dict[str, float] = field(default_factory=dict)

    def mean_pagerank(self, graph: ConceptGraph) -> float:
        if not self.concept_ids:
            return 0.0
        return sum(graph.concepts[c].pagerank for c in self.concept_ids) / len(self.concept_ids)


@dataclass
class DeletionSchedule:
    direction: Direction
    step_tokens: int
    steps: List[DeletionStep]

    def deleted_chunks(self) -> Set[str]:
        return {cid for step in self.steps for cid in step.chunk_ids}

    def deleted_through(self, step: int) -> Set[str]:
        return {cid for s in self.steps[:step] for cid in s.chunk_ids}


def chunk_owners(graph: ConceptGraph) -> Dict[str, str]:
    """Each chunk's owning concept: highest PageRank among its linked concepts, ties by id"""
    owners = {}
    for chunk_id, cids in graph.concepts_by_chunk().items():
        owners[chunk_id] = min(cids, key=lambda c: (-graph.concepts[c].pagerank, c))
    return owners


def build_deletion_schedule(graph: ConceptGraph, store: ChunkStore, direction: Direction,
                            step_tokens: int) -> DeletionSchedule:
    """
    Consume concepts in rank order (descending for forward, ascending for backward),
    deleting the chunks each concept owns. A step closes once cumulative deleted
    tokens reach the next multiple of step_tokens.
    """
    if step_tokens <= 0:
        raise ValueError("step_tokens must be > 0")
    direction = Direction(direction)
    owned: Dict[str, List[str]] = {}
    for chunk_id, owner in chunk_owners(graph).items():
        if chunk_id in store:
            owned.setdefault(owner, []).append(chunk_id)

    if direction == Direction.FORWARD:
        order = sorted(owned, key=lambda c: (-graph.concepts[c].pagerank, c))
    else:
        order = sorted(owned, key=lambda c: (graph.concepts[c].pagerank, c))

    steps: List[DeletionStep] = []
    remaining = len(store)
    cumulative = 0
    threshold = step_tokens
    pending_concepts: List[str] = []
    pending_chunks: List[str] = []
    for concept_id in order:
        chunk_ids = sorted(owned[concept_id])
        pending_concepts.append(concept_id)
        pending_chunks.extend(chunk_ids)
        cumulative += sum(store.get(c).token_count for c in chunk_ids)
        remaining -= len(chunk_ids)
        if cumulative >= threshold:
            steps.append(DeletionStep(len(steps) + 1, pending_concepts, pending_chunks,
                                      cumulative, remaining))
            pending_concepts, pending_chunks = [], []
            threshold = (cumulative // step_tokens + 1) * step_tokens
    if pending_concepts:
        steps.append(DeletionStep(len(steps) + 1, pending_concepts, pending_chunks,
                                  cumulative, remaining))
    logger.info(f"{direction.value} deletion schedule: {len(steps)} steps over "
                f"{cumulative} tokens")
    return DeletionSchedule(direction, step_tokens, steps)
