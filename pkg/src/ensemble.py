"""
Concept RAG - Ensemble Module
Merges the concept-path and KG-path bundles into the final context under one budget
with per-path caps, admitting chunks found by both paths first
"""

import logging
import math
import re
from dataclasses import dataclass
from typing import Dict, List, Tuple

from context_bundle import CHUNK, CONCEPT_PATH, KG_PATH, ContextBundle, ContextItem
from corpus_ingest import get_token_counter

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EnsembleConfig:
    lam: float = 0.6
    beta: int = 12000

    def __post_init__(self):
        if not 0.0 < self.lam < 1.0:
            raise ValueError(f"lambda must be in (0, 1), got {self.lam}")
        if self.beta <= 0:
            raise ValueError("beta must be > 0")

    @property
    def concept_cap(self) -> int:
        return math.floor(round((1.0 - self.lam) * self.beta, 9))

    @property
    def kg_cap(self) -> int:
        return math.floor(round(self.lam * self.beta, 9))

    def cap(self, path: str) -> int:
        return self.kg_cap if path == KG_PATH else self.concept_cap


class EnsembleBundle(ContextBundle):
    """Merged context plus the per-path charging record"""

    def __init__(self, cfg: EnsembleConfig):
        super().__init__(cfg.beta)
        self.cfg = cfg
        self.charged: Dict[str, int] = {CONCEPT_PATH: 0, KG_PATH: 0}
        self.overlap_ids: List[str] = []
        self.skipped: List[Tuple[str, str]] = []

    def admit(self, item: ContextItem, path: str) -> bool:
        if self.charged[path] + item.token_count > self.cfg.cap(path):
            return False
        charged_item = item if item.source == path else ContextItem(
            item.kind, item.item_id, item.text, item.token_count, path, item.rank_score)
        if not self.try_append(charged_item):
            return False
        self.charged[path] += item.token_count
        return True

    def to_dict(self) -> dict:
        data = super().to_dict()
        data.update({
            "lambda": self.cfg.lam,
            "caps": {CONCEPT_PATH: self.cfg.concept_cap, KG_PATH: self.cfg.kg_cap},
            "charged_tokens": dict(self.charged),
            "overlap_chunk_ids": list(self.overlap_ids),
            "skipped": [list(k) for k in self.skipped],
        })
        return data


def _positions(bundle: ContextBundle) -> Dict[str, int]:
    """Rank of each chunk among the bundle's chunks; facts do not count"""
    chunks = [item for item in bundle if item.kind == CHUNK]
    return {item.item_id: rank for rank, item in enumerate(chunks)}


def merge_contexts(concept_bundle: ContextBundle, kg_bundle: ContextBundle,
                   cfg: EnsembleConfig) -> EnsembleBundle:
    """
    Merge under cfg.beta in three passes: chunks present in both bundles (charged to
    the path that ranked them higher, KG on ties, the other path if that cap is full),
    then the remaining KG items, then the remaining concept items. Items that would
    breach their path cap are skipped and the pass continues.
    """
    merged = EnsembleBundle(cfg)
    concept_pos = _positions(concept_bundle)
    kg_pos = _positions(kg_bundle)
    overlap = sorted(set(concept_pos) & set(kg_pos),
                     key=lambda c: (min(concept_pos[c], kg_pos[c]), c))
    kg_items = {item.item_id: item for item in kg_bundle if item.kind == CHUNK}

    for chunk_id in overlap:
        item = kg_items[chunk_id]
        primary = KG_PATH if kg_pos[chunk_id] <= concept_pos[chunk_id] else CONCEPT_PATH
        secondary = CONCEPT_PATH if primary == KG_PATH else KG_PATH
        if merged.admit(item, primary) or merged.admit(item, secondary):
            merged.overlap_ids.append(chunk_id)
        else:
            merged.skipped.append((CHUNK, chunk_id))

    overlap_set = set(overlap)
    for bundle, path in ((kg_bundle, KG_PATH), (concept_bundle, CONCEPT_PATH)):
        for item in bundle:
            if item.kind == CHUNK and item.item_id in overlap_set:
                continue
            if merged.contains(item.kind, item.item_id):
                continue
            if not merged.admit(item, path):
                merged.skipped.append(item.key)

    logger.debug(f"Ensemble: {len(merged)} items, {merged.total_tokens} tokens "
                 f"({len(merged.overlap_ids)} overlapping, {len(merged.skipped)} skipped)")
    return merged


# ============================================
# RENDERING
# ============================================

_HEADER = re.compile(r"^\[(\d+)\] source=(\S+) kind=(\S+) id=(.+)$")


def _header(index: int, item: ContextItem) -> str:
    return f"[{index}] source={item.source} kind={item.kind} id={item.item_id}"


def render_context(bundle: ContextBundle) -> str:
    """Numbered items, each a one-line header followed by the item text"""
    blocks = [f"{_header(i, item)}\n{item.text}" for i, item in enumerate(bundle, start=1)]
    return "\n\n".join(blocks)


def header_overhead(bundle: ContextBundle, counter=None) -> int:
    """Tokens spent on headers; not charged against the budget"""
    counter = counter or get_token_counter("words")
    return sum(counter.count(_header(i, item)) for i, item in enumerate(bundle, start=1))


def parse_rendered_context(text: str) -> List[Tuple[str, str, str]]:
    """(source, kind, id) for every header, in order"""
    found = []
    expected = 1
    for line in text.split("\n"):
        match = _HEADER.match(line)
        if match and int(match.group(1)) == expected:
            found.append((match.group(2), match.group(3), match.group(4)))
            expected += 1
    return found
