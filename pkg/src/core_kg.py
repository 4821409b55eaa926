"""
Concept RAG - Core-KG Module
Builds a knowledge graph from the selected core chunks through LLM extraction and
serves local search over it. The backbone class is the plug-in point for other
graph construction schemes.
"""

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Set, Tuple

import networkx as nx
import numpy as np
from tqdm import tqdm

import prompts
from context_bundle import CHUNK, KG_FACT, KG_PATH, ContextBundle, ContextItem
from corpus_ingest import ChunkStore, get_token_counter
from cost_ledger import Stage
from providers import EmbeddingProvider, EmbeddingVector, LLMProvider, cosine_matrix

logger = logging.getLogger(__name__)


class ExtractionParseError(ValueError):
    pass


def normalize_name(name: str) -> str:
    """Entity merge key: lowercase, whitespace collapsed"""
    return " ".join(name.lower().split())


@dataclass(frozen=True)
class Entity:
    entity_id: str
    name: str
    entity_type: str
    description: str
    source_chunk_ids: Tuple[str, ...]
    embedding: Optional[EmbeddingVector] = field(default=None, compare=False)

    def serialize(self) -> str:
        return f"{self.name}: {self.description}" if self.description else self.name

    def to_record(self) -> dict:
        return {
            "entity_id": self.entity_id,
            "name": self.name,
            "entity_type": self.entity_type,
            "description": self.description,
            "source_chunk_ids": list(self.source_chunk_ids),
            "embedding": self.embedding.tolist() if self.embedding is not None else None,
        }

    @classmethod
    def from_record(cls, record: dict) -> "Entity":
        emb = record.get("embedding")
        return cls(
            entity_id=record["entity_id"],
            name=record["name"],
            entity_type=record["entity_type"],
            description=record["description"],
            source_chunk_ids=tuple(record["source_chunk_ids"]),
            embedding=np.asarray(emb, dtype=np.float64) if emb is not None else None,
        )


@dataclass(frozen=True)
class Relation:
    head: str
    tail: str
    description: str
    weight: float
    source_chunk_ids: Tuple[str, ...]

    @property
    def key(self) -> Tuple[str, str]:
        return (self.head, self.tail)

    def to_record(self) -> dict:
        return {
            "head": self.head,
            "tail": self.tail,
            "description": self.description,
            "weight": self.weight,
            "source_chunk_ids": list(self.source_chunk_ids),
        }


class KnowledgeGraph:
    """Entities and relations with chunk provenance; not modified after build"""

    def __init__(self, entities: Dict[str, Entity], relations: Iterable[Relation],
                 backbone_tag: str = "delimited-extraction"):
        self.entities = dict(sorted(entities.items()))
        self.relations: Dict[Tuple[str, str], Relation] = {}
        for rel in relations:
            if rel.head not in self.entities or rel.tail not in self.entities:
                raise ValueError(f"relation {rel.key} has an unknown endpoint")
            self.relations[rel.key] = rel
        self.relations = dict(sorted(self.relations.items()))
        self.backbone_tag = backbone_tag
        self._nx: Optional[nx.Graph] = None

    def __len__(self) -> int:
        return len(self.entities)

    @property
    def chunk_provenance(self) -> Dict[str, Tuple[str, ...]]:
        return {eid: e.source_chunk_ids for eid, e in self.entities.items()}

    def to_networkx(self) -> nx.Graph:
        if self._nx is None:
            g = nx.Graph()
            g.add_nodes_from(self.entities)
            g.add_edges_from(self.relations)
            self._nx = g
        return self._nx

    def to_jsonl(self, entities_path: str, relations_path: str):
        with open(entities_path, "w", encoding="utf-8") as f:
            for entity in self.entities.values():
                f.write(json.dumps(entity.to_record(), ensure_ascii=False, sort_keys=True) + "\n")
        with open(relations_path, "w", encoding="utf-8") as f:
            for rel in self.relations.values():
                f.write(json.dumps(rel.to_record(), ensure_ascii=False, sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, entities_path: str, relations_path: str,
                   backbone_tag: str = "delimited-extraction") -> "KnowledgeGraph":
        entities = {}
        with open(entities_path, "r", encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    e = Entity.from_record(json.loads(line))
                    entities[e.entity_id] = e
        relations = []
        with open(relations_path, "r", encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    r = json.loads(line)
                    relations.append(Relation(r["head"], r["tail"], r["description"],
                                              r["weight"], tuple(r["source_chunk_ids"])))
        return cls(entities, relations, backbone_tag)


# ============================================
# EXTRACTION OUTPUT PARSING
# ============================================

_RECORD = re.compile(r"^\s*\((.*)\)\s*$", re.DOTALL)


def parse_extraction_output(text: str) -> Tuple[List[tuple], List[tuple]]:
    """
    Parse delimiter-structured records into (name, type, description) entity tuples
    and (head, tail, description, strength) relation tuples.
    Raises ExtractionParseError when nothing in a non-empty reply is a valid record.
    """
    body = text.replace(prompts.COMPLETION_DELIMITER, "")
    entities, relations = [], []
    raw_records = [r for r in body.split(prompts.RECORD_DELIMITER) if r.strip()]
    bad = 0
    for raw in raw_records:
        match = _RECORD.match(raw)
        if not match:
            bad += 1
            continue
        fields = [f.strip().strip('"') for f in match.group(1).split(prompts.TUPLE_DELIMITER)]
        kind = fields[0].lower()
        if kind == "entity" and len(fields) >= 4 and fields[1]:
            entities.append((fields[1], fields[2].upper() or "UNKNOWN", fields[3]))
        elif kind == "relationship" and len(fields) >= 5 and fields[1] and fields[2]:
            try:
                strength = float(fields[4])
            except ValueError:
                strength = 1.0
            relations.append((fields[1], fields[2], fields[3], max(strength, 0.0)))
        else:
            bad += 1
    if raw_records and not entities and not relations:
        raise ExtractionParseError(f"no valid records in {len(raw_records)} candidates")
    if not raw_records and prompts.COMPLETION_DELIMITER not in text:
        raise ExtractionParseError("empty reply without completion marker")
    if bad:
        logger.debug(f"Ignored {bad} malformed extraction records")
    return entities, relations


# ============================================
# BACKBONE
# ============================================

class KGBackbone:
    """Plug-in surface: build a KG from core chunks and search it locally"""
    tag = "base"

    def extract_kg(self, selected: Set[str], store: ChunkStore, llm: LLMProvider) -> KnowledgeGraph:
        raise NotImplementedError

    def local_search(self, kg: KnowledgeGraph, query_vec: EmbeddingVector, budget: int,
                     k_seed: int, hops: int, store: Optional[ChunkStore] = None,
                     chunk_vectors: Optional[Dict[str, EmbeddingVector]] = None) -> ContextBundle:
        raise NotImplementedError


class DelimitedExtractionBackbone(KGBackbone):
    """
    Per-chunk entity/relation extraction with delimiter-structured records,
    duplicates merged by normalized name. No community summaries.
    """
    tag = "delimited-extraction"

    def __init__(self, parallelism: int = 4, max_output_tokens: int = 2048,
                 counter=None, show_progress: bool = False):
        self.parallelism = max(1, parallelism)
        self.max_output_tokens = max_output_tokens
        self.counter = counter or get_token_counter("words")
        self.show_progress = show_progress
        self.skipped_chunks: List[str] = []

    def _extract_chunk(self, chunk_id: str, text: str, llm: LLMProvider):
        reply = llm.complete(prompts.render_extraction_prompt(text), self.max_output_tokens,
                             stage=Stage.EXTRACTION)
        try:
            return parse_extraction_output(reply)
        except ExtractionParseError as e:
            logger.info(f"Unparseable extraction for {chunk_id} ({e}), retrying with a format reminder")
        reply = llm.complete(prompts.render_extraction_prompt(text, reminder=True),
                             self.max_output_tokens, stage=Stage.EXTRACTION)
        try:
            return parse_extraction_output(reply)
        except ExtractionParseError as e:
            logger.warning(f"Skipping chunk {chunk_id}: extraction output unparseable after retry ({e})")
            return None

    def extract_kg(self, selected: Set[str], store: ChunkStore, llm: LLMProvider) -> KnowledgeGraph:
        """
        One extraction prompt per selected chunk, merged into a single graph.

        Args:
            selected: Core chunk ids
            store: The chunk store
            llm: Completion backend; every call is charged to the extraction stage

        Returns:
            The merged knowledge graph
        """
        chunk_ids = [cid for cid in store.ids() if cid in selected]
        self.skipped_chunks = []
        if not chunk_ids:
            return KnowledgeGraph({}, [], self.tag)

        with ThreadPoolExecutor(max_workers=self.parallelism) as pool:
            futures = [pool.submit(self._extract_chunk, cid, store.get(cid).text, llm)
                       for cid in chunk_ids]
            results = [f.result() for f in tqdm(futures, desc="Extracting", unit="chunk",
                                                disable=not self.show_progress)]
        return self._merge(chunk_ids, results)

    def _merge(self, chunk_ids: List[str], results: List[Optional[tuple]]) -> KnowledgeGraph:
        names: Dict[str, str] = {}
        types: Dict[str, str] = {}
        descriptions: Dict[str, List[str]] = {}
        sources: Dict[str, Set[str]] = {}
        rel_desc: Dict[Tuple[str, str], List[str]] = {}
        rel_weight: Dict[Tuple[str, str], float] = {}
        rel_sources: Dict[Tuple[str, str], Set[str]] = {}

        def add_entity(name: str, etype: str, desc: str, chunk_id: str) -> str:
            eid = normalize_name(name)
            names.setdefault(eid, " ".join(name.split()))
            if types.get(eid, "UNKNOWN") == "UNKNOWN":
                types[eid] = etype
            descriptions.setdefault(eid, [])
            if desc and desc not in descriptions[eid]:
                descriptions[eid].append(desc)
            sources.setdefault(eid, set()).add(chunk_id)
            return eid

        for chunk_id, result in zip(chunk_ids, results):
            if result is None:
                self.skipped_chunks.append(chunk_id)
                continue
            entities, relations = result
            for name, etype, desc in entities:
                add_entity(name, etype, desc, chunk_id)
            for head, tail, desc, strength in relations:
                h = add_entity(head, "UNKNOWN", "", chunk_id)
                t = add_entity(tail, "UNKNOWN", "", chunk_id)
                if h == t and not desc:
                    continue
                key = (h, t)
                rel_desc.setdefault(key, [])
                if desc and desc not in rel_desc[key]:
                    rel_desc[key].append(desc)
                rel_weight[key] = rel_weight.get(key, 0.0) + strength
                rel_sources.setdefault(key, set()).add(chunk_id)

        entities = {
            eid: Entity(eid, names[eid], types[eid], " ".join(descriptions[eid]),
                        tuple(sorted(sources[eid])))
            for eid in names
        }
        relations = [
            Relation(h, t, " ".join(rel_desc[(h, t)]), rel_weight[(h, t)],
                     tuple(sorted(rel_sources[(h, t)])))
            for (h, t) in rel_weight
        ]
        kg = KnowledgeGraph(entities, relations, self.tag)
        logger.info(f"Core-KG: {len(kg.entities)} entities, {len(kg.relations)} relations "
                    f"from {len(chunk_ids)} chunks ({len(self.skipped_chunks)} skipped)")
        return kg

    def embed_entities(self, kg: KnowledgeGraph, provider: EmbeddingProvider) -> KnowledgeGraph:
        if not kg.entities:
            return kg
        ids = list(kg.entities)
        vectors = provider.embed_batch([kg.entities[eid].serialize() for eid in ids])
        entities = {eid: replace(kg.entities[eid], embedding=vec) for eid, vec in zip(ids, vectors)}
        return KnowledgeGraph(entities, kg.relations.values(), kg.backbone_tag)

    def local_search(self, kg: KnowledgeGraph, query_vec: EmbeddingVector, budget: int,
                     k_seed: int, hops: int, store: Optional[ChunkStore] = None,
                     chunk_vectors: Optional[Dict[str, EmbeddingVector]] = None) -> ContextBundle:
        """
        Seed with the k_seed entities most similar to the query, expand `hops` steps,
        then emit entity facts, relation facts and provenance chunks until the next
        item would overflow the budget.
        """
        bundle = ContextBundle(budget)
        if not kg.entities:
            return bundle
        ids = list(kg.entities)
        sims = cosine_matrix(query_vec, np.vstack([kg.entities[e].embedding for e in ids]))
        similarity = dict(zip(ids, (float(s) for s in sims)))
        seeds = sorted(ids, key=lambda e: (-similarity[e], e))[:k_seed]

        graph = kg.to_networkx()
        reached: Set[str] = set(seeds)
        for seed in seeds:
            reached.update(nx.single_source_shortest_path_length(graph, seed, cutoff=hops))

        candidates: List[ContextItem] = []
        for eid in sorted(reached, key=lambda e: (-similarity[e], e)):
            text = kg.entities[eid].serialize()
            candidates.append(ContextItem(KG_FACT, f"entity:{eid}", text,
                                          self.counter.count(text), KG_PATH, similarity[eid]))
        rels = [r for r in kg.relations.values() if r.head in reached and r.tail in reached]
        for rel in sorted(rels, key=lambda r: (-r.weight, r.head, r.tail)):
            text = f"{kg.entities[rel.head].name} —{rel.description}→ {kg.entities[rel.tail].name}"
            candidates.append(ContextItem(KG_FACT, f"relation:{rel.head}|{rel.tail}", text,
                                          self.counter.count(text), KG_PATH, rel.weight))
        if store is not None:
            chunk_ids = sorted({c for e in reached for c in kg.entities[e].source_chunk_ids if c in store})
            if chunk_vectors:
                matrix = np.vstack([chunk_vectors[c] for c in chunk_ids]) if chunk_ids else np.zeros((0, 0))
                chunk_sim = dict(zip(chunk_ids, (float(s) for s in cosine_matrix(query_vec, matrix))))
            else:
                chunk_sim = {c: 0.0 for c in chunk_ids}
            for cid in sorted(chunk_ids, key=lambda c: (-chunk_sim[c], c)):
                chunk = store.get(cid)
                candidates.append(ContextItem(CHUNK, cid, chunk.text, chunk.token_count,
                                              KG_PATH, chunk_sim[cid]))

        for item in candidates:
            if not bundle.fits(item.token_count):
                break
            bundle.try_append(item)
        return bundle


BACKBONES = {DelimitedExtractionBackbone.tag: DelimitedExtractionBackbone}


def extract_kg(selected: Set[str], store: ChunkStore, llm: LLMProvider,
               backbone: Optional[KGBackbone] = None) -> KnowledgeGraph:
    return (backbone or DelimitedExtractionBackbone()).extract_kg(selected, store, llm)


def kg_local_search(kg: KnowledgeGraph, query_vec: EmbeddingVector, budget: int, k_seed: int,
                    hops: int, store: Optional[ChunkStore] = None,
                    chunk_vectors: Optional[Dict[str, EmbeddingVector]] = None,
                    backbone: Optional[KGBackbone] = None) -> ContextBundle:
    return (backbone or DelimitedExtractionBackbone()).local_search(
        kg, query_vec, budget, k_seed, hops, store, chunk_vectors)
