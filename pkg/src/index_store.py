"""
Concept RAG - Index Store
Owns one index directory: stage artifacts, the manifest with per-stage hashes,
and the writer lock
"""

import hashlib
import json
import logging
import os
from contextlib import contextmanager
from typing import Dict, Iterator, List, Optional

import numpy as np

from concept_graph import ConceptGraph
from config import Config, IndexExistsError, IndexLockedError, IndexMissingError, StaleIndexError
from core_kg import KnowledgeGraph
from core_selection import ChunkRanking
from corpus_ingest import ChunkStore
from providers import EmbeddingVector

logger = logging.getLogger(__name__)

STAGE_INGEST = "ingest"
STAGE_CONCEPT_GRAPH = "concept-graph"
STAGE_SELECT = "select"
STAGE_KG = "kg"

STAGE_FILES = {
    STAGE_INGEST: ["chunks.jsonl"],
    STAGE_CONCEPT_GRAPH: ["chunk_vectors.jsonl", "concepts.jsonl", "edges.jsonl"],
    STAGE_SELECT: ["selection.json"],
    STAGE_KG: ["kg_entities.jsonl", "kg_relations.jsonl"],
}

UPSTREAM = {
    STAGE_INGEST: [],
    STAGE_CONCEPT_GRAPH: [STAGE_INGEST],
    STAGE_SELECT: [STAGE_CONCEPT_GRAPH],
    STAGE_KG: [STAGE_SELECT],
}

MANIFEST = "manifest.json"
CACHE = "embedding_cache.jsonl"
LOCK = ".lock"


class IndexStore:
    """Stage artifacts under one directory, tracked by a hash manifest"""

    def __init__(self, root: str):
        self.root = root
        os.makedirs(root, exist_ok=True)
        self.manifest = self._load_manifest()

    def path(self, name: str) -> str:
        return os.path.join(self.root, name)

    @property
    def cache_path(self) -> str:
        return self.path(CACHE)

    # ============================================
    # MANIFEST
    # ============================================

    def _load_manifest(self) -> dict:
        try:
            with open(self.path(MANIFEST), "r", encoding="utf-8") as f:
                return json.load(f)
        except FileNotFoundError:
            return {"stages": {}}

    def _save_manifest(self):
        with open(self.path(MANIFEST), "w", encoding="utf-8") as f:
            json.dump(self.manifest, f, indent=2, sort_keys=True)

    def manifest_hash(self) -> str:
        canonical = json.dumps(self.manifest, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def stage_hash(self, stage: str) -> str:
        """sha256 over the stage's files in declared order"""
        digest = hashlib.sha256()
        for name in STAGE_FILES[stage]:
            digest.update(name.encode("utf-8"))
            with open(self.path(name), "rb") as f:
                for block in iter(lambda: f.read(1 << 16), b""):
                    digest.update(block)
        return digest.hexdigest()

    def has_stage(self, stage: str) -> bool:
        return (stage in self.manifest["stages"]
                and all(os.path.exists(self.path(n)) for n in STAGE_FILES[stage]))

    def record_stage(self, stage: str, config: Config, params: Optional[dict] = None):
        """Hash the freshly written stage and pin the upstream hashes it was built from"""
        entry = {
            "hash": self.stage_hash(stage),
            "upstream": {u: self.stage_hash(u) for u in UPSTREAM[stage]},
            "params": dict(params or {}),
        }
        self.manifest["stages"][stage] = entry
        self.manifest["config"] = config.to_manifest()
        self.manifest["seed"] = config.seed
        self._save_manifest()
        logger.info(f"Recorded stage '{stage}' ({entry['hash'][:12]})")

    def require(self, stage: str):
        """Raise unless `stage` and everything upstream is built and consistent"""
        if not self.has_stage(stage):
            raise IndexMissingError(stage)
        for upstream in UPSTREAM[stage]:
            self.require(upstream)
            recorded = self.manifest["stages"][stage]["upstream"].get(upstream)
            if recorded != self.stage_hash(upstream):
                raise StaleIndexError(upstream, f"stage '{stage}' was built from a different "
                                                f"'{upstream}'; rebuild '{stage}'")
        if self.manifest["stages"][stage]["hash"] != self.stage_hash(stage):
            raise StaleIndexError(stage, f"files of stage '{stage}' changed after it was recorded")

    def check_fresh_inputs(self, stage: str):
        """Before building `stage`: its upstream stages must exist and be consistent"""
        for upstream in UPSTREAM[stage]:
            self.require(upstream)

    def invalidate_from(self, stage: str):
        """Drop the manifest entries of `stage` and everything downstream of it"""
        order = [STAGE_INGEST, STAGE_CONCEPT_GRAPH, STAGE_SELECT, STAGE_KG]
        for s in order[order.index(stage):]:
            self.manifest["stages"].pop(s, None)
        self._save_manifest()

    @contextmanager
    def lock(self) -> Iterator[None]:
        path = self.path(LOCK)
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise IndexLockedError(f"index {self.root} is locked by another writer ({path})")
        try:
            os.write(fd, str(os.getpid()).encode("ascii"))
            os.close(fd)
            yield
        finally:
            try:
                os.remove(path)
            except FileNotFoundError:
                pass

    def ensure_writable(self, force: bool):
        """Ingest refuses to overwrite an existing index unless forced"""
        if self.has_stage(STAGE_INGEST) and not force:
            raise IndexExistsError(f"index {self.root} already exists; pass --force to rebuild")

    # ============================================
    # ARTIFACTS
    # ============================================

    def save_chunks(self, store: ChunkStore):
        store.to_jsonl(self.path("chunks.jsonl"))

    def load_chunks(self, counter_name: str = "words") -> ChunkStore:
        self.require(STAGE_INGEST)
        return ChunkStore.from_jsonl(self.path("chunks.jsonl"), counter_name)

    def save_concept_graph(self, graph: ConceptGraph, chunk_vectors: Dict[str, EmbeddingVector]):
        with open(self.path("chunk_vectors.jsonl"), "w", encoding="utf-8") as f:
            for chunk_id, vector in chunk_vectors.items():
                f.write(json.dumps({"chunk_id": chunk_id, "vector": vector.tolist()}) + "\n")
        graph.to_jsonl(self.path("concepts.jsonl"), self.path("edges.jsonl"))

    def load_chunk_vectors(self) -> Dict[str, EmbeddingVector]:
        self.require(STAGE_CONCEPT_GRAPH)
        vectors = {}
        with open(self.path("chunk_vectors.jsonl"), "r", encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    record = json.loads(line)
                    vectors[record["chunk_id"]] = np.asarray(record["vector"], dtype=np.float64)
        return vectors

    def load_concept_graph(self) -> ConceptGraph:
        self.require(STAGE_CONCEPT_GRAPH)
        params = self.manifest["stages"][STAGE_CONCEPT_GRAPH].get("params", {})
        return ConceptGraph.from_jsonl(self.path("concepts.jsonl"), self.path("edges.jsonl"), params)

    def save_selection(self, ranking: ChunkRanking, aggregator: str):
        data = {
            "kappa": ranking.kappa,
            "aggregator": aggregator,
            "ranked": [[cid, score] for cid, score in ranking.ranked],
            "selected": sorted(ranking.selected),
        }
        with open(self.path("selection.json"), "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2)

    def load_selection(self) -> ChunkRanking:
        self.require(STAGE_SELECT)
        with open(self.path("selection.json"), "r", encoding="utf-8") as f:
            data = json.load(f)
        return ChunkRanking(tuple((cid, float(s)) for cid, s in data["ranked"]),
                            data["kappa"], frozenset(data["selected"]))

    def save_kg(self, kg: KnowledgeGraph):
        kg.to_jsonl(self.path("kg_entities.jsonl"), self.path("kg_relations.jsonl"))

    def load_kg(self) -> KnowledgeGraph:
        self.require(STAGE_KG)
        tag = self.manifest["stages"][STAGE_KG].get("params", {}).get("backbone", "delimited-extraction")
        return KnowledgeGraph.from_jsonl(self.path("kg_entities.jsonl"),
                                         self.path("kg_relations.jsonl"), tag)

    def built_stages(self) -> List[str]:
        return [s for s in STAGE_FILES if self.has_stage(s)]
