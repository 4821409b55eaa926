"""
Concept RAG - Concept Graph Module
Keyword concepts per chunk, sentence-mean concept vectors, a co-occurrence graph
filtered by semantic similarity with Dice edge weights, and PageRank ranking
"""

import json
import logging
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from itertools import combinations
from typing import Dict, Iterable, List, Optional, Tuple

import networkx as nx
import numpy as np
from scipy import sparse
from sklearn.feature_extraction.text import TfidfVectorizer

from config import Config
from corpus_ingest import ChunkStore
from providers import EmbeddingProvider, EmbeddingVector, cosine

logger = logging.getLogger(__name__)

# alphabetic tokens of length >= 2, shared by keyword extraction and concept matching
TERM_PATTERN = r"(?u)\b[^\W\d_]{2,}\b"
_TERM = re.compile(TERM_PATTERN)


def term_tokens(text: str) -> List[str]:
    """Candidate terms, lowercased one token at a time"""
    return [t.lower() for t in _TERM.findall(text)]


def term_set(text: str) -> set:
    return set(term_tokens(text))


def has_vector(concept: "Concept") -> bool:
    """False for a missing or zero concept vector; such concepts never match anything"""
    return concept.embedding is not None and bool(np.any(concept.embedding))


# ============================================
# DOMAIN TYPES
# ============================================

@dataclass(frozen=True)
class Concept:
    """A normalized keyword, the chunks linked to it and the sentences that mention it"""
    concept_id: str
    surface: str
    chunk_ids: Tuple[str, ...]
    sentence_ids: Tuple[str, ...]
    embedding: Optional[EmbeddingVector] = field(default=None, compare=False)
    pagerank: float = 0.0

    def to_record(self) -> dict:
        return {
            "concept_id": self.concept_id,
            "surface": self.surface,
            "chunk_ids": list(self.chunk_ids),
            "sentence_ids": list(self.sentence_ids),
            "pagerank": self.pagerank,
            "embedding": self.embedding.tolist() if self.embedding is not None else None,
        }

    @classmethod
    def from_record(cls, record: dict) -> "Concept":
        emb = record.get("embedding")
        return cls(
            concept_id=record["concept_id"],
            surface=record["surface"],
            chunk_ids=tuple(record["chunk_ids"]),
            sentence_ids=tuple(record["sentence_ids"]),
            embedding=np.asarray(emb, dtype=np.float64) if emb is not None else None,
            pagerank=record["pagerank"],
        )


@dataclass(frozen=True)
class ConceptEdge:
    """Undirected edge stored once with a < b"""
    a: str
    b: str
    co_count: int
    sim: float
    weight: float

    def to_record(self) -> dict:
        return {"a": self.a, "b": self.b, "co_count": self.co_count,
                "sim": self.sim, "weight": self.weight}


@dataclass
class PageRankResult:
    scores: Dict[str, float]
    converged: bool
    iterations: int


class ConceptGraph:
    """Concepts as nodes, filtered co-occurrence edges. Not modified after build."""

    def __init__(self, concepts: Dict[str, Concept], edges: Iterable[ConceptEdge],
                 build_params: Optional[dict] = None):
        self.concepts = dict(sorted(concepts.items()))
        self.edges: Dict[Tuple[str, str], ConceptEdge] = {}
        for edge in edges:
            if edge.a >= edge.b:
                raise ValueError(f"edge ({edge.a}, {edge.b}) is not in canonical order")
            if edge.a not in self.concepts or edge.b not in self.concepts:
                raise ValueError(f"edge ({edge.a}, {edge.b}) has an unknown endpoint")
            self.edges[(edge.a, edge.b)] = edge
        self.edges = dict(sorted(self.edges.items()))
        self.build_params = dict(build_params or {})
        self._adjacency: Dict[str, Dict[str, float]] = defaultdict(dict)
        for (a, b), edge in self.edges.items():
            self._adjacency[a][b] = edge.weight
            self._adjacency[b][a] = edge.weight
        self._nx: Optional[nx.Graph] = None
        self._matrix: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.concepts)

    def edge(self, a: str, b: str) -> Optional[ConceptEdge]:
        return self.edges.get((a, b) if a < b else (b, a))

    def neighbors(self, concept_id: str) -> Dict[str, float]:
        return dict(self._adjacency.get(concept_id, {}))

    def to_networkx(self) -> nx.Graph:
        if self._nx is None:
            g = nx.Graph()
            g.add_nodes_from(self.concepts)
            g.add_weighted_edges_from((e.a, e.b, e.weight) for e in self.edges.values())
            self._nx = g
        return self._nx

    def embedding_matrix(self) -> np.ndarray:
        """Concept vectors stacked in concept_id order"""
        if self._matrix is None:
            rows = [c.embedding for c in self.concepts.values()]
            self._matrix = np.vstack(rows) if rows else np.zeros((0, 0))
        return self._matrix

    def with_pagerank(self, scores: Dict[str, float]) -> "ConceptGraph":
        concepts = {cid: replace(c, pagerank=float(scores.get(cid, 0.0)))
                    for cid, c in self.concepts.items()}
        return ConceptGraph(concepts, self.edges.values(), self.build_params)

    def concepts_by_chunk(self) -> Dict[str, List[str]]:
        linked: Dict[str, List[str]] = defaultdict(list)
        for cid, concept in self.concepts.items():
            for chunk_id in concept.chunk_ids:
                linked[chunk_id].append(cid)
        return dict(linked)

    def to_jsonl(self, concepts_path: str, edges_path: str):
        with open(concepts_path, "w", encoding="utf-8") as f:
            for concept in self.concepts.values():
                f.write(json.dumps(concept.to_record(), ensure_ascii=False, sort_keys=True) + "\n")
        with open(edges_path, "w", encoding="utf-8") as f:
            for edge in self.edges.values():
                f.write(json.dumps(edge.to_record(), sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, concepts_path: str, edges_path: str,
                   build_params: Optional[dict] = None) -> "ConceptGraph":
        concepts = {}
        with open(concepts_path, "r", encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    c = Concept.from_record(json.loads(line))
                    concepts[c.concept_id] = c
        edges = []
        with open(edges_path, "r", encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    edges.append(ConceptEdge(**json.loads(line)))
        return cls(concepts, edges, build_params)


# ============================================
# KEYWORD EXTRACTION
# ============================================

def extract_keyword_scores(store: ChunkStore, keyword_count: int = 10) -> Dict[str, List[Tuple[str, float]]]:
    """
    Top-m TF-IDF keywords per chunk with their scores.

    tf = raw count / chunk token count; idf = ln((1 + n) / (1 + df)) + 1.
    Ties are broken by (score desc, term asc).
    """
    chunks = list(store)
    if not chunks:
        return {}
    vectorizer = TfidfVectorizer(
        lowercase=False,
        tokenizer=term_tokens,
        token_pattern=None,
        stop_words="english",
        norm=None,
        smooth_idf=True,
        sublinear_tf=False,
    )
    try:
        matrix = vectorizer.fit_transform([c.text for c in chunks]).tocsr()
    except ValueError:
        # no chunk has a single candidate term
        logger.warning("Keyword extraction found an empty vocabulary")
        return {c.chunk_id: [] for c in chunks}
    vocab = vectorizer.get_feature_names_out()
    result = {}
    for row, chunk in enumerate(chunks):
        start, end = matrix.indptr[row], matrix.indptr[row + 1]
        length = max(chunk.token_count, 1)
        scored = [(str(vocab[j]), float(v) / length)
                  for j, v in zip(matrix.indices[start:end], matrix.data[start:end]) if v > 0]
        scored.sort(key=lambda item: (-item[1], item[0]))
        result[chunk.chunk_id] = scored[:keyword_count]
    return result


def extract_concepts(store: ChunkStore, config: Config) -> Dict[str, List[str]]:
    """Per chunk, the top config.keyword_count keywords in rank order"""
    scores = extract_keyword_scores(store, config.keyword_count)
    return {chunk_id: [term for term, _ in ranked] for chunk_id, ranked in scores.items()}


def build_concepts(keywords: Dict[str, List[str]], store: ChunkStore,
                   linkage: str = "origin") -> Dict[str, Concept]:
    """
    Link every keyword to its chunks and to the sentences mentioning it.

    'origin' links a concept to the chunks it was extracted from; 'containment'
    links it to every chunk whose text contains the word.
    """
    linked: Dict[str, set] = defaultdict(set)
    for chunk_id, terms in keywords.items():
        for term in terms:
            linked[term].add(chunk_id)
    if linkage == "containment":
        vocabulary = set(linked)
        for chunk in store:
            for term in term_set(chunk.text) & vocabulary:
                linked[term].add(chunk.chunk_id)
    elif linkage != "origin":
        raise ValueError(f"unknown linkage {linkage!r}")

    order = {cid: i for i, cid in enumerate(store.ids())}
    concepts = {}
    for term, chunk_ids in linked.items():
        sentence_ids = []
        surface = None
        for chunk_id in sorted(chunk_ids, key=order.get):
            for sentence in store.get(chunk_id).sentences:
                if term in term_set(sentence.text):
                    sentence_ids.append(sentence.sent_id)
                    if surface is None:
                        surface = next((t for t in _TERM.findall(sentence.text) if t.lower() == term), term)
        if not sentence_ids:
            continue
        concepts[term] = Concept(
            concept_id=term,
            surface=surface or term,
            chunk_ids=tuple(sorted(chunk_ids)),
            sentence_ids=tuple(sorted(sentence_ids)),
        )
    return concepts


# ============================================
# CONCEPT VECTORS
# ============================================

def embed_concept(concept: Concept, store: ChunkStore, provider: EmbeddingProvider) -> EmbeddingVector:
    """Unnormalized mean of the vectors of every sentence mentioning the concept"""
    texts = [store.sentence(sid).text for sid in concept.sentence_ids]
    if not texts:
        raise ValueError(f"concept {concept.concept_id} has no sentences")
    vectors = provider.embed_batch(texts)
    return np.mean(np.vstack(vectors), axis=0)


def embed_concepts(concepts: Dict[str, Concept], store: ChunkStore, provider: EmbeddingProvider,
                   mode: str = "sentence",
                   chunk_vectors: Optional[Dict[str, EmbeddingVector]] = None) -> Dict[str, Concept]:
    """
    Embed every concept with one batched provider call.

    'sentence' averages sentence vectors; 'chunk' averages the vectors of the
    linked chunks (needs chunk_vectors).
    """
    if not concepts:
        return {}
    if mode == "chunk":
        if chunk_vectors is None:
            raise ValueError("chunk-mode concept embedding needs chunk vectors")
        return {cid: replace(c, embedding=np.mean(np.vstack([chunk_vectors[k] for k in c.chunk_ids]), axis=0))
                for cid, c in concepts.items()}
    if mode != "sentence":
        raise ValueError(f"unknown concept embedding mode {mode!r}")

    texts = sorted({store.sentence(sid).text for c in concepts.values() for sid in c.sentence_ids})
    vectors = dict(zip(texts, provider.embed_batch(texts)))
    embedded = {}
    for cid, concept in concepts.items():
        rows = [vectors[store.sentence(sid).text] for sid in concept.sentence_ids]
        embedded[cid] = replace(concept, embedding=np.mean(np.vstack(rows), axis=0))
    return embedded


# ============================================
# EDGES
# ============================================

def dice_weight(co_count: int, size_a: int, size_b: int) -> float:
    return 2.0 * co_count / (size_a + size_b)


def build_edges(concepts: Dict[str, Concept], store: ChunkStore, theta_sem: float, theta_co: int,
                semantic_filter: bool = True, scope: str = "chunk") -> ConceptGraph:
    """
    An edge joins a and b iff both have a non-zero vector, cosine(Vector(a), Vector(b)) >= theta_sem and they
    co-occur in at least theta_co units (linked chunks, or sentences when
    scope='sentence'). Weight is the Dice coefficient over the unit sets.
    """
    if theta_co < 1:
        raise ValueError("theta_co must be >= 1")
    units: Dict[str, List[str]] = defaultdict(list)
    sizes: Dict[str, int] = {}
    for cid, concept in concepts.items():
        members = concept.chunk_ids if scope == "chunk" else concept.sentence_ids
        if scope not in ("chunk", "sentence"):
            raise ValueError(f"unknown co-occurrence scope {scope!r}")
        sizes[cid] = len(members)
        for unit in members:
            units[unit].append(cid)

    co_counts: Counter = Counter()
    for members in units.values():
        for a, b in combinations(sorted(members), 2):
            co_counts[(a, b)] += 1

    edges = []
    for (a, b), co in co_counts.items():
        if co < theta_co:
            continue
        if not (has_vector(concepts[a]) and has_vector(concepts[b])):
            continue
        sim = cosine(concepts[a].embedding, concepts[b].embedding)
        if semantic_filter and sim < theta_sem:
            continue
        edges.append(ConceptEdge(a=a, b=b, co_count=co, sim=sim,
                                 weight=dice_weight(co, sizes[a], sizes[b])))
    params = {"theta_sem": theta_sem, "theta_co": theta_co,
              "semantic_filter": semantic_filter, "cooccurrence_scope": scope}
    logger.info(f"Built concept graph: {len(concepts)} concepts, {len(edges)} edges")
    return ConceptGraph(concepts, edges, params)


# ============================================
# RANKING
# ============================================

def rank_concepts(graph: ConceptGraph, damping: float = 0.85, max_iter: int = 100,
                  tol: float = 1e-8) -> PageRankResult:
    """
    Weighted PageRank over the undirected graph (each edge walked both ways,
    transitions proportional to Dice weight). Dangling mass is spread uniformly.
    Converged when the L1 change drops below tol; otherwise returns the last
    iterate with converged=False.
    """
    if not 0.0 < damping < 1.0:
        raise ValueError("damping must be in (0, 1)")
    nodes = list(graph.concepts)
    n = len(nodes)
    if n == 0:
        return PageRankResult({}, True, 0)
    adjacency = nx.to_scipy_sparse_array(graph.to_networkx(), nodelist=nodes,
                                         weight="weight", format="csr", dtype=np.float64)
    out_weight = np.asarray(adjacency.sum(axis=1)).ravel()
    inv = np.divide(1.0, out_weight, out=np.zeros(n), where=out_weight > 0)
    transition = sparse.diags(inv) @ adjacency
    dangling = out_weight == 0
    teleport = np.full(n, 1.0 / n)

    x = teleport.copy()
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        previous = x
        x = damping * (transition.T @ previous + previous[dangling].sum() * teleport) \
            + (1.0 - damping) * teleport
        x = x / x.sum()
        if np.abs(x - previous).sum() < tol:
            converged = True
            break
    if not converged:
        logger.warning(f"PageRank did not converge within {max_iter} iterations")
    return PageRankResult(dict(zip(nodes, (float(v) for v in x))), converged, iterations)


def rank_by_degree(graph: ConceptGraph) -> Dict[str, float]:
    """Weighted degree normalised to sum 1 (uniform when the graph has no edges)"""
    nodes = list(graph.concepts)
    if not nodes:
        return {}
    degree = dict(graph.to_networkx().degree(weight="weight"))
    total = sum(degree.values())
    if total == 0:
        return {cid: 1.0 / len(nodes) for cid in nodes}
    return {cid: degree[cid] / total for cid in nodes}


class ConceptGraphBuilder:
    """Runs extraction, vectorization, edge construction and ranking in order"""

    def __init__(self, config: Config, provider: EmbeddingProvider):
        self.config = config
        self.provider = provider
        self.last_ranking: Optional[PageRankResult] = None

    def build(self, store: ChunkStore,
              chunk_vectors: Optional[Dict[str, EmbeddingVector]] = None) -> ConceptGraph:
        cfg = self.config
        keywords = extract_concepts(store, cfg)
        concepts = build_concepts(keywords, store, cfg.linkage)
        logger.info(f"Extracted {len(concepts)} concepts from {len(store)} chunks")
        concepts = embed_concepts(concepts, store, self.provider, cfg.concept_embedding, chunk_vectors)
        graph = build_edges(concepts, store, cfg.theta_sem, cfg.theta_co,
                            cfg.semantic_filter, cfg.cooccurrence_scope)
        if cfg.concept_ranker == "degree":
            scores = rank_by_degree(graph)
            self.last_ranking = PageRankResult(scores, True, 0)
        else:
            self.last_ranking = rank_concepts(graph, cfg.pagerank_damping,
                                              cfg.pagerank_max_iter, cfg.pagerank_tol)
        graph = graph.with_pagerank(self.last_ranking.scores)
        graph.build_params.update({
            "keyword_count": cfg.keyword_count,
            "linkage": cfg.linkage,
            "concept_embedding": cfg.concept_embedding,
            "concept_ranker": cfg.concept_ranker,
            "pagerank_converged": self.last_ranking.converged,
        })
        return graph
